"""Kinematic skeleton, axis-angle poses and inverse linear-blend skinning.

All functions are pure; points map from observation space back to the
canonical (rest) space in which the neural field lives. Skinning weights
come from a softmax over squared point-to-bone-segment distances and are
treated as constants with respect to every trainable parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class SingularBlend(Exception):
    """Blended bone matrix is numerically singular for some query point."""


@dataclass
class Bone:
    name: str
    parent: int | None  # index into the bone list; None for the root
    head: np.ndarray    # rest-pose position, canonical meters
    tail: np.ndarray


class Skeleton:
    def __init__(self, bones):
        self.bones = list(bones)
        roots = [i for i, b in enumerate(self.bones) if b.parent is None]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root bone, got {len(roots)}")
        for i, b in enumerate(self.bones):
            if b.parent is not None and b.parent >= i:
                raise ValueError(f"bone {i} has parent {b.parent}; bones must "
                                 "be topologically sorted")

    @property
    def n_bones(self):
        return len(self.bones)

    @property
    def n_pose_dims(self):
        return 3 * len(self.bones)

    def heads(self):
        return np.stack([b.head for b in self.bones])

    def tails(self):
        return np.stack([b.tail for b in self.bones])

    def to_json(self, path):
        data = [{"name": b.name,
                 "parent": b.parent,
                 "head": list(map(float, b.head)),
                 "tail": list(map(float, b.tail))} for b in self.bones]
        with open(path, "w") as f:
            json.dump({"bones": data}, f, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            data = json.load(f)
        bones = [Bone(d["name"], d["parent"], np.asarray(d["head"], float),
                      np.asarray(d["tail"], float)) for d in data["bones"]]
        return cls(bones)


@dataclass
class Pose:
    theta: np.ndarray  # axis-angle per bone, flattened (3*n_bones,)
    frame_id: int = 0


def save_pose_track(path, poses):
    with open(path, "w") as f:
        json.dump([{"frame_id": p.frame_id,
                    "theta": list(map(float, p.theta))} for p in poses],
                  f, indent=1)


def load_pose_track(path):
    with open(path) as f:
        return [Pose(np.asarray(d["theta"], float), d["frame_id"])
                for d in json.load(f)]


def axis_angle_to_matrix(v):
    """Rodrigues formula for a single axis-angle 3-vector."""
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Per-bone 4x4 rigid transforms mapping canonical to observation space.

    Each bone rotates about its own rest head; children compose on top of
    their parent, so the rest pose yields identities.
    """
    theta = np.asarray(pose.theta, float)
    if theta.shape != (skeleton.n_pose_dims,):
        raise ValueError(f"pose has {theta.size} entries, skeleton needs "
                         f"{skeleton.n_pose_dims}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("pose contains non-finite entries")

    out = np.zeros((skeleton.n_bones, 4, 4))
    for i, bone in enumerate(skeleton.bones):
        local = np.eye(4)
        local[:3, :3] = axis_angle_to_matrix(theta[3 * i:3 * i + 3])
        local[:3, 3] = bone.head - local[:3, :3] @ bone.head
        out[i] = local if bone.parent is None else out[bone.parent] @ local
    return out


def _point_segment_dist(points, a, b):
    """Distances from points (N,3) to segments a->b (B,3); returns (N,B)."""
    ab = b - a                                   # (B,3)
    denom = np.maximum(np.einsum("bi,bi->b", ab, ab), 1e-18)
    ap = points[:, None, :] - a[None, :, :]      # (N,B,3)
    t = np.clip(np.einsum("nbi,bi->nb", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def skinning_weights(points_obs, skeleton: Skeleton, transforms,
                     temperature: float) -> np.ndarray:
    """Softmax over bones of -d^2/temperature; d is the distance from the
    observation-space point to the posed bone segment. Returns (N, n_bones)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    points_obs = np.atleast_2d(np.asarray(points_obs, float))
    heads_h = np.concatenate([skeleton.heads(), np.ones((skeleton.n_bones, 1))],
                             axis=1)
    tails_h = np.concatenate([skeleton.tails(), np.ones((skeleton.n_bones, 1))],
                             axis=1)
    posed_heads = np.einsum("bij,bj->bi", transforms, heads_h)[:, :3]
    posed_tails = np.einsum("bij,bj->bi", transforms, tails_h)[:, :3]
    d = _point_segment_dist(points_obs, posed_heads, posed_tails)
    logits = -d * d / temperature
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def inverse_lbs(points_obs, weights, transforms) -> np.ndarray:
    """Canonical points x_c = (sum_i w_i B_i)^-1 x_o, batched over points."""
    points_obs = np.atleast_2d(np.asarray(points_obs, float))
    weights = np.atleast_2d(np.asarray(weights, float))
    blended = np.einsum("nb,bij->nij", weights, transforms)  # (N,4,4)
    R = blended[:, :3, :3]
    t = blended[:, :3, 3]
    det = np.linalg.det(R)
    if np.any(np.abs(det) < 1e-12):
        raise SingularBlend("blended skinning matrix is singular")
    return np.linalg.solve(R, (points_obs - t)[..., None])[..., 0]


def canonicalize(points_obs, skeleton, transforms, temperature):
    """Convenience: skinning weights followed by the inverse-LBS map."""
    w = skinning_weights(points_obs, skeleton, transforms, temperature)
    return inverse_lbs(points_obs, w, transforms), w

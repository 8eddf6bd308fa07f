"""Synthetic articulated scenes with exact ground truth.

The analytic avatar is a union of capsules (smooth-min blended) carrying a
smooth low-frequency base albedo plus a pose-coupled high-frequency wrinkle
term, so the pose-independent/pose-dependent factorization that training is
supposed to discover exists by construction. Baked datasets are rendered by
dense ray marching of the analytic field and are byte-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .render import Camera, RayBatch, aabb_intersect, density_np, \
    generate_rays, look_at_camera, sample_ray
from .skeleton import (Bone, Pose, Skeleton, canonicalize,
                       forward_kinematics, load_pose_track, save_pose_track)

MANIFEST_VERSION = "facfield-scene-v1"


class DatasetError(Exception):
    """Manifest or frame data violates the dataset schema."""


def _segment_distance(pts, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-18)
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    closest = a[None] + t[:, None] * ab[None]
    return np.linalg.norm(pts - closest, axis=1)


def _smooth_min(a, b, k):
    """Polynomial smooth minimum; exact min when |a-b| >= k."""
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


@dataclass
class AnalyticAvatar:
    skeleton: Skeleton
    radii: np.ndarray            # capsule radius per bone
    smooth_k: float = 0.05
    temperature: float = 0.05    # skinning softmax temperature (m^2)
    base_freqs: tuple = (0.5, 0.4, 0.6)      # cycles/unit, per channel
    base_phases: tuple = (0.0, 2.1, 4.2)
    base_dirs: tuple = ((0.8, 0.6, 0.0), (0.0, 0.8, 0.6), (0.6, 0.0, 0.8))
    wrinkle_freq: float = 40.0   # cycles/unit along the canonical y axis
    wrinkle_color_amp: float = 0.4
    wrinkle_sdf_amp: float = 3e-4
    shell_width: float = 0.05

    def capsule_sdf(self, x_c):
        x_c = np.atleast_2d(np.asarray(x_c, float))
        d = None
        for bone, r in zip(self.skeleton.bones, self.radii):
            di = _segment_distance(x_c, bone.head, bone.tail) - r
            d = di if d is None else _smooth_min(d, di, self.smooth_k)
        return d

    def bend(self, theta):
        """Total bend angle of the non-root joints."""
        theta = np.asarray(theta, float).reshape(-1, 3)
        return float(sum(np.linalg.norm(theta[i])
                         for i, b in enumerate(self.skeleton.bones)
                         if b.parent is not None))

    def pose_coupling(self, theta):
        """g(theta): zero at rest, monotone in the bend angle."""
        return float(np.sin(self.bend(theta) / 2.0) ** 2)

    def _wrinkle(self, x_c, theta, s_cap):
        g = self.pose_coupling(theta)
        if g == 0.0 or self.wrinkle_freq <= 0:
            return np.zeros(len(x_c))
        shell = np.exp(-(s_cap / self.shell_width) ** 2)
        return g * shell * np.sin(2 * np.pi * self.wrinkle_freq * x_c[:, 1])

    def sdf(self, x_c, theta):
        x_c = np.atleast_2d(np.asarray(x_c, float))
        s_cap = self.capsule_sdf(x_c)
        return s_cap + self.wrinkle_sdf_amp * self._wrinkle(x_c, theta, s_cap)

    def base_albedo(self, x_c):
        x_c = np.atleast_2d(np.asarray(x_c, float))
        out = np.empty((len(x_c), 3))
        for ch in range(3):
            d = np.asarray(self.base_dirs[ch])
            proj = x_c @ (d / np.linalg.norm(d))
            out[:, ch] = 0.5 + 0.42 * np.sin(
                2 * np.pi * self.base_freqs[ch] * proj
                + self.base_phases[ch])
        return out

    def color(self, x_c, theta):
        x_c = np.atleast_2d(np.asarray(x_c, float))
        s_cap = self.capsule_sdf(x_c)
        shade = self.wrinkle_color_amp * self._wrinkle(x_c, theta, s_cap)
        return np.clip(self.base_albedo(x_c) + shade[:, None], 0.0, 1.0)

    # -- (de)serialization --------------------------------------------------
    def to_dict(self):
        return {"radii": list(map(float, self.radii)),
                "smooth_k": self.smooth_k,
                "temperature": self.temperature,
                "base_freqs": list(self.base_freqs),
                "base_phases": list(self.base_phases),
                "base_dirs": [list(d) for d in self.base_dirs],
                "wrinkle_freq": self.wrinkle_freq,
                "wrinkle_color_amp": self.wrinkle_color_amp,
                "wrinkle_sdf_amp": self.wrinkle_sdf_amp,
                "shell_width": self.shell_width}

    @classmethod
    def from_dict(cls, skeleton, d):
        return cls(skeleton=skeleton, radii=np.asarray(d["radii"], float),
                   smooth_k=d["smooth_k"], temperature=d["temperature"],
                   base_freqs=tuple(d["base_freqs"]),
                   base_phases=tuple(d["base_phases"]),
                   base_dirs=tuple(tuple(x) for x in d["base_dirs"]),
                   wrinkle_freq=d["wrinkle_freq"],
                   wrinkle_color_amp=d["wrinkle_color_amp"],
                   wrinkle_sdf_amp=d["wrinkle_sdf_amp"],
                   shell_width=d["shell_width"])


def make_elbow_avatar():
    """Two-bone elbow: upper arm fixed, forearm bends about z."""
    sk = Skeleton([
        Bone("upper", None, np.array([0.0, -0.3, 0.0]), np.zeros(3)),
        Bone("fore", 0, np.zeros(3), np.array([0.0, 0.3, 0.0])),
    ])
    return AnalyticAvatar(skeleton=sk, radii=np.array([0.1, 0.1]))


def make_sphere_avatar(radius=0.3):
    """Static single-sphere body (degenerate capsule); no wrinkles."""
    sk = Skeleton([Bone("core", None, np.zeros(3), np.zeros(3))])
    return AnalyticAvatar(skeleton=sk, radii=np.array([radius]),
                          wrinkle_freq=0.0, wrinkle_color_amp=0.0,
                          wrinkle_sdf_amp=0.0)


def make_humanoid_avatar():
    """24-bone humanoid for the full-skeleton fidelity check; geometry is a
    generic biped of height ~1.6 centered at the pelvis."""
    B = Bone

    def v(x, y, z):
        return np.array([x, y, z], float)

    bones = [
        B("pelvis", None, v(0, 0, 0), v(0, 0.1, 0)),
        B("spine1", 0, v(0, 0.1, 0), v(0, 0.25, 0)),
        B("spine2", 1, v(0, 0.25, 0), v(0, 0.4, 0)),
        B("spine3", 2, v(0, 0.4, 0), v(0, 0.5, 0)),
        B("neck", 3, v(0, 0.5, 0), v(0, 0.58, 0)),
        B("head", 4, v(0, 0.58, 0), v(0, 0.72, 0)),
        B("clav_l", 3, v(0, 0.48, 0), v(0.12, 0.48, 0)),
        B("uarm_l", 6, v(0.12, 0.48, 0), v(0.36, 0.48, 0)),
        B("farm_l", 7, v(0.36, 0.48, 0), v(0.58, 0.48, 0)),
        B("hand_l", 8, v(0.58, 0.48, 0), v(0.68, 0.48, 0)),
        B("clav_r", 3, v(0, 0.48, 0), v(-0.12, 0.48, 0)),
        B("uarm_r", 10, v(-0.12, 0.48, 0), v(-0.36, 0.48, 0)),
        B("farm_r", 11, v(-0.36, 0.48, 0), v(-0.58, 0.48, 0)),
        B("hand_r", 12, v(-0.58, 0.48, 0), v(-0.68, 0.48, 0)),
        B("thigh_l", 0, v(0.09, 0, 0), v(0.09, -0.38, 0)),
        B("shin_l", 14, v(0.09, -0.38, 0), v(0.09, -0.74, 0)),
        B("foot_l", 15, v(0.09, -0.74, 0), v(0.09, -0.8, 0.08)),
        B("toe_l", 16, v(0.09, -0.8, 0.08), v(0.09, -0.8, 0.14)),
        B("thigh_r", 0, v(-0.09, 0, 0), v(-0.09, -0.38, 0)),
        B("shin_r", 18, v(-0.09, -0.38, 0), v(-0.09, -0.74, 0)),
        B("foot_r", 19, v(-0.09, -0.74, 0), v(-0.09, -0.8, 0.08)),
        B("toe_r", 20, v(-0.09, -0.8, 0.08), v(-0.09, -0.8, 0.14)),
        B("sternum", 3, v(0, 0.44, 0), v(0, 0.44, 0.06)),
        B("tailbone", 0, v(0, 0, 0), v(0, -0.04, -0.05)),
    ]
    sk = Skeleton(bones)
    radii = np.full(len(bones), 0.05)
    radii[[0, 1, 2, 3]] = 0.11     # torso
    radii[5] = 0.09                # head
    radii[[14, 15, 18, 19]] = 0.07 # legs
    return AnalyticAvatar(skeleton=sk, radii=radii)


SCENES = {"elbow": make_elbow_avatar, "sphere": make_sphere_avatar,
          "humanoid": make_humanoid_avatar}


def elbow_pose(bend, frame_id=0):
    theta = np.zeros(6)
    theta[5] = bend
    return Pose(theta, frame_id)


# -- oracle renderer --------------------------------------------------------

def posed_aabb(avatar, transforms, margin=0.1):
    """Tight axis-aligned bounds of the posed body."""
    pts = []
    for bone, B, r in zip(avatar.skeleton.bones, transforms, avatar.radii):
        for p in (bone.head, bone.tail):
            pts.append((B @ np.append(p, 1.0))[:3])
    pts = np.asarray(pts)
    r = float(np.max(avatar.radii)) + margin
    return pts.min(axis=0) - r, pts.max(axis=0) + r


def oracle_render(avatar, camera, pose, background, n_steps=1024,
                  beta=0.002, chunk=4096, skip_margin=0.06):
    """Dense midpoint ray marching of the analytic field.

    Points whose observation-space capsule distance exceeds `skip_margin`
    contribute density below 1e-8 and skip the inverse-LBS transform.
    """
    transforms = forward_kinematics(avatar.skeleton, pose)
    bounds = posed_aabb(avatar, transforms)
    rays = generate_rays(camera, bounds)
    H, W = camera.height, camera.width
    rgb = np.tile(np.asarray(background, float), (H * W, 1))
    wsum = np.zeros(H * W)

    heads_h = np.concatenate([avatar.skeleton.heads(),
                              np.ones((avatar.skeleton.n_bones, 1))], axis=1)
    tails_h = np.concatenate([avatar.skeleton.tails(),
                              np.ones((avatar.skeleton.n_bones, 1))], axis=1)
    posed_heads = np.einsum("bij,bj->bi", transforms, heads_h)[:, :3]
    posed_tails = np.einsum("bij,bj->bi", transforms, tails_h)[:, :3]

    hit_idx = np.nonzero(rays.hits)[0]
    for i in range(0, len(hit_idx), chunk):
        idx = hit_idx[i:i + chunk]
        sub = RayBatch(rays.origins[idx], rays.dirs[idx], rays.t_near[idx],
                       rays.t_far[idx], rays.hits[idx], rays.pixels[idx])
        _, delta, pos = sample_ray(sub, n_steps)
        flat = pos.reshape(-1, 3)

        d_obs = None
        for b in range(avatar.skeleton.n_bones):
            di = _segment_distance(flat, posed_heads[b], posed_tails[b]) \
                - avatar.radii[b]
            d_obs = di if d_obs is None else np.minimum(d_obs, di)
        near = d_obs < skip_margin

        s = np.full(len(flat), 10.0)
        cols = np.zeros((len(flat), 3))
        if np.any(near):
            x_c, _ = canonicalize(flat[near], avatar.skeleton, transforms,
                                  avatar.temperature)
            s[near] = avatar.sdf(x_c, pose.theta)
            cols[near] = avatar.color(x_c, pose.theta)
        sigma = density_np(s.reshape(len(sub), n_steps), beta)
        tau = sigma * delta
        cum = np.cumsum(tau, axis=1)
        Ti = np.exp(-(cum - tau))
        w = Ti * (1.0 - np.exp(-tau))
        rgb[idx] = (w[..., None] * cols.reshape(len(sub), n_steps, 3)) \
            .sum(axis=1) + np.exp(-cum[:, -1])[:, None] \
            * np.asarray(background, float)
        wsum[idx] = w.sum(axis=1)
    return rgb.reshape(H, W, 3), wsum.reshape(H, W)


# -- dataset bake / load ----------------------------------------------------

def ring_cameras(n_views, resolution, distance=1.5, half_extent=0.55,
                 height=0.1):
    fx = resolution * distance / (2.0 * half_extent)
    cams = []
    for k in range(n_views):
        phi = 2 * np.pi * k / n_views
        eye = np.array([distance * np.sin(phi), height,
                        -distance * np.cos(phi)])
        cams.append(look_at_camera(eye, [0, 0, 0], [0, 1, 0], fx, fx,
                                   resolution, resolution))
    return cams


def _save_png(path, arr):
    Image.fromarray(arr).save(path)


def bake_dataset(avatar, n_views, n_poses, resolution, seed, out_dir,
                 background=(0.0, 0.0, 0.0), max_bend=1.5, n_steps=1024,
                 bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))):
    """Render the analytic scene to PNGs + manifest. Deterministic."""
    if resolution > 256:
        raise ValueError("desk-scale bake capped at 256^2")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "cameras").mkdir(parents=True, exist_ok=True)

    cams = ring_cameras(n_views, resolution)
    for k, cam in enumerate(cams):
        cam.to_json(out / "cameras" / f"view_{k:02d}.json")

    multi_pose = avatar.skeleton.n_bones > 1
    if multi_pose:
        bends = np.linspace(0.0, max_bend, n_poses)
    else:
        bends = np.zeros(n_poses)
    poses = []
    for j in range(n_poses):
        theta = np.zeros(avatar.skeleton.n_pose_dims)
        if multi_pose:
            theta[5] = bends[j]
        poses.append(Pose(theta, j))
    save_pose_track(out / "poses.json", poses)
    avatar.skeleton.to_json(out / "skeleton.json")

    frames = []
    fid = 0
    for j, pose in enumerate(poses):
        for k, cam in enumerate(cams):
            rgb, wsum = oracle_render(avatar, cam, pose, background,
                                      n_steps=n_steps)
            mask = wsum > 0.5
            img8 = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
            _save_png(out / "images" / f"{fid:04d}.png", img8)
            _save_png(out / "masks" / f"{fid:04d}.png",
                      (mask * 255).astype(np.uint8))
            frames.append({"image": f"images/{fid:04d}.png",
                           "mask": f"masks/{fid:04d}.png",
                           "camera": f"cameras/view_{k:02d}.json",
                           "pose_ref": j})
            fid += 1

    # hold interior poses out as novel-pose validation/test
    if multi_pose and n_poses >= 4:
        val_pose = n_poses // 3
        test_pose = (2 * n_poses) // 3
    else:
        val_pose = test_pose = -1
    splits = {"train": [], "val": [], "test": []}
    for i, fr in enumerate(frames):
        if fr["pose_ref"] == val_pose:
            splits["val"].append(i)
        elif fr["pose_ref"] == test_pose:
            splits["test"].append(i)
        else:
            splits["train"].append(i)

    manifest = {"version": MANIFEST_VERSION,
                "seed": seed,
                "skeleton_file": "skeleton.json",
                "pose_file": "poses.json",
                "bounds": [list(map(float, b)) for b in bounds],
                "background": list(map(float, background)),
                "frames": frames,
                "splits": splits,
                "avatar": avatar.to_dict()}
    with open(out / "scene.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return out / "scene.json"


@dataclass
class FrameRecord:
    image_path: Path
    mask_path: Path
    camera: Camera
    pose: Pose


class SceneDataset:
    def __init__(self, root, manifest, skeleton, poses, frames, splits,
                 bounds, background, avatar):
        self.root = Path(root)
        self.manifest = manifest
        self.skeleton = skeleton
        self.poses = poses
        self.frames = frames
        self.splits = splits
        self.bounds = bounds
        self.background = background
        self.avatar = avatar
        self._image_cache = {}
        self._mask_cache = {}

    def __len__(self):
        return len(self.frames)

    def image(self, i):
        if i not in self._image_cache:
            arr = np.asarray(Image.open(self.frames[i].image_path),
                             dtype=np.float64) / 255.0
            self._image_cache[i] = arr
        return self._image_cache[i]

    def mask(self, i):
        if i not in self._mask_cache:
            self._mask_cache[i] = np.asarray(
                Image.open(self.frames[i].mask_path)) > 0
        return self._mask_cache[i]


def _require(cond, pointer, msg):
    if not cond:
        raise DatasetError(f"{pointer}: {msg}")


def load_dataset(path) -> SceneDataset:
    """Load and validate a baked scene; images are read lazily."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    _require(path.exists(), "/", f"manifest {path} does not exist")
    root = path.parent
    with open(path) as f:
        m = json.load(f)
    _require(m.get("version") == MANIFEST_VERSION, "/version",
             f"unsupported version {m.get('version')!r}")
    for key in ("skeleton_file", "pose_file", "bounds", "background",
                "frames", "splits"):
        _require(key in m, f"/{key}", "missing required key")

    skeleton = Skeleton.from_json(root / m["skeleton_file"])
    poses = load_pose_track(root / m["pose_file"])
    for j, p in enumerate(poses):
        _require(p.theta.size == skeleton.n_pose_dims, f"/poses/{j}",
                 f"pose length {p.theta.size} != 3*N_B "
                 f"({skeleton.n_pose_dims})")

    cam_cache = {}
    frames = []
    for i, fr in enumerate(m["frames"]):
        ptr = f"/frames/{i}"
        for key in ("image", "mask", "camera", "pose_ref"):
            _require(key in fr, f"{ptr}/{key}", "missing key")
        img = root / fr["image"]
        msk = root / fr["mask"]
        _require(img.exists(), f"{ptr}/image", f"missing file {fr['image']}")
        _require(msk.exists(), f"{ptr}/mask",
                 f"missing mask file {fr['mask']} for frame {i}")
        _require(0 <= fr["pose_ref"] < len(poses), f"{ptr}/pose_ref",
                 "pose_ref out of range")
        if fr["camera"] not in cam_cache:
            cam_cache[fr["camera"]] = Camera.from_json(root / fr["camera"])
        frames.append(FrameRecord(img, msk, cam_cache[fr["camera"]],
                                  poses[fr["pose_ref"]]))

    splits = m["splits"]
    seen = sorted(i for ids in splits.values() for i in ids)
    _require(seen == list(range(len(frames))), "/splits",
             "split sets must be disjoint and cover all frames")

    avatar = None
    if "avatar" in m:
        avatar = AnalyticAvatar.from_dict(skeleton, m["avatar"])
    bounds = (np.asarray(m["bounds"][0], float),
              np.asarray(m["bounds"][1], float))
    return SceneDataset(root, m, skeleton, poses, frames, splits, bounds,
                        np.asarray(m["background"], float), avatar)

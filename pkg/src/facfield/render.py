"""Camera rays, SDF-to-density transform and transmittance quadrature."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .field import field_eval
from .skeleton import canonicalize


class RayMissesBounds(Exception):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: np.ndarray  # 4x4, camera looks along +z

    def __post_init__(self):
        self.world_from_camera = np.asarray(self.world_from_camera, float)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.world_from_camera[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump({"fx": self.fx, "fy": self.fy, "cx": self.cx,
                       "cy": self.cy, "w": self.width, "h": self.height,
                       "world_from_camera":
                           [list(map(float, r))
                            for r in self.world_from_camera]},
                      f, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["w"], d["h"],
                   np.asarray(d["world_from_camera"], float))


def look_at_camera(eye, target, up, fx, fy, width, height):
    eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    M = np.eye(4)
    M[:3, 0], M[:3, 1], M[:3, 2], M[:3, 3] = x, y, z, eye
    return Camera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0,
                  width, height, M)


@dataclass
class RayBatch:
    origins: np.ndarray   # (R,3)
    dirs: np.ndarray      # (R,3), unit
    t_near: np.ndarray    # (R,)
    t_far: np.ndarray
    hits: np.ndarray      # (R,) bool; misses composite pure background
    pixels: np.ndarray    # (R,2) integer (u,v)
    gt: np.ndarray | None = None
    is_fg: np.ndarray | None = None

    def __len__(self):
        return len(self.origins)


def aabb_intersect(origins, dirs, bounds):
    """Slab intersection with an axis-aligned box ((3,) lo, (3,) hi)."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    safe = np.where(dirs == 0, 1e-300, dirs)
    t0 = (lo - origins) / safe
    t1 = (hi - origins) / safe
    tmin = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    tmax = np.maximum(t0, t1).min(axis=1)
    hits = tmax > tmin
    return tmin, tmax, hits


def generate_rays(camera: Camera, bounds, pixels=None, image=None, mask=None,
                  background=(0.0, 0.0, 0.0)):
    """Back-project pixel centers of a pinhole camera into world-space rays.

    `pixels` is an (R,2) integer array of (u,v); defaults to the full frame.
    gt colors come from `image`; mask==0 pixels get the background color and
    is_fg False.
    """
    if pixels is None:
        u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        pixels = np.stack([u.ravel(), v.ravel()], axis=1)
    pixels = np.asarray(pixels)
    if (np.any(pixels < 0) or np.any(pixels[:, 0] >= camera.width)
            or np.any(pixels[:, 1] >= camera.height)):
        raise ValueError("pixel subset outside camera resolution")
    d_cam = np.stack([(pixels[:, 0] - camera.cx) / camera.fx,
                      (pixels[:, 1] - camera.cy) / camera.fy,
                      np.ones(len(pixels))], axis=1)
    R = camera.world_from_camera[:3, :3]
    dirs = d_cam @ R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.world_from_camera[:3, 3],
                              dirs.shape).copy()
    t0, t1, hits = aabb_intersect(origins, dirs, bounds)

    gt = is_fg = None
    if image is not None:
        gt = image[pixels[:, 1], pixels[:, 0]].astype(float)
        if mask is not None:
            is_fg = mask[pixels[:, 1], pixels[:, 0]] > 0
            gt = np.where(is_fg[:, None], gt, np.asarray(background, float))
        else:
            is_fg = np.ones(len(pixels), bool)
    return RayBatch(origins, dirs, t0, t1, hits, pixels, gt, is_fg)


def sample_ray(rays: RayBatch, n, stratified=False, rng=None):
    """n ordered samples per ray in [t_near, t_far].

    Midpoint rule when not stratified; jittered within each bin otherwise.
    delta_i = t_{i+1} - t_i with the trailing delta set to bin width.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    if not np.all(rays.hits):
        raise RayMissesBounds("a ray misses the scene bounds; composite "
                              "background instead of sampling")
    span = (rays.t_far - rays.t_near)[:, None]
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.uniform(size=(len(rays), n))
    else:
        u = np.full((len(rays), n), 0.5)
    t = rays.t_near[:, None] + (np.arange(n)[None, :] + u) / n * span
    delta = np.concatenate([t[:, 1:] - t[:, :-1], span / n], axis=1)
    pos = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    return t, delta, pos


# -- SDF to density ---------------------------------------------------------

def density_np(s, beta):
    """Laplace-CDF density: sigma = Psi_beta(-s) / beta."""
    s = np.asarray(s, float)
    a = 0.5 * np.exp(-np.abs(s) / beta)
    return np.where(s > 0, a, 1.0 - a) / beta


def density(s: T.Value, beta: T.Value) -> T.Value:
    a = (s.abs() * -1.0 / beta).exp() * 0.5
    return T.where(s.data > 0, a, 1.0 - a) / beta


# -- quadrature -------------------------------------------------------------

def quadrature_np(sigma, delta, colors, background):
    """Transmittance quadrature. sigma, delta: (R,n); colors: (R,n,3)."""
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    Ti = np.exp(-(cum - tau))
    alpha = 1.0 - np.exp(-tau)
    w = Ti * alpha
    T_res = np.exp(-cum[:, -1])
    color = (w[..., None] * colors).sum(axis=1) \
        + T_res[:, None] * np.asarray(background, float)
    return color, w, T_res


def quadrature(sigma: T.Value, delta, colors: T.Value, background):
    """Tape version; delta and background are constants."""
    tp = sigma.tape
    R, n = sigma.shape
    tau = sigma * tp.const(delta)
    cum = tau.cumsum(1)
    Ti = (-(cum - tau)).exp()
    alpha = 1.0 - (-tau).exp()
    w = Ti * alpha
    T_res = (-cum[:, -1]).exp()
    color = (w.reshape(R, n, 1) * colors).sum(axis=1) \
        + T_res.reshape(R, 1) * tp.const(np.asarray(background, float))
    return color, w, T_res


# -- whole-image rendering (inference, no tape) -----------------------------

class FieldSceneAdapter:
    """Field + skeleton pose wrapped as sdf/color callables over
    observation-space points."""

    def __init__(self, fp, skeleton, transforms, theta, mode, temperature):
        self.fp = fp
        self.skeleton = skeleton
        self.transforms = transforms
        self.theta = theta
        self.mode = mode
        self.temperature = temperature
        self._which = {"full": "combined", "independent": "independent",
                       "dependent": "dependent"}[mode]

    def canonical(self, pts_obs):
        x_c, _ = canonicalize(pts_obs, self.skeleton, self.transforms,
                              self.temperature)
        return x_c

    def sdf(self, pts_obs):
        return self.fp.sdf_np(self.canonical(pts_obs), self.theta,
                              self._which)

    def color_normal(self, pts_obs):
        out = field_eval(self.fp, self.canonical(pts_obs), self.theta,
                         mode=self.mode)
        return out.c, out.n

    @property
    def beta(self):
        return self.fp.beta


def render_rays_np(adapter, rays: RayBatch, n_samples, background,
                   stratified=False, rng=None, weight_gate=1e-10):
    """Inference-path rendering. Color and normals are only evaluated where
    quadrature weights exceed `weight_gate`; everything else is exact."""
    R = len(rays)
    color = np.tile(np.asarray(background, float), (R, 1))
    normal = np.zeros((R, 3))
    wsum = np.zeros(R)
    hit = rays.hits
    if not np.any(hit):
        return color, normal, wsum
    sub = RayBatch(rays.origins[hit], rays.dirs[hit], rays.t_near[hit],
                   rays.t_far[hit], rays.hits[hit], rays.pixels[hit])
    _, delta, pos = sample_ray(sub, n_samples, stratified, rng)
    flat = pos.reshape(-1, 3)
    s = adapter.sdf(flat).reshape(len(sub), n_samples)
    sigma = density_np(s, adapter.beta)
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    Ti = np.exp(-(cum - tau))
    w = Ti * (1.0 - np.exp(-tau))
    T_res = np.exp(-cum[:, -1])

    need = (w > weight_gate).reshape(-1)
    cols = np.zeros((len(flat), 3))
    norms = np.zeros((len(flat), 3))
    if np.any(need):
        c, nrm = adapter.color_normal(flat[need])
        cols[need] = c
        norms[need] = nrm
    cols = cols.reshape(len(sub), n_samples, 3)
    norms = norms.reshape(len(sub), n_samples, 3)
    color[hit] = (w[..., None] * cols).sum(axis=1) \
        + T_res[:, None] * np.asarray(background, float)
    normal[hit] = (w[..., None] * norms).sum(axis=1)
    wsum[hit] = w.sum(axis=1)
    return color, normal, wsum


def render_image(adapter, camera: Camera, bounds, n_samples, background,
                 chunk=2048, weight_gate=1e-10):
    """Render every pixel; returns rgb, normal map ((n+1)/2 encoding) and
    weight-sum map. Deterministic (midpoint sampling, no tape)."""
    H, W = camera.height, camera.width
    rays = generate_rays(camera, bounds)
    rgb = np.zeros((H * W, 3))
    nrm = np.zeros((H * W, 3))
    wsum = np.zeros(H * W)
    for i in range(0, len(rays), chunk):
        sl = slice(i, i + chunk)
        part = RayBatch(rays.origins[sl], rays.dirs[sl], rays.t_near[sl],
                        rays.t_far[sl], rays.hits[sl], rays.pixels[sl])
        c, n, ws = render_rays_np(adapter, part, n_samples, background,
                                  weight_gate=weight_gate)
        rgb[sl], nrm[sl], wsum[sl] = c, n, ws
    rgb = rgb.reshape(H, W, 3)
    normal_map = ((nrm / np.maximum(np.linalg.norm(nrm, axis=1,
                                                   keepdims=True), 1e-9)
                   + 1.0) / 2.0 * (wsum > 1e-3)[:, None]).reshape(H, W, 3)
    return rgb, normal_map, wsum.reshape(H, W)

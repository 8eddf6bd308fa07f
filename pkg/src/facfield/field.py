"""Dual-branch factorized neural field.

The pose-independent branch sees a low-frequency positional encoding of the
canonical point and outputs {s1, c1} plus feature vectors; the pose-dependent
branch sees a high-frequency encoding, the shared features and the pose, and
outputs residuals {s2, c2}. Combined outputs are s = s1 + s2 and
c = clamp(c1 + c2, 0, 1).

Normals fed to the color networks are finite-difference gradients computed
outside the tape (gradient-stopped); only the Eikonal path differentiates
through the SDF gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import tape as T
from .nn import MLP


class FieldModeError(Exception):
    """Evaluation mode and provided inputs disagree."""


@dataclass
class EncodingConfig:
    L_ind: int = 5
    L_d: int = 10
    include_input: bool = True

    def __post_init__(self):
        if not (0 < self.L_ind <= self.L_d):
            raise ValueError("require 0 < L_ind <= L_d")

    def dim(self, L):
        return 3 * ((1 if self.include_input else 0) + 2 * L)


def encode(x, L, include_input=True):
    """Octave sin/cos features: (x, sin(2^0 pi x), cos(2^0 pi x), ...)."""
    if L < 1:
        raise ValueError("band count must be >= 1")
    x = np.atleast_2d(np.asarray(x, float))
    parts = [x] if include_input else []
    for j in range(L):
        arg = (2.0 ** j) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


@dataclass
class FieldConfig:
    enc: EncodingConfig = dc_field(default_factory=EncodingConfig)
    n_pose_dims: int = 6
    sdf_width: int = 128
    sdf_depth: int = 4
    color_width: int = 128
    color_depth: int = 2
    feat_dim: int = 64
    use_feat: bool = True     # False realizes the no-feature ablation
    pose_lf: bool = False     # True moves the pose into the low-freq branch
    beta_init: float = 0.1
    grad_h: float = 1e-3
    geom_radius: float = 0.5
    geom_init_steps: int = 3500  # sphere pre-fit budget; 0 skips it

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("n_pose_dims", "sdf_width", "sdf_depth", "color_width",
              "color_depth", "feat_dim", "use_feat", "pose_lf", "beta_init",
              "grad_h", "geom_radius", "geom_init_steps")}
        d["enc"] = {"L_ind": self.enc.L_ind, "L_d": self.enc.L_d,
                    "include_input": self.enc.include_input}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = EncodingConfig(**d.pop("enc", {}))
        return cls(enc=enc, **d)


@dataclass
class FieldOutput:
    s1: object
    s2: object
    s: object
    c1: object
    c2: object
    c: object
    f_sdf_ind: object
    f_c_ind: object
    n1: object
    n: object


def _norm_rows(g, eps=1e-9):
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.where(n > eps, g / np.maximum(n, eps), g)


class FieldParams:
    """All weights of the four sub-networks plus the density sharpness."""

    def __init__(self, cfg: FieldConfig, rng):
        self.cfg = cfg
        e = cfg.enc
        pose = cfg.n_pose_dims
        in_sdf_ind = e.dim(e.L_ind) + (pose if cfg.pose_lf else 0)
        in_c_ind = cfg.feat_dim + 3
        in_sdf_dep = (e.dim(e.L_d) + (cfg.feat_dim if cfg.use_feat else 0)
                      + (0 if cfg.pose_lf else pose))
        in_c_dep = (cfg.feat_dim + (cfg.feat_dim if cfg.use_feat else 0)
                    + 3 + (0 if cfg.pose_lf else pose))

        def dims(inp, width, depth, out):
            return [inp] + [width] * depth + [out]

        self.mlp_sdf_ind = MLP("mlp_sdf_ind",
                               dims(in_sdf_ind, cfg.sdf_width, cfg.sdf_depth,
                                    1 + cfg.feat_dim), "softplus", rng)
        self.mlp_c_ind = MLP("mlp_c_ind",
                             dims(in_c_ind, cfg.color_width, cfg.color_depth,
                                  3 + cfg.feat_dim), "relu", rng)
        self.mlp_sdf_dep = MLP("mlp_sdf_dep",
                               dims(in_sdf_dep, cfg.sdf_width, cfg.sdf_depth,
                                    1 + cfg.feat_dim), "softplus", rng)
        self.mlp_c_dep = MLP("mlp_c_dep",
                             dims(in_c_dep, cfg.color_width, cfg.color_depth,
                                  3), "relu", rng)
        self.beta_raw = np.array(np.log(cfg.beta_init))

        self._geometric_init(rng)
        self._zero_residual_heads()

    # -- initialization -----------------------------------------------------
    def _geometric_init(self, rng):
        """Pre-fit the independent SDF net to the sphere ||x|| - r0 (values
        and FD gradients) so training never starts from an empty density
        field. Deterministic given the constructor rng."""
        from .nn import AdamState, adam_step

        steps = self.cfg.geom_init_steps
        mlp = self.mlp_sdf_ind
        mlp.layers[-1].W[1:, :] *= 0.1  # quiet feature rows
        if steps <= 0:
            return
        params = dict(mlp.named_params())
        state = AdamState(lr=3e-3)
        h = self.cfg.grad_h
        eye = np.eye(3)
        r0 = self.cfg.geom_radius
        theta0 = (np.zeros(self.cfg.n_pose_dims) if self.cfg.pose_lf else None)
        for i in range(steps):
            if i in (int(0.48 * steps), int(0.72 * steps), int(0.88 * steps)):
                state.lr *= 0.3
            shell = rng.normal(size=(64, 3))
            shell /= np.linalg.norm(shell, axis=1, keepdims=True)
            shell *= rng.uniform(0.85, 1.15, size=(64, 1))
            pts = np.vstack([rng.uniform(-1.3, 1.3, size=(128, 3)),
                             rng.normal(scale=0.2, size=(48, 3)),
                             rng.normal(scale=0.05, size=(16, 3)),
                             shell])
            n = len(pts)
            r = np.linalg.norm(pts, axis=1)
            target = r - r0
            gtarget = pts / np.maximum(r, 1e-9)[:, None]
            stack = np.concatenate(
                [pts] + [pts + h * eye[k] for k in range(3)]
                + [pts - h * eye[k] for k in range(3)], axis=0)
            tp = T.Tape()
            bound = {name: tp.param(arr) for name, arr in params.items()}
            s = mlp.forward(tp.const(self._enc_ind(stack, theta0)),
                            bound)[:, 0]
            cols = [(s[(1 + k) * n:(2 + k) * n] - s[(4 + k) * n:(5 + k) * n])
                    * (1.0 / (2 * h)) for k in range(3)]
            g = T.concat([c.reshape(n, 1) for c in cols], axis=1)
            d = s[0:n] - tp.const(target)
            gd = g - tp.const(gtarget)
            tp.backward((d * d).mean() + (gd * gd).mean())
            adam_step(params, {k: v.grad for k, v in bound.items()}, state)
            tp.release()

    def _zero_residual_heads(self):
        """Training starts from the pure pose-independent field."""
        last = self.mlp_sdf_dep.layers[-1]
        last.W[0, :] = 0.0
        last.b[0] = 0.0
        last = self.mlp_c_dep.layers[-1]
        last.W[:] = 0.0
        last.b[:] = 0.0

    # -- parameter plumbing -------------------------------------------------
    def mlps(self):
        return [self.mlp_sdf_ind, self.mlp_c_ind, self.mlp_sdf_dep,
                self.mlp_c_dep]

    def named_params(self):
        for m in self.mlps():
            yield from m.named_params()
        yield "beta_raw", self.beta_raw

    def param_dict(self):
        return dict(self.named_params())

    def load_param_dict(self, params):
        for m in self.mlps():
            for name, _ in list(m.named_params()):
                m.set_param(name, params[name])
        self.beta_raw = np.asarray(params["beta_raw"], float).reshape(())

    def bind(self, tp: T.Tape):
        bound = {}
        for m in self.mlps():
            for name, arr in m.named_params():
                bound[name] = tp.param(arr)
        bound["beta_raw"] = tp.param(self.beta_raw)
        return bound

    @property
    def beta(self):
        return float(np.exp(self.beta_raw))

    def beta_value(self, bound):
        return bound["beta_raw"].exp()

    # -- numpy (inference / gradient-stopped) paths -------------------------
    def _theta_rows(self, theta, n):
        theta = np.asarray(theta, float).reshape(-1)
        if theta.size != self.cfg.n_pose_dims:
            raise FieldModeError(
                f"pose has {theta.size} dims, field expects "
                f"{self.cfg.n_pose_dims}")
        return np.broadcast_to(theta, (n, theta.size))

    def _enc_ind(self, x, theta):
        enc = encode(x, self.cfg.enc.L_ind, self.cfg.enc.include_input)
        if self.cfg.pose_lf:
            if theta is None:
                raise FieldModeError("pose_lf wiring needs a pose")
            enc = np.concatenate([enc, self._theta_rows(theta, len(enc))],
                                 axis=1)
        return enc

    def sdf_ind_np(self, x, theta=None):
        out = self.mlp_sdf_ind.forward_np(self._enc_ind(x, theta))
        return out[:, 0], out[:, 1:]

    def sdf_np(self, x, theta=None, which="combined"):
        """SDF values without the tape. which: combined|independent|dependent."""
        x = np.atleast_2d(np.asarray(x, float))
        s1, f1 = self.sdf_ind_np(x, theta)
        if which == "independent":
            return s1
        if theta is None:
            raise FieldModeError(f"mode {which!r} requires a pose")
        enc = encode(x, self.cfg.enc.L_d, self.cfg.enc.include_input)
        parts = [enc]
        if self.cfg.use_feat:
            parts.append(f1)
        if not self.cfg.pose_lf:
            parts.append(self._theta_rows(theta, len(x)))
        s2 = self.mlp_sdf_dep.forward_np(np.concatenate(parts, axis=1))[:, 0]
        if which == "dependent":
            return s2
        if which == "combined":
            return s1 + s2
        raise FieldModeError(f"unknown which {which!r}")


def fd_gradient(sdf_fn, x, h=1e-3):
    """Central-difference spatial gradient of a batched SDF callable."""
    x = np.atleast_2d(np.asarray(x, float))
    n = len(x)
    pts = np.concatenate([x + h * np.eye(3)[k] for k in range(3)]
                         + [x - h * np.eye(3)[k] for k in range(3)], axis=0)
    s = np.asarray(sdf_fn(pts))
    g = np.empty((n, 3))
    for k in range(3):
        g[:, k] = (s[k * n:(k + 1) * n] - s[(3 + k) * n:(4 + k) * n]) / (2 * h)
    return g


def sdf_gradient(fp: FieldParams, x, theta=None, which="combined", h=None):
    """Gradient-stopped FD gradient of the chosen SDF (numpy path)."""
    h = fp.cfg.grad_h if h is None else h
    return fd_gradient(lambda p: fp.sdf_np(p, theta, which), x, h)


def sdf_gradient_tape(fp: FieldParams, x, bound, theta=None,
                      theta_value=None, which="combined", h=None):
    """FD gradient evaluated on the tape so parameter gradients flow
    (first-order only); returns a Value of shape (N, 3)."""
    h = fp.cfg.grad_h if h is None else h
    x = np.atleast_2d(np.asarray(x, float))
    n = len(x)
    pts = np.concatenate([x + h * np.eye(3)[k] for k in range(3)]
                         + [x - h * np.eye(3)[k] for k in range(3)], axis=0)
    s = sdf_tape(fp, pts, bound, theta=theta, theta_value=theta_value,
                 which=which)
    cols = [(s[k * n:(k + 1) * n] - s[(3 + k) * n:(4 + k) * n])
            * (1.0 / (2 * h)) for k in range(3)]
    return T.concat([c.reshape(n, 1) for c in cols], axis=1)


def _theta_value_rows(fp, tp, theta, theta_value, n):
    if theta_value is not None:
        return theta_value.reshape(1, -1) + tp.const(
            np.zeros((n, fp.cfg.n_pose_dims)))
    return tp.const(fp._theta_rows(theta, n))


def sdf_tape(fp: FieldParams, x, bound, theta=None, theta_value=None,
             which="combined"):
    """SDF on the tape. `theta_value` (a tape Value) takes precedence over
    the constant `theta` so poses can be refined during training."""
    tp = next(iter(bound.values())).tape
    x = np.atleast_2d(np.asarray(x, float))
    n = len(x)
    enc1 = encode(x, fp.cfg.enc.L_ind, fp.cfg.enc.include_input)
    x1 = tp.const(enc1)
    if fp.cfg.pose_lf:
        if theta is None and theta_value is None:
            raise FieldModeError("pose_lf wiring needs a pose")
        x1 = T.concat([x1, _theta_value_rows(fp, tp, theta, theta_value, n)],
                      axis=1)
    out1 = fp.mlp_sdf_ind.forward(x1, bound)
    s1 = out1[:, 0]
    if which == "independent":
        return s1
    if theta is None and theta_value is None:
        raise FieldModeError(f"mode {which!r} requires a pose")
    parts = [tp.const(encode(x, fp.cfg.enc.L_d, fp.cfg.enc.include_input))]
    if fp.cfg.use_feat:
        parts.append(out1[:, 1:])
    if not fp.cfg.pose_lf:
        parts.append(_theta_value_rows(fp, tp, theta, theta_value, n))
    s2 = fp.mlp_sdf_dep.forward(T.concat(parts, axis=1), bound)[:, 0]
    if which == "dependent":
        return s2
    if which == "combined":
        return s1 + s2
    if which == "parts":
        return s1, s2
    raise FieldModeError(f"unknown which {which!r}")


def field_eval(fp: FieldParams, x_c, theta=None, mode="full", bound=None,
               theta_value=None):
    """Evaluate the full field. mode: full | independent | dependent.

    With `bound` (dict of tape Values) the outputs are Values and parameter
    gradients flow; otherwise everything is plain numpy. Normals are always
    gradient-stopped numpy arrays.
    """
    if mode not in ("full", "independent", "dependent"):
        raise FieldModeError(f"unknown mode {mode!r}")
    if mode != "independent" and theta is None and theta_value is None:
        raise FieldModeError(f"mode {mode!r} requires a pose")

    x_c = np.atleast_2d(np.asarray(x_c, float))
    n = len(x_c)
    theta_np = theta
    if theta_np is None and theta_value is not None:
        theta_np = theta_value.data

    # gradient-stopped normals (numpy, shared FD stencil for s1 and s)
    n1 = _norm_rows(sdf_gradient(fp, x_c, theta_np, "independent"))
    if mode == "independent":
        nrm = n1
    else:
        nrm = _norm_rows(sdf_gradient(fp, x_c, theta_np, "combined"))

    if bound is None:
        return _field_eval_np(fp, x_c, theta_np, mode, n1, nrm)

    tp = next(iter(bound.values())).tape
    enc1 = encode(x_c, fp.cfg.enc.L_ind, fp.cfg.enc.include_input)
    x1 = tp.const(enc1)
    if fp.cfg.pose_lf:
        x1 = T.concat([x1, _theta_value_rows(fp, tp, theta, theta_value, n)],
                      axis=1)
    out1 = fp.mlp_sdf_ind.forward(x1, bound)
    s1, f_sdf = out1[:, 0], out1[:, 1:]
    cin1 = T.concat([f_sdf, tp.const(n1)], axis=1)
    cout1 = fp.mlp_c_ind.forward(cin1, bound)
    c1 = T.sigmoid(cout1[:, 0:3])
    f_c = cout1[:, 3:]

    if mode == "independent":
        return FieldOutput(s1=s1, s2=None, s=s1, c1=c1, c2=None, c=c1,
                           f_sdf_ind=f_sdf, f_c_ind=f_c, n1=n1, n=n1)

    parts = [tp.const(encode(x_c, fp.cfg.enc.L_d, fp.cfg.enc.include_input))]
    if fp.cfg.use_feat:
        parts.append(f_sdf)
    if not fp.cfg.pose_lf:
        parts.append(_theta_value_rows(fp, tp, theta, theta_value, n))
    out2 = fp.mlp_sdf_dep.forward(T.concat(parts, axis=1), bound)
    s2, f_sdf_dep = out2[:, 0], out2[:, 1:]
    cparts = [f_sdf_dep]
    if fp.cfg.use_feat:
        cparts.append(f_c)
    cparts.append(tp.const(nrm))
    if not fp.cfg.pose_lf:
        cparts.append(_theta_value_rows(fp, tp, theta, theta_value, n))
    c2 = T.tanh(fp.mlp_c_dep.forward(T.concat(cparts, axis=1), bound))

    if mode == "dependent":
        return FieldOutput(s1=s1, s2=s2, s=s2, c1=c1, c2=c2,
                           c=c2.clamp(0.0, 1.0), f_sdf_ind=f_sdf, f_c_ind=f_c,
                           n1=n1, n=nrm)
    return FieldOutput(s1=s1, s2=s2, s=s1 + s2, c1=c1, c2=c2,
                       c=(c1 + c2).clamp(0.0, 1.0), f_sdf_ind=f_sdf,
                       f_c_ind=f_c, n1=n1, n=nrm)


def _field_eval_np(fp, x_c, theta, mode, n1, nrm):
    n = len(x_c)
    s1, f_sdf = fp.sdf_ind_np(x_c, theta)
    cout1 = fp.mlp_c_ind.forward_np(np.concatenate([f_sdf, n1], axis=1))
    c1 = T.ACTIVATIONS_NP["sigmoid"](cout1[:, 0:3])
    f_c = cout1[:, 3:]
    if mode == "independent":
        return FieldOutput(s1=s1, s2=None, s=s1, c1=c1, c2=None, c=c1,
                           f_sdf_ind=f_sdf, f_c_ind=f_c, n1=n1, n=n1)
    parts = [encode(x_c, fp.cfg.enc.L_d, fp.cfg.enc.include_input)]
    if fp.cfg.use_feat:
        parts.append(f_sdf)
    if not fp.cfg.pose_lf:
        parts.append(fp._theta_rows(theta, n))
    out2 = fp.mlp_sdf_dep.forward_np(np.concatenate(parts, axis=1))
    s2, f_sdf_dep = out2[:, 0], out2[:, 1:]
    cparts = [f_sdf_dep]
    if fp.cfg.use_feat:
        cparts.append(f_c)
    cparts.append(nrm)
    if not fp.cfg.pose_lf:
        cparts.append(fp._theta_rows(theta, n))
    c2 = np.tanh(fp.mlp_c_dep.forward_np(np.concatenate(cparts, axis=1)))
    if mode == "dependent":
        return FieldOutput(s1=s1, s2=s2, s=s2, c1=c1, c2=c2,
                           c=np.clip(c2, 0.0, 1.0), f_sdf_ind=f_sdf,
                           f_c_ind=f_c, n1=n1, n=nrm)
    return FieldOutput(s1=s1, s2=s2, s=s1 + s2, c1=c1, c2=c2,
                       c=np.clip(c1 + c2, 0.0, 1.0), f_sdf_ind=f_sdf,
                       f_c_ind=f_c, n1=n1, n=nrm)

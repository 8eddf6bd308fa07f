import numpy as np
import pytest

from facfield.field import (EncodingConfig, FieldConfig, FieldModeError,
                            FieldParams, encode, fd_gradient, field_eval,
                            sdf_gradient, sdf_gradient_tape, sdf_tape)
from facfield.tape import Tape


def small_cfg(**kw):
    kw.setdefault("sdf_width", 32)
    kw.setdefault("sdf_depth", 2)
    kw.setdefault("color_width", 32)
    kw.setdefault("color_depth", 2)
    kw.setdefault("feat_dim", 16)
    kw.setdefault("geom_init_steps", 0)
    return FieldConfig(**kw)


@pytest.fixture(scope="module")
def geom_field():
    """Field with the full sphere pre-fit; shared because it is expensive."""
    cfg = FieldConfig(sdf_width=64, sdf_depth=4, color_width=64,
                      color_depth=2, feat_dim=32)
    return FieldParams(cfg, np.random.default_rng(0))


# -- encodings --------------------------------------------------------------

def test_encode_zero_point():
    out = encode(np.zeros((1, 3)), L=5)
    assert out.shape == (1, 33)
    assert np.allclose(out[0, :3], 0)
    sins = out[0, 3::6], out[0, 4::6], out[0, 5::6]
    # layout: [x, sin b0, cos b0, sin b1, cos b1, ...] in blocks of 3
    assert np.allclose(out[0, 3:9], [0, 0, 0, 1, 1, 1])


def test_encode_lengths():
    assert encode(np.zeros((1, 3)), L=10).shape == (1, 63)


def test_encode_band_values():
    out = encode(np.array([[0.5, 0.0, 0.0]]), L=2)
    # band 0: sin(pi/2)=1, cos(pi/2)=0; band 1: sin(pi)~0, cos(pi)=-1
    assert np.isclose(out[0, 3], 1.0)
    assert np.isclose(out[0, 6], 0.0)
    assert np.isclose(out[0, 9], 0.0, atol=1e-12)
    assert np.isclose(out[0, 12], -1.0)


def test_encoding_config_validation():
    with pytest.raises(ValueError):
        EncodingConfig(L_ind=0)
    with pytest.raises(ValueError):
        EncodingConfig(L_ind=8, L_d=5)


# -- geometric initialization ----------------------------------------------

def test_geometric_init_sphere_value(geom_field):
    s = geom_field.sdf_np(np.zeros((1, 3)), which="independent")
    assert abs(s[0] + 0.5) < 0.05


def test_geometric_init_sphere_normal(geom_field):
    g = sdf_gradient(geom_field, np.array([[1.0, 0, 0]]),
                     which="independent")
    g = g / np.linalg.norm(g)
    assert np.all(np.abs(g - [1, 0, 0]) < 0.05)


# -- architecture wiring ----------------------------------------------------

def test_c1_in_unit_interval():
    fp = FieldParams(small_cfg(), np.random.default_rng(1))
    pts = np.random.default_rng(2).uniform(-1, 1, size=(10_000, 3))
    out = field_eval(fp, pts, mode="independent")
    assert np.all(out.c1 >= 0) and np.all(out.c1 <= 1)


def test_zero_residual_heads_at_init():
    fp = FieldParams(small_cfg(), np.random.default_rng(3))
    pts = np.random.default_rng(4).uniform(-1, 1, size=(50, 3))
    theta = np.random.default_rng(5).normal(size=6)
    full = field_eval(fp, pts, theta, mode="full")
    ind = field_eval(fp, pts, mode="independent")
    assert np.allclose(full.s2, 0) and np.allclose(full.c2, 0)
    assert np.array_equal(full.s, ind.s)
    assert np.array_equal(full.c, ind.c)


def test_independent_branch_pose_invariant():
    fp = FieldParams(small_cfg(), np.random.default_rng(6))
    pts = np.random.default_rng(7).uniform(-1, 1, size=(20, 3))
    outs = [field_eval(fp, pts, mode="independent").s for _ in range(5)]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


def test_additivity_s_equals_s1_plus_s2():
    fp = FieldParams(small_cfg(), np.random.default_rng(8))
    # give the residual head real weights
    fp.mlp_sdf_dep.layers[-1].W[0, :] = 0.05
    pts = np.random.default_rng(9).uniform(-1, 1, size=(10_000, 3))
    theta = np.random.default_rng(10).normal(size=6)
    out = field_eval(fp, pts, theta, mode="full")
    assert np.array_equal(out.s, out.s1 + out.s2)


def test_no_feat_ablation_dimensions():
    cfg = small_cfg(use_feat=False)
    fp = FieldParams(cfg, np.random.default_rng(11))
    enc_dim = cfg.enc.dim(cfg.enc.L_d)
    assert fp.mlp_sdf_dep.in_dim == enc_dim + cfg.n_pose_dims
    full_cfg = small_cfg()
    fp2 = FieldParams(full_cfg, np.random.default_rng(11))
    assert fp2.mlp_sdf_dep.in_dim == enc_dim + cfg.n_pose_dims + cfg.feat_dim


def test_pose_lf_breaks_invariance():
    fp = FieldParams(small_cfg(pose_lf=True), np.random.default_rng(12))
    pts = np.random.default_rng(13).uniform(-1, 1, size=(20, 3))
    a = field_eval(fp, pts, np.zeros(6), mode="independent").s
    b = field_eval(fp, pts, np.full(6, 0.5), mode="independent").s
    assert np.max(np.abs(a - b)) > 0


def test_mode_pose_mismatch_errors():
    fp = FieldParams(small_cfg(), np.random.default_rng(14))
    with pytest.raises(FieldModeError):
        field_eval(fp, np.zeros((1, 3)), mode="full")
    with pytest.raises(FieldModeError):
        field_eval(fp, np.zeros((1, 3)), mode="sideways")


def test_normal_normalization():
    fp = FieldParams(small_cfg(), np.random.default_rng(15))
    pts = np.random.default_rng(16).uniform(-1, 1, size=(200, 3))
    out = field_eval(fp, pts, np.zeros(6), mode="full")
    raw = sdf_gradient(fp, pts, np.zeros(6), "combined")
    big = np.linalg.norm(raw, axis=1) > 1e-9
    norms = np.linalg.norm(out.n[big], axis=1)
    assert np.all(np.abs(norms - 1) < 1e-6)


# -- finite-difference gradient oracle checks -------------------------------

def test_fd_gradient_exact_on_plane():
    a = np.array([0.6, -0.48, 0.64])
    a /= np.linalg.norm(a)
    pts = np.random.default_rng(17).uniform(-1, 1, size=(30, 3))
    g = fd_gradient(lambda p: p @ a, pts, h=1e-3)
    assert np.allclose(g, a, atol=1e-9)


def test_fd_gradient_sphere_stub():
    g = fd_gradient(lambda p: np.linalg.norm(p, axis=1) - 0.5,
                    np.array([[0.3, 0.0, 0.0]]), h=1e-3)
    assert np.allclose(g[0], [1, 0, 0], atol=1e-5)


def test_fd_gradient_second_order_convergence():
    sdf = lambda p: np.linalg.norm(p, axis=1) - 0.5
    rng = np.random.default_rng(18)
    pts = rng.uniform(0.2, 0.8, size=(20, 3))
    exact = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    err_h = np.abs(fd_gradient(sdf, pts, h=2e-3) - exact).max()
    err_h2 = np.abs(fd_gradient(sdf, pts, h=1e-3) - exact).max()
    assert err_h2 < err_h / 3.0  # halving h roughly quarters the error


# -- tape path --------------------------------------------------------------

def test_tape_field_matches_numpy():
    fp = FieldParams(small_cfg(), np.random.default_rng(19))
    fp.mlp_sdf_dep.layers[-1].W[0, :] = 0.03
    fp.mlp_c_dep.layers[-1].W[:] = 0.02
    pts = np.random.default_rng(20).uniform(-1, 1, size=(13, 3))
    theta = np.random.default_rng(21).normal(size=6)
    ref = field_eval(fp, pts, theta, mode="full")
    tp = Tape()
    out = field_eval(fp, pts, theta, mode="full", bound=fp.bind(tp))
    for name in ("s1", "s2", "s", "c1", "c2", "c"):
        assert np.array_equal(getattr(out, name).data, getattr(ref, name)), name


def test_tape_gradients_reach_all_networks():
    fp = FieldParams(small_cfg(), np.random.default_rng(22))
    fp.mlp_sdf_dep.layers[-1].W[0, :] = 0.03
    fp.mlp_c_dep.layers[-1].W[:] = 0.02
    pts = np.random.default_rng(23).uniform(-1, 1, size=(8, 3))
    tp = Tape()
    bound = fp.bind(tp)
    out = field_eval(fp, pts, np.full(6, 0.3), mode="full", bound=bound)
    tp.backward((out.s.sum() + out.c.sum()))
    for mlp in fp.mlps():
        got = any(bound[name].grad is not None
                  and np.any(bound[name].grad != 0)
                  for name, _ in mlp.named_params())
        assert got, mlp.prefix


def test_tape_pose_gradient_flows():
    fp = FieldParams(small_cfg(), np.random.default_rng(24))
    fp.mlp_sdf_dep.layers[-1].W[0, :] = 0.1
    pts = np.random.default_rng(25).uniform(-1, 1, size=(8, 3))
    tp = Tape()
    bound = fp.bind(tp)
    theta_v = tp.param(np.full(6, 0.2))
    s = sdf_tape(fp, pts, bound, theta_value=theta_v, which="combined")
    tp.backward(s.sum())
    assert theta_v.grad is not None and np.any(theta_v.grad != 0)


def test_sdf_gradient_tape_matches_numpy_fd():
    fp = FieldParams(small_cfg(), np.random.default_rng(26))
    fp.mlp_sdf_dep.layers[-1].W[0, :] = 0.05
    pts = np.random.default_rng(27).uniform(-0.5, 0.5, size=(6, 3))
    theta = np.full(6, 0.1)
    tp = Tape()
    g = sdf_gradient_tape(fp, pts, fp.bind(tp), theta=theta)
    ref = sdf_gradient(fp, pts, theta, "combined")
    assert np.allclose(g.data, ref, atol=1e-12)

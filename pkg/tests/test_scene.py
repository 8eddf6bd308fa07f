import json

import numpy as np
import pytest

from facfield.field import fd_gradient
from facfield.scene import (AnalyticAvatar, DatasetError, bake_dataset,
                            load_dataset, make_elbow_avatar,
                            make_sphere_avatar, oracle_render, posed_aabb,
                            ring_cameras)
from facfield.skeleton import Pose, forward_kinematics


def bend_pose(avatar, bend):
    theta = np.zeros(avatar.skeleton.n_pose_dims)
    theta[5] = bend
    return Pose(theta, 0)


# -- analytic field invariants ----------------------------------------------

def test_sphere_sdf_exact():
    av = make_sphere_avatar(radius=0.3)
    pts = np.array([[0.0, 0, 0], [0.3, 0, 0], [0.6, 0, 0], [0, -0.45, 0]])
    s = av.sdf(pts, np.zeros(3))
    assert np.allclose(s, [-0.3, 0.0, 0.3, 0.15], atol=1e-12)


def test_capsule_union_matches_min_away_from_blend():
    av = make_elbow_avatar()
    pts = np.array([[0.3, -0.25, 0.0], [0.0, 0.45, 0.1]])
    # brute-force min over the two capsules
    def cap(p, a, b, r):
        ab = b - a
        t = np.clip((p - a) @ ab / (ab @ ab), 0, 1)
        return np.linalg.norm(p - (a + t * ab)) - r
    a1, b1 = np.array([0, -0.3, 0.]), np.zeros(3)
    a2, b2 = np.zeros(3), np.array([0, 0.3, 0.])
    ref = [min(cap(p, a1, b1, 0.1), cap(p, a2, b2, 0.1)) for p in pts]
    assert np.allclose(av.capsule_sdf(pts), ref, atol=1e-12)


def test_rest_pose_has_no_wrinkles():
    av = make_elbow_avatar()
    theta = np.zeros(6)
    pts = np.random.default_rng(0).uniform(-0.3, 0.3, size=(50, 3))
    assert np.array_equal(av.sdf(pts, theta), av.capsule_sdf(pts))
    assert av.pose_coupling(theta) == 0.0


def test_pose_coupling_monotone_in_bend():
    av = make_elbow_avatar()
    gs = [av.pose_coupling(bend_pose(av, b).theta)
          for b in np.linspace(0, 1.5, 6)]
    assert all(b > a for a, b in zip(gs, gs[1:]))
    assert gs[0] == 0.0


def test_eikonal_away_from_blends_and_axis():
    """|grad s| = 1 wherever the capsule union is an exact distance."""
    av = make_elbow_avatar()
    rng = np.random.default_rng(1)
    pts = rng.uniform([-0.4, -0.45, -0.4], [0.4, 0.45, 0.4], size=(4000, 3))
    def cap(p, a, b, r):
        ab = b - a
        t = np.clip((p - a) @ ab / (ab @ ab), 0, 1)[:, None]
        return np.linalg.norm(p - (a[None] + t * ab[None]), axis=1) - r

    dA = cap(pts, np.array([0, -0.3, 0.]), np.zeros(3), 0.1)
    dB = cap(pts, np.zeros(3), np.array([0, 0.3, 0.]), 0.1)
    # the smooth min only deviates from the hard min where |dA-dB| < k;
    # also keep clear of the medial axis where the capsule sdf kinks
    far_from_axis = np.linalg.norm(pts[:, [0, 2]], axis=1) > 0.02
    keep = far_from_axis & (np.abs(dA - dB) > 2 * av.smooth_k)
    pts = pts[keep][:500]
    g = fd_gradient(lambda p: av.capsule_sdf(p), pts, h=1e-5)
    assert np.allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-6)


def test_wrinkle_sdf_keeps_eikonal_band():
    av = make_elbow_avatar()
    theta = bend_pose(av, 1.2).theta
    rng = np.random.default_rng(2)
    # points in the surface shell, away from blends/axis
    raw = rng.uniform([-0.25, -0.45, -0.25], [0.25, 0.45, 0.25],
                      size=(6000, 3))
    d = av.capsule_sdf(raw)
    keep = (np.abs(d) < 0.04) & (np.abs(raw[:, 1]) > 0.15)
    pts = raw[keep][:400]
    g = fd_gradient(lambda p: av.sdf(p, theta), pts, h=1e-5)
    n = np.linalg.norm(g, axis=1)
    assert np.all(n > 0.9) and np.all(n < 1.1)


def test_color_in_unit_cube():
    av = make_elbow_avatar()
    pts = np.random.default_rng(3).uniform(-0.5, 0.5, size=(2000, 3))
    for b in (0.0, 0.8, 1.5):
        c = av.color(pts, bend_pose(av, b).theta)
        assert np.all(c >= 0) and np.all(c <= 1)


def test_base_albedo_is_low_frequency():
    """Non-DC spectral mass of the base albedo sits below 8 cycles/unit."""
    av = make_elbow_avatar()
    n, span = 1024, 2.0
    t = np.linspace(-span / 2, span / 2, n, endpoint=False)
    line = np.stack([np.full(n, 0.03), t, np.full(n, 0.05)], axis=1)
    sig = av.base_albedo(line)[:, 0]
    win = np.hanning(n)
    spec = np.abs(np.fft.rfft((sig - sig.mean()) * win)) ** 2
    freqs = np.fft.rfftfreq(n, d=span / n)  # cycles/unit
    assert spec[freqs >= 8.0].sum() / spec.sum() < 0.01


def test_wrinkle_is_high_frequency():
    av = make_elbow_avatar()
    theta = bend_pose(av, 1.5).theta
    n, span = 2048, 0.5
    t = np.linspace(-0.25, 0.25, n, endpoint=False)
    # shell points along y on the forearm surface
    line = np.stack([np.full(n, 0.1), t, np.zeros(n)], axis=1)
    sig = av.color(line, theta)[:, 1] - av.base_albedo(line)[:, 1]
    win = np.hanning(n)
    spec = np.abs(np.fft.rfft((sig - sig.mean()) * win)) ** 2
    freqs = np.fft.rfftfreq(n, d=span / n)
    assert spec[freqs >= 32.0].sum() / spec.sum() > 0.9
    assert 32.0 < av.wrinkle_freq < 512.0


# -- oracle renderer ---------------------------------------------------------

def test_posed_aabb_contains_body():
    av = make_elbow_avatar()
    pose = bend_pose(av, 1.3)
    tfs = forward_kinematics(av.skeleton, pose)
    lo, hi = posed_aabb(av, tfs)
    # surface points of the posed forearm tail sphere must be inside
    tail = (tfs[1] @ np.array([0, 0.3, 0, 1.0]))[:3]
    assert np.all(tail - 0.1 >= lo) and np.all(tail + 0.1 <= hi)


def test_oracle_render_sphere_background_and_mask():
    av = make_sphere_avatar(radius=0.3)
    cam = ring_cameras(1, 48)[0]
    rgb, wsum = oracle_render(av, cam, Pose(np.zeros(3)), (0.1, 0.2, 0.3),
                              n_steps=256)
    assert rgb.shape == (48, 48, 3)
    assert np.allclose(rgb[0, 0], [0.1, 0.2, 0.3], atol=1e-12)  # corner ray
    assert wsum[0, 0] < 1e-9
    assert wsum[24, 24] > 0.999  # center ray hits the sphere head-on


def test_oracle_render_center_color_matches_surface_point():
    av = make_sphere_avatar(radius=0.3)
    cam = ring_cameras(1, 48)[0]
    rgb, _ = oracle_render(av, cam, Pose(np.zeros(3)), (0, 0, 0),
                           n_steps=512)
    # center pixel sees the surface point nearest the camera; the rendered
    # color averages albedo over the ~0.01-deep density shell, so allow a
    # few-percent smear
    eye = cam.world_from_camera[:3, 3]
    surf = eye / np.linalg.norm(eye) * 0.3  # point facing the camera
    expect = av.color(surf[None], np.zeros(3))[0]
    assert np.allclose(rgb[24, 24], expect, atol=0.03)


def test_oracle_render_deterministic():
    av = make_sphere_avatar(radius=0.3)
    cam = ring_cameras(2, 32)[1]
    a = oracle_render(av, cam, Pose(np.zeros(3)), (0, 0, 0), n_steps=128)
    b = oracle_render(av, cam, Pose(np.zeros(3)), (0, 0, 0), n_steps=128)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# -- bake / load round trip --------------------------------------------------

@pytest.fixture(scope="module")
def tiny_bake(tmp_path_factory):
    out = tmp_path_factory.mktemp("bake")
    av = make_elbow_avatar()
    manifest = bake_dataset(av, n_views=2, n_poses=4, resolution=32,
                            seed=0, out_dir=out, n_steps=192)
    return out, manifest


def test_bake_writes_manifest_and_files(tiny_bake):
    out, manifest = tiny_bake
    ds = load_dataset(manifest)
    assert len(ds) == 8
    assert ds.image(0).shape == (32, 32, 3)
    assert ds.mask(0).dtype == bool
    assert ds.avatar is not None
    total = sum(len(v) for v in ds.splits.values())
    assert total == len(ds)
    assert len(ds.splits["val"]) == 2 and len(ds.splits["test"]) == 2
    # held-out poses are interior bends, not extremes
    held = {ds.frames[i].pose.frame_id for i in
            ds.splits["val"] + ds.splits["test"]}
    assert 0 not in held and 3 not in held


def test_bake_deterministic(tmp_path):
    av = make_sphere_avatar()
    a = tmp_path / "a"
    b = tmp_path / "b"
    bake_dataset(av, n_views=1, n_poses=1, resolution=24, seed=7,
                 out_dir=a, n_steps=96)
    bake_dataset(av, n_views=1, n_poses=1, resolution=24, seed=7,
                 out_dir=b, n_steps=96)
    assert (a / "images/0000.png").read_bytes() == \
        (b / "images/0000.png").read_bytes()
    assert (a / "scene.json").read_bytes() == (b / "scene.json").read_bytes()


def test_load_rejects_bad_version(tiny_bake, tmp_path):
    out, manifest = tiny_bake
    m = json.loads(manifest.read_text())
    m["version"] = "bogus"
    bad = tmp_path / "scene.json"
    bad.write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="/version"):
        load_dataset(bad)


def test_load_reports_missing_mask_with_pointer(tiny_bake, tmp_path):
    out, manifest = tiny_bake
    m = json.loads(manifest.read_text())
    m["frames"][1]["mask"] = "masks/none.png"
    bad_root = tmp_path / "ds"
    bad_root.mkdir()
    for sub in ("images", "masks", "cameras"):
        (bad_root / sub).symlink_to(out / sub)
    for f in ("skeleton.json", "poses.json"):
        (bad_root / f).symlink_to(out / f)
    (bad_root / "scene.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError) as ei:
        load_dataset(bad_root)
    msg = str(ei.value)
    assert "/frames/1/mask" in msg and "none.png" in msg


def test_load_rejects_overlapping_splits(tiny_bake, tmp_path):
    out, manifest = tiny_bake
    m = json.loads(manifest.read_text())
    m["splits"]["val"].append(m["splits"]["train"][0])
    bad_root = tmp_path / "ds"
    bad_root.mkdir()
    for sub in ("images", "masks", "cameras"):
        (bad_root / sub).symlink_to(out / sub)
    for f in ("skeleton.json", "poses.json"):
        (bad_root / f).symlink_to(out / f)
    (bad_root / "scene.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="/splits"):
        load_dataset(bad_root)


def test_avatar_roundtrip():
    av = make_elbow_avatar()
    av2 = AnalyticAvatar.from_dict(av.skeleton, av.to_dict())
    pts = np.random.default_rng(4).uniform(-0.3, 0.3, size=(20, 3))
    theta = bend_pose(av, 0.9).theta
    assert np.array_equal(av.sdf(pts, theta), av2.sdf(pts, theta))
    assert np.array_equal(av.color(pts, theta), av2.color(pts, theta))


# -- humanoid fidelity check -------------------------------------------------

def test_humanoid_has_24_bones():
    from facfield.scene import make_humanoid_avatar
    av = make_humanoid_avatar()
    assert av.skeleton.n_bones == 24
    assert av.skeleton.n_pose_dims == 72


def test_humanoid_rest_pose_identity_roundtrip():
    from facfield.scene import make_humanoid_avatar
    from facfield.skeleton import canonicalize
    av = make_humanoid_avatar()
    pose = Pose(np.zeros(72))
    tfs = forward_kinematics(av.skeleton, pose)
    assert np.allclose(tfs, np.eye(4)[None], atol=1e-12)
    pts = np.random.default_rng(10).uniform(-0.7, 0.7, size=(50, 3))
    x_c, w = canonicalize(pts, av.skeleton, tfs, av.temperature)
    assert np.allclose(x_c, pts, atol=1e-9)
    assert np.allclose(w.sum(axis=1), 1.0)


def test_humanoid_posed_sdf_finite():
    from facfield.scene import make_humanoid_avatar
    av = make_humanoid_avatar()
    theta = np.zeros(72)
    theta[8 * 3 + 2] = 1.0  # bend the left elbow
    tfs = forward_kinematics(av.skeleton, Pose(theta))
    pts = np.random.default_rng(11).uniform(-0.8, 0.8, size=(200, 3))
    s = av.sdf(pts, theta)
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(tfs))

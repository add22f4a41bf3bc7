"""IoU / OKS / warping, checked against scalar hand evaluations and a
pairwise-loop oracle."""
import numpy as np
import pytest

from dstrack.config import EngineConfig
from dstrack.datatypes import Box, Detection, Pose, Track
from dstrack import geometry
from dstrack.geometry import edge_features, iou, oks_triplet, register_warper, warp_track


@pytest.fixture(autouse=True)
def clean_warper():
    yield
    register_warper(None)


def pose_at(coords, conf=None, visible=None):
    coords = np.asarray(coords, dtype=np.float64)
    k = coords.shape[0]
    return Pose(
        coords=coords,
        conf=np.ones(k) if conf is None else conf,
        visible=np.ones(k, bool) if visible is None else visible,
    )


def random_pose(rng, k=5, span=50.0):
    return Pose(
        coords=rng.uniform(0, span, size=(k, 2)),
        conf=rng.uniform(0, 1, size=k),
        visible=rng.integers(0, 2, size=k).astype(bool),
    )


# ---------------------------------------------------------------------------
# iou

def test_iou_identical_and_disjoint():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    assert iou(a, Box(10, 0, 20, 10)) == 0.0  # touching edges share no area


def test_iou_half_shifted_unit_square():
    a = Box(0, 0, 1, 1)
    b = Box(0.5, 0, 1.5, 1)
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)

    def rand_box():
        x = np.sort(rng.uniform(0, 100, 2))
        y = np.sort(rng.uniform(0, 100, 2))
        return Box(x[0], y[0], x[1] + 1.0, y[1] + 1.0)

    a, b = rand_box(), rand_box()
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0


# ---------------------------------------------------------------------------
# oks triplet

KAPPAS3 = np.array([0.1, 0.2, 0.08])


def test_oks_identical_poses():
    p = pose_at([[1, 1], [5, 5], [9, 2]])
    np.testing.assert_allclose(
        oks_triplet(p, p, Box(0, 0, 10, 10), KAPPAS3), [1.0, 1.0, 1.0]
    )


def test_oks_disjoint_visibility():
    p = pose_at([[1, 1], [5, 5], [9, 2]], conf=np.zeros(3), visible=[True, False, False])
    q = pose_at([[1, 1], [5, 5], [9, 2]], conf=np.zeros(3), visible=[False, True, True])
    np.testing.assert_allclose(
        oks_triplet(p, q, Box(0, 0, 10, 10), KAPPAS3), [0.0, 0.0, 0.0]
    )


def test_oks_hand_evaluation_single_shared_keypoint():
    # keypoint 0 shared at distance 3; keypoint 1 only in p; keypoint 2 only in q
    box = Box(0, 0, 10, 10)  # s = 100
    p = pose_at([[0, 0], [4, 4], [7, 7]], conf=np.zeros(3), visible=[True, True, False])
    q = pose_at([[3, 0], [4, 4], [7, 7]], conf=np.zeros(3), visible=[True, False, True])
    g0 = np.exp(-9.0 / (2.0 * 100.0 * 0.1**2))
    got = oks_triplet(p, q, box, KAPPAS3)
    np.testing.assert_allclose(got, [g0, g0 / 2.0, g0 / 2.0], rtol=1e-12)


def test_oks_distance_sigma_value():
    # single keypoint, d^2 = 2 s k^2 -> kernel exp(-1) is not what we want;
    # pick d^2 = s k^2 so the kernel is exp(-1/2)
    box = Box(0, 0, 10, 10)
    k = np.array([0.1])
    d = np.sqrt(100.0 * 0.01)  # = 1.0
    p = pose_at([[0.0, 0.0]])
    q = pose_at([[d, 0.0]])
    np.testing.assert_allclose(
        oks_triplet(p, q, box, k)[0], np.exp(-0.5), rtol=1e-12
    )


@pytest.mark.parametrize("seed", range(8))
def test_oks_swap_property(seed):
    rng = np.random.default_rng(seed)
    p, q = random_pose(rng), random_pose(rng)
    box = Box(0, 0, 60, 60)
    kap = rng.uniform(0.05, 0.2, size=5)
    a = oks_triplet(p, q, box, kap)
    b = oks_triplet(q, p, box, kap)
    assert a[0] == pytest.approx(b[0], abs=1e-12)
    assert a[1] == pytest.approx(b[2], abs=1e-12)
    assert a[2] == pytest.approx(b[1], abs=1e-12)
    assert (a >= 0).all() and (a <= 1).all()


def test_oks_monotone_in_shared_keypoint_distance():
    box = Box(0, 0, 20, 20)
    kap = np.array([0.1, 0.1])
    base = pose_at([[5, 5], [10, 10]])
    prev = None
    for shift in [0.0, 1.0, 2.0, 4.0, 8.0]:
        q = pose_at([[5 + shift, 5], [10, 10]])
        val = oks_triplet(base, q, box, kap)
        if prev is not None:
            assert (val <= prev + 1e-12).all()
        prev = val


def test_oks_mismatched_k_raises():
    with pytest.raises(ValueError, match="keypoint count"):
        oks_triplet(pose_at([[0, 0]]), pose_at([[0, 0], [1, 1]]), Box(0, 0, 1, 1), KAPPAS3)


# ---------------------------------------------------------------------------
# warping

def make_track(coords, box, tid=0):
    return Track(id=tid, embedding=np.zeros(4), last_pose=pose_at(coords), last_box=box)


def test_identity_warp_returns_inputs():
    t = make_track([[1, 2], [3, 4]], Box(0, 0, 10, 10))
    pose, box = warp_track(t, "identity")
    assert pose is t.last_pose
    assert box is t.last_box


def test_pluggable_warp_requires_registration():
    t = make_track([[1, 2]], Box(0, 0, 10, 10))
    with pytest.raises(RuntimeError, match="no warper is registered"):
        warp_track(t, "pluggable")


def test_pluggable_warp_applies_offset():
    t = make_track([[1, 2], [3, 4]], Box(0, 0, 10, 10))
    register_warper(lambda pose, box: (pose.shifted(5.0, 0.0), box.shifted(5.0, 0.0)))
    pose, box = warp_track(t, "pluggable")
    np.testing.assert_allclose(pose.coords, [[6, 2], [8, 4]])
    assert box.x_min == 5.0


# ---------------------------------------------------------------------------
# edge features

def cfg_k5():
    return EngineConfig(d=8, keypoint_count=5, oks_kappas=(0.1,) * 5)


def test_edge_features_empty():
    assert edge_features([], [], cfg_k5()).shape == (0, 0, 4)
    det = Detection(box=Box(0, 0, 5, 5), pose=pose_at(np.ones((5, 2))))
    assert edge_features([], [det], cfg_k5()).shape == (0, 1, 4)


def test_edge_features_self_similarity():
    cfg = cfg_k5()
    rng = np.random.default_rng(0)
    dets = [
        Detection(box=Box(i * 20, 0, i * 20 + 10, 15), pose=random_pose(rng))
        for i in range(3)
    ]
    tracks = [
        Track(id=i, embedding=np.zeros(4), last_pose=d.pose, last_box=d.box)
        for i, d in enumerate(dets)
    ]
    feats = edge_features(tracks, dets, cfg)
    for i in range(3):
        np.testing.assert_allclose(feats[i, i], np.ones(4), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_edge_features_match_pairwise_oracle(seed):
    cfg = cfg_k5()
    rng = np.random.default_rng(seed)

    def rand_box():
        x0, y0 = rng.uniform(0, 40, 2)
        return Box(x0, y0, x0 + rng.uniform(5, 30), y0 + rng.uniform(5, 30))

    tracks = [make_track(rng.uniform(0, 50, (5, 2)), rand_box(), tid=i) for i in range(2)]
    dets = [Detection(box=rand_box(), pose=random_pose(rng)) for _ in range(3)]
    feats = edge_features(tracks, dets, cfg)
    kap = np.asarray(cfg.oks_kappas)
    for j, t in enumerate(tracks):
        for i, d in enumerate(dets):
            assert feats[j, i, 0] == pytest.approx(iou(t.last_box, d.box), abs=1e-6)
            expect = oks_triplet(t.last_pose, d.pose, t.last_box, kap)
            np.testing.assert_allclose(feats[j, i, 1:], expect, atol=1e-6)
    assert (feats >= 0).all() and (feats <= 1).all()


def test_edge_features_respect_registered_warper():
    cfg = EngineConfig(d=8, keypoint_count=5, oks_kappas=(0.1,) * 5, warp_mode="pluggable")
    register_warper(lambda pose, box: (pose.shifted(10.0, 0.0), box.shifted(10.0, 0.0)))
    det = Detection(box=Box(10, 0, 20, 10), pose=pose_at(np.tile([12.0, 2.0], (5, 1))))
    track = make_track(np.full((5, 2), 2.0), Box(0, 0, 10, 10))
    feats = edge_features([track], [det], cfg)
    np.testing.assert_allclose(feats[0, 0], np.ones(4), atol=1e-12)

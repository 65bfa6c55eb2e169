import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hltp.data import TrajectoryScene, generate_synthetic_scenes, SyntheticConfig
from hltp.features import (
    SceneFeaturizer,
    agent_kinematics,
    build_context_matrices,
    build_scene_tensors,
    build_visual_vectors,
    truncate_history,
)


def _scene(target, neighbors=(), T_obs=None, dt=0.2):
    target = np.asarray(target, float)
    T = len(target)
    nbr = np.asarray(neighbors, float).reshape(-1, T, 2) if len(neighbors) else np.zeros((1, T, 2))
    mask = np.ones(nbr.shape[:2], bool) if len(neighbors) else np.zeros((1, T), bool)
    return TrajectoryScene(target, nbr, mask, dt=dt, history_frames=T_obs or T)


def _line(v, n=16, x0=0.0, dt=0.2, a=0.0):
    t = np.arange(n) * dt
    return np.stack([np.full(n, x0), v * t + 0.5 * a * t**2], -1)


def test_identical_kinematics_lateral_offset():
    tgt = _line(10.0)
    S = build_visual_vectors(_scene(tgt, [tgt + [3.5, 0.0]]))
    np.testing.assert_allclose(S[1, :, 0], 3.5)
    np.testing.assert_allclose(S[1, :, 1:], 0.0, atol=1e-12)
    assert np.all(S[0] == 0)


def test_constant_speed_difference():
    S = build_visual_vectors(_scene(_line(10.0), [_line(12.0, x0=3.5)]))
    np.testing.assert_allclose(S[1, :, 2], 2.0, atol=1e-9)
    np.testing.assert_allclose(S[1, :, 3], 0.0, atol=1e-9)


def test_acceleration_difference():
    S = build_visual_vectors(_scene(_line(10.0), [_line(10.0, x0=3.5, a=1.0)]))
    # second-order differences are exact on quadratics
    np.testing.assert_allclose(S[1, :, 3], 1.0, atol=1e-6)


def test_too_short_history():
    with pytest.raises(ValueError):
        build_visual_vectors(_scene(_line(10.0, n=2)))


def test_straight_line_context_zero():
    M = build_context_matrices(_scene(_line(10.0)))
    assert np.allclose(M, 0.0, atol=1e-12)


def test_accelerating_context_speed():
    M = build_context_matrices(_scene(_line(5.0, a=1.0)))
    np.testing.assert_allclose(M[0, 1:-1, 0], 0.2, atol=1e-9)
    assert np.all(M[:, 0] == 0)


def test_arc_heading_rate():
    w, v, dt = 0.1, 10.0, 0.2
    t = np.arange(16) * dt
    r = v / w
    xy = np.stack([r * np.sin(w * t), r * (1 - np.cos(w * t))], -1)
    M = build_context_matrices(_scene(xy))
    # frame 0 borrows the first displacement heading, so the rate shows from frame 2 on
    np.testing.assert_allclose(M[0, 2:, 1], w * dt, atol=1e-9)
    assert M[0, 1, 1] == 0.0


def test_stationary_holds_heading():
    xy = np.concatenate([_line(5.0, n=8), np.repeat(_line(5.0, n=8)[-1:], 8, 0)])
    kin = agent_kinematics(xy[None], np.ones((1, 16), bool), 0.2)
    assert np.all(np.isfinite(kin.heading))
    M = build_context_matrices(_scene(xy))
    assert np.all(np.abs(M[0, 9:, 1]) < 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.integers(0, 2**31 - 1))
def test_translation_invariance(dx, dy, seed):
    sc = generate_synthetic_scenes(SyntheticConfig.balanced(1, noise=0.1), seed)[0]
    a = build_scene_tensors(sc)
    b = build_scene_tensors(sc.translated([dx, dy]))
    np.testing.assert_allclose(a.S, b.S, atol=1e-7)
    np.testing.assert_allclose(a.M, b.M, atol=1e-7)
    np.testing.assert_array_equal(a.central, b.central)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_angle_wrap_and_row0(seed):
    rng = np.random.default_rng(seed)
    xy = np.cumsum(rng.normal(size=(16, 2)), 0)
    nbr = np.cumsum(rng.normal(size=(2, 16, 2)), 1)
    sc = _scene(xy, nbr)
    M = build_context_matrices(sc)
    assert np.all(np.abs(M[..., 1]) <= np.pi)
    assert np.all(build_visual_vectors(sc)[0] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_speed_reconstruction(seed):
    rng = np.random.default_rng(seed)
    xy = np.cumsum(rng.uniform(0.5, 2.0, size=(12, 2)), 0)
    sc = _scene(xy)
    kin = agent_kinematics(xy[None], np.ones((1, 12), bool), sc.dt)
    M = build_context_matrices(sc, kin)
    assert abs(M[0, :, 0].sum() - (kin.speed[0, -1] - kin.speed[0, 0])) < 1e-9


def test_masked_rows_zero_and_sentinel_proof(scenes):
    sc = scenes[0]
    poisoned = sc.neighbors.copy()
    poisoned[~sc.neighbor_mask] = 1e9
    from dataclasses import replace

    a = build_scene_tensors(sc)
    b = build_scene_tensors(replace(sc, neighbors=poisoned))
    for f in ("S", "M", "central", "agent_mask"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    dead = ~a.frame_mask
    assert np.all(a.S[dead] == 0) and np.all(a.M[dead] == 0)


def test_truncate_history(scenes):
    t = build_scene_tensors(scenes[0])
    assert truncate_history(t, 16).S.shape == t.S.shape
    r = truncate_history(t, 8, "recent")
    np.testing.assert_array_equal(r.S, t.S[:, 8:])
    i = truncate_history(t, 8, "initial")
    np.testing.assert_array_equal(i.S, t.S[:, :8])
    with pytest.raises(ValueError):
        truncate_history(t, 1)


def test_initial_vs_recent_on_accelerating_scene():
    from hltp.data import crop_history

    sc = _scene(_line(4.0, a=1.5), [_line(10.0, x0=3.5)])
    rec = build_scene_tensors(crop_history(sc, 8, "recent"))
    ini = build_scene_tensors(crop_history(sc, 8, "initial"))
    # the target is faster at the end of the history, so the speed gap shrinks
    assert rec.S[1, -1, 2] < ini.S[1, -1, 2] - 1.0


def test_featurizer_transform(scenes):
    out = SceneFeaturizer(history_frames=8).fit_transform(scenes)
    assert out.S.shape == (len(scenes), 13, 8, 4)
    assert out.future.shape == (len(scenes), 25, 2)

"""Kalman update, delay compensation, frame transforms, and the
inverse-covariance fusion rules."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coloc.fusion import (
    DelayedEstimate,
    EstimateMessage,
    FrameTransform,
    FusionGain,
    Measurement,
    StateBelief,
    compensate_delay,
    compensated_uncertainty,
    fuse_states,
    fusion_gain,
    initial_belief,
    predict_and_update,
    transform_frame,
)
from coloc.stgl import StglModel

LN2 = math.log(2.0)


def rand_spd(rng, scale=1.0):
    a = rng.normal(size=(3, 3))
    return scale * (a @ a.T + 0.3 * np.eye(3))


def yaw(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def zero_model():
    m = StglModel(0, temporal_dim=2, gat_hidden=2)
    for _, t in m.params.items():
        t.data[:] = 0.0
    return m


def belief_track(positions, dt=0.1, object_id="obj", robot_id="r1"):
    return [
        StateBelief(p, 0.1 * np.eye(3), i * dt, object_id, robot_id)
        for i, p in enumerate(positions)
    ]


# -- records -------------------------------------------------------------------


def test_initial_belief_is_wide_and_centered():
    b = initial_belief("obj", "r1", 2.0)
    assert np.array_equal(b.x, np.zeros(3))
    assert np.array_equal(b.P, 10.0 * np.eye(3))
    assert (b.object_id, b.robot_id, b.timestamp) == ("obj", "r1", 2.0)


def test_belief_rejects_bad_covariance():
    with pytest.raises(ValueError, match="symmetric"):
        StateBelief(np.zeros(3), np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]))
    with pytest.raises(ValueError, match="PSD"):
        Measurement(np.zeros(3), np.diag([1.0, -2.0, 1.0]))


def test_delayed_estimate_rejects_negative_delay():
    with pytest.raises(ValueError, match="non-negative"):
        DelayedEstimate(initial_belief(), -0.1)


def test_message_line_round_trip_is_bit_exact():
    rng = np.random.default_rng(0)
    msg = EstimateMessage("r2", "cup", 1.7000000000000002, rng.normal(size=3) / 3.0,
                          rand_spd(rng), "r2/sensor")
    back = EstimateMessage.from_line(msg.to_line())
    assert back.robot_id == "r2" and back.object_id == "cup" and back.frame_id == "r2/sensor"
    assert back.timestamp == msg.timestamp
    assert np.array_equal(back.x, msg.x)
    assert np.array_equal(back.P, msg.P)


def test_message_line_field_count_enforced():
    with pytest.raises(ValueError, match="fields"):
        EstimateMessage.from_line("a,b,c")
    msg = EstimateMessage("r,1", "o", 0.0, np.zeros(3), np.eye(3), "f")
    with pytest.raises(ValueError, match="comma"):
        msg.to_line()


# -- Kalman update ----------------------------------------------------------------


def test_uninformative_measurement_keeps_learned_estimate():
    prior = initial_belief("o", "r")
    learned = np.array([0.4, -0.1, 0.9])
    z = Measurement(np.array([5.0, 5.0, 5.0]), 1e9 * np.eye(3), 0.1)
    post = predict_and_update(prior, 0.01 * np.eye(3), learned, z)
    assert np.max(np.abs(post.x - learned)) < 1e-6


def test_equal_weights_average_learned_and_measured():
    prior = StateBelief(np.zeros(3), 0.5 * np.eye(3), 0.0, "o", "r")
    learned = np.array([1.0, 0.0, 2.0])
    z = Measurement(np.array([0.0, 1.0, 0.0]), np.eye(3), 0.1)
    post = predict_and_update(prior, 0.5 * np.eye(3), learned, z)
    assert np.allclose(post.x, (learned + z.z) / 2.0, atol=1e-8)
    assert np.allclose(post.P, 0.5 * np.eye(3), atol=1e-8)


def test_zero_innovation_returns_learned_estimate_exactly():
    prior = initial_belief()
    learned = np.array([0.3, 0.7, -0.2])
    z = Measurement(learned.copy(), 0.05 * np.eye(3), 0.1)
    post = predict_and_update(prior, 0.01 * np.eye(3), learned, z)
    assert np.array_equal(post.x, learned)


def test_update_carries_ids_and_measurement_time():
    prior = initial_belief("cup", "r3", 0.0)
    z = Measurement(np.ones(3), np.eye(3), 0.7)
    post = predict_and_update(prior, np.zeros((3, 3)), np.ones(3), z)
    assert (post.object_id, post.robot_id, post.timestamp) == ("cup", "r3", 0.7)


def test_posterior_shrinks_and_stays_psd():
    rng = np.random.default_rng(12)
    for _ in range(100):
        prior = StateBelief(rng.normal(size=3), rand_spd(rng), 0.0)
        q = rand_spd(rng, 0.1)
        z = Measurement(rng.normal(size=3), rand_spd(rng), 0.1)
        post = predict_and_update(prior, q, rng.normal(size=3), z)
        assert np.trace(post.P) <= np.trace(prior.P + q) + 1e-12
        assert np.linalg.eigvalsh(post.P).min() > -1e-10


# -- delay compensation --------------------------------------------------------------


def test_zero_delay_is_identity():
    history = belief_track([np.array([1.0, 2.0, 3.0])] * 4)
    x, q = compensate_delay([], history, 0.0, 0.1)
    assert np.array_equal(x, [1.0, 2.0, 3.0])
    assert np.array_equal(q, np.zeros((3, 3)))


def test_delay_must_be_tick_multiple():
    history = belief_track([np.zeros(3)] * 4)
    with pytest.raises(ValueError, match="multiple"):
        compensate_delay([zero_model()], history, 0.05, 0.1)
    with pytest.raises(ValueError, match="non-negative"):
        compensate_delay([zero_model()], history, -0.1, 0.1)


def test_zero_weight_compensator_holds_position():
    history = belief_track([np.array([0.5, 0.5, 0.5])] * 5)
    x, q = compensate_delay([zero_model()], history, 0.3, 0.1)
    assert np.array_equal(x, [0.5, 0.5, 0.5])
    assert np.allclose(q, 3 * LN2 * np.eye(3), atol=1e-10)


def test_accumulated_uncertainty_grows_with_delay():
    history = belief_track([np.array([0.1 * t, 0.0, 0.0]) for t in range(6)])
    comp = [zero_model()]
    traces = [np.trace(compensate_delay(comp, history, k * 0.1, 0.1)[1]) for k in range(6)]
    assert all(b > a for a, b in zip(traces, traces[1:]))


def test_compensation_requires_history():
    with pytest.raises(ValueError, match="empty"):
        compensate_delay([zero_model()], [], 0.1, 0.1)
    with pytest.raises(ValueError, match="ensemble"):
        compensate_delay([], belief_track([np.zeros(3)] * 4), 0.1, 0.1)


def test_compensated_uncertainty_adds():
    p = np.eye(3)
    q = np.diag([1.0, 2.0, 3.0])
    assert np.array_equal(compensated_uncertainty(p, np.zeros((3, 3))), p)
    assert np.array_equal(compensated_uncertainty(p, q), np.diag([2.0, 3.0, 4.0]))
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = rand_spd(rng), rand_spd(rng)
        out = compensated_uncertainty(a, b)
        assert np.linalg.eigvalsh(out).min() > -1e-9
        assert np.trace(out) == pytest.approx(np.trace(a) + np.trace(b), rel=1e-12)


# -- fusion gain ------------------------------------------------------------------------


def test_single_robot_gain_is_identity():
    gain = fusion_gain([0.3 * np.eye(3)])
    assert isinstance(gain, FusionGain)
    assert np.allclose(gain.matrices[0], np.eye(3), atol=1e-9)


def test_equal_covariances_share_gain_evenly():
    gain = fusion_gain([0.5 * np.eye(3)] * 4)
    for e in gain.matrices:
        assert np.allclose(e, np.eye(3) / 4.0, atol=1e-9)


def test_gain_hand_example():
    gain = fusion_gain([np.eye(3), 3.0 * np.eye(3)])
    assert np.allclose(gain.matrices[0], 0.75 * np.eye(3), atol=1e-9)
    assert np.allclose(gain.matrices[1], 0.25 * np.eye(3), atol=1e-9)


def test_gains_sum_to_identity_on_random_lists():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = rng.integers(1, 7)
        covs = [rand_spd(rng, scale=float(rng.uniform(0.1, 5.0))) for _ in range(n)]
        total = np.sum(fusion_gain(covs).matrices, axis=0)
        assert np.max(np.abs(total - np.eye(3))) < 1e-9


def test_gain_rejects_bad_covariance_naming_robot():
    bad = np.eye(3).copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="robot 1"):
        fusion_gain([np.eye(3), bad])


@given(st.lists(st.floats(min_value=0.01, max_value=100), min_size=1, max_size=6))
def test_gain_constraint_for_diagonal_covariances(scales):
    covs = [s * np.eye(3) for s in scales]
    total = np.sum(fusion_gain(covs).matrices, axis=0)
    assert np.max(np.abs(total - np.eye(3))) < 1e-9


# -- frame transforms ----------------------------------------------------------------


def test_identity_transform_is_noop():
    x, p = np.array([1.0, 2.0, 3.0]), np.diag([1.0, 2.0, 3.0])
    x2, p2 = transform_frame(FrameTransform.identity(), x, p)
    assert np.array_equal(x2, x) and np.array_equal(p2, p)


def test_translation_shifts_mean_only():
    t = FrameTransform(np.eye(3), np.array([1.0, -2.0, 0.5]))
    x2, p2 = transform_frame(t, np.zeros(3), np.diag([1.0, 2.0, 3.0]))
    assert np.array_equal(x2, [1.0, -2.0, 0.5])
    assert np.array_equal(p2, np.diag([1.0, 2.0, 3.0]))


def test_quarter_turn_permutes_axes():
    t = FrameTransform(yaw(np.pi / 2), np.zeros(3))
    x2, p2 = transform_frame(t, np.array([1.0, 0.0, 0.0]), np.diag([1.0, 2.0, 3.0]))
    assert np.allclose(x2, [0.0, 1.0, 0.0], atol=1e-15)
    assert np.allclose(p2, np.diag([2.0, 1.0, 3.0]), atol=1e-15)


def test_rotation_preserves_eigenvalues():
    rng = np.random.default_rng(5)
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        t = FrameTransform(q, rng.normal(size=3))
        p = rand_spd(rng)
        _, p2 = transform_frame(t, rng.normal(size=3), p)
        assert np.allclose(np.linalg.eigvalsh(p2), np.linalg.eigvalsh(p), atol=1e-9)


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(ValueError, match="orthonormal"):
        FrameTransform(2.0 * np.eye(3), np.zeros(3))
    reflect = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError, match="determinant"):
        FrameTransform(reflect, np.zeros(3))


def test_inverse_and_compose_round_trip():
    rng = np.random.default_rng(6)
    t = FrameTransform(yaw(0.7), rng.normal(size=3), "r1", "r2")
    x, p = rng.normal(size=3), rand_spd(rng)
    xi, pi = transform_frame(t.inverse(), *transform_frame(t, x, p))
    assert np.allclose(xi, x, atol=1e-12) and np.allclose(pi, p, atol=1e-12)
    both = t.inverse().compose(t)
    assert np.allclose(both.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(both.translation, np.zeros(3), atol=1e-12)
    assert (both.source_robot, both.target_robot) == ("r1", "r1")


# -- state fusion -----------------------------------------------------------------------


def test_fusion_without_remotes_returns_own_belief():
    own = StateBelief(np.array([1.0, 2.0, 3.0]), 0.4 * np.eye(3), 1.5, "o", "r1")
    fused = fuse_states(own, [])
    assert np.allclose(fused.x, own.x, atol=1e-7)
    assert np.allclose(fused.P, own.P, atol=1e-7)
    assert (fused.timestamp, fused.object_id, fused.robot_id) == (1.5, "o", "r1")


def test_two_equal_robots_average():
    own = (np.array([1.0, 0.0, 0.0]), 0.2 * np.eye(3))
    remote = [(np.array([0.0, 1.0, 0.0]), 0.2 * np.eye(3), FrameTransform.identity())]
    fused = fuse_states(own, remote)
    assert np.allclose(fused.x, [0.5, 0.5, 0.0], atol=1e-8)
    assert np.allclose(fused.P, 0.1 * np.eye(3), atol=1e-8)


def test_fusion_weights_match_gain_example():
    x1, x2 = np.array([1.0, 1.0, 1.0]), np.array([-1.0, 0.0, 2.0])
    fused = fuse_states((x1, np.eye(3)), [(x2, 3.0 * np.eye(3), FrameTransform.identity())])
    assert np.allclose(fused.x, 0.75 * x1 + 0.25 * x2, atol=1e-8)
    assert np.allclose(fused.P, 0.75 * np.eye(3), atol=1e-8)


def test_fusion_transforms_remote_estimates_first():
    # remote robot sees the object at the origin in its own frame; its frame
    # is rotated a quarter turn and shifted relative to the fusing robot
    t = FrameTransform(yaw(np.pi / 2), np.array([1.0, 0.0, 0.0]))
    own = (np.array([1.0, 0.0, 0.0]), np.eye(3))
    fused = fuse_states(own, [(np.zeros(3), np.eye(3), t)])
    assert np.allclose(fused.x, [1.0, 0.0, 0.0], atol=1e-8)


def test_fusion_requires_transforms():
    with pytest.raises(ValueError, match="transform"):
        fuse_states((np.zeros(3), np.eye(3)), [(np.ones(3), np.eye(3), None)])


def test_fusion_is_permutation_invariant():
    rng = np.random.default_rng(9)
    own = (rng.normal(size=3), rand_spd(rng))
    remote = [
        (rng.normal(size=3), rand_spd(rng), FrameTransform(yaw(rng.uniform(0, 6)), rng.normal(size=3)))
        for _ in range(4)
    ]
    a = fuse_states(own, remote)
    b = fuse_states(own, remote[::-1])
    assert np.allclose(a.x, b.x, atol=1e-9)
    assert np.allclose(a.P, b.P, atol=1e-9)


def test_fused_covariance_dominated_by_every_input():
    rng = np.random.default_rng(10)
    own = (rng.normal(size=3), rand_spd(rng))
    remote = [(rng.normal(size=3), rand_spd(rng), FrameTransform.identity()) for _ in range(3)]
    fused = fuse_states(own, remote)
    for p in [own[1]] + [r[1] for r in remote]:
        assert np.linalg.eigvalsh(p - fused.P).min() > -1e-9


def test_huge_covariance_robot_is_ignored():
    own = (np.array([0.5, 0.5, 0.5]), 0.1 * np.eye(3))
    fused_alone = fuse_states(own, [])
    noisy = [(np.array([100.0, -50.0, 30.0]), 1e12 * np.eye(3), FrameTransform.identity())]
    fused = fuse_states(own, noisy)
    assert np.max(np.abs(fused.x - fused_alone.x)) < 1e-6

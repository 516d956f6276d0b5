"""Model-based state estimation and asynchronous multi-robot fusion.

Per robot and object, the learned ensemble estimate is corrected by the
local measurement through a Kalman update whose process noise Q comes
from ensemble disagreement. Remote estimates arrive late: a compensation
ensemble rolls them forward to the current tick, their uncertainty grows
by the accumulated process noise, and the per-robot estimates are merged
with inverse-covariance fusion gains that always sum to the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .stgl import SpatioTemporalGraph, ensemble_moments, fully_connected_graph, member_rollouts

COVARIANCE_JITTER = 1e-9
INITIAL_VARIANCE = 10.0


def _check_cov(p, what="covariance"):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3, 3):
        raise ValueError(f"{what} must be 3x3, got {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError(f"{what} has non-finite entries")
    # same tolerance as allclose(p, p.T, atol=1e-9) without its overhead
    if not (np.abs(p - p.T) <= 1e-9 + 1e-5 * np.abs(p.T)).all():
        raise ValueError(f"{what} is not symmetric")
    if np.linalg.eigvalsh(p).min() < -1e-9:
        raise ValueError(f"{what} is not PSD")
    return p


# ---------------------------------------------------------------------------
# records


@dataclass
class StateBelief:
    x: np.ndarray  # (3,) meters
    P: np.ndarray  # (3, 3) m^2
    timestamp: float = 0.0
    object_id: object = None
    robot_id: object = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        self.P = _check_cov(self.P, "belief covariance")


@dataclass
class Measurement:
    z: np.ndarray  # (3,) meters
    R: np.ndarray  # (3, 3) m^2
    timestamp: float = 0.0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).reshape(3)
        self.R = _check_cov(self.R, "measurement covariance")


@dataclass
class FrameTransform:
    """Rigid map from a source robot's sensor frame into a target frame."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)
    source_robot: object = None
    target_robot: object = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")

    @staticmethod
    def identity(source_robot=None, target_robot=None) -> "FrameTransform":
        return FrameTransform(np.eye(3), np.zeros(3), source_robot, target_robot)

    def inverse(self) -> "FrameTransform":
        rot = self.rotation.T
        return FrameTransform(rot, -rot @ self.translation, self.target_robot, self.source_robot)

    def compose(self, inner: "FrameTransform") -> "FrameTransform":
        """Transform applying `inner` first, then this one."""
        return FrameTransform(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
            inner.source_robot,
            self.target_robot,
        )


@dataclass
class DelayedEstimate:
    belief: StateBelief
    delay: float  # seconds since the estimate was formed

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be non-negative")


@dataclass
class FusionGain:
    matrices: list  # one 3x3 gain per robot, summing to the identity


_UPPER = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


@dataclass
class EstimateMessage:
    """One broadcast estimate. Field order in channel logs is fixed:
    robot id, object id, send timestamp, mean (3), covariance upper
    triangle (6), frame id."""

    robot_id: str
    object_id: str
    timestamp: float
    x: np.ndarray  # (3,)
    P: np.ndarray  # (3, 3)
    frame_id: str

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        self.P = _check_cov(self.P, "message covariance")

    def to_line(self) -> str:
        fields = [str(self.robot_id), str(self.object_id), repr(float(self.timestamp))]
        fields += [repr(float(v)) for v in self.x]
        fields += [repr(float(self.P[i, j])) for i, j in _UPPER]
        fields.append(str(self.frame_id))
        for f in fields:
            if "," in f:
                raise ValueError(f"field {f!r} may not contain commas")
        return ",".join(fields)

    @staticmethod
    def from_line(line: str) -> "EstimateMessage":
        parts = line.strip().split(",")
        if len(parts) != 13:
            raise ValueError(f"message line has {len(parts)} fields, expected 13")
        p = np.zeros((3, 3))
        for (i, j), raw in zip(_UPPER, parts[6:12]):
            p[i, j] = p[j, i] = float(raw)
        return EstimateMessage(parts[0], parts[1], float(parts[2]),
                               np.array([float(v) for v in parts[3:6]]), p, parts[12])


def initial_belief(object_id=None, robot_id=None, timestamp=0.0) -> StateBelief:
    """Uninformed prior: zero mean with a wide diagonal covariance."""
    return StateBelief(np.zeros(3), INITIAL_VARIANCE * np.eye(3), timestamp, object_id, robot_id)


# ---------------------------------------------------------------------------
# Kalman update


def predict_and_update(prior: StateBelief, q, learned_x, z: Measurement) -> StateBelief:
    """Grow the prior by the process noise, then correct the learned
    estimate with the measurement.

    The gain weighs prediction against observation: K = P (P + R)^-1 with
    P = P_prev + Q. The posterior mean corrects the learned estimate,
    x = learned_x + K (z - learned_x), and P shrinks by (I - K).
    """
    q = _check_cov(q, "process noise")
    learned_x = np.asarray(learned_x, dtype=np.float64).reshape(3)
    p = prior.P + q
    r = z.R + COVARIANCE_JITTER * np.eye(3)
    s = p + r
    try:
        # K = P S^-1; solving S K^T = P^T avoids forming the inverse
        gain = scipy.linalg.solve(s, p.T, assume_a="pos").T
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"innovation covariance is singular: {exc}") from None
    x_post = learned_x + gain @ (z.z - learned_x)
    p_post = p - gain @ p
    p_post = 0.5 * (p_post + p_post.T)
    return StateBelief(x_post, p_post, z.timestamp, prior.object_id, prior.robot_id)


# ---------------------------------------------------------------------------
# delay compensation


def _history_window(history, dt: float) -> SpatioTemporalGraph:
    graphs = []
    for belief in history:
        graphs.append(
            fully_connected_graph(
                belief.timestamp,
                (belief.object_id,),
                belief.x.reshape(1, 3),
                belief.P.reshape(1, 3, 3),
            )
        )
    return SpatioTemporalGraph(graphs, dt)


def _delay_steps(delta_t: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if delta_t < 0:
        raise ValueError("delay must be non-negative")
    ratio = delta_t / dt
    steps = int(round(ratio))
    if abs(ratio - steps) > 1e-6:
        raise ValueError(f"delay {delta_t} is not a multiple of the tick length {dt}")
    return steps


def compensate_window(comp_models, window: SpatioTemporalGraph, delta_t: float, dt: float) -> dict:
    """Batched delay compensation over a whole belief graph.

    Rolls every fully tracked object forward delta_t / dt steps through the
    compensation ensemble. Returns {object_id: (compensated mean,
    accumulated process uncertainty)}.
    """
    steps = _delay_steps(delta_t, dt)
    if steps == 0:
        last = window.graphs[-1]
        return {
            object_id: (last.positions[i].copy(), np.zeros((3, 3)))
            for i, object_id in enumerate(last.object_ids)
        }
    if not comp_models:
        raise ValueError("compensation ensemble is empty")
    ids, means, variances = member_rollouts(comp_models, window, steps)
    out = {}
    for i, object_id in enumerate(ids):
        covs = [np.diag(v) for v in variances[:, i]]
        x_tilde, _, q_tilde = ensemble_moments(means[:, i], covs)
        out[object_id] = (x_tilde, q_tilde)
    return out


def compensate_delay(comp_models, own_history, delta_t: float, dt: float):
    """Roll a delayed belief forward to the current tick.

    own_history: the sending robot's belief sequence for one object, at dt
    spacing, newest last (the newest being delta_t old). Returns the
    compensated mean and the process uncertainty accumulated over the
    delta_t / dt prediction steps.
    """
    steps = _delay_steps(delta_t, dt)
    if not own_history:
        raise ValueError("belief history is empty")
    if steps == 0:
        return own_history[-1].x.copy(), np.zeros((3, 3))
    window = _history_window(own_history, dt)
    object_id = own_history[-1].object_id
    result = compensate_window(comp_models, window, delta_t, dt)
    return result[object_id]


def compensated_uncertainty(p_delayed, q_tilde) -> np.ndarray:
    """Uncertainty of a compensated estimate: the delayed covariance plus
    everything accumulated while rolling forward."""
    p_delayed = _check_cov(p_delayed, "delayed covariance")
    q_tilde = _check_cov(q_tilde, "accumulated process noise")
    return p_delayed + q_tilde


# ---------------------------------------------------------------------------
# multi-robot fusion


def _inverse_stack(covariances, pre_checked=False):
    eye = np.eye(3)
    if pre_checked:
        stack = np.asarray(covariances, dtype=np.float64)
    else:
        stack = np.stack(
            [_check_cov(p, f"covariance for robot {n}") for n, p in enumerate(covariances)]
        )
    jittered = stack + COVARIANCE_JITTER * eye
    try:
        return np.linalg.solve(jittered, np.broadcast_to(eye, jittered.shape))
    except np.linalg.LinAlgError:
        for n, p in enumerate(jittered):  # name the offender
            try:
                np.linalg.solve(p, eye)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance for robot {n} is singular") from None
        raise


def fusion_gain(covariances) -> FusionGain:
    """Inverse-covariance weights: E^n = (sum_j inv P_j)^-1 inv P_n.

    The gains sum to the identity, so low-uncertainty robots dominate and
    an infinitely uncertain robot contributes nothing.
    """
    if len(covariances) < 1:
        raise ValueError("fusion needs at least one covariance")
    inverses = _inverse_stack(covariances)
    total = inverses.sum(axis=0)
    matrices = list(np.linalg.solve(total[None], inverses))
    return FusionGain(matrices)


def transform_frame(t: FrameTransform, x, p):
    """Move a mean/covariance pair between frames: x' = R x + t, P' = R P R^T."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    p = _check_cov(p)
    x_out = t.rotation @ x + t.translation
    p_out = t.rotation @ p @ t.rotation.T
    return x_out, 0.5 * (p_out + p_out.T)


def fuse_states(own, remote) -> StateBelief:
    """Weight the local estimate against transformed remote ones.

    own: StateBelief or (x, P); remote: list of (x, P, FrameTransform into
    the fusing robot's frame). The fused covariance is the inverse of the
    summed inverses, and the fused mean applies the fusion gains.
    """
    if isinstance(own, StateBelief):
        meta = (own.timestamp, own.object_id, own.robot_id)
        own_x, own_p = own.x, own.P
    else:
        own_x, own_p = own
        meta = (0.0, None, None)
    own_x = np.asarray(own_x, dtype=np.float64).reshape(3)

    means = [own_x]
    covs = [_check_cov(own_p, "own covariance")]
    for entry in remote:
        x, p, transform = entry
        if transform is None:
            raise ValueError("remote estimate is missing a frame transform")
        x, p = transform_frame(transform, x, p)
        means.append(x)
        covs.append(p)

    # every entry was validated above (own directly, remotes in transform_frame)
    inverses = _inverse_stack(covs, pre_checked=True)
    total = inverses.sum(axis=0)
    fused_p = np.linalg.solve(total, np.eye(3))
    fused_p = 0.5 * (fused_p + fused_p.T)
    weighted = np.einsum("nij,nj->i", inverses, np.stack(means))
    fused_x = fused_p @ weighted
    return StateBelief(fused_x, fused_p, *meta)

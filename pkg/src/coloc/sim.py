"""Deterministic synthetic world for collaborative object localization.

Objects move along seeded trajectories; each robot sees them in its own
sensor frame with depth-dependent Gaussian noise and broadcasts its
filtered estimates over latency channels. Everything downstream of the
master seed is reproducible bit for bit.
"""

from __future__ import annotations

import math
from collections import OrderedDict, deque, namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .fusion import (
    EstimateMessage,
    FrameTransform,
    Measurement,
    StateBelief,
    compensate_window,
    compensated_uncertainty,
    fuse_states,
    initial_belief,
    predict_and_update,
)
from .stgl import SpatioTemporalGraph, ensemble_predict_all, fully_connected_graph

MODES = ("measurement-only", "model-only", "learning-only", "full")
DEFAULT_PROCESS_VARIANCE = 0.01  # m^2, fixed Q for the non-learned filter
MAX_LATENCY_S = 0.7
TRAJECTORY_KINDS = ("constant-velocity", "turn", "waypoint-spline")


# ---------------------------------------------------------------------------
# scenario description


@dataclass
class ObjectSpec:
    object_id: str
    kind: str = "constant-velocity"
    start: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)  # m/s, constant-velocity and initial turn heading
    speed: float = 0.5  # m/s along the turn template
    turn_rate_deg_s: float = 45.0
    turn_start_s: float = 1.0
    turn_duration_s: float = 2.0
    waypoints: tuple = ()  # optional explicit spline knots; seeded when empty

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class RobotSpec:
    robot_id: str
    position: tuple = (0.0, 0.0, 0.0)  # sensor origin in the world frame
    yaw_deg: float = 0.0
    max_range: float = 50.0
    noise_a: float = 0.02  # constant noise std floor, meters
    noise_b: float = 0.005  # quadratic depth coefficient, m^-1
    latency: object = 0.0  # seconds: fixed, or (lo, hi) sampled per message
    occlusions: tuple = ()  # (object_id, start_tick, end_tick) windows

    def __post_init__(self):
        if self.noise_a <= 0:
            raise ValueError(f"robot {self.robot_id!r}: noise_a must be > 0")
        if self.noise_b < 0:
            raise ValueError(f"robot {self.robot_id!r}: noise_b must be >= 0")
        if self.max_range <= 0:
            raise ValueError(f"robot {self.robot_id!r}: max_range must be > 0")
        lo, hi = latency_bounds(self.latency)
        if lo < 0 or hi > MAX_LATENCY_S:
            raise ValueError(
                f"robot {self.robot_id!r}: latency must lie in [0, {MAX_LATENCY_S}] s"
            )


def latency_bounds(latency) -> tuple:
    if isinstance(latency, (tuple, list)):
        if len(latency) != 2 or latency[0] > latency[1]:
            raise ValueError(f"latency range must be (lo, hi), got {latency!r}")
        return float(latency[0]), float(latency[1])
    return float(latency), float(latency)


@dataclass
class ScenarioConfig:
    objects: list
    robots: list
    dt: float = 0.1
    ticks: int = 80
    seed: int = 0
    active_robots: int = None  # None: all robots participate
    history_length: int = 8  # learner window, ticks
    warmup_ticks: int = None  # metrics skip earlier ticks; None: derived

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.ticks < 1:
            raise ValueError("ticks must be >= 1")
        if not self.objects:
            raise ValueError("at least one object is required")
        if not self.robots:
            raise ValueError("at least one robot is required")
        if self.active_robots is None:
            self.active_robots = len(self.robots)
        if not 1 <= self.active_robots <= len(self.robots):
            raise ValueError(
                f"active_robots must be in [1, {len(self.robots)}], got {self.active_robots}"
            )
        if self.history_length < 3:
            raise ValueError("history_length must be >= 3")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        rids = [r.robot_id for r in self.robots]
        if len(set(rids)) != len(rids):
            raise ValueError("robot ids must be unique")
        if self.warmup_ticks is None:
            max_delay = max(latency_bounds(r.latency)[1] for r in self.robots)
            self.warmup_ticks = self.history_length + int(round(max_delay / self.dt)) + 4
        if self.warmup_ticks >= self.ticks:
            raise ValueError(
                f"warmup_ticks {self.warmup_ticks} leaves no measured ticks out of {self.ticks}"
            )


# ---------------------------------------------------------------------------
# world pieces


@dataclass
class ObjectTrajectory:
    object_id: str
    positions: np.ndarray  # (ticks, 3)
    v_max: float  # speed bound the track respects

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if not np.isfinite(self.positions).all():
            raise ValueError(f"trajectory {self.object_id!r} has non-finite positions")


def _check_speed(traj: ObjectTrajectory, dt: float):
    if len(traj.positions) > 1:
        step = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1).max()
        if step > traj.v_max * dt + 1e-9:
            raise ValueError(
                f"trajectory {traj.object_id!r} exceeds its speed bound: "
                f"{step / dt:.3f} > {traj.v_max:.3f} m/s"
            )


@dataclass
class RobotSensorModel:
    robot_id: str
    extrinsics: FrameTransform  # world frame -> this robot's sensor frame
    max_range: float
    noise_a: float
    noise_b: float
    occlusions: tuple = ()

    def occluded(self, object_id, tick) -> bool:
        return any(o == object_id and t0 <= tick <= t1 for o, t0, t1 in self.occlusions)


def noise_std(a: float, b: float, depth: float) -> float:
    """Per-axis measurement noise std at a given sensing depth."""
    return a + b * depth * depth


class LatencyChannel:
    """FIFO link between one sender and one receiver.

    Delays are quantized to ticks. A sampled delay that would overtake an
    earlier message is clamped so delivery order always matches send order.
    """

    def __init__(self, sender, receiver, latency, dt, rng):
        self.sender = sender
        self.receiver = receiver
        self.dt = dt
        self._lo, self._hi = latency_bounds(latency)
        self._rng = rng
        self._queue = deque()  # (deliver_tick, send_tick, message)
        self._last_scheduled = 0

    def _delay_ticks(self) -> int:
        if self._hi > self._lo:
            delay = self._rng.uniform(self._lo, self._hi)
        else:
            delay = self._lo
        return int(round(delay / self.dt))

    def send(self, tick: int, message):
        deliver = max(tick + self._delay_ticks(), self._last_scheduled, tick)
        self._last_scheduled = deliver
        self._queue.append((deliver, tick, message))

    def pending(self) -> int:
        return len(self._queue)


Delivery = namedtuple("Delivery", "message send_tick delay_ticks")


def channel_deliver(channel: LatencyChannel, tick: int) -> list:
    """Messages whose delivery tick is exactly `tick`, oldest first."""
    out = []
    while channel._queue and channel._queue[0][0] == tick:
        _, send_tick, message = channel._queue.popleft()
        out.append(Delivery(message, send_tick, tick - send_tick))
    return out


# ---------------------------------------------------------------------------
# scenario generation


def _yaw_matrix(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def world_to_robot(spec: RobotSpec) -> FrameTransform:
    """Extrinsics of a robot posed at (position, yaw) in the world."""
    rot = _yaw_matrix(math.radians(spec.yaw_deg)).T
    return FrameTransform(rot, -rot @ np.asarray(spec.position, dtype=float),
                          source_robot="world", target_robot=spec.robot_id)


def _constant_velocity_track(spec: ObjectSpec, ticks: int, dt: float) -> ObjectTrajectory:
    t = np.arange(ticks)[:, None] * dt
    pos = np.asarray(spec.start, dtype=float) + t * np.asarray(spec.velocity, dtype=float)
    return ObjectTrajectory(spec.object_id, pos, float(np.linalg.norm(spec.velocity)))


def _turn_track(spec: ObjectSpec, ticks: int, dt: float) -> ObjectTrajectory:
    """Straight run, then a sharp planar turn at a fixed angular rate."""
    heading = math.atan2(spec.velocity[1], spec.velocity[0]) if any(spec.velocity[:2]) else 0.0
    rate = math.radians(spec.turn_rate_deg_s)
    pos = np.zeros((ticks, 3))
    pos[0] = spec.start
    for k in range(1, ticks):
        t = k * dt
        if spec.turn_start_s <= t <= spec.turn_start_s + spec.turn_duration_s:
            heading += rate * dt
        step = spec.speed * dt
        pos[k] = pos[k - 1] + [step * math.cos(heading), step * math.sin(heading), 0.0]
    return ObjectTrajectory(spec.object_id, pos, spec.speed)


def _spline_track(spec: ObjectSpec, ticks: int, dt: float, rng) -> ObjectTrajectory:
    duration = (ticks - 1) * dt
    if spec.waypoints:
        knots = np.asarray(spec.waypoints, dtype=float)
    else:
        knots = np.asarray(spec.start, dtype=float) + np.vstack(
            [np.zeros(3), np.cumsum(rng.uniform(-0.8, 0.8, size=(4, 3)), axis=0)]
        )
    times = np.linspace(0.0, duration, len(knots))
    spline = CubicSpline(times, knots, axis=0)
    pos = spline(np.arange(ticks) * dt)
    v_max = float(np.linalg.norm(np.diff(pos, axis=0), axis=1).max() / dt) if ticks > 1 else 0.0
    return ObjectTrajectory(spec.object_id, pos, v_max)


def generate_scenario(config: ScenarioConfig):
    """Build the world: trajectories, sensor models, and latency channels.

    Pure function of the config (seed included). Observation noise streams
    are spawned per robot and channel delays per ordered robot pair, so
    changing active_robots never reshuffles another robot's randomness.
    """
    root = np.random.SeedSequence(config.seed)
    traj_seq, obs_seq, chan_seq = root.spawn(3)
    traj_rngs = [np.random.default_rng(s) for s in traj_seq.spawn(len(config.objects))]

    trajectories = []
    for spec, rng in zip(config.objects, traj_rngs):
        if spec.kind == "constant-velocity":
            traj = _constant_velocity_track(spec, config.ticks, config.dt)
        elif spec.kind == "turn":
            traj = _turn_track(spec, config.ticks, config.dt)
        else:
            traj = _spline_track(spec, config.ticks, config.dt, rng)
        _check_speed(traj, config.dt)
        trajectories.append(traj)

    sensors = [
        RobotSensorModel(
            spec.robot_id,
            world_to_robot(spec),
            spec.max_range,
            spec.noise_a,
            spec.noise_b,
            tuple(spec.occlusions),
        )
        for spec in config.robots
    ]

    obs_rngs = {
        spec.robot_id: np.random.default_rng(s)
        for spec, s in zip(config.robots, obs_seq.spawn(len(config.robots)))
    }

    pairs = [
        (a.robot_id, b.robot_id)
        for a in config.robots
        for b in config.robots
        if a.robot_id != b.robot_id
    ]
    channels = {
        (s, r): LatencyChannel(s, r, next(
            spec.latency for spec in config.robots if spec.robot_id == s
        ), config.dt, np.random.default_rng(sq))
        for (s, r), sq in zip(pairs, chan_seq.spawn(len(pairs)))
    }
    return trajectories, sensors, obs_rngs, channels


def observe(trajectories, robot: RobotSensorModel, tick: int, rng, dt: float = 0.1):
    """One robot's view of the world at a tick, in its own sensor frame.

    Objects beyond max_range or inside an occlusion window are absent. The
    attached covariance is exactly the generating noise covariance.
    """
    ids, positions, covariances = [], [], []
    for traj in trajectories:
        truth = traj.positions[tick]
        local = robot.extrinsics.rotation @ truth + robot.extrinsics.translation
        depth = float(np.linalg.norm(local))
        if depth > robot.max_range or robot.occluded(traj.object_id, tick):
            continue
        std = noise_std(robot.noise_a, robot.noise_b, depth)
        z = local + std * rng.normal(size=3)
        ids.append(traj.object_id)
        positions.append(z)
        covariances.append(std * std * np.eye(3))
    if not ids:
        return fully_connected_graph(tick * dt, (), np.zeros((0, 3)), np.zeros((0, 3, 3)))
    return fully_connected_graph(tick * dt, ids, np.stack(positions), np.stack(covariances))


# ---------------------------------------------------------------------------
# pipeline run


LogRow = namedtuple(
    "LogRow",
    "tick object_id truth meas learned fused trace_p trace_p_fused",
)

_NAN3 = np.full(3, np.nan)


@dataclass
class RunLog:
    """Everything a run produced, sufficient to recompute all metrics."""

    mode: str
    dt: float
    seed: int
    warmup_ticks: int
    robot_ids: list
    rows: dict  # robot_id -> list[LogRow], all positions in that robot's frame
    channel_lines: list = field(default_factory=list)
    messages_sent: int = 0
    messages_delivered: int = 0

    def robot_csv(self, robot_id) -> str:
        header = (
            "tick,object_id,truth_x,truth_y,truth_z,meas_x,meas_y,meas_z,"
            "learned_x,learned_y,learned_z,fused_x,fused_y,fused_z,trace_p,trace_p_fused"
        )
        lines = [header]
        for row in self.rows[robot_id]:
            vals = [str(row.tick), str(row.object_id)]
            for vec in (row.truth, row.meas, row.learned, row.fused):
                vals += [repr(float(v)) for v in vec]
            vals += [repr(float(row.trace_p)), repr(float(row.trace_p_fused))]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def channel_log_text(self) -> str:
        return "\n".join(self.channel_lines) + ("\n" if self.channel_lines else "")


def _require_models(mode, predictor, compensator, config, compensation):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("learning-only", "full") and not predictor:
        raise ValueError(f"mode {mode!r} requires a trained prediction ensemble")
    if mode == "full" and compensation and config.active_robots > 1:
        delays = [latency_bounds(r.latency)[1] for r in config.robots[: config.active_robots]]
        if max(delays) > 0 and not compensator:
            raise ValueError("delayed channels require a compensation ensemble")
    for ensemble in (predictor or []), (compensator or []):
        archs = {tuple(sorted(m.arch().items())) for m in ensemble}
        if len(archs) > 1:
            raise ValueError("ensemble members disagree on architecture")


def run_scenario(config: ScenarioConfig, predictor=None, compensator=None,
                 mode: str = "full", compensation: bool = True) -> RunLog:
    """Advance the world tick by tick through the chosen pipeline.

    Per tick: every robot observes and forms its local estimate (learned
    prediction corrected by the measurement, depending on mode), broadcasts
    it, then delayed arrivals are compensated forward and fused. Baseline
    modes skip broadcasting and fusing; `compensation=False` fuses stale
    remote estimates as-is.
    """
    _require_models(mode, predictor, compensator, config, compensation)
    trajectories, sensors, obs_rngs, channels = generate_scenario(config)
    active = sensors[: config.active_robots]
    active_ids = [s.robot_id for s in active]
    fusing = mode == "full" and len(active) > 1
    # frame change from each sender into each receiver, fixed for the run
    pair_sigma = {
        (r.robot_id, s.robot_id): r.extrinsics.compose(s.extrinsics.inverse())
        for r in active
        for s in active
        if r.robot_id != s.robot_id
    }

    windows = {r: deque(maxlen=config.history_length) for r in active_ids}
    beliefs = {r: {} for r in active_ids}
    learned_now = {r: {} for r in active_ids}
    graphs_now = {}
    # receiver -> (sender, object) -> send_tick -> (x, P), newest last
    remote_store = {r: {} for r in active_ids}
    # receiver -> sender -> send_tick -> (ids, ObservationGraph); validated once
    graph_cache = {r: {} for r in active_ids}
    rows = {r: [] for r in active_ids}
    log = RunLog(mode, config.dt, config.seed, config.warmup_ticks, active_ids, rows)
    traj_by_id = {t.object_id: t for t in trajectories}
    keep_ticks = config.history_length + int(MAX_LATENCY_S / config.dt) + 2

    for tick in range(config.ticks):
        now = tick * config.dt

        # local sensing and estimation, committed in configured robot order
        for robot in active:
            rid = robot.robot_id
            learned_now[rid] = {}

            # predict this tick from the window ending last tick, so the
            # measurement about to arrive corrects a genuine prior
            ens = {}
            if mode in ("learning-only", "full") and len(windows[rid]) == config.history_length:
                window = SpatioTemporalGraph(list(windows[rid]), config.dt)
                ens = ensemble_predict_all(predictor, window)

            graph = observe(trajectories, robot, tick, obs_rngs[rid], config.dt)
            graphs_now[rid] = graph
            windows[rid].append(graph)

            for i, object_id in enumerate(graph.object_ids):
                z = Measurement(graph.positions[i], graph.covariances[i], now)
                prior = beliefs[rid].get(object_id) or initial_belief(object_id, rid, now)
                if mode == "measurement-only":
                    belief = StateBelief(z.z, z.R, now, object_id, rid)
                elif object_id in ens:
                    out = ens[object_id]
                    learned_now[rid][object_id] = out.mean
                    if mode == "learning-only":
                        belief = StateBelief(out.mean, out.cov, now, object_id, rid)
                    else:
                        belief = predict_and_update(prior, out.process_noise, out.mean, z)
                elif mode == "learning-only":
                    # window not full yet: fall back to the raw measurement
                    belief = StateBelief(z.z, z.R, now, object_id, rid)
                else:
                    q = DEFAULT_PROCESS_VARIANCE * np.eye(3)
                    belief = predict_and_update(prior, q, prior.x, z)
                beliefs[rid][object_id] = belief

            if fusing:
                for object_id in graph.object_ids:
                    b = beliefs[rid][object_id]
                    msg = EstimateMessage(rid, str(object_id), now, b.x, b.P, rid)
                    for other in active_ids:
                        if other != rid:
                            channels[(rid, other)].send(tick, msg)
                            log.messages_sent += 1

        # deliveries for this tick land in each receiver's store
        if fusing:
            for (sender, receiver) in sorted(channels):
                if sender not in active_ids or receiver not in active_ids:
                    continue
                for delivery in channel_deliver(channels[(sender, receiver)], tick):
                    msg = delivery.message
                    key = (sender, msg.object_id)
                    store = remote_store[receiver].setdefault(key, OrderedDict())
                    store[delivery.send_tick] = (msg.x, msg.P)
                    while len(store) > keep_ticks:
                        store.popitem(last=False)
                    log.channel_lines.append(f"{tick},{receiver},{msg.to_line()}")
                    log.messages_delivered += 1

        # compensation and fusion against whatever has arrived
        for robot in active:
            rid = robot.robot_id
            graph = graphs_now[rid]
            compensated = _compensate_arrivals(
                rid, graph.object_ids, remote_store[rid], active_ids, tick,
                config, compensator, compensation, graph_cache[rid],
            ) if fusing else {}

            for i, object_id in enumerate(graph.object_ids):
                own = beliefs[rid][object_id]
                remotes = []
                for sender in active_ids:
                    if sender == rid:
                        continue
                    entry = compensated.get((sender, str(object_id)))
                    if entry is not None:
                        x_t, p_t = entry
                        remotes.append((x_t, p_t, pair_sigma[(rid, sender)]))
                fused = fuse_states(own, remotes) if remotes else own

                truth_world = traj_by_id[object_id].positions[tick]
                truth = robot.extrinsics.rotation @ truth_world + robot.extrinsics.translation
                learned = learned_now[rid].get(object_id, _NAN3)
                rows[rid].append(
                    LogRow(tick, object_id, truth, graph.positions[i].copy(), np.asarray(learned),
                           fused.x, float(np.trace(own.P)), float(np.trace(fused.P)))
                )
    return log


def _compensate_arrivals(rid, object_ids, store, active_ids, tick, config,
                         compensator, compensation, graph_cache):
    """Roll every sender's freshest stored estimates up to the current tick.

    Objects from one sender whose histories end at the same tick with the
    same depth are compensated in one batched graph. Histories too short
    for the learner (or compensation disabled) pass through stale.
    """
    dt = config.dt
    groups = {}  # (sender, newest_tick, hist_len) -> list of (object_id, history)
    for sender in active_ids:
        if sender == rid:
            continue
        for object_id in object_ids:
            key = (sender, str(object_id))
            history = store.get(key)
            if not history:
                continue
            ticks_known = list(history)
            newest = ticks_known[-1]
            run = [newest]
            for t in reversed(ticks_known[:-1]):
                if t == run[-1] - 1 and len(run) < config.history_length:
                    run.append(t)
                else:
                    break
            run.reverse()
            groups.setdefault((sender, newest, len(run)), []).append((str(object_id), run, history))

    out = {}
    for (sender, newest, hist_len), members in groups.items():
        delta_ticks = tick - newest
        if delta_ticks == 0 or not compensation:
            for object_id, _, history in members:
                x, p = history[newest]
                out[(sender, object_id)] = (x.copy(), p.copy())
            continue
        if hist_len < 3:
            # not enough context to roll forward; fuse the stale estimate
            for object_id, _, history in members:
                x, p = history[newest]
                out[(sender, object_id)] = (x.copy(), p.copy())
            continue
        run_ticks = members[0][1]
        ids = tuple(object_id for object_id, _, _ in members)
        cache = graph_cache.setdefault(sender, {})
        graphs = []
        for t in run_ticks:
            hit = cache.get(t)
            if hit is None or hit[0] != ids:
                xs = np.stack([history[t][0] for _, _, history in members])
                ps = np.stack([history[t][1] for _, _, history in members])
                cache[t] = (ids, fully_connected_graph(t * dt, ids, xs, ps))
                for stale in [k for k in cache if k < t - 2 * config.history_length]:
                    del cache[stale]
            graphs.append(cache[t][1])
        window = SpatioTemporalGraph(graphs, dt)
        rolled = compensate_window(compensator, window, delta_ticks * dt, dt)
        for object_id, _, history in members:
            x_t, q_t = rolled[object_id]
            _, p_delayed = history[newest]
            out[(sender, object_id)] = (x_t, compensated_uncertainty(p_delayed, q_t))
    return out

"""Canonical benchmark scenarios and the training recipe that goes with them.

The benchmark world is a ring of outward-posed robots watching objects
that orbit the ring's center on circular tracks. Every robot therefore
sees the same geometry up to a rotation and a phase shift, so per-robot
error statistics are directly comparable: a robot-count sweep changes how
much help each robot gets, not which robots happen to sit closer to the
action. Three orbits at 120 degree phase offsets keep the instantaneous
mean depth across objects constant for every robot as well.
"""

import dataclasses
import math

import numpy as np

from .cli import build_compensation_set, build_prediction_set
from .sim import ObjectSpec, RobotSpec, ScenarioConfig
from .stgl import TrainConfig, train_ensemble

RING_RADIUS = 7.0
RING_ROBOTS = 6


def ring_robots(count=RING_ROBOTS, radius=RING_RADIUS, latency=0.3, noise_scale=1.0):
    """Equally spaced robots on a circle, each facing the center."""
    robots = []
    for k in range(count):
        ang = 2.0 * math.pi * k / count
        robots.append(RobotSpec(
            f"r{k}",
            (radius * math.cos(ang), radius * math.sin(ang), 1.0),
            yaw_deg=math.degrees(ang) + 180.0,
            latency=latency,
            noise_a=0.02 * noise_scale,
            noise_b=0.005 * noise_scale,
        ))
    return tuple(robots)


def orbit(object_id, radius, phase_deg, z, omega_deg_s=60.0):
    """An object circling the world origin at a fixed angular rate.

    Positive omega runs counter-clockwise. Speed is radius * |omega|, so a
    60 deg/s orbit closes a full loop in six seconds.
    """
    phase = math.radians(phase_deg)
    heading = phase + math.copysign(math.pi / 2.0, omega_deg_s)
    return ObjectSpec(
        object_id, "turn",
        (radius * math.cos(phase), radius * math.sin(phase), z),
        (math.cos(heading), math.sin(heading), 0.0),
        speed=radius * abs(math.radians(omega_deg_s)),
        turn_rate_deg_s=omega_deg_s, turn_start_s=0.0, turn_duration_s=1e9,
    )


#: Three orbits, 120 degrees apart, staggered in radius and height.
BENCHMARK_OBJECTS = (
    orbit("a", 0.8, 0.0, 0.5),
    orbit("b", 1.1, 120.0, 1.0),
    orbit("c", 1.4, 240.0, 1.4),
)


def benchmark_config(ticks=80, seed=0, active_robots=4, latency=0.3, noise_scale=1.0):
    """The scenario every trend experiment starts from: four of six ring
    robots active, 0.3 s links, 8 s of three orbiting objects at 10 Hz."""
    return ScenarioConfig(
        BENCHMARK_OBJECTS,
        ring_robots(latency=latency, noise_scale=noise_scale),
        dt=0.1, ticks=ticks, seed=seed, active_robots=active_robots,
    )


def _training_objects(rng):
    objs = []
    for i in range(3):
        omega = float(rng.choice((50.0, 60.0, 70.0)) * rng.choice((-1.0, 1.0)))
        objs.append(orbit(f"c{i}", float(rng.uniform(0.7, 1.6)),
                          float(rng.uniform(0.0, 360.0)),
                          float(rng.uniform(0.4, 1.5)), omega))
    ang = float(rng.uniform(0.0, 2.0 * math.pi))
    speed = float(rng.uniform(0.5, 1.2))
    objs.append(ObjectSpec(
        "cv", "constant-velocity",
        (-2.0 * math.cos(ang), -2.0 * math.sin(ang), float(rng.uniform(0.4, 1.4))),
        (speed * math.cos(ang), speed * math.sin(ang), 0.0),
    ))
    return tuple(objs)


def training_config(seed, noise_scale, ticks, active_robots=RING_ROBOTS, latency=0.3):
    """A randomized sibling of the benchmark: orbits with random radius,
    phase, height and turn direction, plus one straight crosser."""
    rng = np.random.default_rng(seed)
    return ScenarioConfig(
        _training_objects(rng),
        ring_robots(latency=latency, noise_scale=noise_scale),
        dt=0.1, ticks=ticks, seed=seed, active_robots=active_robots,
    )


# Prediction data spans the whole noise ladder the robustness sweep uses,
# sampled thinner at the clean end; compensation data leans on the noise
# level the trend experiments run at.
_PREDICTION_RUNS = ((0.5, 6), (1.0, 6), (2.0, 6), (3.0, 3), (4.0, 3))
_COMPENSATION_SCALES = (0.5, 1.0, 1.0, 1.0, 2.0, 4.0)


def train_benchmark_bundle(ensemble_size=5, epochs=16, learning_rate=1.5e-3):
    """Train the predictor and compensator used by the benchmark scenarios.

    Returns (predictor, compensator). Takes a few minutes on one core;
    deterministic for fixed arguments.
    """
    pset = []
    for i, (scale, stride) in enumerate(_PREDICTION_RUNS):
        pset += build_prediction_set(training_config(101 + i, scale, 100))[::stride]
    predictor = train_ensemble(
        pset, TrainConfig(ensemble_size=ensemble_size, epochs=epochs,
                          learning_rate=learning_rate, seed=7))
    cset = []
    for i, scale in enumerate(_COMPENSATION_SCALES):
        cset += build_compensation_set(training_config(201 + i, scale, 140), predictor)
    compensator = train_ensemble(
        cset, TrainConfig(ensemble_size=ensemble_size, epochs=epochs,
                          learning_rate=learning_rate, seed=8))
    return predictor, compensator


def timing_config(objects=10, seed=0):
    """A dense world for throughput measurements: ten orbits, four robots."""
    rng = np.random.default_rng(seed)
    objs = tuple(
        orbit(f"t{i}", float(rng.uniform(0.7, 1.8)), 36.0 * i,
              float(rng.uniform(0.4, 1.5)), 60.0 if i % 2 else -60.0)
        for i in range(objects)
    )
    return dataclasses.replace(benchmark_config(seed=seed), objects=list(objs))

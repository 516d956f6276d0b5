"""End-to-end acceptance gate.

Ten checks, one printed verdict line each: exact gradients, the algebraic
fusion and filtering contracts, and the trend experiments that only hold
when learning, uncertainty and compensation cooperate. The trend tests
share one trained bundle (see the session fixture in conftest; the first
run builds and caches it). Run with -s to watch verdicts as they happen;
without -s they are echoed in the terminal summary.
"""

import dataclasses
import math
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from coloc.cli import main
from coloc.evaluate import run_baseline, sweep, trend_residual
from coloc.fusion import Measurement, StateBelief, fusion_gain, predict_and_update
from coloc.scenarios import benchmark_config, timing_config
from coloc.sim import run_scenario
from coloc.stgl import (SpatioTemporalGraph, StglModel, _sample_loss,
                        ensemble_moments, fully_connected_graph, save_bundle)
from coloc.nn import no_grad

SWEEP_SEEDS = tuple(range(5))


def _verdict(index, name, ok, detail):
    line = f"[{index:>2}/10] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _random_pd(rng, dim=3, floor=0.1):
    a = rng.normal(size=(dim, dim))
    return (a @ a.T + floor * np.eye(dim)) * 10.0 ** rng.uniform(-1.0, 1.0)


# ---------------------------------------------------------------------------
# exact contracts


def test_pipeline_gradients_match_finite_differences():
    """Every parameter gradient of the training loss agrees with central
    differences, through the encoder, both attention layers, the decoder
    rollout and the likelihood head."""
    t0 = time.perf_counter()
    worst = 0.0
    step = 1e-5
    for case in range(50):
        rng = np.random.default_rng(1000 + case)
        model = StglModel(seed=1000 + case, temporal_dim=4, gat_hidden=4)
        ids = [f"o{i}" for i in range(2 + (case % 7 == 3))]
        length = 4 + case % 2
        graphs = [
            fully_connected_graph(
                t * 0.1, ids, rng.normal(scale=1.0, size=(len(ids), 3)),
                np.stack([0.01 * np.eye(3)] * len(ids)))
            for t in range(length)
        ]
        window = SpatioTemporalGraph(graphs, 0.1)
        targets = {i: rng.normal(size=3) for i in ids}
        steps = 2 if case % 3 == 0 else 1

        loss = _sample_loss(model, window, targets, False, None, steps)
        model.params.zero_grad()
        loss.backward()

        def value():
            with no_grad():
                return float(_sample_loss(model, window, targets, False, None, steps).data)

        for _, p in model.params.items():
            numeric = np.zeros_like(p.data)
            for idx in np.ndindex(p.data.shape):
                orig = p.data[idx]
                p.data[idx] = orig + step
                up = value()
                p.data[idx] = orig - step
                down = value()
                p.data[idx] = orig
                numeric[idx] = (up - down) / (2.0 * step)
            rel = np.max(np.abs(p.grad - numeric) / np.maximum(1.0, np.abs(numeric)))
            worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    _verdict(1, "gradient fidelity", worst < 1e-4 and elapsed < 60.0,
             f"max rel err {worst:.2e} over 50 instances in {elapsed:.1f}s")


def test_fusion_gains_always_sum_to_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        count = int(rng.integers(1, 7))
        covs = [_random_pd(rng) for _ in range(count)]
        total = sum(fusion_gain(covs).matrices)
        worst = max(worst, float(np.max(np.abs(total - np.eye(3)))))
    _verdict(2, "fusion gain identity", worst < 1e-9,
             f"max deviation {worst:.2e} over 1000 draws")


def test_identical_ensemble_members_leave_only_data_uncertainty():
    rng = np.random.default_rng(3)
    worst_q = worst_mu = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        mean = rng.normal(size=3)
        cov = _random_pd(rng)
        mu, sigma, q = ensemble_moments([mean] * k, [cov] * k)
        worst_q = max(worst_q, float(np.max(np.abs(q - cov))),
                      float(np.max(np.abs(sigma - cov))))
        worst_mu = max(worst_mu, float(np.max(np.abs(mu - mean))))
    _verdict(3, "ensemble degeneracy", worst_q < 1e-12 and worst_mu < 1e-12,
             f"max spread term {worst_q:.2e} over 1000 draws")


def test_kalman_update_contracts():
    rng = np.random.default_rng(4)
    psd_ok = True
    trace_ok = True
    drift = 0.0
    for _ in range(1000):
        prior = StateBelief(rng.normal(size=3), _random_pd(rng), 0.0, "o", "r")
        q = _random_pd(rng, floor=0.05)
        learned = rng.normal(scale=2.0, size=3)
        z = Measurement(rng.normal(scale=2.0, size=3), _random_pd(rng), 0.1)
        post = predict_and_update(prior, q, learned, z)
        psd_ok &= bool(np.linalg.eigvalsh(post.P).min() >= -1e-12)
        budget = np.trace(prior.P + q)
        trace_ok &= bool(np.trace(post.P) <= budget * (1.0 + 1e-12))

        blind = Measurement(rng.normal(scale=2.0, size=3), 1e9 * np.eye(3), 0.1)
        post_blind = predict_and_update(prior, q, learned, blind)
        drift = max(drift, float(np.linalg.norm(post_blind.x - learned)))
    _verdict(4, "kalman contracts", psd_ok and trace_ok and drift < 1e-6,
             f"psd {psd_ok}, trace bounded {trace_ok}, "
             f"blind-update drift {drift:.2e}")


# ---------------------------------------------------------------------------
# trend experiments on the benchmark world


def test_delay_compensation_recovers_lost_accuracy(benchmark_bundle):
    predictor, compensator = benchmark_bundle
    base = benchmark_config()
    seeds = tuple(range(20))
    on = run_baseline("full", base, predictor, compensator, seeds=seeds)
    off = run_baseline("full", base, predictor, compensator, seeds=seeds,
                       compensation=False)
    gain = (off.de - on.de) / off.de
    _verdict(5, "compensation benefit", gain >= 0.10,
             f"DE {on.de:.4f} vs {off.de:.4f} stale, {gain:.1%} lower over 20 seeds")


def test_error_grows_with_delay_toward_single_robot_level(benchmark_bundle):
    predictor, compensator = benchmark_bundle
    base = benchmark_config()
    result = sweep("latency", (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7), base,
                   predictor, compensator, seeds=SWEEP_SEEDS)
    span = max(result.mean_de) - min(result.mean_de)
    residual = trend_residual(result.mean_de, increasing=True)
    solo = run_baseline(
        "full", dataclasses.replace(base, active_robots=1, warmup_ticks=None),
        predictor, compensator, seeds=SWEEP_SEEDS)
    gap = abs(result.mean_de[-1] - solo.de) / solo.de
    detail = (f"DE {result.mean_de[0]:.4f}->{result.mean_de[-1]:.4f}, "
              f"residual {residual / max(span, 1e-12):.1%} of range, "
              f"solo {solo.de:.4f}, gap {gap:.1%}")
    _verdict(6, "latency trend",
             residual < 0.10 * span and gap <= 0.15, detail)


def test_extra_robots_never_hurt_then_saturate(benchmark_bundle):
    predictor, compensator = benchmark_bundle
    result = sweep("robots", (1, 2, 3, 4, 5, 6), benchmark_config(),
                   predictor, compensator, seeds=SWEEP_SEEDS)
    span = max(result.mean_de) - min(result.mean_de)
    residual = trend_residual(result.mean_de, increasing=False)
    plateau = abs(result.mean_de[5] - result.mean_de[4])
    detail = (f"DE {np.round(result.mean_de, 4).tolist()}, "
              f"residual {residual / max(span, 1e-12):.1%} of range, "
              f"last step {plateau:.4f}")
    _verdict(7, "robot-count trend",
             residual < 0.10 * span and plateau <= 0.10 * span, detail)


def test_noise_sweep_orders_the_baselines(benchmark_bundle):
    predictor, compensator = benchmark_bundle
    base = benchmark_config()
    grid = (0.5, 1.0, 2.0, 3.0, 4.0)
    auc = {}
    for kind in ("full", "learning-only", "model-only", "measurement-only"):
        auc[kind] = sweep("noise", grid, base, predictor, compensator,
                          seeds=SWEEP_SEEDS, kind=kind).auc
    chain = ("full", "learning-only", "model-only", "measurement-only")
    ordered = all(auc[a] < auc[b] for a, b in zip(chain, chain[1:]))
    _verdict(8, "noise robustness ordering", ordered,
             ", ".join(f"{k} {auc[k]:.3f}" for k in chain))


def test_tick_runtime_supports_online_use(benchmark_bundle):
    predictor, compensator = benchmark_bundle
    config = timing_config(objects=10)
    prefix = dataclasses.replace(config, ticks=config.warmup_ticks,
                                 warmup_ticks=config.warmup_ticks - 1)
    extra = config.ticks - prefix.ticks

    def best_of(cfg, trials=2):
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            run_scenario(cfg, predictor, compensator, mode="full")
            times.append(time.perf_counter() - t0)
        return min(times)

    per_tick = (best_of(config) - best_of(prefix)) / extra
    _verdict(9, "throughput", per_tick <= 0.100,
             f"{per_tick * 1000:.1f} ms per tick, "
             f"{len(config.objects)} objects, {config.active_robots} robots")


def test_cli_runs_are_byte_identical(benchmark_bundle, tmp_path):
    config = tmp_path / "scenario.yaml"
    config.write_text(
        "dt: 0.1\nticks: 30\nseed: 5\nactive_robots: 3\n"
        "objects:\n"
        "  - {id: a, kind: turn, start: [0.9, 0.0, 0.6], velocity: [0.0, 1.0, 0.0],"
        " speed: 0.94, turn_rate_deg_s: 60.0, turn_start_s: 0.0, turn_duration_s: 99.0}\n"
        "  - {id: b, kind: constant-velocity, start: [-1.5, 0.8, 1.0],"
        " velocity: [0.6, -0.3, 0.0]}\n"
        "robots:\n"
        "  - {id: r0, position: [6.0, 0.0, 1.0], yaw_deg: 180.0, latency: 0.3}\n"
        "  - {id: r1, position: [-3.0, 5.2, 1.0], yaw_deg: 300.0, latency: 0.3}\n"
        "  - {id: r2, position: [-3.0, -5.2, 1.0], yaw_deg: 60.0, latency: 0.3}\n"
    )
    bundle = tmp_path / "bundle.json"
    save_bundle(str(bundle), *benchmark_bundle)

    outputs = []
    for name in ("one", "two"):
        out = tmp_path / name
        code = main(["run", "--config", str(config), "--bundle", str(bundle),
                     "--out", str(out)])
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outputs[0] == outputs[1]
    _verdict(10, "determinism", same,
             f"{len(outputs[0])} artifacts compared byte for byte")

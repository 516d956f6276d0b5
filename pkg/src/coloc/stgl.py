"""Uncertainty-aware spatiotemporal graph learner.

Each tracked object's recent motion is encoded by an LSTM over relative
displacements, neighbor influence is mixed in by two graph-attention
layers, and an LSTM decoder emits a Gaussian over the next displacement
(mean plus diagonal variance). A deep ensemble of K seed-varied models
turns disagreement between members into a process-uncertainty matrix Q:
the averaged data covariance plus the diagonal spread of member means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import tensor as T
from .nn.checkpoint import atomic_write_text, params_from_obj, params_to_obj
from .nn.tensor import ShapeError, Tensor, _stable_sigmoid

VARIANCE_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# graph containers


@dataclass
class ObservationGraph:
    """One tick of detections: positions, measurement covariances, edges."""

    timestamp: float
    object_ids: tuple
    positions: np.ndarray  # (M, 3) meters
    covariances: np.ndarray  # (M, 3, 3) m^2
    adjacency: np.ndarray  # (M, M) bool, self-loops included

    def __post_init__(self):
        self.object_ids = tuple(self.object_ids)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        m = len(self.object_ids)
        if len(set(self.object_ids)) != m:
            raise ValueError("object ids must be unique")
        if self.positions.shape != (m, 3):
            raise ShapeError(f"positions {self.positions.shape} for {m} objects")
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if self.covariances.shape != (m, 3, 3):
            raise ShapeError(f"covariances {self.covariances.shape} for {m} objects")
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        if self.adjacency.shape != (m, m):
            raise ShapeError(f"adjacency {self.adjacency.shape} for {m} objects")
        if m:
            if not np.array_equal(self.adjacency, self.adjacency.T):
                raise ValueError("adjacency must be symmetric")
            if not self.adjacency.diagonal().all():
                raise ValueError("adjacency must include self-loops")
        for i, r in enumerate(self.covariances):
            if not np.allclose(r, r.T, atol=1e-9):
                raise ValueError(f"measurement covariance {i} is not symmetric")
            if np.linalg.eigvalsh(r).min() < -1e-9:
                raise ValueError(f"measurement covariance {i} is not PSD")

    def index_of(self, object_id) -> int:
        return self.object_ids.index(object_id)


def fully_connected_graph(timestamp, object_ids, positions, covariances) -> ObservationGraph:
    """Convenience constructor: co-observed objects get all-to-all edges."""
    m = len(object_ids)
    return ObservationGraph(
        timestamp, tuple(object_ids), positions, covariances, np.ones((m, m), dtype=bool)
    )


@dataclass
class SpatioTemporalGraph:
    """Observation graphs at uniform dt spacing, oldest first."""

    graphs: list
    dt: float

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("history must contain at least one graph")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        times = np.array([g.timestamp for g in self.graphs])
        if len(times) > 1:
            gaps = np.diff(times)
            if np.any(np.abs(gaps - self.dt) > 1e-9):
                raise ValueError("timestamps must increase by exactly dt")

    def __len__(self):
        return len(self.graphs)

    def tracked_ids(self) -> list:
        """Ids present at every tick, in last-tick order. Only these have a
        complete displacement history, so only these are predicted."""
        common = set(self.graphs[0].object_ids)
        for g in self.graphs[1:]:
            common &= set(g.object_ids)
        return [i for i in self.graphs[-1].object_ids if i in common]

    def positions_of(self, object_id) -> np.ndarray:
        """(L, 3) positions of one object across the window."""
        return np.stack([g.positions[g.index_of(object_id)] for g in self.graphs])


@dataclass
class GaussianEstimate:
    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(3, 3)
        if not (np.isfinite(self.mean).all() and np.isfinite(self.cov).all()):
            raise ValueError("estimate has non-finite entries")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9):
            raise ValueError("estimate covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-9:
            raise ValueError("estimate covariance is not PSD")


@dataclass
class EnsembleOutput:
    mean: np.ndarray  # (3,) ensemble mean
    cov: np.ndarray  # (3, 3) moment-matched mixture covariance
    process_noise: np.ndarray  # (3, 3) Q: data + model uncertainty


@dataclass
class TrainConfig:
    ensemble_size: int = 5
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    history_length: int = 8

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.history_length < 3:
            raise ValueError("history_length must be >= 3 (two displacements)")


# ---------------------------------------------------------------------------
# model


class StglModel:
    """Encoder LSTM + two attention layers + decoder LSTM with a Gaussian head.

    Dimension defaults: displacement inputs are 3-wide, temporal embeddings
    32-wide, the attention hidden layer 64-wide, and the decoder hidden state
    is the 64-wide concatenation of the temporal and spatial embeddings. The
    head maps it to 3 mean-displacement components and 3 raw variances.
    """

    def __init__(self, seed, temporal_dim=32, gat_hidden=64, dropout_p=0.1):
        rng = np.random.default_rng(seed)
        self.temporal_dim = temporal_dim
        self.gat_hidden = gat_hidden
        self.decoder_dim = 2 * temporal_dim
        self.dropout_p = dropout_p
        self.params = nn.ParamSet()
        self.encoder = nn.init_lstm(self.params, "enc", 3, temporal_dim, rng)
        self.gat1 = nn.init_gat(self.params, "gat1", temporal_dim, gat_hidden, rng, dropout_p)
        self.gat2 = nn.init_gat(self.params, "gat2", gat_hidden, temporal_dim, rng, dropout_p)
        self.decoder = nn.init_lstm(self.params, "dec", 3, self.decoder_dim, rng)
        self.head_w = self.params.add(
            "head.w", nn.uniform_init(rng, (self.decoder_dim, 6), self.decoder_dim)
        )
        self.head_b = self.params.add("head.b", np.zeros((1, 6)))
        # last computed per-object embeddings (m = temporal, s = spatial)
        self.cache = {}
        self.final_train_loss = None
        self.loss_history = []

    def arch(self) -> dict:
        return {"temporal_dim": self.temporal_dim, "gat_hidden": self.gat_hidden}


def _window_arrays(history: SpatioTemporalGraph, ids):
    """Positions (L, M, 3) for the given ids across the window."""
    return np.stack([history.positions_of(i) for i in ids], axis=1)


def _sub_adjacency(graph: ObservationGraph, ids) -> np.ndarray:
    idx = [graph.index_of(i) for i in ids]
    return graph.adjacency[np.ix_(idx, idx)]


def _encode_all(model: StglModel, positions: np.ndarray) -> Tensor:
    """Run the encoder over displacement sequences. positions: (L, M, 3)."""
    L, m, _ = positions.shape
    disp = np.diff(positions, axis=0)  # (L-1, M, 3)
    c, h = nn.lstm_zero_state(model.encoder, m)
    for step in disp:
        c, h = nn.lstm_step(model.encoder, c, h, T.constant(step))
    return h


def _embed_all(model: StglModel, temporal: Tensor, adjacency, train_mode=False, rng=None) -> Tensor:
    h1, _ = nn.gat_forward(model.gat1, temporal, adjacency, train_mode=train_mode, rng=rng)
    h2, _ = nn.gat_forward(model.gat2, h1, adjacency, train_mode=train_mode, rng=rng)
    return h2


def _variance_head(raw: Tensor) -> Tensor:
    # softplus keeps variances positive; the floor keeps them invertible
    sp = T.softplus(raw)
    return T.relu(sp - T.constant(VARIANCE_FLOOR)) + T.constant(VARIANCE_FLOOR)


def _decode_rollout(model: StglModel, m: Tensor, s: Tensor, last_disp, last_pos, steps: int):
    """Recursive decoding: each step feeds its mean displacement back in.

    Returns (mean positions (M, 3), accumulated variances (M, 3)) as Tensors.
    Per-step variances add because each displacement carries fresh noise.
    """
    n_rows = m.shape[0]
    c = T.constant(np.zeros((n_rows, model.decoder_dim)))
    h = T.concat([m, s], axis=1)
    inp = T.as_tensor(last_disp)
    pos = T.as_tensor(last_pos)
    var_total = None
    for _ in range(steps):
        c, h = nn.lstm_step(model.decoder, c, h, inp)
        out = h @ model.head_w + model.head_b
        mu_d = T.cols(out, 0, 3)
        var = _variance_head(T.cols(out, 3, 6))
        pos = pos + mu_d
        var_total = var if var_total is None else var_total + var
        inp = mu_d
    return pos, var_total


def _check_history(model, history: SpatioTemporalGraph):
    if len(history) < 3:
        raise ValueError(
            f"history too short: {len(history)} ticks, need >= 3 for a displacement sequence"
        )


# ---------------------------------------------------------------------------
# inference fast path
#
# Plain-numpy mirror of the tensor forward pass, op for op, so inference
# (which never needs gradients) skips the autodiff graph entirely. Any
# change to the tensor path must be reflected here; the test suite pins the
# two paths to bit-identical outputs.


def _lstm_np(p, cell, hidden, inp):
    h = p.hidden_dim
    gates = inp @ p.wx.data + hidden @ p.wh.data + p.b.data
    gf = _stable_sigmoid(gates[:, 0:2 * h])  # input and forget gates share a call
    i, f = gf[:, 0:h], gf[:, h:2 * h]
    g = np.tanh(gates[:, 2 * h:3 * h])
    o = _stable_sigmoid(gates[:, 3 * h:4 * h])
    new_cell = f * cell + i * g
    return new_cell, o * np.tanh(new_cell)


def _encode_np(model: StglModel, positions: np.ndarray) -> np.ndarray:
    L, m, _ = positions.shape
    c = np.zeros((m, model.temporal_dim))
    h = np.zeros((m, model.temporal_dim))
    for step in np.diff(positions, axis=0):
        c, h = _lstm_np(model.encoder, c, h, step)
    return h


def _gat_np(p, feats: np.ndarray, adjacency: np.ndarray) -> np.ndarray:
    isolated = ~adjacency.any(axis=1)
    if isolated.any():
        raise ValueError(
            f"isolated nodes (no neighbors, no self-loop): {np.flatnonzero(isolated).tolist()}"
        )
    h = feats @ p.w.data
    src = h @ p.a.data[:, 0:p.out_dim].T
    dst = h @ p.a.data[:, p.out_dim:2 * p.out_dim].T
    lin = src + dst.T
    scores = np.where(lin > 0, lin, p.leaky_slope * lin)
    mask = adjacency.astype(float)
    shift = (scores * mask).max(axis=1, keepdims=True)
    e = np.exp(scores - shift) * mask
    att = e / e.sum(axis=1, keepdims=True)
    out = att @ h
    return out * (out > 0)


def _variance_head_np(raw: np.ndarray) -> np.ndarray:
    sp = np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw)))
    v = sp - VARIANCE_FLOOR
    return v * (v > 0) + VARIANCE_FLOOR


def _decode_np(model: StglModel, m, s, last_disp, last_pos, steps: int):
    c = np.zeros((m.shape[0], model.decoder_dim))
    h = np.concatenate([m, s], axis=1)
    inp = np.asarray(last_disp, dtype=np.float64)
    pos = np.asarray(last_pos, dtype=np.float64)
    var_total = None
    for _ in range(steps):
        c, h = _lstm_np(model.decoder, c, h, inp)
        out = h @ model.head_w.data + model.head_b.data
        mu_d = out[:, 0:3]
        var = _variance_head_np(out[:, 3:6])
        pos = pos + mu_d
        var_total = var if var_total is None else var_total + var
        inp = mu_d
    return pos, var_total


def _forward_window_np(model: StglModel, history: SpatioTemporalGraph, ids, steps=1,
                       arrays=None):
    """Inference twin of _forward_window: ndarrays in, ndarrays out.

    arrays: optional precomputed (positions, adjacency), shared across
    ensemble members so the window is gathered only once.
    """
    if arrays is None:
        positions = _window_arrays(history, ids)
        adjacency = _sub_adjacency(history.graphs[-1], ids)
    else:
        positions, adjacency = arrays
    temporal = _encode_np(model, positions)
    spatial = _gat_np(model.gat2, _gat_np(model.gat1, temporal, adjacency), adjacency)
    mean, var = _decode_np(
        model, temporal, spatial, positions[-1] - positions[-2], positions[-1], steps
    )
    for row, object_id in enumerate(ids):
        model.cache[object_id] = {"m": temporal[row].copy(), "s": spatial[row].copy()}
    return mean, var


def member_rollouts(models, history: SpatioTemporalGraph, steps: int):
    """Every member's rollout in one call, as raw arrays.

    Returns (ids, means, variances) with means and variances shaped
    (K, M, 3); variances are the diagonal covariance entries.
    """
    if not models:
        raise ValueError("ensemble must contain at least one model")
    archs = {tuple(sorted(m.arch().items())) for m in models}
    if len(archs) != 1:
        raise ValueError("ensemble members must share one architecture")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_history(models[0], history)
    ids = history.tracked_ids()
    if not ids:
        return (), np.zeros((len(models), 0, 3)), np.zeros((len(models), 0, 3))
    arrays = (_window_arrays(history, ids), _sub_adjacency(history.graphs[-1], ids))
    means, variances = [], []
    for model in models:
        mean, var = _forward_window_np(model, history, ids, steps=steps, arrays=arrays)
        means.append(mean)
        variances.append(var)
    return ids, np.stack(means), np.stack(variances)


def _forward_window(model: StglModel, history: SpatioTemporalGraph, ids, steps=1,
                    train_mode=False, rng=None):
    """Shared forward pass over all tracked ids. Returns Tensors (M, 3)."""
    positions = _window_arrays(history, ids)
    temporal = _encode_all(model, positions)
    adjacency = _sub_adjacency(history.graphs[-1], ids)
    spatial = _embed_all(model, temporal, adjacency, train_mode=train_mode, rng=rng)
    last_disp = positions[-1] - positions[-2]
    mean, var = _decode_rollout(model, temporal, spatial, last_disp, positions[-1], steps)
    for row, object_id in enumerate(ids):
        model.cache[object_id] = {
            "m": temporal.data[row].copy(),
            "s": spatial.data[row].copy(),
        }
    return mean, var


# ---------------------------------------------------------------------------
# public single-object operations


def encode_temporal(model: StglModel, history: SpatioTemporalGraph, object_id) -> np.ndarray:
    """Temporal motion embedding: final encoder hidden state over the
    object's displacement sequence."""
    _check_history(model, history)
    if object_id not in history.tracked_ids():
        raise ValueError(f"object {object_id!r} lacks a full history in this window")
    with T.no_grad():
        h = _encode_all(model, _window_arrays(history, [object_id]))
    m = h.data[0].copy()
    model.cache.setdefault(object_id, {})["m"] = m.copy()
    return m


def embed_spatial(model: StglModel, temporal_embeddings, adjacency) -> list:
    """Mix neighbor embeddings through both attention layers."""
    emb = np.asarray(temporal_embeddings, dtype=np.float64).reshape(-1, model.temporal_dim)
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.shape != (len(emb), len(emb)):
        raise ShapeError(
            f"adjacency {adjacency.shape} does not match {len(emb)} embeddings"
        )
    with T.no_grad():
        out = _embed_all(model, T.constant(emb), adjacency)
    return [row.copy() for row in out.data]


def decode_state(model: StglModel, m, s, last_displacement, last_position) -> GaussianEstimate:
    """One decoding step from cached embeddings.

    The head's mean displacement is applied to last_position (the anchor the
    displacement is relative to); raw head variances pass through softplus.
    """
    m = np.asarray(m, dtype=np.float64).reshape(1, model.temporal_dim)
    s = np.asarray(s, dtype=np.float64).reshape(1, model.temporal_dim)
    disp = np.asarray(last_displacement, dtype=np.float64).reshape(1, 3)
    pos = np.asarray(last_position, dtype=np.float64).reshape(1, 3)
    with T.no_grad():
        mean, var = _decode_rollout(model, T.constant(m), T.constant(s), disp, pos, steps=1)
    return GaussianEstimate(mean.data[0], np.diag(var.data[0]))


def rollout(model: StglModel, history: SpatioTemporalGraph, steps: int) -> dict:
    """Predict `steps` ticks ahead for every fully tracked object.

    Returns {object_id: GaussianEstimate} at the final step; means follow the
    decoder's own displacement chain, variances accumulate per step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_history(model, history)
    ids = history.tracked_ids()
    if not ids:
        return {}
    mean, var = _forward_window_np(model, history, ids, steps=steps)
    return {
        object_id: GaussianEstimate(mean[i], np.diag(var[i]))
        for i, object_id in enumerate(ids)
    }


# ---------------------------------------------------------------------------
# ensemble


def ensemble_moments(means, covs):
    """Moments of a uniform Gaussian mixture plus the diagonal-only process
    uncertainty Q.

    Computed in deviation form (spreads around the pooled mean) so that K
    identical members give exactly zero model uncertainty, not an epsilon
    left over from cancelling large squares.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    k = len(means)
    if k == 0 or len(covs) != k:
        raise ValueError("means and covariances must be non-empty and parallel")
    mu_p = means[0] + (means - means[0]).mean(axis=0)
    dev = means - mu_p
    data_cov = covs.mean(axis=0)
    sigma_p = data_cov + np.einsum("ki,kj->ij", dev, dev) / k
    q = data_cov + np.diag((dev * dev).mean(axis=0))
    return mu_p, sigma_p, q


def ensemble_predict_all(models, history: SpatioTemporalGraph) -> dict:
    """One-step ensemble prediction for every tracked object."""
    ids, means, variances = member_rollouts(models, history, steps=1)
    out = {}
    for i, object_id in enumerate(ids):
        covs = [np.diag(v) for v in variances[:, i]]
        mu_p, sigma_p, q = ensemble_moments(means[:, i], covs)
        out[object_id] = EnsembleOutput(mu_p, sigma_p, q)
    return out


def ensemble_predict(models, history: SpatioTemporalGraph, object_id) -> EnsembleOutput:
    out = ensemble_predict_all(models, history)
    if object_id not in out:
        raise ValueError(f"object {object_id!r} lacks a full history in this window")
    return out[object_id]


# ---------------------------------------------------------------------------
# training


def _sample_loss(model: StglModel, window: SpatioTemporalGraph, targets: dict,
                 train_mode: bool, rng, steps=1):
    ids = window.tracked_ids()
    missing = [i for i in ids if i not in targets]
    if missing:
        raise ValueError(f"targets missing for tracked objects {missing}")
    mean, var = _forward_window(model, window, ids, steps=steps, train_mode=train_mode, rng=rng)
    y = np.stack([np.asarray(targets[i], dtype=np.float64) for i in ids])
    return nn.diag_nll(mean, var, y) * T.constant(1.0 / len(ids))


def _unpack_sample(entry):
    """Dataset rows are (window, targets) for one-step prediction or
    (window, targets, steps) when the target sits several ticks past the
    window, as delayed-arrival compensation requires."""
    if len(entry) == 2:
        window, targets = entry
        return window, targets, 1
    window, targets, steps = entry
    if int(steps) != steps or steps < 1:
        raise ValueError(f"prediction horizon must be a positive integer, got {steps!r}")
    return window, targets, int(steps)


def train_ensemble(dataset, config: TrainConfig):
    """Train K members on identical data, differing only in seed.

    dataset: list of (SpatioTemporalGraph, {object_id: next position}), with
    an optional third element giving the rollout horizon in ticks when the
    target lies further ahead than one step. Every member sees the same
    per-epoch sample order; initialization and dropout draws vary per member.
    Returns the trained models, each with final_train_loss set to its mean
    loss over the last epoch.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    for entry in dataset:
        window, targets, _ = _unpack_sample(entry)
        if len(window) < 3:
            raise ValueError("every training window needs >= 3 ticks")
        missing = [i for i in window.tracked_ids() if i not in targets]
        if missing:
            raise ValueError(f"training sample lacks targets for {missing}")

    root = np.random.SeedSequence(config.seed)
    member_seeds = root.spawn(config.ensemble_size + 1)
    order_rng = np.random.default_rng(member_seeds[-1])
    orders = [order_rng.permutation(len(dataset)) for _ in range(config.epochs)]

    models = []
    for k in range(config.ensemble_size):
        init_seq, dropout_seq = member_seeds[k].spawn(2)
        model = StglModel(init_seq)
        dropout_rng = np.random.default_rng(dropout_seq)
        state = nn.AdamState(model.params, lr=config.learning_rate)
        per_epoch = []
        for epoch in range(config.epochs):
            epoch_losses = []
            for idx in orders[epoch]:
                window, targets, steps = _unpack_sample(dataset[idx])
                loss = _sample_loss(model, window, targets, train_mode=True,
                                    rng=dropout_rng, steps=steps)
                value = loss.data.item()
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"non-finite training loss at epoch {epoch}, sample {idx}"
                    )
                loss.backward()
                nn.adam_step(state, model.params)
                epoch_losses.append(value)
            per_epoch.append(float(np.mean(epoch_losses)))
        model.loss_history = per_epoch
        model.final_train_loss = per_epoch[-1]
        models.append(model)
    return models


# ---------------------------------------------------------------------------
# bundles: predictor + delay-compensator ensembles in one file


BUNDLE_FORMAT = "coloc-bundle"
BUNDLE_VERSION = 1


def save_bundle(path, predictor_models, compensator_models):
    import json

    def pack(models):
        return [params_to_obj(m.params) for m in models]

    if not predictor_models:
        raise ValueError("bundle requires at least one predictor model")
    arch = predictor_models[0].arch()
    for m in list(predictor_models) + list(compensator_models):
        if m.arch() != arch:
            raise ValueError("all bundled models must share one architecture")
    obj = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "arch": arch,
        "predictor": pack(predictor_models),
        "compensator": pack(compensator_models),
    }
    atomic_write_text(path, json.dumps(obj))


def load_bundle(path):
    """Returns (predictor models, compensator models)."""
    import json

    with open(path) as f:
        obj = json.load(f)
    if obj.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"not a {BUNDLE_FORMAT} file")
    if obj.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {obj.get('version')!r}")
    arch = obj["arch"]
    if not all(isinstance(arch.get(k), int) and arch[k] > 0 for k in ("temporal_dim", "gat_hidden")):
        raise ValueError("bundle architecture header is invalid")

    def unpack(entries):
        models = []
        for entry in entries:
            model = StglModel(0, temporal_dim=arch["temporal_dim"], gat_hidden=arch["gat_hidden"])
            model.params.load_values(params_from_obj(entry))
            models.append(model)
        return models

    return unpack(obj["predictor"]), unpack(obj["compensator"])

"""Sequence classifier over per-note concept vectors.

A single-layer LSTM reads one encoded note at a time; the final hidden state
feeds a sigmoid head. Gates use the standard sigmoid/tanh recurrence, trained
with per-sample backpropagation through time and plain fixed-rate gradient
descent on mean binary cross-entropy. Analytic gradients are verified against
central finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

MODEL_FORMAT_VERSION = 1


@dataclass
class LstmConfig:
    epochs: int = 15
    hidden_size: int = 128
    batch_size: int = 4
    num_layers: int = 1
    dropout: float = 0.5
    learning_rate: float = 1e-3
    seed: int = 0
    precision: str = "standard"  # "standard" = float32, "high" = float64

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.num_layers != 1:
            raise ValueError("only a single LSTM layer is supported")
        if self.precision not in ("standard", "high"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "high" else np.float32


@dataclass
class EncoderStats:
    """log(1+count) standardization parameters, frozen on the training split."""

    selected: np.ndarray  # column indices into the full vocabulary
    mean: np.ndarray
    std: np.ndarray


@dataclass
class LstmModel:
    # W stacks the input/forget/cell/output gates: (4H, K+H); b is (4H,).
    W: np.ndarray
    b: np.ndarray
    w_out: np.ndarray
    b_out: float
    config: LstmConfig
    encoder: EncoderStats | None = None

    @property
    def hidden_size(self) -> int:
        return len(self.w_out)

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.hidden_size


def fit_encoder(sequences, selected) -> EncoderStats:
    """Collect mean/std of log(1+count) over every training note vector.
    Zero-variance dimensions standardize with std 1."""
    selected = np.asarray(selected, dtype=np.int64)
    notes = np.concatenate([seq.vectors[:, selected] for seq in sequences])
    transformed = np.log1p(notes.astype(float))
    std = transformed.std(axis=0)
    std[std == 0] = 1.0
    return EncoderStats(selected, transformed.mean(axis=0), std)


def encode_sequence(vectors: np.ndarray, stats: EncoderStats) -> np.ndarray:
    """One encoding per note, order preserved: log(1+count), standardized."""
    if len(vectors) == 0:
        raise ValueError("empty sequence")
    columns = np.asarray(vectors)[:, stats.selected].astype(float)
    return (np.log1p(columns) - stats.mean) / stats.std


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def init_model(input_size: int, config: LstmConfig, encoder: EncoderStats | None = None) -> LstmModel:
    """uniform(-1/sqrt(H), 1/sqrt(H)) weights with the forget-gate bias +1."""
    rng = np.random.default_rng(config.seed)
    h = config.hidden_size
    bound = 1.0 / math.sqrt(h)
    dtype = config.dtype
    W = rng.uniform(-bound, bound, size=(4 * h, input_size + h)).astype(dtype)
    b = np.zeros(4 * h, dtype=dtype)
    b[h : 2 * h] = 1.0
    w_out = rng.uniform(-bound, bound, size=h).astype(dtype)
    return LstmModel(W, b, w_out, 0.0, config, encoder)


def _run_cells(model: LstmModel, encodings: np.ndarray):
    """Forward recurrence; returns per-step caches for BPTT."""
    h = model.hidden_size
    dtype = model.config.dtype
    hidden = np.zeros(h, dtype=dtype)
    cell = np.zeros(h, dtype=dtype)
    caches = []
    for x in encodings.astype(dtype):
        joint = np.concatenate([x, hidden])
        z = model.W @ joint + model.b
        i = _sigmoid(z[:h])
        f = _sigmoid(z[h : 2 * h])
        g = np.tanh(z[2 * h : 3 * h])
        o = _sigmoid(z[3 * h :])
        cell_prev = cell
        cell = f * cell_prev + i * g
        tanh_c = np.tanh(cell)
        hidden = o * tanh_c
        caches.append((joint, i, f, g, o, cell_prev, tanh_c))
    return hidden, caches


def forward(
    model: LstmModel,
    encodings: np.ndarray,
    dropout_active: bool = False,
    dropout_rng=None,
) -> float:
    """Probability of ITU admission for one encoded note sequence.

    Inverted dropout applies to the final hidden state only while training.
    """
    encodings = np.asarray(encodings)
    if encodings.ndim != 2 or len(encodings) == 0:
        raise ValueError("encodings must be a non-empty (steps, features) array")
    if not np.isfinite(encodings).all():
        raise FloatingPointError("non-finite encoding input")
    hidden, _ = _run_cells(model, encodings)
    if dropout_active and model.config.dropout > 0:
        if dropout_rng is None:
            dropout_rng = np.random.default_rng(model.config.seed)
        keep = 1.0 - model.config.dropout
        mask = (dropout_rng.random(model.hidden_size) < keep) / keep
        hidden = hidden * mask
    logit = float(model.w_out @ hidden + model.b_out)
    return float(_sigmoid(logit))


def _loss_and_gradients(model: LstmModel, encodings: np.ndarray, label: int, mask=None):
    """BCE loss plus analytic gradients for one sequence (BPTT)."""
    h = model.hidden_size
    dtype = model.config.dtype
    hidden, caches = _run_cells(model, encodings)
    dropped = hidden if mask is None else hidden * mask
    logit = float(model.w_out @ dropped + model.b_out)
    p = float(_sigmoid(logit))
    eps = 1e-12
    loss = -(label * math.log(p + eps) + (1 - label) * math.log(1 - p + eps))

    dlogit = p - label
    grad_w_out = dlogit * dropped
    grad_b_out = dlogit
    dh = dlogit * model.w_out
    if mask is not None:
        dh = dh * mask

    grad_W = np.zeros_like(model.W)
    grad_b = np.zeros_like(model.b)
    dc = np.zeros(h, dtype=dtype)
    Wh = model.W[:, -h:]
    for joint, i, f, g, o, cell_prev, tanh_c in reversed(caches):
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c**2)
        di = dc * g
        dg = dc * i
        df = dc * cell_prev
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)]
        )
        grad_W += np.outer(dz, joint)
        grad_b += dz
        dh = Wh.T @ dz
        dc = dc * f
    return loss, p, grad_W, grad_b, grad_w_out, grad_b_out


@dataclass
class TrainingLog:
    epoch_losses: list[float]


def fit_lstm(sequences, labels, config: LstmConfig | None = None, encoder=None):
    """Train on encoded sequences (list of (steps, K) arrays).

    Each epoch shuffles, buckets by length so batches hold similar-sized
    sequences, then averages per-sample BPTT gradients within a batch for a
    plain gradient-descent step. Returns (model, TrainingLog).
    """
    config = config or LstmConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if len(sequences) == 0:
        raise ValueError("empty training set")
    if len(np.unique(labels)) < 2:
        raise ValueError("labels must contain both classes")
    encodings = [np.asarray(seq, dtype=config.dtype) for seq in sequences]
    model = init_model(encodings[0].shape[1], config, encoder)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))

    log = TrainingLog([])
    for _ in range(config.epochs):
        order = rng.permutation(len(encodings))
        order = order[np.argsort([len(encodings[i]) for i in order], kind="stable")]
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grad_W = np.zeros_like(model.W)
            grad_b = np.zeros_like(model.b)
            grad_w_out = np.zeros_like(model.w_out)
            grad_b_out = 0.0
            for idx in batch:
                mask = None
                if config.dropout > 0:
                    keep = 1.0 - config.dropout
                    mask = (rng.random(config.hidden_size) < keep).astype(config.dtype) / keep
                loss, _, gW, gb, gw, gbo = _loss_and_gradients(
                    model, encodings[idx], int(labels[idx]), mask
                )
                epoch_loss += loss
                grad_W += gW
                grad_b += gb
                grad_w_out += gw
                grad_b_out += gbo
            scale = config.learning_rate / len(batch)
            model.W -= scale * grad_W
            model.b -= scale * grad_b
            model.w_out -= scale * grad_w_out
            model.b_out -= scale * grad_b_out
        log.epoch_losses.append(epoch_loss / len(encodings))
    return model, log


def predict_proba(model: LstmModel, sequences) -> np.ndarray:
    return np.array([forward(model, seq) for seq in sequences])


def predict(model: LstmModel, sequences) -> np.ndarray:
    return (predict_proba(model, sequences) >= 0.5).astype(np.int64)


def _flatten_params(model: LstmModel):
    return [
        ("W", model.W),
        ("b", model.b),
        ("w_out", model.w_out),
    ]


def gradient_check(model: LstmModel, encodings, label: int, epsilon: float = 1e-5) -> float:
    """Max relative error between BPTT and central finite differences over
    every parameter. Requires high-precision (float64) mode."""
    if model.config.precision != "high":
        raise ValueError("gradient_check requires precision='high'")
    encodings = np.asarray(encodings, dtype=np.float64)

    def loss_only():
        loss, *_ = _loss_and_gradients(model, encodings, label)
        return loss

    _, _, grad_W, grad_b, grad_w_out, grad_b_out = _loss_and_gradients(
        model, encodings, label
    )
    analytic = {"W": grad_W, "b": grad_b, "w_out": grad_w_out}

    worst = 0.0
    for name, array in _flatten_params(model):
        grads = analytic[name]
        flat = array.reshape(-1)
        flat_grads = grads.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + epsilon
            up = loss_only()
            flat[idx] = original - epsilon
            down = loss_only()
            flat[idx] = original
            numeric = (up - down) / (2 * epsilon)
            g = flat_grads[idx]
            err = abs(g - numeric) / max(abs(g), abs(numeric), 1e-12)
            worst = max(worst, err)
    # Scalar output bias.
    original = model.b_out
    model.b_out = original + epsilon
    up = loss_only()
    model.b_out = original - epsilon
    down = loss_only()
    model.b_out = original
    numeric = (up - down) / (2 * epsilon)
    err = abs(grad_b_out - numeric) / max(abs(grad_b_out), abs(numeric), 1e-12)
    return max(worst, err)


def save_model(model: LstmModel, path, header: dict | None = None) -> None:
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "lstm",
        "config": asdict(model.config),
        "W": model.W.tolist(),
        "b": model.b.tolist(),
        "w_out": model.w_out.tolist(),
        "b_out": model.b_out,
        "encoder": None
        if model.encoder is None
        else {
            "selected": model.encoder.selected.tolist(),
            "mean": model.encoder.mean.tolist(),
            "std": model.encoder.std.tolist(),
        },
    }
    if header:
        payload["lineage"] = header
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True)


def load_model(path) -> LstmModel:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {payload.get('format_version')!r}")
    config = LstmConfig(**payload["config"])
    encoder = None
    if payload["encoder"] is not None:
        encoder = EncoderStats(
            np.array(payload["encoder"]["selected"], dtype=np.int64),
            np.array(payload["encoder"]["mean"], dtype=float),
            np.array(payload["encoder"]["std"], dtype=float),
        )
    return LstmModel(
        np.array(payload["W"], dtype=config.dtype),
        np.array(payload["b"], dtype=config.dtype),
        np.array(payload["w_out"], dtype=config.dtype),
        float(payload["b_out"]),
        config,
        encoder,
    )

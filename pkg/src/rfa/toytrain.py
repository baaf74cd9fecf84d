"""Toy single-head attention model trained on a synthetic recency task.

The model embeds tokens (plus fixed sinusoidal positions), projects them to
queries, keys and values, runs one causal attention kernel and predicts the
token seen ``lag`` steps earlier. Training is SGD with a fixed learning rate
on cross-entropy, using the analytic gradients from :mod:`rfa.gradients`.
Two guards keep the RFA runs stable: the step is shrunk when the global
gradient norm exceeds ``clip_norm``, and ``sigma`` moves at a reduced rate
(``sigma_lr_scale``) because a sharper kernel makes the estimator noisier.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AttentionConfig, GateParams
from .errors import ParameterError, TrainingDivergedError
from .features import FeatureMapPool, FeatureMapSpec, build_pool
from .gradients import backward, forward
from .numerics import RngState, derive_seed, seeded_normal_matrix

IGNORE = -1
ATTENTION_KINDS = ("softmax", "rfa", "rfa_gated")


@dataclass(frozen=True)
class ToyTask:
    vocab: int = 8
    length: int = 16
    lag: int = 1

    def __post_init__(self):
        if self.vocab < 2:
            raise ParameterError("vocab must be >= 2")
        if not 1 <= self.lag < self.length:
            raise ParameterError(f"lag must satisfy 1 <= lag < length, got lag={self.lag}, length={self.length}")


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "rfa_gated"
    learning_rate: float = 0.2
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    d: int = 16
    D: int = 32
    pool_size: int = 50
    temperature: float = 1.0
    clip_norm: Optional[float] = 1.0
    sigma_lr_scale: float = 0.02
    gate_bias_init: float = 2.0
    gate_lr_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ParameterError(f"unknown attention kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ParameterError("learning rate must be positive")
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError("clip_norm must be positive or None")
        if self.sigma_lr_scale < 0 or self.gate_lr_scale < 0:
            raise ParameterError("learning-rate scales must be >= 0")
        if self.batch_size < 1 or self.pool_size < 1:
            raise ParameterError("batch size and pool size must be >= 1")


def gen_recency_task(task: ToyTask, seed: int, count: int):
    """``count`` sequences of uniform tokens and their lagged labels.

    ``labels[:, t] = tokens[:, t - lag]`` for ``t >= lag``; earlier positions
    hold ``IGNORE``.
    """
    raw = np.random.Philox(key=RngState(seed, 1).key()).random_raw(count * task.length)
    tokens = (raw % np.uint64(task.vocab)).astype(np.int64).reshape(count, task.length)
    return tokens, lagged_labels(tokens, task.lag)


def lagged_labels(tokens, lag: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.full_like(tokens, IGNORE)
    labels[..., lag:] = tokens[..., :-lag]
    return labels


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class ToyModel:
    kind: str
    params: dict
    positions: np.ndarray
    pool: Optional[FeatureMapPool] = None
    temperature: float = 1.0

    @property
    def n_params(self) -> int:
        return int(sum(np.size(v) for v in self.params.values()))

    def copy(self) -> "ToyModel":
        return ToyModel(self.kind, {k: v.copy() for k, v in self.params.items()}, self.positions,
                        self.pool, self.temperature)


def init_model(task: ToyTask, config: TrainConfig) -> ToyModel:
    d, V = config.d, task.vocab
    draws, _ = seeded_normal_matrix(RngState(derive_seed(config.seed, 0)), V + 4 * d + 1, max(d, V))
    params = {
        "embed": draws[:V, :d],
        "Wq": draws[V:V + d, :d] / math.sqrt(d),
        "Wk": draws[V + d:V + 2 * d, :d] / math.sqrt(d),
        "Wv": draws[V + 2 * d:V + 3 * d, :d] / math.sqrt(d),
        "Wo": 0.1 * draws[V + 3 * d:V + 4 * d, :V],
        "bo": np.zeros(V),
    }
    pool = None
    if config.kind != "softmax":
        spec = FeatureMapSpec("gaussian", d, config.D, 1.0, seed=derive_seed(config.seed, 1))
        pool = build_pool(spec, config.pool_size)
        params["sigma"] = np.full(d, 1.0 / math.sqrt(config.temperature))
    if config.kind == "rfa_gated":
        params["w_g"] = 0.1 * draws[V + 4 * d, :d]
        params["b_g"] = np.full(1, float(config.gate_bias_init))
    return ToyModel(config.kind, params, sinusoidal_positions(task.length, d), pool, config.temperature)


def _attention(model: ToyModel, X, Q, K, Vv, map_index: int):
    p = model.params
    if model.kind == "softmax":
        cfg = AttentionConfig("softmax", model.temperature)
        return forward("softmax", Q, K, Vv, config=cfg, causal=True)
    fmap = model.pool[map_index].with_sigma(p["sigma"])
    cfg = AttentionConfig("rfa", model.temperature)
    if model.kind == "rfa":
        return forward("rfa_causal", Q, K, Vv, fmap=fmap, config=cfg)
    gate = GateParams(p["w_g"], float(p["b_g"][0]))
    return forward("rfa_gated", Q, K, Vv, fmap=fmap, config=cfg, gate=gate, raw_inputs=X)


def model_logits(model: ToyModel, tokens, map_index: int = 0):
    """Logits ``(B, L, V)`` and everything needed to backpropagate through them."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    p = model.params
    X = p["embed"][tokens] + model.positions[: tokens.shape[1]]
    Q, K, Vv = X @ p["Wq"], X @ p["Wk"], X @ p["Wv"]
    H, cache = _attention(model, X, Q, K, Vv, map_index)
    logits = H @ p["Wo"] + p["bo"]
    return logits, (tokens, X, H, cache)


def _loss_and_grad(logits, labels):
    mask = labels != IGNORE
    count = max(int(mask.sum()), 1)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    probs = np.exp(log_probs)
    safe = np.where(mask, labels, 0)
    picked = np.take_along_axis(log_probs, safe[..., None], axis=-1)[..., 0]
    loss = -np.sum(np.where(mask, picked, 0.0)) / count
    correct = (np.argmax(logits, axis=-1) == labels) & mask
    d_logits = probs.copy()
    np.put_along_axis(d_logits, safe[..., None], np.take_along_axis(d_logits, safe[..., None], -1) - 1.0, -1)
    d_logits *= mask[..., None] / count
    return float(loss), float(correct.sum() / count), d_logits


def eval_toy(model: ToyModel, batch, map_index: int = 0):
    """Cross-entropy and accuracy over supervised positions."""
    tokens, labels = batch
    logits, _ = model_logits(model, tokens, map_index)
    loss, acc, _ = _loss_and_grad(logits, np.atleast_2d(labels))
    return loss, acc


def _grads(model: ToyModel, logits, ctx, d_logits):
    tokens, X, H, cache = ctx
    p = model.params
    g = {"Wo": np.einsum("bli,blv->iv", H, d_logits), "bo": d_logits.sum(axis=(0, 1))}
    dH = d_logits @ p["Wo"].T
    kernel = "rfa_causal" if model.kind == "rfa" else model.kind
    ab = backward(kernel, cache, dH)
    g["Wq"] = np.einsum("bli,blj->ij", X, ab.queries)
    g["Wk"] = np.einsum("bli,blj->ij", X, ab.keys)
    g["Wv"] = np.einsum("bli,blj->ij", X, ab.values)
    dX = ab.queries @ p["Wq"].T + ab.keys @ p["Wk"].T + ab.values @ p["Wv"].T
    if ab.sigma is not None:
        g["sigma"] = ab.sigma
    if model.kind == "rfa_gated":
        dX = dX + ab.raw_inputs
        g["w_g"] = ab.w_g
        g["b_g"] = np.array([ab.b_g])
    dE = np.zeros_like(p["embed"])
    np.add.at(dE, tokens, dX)
    g["embed"] = dE
    return g


@dataclass
class LossCurve:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.step)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "accuracy"])
            for row in zip(self.step, self.loss, self.accuracy):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


SIGMA_FLOOR = 1e-3


def _lr_scale(config: TrainConfig, name: str) -> float:
    if name == "sigma":
        return config.sigma_lr_scale
    if name in ("w_g", "b_g"):
        return config.gate_lr_scale
    return 1.0


def train_toy(task: ToyTask, config: TrainConfig, model: Optional[ToyModel] = None):
    """Train with plain SGD; returns ``(model, LossCurve)``.

    Each step draws a fresh batch and uses feature map ``step % pool_size``.
    Raises TrainingDivergedError if the loss becomes non-finite.
    """
    model = init_model(task, config) if model is None else model.copy()
    curve = LossCurve()
    for step in range(config.steps):
        tokens, labels = gen_recency_task(task, derive_seed(config.seed, 1000 + step), config.batch_size)
        map_index = step % config.pool_size
        logits, ctx = model_logits(model, tokens, map_index)
        loss, acc, d_logits = _loss_and_grad(logits, labels)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        grads = _grads(model, logits, ctx, d_logits)
        lr = config.learning_rate
        if config.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(gr * gr)) for gr in grads.values()))
            if norm > config.clip_norm:
                lr *= config.clip_norm / norm
        for name, gr in grads.items():
            model.params[name] -= lr * _lr_scale(config, name) * gr
        if "sigma" in model.params:
            np.maximum(model.params["sigma"], SIGMA_FLOOR, out=model.params["sigma"])
        curve.step.append(step)
        curve.loss.append(loss)
        curve.accuracy.append(acc)
    return model, curve

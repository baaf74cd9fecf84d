"""Softmax attention and random feature attention (RFA) kernels.

All public functions take a single sequence: queries ``(N, d)``, keys
``(M, d)``, values ``(M, dv)``. ``config.temperature`` is the softmax
temperature; for RFA it plays the same role, and the feature map's scale
should match it (``features.sigma_for_temperature``) so both target
``exp(q.k / temperature)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .errors import ParameterError, RangeError, UnsupportedKindError
from .features import RealizedFeatureMap, apply_map
from .numerics import l2_normalize, sigmoid, stable_softmax

_MAX_LOG_SCALE = 700.0


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "rfa"
    temperature: float = 1.0
    normalize_qk: bool = True
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("softmax", "rfa"):
            raise ParameterError(f"unknown attention kind {self.kind!r}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class AttentionState:
    """Running sums of the causal recurrence: ``S`` (F x dv) and ``z`` (F)."""

    S: np.ndarray
    z: np.ndarray

    @classmethod
    def zeros(cls, feature_dim: int, dv: int) -> "AttentionState":
        return cls(np.zeros((feature_dim, dv)), np.zeros(feature_dim))

    def copy(self) -> "AttentionState":
        return AttentionState(self.S.copy(), self.z.copy())


@dataclass(frozen=True)
class GateParams:
    w_g: np.ndarray
    b_g: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "w_g", np.asarray(self.w_g, dtype=np.float64))
        object.__setattr__(self, "b_g", float(self.b_g))
        if self.w_g.ndim != 1:
            raise ParameterError("gate weight must be a vector")

    def gates(self, raw_inputs) -> np.ndarray:
        raw_inputs = np.asarray(raw_inputs, dtype=np.float64)
        if raw_inputs.shape[-1] != self.w_g.size:
            raise ParameterError(
                f"raw input dimension {raw_inputs.shape[-1]} does not match gate weight {self.w_g.size}"
            )
        return sigmoid(raw_inputs @ self.w_g + self.b_g)


@dataclass
class SequenceBatch:
    """One sequence (or segment): queries N x d, keys M x d, values M x dv, gate inputs N x dx."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    raw_inputs: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.keys.shape[0] != self.values.shape[0]:
            raise ParameterError("keys and values disagree in count")
        if self.raw_inputs is not None:
            self.raw_inputs = np.asarray(self.raw_inputs, dtype=np.float64)
            if self.raw_inputs.shape[0] != self.queries.shape[0]:
                raise ParameterError("queries and raw_inputs disagree in count")

    @property
    def M(self) -> int:
        return self.keys.shape[0]

    @property
    def N(self) -> int:
        return self.queries.shape[0]


class CausalOutput(NamedTuple):
    outputs: np.ndarray
    state: AttentionState
    degenerate: bool


class GatedOutput(NamedTuple):
    outputs: np.ndarray
    state: AttentionState
    gates: np.ndarray
    degenerate: bool


def _as2d(name, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ParameterError(f"{name} must be a 2-D array, got shape {a.shape}")
    return a


def _check_qkv(queries, keys, values, d=None):
    queries = _as2d("queries", queries)
    keys = _as2d("keys", keys)
    values = _as2d("values", values)
    if keys.shape[0] == 0:
        raise ParameterError("empty key set")
    if keys.shape[0] != values.shape[0]:
        raise ParameterError("keys and values disagree in count")
    if queries.shape[1] != keys.shape[1]:
        raise ParameterError("queries and keys disagree in dimension")
    if d is not None and keys.shape[1] != d:
        raise ParameterError(f"key dimension {keys.shape[1]} does not match feature map d={d}")
    return queries, keys, values


def _features(fmap, x, normalize):
    return apply_map(fmap, l2_normalize(x) if normalize else x)


def softmax_attention(q, keys, values, config: AttentionConfig = AttentionConfig("softmax")) -> np.ndarray:
    """``sum_i softmax_i(q . k_i / tau) v_i`` for a single query vector."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ParameterError("softmax_attention takes a single query vector")
    return softmax_attention_all(q[None, :], keys, values, config)[0]


def softmax_attention_all(queries, keys, values, config: AttentionConfig = AttentionConfig("softmax"),
                          causal: bool = False) -> np.ndarray:
    queries, keys, values = _check_qkv(queries, keys, values)
    if config.normalize_qk:
        queries = l2_normalize(queries)
        keys = l2_normalize(keys)
    logits = queries @ keys.T
    if causal:
        if queries.shape[0] != keys.shape[0]:
            raise ParameterError("causal attention needs N == M")
        logits = np.where(np.tril(np.ones(logits.shape, dtype=bool)), logits, -np.inf)
    return stable_softmax(logits, config.temperature) @ values


def rfa_cross(queries, keys, values, fmap: RealizedFeatureMap, config: AttentionConfig = AttentionConfig()) -> np.ndarray:
    """Random feature attention where every query sees every key.

    Keys are folded into ``S = sum_i phi(k_i) v_i^T`` and ``z = sum_i phi(k_i)``
    once; each query then reads ``phi(q)^T S / clamp(phi(q) . z)``.
    """
    queries, keys, values = _check_qkv(queries, keys, values, fmap.d)
    phi_k = _features(fmap, keys, config.normalize_qk)
    S = phi_k.T @ values
    z = phi_k.sum(axis=0)
    phi_q = _features(fmap, queries, config.normalize_qk)
    return (phi_q @ S) / _kernels.clamp(phi_q @ z, config.epsilon)[:, None]


def _check_state(init, feature_dim, dv):
    if init is None:
        return AttentionState.zeros(feature_dim, dv)
    if init.S.shape != (feature_dim, dv) or init.z.shape != (feature_dim,):
        raise ParameterError(
            f"initial state shapes {init.S.shape}/{init.z.shape} do not match ({feature_dim}, {dv})"
        )
    return init


def _run_scan(phi_q, phi_k, values, decay, inject, init, eps):
    out, S, z, u, _, _ = _kernels.scan_forward(
        phi_q[None], phi_k[None], values[None], decay[None], inject[None],
        init.S[None], init.z[None], eps, False,
    )
    degenerate = bool(np.any(np.abs(u) < eps))
    return out[0], AttentionState(S[0], z[0]), degenerate


def rfa_causal(queries, keys, values, fmap: RealizedFeatureMap, config: AttentionConfig = AttentionConfig(),
               init: Optional[AttentionState] = None) -> CausalOutput:
    """Causal RFA via the running ``(S, z)`` recurrence.

    Returns outputs, the final state (to carry into the next segment), and a
    flag set when any step's partition estimate fell inside the clamp.
    """
    queries, keys, values = _check_qkv(queries, keys, values, fmap.d)
    if queries.shape[0] != keys.shape[0]:
        raise ParameterError("causal attention needs as many queries as keys")
    init = _check_state(init, fmap.output_dim, values.shape[1])
    phi_q = _features(fmap, queries, config.normalize_qk)
    phi_k = _features(fmap, keys, config.normalize_qk)
    ones = np.ones(queries.shape[0])
    return CausalOutput(*_run_scan(phi_q, phi_k, values, ones, ones, init, config.epsilon))


def rfa_gated(batch: SequenceBatch, gate: GateParams, fmap: RealizedFeatureMap,
              config: AttentionConfig = AttentionConfig(), init: Optional[AttentionState] = None) -> GatedOutput:
    """Gated causal RFA: history in ``(S, z)`` decays by ``g_t = sigmoid(w_g . x_t + b_g)``."""
    if batch.raw_inputs is None:
        raise ParameterError("gated attention needs raw_inputs for the gates")
    queries, keys, values = _check_qkv(batch.queries, batch.keys, batch.values, fmap.d)
    if queries.shape[0] != keys.shape[0]:
        raise ParameterError("causal attention needs as many queries as keys")
    init = _check_state(init, fmap.output_dim, values.shape[1])
    g = gate.gates(batch.raw_inputs)
    phi_q = _features(fmap, queries, config.normalize_qk)
    phi_k = _features(fmap, keys, config.normalize_qk)
    out, state, degenerate = _run_scan(phi_q, phi_k, values, g, 1.0 - g, init, config.epsilon)
    return GatedOutput(out, state, g, degenerate)


def rfa_stateful_carry(segments, fmap: RealizedFeatureMap, config: AttentionConfig = AttentionConfig(),
                       gate: Optional[GateParams] = None, init: Optional[AttentionState] = None) -> np.ndarray:
    """Run consecutive segments, passing each final state into the next.

    Uses the gated recurrence when ``gate`` is given. Returns the concatenated outputs.
    """
    segments = list(segments)
    if not segments:
        raise ParameterError("no segments given")
    dims = {(s.queries.shape[1], s.values.shape[1]) for s in segments}
    if len(dims) != 1:
        raise ParameterError(f"segments disagree in dimensions: {sorted(dims)}")
    state = init
    outs = []
    for seg in segments:
        if gate is None:
            res = rfa_causal(seg.queries, seg.keys, seg.values, fmap, config, state)
        else:
            res = rfa_gated(seg, gate, fmap, config, state)
        outs.append(res.outputs)
        state = res.state
    return np.concatenate(outs, axis=0)


def key_scale(keys, temperature: float) -> np.ndarray:
    """Log of the per-key factor ``C(k) = exp(|k|^2 / 2 tau)`` used by the unnormalised path."""
    log_c = np.sum(np.asarray(keys, dtype=np.float64) ** 2, axis=-1) / (2.0 * temperature)
    if np.any(log_c > _MAX_LOG_SCALE):
        raise RangeError(
            f"|k|^2 / 2 tau = {log_c.max():.1f} exceeds {_MAX_LOG_SCALE}; exp() would overflow"
        )
    return log_c


def rfa_unnormalized(queries, keys, values, fmap: RealizedFeatureMap,
                     config: AttentionConfig = AttentionConfig(normalize_qk=False)) -> np.ndarray:
    """RFA without unit-norm queries and keys.

    Each key's features are weighted by ``C(k_i) = exp(|k_i|^2 / 2 tau)``; the
    query's own factor cancels between numerator and denominator.
    """
    if config.normalize_qk:
        raise ParameterError("rfa_unnormalized requires normalize_qk=False")
    if fmap.kind == "elu":
        raise UnsupportedKindError("the norm correction only applies to random feature maps")
    queries, keys, values = _check_qkv(queries, keys, values, fmap.d)
    C = np.exp(key_scale(keys, config.temperature))
    phi_k = apply_map(fmap, keys) * C[:, None]
    S = phi_k.T @ values
    z = phi_k.sum(axis=0)
    phi_q = apply_map(fmap, queries)
    return (phi_q @ S) / _kernels.clamp(phi_q @ z, config.epsilon)[:, None]


def decayed_weights(gates) -> np.ndarray:
    """``(1 - g_i) prod_{j>i} g_j`` for every position ``i`` of the prefix."""
    g = np.asarray(gates, dtype=np.float64)
    suffix = np.concatenate([np.cumprod(g[::-1])[::-1][1:], [1.0]])
    return (1.0 - g) * suffix


def gated_softmax_oracle(q_t, keys, values, gates, config: AttentionConfig = AttentionConfig("softmax")) -> np.ndarray:
    """Softmax attention over keys and values pre-decayed by the gate products.

    Key ``i`` and value ``i`` are both scaled by ``(1 - g_i) prod_{j>i} g_j``.
    Decayed keys are never renormalised. This is a reference construction
    only; it is not numerically equivalent to :func:`rfa_gated`.
    """
    keys = _as2d("keys", keys)
    values = _as2d("values", values)
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (keys.shape[0],):
        raise ParameterError(f"need one gate per key, got {gates.shape} for {keys.shape[0]} keys")
    if np.any((gates < 0) | (gates > 1)):
        raise ParameterError("gate values must lie in [0, 1]")
    w = decayed_weights(gates)
    cfg = AttentionConfig("softmax", config.temperature, False, config.epsilon)
    return softmax_attention(q_t, keys * w[:, None], values * w[:, None], cfg)

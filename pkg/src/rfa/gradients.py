"""Hand-written reverse-mode gradients for the attention kernels.

``forward`` runs one of the four kernels (``softmax``, ``rfa_cross``,
``rfa_causal``, ``rfa_gated``) on a single sequence or a batch (leading axis)
and keeps whatever the backward pass needs. ``backward`` returns gradients of
a scalar loss with respect to queries, keys, values, gate inputs and
parameters, and the feature-map scale ``sigma``. The random draws behind the
feature map are constants.

The clamp on the RFA denominator is differentiated as implemented: zero
derivative inside the clamped band.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .attention import AttentionConfig, AttentionState, GateParams
from .errors import DegenerateInputError, ParameterError
from .features import (
    FeatureMapSpec,
    RealizedFeatureMap,
    apply_map,
    build_feature_map,
    features_from_preactivation,
    preactivation,
)
from .numerics import RngState, derive_seed, l2_normalize, seeded_normal_matrix, stable_softmax

KINDS = ("softmax", "rfa_cross", "rfa_causal", "rfa_gated")


@dataclass
class ForwardCache:
    kind: str
    config: AttentionConfig
    batched: bool
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    outputs: np.ndarray
    fmap: Optional[RealizedFeatureMap] = None
    causal: bool = False
    # normalisation
    q_in: Optional[np.ndarray] = None
    k_in: Optional[np.ndarray] = None
    q_norm: Optional[np.ndarray] = None
    k_norm: Optional[np.ndarray] = None
    # softmax
    probs: Optional[np.ndarray] = None
    # random features
    pre_q: Optional[np.ndarray] = None
    pre_k: Optional[np.ndarray] = None
    phi_q: Optional[np.ndarray] = None
    phi_k: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    # recurrence
    decay: Optional[np.ndarray] = None
    inject: Optional[np.ndarray] = None
    S0: Optional[np.ndarray] = None
    z0: Optional[np.ndarray] = None
    S_hist: Optional[np.ndarray] = None
    z_hist: Optional[np.ndarray] = None
    final_S: Optional[np.ndarray] = None
    final_z: Optional[np.ndarray] = None
    # gating
    gate: Optional[GateParams] = None
    raw_inputs: Optional[np.ndarray] = None
    gates: Optional[np.ndarray] = None

    @property
    def min_abs_partition(self) -> float:
        """Smallest ``|phi(q) . z|`` seen; ``inf`` for softmax."""
        if self.u is None:
            return float("inf")
        return float(np.min(np.abs(self.u)))

    def final_state(self) -> AttentionState:
        if self.final_S is None:
            raise ParameterError(f"{self.kind} has no recurrent state")
        if self.batched:
            return AttentionState(self.final_S, self.final_z)
        return AttentionState(self.final_S[0], self.final_z[0])


@dataclass
class GradBundle:
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    raw_inputs: Optional[np.ndarray] = None
    w_g: Optional[np.ndarray] = None
    b_g: Optional[float] = None
    sigma: Optional[np.ndarray] = None
    init_S: Optional[np.ndarray] = None
    init_z: Optional[np.ndarray] = None

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v


def _batch(a):
    a = np.asarray(a, dtype=np.float64)
    return a if a.ndim == 3 else a[None]


def _normalize_fwd(x):
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(r == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return x / r, r


def _normalize_bwd(x_hat, r, g):
    return (g - x_hat * np.sum(x_hat * g, axis=-1, keepdims=True)) / r


def _state_arrays(init, B, F, dv):
    if init is None:
        return np.zeros((B, F, dv)), np.zeros((B, F))
    S0 = np.asarray(init.S, dtype=np.float64)
    z0 = np.asarray(init.z, dtype=np.float64)
    if S0.ndim == 2:
        S0 = np.broadcast_to(S0, (B,) + S0.shape).copy()
        z0 = np.broadcast_to(z0, (B,) + z0.shape).copy()
    if S0.shape != (B, F, dv) or z0.shape != (B, F):
        raise ParameterError(f"initial state shapes {S0.shape}/{z0.shape} do not match ({B}, {F}, {dv})")
    return S0, z0


def forward(kind: str, queries, keys, values, fmap: Optional[RealizedFeatureMap] = None,
            config: Optional[AttentionConfig] = None, gate: Optional[GateParams] = None,
            raw_inputs=None, init: Optional[AttentionState] = None, causal: bool = False):
    """Run ``kind`` and return ``(outputs, cache)``.

    Inputs are ``(N, d)`` or batched ``(B, N, d)``; outputs match. ``causal``
    only applies to ``softmax`` (the RFA kinds are causal or not by name).
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown kernel kind {kind!r}")
    batched = np.ndim(queries) == 3
    q, k, v = _batch(queries), _batch(keys), _batch(values)
    if k.shape[1] == 0:
        raise ParameterError("empty key set")
    if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ParameterError("inconsistent query/key/value shapes")
    if config is None:
        config = AttentionConfig("softmax" if kind == "softmax" else "rfa")
    cache = ForwardCache(kind, config, batched, q, k, v, outputs=None, fmap=fmap, causal=causal)

    if config.normalize_qk:
        cache.q_in, cache.q_norm = _normalize_fwd(q)
        cache.k_in, cache.k_norm = _normalize_fwd(k)
    else:
        cache.q_in, cache.k_in = q, k

    if kind == "softmax":
        logits = np.einsum("bni,bmi->bnm", cache.q_in, cache.k_in)
        if causal:
            if q.shape[1] != k.shape[1]:
                raise ParameterError("causal attention needs N == M")
            mask = np.tril(np.ones((q.shape[1], k.shape[1]), dtype=bool))
            logits = np.where(mask, logits, -np.inf)
        cache.probs = stable_softmax(logits, config.temperature)
        out = cache.probs @ v
    else:
        if fmap is None:
            raise ParameterError(f"{kind} needs a feature map")
        if fmap.d != q.shape[2]:
            raise ParameterError(f"feature map d={fmap.d} does not match input dimension {q.shape[2]}")
        D = fmap.spec.D
        cache.pre_q = preactivation(fmap, cache.q_in)
        cache.pre_k = preactivation(fmap, cache.k_in)
        cache.phi_q = features_from_preactivation(fmap.kind, cache.pre_q, D)
        cache.phi_k = features_from_preactivation(fmap.kind, cache.pre_k, D)
        if kind == "rfa_cross":
            cache.S = np.einsum("bmf,bmj->bfj", cache.phi_k, v)
            cache.z = cache.phi_k.sum(axis=1)
            cache.u = np.einsum("bnf,bf->bn", cache.phi_q, cache.z)
            num = np.einsum("bnf,bfj->bnj", cache.phi_q, cache.S)
            out = num / _kernels.clamp(cache.u, config.epsilon)[..., None]
        else:
            B, N, _ = q.shape
            if k.shape[1] != N:
                raise ParameterError("causal attention needs as many queries as keys")
            if kind == "rfa_gated":
                if gate is None or raw_inputs is None:
                    raise ParameterError("rfa_gated needs gate parameters and raw_inputs")
                x = _batch(raw_inputs) if batched else np.asarray(raw_inputs, dtype=np.float64)[None]
                if x.shape[:2] != (B, N):
                    raise ParameterError("raw_inputs must have one row per query")
                cache.gate = gate
                cache.raw_inputs = x
                cache.gates = gate.gates(x)
                cache.decay = cache.gates
                cache.inject = 1.0 - cache.gates
            else:
                cache.decay = np.ones((B, N))
                cache.inject = np.ones((B, N))
            cache.S0, cache.z0 = _state_arrays(init, B, fmap.output_dim, v.shape[2])
            out, cache.final_S, cache.final_z, cache.u, cache.S_hist, cache.z_hist = _kernels.scan_forward(
                cache.phi_q, cache.phi_k, v, cache.decay, cache.inject, cache.S0, cache.z0,
                config.epsilon, True,
            )
    cache.outputs = out
    return (out if batched else out[0]), cache


def _feature_bwd(fmap, pre, x_in, d_phi):
    """Return (grad wrt map input, grad wrt projection W or None)."""
    D = fmap.spec.D
    if fmap.kind == "elu":
        return d_phi * np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0))), None
    scale = np.sqrt(1.0 / D)
    if fmap.kind == "gaussian":
        da = scale * (d_phi[..., :D] * np.cos(pre) - d_phi[..., D:] * np.sin(pre))
    else:
        da = scale * d_phi * (pre > 0)
    dx = da @ fmap.W
    dW = da.reshape(-1, da.shape[-1]).T @ x_in.reshape(-1, x_in.shape[-1])
    return dx, dW


def backward(kind: str, cache: ForwardCache, upstream, final_state_grad: Optional[AttentionState] = None) -> GradBundle:
    """Gradients given ``upstream = dL/d outputs`` (and optionally ``dL/d final state``)."""
    if kind != cache.kind:
        raise ParameterError(f"cache was produced by {cache.kind!r}, not {kind!r}")
    g = _batch(upstream) if cache.batched else np.asarray(upstream, dtype=np.float64)[None]
    if g.shape != cache.outputs.shape:
        raise ParameterError(f"upstream shape {g.shape} does not match outputs {cache.outputs.shape}")
    cfg = cache.config
    bundle = {}

    if kind == "softmax":
        P = cache.probs
        d_values = np.einsum("bnm,bnj->bmj", P, g)
        dP = np.einsum("bnj,bmj->bnm", g, cache.values)
        dl = P * (dP - np.sum(P * dP, axis=-1, keepdims=True)) / cfg.temperature
        d_qin = dl @ cache.k_in
        d_kin = np.einsum("bnm,bni->bmi", dl, cache.q_in)
    else:
        eps = cfg.epsilon
        if kind == "rfa_cross":
            den = _kernels.clamp(cache.u, eps)
            active = np.abs(cache.u) > eps
            dn = g / den[..., None]
            du = np.where(active, -np.sum(g * cache.outputs, axis=-1) / den, 0.0)
            d_phi_q = np.einsum("bnj,bfj->bnf", dn, cache.S) + du[..., None] * cache.z[:, None, :]
            dS = np.einsum("bnf,bnj->bfj", cache.phi_q, dn)
            dz = np.einsum("bn,bnf->bf", du, cache.phi_q)
            d_phi_k = np.einsum("bmj,bfj->bmf", cache.values, dS) + dz[:, None, :]
            d_values = np.einsum("bmf,bfj->bmj", cache.phi_k, dS)
        else:
            B, _, F = cache.phi_q.shape
            dv = cache.values.shape[2]
            if final_state_grad is None:
                gS, gz = np.zeros((B, F, dv)), np.zeros((B, F))
            else:
                gS, gz = _state_arrays(final_state_grad, B, F, dv)
            d_phi_q, d_phi_k, d_values, d_decay, d_inject, dS0, dz0 = _kernels.scan_backward(
                cache.phi_q, cache.phi_k, cache.values, cache.decay, cache.inject, cache.S0, cache.z0,
                cache.S_hist, cache.z_hist, cache.u, cache.outputs, g, gS, gz, eps,
            )
            bundle["init_S"], bundle["init_z"] = dS0, dz0
            if kind == "rfa_gated":
                gt = cache.gates
                d_pre = (d_decay - d_inject) * gt * (1.0 - gt)
                bundle["raw_inputs"] = d_pre[..., None] * cache.gate.w_g
                bundle["w_g"] = np.einsum("bn,bni->i", d_pre, cache.raw_inputs)
                bundle["b_g"] = float(np.sum(d_pre))
        fmap = cache.fmap
        d_qin, dWq = _feature_bwd(fmap, cache.pre_q, cache.q_in, d_phi_q)
        d_kin, dWk = _feature_bwd(fmap, cache.pre_k, cache.k_in, d_phi_k)
        if dWq is not None:
            bundle["sigma"] = np.sum((dWq + dWk) * fmap.raw, axis=0)

    if cfg.normalize_qk:
        d_q = _normalize_bwd(cache.q_in, cache.q_norm, d_qin)
        d_k = _normalize_bwd(cache.k_in, cache.k_norm, d_kin)
    else:
        d_q, d_k = d_qin, d_kin

    if not cache.batched:
        d_q, d_k, d_values = d_q[0], d_k[0], d_values[0]
        for name in ("raw_inputs", "init_S", "init_z"):
            if name in bundle:
                bundle[name] = bundle[name][0]
    return GradBundle(d_q, d_k, d_values, **bundle)


# ------------------------------------------------------------ checking tools


def finite_diff_grad(f: Callable, params, h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` is an array (``f`` takes that array) or a dict of arrays (``f``
    takes the dict). Returns the same structure. Inputs are not modified.
    """
    if h <= 0:
        raise ParameterError("step h must be positive")
    if isinstance(params, dict):
        work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        grads = {}
        for name, arr in work.items():
            gr = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(work)
                flat[i] = orig - h
                fm = f(work)
                flat[i] = orig
                gr.reshape(-1)[i] = (fp - fm) / (2.0 * h)
            grads[name] = gr
        return grads
    arr = np.array(params, dtype=np.float64)
    gr = finite_diff_grad(lambda p: f(p["x"]), {"x": arr}, h)["x"]
    return gr


def relative_error(analytic, numeric) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@dataclass
class GradInstance:
    """Inputs for one gradient check."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    fmap: Optional[RealizedFeatureMap] = None
    config: Optional[AttentionConfig] = None
    gate: Optional[GateParams] = None
    raw_inputs: Optional[np.ndarray] = None
    init: Optional[AttentionState] = None
    causal: bool = False

    @classmethod
    def random(cls, kind: str, seed: int, N: int = 6, d: int = 4, D: int = 16, dv: Optional[int] = None,
               map_kind: str = "gaussian", with_init: bool = False, min_partition: float = 0.0,
               max_tries: int = 100) -> "GradInstance":
        """Random instance; redraws (from derived seeds) until every ``|phi(q).z|`` is at least ``min_partition``.

        Near the clamp the loss curves sharply and central differences lose
        accuracy, so checks ask for a margin well above the clamp guard.
        """
        for attempt in range(max_tries):
            inst = cls._draw(kind, seed if attempt == 0 else derive_seed(seed, attempt), N, d, D, dv,
                             map_kind, with_init)
            if kind == "softmax" or min_partition <= 0.0:
                return inst
            if inst.run(kind)[1].min_abs_partition >= min_partition:
                return inst
        raise DegenerateInputError(f"no instance with partition margin {min_partition} in {max_tries} draws")

    @classmethod
    def _draw(cls, kind, seed, N, d, D, dv, map_kind, with_init) -> "GradInstance":
        dv = dv or d
        rng = RngState(seed)
        qkv, rng = seeded_normal_matrix(rng, 3 * N, max(d, dv))
        q, k, v = qkv[:N, :d], qkv[N:2 * N, :d], qkv[2 * N:, :dv]
        inst = cls(q, k, v)
        if kind == "softmax":
            inst.config = AttentionConfig("softmax")
            return inst
        sigma, rng = seeded_normal_matrix(rng, 1, d)
        sigma = 0.8 + 0.2 * np.abs(sigma[0])
        inst.fmap = build_feature_map(FeatureMapSpec(map_kind, d, D, tuple(sigma), seed=seed))
        inst.config = AttentionConfig("rfa")
        if kind == "rfa_gated":
            extra, rng = seeded_normal_matrix(rng, N + 1, d)
            inst.raw_inputs = extra[:N]
            inst.gate = GateParams(0.5 * extra[N], 0.3)
        if with_init and kind in ("rfa_causal", "rfa_gated"):
            F = inst.fmap.output_dim
            S0, rng = seeded_normal_matrix(rng, F, dv)
            phi, rng = seeded_normal_matrix(rng, 1, d)
            # a plausible carried state: features of one extra key
            z0 = apply_map(inst.fmap, l2_normalize(phi[0]))
            inst.init = AttentionState(0.1 * S0 + np.outer(z0, v[0]), z0)
        return inst

    def params(self) -> dict:
        p = {"queries": self.queries, "keys": self.keys, "values": self.values}
        if self.fmap is not None and self.fmap.kind != "elu":
            p["sigma"] = self.fmap.sigma
        if self.gate is not None:
            p["raw_inputs"] = self.raw_inputs
            p["w_g"] = self.gate.w_g
            p["b_g"] = np.array([self.gate.b_g])
        if self.init is not None:
            p["init_S"] = self.init.S
            p["init_z"] = self.init.z
        return p

    def run(self, kind: str, p: Optional[dict] = None):
        p = self.params() if p is None else p
        fmap = self.fmap
        if "sigma" in p:
            fmap = fmap.with_sigma(p["sigma"])
        gate = GateParams(p["w_g"], float(p["b_g"][0])) if "w_g" in p else None
        init = AttentionState(p["init_S"], p["init_z"]) if "init_S" in p else None
        return forward(kind, p["queries"], p["keys"], p["values"], fmap=fmap, config=self.config,
                       gate=gate, raw_inputs=p.get("raw_inputs"), init=init, causal=self.causal)


@dataclass
class GradReport:
    kind: str
    errors: dict = field(default_factory=dict)
    tol: float = 1e-5
    status: str = "pass"
    min_partition: float = float("inf")

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


CLAMP_GUARD = 1e-3


def grad_check(kind: str, instance: GradInstance, h: float = 1e-5, tol: float = 1e-5) -> GradReport:
    """Compare :func:`backward` with central differences on ``|outputs|^2 / 2``.

    Instances whose partition estimate comes within ``1e-3`` of zero are
    reported ``inconclusive`` rather than checked, since the clamp makes the
    loss non-smooth there.
    """
    out, cache = instance.run(kind)
    report = GradReport(kind, tol=tol, min_partition=cache.min_abs_partition)
    if report.min_partition < CLAMP_GUARD:
        report.status = "inconclusive"
        return report
    grads = backward(kind, cache, out)
    analytic = dict(grads.items())
    numeric = finite_diff_grad(lambda p: 0.5 * float(np.sum(instance.run(kind, p)[0] ** 2)), instance.params(), h)
    for name, num in numeric.items():
        ana = analytic[name]
        report.errors[name] = relative_error(np.reshape(ana, num.shape), num)
    report.status = "pass" if report.max_error <= tol else "fail"
    return report

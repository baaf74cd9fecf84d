"""Approximation-error sweeps and decode-time/memory measurements.

Memory is reported as an analytic count of live scalars (``live_elements``)
instead of process RSS: a softmax decoder holds a key/value cache that grows
with the number of generated tokens, while causal RFA holds a fixed
``(S, z)`` state.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .attention import AttentionConfig, rfa_cross, softmax_attention_all
from .errors import ParameterError
from .features import FeatureMapSpec, apply_map, build_feature_map, gaussian_kernel
from .numerics import RngState, derive_seed, l2_normalize, seeded_normal_matrix

DECODE_KINDS = ("softmax", "rfa-gaussian", "rfa-arccos")
DECODE_MODES = ("conditional", "unconditional")


@dataclass
class SweepRecord:
    D: int
    seed: int
    instance: int
    mse_output: float
    mse_kernel: float


@dataclass
class DecodeBenchRecord:
    kind: str
    mode: str
    N: int
    batch: int
    median_step_seconds: float
    total_seconds: float
    live_elements: int
    low_resolution: bool = False


# ------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepInstance:
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray


def make_sweep_instances(count: int = 4, M: int = 32, d: int = 8, n_queries: int = 16, seed: int = 0):
    """Fixed unit-norm problems shared by every cell of a sweep."""
    out = []
    for i in range(count):
        m, _ = seeded_normal_matrix(RngState(derive_seed(seed, i)), n_queries + 2 * M, d)
        out.append(SweepInstance(l2_normalize(m[:n_queries]), l2_normalize(m[n_queries:n_queries + M]),
                                 m[n_queries + M:]))
    return out


def kernel_mse(fmap, x, y) -> float:
    """Mean squared error of ``phi(x_i) . phi(y_i)`` against the exact gaussian kernel, row-paired."""
    est = np.sum(apply_map(fmap, x) * apply_map(fmap, y), axis=-1)
    return float(np.mean((est - gaussian_kernel(x, y, fmap.sigma)) ** 2))


def approximation_error_sweep(Ds: Sequence[int], seeds: int = 20, instances=None, root_seed: int = 0,
                              temperature: float = 1.0) -> list[SweepRecord]:
    """Output and kernel MSE of RFA (gaussian) against softmax for every ``(D, seed)``.

    Map seed ``s`` is ``derive_seed(root_seed, s)`` so that a given ``(D, s)``
    always yields the same map.
    """
    Ds = list(Ds)
    if not Ds or any(b <= a for a, b in zip(Ds, Ds[1:])):
        raise ParameterError("Ds must be a nonempty ascending list")
    if instances is None:
        instances = make_sweep_instances(seed=root_seed)
    cfg = AttentionConfig("rfa", temperature)
    sigma = 1.0 / np.sqrt(temperature)
    exact = [softmax_attention_all(ins.queries, ins.keys, ins.values, AttentionConfig("softmax", temperature))
             for ins in instances]
    records = []
    for D in Ds:
        for s in range(seeds):
            d = instances[0].queries.shape[1]
            fmap = build_feature_map(FeatureMapSpec("gaussian", d, D, sigma, seed=derive_seed(root_seed, s)))
            for i, ins in enumerate(instances):
                approx = rfa_cross(ins.queries, ins.keys, ins.values, fmap, cfg)
                nq, M = ins.queries.shape[0], ins.keys.shape[0]
                qq = np.repeat(ins.queries, M, axis=0)
                kk = np.tile(ins.keys, (nq, 1))
                records.append(SweepRecord(D, s, i, float(np.mean((approx - exact[i]) ** 2)), kernel_mse(fmap, qq, kk)))
    return records


def median_by_D(records: Sequence[SweepRecord], field: str = "mse_output") -> dict:
    by = {}
    for r in records:
        by.setdefault(r.D, []).append(getattr(r, field))
    return {D: float(np.median(v)) for D, v in sorted(by.items())}


# --------------------------------------------------------------- decoding


@dataclass(frozen=True)
class DecodeConfig:
    d: int = 64
    D: int = 64
    vocab: int = 32
    warmup: int = 3
    repeats: int = 5
    seed: int = 0
    temperature: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.warmup < 0 or self.repeats < 1:
            raise ParameterError("need warmup >= 0 and repeats >= 1")


def feature_dim(kind: str, D: int) -> int:
    return 2 * D if kind == "rfa-gaussian" else D


def live_elements(kind: str, mode: str, N: int, batch: int, d: int, D: int) -> int:
    """Scalars an attention backend keeps alive after ``N`` decode steps.

    Softmax: cached keys and values, ``batch * N * 2d``. RFA: ``batch * (F d + F)``
    for the running state. Conditional mode adds the cross-attention memory
    over a length-``N`` source (the encoder keys/values for softmax, a second
    fixed state for RFA).
    """
    if kind == "softmax":
        per = N * 2 * d
    else:
        F = feature_dim(kind, D)
        per = F * d + F
    if mode == "conditional":
        per *= 2
    return batch * per


class _Decoder:
    """Greedy decoder with one single-head attention layer and an argmax head."""

    def __init__(self, kind, mode, N, batch, cfg: DecodeConfig, kernels):
        self.kind, self.mode, self.N, self.B, self.cfg, self.k = kind, mode, N, batch, cfg, kernels
        d, V = cfg.d, cfg.vocab
        draws, rng = seeded_normal_matrix(RngState(cfg.seed), 6 * d + V, d)
        s = 1.0 / np.sqrt(d)
        self.E = np.ascontiguousarray(draws[:V])
        self.Wq, self.Wk, self.Wv = (np.ascontiguousarray(draws[V + i * d:V + (i + 1) * d] * s) for i in range(3))
        self.Wq2 = np.ascontiguousarray(draws[V + 3 * d:V + 4 * d] * s)
        self.Wk2 = np.ascontiguousarray(draws[V + 4 * d:V + 5 * d] * s)
        self.Wv2 = np.ascontiguousarray(draws[V + 5 * d:V + 6 * d] * s)
        Wo, rng = seeded_normal_matrix(rng, d, V)
        self.Wo = np.ascontiguousarray(Wo)
        Wf, rng = seeded_normal_matrix(rng, cfg.D, d)
        self.Wf = np.ascontiguousarray(Wf / np.sqrt(cfg.temperature))
        if mode == "conditional":
            src, rng = seeded_normal_matrix(rng, batch * N, d)
            self.src = src.reshape(batch, N, d)
        self.inv_tau = 1.0 / cfg.temperature

    def prepare_source(self):
        """Encoder-side work done once per decode (keys/values or the fixed RFA state)."""
        cfg = self.cfg
        if self.mode != "conditional":
            return
        K = self.src @ self.Wk2
        V = self.src @ self.Wv2
        if self.kind == "softmax":
            self.Ks = np.ascontiguousarray(K / np.linalg.norm(K, axis=-1, keepdims=True))
            self.Vs = np.ascontiguousarray(V)
        else:
            a = (K / np.linalg.norm(K, axis=-1, keepdims=True)) @ self.Wf.T
            if self.kind == "rfa-gaussian":
                phi = np.concatenate([np.sin(a), np.cos(a)], axis=-1) / np.sqrt(cfg.D)
            else:
                phi = np.maximum(a, 0.0) / np.sqrt(cfg.D)
            self.Sc = np.ascontiguousarray(np.einsum("bmf,bmi->bfi", phi, V))
            self.zc = np.ascontiguousarray(phi.sum(axis=1))

    def run(self):
        """Decode ``N`` tokens; returns (per-step seconds, setup seconds, tokens)."""
        cfg, B, d, N, k = self.cfg, self.B, self.cfg.d, self.N, self.k
        t0 = time.perf_counter()
        self.prepare_source()
        setup = time.perf_counter() - t0
        x = np.ascontiguousarray(np.repeat(self.E[:1], B, axis=0))
        h = np.zeros((B, d))
        q = np.zeros((B, d))
        tokens = np.zeros(B, dtype=np.int64)
        steps = np.empty(N)
        out_tokens = np.empty((B, N), dtype=np.int64)
        cond = self.mode == "conditional"
        if self.kind == "softmax":
            Kc = np.zeros((B, N, d))
            Vc = np.zeros((B, N, d))
            w = np.zeros(N)
            step, cross = k["softmax_decode_step"], k["softmax_cross_read"]
            head = k["greedy_head"]
            for t in range(N):
                s0 = time.perf_counter()
                step(x, self.Wq, self.Wk, self.Wv, Kc, Vc, t, self.inv_tau, q, h, w)
                if cond:
                    cross(x, self.Wq2, self.Ks, self.Vs, self.inv_tau, q, h, w)
                head(h, self.Wo, self.E, x, tokens)
                steps[t] = time.perf_counter() - s0
                out_tokens[:, t] = tokens
        else:
            F = feature_dim(self.kind, cfg.D)
            gaussian = self.kind == "rfa-gaussian"
            S = np.zeros((B, F, d))
            z = np.zeros((B, F))
            kk = np.zeros((B, d))
            v = np.zeros((B, d))
            pq = np.zeros((B, F))
            pk = np.zeros((B, F))
            step, cross = k["rfa_decode_step"], k["rfa_cross_read"]
            head = k["greedy_head"]
            eps = cfg.epsilon
            for t in range(N):
                s0 = time.perf_counter()
                step(x, self.Wq, self.Wk, self.Wv, self.Wf, gaussian, S, z, eps, q, kk, v, pq, pk, h)
                if cond:
                    cross(x, self.Wq2, self.Wf, gaussian, self.Sc, self.zc, eps, q, pq, h)
                head(h, self.Wo, self.E, x, tokens)
                steps[t] = time.perf_counter() - s0
                out_tokens[:, t] = tokens
        return steps, setup, out_tokens


def _timer_resolution() -> float:
    return time.get_clock_info("perf_counter").resolution


def decode_bench(kind: str, mode: str, lengths: Sequence[int], batch: int = 1,
                 config: DecodeConfig = DecodeConfig(), backend: Optional[str] = None) -> list[DecodeBenchRecord]:
    """Time greedy decoding for each length.

    Each length gets ``config.warmup`` untimed decodes, then ``config.repeats``
    timed ones; the record holds the median total time and the median of the
    per-run median step times.
    """
    if kind not in DECODE_KINDS:
        raise ParameterError(f"unknown decode kind {kind!r}")
    if mode not in DECODE_MODES:
        raise ParameterError(f"unknown decode mode {mode!r}")
    lengths = list(lengths)
    if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])) or lengths[0] < 1:
        raise ParameterError("lengths must be a nonempty ascending list of positive ints")
    kernels = _kernels.get_backend(backend)
    records = []
    res = _timer_resolution()
    for N in lengths:
        dec = _Decoder(kind, mode, N, batch, config, kernels)
        for _ in range(config.warmup):
            dec.run()
        totals, medians = [], []
        for _ in range(config.repeats):
            steps, setup, _ = dec.run()
            totals.append(float(steps.sum() + setup))
            medians.append(float(np.median(steps)))
        med_step = statistics.median(medians)
        records.append(DecodeBenchRecord(
            kind, mode, N, batch, med_step, statistics.median(totals),
            live_elements(kind, mode, N, batch, config.d, config.D),
            low_resolution=med_step < 100 * res,
        ))
    return records


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


# -------------------------------------------------------------------- CSV


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(records, path, record_type=None) -> None:
    """Write dataclass records as CSV (header row, LF endings, '.' decimals).

    ``record_type`` supplies the header when ``records`` is empty.
    """
    records = list(records)
    cls = record_type or (type(records[0]) if records else None)
    if cls is None:
        raise ParameterError("record_type is required for an empty record list")
    names = [f.name for f in dataclasses.fields(cls)]
    if any(type(r) is not cls for r in records):
        raise ParameterError("records must all be of the same type")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in records:
            w.writerow([_fmt(getattr(r, n)) for n in names])


def read_csv(path, record_type) -> list:
    conv = {"int": int, "float": float, "str": str, "bool": lambda s: s == "true"}
    types = {f.name: conv[f.type if isinstance(f.type, str) else f.type.__name__]
             for f in dataclasses.fields(record_type)}
    with open(path, newline="", encoding="utf-8") as fh:
        return [record_type(**{k: types[k](v) for k, v in row.items()}) for row in csv.DictReader(fh)]


def write_metadata(path, **meta) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

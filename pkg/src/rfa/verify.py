"""Property suites shared by the command line and the acceptance tests.

Every suite takes a :class:`VerifyConfig` and returns a list of
:class:`CheckResult`; a suite passes when all of its checks do.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import bench
from .attention import (AttentionConfig, AttentionState, GateParams, SequenceBatch, rfa_causal, rfa_cross, rfa_gated,
                        rfa_stateful_carry, rfa_unnormalized)
from .features import (FeatureMapSpec, apply_map, build_feature_map, gaussian_kernel, monte_carlo_estimates,
                       rff_variance)
from .gradients import KINDS as GRAD_KINDS
from .gradients import GradInstance, backward, forward, grad_check
from .numerics import RngState, derive_seed, l2_normalize, seeded_normal_matrix
from .toytrain import ATTENTION_KINDS, ToyTask, TrainConfig, gen_recency_task, init_model, model_logits, train_toy

SUITES = ("kernel", "recurrence", "grad", "sweep", "bench", "toy")


@dataclass
class VerifyConfig:
    seed: int = 0
    d: int = 8
    D: int = 64
    lengths: tuple = (16, 64, 256)
    # kernel statistics
    mc_pairs: int = 64
    mc_maps: int = 100_000
    mc_D: int = 1
    mc_sigmas: float = 4.0
    var_Ds: tuple = (1, 4, 16)
    var_zs: tuple = (0.5, 1.0, 2.0)
    var_rtol: float = 0.10
    # recurrence
    recurrence_seeds: int = 20
    recurrence_tol: float = 1e-10
    carry_tol: float = 1e-12
    unnorm_unit_tol: float = 1e-12
    unnorm_oracle_tol: float = 1e-10
    # gradients
    grad_instances: int = 20
    grad_tol: float = 1e-5
    grad_h: float = 3e-5
    grad_margin: float = 0.1
    # sweep
    sweep_Ds: tuple = (16, 32, 64, 128, 256)
    sweep_seeds: int = 20
    # decode bench
    bench_lengths: tuple = (256, 512, 1024, 2048)
    bench_d: int = 64
    bench_D: int = 64
    rfa_slope: tuple = (0.8, 1.2)
    softmax_slope: tuple = (1.6, 2.2)
    slope_gap: float = 0.5
    memory_ratio: float = 0.10
    # toy training
    toy_seeds: int = 5
    toy_required: int = 4
    toy_steps: int = 2000
    toy_tail: int = 100
    lookahead_tol: float = 1e-10


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extras = ", ".join(f"{k}={_short(v)}" for k, v in self.detail.items())
        return f"[{status}] {self.suite}/{self.name} ({self.seconds:.1f}s) {extras}"

    def to_dict(self) -> dict:
        return asdict(self)


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)) and len(v) > 8:
        return f"[{len(v)} items]"
    return v


def _timed(suite: str, name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(suite, name, bool(passed), detail, time.perf_counter() - t0)


def _unit_rows(rng: RngState, n: int, d: int):
    m, rng = seeded_normal_matrix(rng, n, d)
    return l2_normalize(m), rng


# ------------------------------------------------------------------ kernel


def check_unbiasedness(cfg: VerifyConfig):
    """Monte-Carlo mean of phi(x).phi(y) over fresh maps vs the exact gaussian kernel."""
    rng = RngState(derive_seed(cfg.seed, 11))
    X, rng = _unit_rows(rng, cfg.mc_pairs, cfg.d)
    Y, rng = _unit_rows(rng, cfg.mc_pairs, cfg.d)
    worst = 0.0
    for i in range(cfg.mc_pairs):
        spec = FeatureMapSpec("gaussian", cfg.d, cfg.mc_D, 1.0, seed=derive_seed(cfg.seed, 100 + i))
        est = monte_carlo_estimates(spec, X[i], Y[i], cfg.mc_maps)
        se = est.std(ddof=1) / math.sqrt(cfg.mc_maps)
        worst = max(worst, abs(est.mean() - float(gaussian_kernel(X[i], Y[i]))) / se)
    return worst <= cfg.mc_sigmas, {"worst_z": worst, "limit": cfg.mc_sigmas, "pairs": cfg.mc_pairs}


def _pair_at_distance(z: float, d: int, seed: int):
    rng = RngState(seed)
    x, rng = _unit_rows(rng, 1, d)
    u, rng = _unit_rows(rng, 1, d)
    return x[0], x[0] + z * u[0]


def check_variance_law(cfg: VerifyConfig):
    """Sample variance of the estimator vs (1 - e^{-z^2})^2 / 2D."""
    worst = 0.0
    cells = {}
    for D in cfg.var_Ds:
        for z in cfg.var_zs:
            x, y = _pair_at_distance(z, cfg.d, derive_seed(cfg.seed, 21))
            spec = FeatureMapSpec("gaussian", cfg.d, D, 1.0, seed=derive_seed(cfg.seed, 1000 * D + int(10 * z)))
            est = monte_carlo_estimates(spec, x, y, cfg.mc_maps)
            rel = abs(est.var(ddof=1) / rff_variance(z, D) - 1.0)
            cells[f"D{D}_z{z}"] = rel
            worst = max(worst, rel)
    return worst <= cfg.var_rtol, {"worst_rel": worst, "limit": cfg.var_rtol}


def check_unit_norm(cfg: VerifyConfig):
    fmap = build_feature_map(FeatureMapSpec("gaussian", cfg.d, cfg.D, 1.0, seed=cfg.seed))
    x, _ = seeded_normal_matrix(RngState(derive_seed(cfg.seed, 31)), 50, cfg.d)
    err = float(np.max(np.abs(np.sum(apply_map(fmap, 3.0 * x) ** 2, axis=-1) - 1.0)))
    return err <= 1e-12, {"max_err": err}


def check_arccos_nonnegative(cfg: VerifyConfig):
    fmap = build_feature_map(FeatureMapSpec("arccos", cfg.d, cfg.D, 1.0, seed=cfg.seed))
    x, _ = seeded_normal_matrix(RngState(derive_seed(cfg.seed, 32)), 50, cfg.d)
    m = float(np.min(apply_map(fmap, x) @ apply_map(fmap, x).T))
    return m >= 0.0, {"min_inner": m}


def kernel_suite(cfg: VerifyConfig) -> list[CheckResult]:
    return [
        _timed("kernel", "unbiasedness", lambda: check_unbiasedness(cfg)),
        _timed("kernel", "variance_law", lambda: check_variance_law(cfg)),
        _timed("kernel", "gaussian_unit_norm", lambda: check_unit_norm(cfg)),
        _timed("kernel", "arccos_nonnegative", lambda: check_arccos_nonnegative(cfg)),
    ]


# -------------------------------------------------------------- recurrence


def _random_problem(seed: int, N: int, d: int, M: Optional[int] = None):
    rng = RngState(seed)
    q, rng = seeded_normal_matrix(rng, N, d)
    k, rng = seeded_normal_matrix(rng, M or N, d)
    v, rng = seeded_normal_matrix(rng, M or N, d)
    return q, k, v


def check_causal_prefix(cfg: VerifyConfig):
    """Causal recurrence output at t equals cross attention over keys 0..t."""
    worst = 0.0
    acfg = AttentionConfig("rfa")
    for s in range(cfg.recurrence_seeds):
        for N in cfg.lengths:
            seed = derive_seed(cfg.seed, 10_000 + 97 * s + N)
            kind = "gaussian" if s % 2 == 0 else "arccos"
            fmap = build_feature_map(FeatureMapSpec(kind, cfg.d, cfg.D, 1.0, seed=seed))
            q, k, v = _random_problem(derive_seed(seed, 1), N, cfg.d)
            causal = rfa_causal(q, k, v, fmap, acfg).outputs
            for t in range(N):
                ref = rfa_cross(q[t:t + 1], k[:t + 1], v[:t + 1], fmap, acfg)[0]
                worst = max(worst, float(np.max(np.abs(causal[t] - ref))))
    return worst <= cfg.recurrence_tol, {"max_abs_diff": worst, "limit": cfg.recurrence_tol}


def check_stateful_carry(cfg: VerifyConfig):
    """Segmented runs that pass the final state match one unsegmented run."""
    worst = 0.0
    N = max(cfg.lengths)
    for s in range(cfg.recurrence_seeds):
        seed = derive_seed(cfg.seed, 20_000 + s)
        fmap = build_feature_map(FeatureMapSpec("gaussian", cfg.d, cfg.D, 1.0, seed=seed))
        q, k, v = _random_problem(derive_seed(seed, 1), N, cfg.d)
        x, _ = seeded_normal_matrix(RngState(derive_seed(seed, 2)), N, cfg.d)
        cuts = sorted({0, N, *(int(c) for c in np.linspace(0, N, 4 + s % 3)[1:-1])})
        segs = [SequenceBatch(q[a:b], k[a:b], v[a:b], x[a:b]) for a, b in zip(cuts, cuts[1:])]
        whole = rfa_causal(q, k, v, fmap).outputs
        worst = max(worst, float(np.max(np.abs(rfa_stateful_carry(segs, fmap) - whole))))
        gate = GateParams(0.3 * x[0], 0.5)
        whole_g = rfa_gated(SequenceBatch(q, k, v, x), gate, fmap).outputs
        worst = max(worst, float(np.max(np.abs(rfa_stateful_carry(segs, fmap, gate=gate) - whole_g))))
    return worst <= cfg.carry_tol, {"max_abs_diff": worst, "limit": cfg.carry_tol}


def brute_unnormalized(queries, keys, values, fmap, temperature=1.0, eps=1e-6):
    """Direct per-query sum of exp(|k|^2/2tau) phi(q).phi(k) v over keys."""
    out = np.empty((len(queries), values.shape[1]))
    for t, q in enumerate(queries):
        num = np.zeros(values.shape[1])
        den = 0.0
        pq = apply_map(fmap, q)
        for k, v in zip(keys, values):
            w = math.exp(float(k @ k) / (2.0 * temperature)) * float(pq @ apply_map(fmap, k))
            num += w * v
            den += w
        den = den if abs(den) >= eps else math.copysign(eps, den) if den != 0 else eps
        out[t] = num / den
    return out


def check_unnormalized(cfg: VerifyConfig):
    """Norm-corrected RFA: equal to normalized RFA on unit inputs, to a brute oracle otherwise."""
    unit_worst, oracle_worst = 0.0, 0.0
    raw = AttentionConfig("rfa", normalize_qk=False)
    for s in range(cfg.recurrence_seeds):
        seed = derive_seed(cfg.seed, 30_000 + s)
        fmap = build_feature_map(FeatureMapSpec("gaussian", cfg.d, cfg.D, 1.0, seed=seed))
        q, k, v = _random_problem(derive_seed(seed, 1), 8, cfg.d, M=24)
        qu, ku = l2_normalize(q), l2_normalize(k)
        diff = rfa_unnormalized(qu, ku, v, fmap, raw) - rfa_cross(qu, ku, v, fmap)
        unit_worst = max(unit_worst, float(np.max(np.abs(diff))))
        scales = np.exp(np.linspace(-1.0, 0.4, len(k)))[:, None]
        qm, km = qu * 0.7, ku * scales
        diff = rfa_unnormalized(qm, km, v, fmap, raw) - brute_unnormalized(qm, km, v, fmap)
        oracle_worst = max(oracle_worst, float(np.max(np.abs(diff))))
    ok = unit_worst <= cfg.unnorm_unit_tol and oracle_worst <= cfg.unnorm_oracle_tol
    return ok, {"unit_max_diff": unit_worst, "oracle_max_diff": oracle_worst}


def recurrence_suite(cfg: VerifyConfig) -> list[CheckResult]:
    return [
        _timed("recurrence", "causal_equals_prefix_cross", lambda: check_causal_prefix(cfg)),
        _timed("recurrence", "stateful_carry", lambda: check_stateful_carry(cfg)),
        _timed("recurrence", "unnormalized_consistency", lambda: check_unnormalized(cfg)),
    ]


# --------------------------------------------------------------- gradients


def check_gradients(cfg: VerifyConfig, kind: str):
    worst, inconclusive, failed = 0.0, 0, []
    for i in range(cfg.grad_instances):
        inst = GradInstance.random(kind, derive_seed(cfg.seed, 40_000 + i), with_init=True,
                                   min_partition=cfg.grad_margin)
        rep = grad_check(kind, inst, h=cfg.grad_h, tol=cfg.grad_tol)
        if rep.status == "inconclusive":
            inconclusive += 1
            continue
        worst = max(worst, rep.max_error)
        if not rep.passed:
            failed.append(i)
    ok = not failed and inconclusive < cfg.grad_instances
    return ok, {"max_rel_err": worst, "limit": cfg.grad_tol, "failed": failed, "inconclusive": inconclusive}


def check_chain_consistency(cfg: VerifyConfig, tol: float = 1e-9):
    """Backward through a two-segment carried run equals backward of the whole run."""
    worst = 0.0
    for i in range(cfg.grad_instances):
        seed = derive_seed(cfg.seed, 45_000 + i)
        inst = GradInstance.random("rfa_causal", seed, N=8)
        q, k, v, fmap = inst.queries, inst.keys, inst.values, inst.fmap
        up, _ = seeded_normal_matrix(RngState(derive_seed(seed, 1)), q.shape[0], v.shape[1])
        _, whole = forward("rfa_causal", q, k, v, fmap=fmap, config=inst.config)
        g = backward("rfa_causal", whole, up)
        c = 3 + i % 3
        _, first = forward("rfa_causal", q[:c], k[:c], v[:c], fmap=fmap, config=inst.config)
        _, second = forward("rfa_causal", q[c:], k[c:], v[c:], fmap=fmap, config=inst.config,
                            init=first.final_state())
        g2 = backward("rfa_causal", second, up[c:])
        g1 = backward("rfa_causal", first, up[:c], final_state_grad=AttentionState(g2.init_S, g2.init_z))
        for name in ("queries", "keys", "values"):
            joined = np.concatenate([getattr(g1, name), getattr(g2, name)], axis=-2)
            worst = max(worst, float(np.max(np.abs(joined - getattr(g, name)))))
        worst = max(worst, float(np.max(np.abs(g1.sigma + g2.sigma - g.sigma))))
    return worst <= tol, {"max_abs_diff": worst, "limit": tol}


def check_grad_determinism(cfg: VerifyConfig):
    same = True
    for kind in GRAD_KINDS:
        inst = GradInstance.random(kind, derive_seed(cfg.seed, 46_000), with_init=True)
        bundles = []
        for _ in range(2):
            out, cache = inst.run(kind)
            bundles.append(dict(backward(kind, cache, out).items()))
        same &= all(np.array_equal(np.asarray(bundles[0][n]), np.asarray(bundles[1][n])) for n in bundles[0])
    return same, {}


def grad_suite(cfg: VerifyConfig) -> list[CheckResult]:
    out = [_timed("grad", k, lambda k=k: check_gradients(cfg, k)) for k in GRAD_KINDS]
    out.append(_timed("grad", "chain_consistency", lambda: check_chain_consistency(cfg)))
    out.append(_timed("grad", "determinism", lambda: check_grad_determinism(cfg)))
    return out


# ------------------------------------------------------------------- sweep


def check_error_decay(cfg: VerifyConfig, records=None):
    if records is None:
        records = bench.approximation_error_sweep(cfg.sweep_Ds, cfg.sweep_seeds, root_seed=cfg.seed)
    med = bench.median_by_D(records)
    vals = list(med.values())
    ok = all(b < a for a, b in zip(vals, vals[1:]))
    return ok, {"median_mse_output": {int(k): v for k, v in med.items()}}


def sweep_suite(cfg: VerifyConfig) -> list[CheckResult]:
    return [_timed("sweep", "median_mse_decreasing", lambda: check_error_decay(cfg))]


# ------------------------------------------------------------------- bench


def bench_suite(cfg: VerifyConfig) -> list[CheckResult]:
    dcfg = bench.DecodeConfig(d=cfg.bench_d, D=cfg.bench_D, seed=cfg.seed)
    L = list(cfg.bench_lengths)
    runs = {}

    def run(kind):
        if kind not in runs:
            runs[kind] = bench.decode_bench(kind, "unconditional", L, 1, dcfg)
        return runs[kind]

    def slope(kind):
        r = run(kind)
        return bench.loglog_slope([x.N for x in r], [x.total_seconds for x in r])

    def slopes():
        s_rfa, s_sm = slope("rfa-gaussian"), slope("softmax")
        lo, hi = cfg.rfa_slope
        slo, shi = cfg.softmax_slope
        ok = lo <= s_rfa <= hi and slo <= s_sm <= shi and s_sm - s_rfa >= cfg.slope_gap
        return ok, {"rfa_slope": s_rfa, "softmax_slope": s_sm}

    def memory():
        N = 2048
        sm = bench.live_elements("softmax", "unconditional", N, 1, cfg.bench_d, cfg.bench_D)
        rf = bench.live_elements("rfa-gaussian", "unconditional", N, 1, cfg.bench_d, cfg.bench_D)
        const = all(x.live_elements == run("rfa-gaussian")[0].live_elements for x in run("rfa-gaussian"))
        linear = all(x.live_elements == x.N * 2 * cfg.bench_d for x in run("softmax"))
        ok = rf / sm < cfg.memory_ratio and const and linear
        return ok, {"softmax": sm, "rfa": rf, "ratio": rf / sm}

    def flatness():
        r, s = run("rfa-gaussian"), run("softmax")
        rr = r[-1].median_step_seconds / r[0].median_step_seconds
        sr = s[-1].median_step_seconds / s[0].median_step_seconds
        return rr <= 1.5 and sr >= 3.0, {"rfa_step_ratio": rr, "softmax_step_ratio": sr}

    return [
        _timed("bench", "decode_slopes", slopes),
        _timed("bench", "live_memory", memory),
        _timed("bench", "step_time_flatness", flatness),
    ]


# --------------------------------------------------------------------- toy


def final_training_loss(curve, tail: int) -> float:
    """Mean training loss over the last ``tail`` steps."""
    return float(np.mean(curve.loss[-tail:]))


def toy_runs(cfg: VerifyConfig, task: ToyTask = ToyTask()):
    """Final training loss per kind and seed."""
    out = {}
    for kind in ATTENTION_KINDS:
        out[kind] = []
        for s in range(cfg.toy_seeds):
            _, curve = train_toy(task, TrainConfig(kind=kind, seed=derive_seed(cfg.seed, s), steps=cfg.toy_steps))
            out[kind].append(final_training_loss(curve, cfg.toy_tail))
    return out


def check_lookahead(cfg: VerifyConfig, task: ToyTask = ToyTask()):
    """Changing tokens after position t leaves the logits at t unchanged."""
    worst = 0.0
    L = task.length
    tokens, _ = gen_recency_task(task, derive_seed(cfg.seed, 50), 1)
    tokens = tokens[0]
    for kind in ATTENTION_KINDS:
        model = init_model(task, TrainConfig(kind=kind, seed=cfg.seed))
        base, _ = model_logits(model, tokens, 0)
        for t in range(L - 1):
            alt = tokens.copy()
            alt[t + 1:] = (np.roll(tokens[t + 1:], 1) + 1) % task.vocab
            other, _ = model_logits(model, alt, 0)
            worst = max(worst, float(np.max(np.abs(other[0, :t + 1] - base[0, :t + 1]))))
    return worst <= cfg.lookahead_tol, {"max_abs_diff": worst}


def toy_suite(cfg: VerifyConfig, task: ToyTask = ToyTask()) -> list[CheckResult]:
    cache = {}
    chance = math.log(task.vocab)

    def runs():
        if "r" not in cache:
            cache["r"] = toy_runs(cfg, task)
        return cache["r"]

    def trainability():
        r = runs()
        hits = {k: sum(x <= 0.5 * chance for x in v) for k, v in r.items()}
        return all(h == cfg.toy_seeds for h in hits.values()), {"threshold": 0.5 * chance, "hits": hits, "losses": r}

    def gating():
        r = runs()
        wins = sum(g <= u for g, u in zip(r["rfa_gated"], r["rfa"]))
        return wins >= cfg.toy_required, {"wins": wins, "gated": r["rfa_gated"], "ungated": r["rfa"]}

    return [
        _timed("toy", "no_lookahead", lambda: check_lookahead(cfg, task)),
        _timed("toy", "trainability", trainability),
        _timed("toy", "gating_direction", gating),
    ]


SUITE_FUNCS = {
    "kernel": kernel_suite,
    "recurrence": recurrence_suite,
    "grad": grad_suite,
    "sweep": sweep_suite,
    "bench": bench_suite,
    "toy": toy_suite,
}


def run_suites(names, cfg: VerifyConfig, report: Optional[Callable[[CheckResult], None]] = None) -> list[CheckResult]:
    results = []
    for name in names:
        for res in SUITE_FUNCS[name](cfg):
            results.append(res)
            if report is not None:
                report(res)
    return results

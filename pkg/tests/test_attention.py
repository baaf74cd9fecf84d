import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfa.attention import (AttentionConfig, AttentionState, GateParams, SequenceBatch, decayed_weights,
                           gated_softmax_oracle, key_scale, rfa_causal, rfa_cross, rfa_gated, rfa_stateful_carry,
                           rfa_unnormalized, softmax_attention, softmax_attention_all)
from rfa.errors import DegenerateInputError, ParameterError, RangeError, UnsupportedKindError
from rfa.features import FeatureMapSpec, apply_map, build_feature_map
from rfa.numerics import RngState, l2_normalize, seeded_normal_matrix

SOFTMAX = AttentionConfig("softmax")
RAW_SOFTMAX = AttentionConfig("softmax", normalize_qk=False)
RFA = AttentionConfig("rfa")


def normals(seed, *shape):
    m, _ = seeded_normal_matrix(RngState(seed), int(np.prod(shape[:-1])), shape[-1])
    return m.reshape(shape)


def fmap_of(kind="gaussian", d=4, D=64, seed=0, sigma=1.0):
    return build_feature_map(FeatureMapSpec(kind, d, D, sigma, seed))


def brute_rfa(q, keys, values, fmap, eps=1e-6, weights=None):
    """Explicit per-key weights phi(q).phi(k_i), optionally scaled."""
    pq = apply_map(fmap, l2_normalize(q))
    num = np.zeros(values.shape[1])
    den = 0.0
    for i, (k, v) in enumerate(zip(keys, values)):
        w = float(pq @ apply_map(fmap, l2_normalize(k)))
        if weights is not None:
            w *= weights[i]
        num += w * v
        den += w
    if abs(den) < eps:
        den = math.copysign(eps, den) if den != 0 else eps
    return num / den


# ------------------------------------------------------------------ config


@pytest.mark.parametrize("kwargs", [dict(kind="linear"), dict(temperature=0.0), dict(epsilon=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        AttentionConfig(**kwargs)


def test_fresh_state_is_zero():
    s = AttentionState.zeros(6, 3)
    assert s.S.shape == (6, 3) and s.z.shape == (6,)
    assert not s.S.any() and not s.z.any()


def test_sequence_batch_validation():
    q = np.ones((3, 2))
    with pytest.raises(ParameterError):
        SequenceBatch(q, np.ones((4, 2)), np.ones((3, 2)))
    with pytest.raises(ParameterError):
        SequenceBatch(q, q, q, raw_inputs=np.ones((2, 2)))
    b = SequenceBatch(q, np.ones((5, 2)), np.ones((5, 1)))
    assert (b.N, b.M) == (3, 5)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_gate_range(w, b):
    x = np.array([[0.3], [-0.7]])
    g = GateParams(np.array([w]), b).gates(x)
    assert np.all(np.isfinite(g)) and np.all((g >= 0) & (g <= 1))
    # strictly inside while the logit is representable away from saturation
    moderate = np.abs(x[:, 0] * w + b) < 36
    assert np.all((g[moderate] > 0) & (g[moderate] < 1))


def test_gate_open_interval_for_moderate_inputs():
    g = GateParams(np.array([1.0, -2.0]), 0.5).gates(normals(3, 20, 2))
    assert np.all((g > 0) & (g < 1))


# ------------------------------------------------------------------ softmax


def test_softmax_single_pair_returns_value():
    v = np.array([[2.0, -1.0, 0.5]])
    assert np.array_equal(softmax_attention(np.array([0.3, 1.0]), np.array([[1.0, 2.0]]), v), v[0])


def test_softmax_tied_scores_average():
    q = np.array([1.0, 0.0])
    k = np.array([[0.0, 1.0], [0.0, -1.0]])
    v = np.array([[1.0, 2.0], [3.0, -4.0]])
    assert np.max(np.abs(softmax_attention(q, k, v) - v.mean(axis=0))) <= 1e-12


def test_softmax_direct_evaluation():
    out = softmax_attention(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [-1.0, 0.0]]),
                            np.array([[1.0, 0.0], [0.0, 1.0]]), RAW_SOFTMAX)
    assert np.allclose(out, [0.880797, 0.119203], atol=1e-6)


def test_softmax_errors():
    with pytest.raises(ParameterError):
        softmax_attention(np.ones(2), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(DegenerateInputError):
        softmax_attention(np.zeros(2), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(DegenerateInputError):
        softmax_attention(np.ones(2), np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones((2, 2)))


def test_causal_softmax_masks_future():
    q, k, v = normals(1, 5, 3), normals(2, 5, 3), normals(3, 5, 2)
    full = softmax_attention_all(q, k, v, SOFTMAX, causal=True)
    for t in range(5):
        assert np.allclose(full[t], softmax_attention(q[t], k[:t + 1], v[:t + 1]), atol=1e-14)


@given(st.integers(0, 2**32), st.permutations(range(7)))
def test_permutation_invariance(seed, perm):
    perm = list(perm)
    q, k, v = normals(seed, 3, 4), normals(seed + 1, 7, 4), normals(seed + 2, 7, 2)
    fmap = fmap_of(seed=seed % 1000)
    a = softmax_attention_all(q, k, v)
    b = softmax_attention_all(q, k[perm], v[perm])
    assert np.max(np.abs(a - b)) <= 1e-10
    a = rfa_cross(q, k, v, fmap)
    b = rfa_cross(q, k[perm], v[perm], fmap)
    assert np.max(np.abs(a - b)) <= 1e-10


@given(st.integers(0, 2**32), st.floats(1e-3, 1e3), st.integers(0, 5))
def test_key_scale_invariance_under_normalization(seed, c, i):
    q, k, v = normals(seed, 4), normals(seed + 1, 6, 4), normals(seed + 2, 6, 3)
    k2 = k.copy()
    k2[i] *= c
    assert np.max(np.abs(softmax_attention(q, k, v) - softmax_attention(q, k2, v))) <= 1e-12


# ---------------------------------------------------------------- rfa_cross


@pytest.mark.parametrize("kind", ["gaussian", "arccos", "elu"])
def test_rfa_cross_single_key(kind):
    fmap = fmap_of(kind, d=3, D=16)
    q = normals(1, 5, 3)
    v = np.array([[0.7, -0.2]])
    out = rfa_cross(q, normals(2, 1, 3), v, fmap)
    assert np.allclose(out, np.repeat(v, 5, axis=0), rtol=1e-14, atol=1e-14)


def test_rfa_cross_constant_values():
    fmap = fmap_of(d=4, D=32)
    v = np.tile([[1.5, -2.0, 0.25]], (9, 1))
    out = rfa_cross(normals(1, 4, 4), normals(2, 9, 4), v, fmap)
    assert np.max(np.abs(out - v[0])) <= 1e-10


def test_rfa_cross_matches_brute_force():
    fmap = fmap_of(d=4, D=64, seed=5)
    q, k, v = normals(1, 8, 4), normals(2, 8, 4), normals(3, 8, 4)
    out = rfa_cross(q, k, v, fmap)
    for t in range(8):
        assert np.max(np.abs(out[t] - brute_rfa(q[t], k, v, fmap))) <= 1e-10


def test_rfa_cross_dimension_mismatch():
    with pytest.raises(ParameterError):
        rfa_cross(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 2)), fmap_of(d=4))


def test_guard_is_transparent_in_typical_regime():
    fmap = fmap_of(d=4, D=64, seed=3)
    q, k, v = normals(1, 8, 4), normals(2, 12, 4), normals(3, 12, 2)
    pq = apply_map(fmap, l2_normalize(q))
    assert np.min(np.abs(pq @ apply_map(fmap, l2_normalize(k)).sum(0))) >= 1e-3
    tiny = AttentionConfig("rfa", epsilon=1e-300)
    assert np.array_equal(rfa_cross(q, k, v, fmap), rfa_cross(q, k, v, fmap, tiny))
    assert np.array_equal(rfa_causal(q[:8], k[:8], v[:8], fmap).outputs,
                          rfa_causal(q[:8], k[:8], v[:8], fmap, tiny).outputs)


def test_rfa_approaches_softmax_as_D_grows():
    q, k, v = l2_normalize(normals(1, 4, 4)), l2_normalize(normals(2, 16, 4)), normals(3, 16, 2)
    exact = softmax_attention_all(q, k, v)
    errs = [np.mean((rfa_cross(q, k, v, fmap_of(D=D, seed=9)) - exact) ** 2) for D in (4, 4096)]
    assert errs[1] < errs[0] and errs[1] < 1e-3


# --------------------------------------------------------------- rfa_causal


def test_causal_first_step_is_first_value():
    q, k, v = normals(1, 5, 4), normals(2, 5, 4), normals(3, 5, 2)
    res = rfa_causal(q, k, v, fmap_of())
    assert np.allclose(res.outputs[0], v[0], rtol=1e-14, atol=1e-14)


@given(st.integers(0, 2**32), st.integers(1, 24), st.sampled_from(["gaussian", "arccos", "elu"]))
def test_causal_equals_prefix_cross(seed, N, kind):
    fmap = fmap_of(kind, d=4, D=32, seed=seed % 997)
    q, k, v = normals(seed, N, 4), normals(seed + 1, N, 4), normals(seed + 2, N, 3)
    out = rfa_causal(q, k, v, fmap).outputs
    for t in range(N):
        assert np.max(np.abs(out[t] - rfa_cross(q[t:t + 1], k[:t + 1], v[:t + 1], fmap)[0])) <= 1e-10


def test_causal_matches_brute_prefix_length_64():
    fmap = fmap_of(d=4, D=64, seed=8)
    q, k, v = normals(4, 64, 4), normals(5, 64, 4), normals(6, 64, 3)
    out = rfa_causal(q, k, v, fmap).outputs
    worst = max(np.max(np.abs(out[t] - brute_rfa(q[t], k[:t + 1], v[:t + 1], fmap))) for t in range(64))
    assert worst <= 1e-10


def test_causal_final_state_is_sum():
    fmap = fmap_of(d=4, D=16)
    q, k, v = normals(1, 6, 4), normals(2, 6, 4), normals(3, 6, 2)
    st_ = rfa_causal(q, k, v, fmap).state
    phi = apply_map(fmap, l2_normalize(k))
    assert np.allclose(st_.S, phi.T @ v, atol=1e-13)
    assert np.allclose(st_.z, phi.sum(0), atol=1e-13)


def test_causal_rejects_bad_init():
    fmap = fmap_of(d=4, D=16)
    with pytest.raises(ParameterError):
        rfa_causal(np.ones((2, 4)), np.ones((2, 4)), np.ones((2, 2)), fmap, init=AttentionState.zeros(5, 2))
    with pytest.raises(ParameterError):
        rfa_causal(np.ones((2, 4)), np.ones((3, 4)), np.ones((3, 2)), fmap)


# ------------------------------------------------------------ stateful carry


def _segments(q, k, v, x, cuts):
    return [SequenceBatch(q[a:b], k[a:b], v[a:b], x[a:b]) for a, b in zip(cuts, cuts[1:])]


@pytest.mark.parametrize("cuts", [[0, 64], [0, 32, 64], list(range(65))])
def test_stateful_carry_matches_unsplit(cuts):
    fmap = fmap_of(d=4, D=32, seed=2)
    q, k, v, x = normals(1, 64, 4), normals(2, 64, 4), normals(3, 64, 3), normals(4, 64, 4)
    whole = rfa_causal(q, k, v, fmap).outputs
    assert np.max(np.abs(rfa_stateful_carry(_segments(q, k, v, x, cuts), fmap) - whole)) <= 1e-12
    gate = GateParams(0.4 * x[0], -0.2)
    whole_g = rfa_gated(SequenceBatch(q, k, v, x), gate, fmap).outputs
    assert np.max(np.abs(rfa_stateful_carry(_segments(q, k, v, x, cuts), fmap, gate=gate) - whole_g)) <= 1e-12


@given(st.lists(st.integers(1, 39), max_size=6, unique=True))
def test_any_segmentation(cut_points):
    fmap = fmap_of(d=4, D=16, seed=4)
    q, k, v, x = normals(5, 40, 4), normals(6, 40, 4), normals(7, 40, 2), normals(8, 40, 4)
    cuts = [0, *sorted(cut_points), 40]
    whole = rfa_causal(q, k, v, fmap).outputs
    assert np.max(np.abs(rfa_stateful_carry(_segments(q, k, v, x, cuts), fmap) - whole)) <= 1e-12


def test_stateful_carry_dimension_errors():
    fmap = fmap_of(d=4, D=16)
    a = SequenceBatch(np.ones((2, 4)), np.ones((2, 4)), np.ones((2, 2)))
    b = SequenceBatch(np.ones((2, 4)), np.ones((2, 4)), np.ones((2, 3)))
    with pytest.raises(ParameterError):
        rfa_stateful_carry([a, b], fmap)
    with pytest.raises(ParameterError):
        rfa_stateful_carry([], fmap)


# ------------------------------------------------------------------- gated


def test_gated_closed_gate_returns_current_value():
    fmap = fmap_of(d=4, D=32)
    q, k, v, x = normals(1, 10, 4), normals(2, 10, 4), normals(3, 10, 2), normals(4, 10, 4)
    res = rfa_gated(SequenceBatch(q, k, v, x), GateParams(np.zeros(4), -40.0), fmap)
    assert np.max(np.abs(res.outputs - v)) <= 1e-9


def test_gated_half_gate_first_step():
    fmap = fmap_of(d=4, D=32)
    q, k, v, x = normals(1, 3, 4), normals(2, 3, 4), normals(3, 3, 2), normals(4, 3, 4)
    res = rfa_gated(SequenceBatch(q, k, v, x), GateParams(np.zeros(4), 0.0), fmap)
    assert np.all(res.gates == 0.5)
    assert np.allclose(res.outputs[0], v[0], rtol=1e-14, atol=1e-14)


def test_gated_matches_unrolled_weights():
    fmap = fmap_of(d=4, D=64, seed=6)
    q, k, v, x = normals(1, 12, 4), normals(2, 12, 4), normals(3, 12, 3), normals(4, 12, 4)
    res = rfa_gated(SequenceBatch(q, k, v, x), GateParams(0.5 * normals(5, 4), 0.3), fmap)
    g = res.gates
    for t in range(12):
        w = [(1 - g[i]) * np.prod(g[i + 1:t + 1]) for i in range(t + 1)]
        assert np.max(np.abs(res.outputs[t] - brute_rfa(q[t], k[:t + 1], v[:t + 1], fmap, weights=w))) <= 1e-10


def test_gated_needs_raw_inputs():
    with pytest.raises(ParameterError):
        rfa_gated(SequenceBatch(np.ones((2, 4)), np.ones((2, 4)), np.ones((2, 2))), GateParams(np.zeros(4), 0.0),
                  fmap_of())


def test_open_gate_from_zero_state_is_degenerate():
    fmap = fmap_of(d=4, D=16)
    q, k, v, x = normals(1, 5, 4), normals(2, 5, 4), normals(3, 5, 2), normals(4, 5, 4)
    res = rfa_gated(SequenceBatch(q, k, v, x), GateParams(np.zeros(4), 40.0), fmap)
    assert res.degenerate
    assert np.all(res.outputs == 0.0)
    assert not rfa_causal(q, k, v, fmap).degenerate


# ------------------------------------------------------------ unnormalized


def brute_unnormalized(q, keys, values, fmap, tau=1.0):
    pq = apply_map(fmap, q)
    ws = [math.exp(k @ k / (2 * tau)) * float(pq @ apply_map(fmap, k)) for k in keys]
    return sum(w * v for w, v in zip(ws, values)) / sum(ws)


RAW = AttentionConfig("rfa", normalize_qk=False)


def test_unnormalized_on_unit_inputs_equals_cross():
    fmap = fmap_of(d=4, D=64, seed=1)
    q, k, v = l2_normalize(normals(1, 5, 4)), l2_normalize(normals(2, 9, 4)), normals(3, 9, 2)
    assert np.max(np.abs(rfa_unnormalized(q, k, v, fmap, RAW) - rfa_cross(q, k, v, fmap))) <= 1e-12


def test_unnormalized_single_key():
    fmap = fmap_of(d=4, D=64, seed=1)
    v = np.array([[0.3, -1.0]])
    out = rfa_unnormalized(normals(1, 3, 4), 3.0 * l2_normalize(normals(2, 1, 4)), v, fmap, RAW)
    assert np.allclose(out, np.repeat(v, 3, axis=0), rtol=1e-14, atol=1e-14)


def test_unnormalized_mixed_norms():
    fmap = fmap_of(d=4, D=64, seed=2)
    q = l2_normalize(normals(1, 3, 4))
    k = l2_normalize(normals(2, 2, 4)) * np.array([[1.0], [3.0]])
    v = normals(3, 2, 2)
    out = rfa_unnormalized(q, k, v, fmap, RAW)
    assert np.max(np.abs(out - rfa_cross(q, k, v, fmap))) > 1e-3
    for t in range(3):
        assert np.max(np.abs(out[t] - brute_unnormalized(q[t], k, v, fmap))) <= 1e-10


def test_unnormalized_errors():
    fmap = fmap_of(d=4, D=16)
    with pytest.raises(ParameterError):
        rfa_unnormalized(np.ones((1, 4)), np.ones((1, 4)), np.ones((1, 2)), fmap, RFA)
    with pytest.raises(UnsupportedKindError):
        rfa_unnormalized(np.ones((1, 4)), np.ones((1, 4)), np.ones((1, 2)), fmap_of("elu"), RAW)
    with pytest.raises(RangeError):
        rfa_unnormalized(np.ones((1, 4)), np.full((1, 4), 20.0), np.ones((1, 2)), fmap, RAW)


def test_key_scale_value():
    assert np.allclose(key_scale(np.array([[3.0, 4.0]]), 2.0), [25.0 / 4.0])


# ----------------------------------------------------- gated softmax oracle


def test_oracle_single_step():
    out = gated_softmax_oracle(np.array([1.0, 0.0]), np.array([[0.5, 0.5]]), np.array([[2.0, -4.0]]), [0.25])
    assert np.allclose(out, [1.5, -3.0], rtol=0, atol=1e-15)


def test_oracle_all_zero_gates():
    q = np.array([0.6, 0.8])
    k = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    v = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 3.0]])
    out = gated_softmax_oracle(q, k, v, [0.0, 0.0, 0.0])
    logits = np.array([0.0, 0.0, q @ k[2]])
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(out, p[2] * v[2], atol=1e-15)
    assert not np.allclose(out, v[2])


def test_oracle_matches_brute_force():
    q, k, v = normals(1, 4), normals(2, 5, 4), normals(3, 5, 3)
    g = np.array([0.9, 0.2, 0.5, 0.7, 0.4])
    w = np.array([(1 - g[i]) * np.prod(g[i + 1:]) for i in range(5)])
    assert np.allclose(decayed_weights(g), w, rtol=0, atol=1e-15)
    logits = (k * w[:, None]) @ q
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert np.max(np.abs(gated_softmax_oracle(q, k, v, g) - p @ (v * w[:, None]))) <= 1e-12


def test_oracle_rejects_bad_gates():
    with pytest.raises(ParameterError):
        gated_softmax_oracle(np.ones(2), np.ones((2, 2)), np.ones((2, 2)), [0.5, 1.5])
    with pytest.raises(ParameterError):
        gated_softmax_oracle(np.ones(2), np.ones((2, 2)), np.ones((2, 2)), [0.5])

"""Serial-in-time inner loops.

The causal recurrence ``S_t = a_t S_{t-1} + b_t phi(k_t) v_t^T`` (and the same
for ``z``) covers both plain causal RFA (``a = b = 1``) and the gated variant
(``a = g``, ``b = 1 - g``). Every kernel here exists twice: an explicit-loop
version compiled with numba, and a numpy version vectorised over batch and
feature axes. ``scan_forward``/``scan_backward`` dispatch to whichever is
active; the ``*_numpy`` and ``*_numba`` names stay importable for tests and
benchmarks.

Array layout: batch first, then time. ``phi_q``/``phi_k``: (B, N, F),
``values``: (B, N, dv), ``decay``/``inject``: (B, N), states ``S``: (B, F, dv),
``z``: (B, F).
"""

import numpy as np

from ._accel import NUMBA_AVAILABLE, njit


def clamp(u, eps):
    """Sign-preserving clamp to ``|u| >= eps``; ``u == 0`` maps to ``+eps``."""
    u = np.asarray(u, dtype=np.float64)
    return np.where(u >= 0.0, np.maximum(u, eps), np.minimum(u, -eps))


# ---------------------------------------------------------------- forward scan


def _scan_forward_loops(phi_q, phi_k, values, decay, inject, S0, z0, eps, store):
    B, N, F = phi_q.shape
    dv = values.shape[2]
    out = np.empty((B, N, dv))
    u_all = np.empty((B, N))
    S = S0.copy()
    z = z0.copy()
    hist_n = N if store else 0
    S_hist = np.empty((B, hist_n, F, dv))
    z_hist = np.empty((B, hist_n, F))
    num = np.empty(dv)
    for b in range(B):
        for t in range(N):
            a = decay[b, t]
            c = inject[b, t]
            u = 0.0
            for j in range(dv):
                num[j] = 0.0
            for f in range(F):
                pk = c * phi_k[b, t, f]
                z[b, f] = a * z[b, f] + pk
                pq = phi_q[b, t, f]
                u += pq * z[b, f]
                for j in range(dv):
                    s = a * S[b, f, j] + pk * values[b, t, j]
                    S[b, f, j] = s
                    num[j] += pq * s
            u_all[b, t] = u
            den = u if (u > eps or u < -eps) else (eps if u >= 0.0 else -eps)
            for j in range(dv):
                out[b, t, j] = num[j] / den
            if store:
                S_hist[b, t] = S[b]
                z_hist[b, t] = z[b]
    return out, S, z, u_all, S_hist, z_hist


def scan_forward_numpy(phi_q, phi_k, values, decay, inject, S0, z0, eps, store):
    B, N, F = phi_q.shape
    dv = values.shape[2]
    out = np.empty((B, N, dv))
    u_all = np.empty((B, N))
    S = S0.copy()
    z = z0.copy()
    hist_n = N if store else 0
    S_hist = np.empty((B, hist_n, F, dv))
    z_hist = np.empty((B, hist_n, F))
    for t in range(N):
        a = decay[:, t]
        pk = inject[:, t, None] * phi_k[:, t]
        S = a[:, None, None] * S + pk[:, :, None] * values[:, t, None, :]
        z = a[:, None] * z + pk
        pq = phi_q[:, t]
        u = np.einsum("bf,bf->b", pq, z)
        num = np.einsum("bf,bfj->bj", pq, S)
        u_all[:, t] = u
        out[:, t] = num / clamp(u, eps)[:, None]
        if store:
            S_hist[:, t] = S
            z_hist[:, t] = z
    return out, S, z, u_all, S_hist, z_hist


# --------------------------------------------------------------- backward scan


def _scan_backward_loops(phi_q, phi_k, values, decay, inject, S0, z0, S_hist, z_hist,
                         u_all, out, grad_out, gS, gz, eps):
    B, N, F = phi_q.shape
    dv = values.shape[2]
    d_phi_q = np.zeros((B, N, F))
    d_phi_k = np.zeros((B, N, F))
    d_values = np.zeros((B, N, dv))
    d_decay = np.zeros((B, N))
    d_inject = np.zeros((B, N))
    A = gS.copy()
    Bz = gz.copy()
    dn = np.empty(dv)
    Av = np.empty(F)
    for b in range(B):
        for t in range(N - 1, -1, -1):
            u = u_all[b, t]
            active = u > eps or u < -eps
            den = u if active else (eps if u >= 0.0 else -eps)
            gh = 0.0
            for j in range(dv):
                dn[j] = grad_out[b, t, j] / den
                gh += grad_out[b, t, j] * out[b, t, j]
            du = -gh / den if active else 0.0
            for f in range(F):
                pq = phi_q[b, t, f]
                acc = z_hist[b, t, f] * du
                for j in range(dv):
                    acc += S_hist[b, t, f, j] * dn[j]
                    A[b, f, j] += pq * dn[j]
                d_phi_q[b, t, f] = acc
                Bz[b, f] += pq * du
            a = decay[b, t]
            c = inject[b, t]
            da = 0.0
            dc = 0.0
            for f in range(F):
                s = 0.0
                for j in range(dv):
                    s += A[b, f, j] * values[b, t, j]
                Av[f] = s
                pk = phi_k[b, t, f]
                d_phi_k[b, t, f] = c * (s + Bz[b, f])
                dc += pk * (s + Bz[b, f])
                if t > 0:
                    zp = z_hist[b, t - 1, f]
                else:
                    zp = z0[b, f]
                da += Bz[b, f] * zp
                for j in range(dv):
                    if t > 0:
                        sp = S_hist[b, t - 1, f, j]
                    else:
                        sp = S0[b, f, j]
                    da += A[b, f, j] * sp
            for j in range(dv):
                s = 0.0
                for f in range(F):
                    s += A[b, f, j] * phi_k[b, t, f]
                d_values[b, t, j] = c * s
            d_decay[b, t] = da
            d_inject[b, t] = dc
            for f in range(F):
                Bz[b, f] *= a
                for j in range(dv):
                    A[b, f, j] *= a
    return d_phi_q, d_phi_k, d_values, d_decay, d_inject, A, Bz


def scan_backward_numpy(phi_q, phi_k, values, decay, inject, S0, z0, S_hist, z_hist,
                        u_all, out, grad_out, gS, gz, eps):
    B, N, F = phi_q.shape
    d_phi_q = np.zeros((B, N, F))
    d_phi_k = np.zeros((B, N, F))
    d_values = np.zeros_like(values)
    d_decay = np.zeros((B, N))
    d_inject = np.zeros((B, N))
    A = gS.copy()
    Bz = gz.copy()
    for t in range(N - 1, -1, -1):
        u = u_all[:, t]
        active = np.abs(u) > eps
        den = clamp(u, eps)
        g = grad_out[:, t]
        dn = g / den[:, None]
        du = np.where(active, -np.einsum("bj,bj->b", g, out[:, t]) / den, 0.0)
        pq = phi_q[:, t]
        d_phi_q[:, t] = np.einsum("bfj,bj->bf", S_hist[:, t], dn) + z_hist[:, t] * du[:, None]
        A += pq[:, :, None] * dn[:, None, :]
        Bz += pq * du[:, None]
        c = inject[:, t]
        pk = phi_k[:, t]
        v = values[:, t]
        Av = np.einsum("bfj,bj->bf", A, v)
        d_phi_k[:, t] = c[:, None] * (Av + Bz)
        d_values[:, t] = c[:, None] * np.einsum("bfj,bf->bj", A, pk)
        d_inject[:, t] = np.einsum("bf,bf->b", pk, Av + Bz)
        S_prev = S_hist[:, t - 1] if t > 0 else S0
        z_prev = z_hist[:, t - 1] if t > 0 else z0
        d_decay[:, t] = np.einsum("bfj,bfj->b", A, S_prev) + np.einsum("bf,bf->b", Bz, z_prev)
        a = decay[:, t]
        A *= a[:, None, None]
        Bz *= a[:, None]
    return d_phi_q, d_phi_k, d_values, d_decay, d_inject, A, Bz


# ---------------------------------------------------------------- decode steps


def _rfa_decode_step_loops(x, Wq, Wk, Wv, Wf, gaussian, S, z, eps, q, k, v, pq, pk, h):
    """One greedy decode step of causal RFA, updating ``S``/``z`` in place."""
    B, d = x.shape
    D = Wf.shape[0]
    scale = 1.0 / np.sqrt(D)
    F = pq.shape[1]
    for b in range(B):
        nq = 0.0
        nk = 0.0
        for i in range(d):
            sq = 0.0
            sk = 0.0
            sv = 0.0
            for j in range(d):
                xj = x[b, j]
                sq += xj * Wq[j, i]
                sk += xj * Wk[j, i]
                sv += xj * Wv[j, i]
            q[b, i] = sq
            k[b, i] = sk
            v[b, i] = sv
            nq += sq * sq
            nk += sk * sk
        nq = np.sqrt(nq)
        nk = np.sqrt(nk)
        for r in range(D):
            aq = 0.0
            ak = 0.0
            for i in range(d):
                aq += Wf[r, i] * q[b, i]
                ak += Wf[r, i] * k[b, i]
            aq /= nq
            ak /= nk
            if gaussian:
                pq[b, r] = np.sin(aq) * scale
                pq[b, r + D] = np.cos(aq) * scale
                pk[b, r] = np.sin(ak) * scale
                pk[b, r + D] = np.cos(ak) * scale
            else:
                pq[b, r] = max(aq, 0.0) * scale
                pk[b, r] = max(ak, 0.0) * scale
        u = 0.0
        for i in range(d):
            h[b, i] = 0.0
        for f in range(F):
            z[b, f] += pk[b, f]
            u += pq[b, f] * z[b, f]
            for i in range(d):
                S[b, f, i] += pk[b, f] * v[b, i]
                h[b, i] += pq[b, f] * S[b, f, i]
        den = u if (u > eps or u < -eps) else (eps if u >= 0.0 else -eps)
        for i in range(d):
            h[b, i] /= den


def _rfa_cross_read_loops(x, Wq, Wf, gaussian, Sc, zc, eps, q, pq, h):
    """Cross-attention readout against a precomputed source state; adds into ``h``."""
    B, d = x.shape
    D = Wf.shape[0]
    scale = 1.0 / np.sqrt(D)
    F = pq.shape[1]
    for b in range(B):
        nq = 0.0
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += x[b, j] * Wq[j, i]
            q[b, i] = s
            nq += s * s
        nq = np.sqrt(nq)
        for r in range(D):
            a = 0.0
            for i in range(d):
                a += Wf[r, i] * q[b, i]
            a /= nq
            if gaussian:
                pq[b, r] = np.sin(a) * scale
                pq[b, r + D] = np.cos(a) * scale
            else:
                pq[b, r] = max(a, 0.0) * scale
        u = 0.0
        for f in range(F):
            u += pq[b, f] * zc[b, f]
        den = u if (u > eps or u < -eps) else (eps if u >= 0.0 else -eps)
        for i in range(d):
            s = 0.0
            for f in range(F):
                s += pq[b, f] * Sc[b, f, i]
            h[b, i] += s / den


def _softmax_decode_step_loops(x, Wq, Wk, Wv, Kc, Vc, t, inv_tau, q, h, w):
    """One greedy decode step of softmax attention with a key/value cache.

    Writes this step's key/value at cache row ``t`` and attends over rows 0..t.
    """
    B, d = x.shape
    for b in range(B):
        nq = 0.0
        nk = 0.0
        for i in range(d):
            sq = 0.0
            sk = 0.0
            sv = 0.0
            for j in range(d):
                xj = x[b, j]
                sq += xj * Wq[j, i]
                sk += xj * Wk[j, i]
                sv += xj * Wv[j, i]
            q[b, i] = sq
            Kc[b, t, i] = sk
            Vc[b, t, i] = sv
            nq += sq * sq
            nk += sk * sk
        nq = np.sqrt(nq)
        nk = np.sqrt(nk)
        for i in range(d):
            q[b, i] /= nq
            Kc[b, t, i] /= nk
        mx = -np.inf
        for s in range(t + 1):
            l = 0.0
            for i in range(d):
                l += q[b, i] * Kc[b, s, i]
            l *= inv_tau
            w[s] = l
            if l > mx:
                mx = l
        tot = 0.0
        for s in range(t + 1):
            e = np.exp(w[s] - mx)
            w[s] = e
            tot += e
        for i in range(d):
            h[b, i] = 0.0
        for s in range(t + 1):
            p = w[s] / tot
            for i in range(d):
                h[b, i] += p * Vc[b, s, i]


def _softmax_cross_read_loops(x, Wq, Ks, Vs, inv_tau, q, h, w):
    """Softmax cross attention over cached (normalised) source keys; adds into ``h``."""
    B, d = x.shape
    M = Ks.shape[1]
    for b in range(B):
        nq = 0.0
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += x[b, j] * Wq[j, i]
            q[b, i] = s
            nq += s * s
        nq = np.sqrt(nq)
        mx = -np.inf
        for s in range(M):
            l = 0.0
            for i in range(d):
                l += q[b, i] * Ks[b, s, i]
            l *= inv_tau / nq
            w[s] = l
            if l > mx:
                mx = l
        tot = 0.0
        for s in range(M):
            e = np.exp(w[s] - mx)
            w[s] = e
            tot += e
        for s in range(M):
            p = w[s] / tot
            for i in range(d):
                h[b, i] += p * Vs[b, s, i]


def _greedy_head_loops(h, Wo, E, x, tokens):
    """Argmax over ``h @ Wo`` and load the chosen token's embedding into ``x``."""
    B, d = h.shape
    V = Wo.shape[1]
    for b in range(B):
        best = -np.inf
        arg = 0
        for c in range(V):
            s = 0.0
            for i in range(d):
                s += h[b, i] * Wo[i, c]
            if s > best:
                best = s
                arg = c
        tokens[b] = arg
        for i in range(d):
            x[b, i] = E[arg, i]


def _l2n(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def rfa_decode_step_numpy(x, Wq, Wk, Wv, Wf, gaussian, S, z, eps, q, k, v, pq, pk, h):
    D = Wf.shape[0]
    qq = _l2n(x @ Wq)
    kk = _l2n(x @ Wk)
    vv = x @ Wv
    aq = qq @ Wf.T
    ak = kk @ Wf.T
    if gaussian:
        fq = np.concatenate([np.sin(aq), np.cos(aq)], axis=1) / np.sqrt(D)
        fk = np.concatenate([np.sin(ak), np.cos(ak)], axis=1) / np.sqrt(D)
    else:
        fq = np.maximum(aq, 0.0) / np.sqrt(D)
        fk = np.maximum(ak, 0.0) / np.sqrt(D)
    z += fk
    S += fk[:, :, None] * vv[:, None, :]
    u = np.einsum("bf,bf->b", fq, z)
    h[:] = np.einsum("bf,bfi->bi", fq, S) / clamp(u, eps)[:, None]


def rfa_cross_read_numpy(x, Wq, Wf, gaussian, Sc, zc, eps, q, pq, h):
    D = Wf.shape[0]
    a = _l2n(x @ Wq) @ Wf.T
    if gaussian:
        fq = np.concatenate([np.sin(a), np.cos(a)], axis=1) / np.sqrt(D)
    else:
        fq = np.maximum(a, 0.0) / np.sqrt(D)
    u = np.einsum("bf,bf->b", fq, zc)
    h += np.einsum("bf,bfi->bi", fq, Sc) / clamp(u, eps)[:, None]


def softmax_decode_step_numpy(x, Wq, Wk, Wv, Kc, Vc, t, inv_tau, q, h, w):
    qq = _l2n(x @ Wq)
    Kc[:, t] = _l2n(x @ Wk)
    Vc[:, t] = x @ Wv
    logits = np.einsum("bi,bsi->bs", qq, Kc[:, : t + 1]) * inv_tau
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    h[:] = np.einsum("bs,bsi->bi", p, Vc[:, : t + 1])


def softmax_cross_read_numpy(x, Wq, Ks, Vs, inv_tau, q, h, w):
    qq = _l2n(x @ Wq)
    logits = np.einsum("bi,bsi->bs", qq, Ks) * inv_tau
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    h += np.einsum("bs,bsi->bi", p, Vs)


def greedy_head_numpy(h, Wo, E, x, tokens):
    tokens[:] = np.argmax(h @ Wo, axis=1)
    x[:] = E[tokens]


scan_forward_numba = njit(_scan_forward_loops)
scan_backward_numba = njit(_scan_backward_loops)
rfa_decode_step_numba = njit(_rfa_decode_step_loops)
rfa_cross_read_numba = njit(_rfa_cross_read_loops)
softmax_decode_step_numba = njit(_softmax_decode_step_loops)
softmax_cross_read_numba = njit(_softmax_cross_read_loops)
greedy_head_numba = njit(_greedy_head_loops)

NUMPY_BACKEND = {
    "scan_forward": scan_forward_numpy,
    "scan_backward": scan_backward_numpy,
    "rfa_decode_step": rfa_decode_step_numpy,
    "rfa_cross_read": rfa_cross_read_numpy,
    "softmax_decode_step": softmax_decode_step_numpy,
    "softmax_cross_read": softmax_cross_read_numpy,
    "greedy_head": greedy_head_numpy,
}

if NUMBA_AVAILABLE:
    NUMBA_BACKEND = {
        "scan_forward": scan_forward_numba,
        "scan_backward": scan_backward_numba,
        "rfa_decode_step": rfa_decode_step_numba,
        "rfa_cross_read": rfa_cross_read_numba,
        "softmax_decode_step": softmax_decode_step_numba,
        "softmax_cross_read": softmax_cross_read_numba,
        "greedy_head": greedy_head_numba,
    }
    ACTIVE = NUMBA_BACKEND
else:
    NUMBA_BACKEND = None
    ACTIVE = NUMPY_BACKEND


def get_backend(name=None):
    """Kernel table for ``"numba"``, ``"numpy"``, or the active default (``None``)."""
    if name is None:
        return ACTIVE
    if name == "numpy":
        return NUMPY_BACKEND
    if name == "numba":
        if NUMBA_BACKEND is None:
            raise RuntimeError("numba backend requested but numba is unavailable or disabled")
        return NUMBA_BACKEND
    raise ValueError(f"unknown backend {name!r}")


def scan_forward(phi_q, phi_k, values, decay, inject, S0, z0, eps, store=False):
    return ACTIVE["scan_forward"](
        np.ascontiguousarray(phi_q), np.ascontiguousarray(phi_k), np.ascontiguousarray(values),
        np.ascontiguousarray(decay), np.ascontiguousarray(inject),
        np.ascontiguousarray(S0), np.ascontiguousarray(z0), float(eps), bool(store),
    )


def scan_backward(phi_q, phi_k, values, decay, inject, S0, z0, S_hist, z_hist, u_all, out,
                  grad_out, gS, gz, eps):
    c = np.ascontiguousarray
    return ACTIVE["scan_backward"](
        c(phi_q), c(phi_k), c(values), c(decay), c(inject), c(S0), c(z0), c(S_hist), c(z_hist),
        c(u_all), c(out), c(grad_out), c(gS), c(gz), float(eps),
    )

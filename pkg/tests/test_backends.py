import os
import subprocess
import sys

import numpy as np
import pytest

from rfa import _accel, _kernels
from rfa.bench import DecodeConfig, _Decoder

needs_numba = pytest.mark.skipif(_kernels.NUMBA_BACKEND is None, reason="numba unavailable")


def scan_inputs(seed=0, B=3, N=7, F=10, dv=4):
    rng = np.random.default_rng(seed)
    pq = np.abs(rng.normal(size=(B, N, F)))
    pk = np.abs(rng.normal(size=(B, N, F)))
    v = rng.normal(size=(B, N, dv))
    a = rng.uniform(0.2, 0.9, size=(B, N))
    S0 = rng.normal(size=(B, F, dv))
    z0 = np.abs(rng.normal(size=(B, F)))
    up = rng.normal(size=(B, N, dv))
    return pq, pk, v, a, 1.0 - a, S0, z0, up


def run(backend, inputs):
    pq, pk, v, a, b, S0, z0, up = inputs
    k = _kernels.get_backend(backend)
    fwd = k["scan_forward"](pq, pk, v, a, b, S0, z0, 1e-6, True)
    out, S, z, u, S_hist, z_hist = fwd
    bwd = k["scan_backward"](pq, pk, v, a, b, S0, z0, S_hist, z_hist, u, out, up,
                             np.ones_like(S), np.ones_like(z), 1e-6)
    return fwd, bwd


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_scan_parity(seed):
    inputs = scan_inputs(seed)
    for x, y in zip(sum(run("numpy", inputs), ()), sum(run("numba", inputs), ())):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-12)


@needs_numba
@pytest.mark.parametrize("kind", ["softmax", "rfa-gaussian", "rfa-arccos"])
@pytest.mark.parametrize("mode", ["conditional", "unconditional"])
def test_decode_parity(kind, mode):
    cfg = DecodeConfig(d=8, D=8)
    outs = []
    for backend in ("numpy", "numba"):
        dec = _Decoder(kind, mode, 20, 2, cfg, _kernels.get_backend(backend))
        outs.append(dec.run()[2])
    assert np.array_equal(outs[0], outs[1])


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.get_backend("cuda")


def test_disable_flag_selects_numpy():
    env = dict(os.environ, RFA_DISABLE_NUMBA="1")
    code = "from rfa import _accel, _kernels; print(_accel.backend_name(), _kernels.ACTIVE is _kernels.NUMPY_BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]


def test_active_backend_name():
    assert _accel.backend_name() in ("numba", "numpy")

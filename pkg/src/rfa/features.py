"""Random feature maps for approximating exp(x . y).

Three kinds are supported:

``gaussian``
    Random Fourier features ``sqrt(1/D) [sin(Wx), cos(Wx)]`` (all sines first,
    then all cosines). Output size ``2D``.
``arccos``
    ``sqrt(1/D) ReLU(Wx)``, the order-1 arc-cosine kernel features. Output size ``D``.
``elu``
    Deterministic ``elu(x) + 1`` applied to the raw input. Output size ``d``.

Projection rows are ``w_i = sigma * w~_i`` with ``w~_i`` standard normal and
``sigma`` a per-dimension scale. For isotropic ``sigma = s`` the gaussian map
estimates ``exp(-s^2 |x - y|^2 / 2)``; to target a softmax temperature ``tau``
use ``s = 1 / sqrt(tau)`` (see :func:`sigma_for_temperature`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParameterError, UnsupportedKindError
from .numerics import RngState, derive_seed, seeded_normal_matrix

KINDS = ("gaussian", "arccos", "elu")
DEFAULT_POOL_SIZE = 200


@dataclass(frozen=True)
class FeatureMapSpec:
    kind: str
    d: int
    D: int = 64
    sigma: float | tuple[float, ...] = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown feature map kind {self.kind!r}")
        if self.d < 1:
            raise ParameterError(f"input dimension d must be >= 1, got {self.d}")
        if self.kind != "elu" and self.D < 1:
            raise ParameterError(f"number of random vectors D must be >= 1, got {self.D}")
        if not np.isscalar(self.sigma):
            object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        sig = np.asarray(self.sigma, dtype=np.float64)
        if sig.ndim == 1 and sig.size != self.d:
            raise ParameterError(f"sigma has {sig.size} entries, expected {self.d}")
        if not np.all(np.isfinite(sig)) or np.any(sig <= 0):
            raise ParameterError("every sigma entry must be positive and finite")

    @property
    def sigma_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (self.d,)).copy()

    @property
    def output_dim(self) -> int:
        return {"gaussian": 2 * self.D, "arccos": self.D, "elu": self.d}[self.kind]


@dataclass(frozen=True, eq=False)
class RealizedFeatureMap:
    """A feature map with its random projection drawn.

    ``raw`` holds the standard-normal draws (``D x d``); the projection actually
    used is ``W = raw * sigma`` (row-wise elementwise scaling).
    """

    spec: FeatureMapSpec
    raw: np.ndarray
    sigma: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sigma is None:
            object.__setattr__(self, "sigma", self.spec.sigma_vector)

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    @property
    def W(self) -> np.ndarray:
        return self.raw * self.sigma

    def with_sigma(self, sigma) -> "RealizedFeatureMap":
        """Same random draws, new scale (used when sigma is trained)."""
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (self.d,)).copy()
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise ParameterError("every sigma entry must be positive and finite")
        return RealizedFeatureMap(self.spec, self.raw, sigma)

    def __call__(self, x) -> np.ndarray:
        return apply_map(self, x)


@dataclass(frozen=True, eq=False)
class FeatureMapPool:
    maps: tuple[RealizedFeatureMap, ...]

    @property
    def P(self) -> int:
        return len(self.maps)

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i) -> RealizedFeatureMap:
        return self.maps[i]

    def draw(self, step: int) -> RealizedFeatureMap:
        """Map used at training step ``step`` (round robin through the pool)."""
        return self.maps[step % len(self.maps)]


def sigma_for_temperature(temperature: float) -> float:
    """Isotropic projection scale whose gaussian map targets ``exp(q.k / temperature)``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return float(1.0 / np.sqrt(temperature))


def build_feature_map(spec: FeatureMapSpec) -> RealizedFeatureMap:
    if spec.kind == "elu":
        raw = np.zeros((0, spec.d))
    else:
        raw, _ = seeded_normal_matrix(RngState(spec.seed), spec.D, spec.d)
    return RealizedFeatureMap(spec, raw)


def build_pool(spec: FeatureMapSpec, P: int = DEFAULT_POOL_SIZE) -> FeatureMapPool:
    if P < 1:
        raise ParameterError(f"pool size must be >= 1, got {P}")
    maps = tuple(build_feature_map(replace(spec, seed=derive_seed(spec.seed, i))) for i in range(P))
    return FeatureMapPool(maps)


def _check_input(fmap: RealizedFeatureMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != fmap.d:
        raise ParameterError(f"input last dimension {x.shape[-1:] or '()'} does not match map d={fmap.d}")
    return x


def preactivation(fmap: RealizedFeatureMap, x: np.ndarray) -> np.ndarray:
    """``W x`` for random maps; ``x`` itself for elu."""
    if fmap.kind == "elu":
        return x
    return x @ fmap.W.T


def features_from_preactivation(kind: str, a: np.ndarray, D: int) -> np.ndarray:
    if kind == "gaussian":
        return np.concatenate([np.sin(a), np.cos(a)], axis=-1) * np.sqrt(1.0 / D)
    if kind == "arccos":
        return np.maximum(a, 0.0) * np.sqrt(1.0 / D)
    # elu(x) + 1, written so that no branch overflows
    return np.where(a > 0, a + 1.0, np.exp(np.minimum(a, 0.0)))


def apply_map(fmap: RealizedFeatureMap, x) -> np.ndarray:
    """Feature vector(s) for ``x`` of shape ``(..., d)``."""
    x = _check_input(fmap, x)
    return features_from_preactivation(fmap.kind, preactivation(fmap, x), fmap.spec.D)


def kernel_estimate(fmap: RealizedFeatureMap, x, y) -> float:
    """``phi(x) . phi(y)``; unbiased for the gaussian kernel over draws of W."""
    if fmap.kind == "elu":
        raise UnsupportedKindError("elu+1 is a deterministic map, not a random-feature estimator")
    x = _check_input(fmap, x)
    y = _check_input(fmap, y)
    if x.ndim != 1 or y.ndim != 1:
        raise ParameterError("kernel_estimate takes single vectors")
    return float(apply_map(fmap, x) @ apply_map(fmap, y))


def gaussian_kernel(x, y, sigma=1.0) -> np.ndarray:
    """Exact ``exp(-|sigma * (x - y)|^2 / 2)``, the target of the gaussian map."""
    diff = (np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) * sigma
    return np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def rff_variance(z: float, D: int) -> float:
    """Variance of the D-feature gaussian estimate at scaled distance ``z``.

    ``z = |x - y| * sigma`` for isotropic scale sigma.
    """
    if z < 0:
        raise ParameterError(f"z must be nonnegative, got {z}")
    if D < 1:
        raise ParameterError(f"D must be >= 1, got {D}")
    return (1.0 - np.exp(-z * z)) ** 2 / (2.0 * D)


def monte_carlo_estimates(spec: FeatureMapSpec, x, y, n_maps: int, chunk: int = 20000) -> np.ndarray:
    """Kernel estimates ``phi(x) . phi(y)`` from ``n_maps`` independent maps.

    Each map's raw projection is a consecutive ``D``-row block of seeded draws;
    the estimate for that block is what :func:`kernel_estimate` returns for a
    :class:`RealizedFeatureMap` holding the same rows.
    """
    if spec.kind == "elu":
        raise UnsupportedKindError("elu+1 is not a random-feature estimator")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sigma = spec.sigma_vector
    out = np.empty(n_maps)
    rng = RngState(spec.seed)
    for start in range(0, n_maps, chunk):
        m = min(chunk, n_maps - start)
        raw, rng = seeded_normal_matrix(rng, m * spec.D, spec.d)
        W = raw * sigma
        a = (W @ x).reshape(m, spec.D)
        b = (W @ y).reshape(m, spec.D)
        if spec.kind == "gaussian":
            prods = np.sin(a) * np.sin(b) + np.cos(a) * np.cos(b)
        else:
            prods = np.maximum(a, 0.0) * np.maximum(b, 0.0)
        out[start:start + m] = prods.sum(axis=1) / spec.D
    return out

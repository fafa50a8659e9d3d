"""Exact GP linear algebra: marginal likelihood, gradients and posteriors.

Component posteriors follow from the additive structure ``K = sum_c K_c``:
each component shares the weight vector ``alpha = (K + s2 I)^-1 y`` with
the total, so component means add up exactly to the total mean.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular

from .exceptions import DegenerateDecompositionError, NumericalError
from .kernels import COMPONENTS, AddIntParams, KernelKind, cross_gram, gram, kernel_diag

__all__ = [
    "GpPosterior",
    "ComponentCurve",
    "jittered_cholesky",
    "log_marginal_likelihood",
    "lml_gradient",
    "fit_posterior",
    "posterior_predictive",
    "component_posterior",
    "variance_fractions",
    "Decomposition",
    "decompose",
]

logger = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_MAX = 1e-4
_LOG2PI = math.log(2.0 * math.pi)


def jittered_cholesky(A, feature=None):
    """Lower Cholesky factor of ``A``, adding diagonal jitter if needed.

    Jitter starts at ``1e-8 * mean(diag)`` and grows tenfold up to
    ``1e-4 * mean(diag)``.  Returns ``(L, jitter)``.
    """
    A = np.asarray(A, dtype=float)
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info == 0:
        return L, 0.0
    scale = float(np.mean(np.diag(A)))
    if not (scale > 0 and math.isfinite(scale)):
        scale = 1.0
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        L, info = lapack.dpotrf(A + jitter * np.eye(A.shape[0]), lower=1, clean=1)
        if info == 0:
            logger.debug("cholesky needed jitter %.3g", jitter)
            return L, jitter
        jitter *= 10.0
    where = f" for feature {feature}" if feature is not None else ""
    raise NumericalError(f"Cholesky factorization failed{where} after jitter escalation")


def _noisy(K, noise):
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K must be a square matrix")
    if not noise > 0:
        raise ValueError(f"noise variance must be positive, got {noise}")
    return K + noise * np.eye(K.shape[0])


def log_marginal_likelihood(y, K, noise, feature=None) -> float:
    """``log N(y | 0, K + noise I)``."""
    y = np.asarray(y, dtype=float).ravel()
    Kn = _noisy(K, noise)
    if y.size != Kn.shape[0]:
        raise ValueError(f"y has length {y.size}, K is {Kn.shape[0]}x{Kn.shape[0]}")
    L, _ = jittered_cholesky(Kn, feature)
    a = solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * y.size * _LOG2PI)


def lml_gradient(y, K, noise, dK_list, feature=None) -> np.ndarray:
    """Gradient of :func:`log_marginal_likelihood` for each ``dK`` in ``dK_list``.

    Uses ``0.5 * tr((alpha alpha^T - Kn^-1) dK)``.
    """
    y = np.asarray(y, dtype=float).ravel()
    Kn = _noisy(K, noise)
    L, _ = jittered_cholesky(Kn, feature)
    alpha = cho_solve((L, True), y)
    Kinv = cho_solve((L, True), np.eye(y.size))
    W = 0.5 * (np.outer(alpha, alpha) - Kinv)
    return np.array([float(np.sum(W * np.asarray(dK))) for dK in dK_list])


@dataclass(frozen=True)
class GpPosterior:
    alpha: np.ndarray
    chol: np.ndarray
    train_inputs: np.ndarray
    noise_variance: float
    params: object = None
    kind: KernelKind = KernelKind.ADD_INT


@dataclass
class ComponentCurve:
    grid: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    component: str
    n_clamped: int = 0


def fit_posterior(train_inputs, y, p, kind=KernelKind.ADD_INT, noise=1e-2, feature=None) -> GpPosterior:
    """Condition a zero-mean GP with kernel ``(p, kind)`` on ``(train_inputs, y)``."""
    X = np.atleast_2d(np.asarray(train_inputs, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    K = gram(X, p, kind)
    L, _ = jittered_cholesky(_noisy(K, noise), feature)
    alpha = cho_solve((L, True), y)
    return GpPosterior(alpha, L, X, float(noise), p, KernelKind(kind))


def _clamp(var):
    n = int(np.sum(var < 0))
    if n > 0.01 * var.size:
        warnings.warn(
            f"{n} of {var.size} predictive variances were negative and clamped to 0",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.maximum(var, 0.0), n


def _as_test(post, test):
    T = np.atleast_2d(np.asarray(test, dtype=float))
    if T.shape[1] != post.train_inputs.shape[1]:
        raise ValueError(
            f"test inputs have dimension {T.shape[1]}, training inputs {post.train_inputs.shape[1]}"
        )
    return T


def posterior_predictive(post: GpPosterior, test, p=None, kind=None):
    """Predictive mean and variance (including observation noise) at ``test``."""
    p = post.params if p is None else p
    kind = post.kind if kind is None else KernelKind(kind)
    T = _as_test(post, test)
    Ks = cross_gram(post.train_inputs, T, p, kind)
    mean = Ks.T @ post.alpha
    v = solve_triangular(post.chol, Ks, lower=True)
    var = kernel_diag(T, p, kind) - np.sum(v * v, axis=0) + post.noise_variance
    var, _ = _clamp(var)
    return mean, var


def component_posterior(post: GpPosterior, test, p: AddIntParams = None, component="z") -> ComponentCurve:
    """Posterior of one additive component (or ``"total"``) given the sum.

    The variance is that of the latent component itself, without noise.
    """
    p = post.params if p is None else p
    if not isinstance(p, AddIntParams):
        raise ValueError("component posteriors require AddIntParams")
    T = _as_test(post, test)
    mask = None if component == "total" else component
    if mask is not None and mask not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    kind = post.kind
    Kc = cross_gram(post.train_inputs, T, p, kind, mask)
    mean = Kc.T @ post.alpha
    v = solve_triangular(post.chol, Kc, lower=True)
    var = kernel_diag(T, p, kind, mask) - np.sum(v * v, axis=0)
    var, n = _clamp(var)
    return ComponentCurve(T, mean, var, component, n)


def variance_fractions(curves) -> dict:
    """Share of grid variance carried by each non-bias component mean.

    ``curves`` maps component name to a :class:`ComponentCurve` (or a plain
    array of means) on a common tensor grid.  The bias component is constant
    and therefore never contributes; it is reported separately as an offset.
    """
    means = {}
    for name, c in curves.items():
        if name in ("bias", "total"):
            continue
        means[name] = np.asarray(c.mean if isinstance(c, ComponentCurve) else c, dtype=float)
    sizes = {m.size for m in means.values()}
    if len(sizes) > 1:
        raise ValueError("all component curves must share one grid")
    variances = {name: float(np.var(m)) for name, m in means.items()}
    total = sum(variances.values())
    if not total > 0:
        raise DegenerateDecompositionError("all component curves are identically zero")
    return {name: v / total for name, v in variances.items()}


@dataclass
class Decomposition:
    """Component curves of one feature on a tensor grid over the domain.

    ``curves["z"]`` and ``curves["x"]`` are marginals of length ``n``;
    ``curves["zx"]`` and ``curves["total"]`` cover the ``n * n`` grid with
    ``z`` varying slowest.  ``offset`` is the constant (bias) component.
    """

    grid_z: np.ndarray
    grid_x: np.ndarray
    curves: dict
    fractions: dict
    offset: float

    def tensor_means(self) -> dict:
        """Component means broadcast onto the full tensor grid."""
        n = self.grid_z.size
        return {
            "z": np.repeat(self.curves["z"].mean, n),
            "x": np.tile(self.curves["x"].mean, n),
            "zx": self.curves["zx"].mean,
            "total": self.curves["total"].mean,
        }


def decompose(post: GpPosterior, grid_size: int = 50) -> Decomposition:
    """Split a fitted feature into bias, z, x and zx parts (one latent, one covariate)."""
    p = post.params
    if not isinstance(p, AddIntParams) or p.Q != 1 or p.C != 1:
        raise ValueError("decomposition needs AddIntParams with one latent and one covariate")
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    g = np.linspace(p.domain.lower, p.domain.upper, grid_size)
    zeros = np.zeros_like(g)
    zz, xx = np.meshgrid(g, g, indexing="ij")
    tensor = np.column_stack([zz.ravel(), xx.ravel()])
    curves = {
        "z": component_posterior(post, np.column_stack([g, zeros]), p, "z"),
        "x": component_posterior(post, np.column_stack([zeros, g]), p, "x"),
        "zx": component_posterior(post, tensor, p, "zx"),
        "total": component_posterior(post, tensor, p, "total"),
    }
    offset = float(component_posterior(post, np.zeros((1, 2)), p, "bias").mean[0])
    out = Decomposition(g, g.copy(), curves, {}, offset)
    means = out.tensor_means()
    out.fractions = variance_fractions({c: means[c] for c in ("z", "x", "zx")})
    return out

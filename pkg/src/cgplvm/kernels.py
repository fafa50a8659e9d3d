"""Squared exponential, additive, interaction and mean-zero ADD+INT kernels.

All kernels operate on joint inputs ``p = (z, x)`` stored as rows of an array
whose first ``Q`` columns are latent coordinates and whose remaining ``C``
columns are covariates.  The mean-zero kernel is the squared exponential
kernel conditioned on the sample path integrating to zero over an interval
``[a, b]``::

    k0(x, y) = k(x, y) - I(x) I(y) / D
    I(x)     = int_a^b k(x, t) dt
    D        = int_a^b int_a^b k(t, s) dt ds

Both integrals are available in closed form through the error function.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.special import erf, erfc

from .exceptions import DegenerateLengthscaleError

__all__ = [
    "COMPONENTS",
    "SeArdParams",
    "IntegrationDomain",
    "AddIntParams",
    "KernelKind",
    "GramGradients",
    "se_ard",
    "se_single_integral",
    "se_double_integral",
    "mean_zero_se",
    "add_int_kernel",
    "gram",
    "cross_gram",
    "gram_gradients",
    "input_derivative",
    "default_mask",
]

COMPONENTS = ("bias", "z", "x", "zx")

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_SQRT_HALF_PI = math.sqrt(0.5 * math.pi)
_UNDERFLOW = 1e-300


class KernelKind(str, enum.Enum):
    SE_ARD = "se_ard"
    ADD = "add"
    INT = "int"
    ADD_INT = "add_int"


_DEFAULT_MASKS = {
    KernelKind.ADD: frozenset({"z", "x"}),
    KernelKind.INT: frozenset({"zx"}),
    KernelKind.ADD_INT: frozenset(COMPONENTS),
}


def default_mask(kind: KernelKind) -> frozenset:
    """Components that make up the full kernel of the given kind."""
    return _DEFAULT_MASKS[KernelKind(kind)]


@dataclass(frozen=True)
class SeArdParams:
    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if ls.ndim != 1 or ls.size == 0 or not np.all(ls > 0):
            raise ValueError(f"lengthscales must be a non-empty positive vector, got {ls}")


@dataclass(frozen=True)
class IntegrationDomain:
    lower: float = -3.0
    upper: float = 3.0

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("integration domain bounds must be finite")
        if not self.lower < self.upper:
            raise ValueError(
                f"integration domain requires lower < upper, got [{self.lower}, {self.upper}]"
            )

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class AddIntParams:
    bias_variance: float
    z_variance: float
    x_variance: float
    zx_variance: float
    z_lengthscales: np.ndarray
    x_lengthscales: np.ndarray
    domain: IntegrationDomain = field(default_factory=IntegrationDomain)

    def __post_init__(self):
        for name in ("z_lengthscales", "x_lengthscales"):
            ls = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if ls.ndim != 1 or ls.size == 0 or not np.all(ls > 0):
                raise ValueError(f"{name} must be a non-empty positive vector, got {ls}")
            object.__setattr__(self, name, ls)
        for c in COMPONENTS:
            v = self.variance(c)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{c} variance must be finite and >= 0, got {v}")

    @property
    def Q(self) -> int:
        return self.z_lengthscales.size

    @property
    def C(self) -> int:
        return self.x_lengthscales.size

    def variance(self, component: str) -> float:
        return getattr(self, f"{component}_variance")


@dataclass
class GramGradients:
    """Derivatives of a Gram matrix.

    ``params`` maps parameter names to ``dK/dtheta``.  ``inputs[d, i, j]`` is
    the partial derivative of ``k(p_i, p_j)`` with respect to coordinate ``d``
    of its *first* argument; use :func:`input_derivative` to expand it into
    the full ``dK/dp_{i,d}`` matrix.
    """

    params: dict
    inputs: np.ndarray


# ---------------------------------------------------------------------------
# one-dimensional closed forms


def _check_interval(lower, upper):
    if not lower < upper:
        raise ValueError(f"integration interval requires a < b, got [{lower}, {upper}]")


def _erf_diff(u, v):
    """erf(u) - erf(v) without cancellation in the tails."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    pos = (u >= 0) & (v >= 0)
    neg = (u <= 0) & (v <= 0)
    out = erf(u) - erf(v)
    out = np.where(pos, erfc(v) - erfc(u), out)
    out = np.where(neg, erfc(-u) - erfc(-v), out)
    return out


def _single_integral(x, lower, upper, lengthscale):
    s = _SQRT2 * lengthscale
    return _SQRT_HALF_PI * lengthscale * _erf_diff((upper - x) / s, (lower - x) / s)


def _expm1_gauss(w, l):
    """``exp(-w^2 / (2 l^2)) - 1`` without overflow for tiny ``l``."""
    r = w / l
    return -1.0 if r > 1e150 else math.expm1(-0.5 * r * r)


def _double_integral(lower, upper, lengthscale):
    w = upper - lower
    l = lengthscale
    d = _SQRT2PI * l * w * erf(w / (_SQRT2 * l)) + 2.0 * l * l * _expm1_gauss(w, l)
    if not d >= _UNDERFLOW:
        raise DegenerateLengthscaleError(
            f"double integral underflowed (lengthscale={l}, interval width={w})"
        )
    return d


def se_ard(u, v, p: SeArdParams) -> float:
    """SE-ARD kernel value between two input vectors."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if not (u.shape == v.shape == p.lengthscales.shape):
        raise ValueError(
            f"dimension mismatch: {u.shape}, {v.shape} vs {p.lengthscales.shape} lengthscales"
        )
    r = (u - v) / p.lengthscales
    return float(p.variance * math.exp(-0.5 * float(r @ r)))


def _as_1d_params(p: SeArdParams) -> tuple:
    if p.lengthscales.size != 1:
        raise ValueError("expected one-dimensional kernel parameters")
    return float(p.variance), float(p.lengthscales[0])


def se_single_integral(x: float, d: IntegrationDomain, p: SeArdParams) -> float:
    """Closed form of ``int_a^b k(x, t) dt`` for a 1-D SE kernel."""
    _check_interval(d.lower, d.upper)
    var, l = _as_1d_params(p)
    return float(var * _single_integral(x, d.lower, d.upper, l))


def se_double_integral(d: IntegrationDomain, p: SeArdParams) -> float:
    """Closed form of ``int_a^b int_a^b k(t, s) dt ds`` for a 1-D SE kernel."""
    _check_interval(d.lower, d.upper)
    var, l = _as_1d_params(p)
    return float(var * _double_integral(d.lower, d.upper, l))


def mean_zero_se(x: float, y: float, d: IntegrationDomain, lengthscale: float) -> float:
    """Unit-variance SE kernel conditioned on a zero integral over ``d``."""
    _check_interval(d.lower, d.upper)
    if not lengthscale > 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    k = _mean_zero_1d(np.array([x], float), np.array([y], float), lengthscale, d)[0]
    return float(k[0, 0])


# ---------------------------------------------------------------------------
# vectorised blocks (unit variance)


def _se_1d(a, b, l, grad):
    diff = np.subtract.outer(a, b)
    diff /= l
    sq = diff * diff
    k = np.exp(-0.5 * sq)
    if not grad:
        return k, None, None
    sq *= k
    sq /= l
    diff *= k
    diff /= -l
    return k, sq, diff


def _integral_grads(x, lo, hi, l):
    e_lo = np.exp(-0.5 * ((x - lo) / l) ** 2)
    e_hi = np.exp(-0.5 * ((x - hi) / l) ** 2)
    d_dx = e_lo - e_hi
    d_dl = _single_integral(x, lo, hi, l) / l - ((hi - x) * e_hi - (lo - x) * e_lo) / l
    return d_dx, d_dl


def _mean_zero_1d(a, b, l, domain, grad=False):
    lo, hi = domain.lower, domain.upper
    k, dk_dl, dk_da = _se_1d(a, b, l, grad)
    ia = _single_integral(a, lo, hi, l)
    ib = ia if b is a else _single_integral(b, lo, hi, l)
    dd = _double_integral(lo, hi, l)
    k -= np.multiply.outer(ia / dd, ib)
    if not grad:
        return k, None, None

    ia_dx, ia_dl = _integral_grads(a, lo, hi, l)
    ib_dl = ia_dl if b is a else _integral_grads(b, lo, hi, l)[1]
    w = hi - lo
    dd_dl = _SQRT2PI * w * erf(w / (_SQRT2 * l)) + 4.0 * l * _expm1_gauss(w, l)
    # rank-2 correction to d/dl, rank-1 to d/da
    left = np.stack([ia_dl, ia], axis=1) / dd
    right = np.stack([ib, ib_dl - ib * dd_dl / dd])
    dk_dl -= left @ right
    dk_da -= np.multiply.outer(ia_dx / dd, ib)
    return k, dk_dl, dk_da


def _product_block(A, B, lengthscales, one_dim, grad):
    """Product over dimensions of 1-D unit-variance kernels.

    Returns ``(K, dK/dl[d], dK/dA[d])`` with derivative stacks of shape
    ``(D, n, m)`` (``None`` when ``grad`` is false).
    """
    D = lengthscales.size
    parts = [one_dim(A[:, d], B[:, d], lengthscales[d], grad) for d in range(D)]
    if D == 1:
        k, dl, da = parts[0]
        return (k, None, None) if not grad else (k, dl[None], da[None])
    ks = [p[0] for p in parts]
    K = ks[0].copy()
    for k in ks[1:]:
        K = K * k
    if not grad:
        return K, None, None
    dl = np.empty((D,) + K.shape)
    da = np.empty((D,) + K.shape)
    for d in range(D):
        rest = np.ones_like(K)
        for e in range(D):
            if e != d:
                rest = rest * ks[e]
        dl[d] = parts[d][1] * rest
        da[d] = parts[d][2] * rest
    return K, dl, da


def se_block(A, B, lengthscales, grad=False):
    A, B = np.asarray(A, float), np.asarray(B, float)
    return _product_block(A, B, np.asarray(lengthscales, float), _se_1d, grad)


def mean_zero_block(A, B, lengthscales, domain, grad=False):
    A, B = np.asarray(A, float), np.asarray(B, float)

    same = A is B

    def one_dim(a, b, l, g):
        return _mean_zero_1d(a, a if same else b, l, domain, g)

    return _product_block(A, B, np.asarray(lengthscales, float), one_dim, grad)


def kernel_blocks(A, B, p: AddIntParams, kind: KernelKind, grad=False):
    """Unit-variance z and x blocks for ADD, INT or ADD_INT kernels.

    ADD and INT use plain SE blocks; ADD_INT uses mean-zero blocks.
    """
    kind = KernelKind(kind)
    Q = p.Q
    Az, Ax = A[:, :Q], A[:, Q:]
    same = A is B
    Bz, Bx = (Az, Ax) if same else (B[:, :Q], B[:, Q:])
    if kind == KernelKind.ADD_INT:
        zb = mean_zero_block(Az, Bz, p.z_lengthscales, p.domain, grad)
        xb = mean_zero_block(Ax, Bx, p.x_lengthscales, p.domain, grad)
    elif kind in (KernelKind.ADD, KernelKind.INT):
        zb = se_block(Az, Bz, p.z_lengthscales, grad)
        xb = se_block(Ax, Bx, p.x_lengthscales, grad)
    else:
        raise ValueError(f"kernel kind {kind} has no z/x blocks")
    return zb, xb


# ---------------------------------------------------------------------------
# public Gram interface


def _resolve_mask(kind, mask):
    kind = KernelKind(kind)
    if kind == KernelKind.SE_ARD:
        if mask:
            raise ValueError("component masks apply only to ADD, INT and ADD_INT kernels")
        return None
    if mask is None:
        return default_mask(kind)
    mask = frozenset([mask] if isinstance(mask, str) else mask)
    if not mask:
        raise ValueError("component mask must be non-empty")
    unknown = mask - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown kernel components: {sorted(unknown)}")
    return mask


def _as_points(points, p):
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2:
        raise ValueError("points must be a 2-D array of joint inputs")
    dim = p.lengthscales.size if isinstance(p, SeArdParams) else p.Q + p.C
    if P.shape[1] != dim:
        raise ValueError(f"inputs have dimension {P.shape[1]}, kernel expects {dim}")
    return P


def _check_params(p, kind):
    kind = KernelKind(kind)
    if (kind == KernelKind.SE_ARD) != isinstance(p, SeArdParams):
        raise ValueError(f"parameters of type {type(p).__name__} do not match kernel kind {kind.value}")
    return kind


def cross_gram(A, B, p, kind: KernelKind = KernelKind.ADD_INT, mask=None) -> np.ndarray:
    """Kernel matrix ``K_ij = k(A_i, B_j)``."""
    kind = _check_params(p, kind)
    mask = _resolve_mask(kind, mask)
    A = _as_points(A, p)
    B = A if B is None else _as_points(B, p)
    if kind == KernelKind.SE_ARD:
        return p.variance * se_block(A, B, p.lengthscales)[0]
    (Kz, _, _), (Kx, _, _) = kernel_blocks(A, B, p, kind)
    K = np.zeros((A.shape[0], B.shape[0]))
    if "bias" in mask:
        K += p.bias_variance
    if "z" in mask:
        K += p.z_variance * Kz
    if "x" in mask:
        K += p.x_variance * Kx
    if "zx" in mask:
        K += p.zx_variance * Kz * Kx
    return K


def gram(points, p, kind: KernelKind = KernelKind.ADD_INT, mask=None) -> np.ndarray:
    """Symmetric Gram matrix of ``points`` (one joint input per row)."""
    A = _as_points(points, p)
    K = cross_gram(A, None, p, kind, mask)
    return 0.5 * (K + K.T)


def add_int_kernel(zx, zx2, p: AddIntParams, mask: Iterable[str] | None = None) -> float:
    """Mean-zero ADD+INT kernel between two ``(z, x)`` pairs."""
    if mask is not None and not frozenset(mask):
        raise ValueError("component mask must be non-empty")
    u = np.concatenate([np.atleast_1d(zx[0]), np.atleast_1d(zx[1])]).astype(float)
    v = np.concatenate([np.atleast_1d(zx2[0]), np.atleast_1d(zx2[1])]).astype(float)
    return float(cross_gram(u[None], v[None], p, KernelKind.ADD_INT, mask)[0, 0])


def gram_gradients(points, p, kind: KernelKind = KernelKind.ADD_INT, mask=None,
                   log_space: bool = True) -> GramGradients:
    """Derivatives of :func:`gram` with respect to parameters and inputs.

    With ``log_space`` (the default) parameter derivatives are taken with
    respect to the logarithm of each parameter.
    """
    kind = _check_params(p, kind)
    mask = _resolve_mask(kind, mask)
    A = _as_points(points, p)
    grads: dict = {}

    if kind == KernelKind.SE_ARD:
        K, dl, da = se_block(A, A, p.lengthscales, grad=True)
        scale = p.variance if log_space else 1.0
        grads["variance"] = K * scale
        for d, l in enumerate(p.lengthscales):
            grads[f"lengthscales[{d}]"] = p.variance * dl[d] * (l if log_space else 1.0)
        return GramGradients(grads, p.variance * da)

    (Kz, dz_l, dz_a), (Kx, dx_l, dx_a) = kernel_blocks(A, A, p, kind, grad=True)
    n = A.shape[0]
    comp = {"bias": np.ones((n, n)), "z": Kz, "x": Kx, "zx": Kz * Kx}
    for c in COMPONENTS:
        if c in mask:
            grads[f"{c}_variance"] = comp[c] * (p.variance(c) if log_space else 1.0)

    # coefficient of each block in the masked kernel
    wz = np.zeros((n, n))
    wx = np.zeros((n, n))
    if "z" in mask:
        wz += p.z_variance
    if "x" in mask:
        wx += p.x_variance
    if "zx" in mask:
        wz = wz + p.zx_variance * Kx
        wx = wx + p.zx_variance * Kz
    uses_z = bool({"z", "zx"} & mask)
    uses_x = bool({"x", "zx"} & mask)
    if uses_z:
        for d, l in enumerate(p.z_lengthscales):
            grads[f"z_lengthscales[{d}]"] = wz * dz_l[d] * (l if log_space else 1.0)
    if uses_x:
        for d, l in enumerate(p.x_lengthscales):
            grads[f"x_lengthscales[{d}]"] = wx * dx_l[d] * (l if log_space else 1.0)

    inputs = np.zeros((p.Q + p.C, n, n))
    inputs[: p.Q] = wz[None] * dz_a
    inputs[p.Q :] = wx[None] * dx_a
    return GramGradients(grads, inputs)


def input_derivative(partials: np.ndarray, i: int, d: int) -> np.ndarray:
    """Full ``dK/dp_{i,d}`` from first-argument partials of a symmetric kernel."""
    g = partials[d]
    n = g.shape[0]
    out = np.zeros((n, n))
    out[i, :] = g[i, :]
    out[:, i] = g[i, :]
    out[i, i] = 2.0 * g[i, i]
    return out


def component_variances(p: AddIntParams) -> Mapping[str, float]:
    return {c: p.variance(c) for c in COMPONENTS}


def kernel_diag(points, p, kind: KernelKind = KernelKind.ADD_INT, mask=None) -> np.ndarray:
    """``k(p_i, p_i)`` for every row without forming the full Gram matrix."""
    kind = _check_params(p, kind)
    mask = _resolve_mask(kind, mask)
    A = _as_points(points, p)
    n = A.shape[0]
    if kind == KernelKind.SE_ARD:
        return np.full(n, float(p.variance))

    def block_diag(cols, lengthscales):
        out = np.ones(n)
        if kind != KernelKind.ADD_INT:
            return out
        lo, hi = p.domain.lower, p.domain.upper
        for d, l in enumerate(lengthscales):
            i = _single_integral(cols[:, d], lo, hi, l)
            out = out * (1.0 - i * i / _double_integral(lo, hi, l))
        return out

    kz = block_diag(A[:, : p.Q], p.z_lengthscales)
    kx = block_diag(A[:, p.Q :], p.x_lengthscales)
    out = np.zeros(n)
    if "bias" in mask:
        out += p.bias_variance
    if "z" in mask:
        out += p.z_variance * kz
    if "x" in mask:
        out += p.x_variance * kx
    if "zx" in mask:
        out += p.zx_variance * kz * kx
    return out

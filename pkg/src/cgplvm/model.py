"""The covariate GPLVM objective.

Each feature ``j`` is an independent GP on the joint input ``(z, x)``::

    p(Y | Z, X) = prod_j N(y_j | 0, K_j + s2_j I)
    K_j = vb_j + vz_j Kz + vx_j Kx + vzx_j (Kz * Kx)

``Kz`` and ``Kx`` are unit-variance blocks whose lengthscales are shared by
all features, so they are built once per evaluation; only the four
component variances and the noise are feature specific.

Censored covariates carry a truncated-normal variational posterior in raw
(unstandardised) units and a truncated Weibull prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import lapack
from scipy.special import log_ndtr, ndtr

from .exceptions import DegenerateTruncationError, NumericalError
from .gp import jittered_cholesky
from .kernels import COMPONENTS, AddIntParams, IntegrationDomain, KernelKind, default_mask, kernel_blocks
from .truncnorm import sample_trunc_normal_grad

__all__ = [
    "Dataset",
    "LatentState",
    "CensoringPrior",
    "ModelConfig",
    "ModelParams",
    "Gradients",
    "cgplvm_nll",
    "log_priors",
    "log_prior_terms",
    "kl_standard_normal",
    "trunc_weibull_logpdf",
    "kl_q_censored",
    "elbo",
    "map_objective",
    "map_objective_and_grad",
    "variational_objective_and_grad",
]

NOISE_FLOOR = 1e-4
_LOG2PI = math.log(2.0 * math.pi)
_MIN_TRUNC_MASS = 1e-300


# ---------------------------------------------------------------------------
# data containers


@dataclass
class Dataset:
    """Standardised observations plus covariates and censoring records.

    ``Y`` and ``X`` are in model units (per-column zero mean, unit variance);
    ``raw = shift + scale * standardised``.  Censoring bounds ``lower`` and
    ``upper`` are in raw covariate units, ``nan`` where the entry is observed;
    ``upper`` may be ``inf``.  For censored entries ``X`` holds a working
    value.
    """

    Y: np.ndarray
    X: np.ndarray
    censored: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    feature_names: list
    covariate_names: list
    y_shift: np.ndarray
    y_scale: np.ndarray
    x_shift: np.ndarray
    x_scale: np.ndarray

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.Y.ndim != 2 or self.X.ndim != 2 or self.Y.shape[0] != self.X.shape[0]:
            raise ValueError("Y and X must be 2-D with the same number of rows")
        if self.N < 2:
            raise ValueError("a dataset needs at least two rows")
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("Y must not contain missing or non-finite entries")
        self.censored = np.asarray(self.censored, dtype=bool).reshape(self.X.shape)
        self.lower = np.asarray(self.lower, dtype=float).reshape(self.X.shape)
        self.upper = np.asarray(self.upper, dtype=float).reshape(self.X.shape)
        rows, cols = self.censored_entries()
        if np.any(~(self.lower[rows, cols] < self.upper[rows, cols])):
            raise ValueError("censored entries require lower < upper")

    @classmethod
    def from_raw(cls, Y, X, censored=None, lower=None, upper=None,
                 feature_names=None, covariate_names=None) -> "Dataset":
        """Standardise raw ``Y`` and ``X``; censored working values start at ``lower``."""
        Y = np.asarray(Y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        N, P = Y.shape
        C = X.shape[1]
        feature_names = list(feature_names or [f"y{j + 1}" for j in range(P)])
        covariate_names = list(covariate_names or (["x"] if C == 1 else [f"x{c + 1}" for c in range(C)]))
        censored = np.zeros((N, C), bool) if censored is None else np.asarray(censored, bool).reshape(N, C)
        lower = np.full((N, C), np.nan) if lower is None else np.asarray(lower, float).reshape(N, C)
        upper = np.full((N, C), np.nan) if upper is None else np.asarray(upper, float).reshape(N, C)
        X = np.where(censored, lower, X)
        y_shift, y_scale = _column_transform(Y, feature_names)
        x_shift, x_scale = _column_transform(X, covariate_names)
        return cls(
            Y=(Y - y_shift) / y_scale,
            X=(X - x_shift) / x_scale,
            censored=censored,
            lower=np.where(censored, lower, np.nan),
            upper=np.where(censored, upper, np.nan),
            feature_names=feature_names,
            covariate_names=covariate_names,
            y_shift=y_shift,
            y_scale=y_scale,
            x_shift=x_shift,
            x_scale=x_scale,
        )

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def P(self) -> int:
        return self.Y.shape[1]

    @property
    def C(self) -> int:
        return self.X.shape[1]

    def censored_entries(self):
        """Row and column indices of censored covariates, row-major order."""
        return np.nonzero(self.censored)

    @property
    def n_censored(self) -> int:
        return int(self.censored.sum())

    def raw_Y(self) -> np.ndarray:
        return self.y_shift + self.y_scale * self.Y

    def raw_X(self) -> np.ndarray:
        return self.x_shift + self.x_scale * self.X

    def to_model_x(self, raw, cols):
        return (np.asarray(raw, float) - self.x_shift[cols]) / self.x_scale[cols]


def _column_transform(A, names):
    shift = A.mean(axis=0)
    scale = A.std(axis=0)
    for name, s in zip(names, scale):
        if not s > 0:
            raise ValueError(f"column {name!r} is constant and cannot be standardised")
    return shift, scale


@dataclass
class LatentState:
    z_mean: np.ndarray
    z_log_std: Optional[np.ndarray] = None
    x_cens_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_cens_log_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.z_mean = np.atleast_2d(np.asarray(self.z_mean, dtype=float))
        if self.z_log_std is not None:
            self.z_log_std = np.asarray(self.z_log_std, dtype=float).reshape(self.z_mean.shape)
        self.x_cens_mean = np.asarray(self.x_cens_mean, dtype=float).ravel()
        self.x_cens_log_std = np.asarray(self.x_cens_log_std, dtype=float).ravel()

    @property
    def Q(self) -> int:
        return self.z_mean.shape[1]

    def copy(self) -> "LatentState":
        return LatentState(
            self.z_mean.copy(),
            None if self.z_log_std is None else self.z_log_std.copy(),
            self.x_cens_mean.copy(),
            self.x_cens_log_std.copy(),
        )


@dataclass(frozen=True)
class CensoringPrior:
    """Weibull(shape, scale) prior for censored covariates, in raw units."""

    shape: float
    scale: float
    lifespan_cap: float = math.inf

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("Weibull shape and scale must be positive")
        if not self.lifespan_cap > 0:
            raise ValueError("lifespan cap must be positive")

    def upper_bound(self, b):
        """Replace infinite upper bounds with the lifespan cap."""
        b = np.asarray(b, dtype=float)
        return np.where(np.isfinite(b), np.minimum(b, self.lifespan_cap), self.lifespan_cap)


@dataclass(frozen=True)
class ModelConfig:
    Q: int = 1
    mode: str = "map"
    kernel: KernelKind = KernelKind.ADD_INT
    mc_samples: int = 1
    censoring_prior: Optional[CensoringPrior] = None
    domain: IntegrationDomain = field(default_factory=IntegrationDomain)
    lengthscale_prior_mean: float = 0.0
    lengthscale_prior_std: float = 0.75
    variance_prior_rate: float = 1.0
    kl_quadrature_order: int = 200

    def __post_init__(self):
        object.__setattr__(self, "kernel", KernelKind(self.kernel))
        if self.kernel == KernelKind.SE_ARD:
            raise ValueError("the model kernel must be add, int or add_int")
        if self.mode not in ("map", "variational"):
            raise ValueError(f"mode must be 'map' or 'variational', got {self.mode!r}")
        if not 1 <= self.Q <= 5:
            raise ValueError("latent dimension Q must lie in 1..5")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    @property
    def active(self) -> frozenset:
        return default_mask(self.kernel)

    def active_columns(self) -> np.ndarray:
        return np.array([c in self.active for c in COMPONENTS])


@dataclass
class ModelParams:
    """Kernel hyperparameters for all features.

    ``variances[j]`` holds ``(bias, z, x, zx)`` variances of feature ``j``.
    """

    z_lengthscales: np.ndarray
    x_lengthscales: np.ndarray
    variances: np.ndarray
    noise: np.ndarray
    domain: IntegrationDomain = field(default_factory=IntegrationDomain)

    def __post_init__(self):
        self.z_lengthscales = np.atleast_1d(np.asarray(self.z_lengthscales, dtype=float))
        self.x_lengthscales = np.atleast_1d(np.asarray(self.x_lengthscales, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        self.noise = np.atleast_1d(np.asarray(self.noise, dtype=float))
        if self.variances.shape != (self.noise.size, 4):
            raise ValueError("variances must have shape (P, 4) matching noise")

    @classmethod
    def initial(cls, P, Q, C, variances=(0.1, 1.0, 1.0, 0.1), lengthscale=1.0, noise=0.1,
                domain=None) -> "ModelParams":
        return cls(
            np.full(Q, lengthscale),
            np.full(C, lengthscale),
            np.tile(np.asarray(variances, float), (P, 1)),
            np.full(P, noise),
            domain or IntegrationDomain(),
        )

    @property
    def P(self) -> int:
        return self.noise.size

    def feature(self, j: int) -> AddIntParams:
        v = self.variances[j]
        return AddIntParams(v[0], v[1], v[2], v[3], self.z_lengthscales, self.x_lengthscales, self.domain)

    def blocks_params(self) -> AddIntParams:
        return AddIntParams(1.0, 1.0, 1.0, 1.0, self.z_lengthscales, self.x_lengthscales, self.domain)

    def copy(self) -> "ModelParams":
        return ModelParams(self.z_lengthscales.copy(), self.x_lengthscales.copy(),
                           self.variances.copy(), self.noise.copy(), self.domain)


@dataclass
class Gradients:
    """Objective gradients; hyperparameters in log space, noise w.r.t. ``log(noise - floor)``."""

    z_mean: np.ndarray
    z_log_std: Optional[np.ndarray]
    x_cens_mean: np.ndarray
    x_cens_log_std: np.ndarray
    log_z_lengthscales: np.ndarray
    log_x_lengthscales: np.ndarray
    log_variances: np.ndarray
    noise_param: np.ndarray

    @classmethod
    def zeros(cls, state: LatentState, params: ModelParams) -> "Gradients":
        return cls(
            np.zeros_like(state.z_mean),
            None if state.z_log_std is None else np.zeros_like(state.z_log_std),
            np.zeros_like(state.x_cens_mean),
            np.zeros_like(state.x_cens_log_std),
            np.zeros_like(params.z_lengthscales),
            np.zeros_like(params.x_lengthscales),
            np.zeros_like(params.variances),
            np.zeros_like(params.noise),
        )


# ---------------------------------------------------------------------------
# likelihood


@dataclass
class _LikTerms:
    lml: np.ndarray
    dZ: Optional[np.ndarray] = None
    dX: Optional[np.ndarray] = None
    dlz: Optional[np.ndarray] = None
    dlx: Optional[np.ndarray] = None
    dvar: Optional[np.ndarray] = None
    dnoise: Optional[np.ndarray] = None
    jitter_events: int = 0


def _likelihood_terms(Y, Z, X, params: ModelParams, kind, grad=False) -> _LikTerms:
    """Per-feature log marginal likelihoods and natural-parameter gradients."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    N, P = Y.shape
    Q = Z.shape[1]
    if Z.shape[0] != N or X.shape[0] != N:
        raise ValueError("Z, X and Y must have the same number of rows")
    if P != params.P:
        raise ValueError(f"parameters describe {params.P} features, Y has {P}")
    kind = KernelKind(kind)
    mask = default_mask(kind)
    A = np.hstack([Z, X])
    (Kz, dz_l, dz_a), (Kx, dx_l, dx_a) = kernel_blocks(A, A, params.blocks_params(), kind, grad)
    comps = {"bias": None, "z": Kz, "x": Kx, "zx": Kz * Kx}
    active = [(i, c) for i, c in enumerate(COMPONENTS) if c in mask]

    # all features share the component blocks, so assemble every K at once
    # and turn the trace reductions into matrix-vector products
    cols = [i for i, _ in active]
    flat = np.stack([np.ones(N * N) if c == "bias" else comps[c].ravel() for _, c in active])
    Kall = (params.variances[:, cols] @ flat).reshape(P, N, N)
    idx = np.arange(N)
    Kall[:, idx, idx] += params.noise[:, None]

    lml = np.empty(P)
    jitter_events = 0
    W = np.empty((P, N, N)) if grad else None
    for j in range(P):
        try:
            L, jit = jittered_cholesky(Kall[j], feature=j)
        except NumericalError as err:
            raise NumericalError(f"feature {j}: {err}") from err
        jitter_events += jit > 0
        y = Y[:, j]
        alpha, _ = lapack.dpotrs(L, y, lower=1)
        lml[j] = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * N * _LOG2PI
        if not grad:
            continue
        # dpotri fills the lower triangle; the upper stays zero from clean=1
        Kinv, _ = lapack.dpotri(L, lower=1)
        Wj = W[j]
        np.multiply.outer(alpha, alpha, out=Wj)
        Wj -= Kinv
        Wj -= Kinv.T
        Wj[idx, idx] += Kinv[idx, idx]
        Wj *= 0.5
    if not np.all(np.isfinite(lml)):
        bad = int(np.flatnonzero(~np.isfinite(lml))[0])
        raise NumericalError(f"non-finite marginal likelihood for feature {bad}")
    if not grad:
        return _LikTerms(lml, jitter_events=jitter_events)

    Wf = W.reshape(P, N * N)
    dvar = np.zeros((P, 4))
    dvar[:, cols] = Wf @ flat.T
    dnoise = W[:, idx, idx].sum(axis=1)
    S = {c: np.zeros((N, N)) for c in ("z", "x", "zx")}
    for i, c in active:
        if c != "bias":
            S[c] = (params.variances[:, i] @ Wf).reshape(N, N)

    Mz = S["z"] + Kx * S["zx"]
    Mx = S["x"] + Kz * S["zx"]
    dlz = np.array([np.sum(Mz * dz_l[d]) for d in range(Q)])
    dlx = np.array([np.sum(Mx * dx_l[d]) for d in range(X.shape[1])])
    dZ = 2.0 * np.stack([np.sum(Mz * dz_a[d], axis=1) for d in range(Q)], axis=1)
    dX = 2.0 * np.stack([np.sum(Mx * dx_a[d], axis=1) for d in range(X.shape[1])], axis=1)
    return _LikTerms(lml, dZ, dX, dlz, dlx, dvar, dnoise, jitter_events)


def cgplvm_nll(ds_or_Y, Z, X, params: ModelParams, kind=KernelKind.ADD_INT) -> float:
    """Negative log marginal likelihood summed over features."""
    Y = ds_or_Y.Y if isinstance(ds_or_Y, Dataset) else ds_or_Y
    return float(-_likelihood_terms(Y, Z, X, params, kind).lml.sum())


# ---------------------------------------------------------------------------
# priors


def log_prior_terms(state: LatentState, params: ModelParams, cfg: ModelConfig,
                    include_latent: bool = True) -> dict:
    """Latent, shrinkage and lengthscale log-prior contributions.

    Kernel variances of the active components get ``Gamma(1, rate)``
    (log density ``log(rate) - rate * v``); lengthscales get a log-normal.
    """
    terms = {}
    if include_latent:
        Z = state.z_mean
        terms["latent"] = float(-0.5 * np.sum(Z * Z) - 0.5 * Z.size * _LOG2PI)
    rate = cfg.variance_prior_rate
    v = params.variances[:, cfg.active_columns()]
    terms["variance"] = float(np.sum(math.log(rate) - rate * v))
    ls = np.concatenate([params.z_lengthscales, params.x_lengthscales])
    m, s = cfg.lengthscale_prior_mean, cfg.lengthscale_prior_std
    logl = np.log(ls)
    terms["lengthscale"] = float(np.sum(-logl - math.log(s) - 0.5 * _LOG2PI - 0.5 * ((logl - m) / s) ** 2))
    return terms


def log_priors(state: LatentState, params: ModelParams, cfg: ModelConfig,
               include_latent: bool = True) -> float:
    return sum(log_prior_terms(state, params, cfg, include_latent).values())


def _add_prior_grads(g: Gradients, state, params, cfg, include_latent):
    if include_latent:
        g.z_mean -= state.z_mean
    act = cfg.active_columns()
    g.log_variances[:, act] -= cfg.variance_prior_rate * params.variances[:, act]
    m, s = cfg.lengthscale_prior_mean, cfg.lengthscale_prior_std
    g.log_z_lengthscales += -1.0 - (np.log(params.z_lengthscales) - m) / s**2
    g.log_x_lengthscales += -1.0 - (np.log(params.x_lengthscales) - m) / s**2


def kl_standard_normal(mean, log_std) -> float:
    """``KL(N(mean, diag(exp(log_std)^2)) || N(0, I))``."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    return float(np.sum(0.5 * (mean**2 + np.expm1(2.0 * log_std) - 2.0 * log_std)))


# ---------------------------------------------------------------------------
# truncated Weibull prior and censored KL


def _weibull_log_mass(prior: CensoringPrior, a, b):
    """``log(F(b) - F(a))`` for the Weibull CDF, evaluated via survival functions."""
    k, lam = prior.shape, prior.scale
    a = np.maximum(np.asarray(a, dtype=float), 0.0)
    b = np.asarray(b, dtype=float)
    ha = (a / lam) ** k
    hb = np.where(np.isfinite(b), (np.maximum(b, 0.0) / lam) ** k, np.inf)
    with np.errstate(divide="ignore"):
        log_mass = -ha + np.log(-np.expm1(ha - hb))
    if np.any(~(log_mass > math.log(_MIN_TRUNC_MASS))):
        raise DegenerateTruncationError("truncated Weibull has numerically no mass on [a, b]")
    return log_mass


def trunc_weibull_logpdf(x, prior: CensoringPrior, a, b):
    """Log density of ``Weibull(shape, scale)`` truncated to ``[a, b]``."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(a < b)):
        raise ValueError("truncation requires a < b")
    k, lam = prior.shape, prior.scale
    log_mass = _weibull_log_mass(prior, a, b)
    inside = (x >= a) & (x <= b) & (x > 0)
    xs = np.where(inside, x, 1.0)
    with np.errstate(divide="ignore"):
        lp = math.log(k / lam) + (k - 1.0) * np.log(xs / lam) - (xs / lam) ** k - log_mass
    out = np.where(inside, lp, -np.inf)
    return out if out.ndim else float(out)


def _weibull_dlogpdf(x, prior: CensoringPrior):
    k, lam = prior.shape, prior.scale
    return (k - 1.0) / x - (k / lam) * (x / lam) ** (k - 1.0)


def _log_phi(t):
    return -0.5 * t * t - 0.5 * _LOG2PI


def _log_normal_mass(alpha, beta):
    """``log(Phi(beta) - Phi(alpha))`` evaluated in the stable tail."""
    flip = alpha > 0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore"):
        return lhi + np.log(-np.expm1(llo - lhi))


def _kl_censored(mu, log_sigma, prior: CensoringPrior, a, b, order=200, grad=False):
    """KL(TN_[a,b](mu, sigma^2) || TruncWeibull_[a,b]) by Gauss-Legendre quadrature.

    The integral runs over the standardised variable ``t = (x - mu) / sigma``
    on ``[max(alpha, -8), min(beta, max(8, lo + 8))]``; beyond that the
    normal density is negligible.  Gradients use the Leibniz rule (moving
    endpoints plus the integrand's parameter derivative).
    """
    mu, log_sigma, a, b = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(v, dtype=float)) for v in (mu, log_sigma, a, b))
    )
    if np.any(~(a < b)):
        raise ValueError("truncation requires a < b")
    sigma = np.exp(log_sigma)
    alpha = (a - mu) / sigma
    beta = (b - mu) / sigma
    logZ = _log_normal_mass(alpha, beta)
    if np.any(~(logZ > math.log(_MIN_TRUNC_MASS))):
        raise DegenerateTruncationError("variational truncated normal has no mass on [a, b]")
    log_mass_w = _weibull_log_mass(prior, a, b)

    lo_is_alpha = alpha > -8.0
    lo = np.where(lo_is_alpha, alpha, -8.0)
    cap = np.maximum(8.0, lo + 8.0)
    hi_is_beta = beta < cap
    hi = np.where(hi_is_beta, beta, cap)

    nodes, weights = np.polynomial.legendre.leggauss(order)
    half = 0.5 * (hi - lo)
    t = (0.5 * (hi + lo))[:, None] + half[:, None] * nodes[None, :]
    w = half[:, None] * weights[None, :]

    k, lam = prior.shape, prior.scale

    def parts(t):
        x = np.clip(mu[:, None] + sigma[:, None] * t, a[:, None], b[:, None])
        x = np.maximum(x, 1e-300)
        logp = math.log(k / lam) + (k - 1.0) * np.log(x / lam) - (x / lam) ** k - log_mass_w[:, None]
        h = _log_phi(t) - log_sigma[:, None] - logZ[:, None] - logp
        r = np.exp(_log_phi(t) - logZ[:, None])
        return x, h, r

    x, h, r = parts(t)
    kl = np.sum(w * r * h, axis=1)
    if not grad:
        return kl

    phi_a = np.where(np.isfinite(alpha), np.exp(_log_phi(np.where(np.isfinite(alpha), alpha, 0.0)) - logZ), 0.0)
    phi_b = np.where(np.isfinite(beta), np.exp(_log_phi(np.where(np.isfinite(beta), beta, 0.0)) - logZ), 0.0)
    a_phi_a = np.where(np.isfinite(alpha), np.where(np.isfinite(alpha), alpha, 0.0) * phi_a, 0.0)
    b_phi_b = np.where(np.isfinite(beta), np.where(np.isfinite(beta), beta, 0.0) * phi_b, 0.0)
    dlogZ_dmu = (phi_a - phi_b) / sigma
    dlogZ_ds = a_phi_a - b_phi_b

    dlp = _weibull_dlogpdf(x, prior)
    inner_mu = r * (-dlogZ_dmu[:, None] * h - dlogZ_dmu[:, None] - dlp)
    inner_s = r * (-dlogZ_ds[:, None] * h - 1.0 - dlogZ_ds[:, None] - dlp * sigma[:, None] * t)
    dmu = np.sum(w * inner_mu, axis=1)
    ds = np.sum(w * inner_s, axis=1)

    # endpoint motion
    dlo_dmu = np.where(lo_is_alpha, -1.0 / sigma, 0.0)
    dlo_ds = np.where(lo_is_alpha, -alpha, 0.0)
    dhi_dmu = np.where(hi_is_beta, -1.0 / sigma, np.where(cap > 8.0, dlo_dmu, 0.0))
    dhi_ds = np.where(hi_is_beta, -np.where(np.isfinite(beta), beta, 0.0), np.where(cap > 8.0, dlo_ds, 0.0))
    _, h_lo, r_lo = parts(lo[:, None])
    _, h_hi, r_hi = parts(hi[:, None])
    g_lo = (r_lo * h_lo)[:, 0]
    g_hi = (r_hi * h_hi)[:, 0]
    dmu += g_hi * dhi_dmu - g_lo * dlo_dmu
    ds += g_hi * dhi_ds - g_lo * dlo_ds
    return kl, dmu, ds


def kl_q_censored(mu, sigma, prior: CensoringPrior, a, b, order: int = 200):
    """``KL(TN_[a,b](mu, sigma^2) || TruncWeibull_[a,b](shape, scale))``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    kl = _kl_censored(mu, np.log(sigma), prior, a, prior.upper_bound(b), order)
    return kl if kl.size > 1 else float(kl[0])


# ---------------------------------------------------------------------------
# objectives


def _censored_bounds(ds: Dataset, cfg: ModelConfig):
    rows, cols = ds.censored_entries()
    if rows.size == 0:
        return rows, cols, np.zeros(0), np.zeros(0)
    if cfg.censoring_prior is None:
        raise ValueError("censored covariates require a censoring prior (Weibull shape and scale)")
    a = ds.lower[rows, cols]
    b = cfg.censoring_prior.upper_bound(ds.upper[rows, cols])
    return rows, cols, a, b


def map_objective(ds: Dataset, state: LatentState, params: ModelParams, cfg: ModelConfig) -> float:
    """``cgplvm_nll - log_priors`` (to be minimised)."""
    return cgplvm_nll(ds, state.z_mean, ds.X, params, cfg.kernel) - log_priors(state, params, cfg)


def _chain_hyper(g: Gradients, terms: _LikTerms, params: ModelParams, cfg: ModelConfig, weight=1.0):
    g.log_z_lengthscales += weight * terms.dlz * params.z_lengthscales
    g.log_x_lengthscales += weight * terms.dlx * params.x_lengthscales
    act = cfg.active_columns()
    g.log_variances[:, act] += weight * (terms.dvar * params.variances)[:, act]
    g.noise_param += weight * terms.dnoise * (params.noise - NOISE_FLOOR)


def map_objective_and_grad(ds: Dataset, state: LatentState, params: ModelParams, cfg: ModelConfig):
    """Log joint ``log p(Y|Z,X) + log p(Z) + log p(theta)`` and its gradient.

    This is the negated :func:`map_objective`; the optimiser ascends it.
    """
    terms = _likelihood_terms(ds.Y, state.z_mean, ds.X, params, cfg.kernel, grad=True)
    g = Gradients.zeros(state, params)
    g.z_mean += terms.dZ
    _chain_hyper(g, terms, params, cfg)
    _add_prior_grads(g, state, params, cfg, include_latent=True)
    value = float(terms.lml.sum()) + log_priors(state, params, cfg)
    return value, g, {"jitter_events": terms.jitter_events}


def _elbo_core(ds: Dataset, state: LatentState, params: ModelParams, cfg: ModelConfig, rng, grad):
    if state.z_log_std is None:
        raise ValueError("the ELBO needs a variational q(Z) (z_log_std)")
    rows, cols, a, b = _censored_bounds(ds, cfg)
    if state.x_cens_mean.size != rows.size:
        raise ValueError("latent state does not match the dataset's censored entries")
    S = cfg.mc_samples
    g = Gradients.zeros(state, params)
    z_std = np.exp(state.z_log_std)
    x_sig = np.exp(state.x_cens_log_std)
    exp_ll = 0.0
    jitter = 0
    for _ in range(S):
        eps = rng.standard_normal(state.z_mean.shape)
        Z = state.z_mean + z_std * eps
        X = ds.X.copy()
        if rows.size:
            u = rng.uniform(size=rows.size)
            xr, dx_dmu, dx_ds = sample_trunc_normal_grad(state.x_cens_mean, x_sig, a, b, u)
            X[rows, cols] = ds.to_model_x(xr, cols)
        terms = _likelihood_terms(ds.Y, Z, X, params, cfg.kernel, grad=grad)
        jitter += terms.jitter_events
        exp_ll += terms.lml.sum() / S
        if grad:
            g.z_mean += terms.dZ / S
            g.z_log_std += terms.dZ * eps * z_std / S
            if rows.size:
                dx_raw = terms.dX[rows, cols] / ds.x_scale[cols]
                g.x_cens_mean += dx_raw * dx_dmu / S
                g.x_cens_log_std += dx_raw * dx_ds / S
            _chain_hyper(g, terms, params, cfg, 1.0 / S)

    kl_z = kl_standard_normal(state.z_mean, state.z_log_std)
    kl_x = 0.0
    if rows.size:
        out = _kl_censored(state.x_cens_mean, state.x_cens_log_std, cfg.censoring_prior, a, b,
                           cfg.kl_quadrature_order, grad=grad)
        if grad:
            klx, dmu, dls = out
            g.x_cens_mean -= dmu
            g.x_cens_log_std -= dls
        else:
            klx = out
        kl_x = float(np.sum(klx))
    if grad:
        g.z_mean -= state.z_mean
        g.z_log_std -= np.exp(2.0 * state.z_log_std) - 1.0
    value = float(exp_ll - kl_z - kl_x)
    return value, g, {"jitter_events": jitter, "kl_z": kl_z, "kl_x": kl_x, "expected_loglik": float(exp_ll)}


def elbo(ds: Dataset, state: LatentState, params: ModelParams, cfg: ModelConfig, rng) -> float:
    """Monte-Carlo ELBO with reparameterised draws of ``Z`` and censored ``X``."""
    rng = np.random.default_rng(rng)
    return _elbo_core(ds, state, params, cfg, rng, grad=False)[0]


def variational_objective_and_grad(ds: Dataset, state: LatentState, params: ModelParams,
                                   cfg: ModelConfig, rng):
    """ELBO plus hyperparameter log-priors, with a single-draw pathwise gradient."""
    value, g, info = _elbo_core(ds, state, params, cfg, rng, grad=True)
    _add_prior_grads(g, state, params, cfg, include_latent=False)
    value += log_priors(state, params, cfg, include_latent=False)
    return value, g, info

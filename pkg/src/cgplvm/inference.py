"""Fitting the covariate GPLVM with Adam, plus posterior summaries."""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path
from scipy.spatial import cKDTree

from .exceptions import NumericalError
from .gp import Decomposition, decompose, fit_posterior
from .kernels import COMPONENTS, KernelKind
from .model import (
    NOISE_FLOOR,
    CensoringPrior,
    Dataset,
    LatentState,
    ModelConfig,
    ModelParams,
    map_objective_and_grad,
    variational_objective_and_grad,
)
from .truncnorm import sample_trunc_normal, sample_trunc_normal_grad, trunc_normal_summary

__all__ = [
    "OptimizerConfig",
    "FitResult",
    "FitAborted",
    "CensoredPosteriorSummary",
    "sample_trunc_normal",
    "sample_trunc_normal_grad",
    "init_latent",
    "initial_params",
    "fit",
    "censored_posterior",
    "evaluate_recovery",
    "training_inputs",
    "decompose_feature",
]

logger = logging.getLogger(__name__)

WARMUP_VARIANCES = (0.1, 1.0, 1.0, 0.1)
SMOOTHING_WINDOW = 25
INIT_METHODS = ("pca", "isomap")
ISOMAP_NEIGHBOURS = 12

# box constraints on unconstrained coordinates; keep the optimiser away from
# overflow and from truncations with no mass
_LOG_LS_BOUNDS = (math.log(1e-2), math.log(1e2))
_LOG_VAR_BOUNDS = (-20.0, 5.0)
_NOISE_PARAM_BOUNDS = (-30.0, 3.0)
_Z_LOG_STD_BOUNDS = (-10.0, 2.0)


@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 0.01
    max_iters: int = 3000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    convergence_rtol: float = 1e-5
    patience: int = 200
    seed: int = 0
    n_restarts: int = 3
    warmup_iters: int = 200
    init_methods: tuple = ("pca", "isomap")

    def __post_init__(self):
        if not self.init_methods or any(m not in INIT_METHODS for m in self.init_methods):
            raise ValueError(f"init_methods must be drawn from {INIT_METHODS}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.step_size <= 0 or self.max_iters < 1 or self.patience < 1 or self.n_restarts < 1:
            raise ValueError("step_size, max_iters, patience and n_restarts must be positive")


@dataclass
class FitResult:
    state: LatentState
    params: ModelParams
    objective_trace: np.ndarray
    converged: bool
    diagnostics: dict = field(default_factory=dict)
    config: ModelConfig = None
    optimizer: OptimizerConfig = None

    @property
    def final_objective(self) -> float:
        return _smoothed_tail(self.objective_trace)


class FitAborted(NumericalError):
    def __init__(self, message, iteration, snapshot):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass
class CensoredPosteriorSummary:
    rows: np.ndarray
    cols: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    q05: np.ndarray
    q95: np.ndarray

    def records(self, covariate_names=None):
        out = []
        for k in range(self.rows.size):
            c = int(self.cols[k])
            out.append({
                "row": int(self.rows[k]),
                "covariate": covariate_names[c] if covariate_names else c,
                "lower": float(self.lower[k]),
                "upper": float(self.upper[k]),
                "mean": float(self.mean[k]),
                "std": float(self.std[k]),
                "q05": float(self.q05[k]),
                "q95": float(self.q95[k]),
            })
        return out


# ---------------------------------------------------------------------------
# initialisation


def _trunc_weibull_median(prior: CensoringPrior, a, b):
    k, lam = prior.shape, prior.scale
    sa = np.exp(-(np.maximum(a, 0.0) / lam) ** k)
    sb = np.exp(-(b / lam) ** k)
    s = sa - 0.5 * (sa - sb)
    return lam * (-np.log(s)) ** (1.0 / k)


def _residualised(ds: Dataset) -> np.ndarray:
    Y = np.asarray(ds.Y, dtype=float)
    keep = Y.std(axis=0) > 0
    if not np.all(keep):
        dropped = [ds.feature_names[j] for j in np.flatnonzero(~keep)]
        warnings.warn(f"constant columns dropped from initialisation: {dropped}", RuntimeWarning)
    Y = Y[:, keep] - Y[:, keep].mean(axis=0)
    design = np.hstack([np.ones((ds.N, 1)), ds.X])
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    return Y - design @ coef


def _pca_scores(R, Q):
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    return U[:, :Q] * s[:Q]


def _isomap_scores(R, Q, neighbours=ISOMAP_NEIGHBOURS):
    """Classical MDS on geodesic distances of a k-nearest-neighbour graph.

    ``k`` grows until the graph is connected; if it never is, PCA is used.
    """
    N = R.shape[0]
    tree = cKDTree(R)
    k = min(neighbours, N - 1)
    while True:
        dist, idx = tree.query(R, k + 1)
        graph = csr_matrix((dist[:, 1:].ravel(), (np.repeat(np.arange(N), k), idx[:, 1:].ravel())), shape=(N, N))
        D = shortest_path(graph, directed=False)
        if np.all(np.isfinite(D)):
            break
        if k == N - 1:
            return _pca_scores(R, Q)
        k = min(2 * k, N - 1)
    D2 = D * D
    B = -0.5 * (D2 - D2.mean(axis=0) - D2.mean(axis=1)[:, None] + D2.mean())
    w, V = np.linalg.eigh(B)
    order = np.argsort(w)[::-1][:Q]
    return V[:, order] * np.sqrt(np.maximum(w[order], 0.0))


def init_latent(ds: Dataset, Q: int, seed=0, prior: CensoringPrior = None,
                variational: bool = False, method: str = "pca") -> LatentState:
    """Initial latent state: spectral ``Z`` plus support-respecting censored starts.

    Covariates are first regressed out of ``Y`` (linearly).  ``method="pca"``
    takes the leading ``Q`` principal component scores of the residuals;
    ``method="isomap"`` embeds them with Isomap, which unfolds curved
    one-dimensional structure that PCA folds.  Scores are scaled to unit
    variance and get ``N(0, 0.01)`` jitter.
    """
    if method not in INIT_METHODS:
        raise ValueError(f"unknown initialisation {method!r}")
    rng = np.random.default_rng(seed)
    R = _residualised(ds)
    scores = _pca_scores(R, Q) if method == "pca" else _isomap_scores(R, Q)
    if scores.shape[1] < Q:
        scores = np.hstack([scores, np.zeros((ds.N, Q - scores.shape[1]))])
    sd = scores.std(axis=0)
    scores = scores / np.where(sd > 0, sd, 1.0)
    z = scores + 0.1 * rng.standard_normal((ds.N, Q))

    rows, cols = ds.censored_entries()
    if rows.size:
        if prior is None:
            raise ValueError("censored covariates require a censoring prior")
        a = ds.lower[rows, cols]
        b = prior.upper_bound(ds.upper[rows, cols])
        mu = np.maximum(a, _trunc_weibull_median(prior, a, b))
        log_std = np.log(0.1 * (b - a))
    else:
        mu = log_std = np.zeros(0)
    z_log_std = np.full((ds.N, Q), math.log(0.1)) if variational else None
    return LatentState(z, z_log_std, mu, log_std)


def initial_params(ds: Dataset, cfg: ModelConfig) -> ModelParams:
    if cfg.kernel == KernelKind.ADD_INT:
        v = WARMUP_VARIANCES
    else:
        v = tuple(1.0 if c in cfg.active else 0.0 for c in COMPONENTS)
    return ModelParams.initial(ds.P, cfg.Q, ds.C, v, 1.0, 0.1, cfg.domain)


# ---------------------------------------------------------------------------
# flat parameter vector


class _Packer:
    def __init__(self, ds: Dataset, cfg: ModelConfig, state: LatentState, params: ModelParams):
        self.variational = cfg.mode == "variational"
        self.active = cfg.active_columns()
        self.domain = params.domain
        self.shapes = [
            ("z_mean", state.z_mean.shape),
            ("z_log_std", state.z_mean.shape if self.variational else (0,)),
            ("x_cens_mean", state.x_cens_mean.shape if self.variational else (0,)),
            ("x_cens_log_std", state.x_cens_log_std.shape if self.variational else (0,)),
            ("log_z_lengthscales", params.z_lengthscales.shape),
            ("log_x_lengthscales", params.x_lengthscales.shape),
            ("log_variances", (params.P, int(self.active.sum()))),
            ("noise_param", params.noise.shape),
        ]
        self.slices = {}
        start = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            self.slices[name] = (slice(start, start + n), shape)
            start += n
        self.size = start
        self.inactive_variances = params.variances.copy()
        self.fixed_x = (state.x_cens_mean.copy(), state.x_cens_log_std.copy())
        rows, cols = ds.censored_entries()
        if rows.size and cfg.censoring_prior is not None:
            self.x_bounds = (ds.lower[rows, cols], cfg.censoring_prior.upper_bound(ds.upper[rows, cols]))
        else:
            self.x_bounds = (np.zeros(0), np.zeros(0))

    def get(self, theta, name):
        sl, shape = self.slices[name]
        return theta[sl].reshape(shape)

    def pack(self, state: LatentState, params: ModelParams) -> np.ndarray:
        theta = np.empty(self.size)
        parts = {
            "z_mean": state.z_mean,
            "z_log_std": state.z_log_std if self.variational else np.zeros(0),
            "x_cens_mean": state.x_cens_mean if self.variational else np.zeros(0),
            "x_cens_log_std": state.x_cens_log_std if self.variational else np.zeros(0),
            "log_z_lengthscales": np.log(params.z_lengthscales),
            "log_x_lengthscales": np.log(params.x_lengthscales),
            "log_variances": np.log(np.maximum(params.variances[:, self.active], 1e-300)),
            "noise_param": np.log(params.noise - NOISE_FLOOR),
        }
        for name, (sl, _) in self.slices.items():
            theta[sl] = np.asarray(parts[name], dtype=float).ravel()
        return theta

    def unpack(self, theta):
        if self.variational:
            state = LatentState(self.get(theta, "z_mean").copy(), self.get(theta, "z_log_std").copy(),
                                self.get(theta, "x_cens_mean").copy(), self.get(theta, "x_cens_log_std").copy())
        else:
            state = LatentState(self.get(theta, "z_mean").copy(), None, *self.fixed_x)
        variances = self.inactive_variances.copy()
        variances[:, self.active] = np.exp(self.get(theta, "log_variances"))
        params = ModelParams(
            np.exp(self.get(theta, "log_z_lengthscales")),
            np.exp(self.get(theta, "log_x_lengthscales")),
            variances,
            NOISE_FLOOR + np.exp(self.get(theta, "noise_param")),
            self.domain,
        )
        return state, params

    def pack_grad(self, g) -> np.ndarray:
        out = np.zeros(self.size)
        parts = {
            "z_mean": g.z_mean,
            "z_log_std": g.z_log_std if self.variational else np.zeros(0),
            "x_cens_mean": g.x_cens_mean if self.variational else np.zeros(0),
            "x_cens_log_std": g.x_cens_log_std if self.variational else np.zeros(0),
            "log_z_lengthscales": g.log_z_lengthscales,
            "log_x_lengthscales": g.log_x_lengthscales,
            "log_variances": g.log_variances[:, self.active],
            "noise_param": g.noise_param,
        }
        for name, (sl, _) in self.slices.items():
            out[sl] = np.asarray(parts[name], dtype=float).ravel()
        return out

    def variance_slice(self):
        return self.slices["log_variances"][0]

    def project(self, theta):
        """Clip coordinates into their safe boxes (in place)."""

        def clip(name, lo, hi):
            sl, _ = self.slices[name]
            np.clip(theta[sl], lo, hi, out=theta[sl])

        clip("log_z_lengthscales", *_LOG_LS_BOUNDS)
        clip("log_x_lengthscales", *_LOG_LS_BOUNDS)
        clip("log_variances", *_LOG_VAR_BOUNDS)
        clip("noise_param", *_NOISE_PARAM_BOUNDS)
        if self.variational:
            clip("z_log_std", *_Z_LOG_STD_BOUNDS)
            a, b = self.x_bounds
            if a.size:
                ms, _ = self.slices["x_cens_mean"]
                ss, _ = self.slices["x_cens_log_std"]
                width = b - a
                theta[ss] = np.clip(theta[ss], np.log(1e-3 * width), np.log(10.0 * width))
                sig = np.exp(theta[ss])
                theta[ms] = np.clip(theta[ms], a - 5.0 * sig, b + 5.0 * sig)
        return theta


# ---------------------------------------------------------------------------
# optimisation


def _smoothed_tail(trace, window=SMOOTHING_WINDOW):
    trace = np.asarray(trace)
    return float(np.mean(trace[-window:])) if trace.size else -math.inf


def _run_single(ds: Dataset, cfg: ModelConfig, opt: OptimizerConfig, seed, method="pca") -> FitResult:
    variational = cfg.mode == "variational"
    state = init_latent(ds, cfg.Q, seed, cfg.censoring_prior, variational, method)
    params = initial_params(ds, cfg)
    packer = _Packer(ds, cfg, state, params)
    theta = packer.project(packer.pack(state, params))
    rng = np.random.default_rng(seed)

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = opt.adam_beta1, opt.adam_beta2
    var_sl = packer.variance_slice()
    warmup = opt.warmup_iters if cfg.kernel == KernelKind.ADD_INT else 0

    trace = []
    jitter_events = 0
    best_smooth = -math.inf
    since_best = 0
    converged = False
    for it in range(opt.max_iters):
        st, pr = packer.unpack(theta)
        try:
            if variational:
                value, g, info = variational_objective_and_grad(ds, st, pr, cfg, rng)
            else:
                value, g, info = map_objective_and_grad(ds, st, pr, cfg)
        except NumericalError as err:
            raise FitAborted(str(err), it, {"state": st, "params": pr}) from err
        grad = packer.pack_grad(g)
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise FitAborted("non-finite objective or gradient", it, {"state": st, "params": pr})
        jitter_events += info.get("jitter_events", 0)
        trace.append(value)
        if it < warmup:
            grad[var_sl] = 0.0

        # Adam ascent
        t = it + 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = packer.project(theta + opt.step_size * mhat / (np.sqrt(vhat) + opt.adam_eps))

        if it >= max(warmup, SMOOTHING_WINDOW - 1):
            smooth = _smoothed_tail(trace)
            if best_smooth == -math.inf or smooth > best_smooth + opt.convergence_rtol * abs(best_smooth):
                best_smooth = smooth
                since_best = 0
            else:
                since_best += 1
                if since_best >= opt.patience:
                    converged = True
                    break

    st, pr = packer.unpack(theta)
    trace = np.asarray(trace)
    z_std = float(np.std(st.z_mean))
    diagnostics = {
        "iterations": int(trace.size),
        "jitter_events": int(jitter_events),
        "latent_std": z_std,
        "latent_scale_ok": bool(0.3 <= z_std <= 3.0),
        "seed": int(seed) if np.isscalar(seed) else None,
        "init": method,
    }
    if not diagnostics["latent_scale_ok"]:
        logger.warning("latent scale std(z)=%.3g outside [0.3, 3]", z_std)
    return FitResult(st, pr, trace, converged, diagnostics, cfg, opt)


def _restart_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _worker_count(workers):
    if workers is None:
        workers = int(os.environ.get("CGPLVM_THREADS", "0") or 0)
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def fit(ds: Dataset, cfg: ModelConfig = None, opt: OptimizerConfig = None,
        n_restarts: int = None, workers: int = None) -> FitResult:
    """Fit latent coordinates and hyperparameters; the best restart wins.

    Restarts draw their seeds from ``opt.seed`` and cycle through
    ``opt.init_methods`` for their starting latents.  ``workers`` (or the
    ``CGPLVM_THREADS`` environment variable, 0 meaning one per CPU) caps the
    number of restarts run in parallel processes.
    """
    cfg = cfg or ModelConfig()
    opt = opt or OptimizerConfig()
    if ds.n_censored and cfg.mode != "variational":
        raise ValueError("censored covariates require variational mode")
    if ds.n_censored and cfg.censoring_prior is None:
        raise ValueError("censored covariates require Weibull prior parameters")
    n = opt.n_restarts if n_restarts is None else n_restarts
    seeds = _restart_seeds(opt.seed, n)
    methods = [opt.init_methods[i % len(opt.init_methods)] for i in range(n)]
    workers = min(_worker_count(workers), n)

    results, failures = [], []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_single, ds, cfg, opt, s, m) for s, m in zip(seeds, methods)]
            for fut in futures:
                try:
                    results.append(fut.result())
                except FitAborted as err:
                    failures.append(err)
    else:
        for s, m in zip(seeds, methods):
            try:
                results.append(_run_single(ds, cfg, opt, s, m))
            except FitAborted as err:
                failures.append(err)
    if not results:
        raise failures[0]
    finals = [r.final_objective for r in results]
    best = results[int(np.argmax(finals))]
    best.diagnostics["restart_objectives"] = finals
    best.diagnostics["failed_restarts"] = len(failures)
    return best


# ---------------------------------------------------------------------------
# summaries


def censored_posterior(result: FitResult, ds: Dataset) -> CensoredPosteriorSummary:
    """Moments and (5%, 95%) quantiles of each censored entry's ``q(x)``."""
    rows, cols = ds.censored_entries()
    prior = result.config.censoring_prior if result.config else None
    a = ds.lower[rows, cols]
    b = prior.upper_bound(ds.upper[rows, cols]) if prior else ds.upper[rows, cols]
    if rows.size == 0:
        empty = np.zeros(0)
        return CensoredPosteriorSummary(rows, cols, empty, empty, empty, empty, empty, empty)
    mu = result.state.x_cens_mean
    sigma = np.exp(result.state.x_cens_log_std)
    mean, std, (q05, q95) = trunc_normal_summary(mu, sigma, a, b)
    return CensoredPosteriorSummary(rows, cols, a, b, np.atleast_1d(mean), np.atleast_1d(std),
                                    np.atleast_1d(q05), np.atleast_1d(q95))


def evaluate_recovery(fitted, true) -> float:
    """Absolute Pearson correlation (latent sign is not identifiable)."""
    f = np.asarray(fitted, dtype=float).ravel()
    t = np.asarray(true, dtype=float).ravel()
    if f.size != t.size:
        raise ValueError("fitted and true latents differ in length")
    if f.size < 3:
        raise ValueError("need at least three points")
    if not (f.std() > 0 and t.std() > 0):
        raise NumericalError("correlation undefined for a constant vector")
    return float(min(1.0, abs(np.corrcoef(f, t)[0, 1])))


def training_inputs(result: FitResult, ds: Dataset) -> np.ndarray:
    """Joint ``(Z, X)`` inputs in model units, censored covariates at their posterior mean."""
    X = ds.X.copy()
    rows, cols = ds.censored_entries()
    if rows.size and result.state.x_cens_mean.size == rows.size:
        X[rows, cols] = ds.to_model_x(censored_posterior(result, ds).mean, cols)
    return np.hstack([result.state.z_mean, X])


def decompose_feature(result: FitResult, ds: Dataset, feature: int, grid_size: int = 50) -> Decomposition:
    """Condition feature ``feature`` on the fitted inputs and split it into components."""
    kind = result.config.kernel if result.config else KernelKind.ADD_INT
    post = fit_posterior(training_inputs(result, ds), ds.Y[:, feature], result.params.feature(feature),
                         kind, float(result.params.noise[feature]), feature=feature)
    return decompose(post, grid_size)

import math

import numpy as np
import pytest

import cgplvm.inference as inference
from cgplvm.data import FixedLower, apply_censoring, generate_survival_toy, generate_tabular
from cgplvm.exceptions import NumericalError
from cgplvm.inference import (
    FitAborted,
    OptimizerConfig,
    censored_posterior,
    decompose_feature,
    evaluate_recovery,
    fit,
    init_latent,
    initial_params,
)
from cgplvm.kernels import KernelKind
from cgplvm.model import CensoringPrior, Dataset, ModelConfig

SHORT = OptimizerConfig(step_size=0.02, max_iters=120, n_restarts=1, warmup_iters=40, seed=0)


def rank_one_dataset(seed=11, N=60, P=5):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(N)
    Y = np.outer(z, rng.uniform(0.5, 2.0, P))
    return Dataset.from_raw(Y, rng.standard_normal(N)), z


def censored_toy(lower=1.2, seed=0):
    ld = generate_survival_toy(40, seed=seed, fixed_points=((1.0, 1.5), (-1.0, 1.5)))
    ds = apply_censoring(ld, FixedLower(lower, (0, 1)))
    cap = float(ds.upper[0, 0])
    cfg = ModelConfig(mode="variational", censoring_prior=CensoringPrior(2.0, 1.0, cap))
    return ld, ds, cfg


# ---------------------------------------------------------------------------
# initialisation


@pytest.mark.parametrize("method", ["pca", "isomap"])
def test_init_recovers_rank_one(method):
    ds, z = rank_one_dataset()
    state = init_latent(ds, 1, seed=0, method=method)
    assert evaluate_recovery(state.z_mean, z) > 0.99
    assert state.z_mean.std() == pytest.approx(1.0, abs=0.05)


def test_init_deterministic():
    ds, _ = rank_one_dataset()
    a = init_latent(ds, 2, seed=7)
    b = init_latent(ds, 2, seed=7)
    np.testing.assert_array_equal(a.z_mean, b.z_mean)
    assert not np.array_equal(a.z_mean, init_latent(ds, 2, seed=8).z_mean)


def test_init_unfolds_curved_latent():
    ld = generate_survival_toy(100, seed=4)
    assert evaluate_recovery(init_latent(ld.ds, 1, method="isomap").z_mean, ld.true_z) > 0.9


def test_init_censored_support():
    _, ds, cfg = censored_toy(lower=1.0)
    prior = CensoringPrior(2.0, 1.0, lifespan_cap=3.0)
    state = init_latent(ds, 1, 0, prior, variational=True)
    assert np.all((state.x_cens_mean >= 1.0) & (state.x_cens_mean <= 3.0))
    np.testing.assert_allclose(np.exp(state.x_cens_log_std), 0.2)
    assert state.z_log_std.shape == state.z_mean.shape
    with pytest.raises(ValueError):
        init_latent(ds, 1, 0, None)


def test_init_drops_constant_columns():
    rng = np.random.default_rng(0)
    ds, _ = rank_one_dataset()
    ds.Y = np.hstack([ds.Y, np.zeros((ds.N, 1))])
    ds.feature_names = ds.feature_names + ["flat"]
    with pytest.warns(RuntimeWarning, match="flat"):
        init_latent(ds, 1, seed=int(rng.integers(10)))


def test_init_rejects_unknown_method():
    ds, _ = rank_one_dataset()
    with pytest.raises(ValueError):
        init_latent(ds, 1, method="tsne")


def test_initial_params_masks():
    ds, _ = rank_one_dataset()
    p = initial_params(ds, ModelConfig(kernel=KernelKind.ADD))
    np.testing.assert_array_equal(p.variances[0], [0.0, 1.0, 1.0, 0.0])
    p = initial_params(ds, ModelConfig())
    np.testing.assert_array_equal(p.variances[0], inference.WARMUP_VARIANCES)


# ---------------------------------------------------------------------------
# fitting


def test_fit_contracts():
    ld = generate_tabular("linear_add", 40, 4, seed=1)
    res = fit(ld.ds, ModelConfig(), SHORT, workers=1)
    trace = res.objective_trace
    assert trace.size <= SHORT.max_iters
    assert np.all(np.isfinite(trace))
    assert np.mean(trace[-25:]) >= trace[0]
    assert np.all(res.params.variances >= 0) and np.all(res.params.noise > 0)
    assert np.all(res.params.z_lengthscales > 0) and np.all(res.params.x_lengthscales > 0)
    assert {"iterations", "jitter_events", "latent_std", "latent_scale_ok"} <= set(res.diagnostics)


def test_fit_reproducible():
    ld = generate_tabular("monotone", 40, 4, seed=2)
    opt = OptimizerConfig(step_size=0.02, max_iters=60, n_restarts=2, warmup_iters=20, seed=3)
    a = fit(ld.ds, ModelConfig(), opt, workers=1)
    b = fit(ld.ds, ModelConfig(), opt, workers=1)
    np.testing.assert_array_equal(a.objective_trace, b.objective_trace)
    np.testing.assert_array_equal(a.state.z_mean, b.state.z_mean)
    assert len(a.diagnostics["restart_objectives"]) == 2


def test_restarts_cycle_initialisations():
    ld = generate_tabular("linear_add", 30, 4, seed=0)
    opt = OptimizerConfig(step_size=0.02, max_iters=30, n_restarts=2, warmup_iters=10)
    results = [inference._run_single(ld.ds, ModelConfig(), opt, s, m) for s, m in [(1, "pca"), (1, "isomap")]]
    assert [r.diagnostics["init"] for r in results] == ["pca", "isomap"]


def test_parallel_restarts_match_serial():
    ld = generate_tabular("linear_add", 30, 4, seed=0)
    opt = OptimizerConfig(step_size=0.02, max_iters=40, n_restarts=2, warmup_iters=10, seed=5)
    serial = fit(ld.ds, ModelConfig(), opt, workers=1)
    parallel = fit(ld.ds, ModelConfig(), opt, workers=2)
    np.testing.assert_array_equal(serial.objective_trace, parallel.objective_trace)


def test_fit_requires_variational_for_censoring():
    _, ds, cfg = censored_toy()
    with pytest.raises(ValueError):
        fit(ds, ModelConfig(), SHORT)
    with pytest.raises(ValueError):
        fit(ds, ModelConfig(mode="variational"), SHORT)


def test_fit_aborts_on_non_finite(monkeypatch):
    ld = generate_tabular("linear_add", 30, 4, seed=0)
    real = inference.map_objective_and_grad
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        value, g, info = real(*args)
        return (math.nan if calls["n"] == 5 else value), g, info

    monkeypatch.setattr(inference, "map_objective_and_grad", flaky)
    with pytest.raises(FitAborted) as info:
        fit(ld.ds, ModelConfig(), SHORT, workers=1)
    assert info.value.iteration == 4
    assert "params" in info.value.snapshot
    assert isinstance(info.value, NumericalError)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(adam_beta1=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(step_size=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(init_methods=("random",))


def test_survival_toy_recovery():
    ld = generate_survival_toy(100, noise_std=0.1, seed=0)
    res = fit(ld.ds, ModelConfig(), OptimizerConfig(step_size=0.02, max_iters=400, seed=0), workers=1)
    assert evaluate_recovery(res.state.z_mean, ld.true_z) >= 0.9


def test_linear_additive_recovery():
    ld = generate_tabular("linear_add", 150, 8, noise_std=0.1, seed=0)
    res = fit(ld.ds, ModelConfig(), OptimizerConfig(step_size=0.02, max_iters=400, seed=0), workers=1)
    assert evaluate_recovery(res.state.z_mean, ld.true_z) >= 0.95


def test_pure_z_feature_has_no_x_component():
    ld = generate_survival_toy(100, noise_std=0.1, seed=1)
    res = fit(ld.ds, ModelConfig(), OptimizerConfig(step_size=0.02, max_iters=400, seed=1), workers=1)
    assert decompose_feature(res, ld.ds, 2).fractions["x"] < 0.05


# ---------------------------------------------------------------------------
# censored posterior


def test_censored_posterior_support_and_bounds():
    _, ds, cfg = censored_toy(lower=1.2)
    opt = OptimizerConfig(step_size=0.02, max_iters=80, n_restarts=1, warmup_iters=20)
    res = fit(ds, cfg, opt, workers=1)
    summ = censored_posterior(res, ds)
    assert summ.rows.tolist() == [0, 1]
    assert np.all(summ.lower <= summ.q05) and np.all(summ.q05 <= summ.q95) and np.all(summ.q95 <= summ.upper)
    assert np.all(summ.mean >= 1.2)
    recs = summ.records(ds.covariate_names)
    assert recs[0]["covariate"] == "x" and recs[0]["lower"] == 1.2


def test_censored_posterior_above_truth():
    # a bound above the true value still pins the posterior mean above it
    _, ds, cfg = censored_toy(lower=1.8)
    opt = OptimizerConfig(step_size=0.02, max_iters=80, n_restarts=1, warmup_iters=20)
    summ = censored_posterior(fit(ds, cfg, opt, workers=1), ds)
    assert np.all(summ.mean >= 1.8)


def test_censored_posterior_delta_limit():
    _, ds, cfg = censored_toy(lower=1.2)
    opt = OptimizerConfig(step_size=0.02, max_iters=5, n_restarts=1, warmup_iters=2)
    res = fit(ds, cfg, opt, workers=1)
    res.state.x_cens_mean = np.array([0.5, 1.7])
    res.state.x_cens_log_std = np.full(2, math.log(1e-4))
    np.testing.assert_allclose(censored_posterior(res, ds).mean, [1.2, 1.7], atol=1e-4)


def test_censored_posterior_empty_without_censoring():
    ld = generate_tabular("linear_add", 30, 4, seed=0)
    res = fit(ld.ds, ModelConfig(), OptimizerConfig(max_iters=5, n_restarts=1, warmup_iters=2), workers=1)
    assert censored_posterior(res, ld.ds).rows.size == 0


# ---------------------------------------------------------------------------
# recovery metric


def test_recovery_examples():
    z = np.random.default_rng(0).standard_normal(50)
    assert evaluate_recovery(z, z) == pytest.approx(1.0)
    assert evaluate_recovery(-z, z) == pytest.approx(1.0)
    assert evaluate_recovery(3 * z + 1, z) == pytest.approx(1.0)


def test_recovery_null_distribution():
    rng = np.random.default_rng(1)
    draws = [evaluate_recovery(rng.standard_normal(1000), rng.standard_normal(1000)) for _ in range(300)]
    assert np.mean(np.array(draws) < 0.1) >= 0.99


def test_recovery_errors():
    with pytest.raises(ValueError):
        evaluate_recovery([1.0, 2.0, 3.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        evaluate_recovery([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(NumericalError):
        evaluate_recovery([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

"""Synthetic generators, censoring schemes and CSV/JSON input-output."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .exceptions import CsvParseError
from .model import Dataset

__all__ = [
    "GENERATOR_KINDS",
    "TABULAR_KINDS",
    "LabeledDataset",
    "FixedLower",
    "Fraction",
    "survival_toy_features",
    "generate_survival_toy",
    "generate_rings",
    "generate_pinwheel",
    "generate_tabular",
    "generate",
    "apply_censoring",
    "load_csv",
    "write_csv",
    "write_json",
    "dumps_json",
]

TABULAR_KINDS = ("linear_add", "linear_int", "monotone", "monotone_transient")
GENERATOR_KINDS = ("rings", "pinwheel", "survival_toy") + TABULAR_KINDS


@dataclass
class LabeledDataset:
    """A dataset together with the ground truth used to generate it.

    ``true_x`` holds the covariate before any censoring; neither field is
    visible to the model, which only sees ``ds``.
    """

    ds: Dataset
    true_z: np.ndarray
    true_x: np.ndarray
    raw_Y: np.ndarray = None
    raw_X: np.ndarray = None


def _check_common(n, noise_std):
    if n < 10:
        raise ValueError("generators need n >= 10")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")


def _labeled(Y, X, z, feature_names=None, covariate_names=None):
    X = np.asarray(X, float).reshape(len(z), -1)
    ds = Dataset.from_raw(Y, X, feature_names=feature_names, covariate_names=covariate_names)
    return LabeledDataset(ds, np.asarray(z, float), X[:, 0].copy(), np.asarray(Y, float), X)


# ---------------------------------------------------------------------------
# survival toy


def survival_toy_features(z, x):
    """Noise-free survival-toy features ``(y1, y2, y3, y4)`` as columns."""
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    y1 = np.sin(z) + 0.2 * x + 0.2 * np.sin(z) * x * (z > 0)
    y2 = np.exp(-z**2) + 0.3 * np.tanh(x)
    y3 = 0.2 * z
    y4 = np.exp(-z**2)
    return np.stack(np.broadcast_arrays(y1, y2, y3, y4), axis=-1)


def generate_survival_toy(n=100, noise_std=0.1, seed=0, weibull_shape=2.0, weibull_scale=1.0,
                          fixed_points=()) -> LabeledDataset:
    """Four features driven by ``z ~ N(0, 1)`` and a Weibull covariate.

    ``fixed_points`` overrides the first rows with given ``(z, x)`` pairs,
    used to plant individuals with known truth.
    """
    _check_common(n, noise_std)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    x = weibull_scale * rng.weibull(weibull_shape, n)
    for i, (zi, xi) in enumerate(fixed_points):
        z[i], x[i] = zi, xi
    Y = survival_toy_features(z, x) + noise_std * rng.standard_normal((n, 4))
    return _labeled(Y, x, z)


# ---------------------------------------------------------------------------
# two-dimensional toys


def _levels(k):
    return np.linspace(-1.0, 1.0, k)


def generate_rings(n_per_ring=40, rings=5, noise_std=0.1, seed=0) -> LabeledDataset:
    """Shifted circles: an additive z effect plus a per-ring offset.

    ``y1 = cos(pi z) + 1.2 x``, ``y2 = sin(pi z) + 0.4 x`` with
    ``z ~ U(-1, 1)`` and ``x`` the ring level in ``[-1, 1]``.
    """
    if rings < 2:
        raise ValueError("need at least two rings")
    _check_common(n_per_ring * rings, noise_std)
    rng = np.random.default_rng(seed)
    x = np.repeat(_levels(rings), n_per_ring)
    z = rng.uniform(-1.0, 1.0, x.size)
    Y = np.stack([np.cos(np.pi * z) + 1.2 * x, np.sin(np.pi * z) + 0.4 * x], axis=1)
    Y += noise_std * rng.standard_normal(Y.shape)
    return _labeled(Y, x, z)


def generate_pinwheel(n_per_spoke=40, spokes=5, noise_std=0.1, seed=0) -> LabeledDataset:
    """Swirled spokes, so the z effect depends on the spoke.

    ``theta = pi x / 2 + 0.8 z`` and ``y = (0.3 + z)(cos theta, sin theta)``
    with ``z ~ U(0, 1)`` and ``x`` the spoke level in ``[-1, 1]``.
    """
    if spokes < 2:
        raise ValueError("need at least two spokes")
    _check_common(n_per_spoke * spokes, noise_std)
    rng = np.random.default_rng(seed)
    x = np.repeat(_levels(spokes), n_per_spoke)
    z = rng.uniform(0.0, 1.0, x.size)
    theta = 0.5 * np.pi * x + 0.8 * z
    r = 0.3 + z
    Y = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    Y += noise_std * rng.standard_normal(Y.shape)
    return _labeled(Y, x, z)


# ---------------------------------------------------------------------------
# gene-expression style tabular data


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def tabular_signal(kind, z, x, rng, P):
    """Noise-free feature matrix for one of the tabular kinds.

    Every feature depends on ``z``; only the even-indexed ones respond to
    the covariate (and, for ``linear_int``, to the interaction), much as
    only some genes respond to a clinical variable.  Columns are rescaled to
    unit standard deviation.
    """
    n = z.size
    sign = rng.choice([-1.0, 1.0], size=(2, P))
    a = sign[0] * rng.uniform(0.5, 1.0, P)
    b = sign[1] * rng.uniform(0.2, 0.8, P) * (np.arange(P) % 2 == 0)
    if kind == "linear_add":
        F = np.outer(z, a) + np.outer(x, b)
    elif kind == "linear_int":
        c = rng.choice([-1.0, 1.0], P) * rng.uniform(0.3, 0.6, P) * (b != 0)
        F = np.outer(z, a) + np.outer(x, b) + np.outer(z * x, c)
    elif kind in ("monotone", "monotone_transient"):
        slope = rng.uniform(1.0, 3.0, P)
        shift = rng.uniform(-1.0, 1.0, P)
        amp = rng.uniform(1.0, 2.0, P)
        F = amp * _sigmoid(slope * (z[:, None] - shift)) + np.outer(x, b)
        if kind == "monotone_transient":
            centre = rng.uniform(-1.5, 1.5, P)
            width = rng.uniform(0.3, 0.7, P)
            bump = rng.uniform(0.5, 1.0, P) * (np.arange(P) % 2 == 1)
            F = F + bump * np.exp(-((z[:, None] - centre) / width) ** 2)
    else:
        raise ValueError(f"unknown tabular kind {kind!r}")
    sd = F.std(axis=0)
    return F / np.where(sd > 0, sd, 1.0)


def generate_tabular(kind="linear_add", n=150, P=8, noise_std=0.1, seed=0) -> LabeledDataset:
    """Synthetic expression-like data with one latent and one covariate."""
    if kind not in TABULAR_KINDS:
        raise ValueError(f"unknown tabular kind {kind!r}")
    if P < 4:
        raise ValueError("tabular generators need P >= 4")
    _check_common(n, noise_std)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    x = rng.standard_normal(n)
    F = tabular_signal(kind, z, x, rng, P)
    Y = F + noise_std * rng.standard_normal(F.shape)
    return _labeled(Y, x, z)


def generate(kind, n=100, noise_std=0.1, seed=0, P=8) -> LabeledDataset:
    """Dispatch on generator kind; ``n`` is the total sample count."""
    if kind == "survival_toy":
        return generate_survival_toy(n, noise_std, seed)
    if kind == "rings":
        return generate_rings(max(n // 5, 2), 5, noise_std, seed)
    if kind == "pinwheel":
        return generate_pinwheel(max(n // 5, 2), 5, noise_std, seed)
    if kind in TABULAR_KINDS:
        return generate_tabular(kind, n, P, noise_std, seed)
    raise ValueError(f"unknown generator kind {kind!r}; choose from {', '.join(GENERATOR_KINDS)}")


# ---------------------------------------------------------------------------
# censoring


@dataclass(frozen=True)
class FixedLower:
    """Censor the given rows with a common lower bound."""

    lower: float
    rows: Sequence[int] = (0,)


@dataclass(frozen=True)
class Fraction:
    """Censor a random fraction of rows at ``true value - offset``."""

    p: float
    offset: float = 0.5
    seed: int = 0


def apply_censoring(ld: LabeledDataset, scheme, covariate: int = 0, cap: float = None) -> Dataset:
    """Return a new dataset with some covariate entries censored.

    Censored entries store ``lower = a_i`` and ``upper = cap``; ``cap``
    defaults to three times the largest raw covariate value.
    """
    ds = ld.ds
    raw_X = ds.raw_X()
    if np.any(raw_X[:, covariate] <= 0):
        raise ValueError("censoring requires a positive covariate")
    if cap is None:
        cap = 3.0 * float(raw_X[:, covariate].max())
    censored = ds.censored.copy()
    lower = np.where(ds.censored, ds.lower, np.nan)
    upper = np.where(ds.censored, ds.upper, np.nan)

    if isinstance(scheme, FixedLower):
        rows = np.asarray(scheme.rows, dtype=int)
        bounds = np.full(rows.size, float(scheme.lower))
    elif isinstance(scheme, Fraction):
        if not 0 <= scheme.p <= 1:
            raise ValueError("censoring fraction must lie in [0, 1]")
        rng = np.random.default_rng(scheme.seed)
        k = int(round(scheme.p * ds.N))
        rows = np.sort(rng.choice(ds.N, size=k, replace=False))
        bounds = np.maximum(raw_X[rows, covariate] - scheme.offset, 1e-6)
    else:
        raise ValueError(f"unknown censoring scheme {scheme!r}")
    if rows.size == 0:
        return ds
    if np.any(bounds >= cap):
        raise ValueError(f"censoring lower bound must be below the lifespan cap {cap}")
    censored[rows, covariate] = True
    lower[rows, covariate] = bounds
    upper[rows, covariate] = cap
    work = raw_X.copy()
    work[rows, covariate] = bounds
    return Dataset(
        Y=ds.Y.copy(),
        X=(work - ds.x_shift) / ds.x_scale,
        censored=censored,
        lower=lower,
        upper=upper,
        feature_names=list(ds.feature_names),
        covariate_names=list(ds.covariate_names),
        y_shift=ds.y_shift.copy(),
        y_scale=ds.y_scale.copy(),
        x_shift=ds.x_shift.copy(),
        x_scale=ds.x_scale.copy(),
    )


# ---------------------------------------------------------------------------
# CSV / JSON


def _format_float(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def write_csv(path, header: Sequence[str], columns: Sequence) -> None:
    """Write equal-length numeric columns under ``header``."""
    cols = [np.asarray(c, dtype=float).ravel() for c in columns]
    if len({c.size for c in cols}) > 1:
        raise ValueError("all CSV columns must have the same length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_format_float(v) for v in row])


def read_csv_columns(path):
    """Parse a rectangular numeric CSV into ``(header, {name: column})``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvParseError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise CsvParseError(f"duplicate column names {dup}", 1)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
        try:
            data.append([float(v) for v in row])
        except ValueError as err:
            raise CsvParseError(f"non-numeric cell ({err})", lineno) from None
    if not data:
        raise CsvParseError("no data rows", 2)
    arr = np.array(data, dtype=float)
    return header, {h: arr[:, i] for i, h in enumerate(header)}


def load_csv(path, covariates: Sequence[str] = ("x",), censor_columns: Mapping[str, str] = None,
             upper: float = math.inf) -> Dataset:
    """Load a dataset; every column that is not a covariate or flag is a feature.

    ``censor_columns`` maps a covariate name to its 0/1 flag column.  For a
    flagged row the covariate value is the censoring lower bound.
    """
    header, cols = read_csv_columns(path)
    censor_columns = dict(censor_columns or {})
    missing = [c for c in list(covariates) + list(censor_columns.values()) if c not in cols]
    missing += [c for c in censor_columns if c not in covariates]
    if missing:
        raise CsvParseError(f"columns not found: {missing}")
    flags = set(censor_columns.values())
    features = [h for h in header if h not in covariates and h not in flags]
    if not features:
        raise CsvParseError("no feature columns")
    Y = np.column_stack([cols[f] for f in features])
    X = np.column_stack([cols[c] for c in covariates])
    if not np.all(np.isfinite(Y)) or not np.all(np.isfinite(X)):
        raise CsvParseError("missing or non-finite values")
    N, C = X.shape
    censored = np.zeros((N, C), bool)
    for c, name in enumerate(covariates):
        if name in censor_columns:
            flag = cols[censor_columns[name]]
            bad = ~np.isin(flag, (0.0, 1.0))
            if np.any(bad):
                line = int(np.flatnonzero(bad)[0]) + 2
                raise CsvParseError(f"censor flag column {censor_columns[name]!r} must be 0 or 1", line)
            censored[:, c] = flag == 1.0
    lower = np.where(censored, X, np.nan)
    up = np.where(censored, upper, np.nan)
    return Dataset.from_raw(Y, X, censored, lower, up, features, list(covariates))


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _encode(obj, out: io.StringIO, indent: int, level: int):
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            out.write("{}")
            return
        out.write("{")
        for i, (k, v) in enumerate(obj.items()):
            out.write(("," if i else "") + pad)
            out.write(_json_string(k) + ": ")
            _encode(v, out, indent, level + 1)
        out.write(end + "}")
    elif isinstance(obj, list):
        if not obj or all(not isinstance(v, (dict, list)) for v in obj):
            out.write("[" + ", ".join(_scalar(v) for v in obj) + "]")
            return
        out.write("[")
        for i, v in enumerate(obj):
            out.write(("," if i else "") + pad)
            _encode(v, out, indent, level + 1)
        out.write(end + "]")
    else:
        out.write(_scalar(obj))


def _json_string(s):
    return json.dumps(str(s), ensure_ascii=False)


def _scalar(v):
    if v is None:
        return "null"
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g") if math.isfinite(v) else "null"
    return _json_string(v)


def dumps_json(obj, indent: int = 1) -> str:
    """Deterministic JSON: insertion-ordered keys, floats with 17 significant digits.

    Non-finite floats become ``null``.
    """
    out = io.StringIO()
    _encode(_to_jsonable(obj), out, indent, 0)
    out.write("\n")
    return out.getvalue()


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(obj))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path

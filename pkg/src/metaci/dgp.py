"""Data-generating processes with known potential-outcome means.

Two families are provided:

* the advertisement DGP: ``q ~ N(0, I_p)``; a unit is treated when
  ``N(sum_{j<=5} f_j(q_j), 1) > 0``; outcomes are
  ``N(sum_{j<=5} f_{j+5}(q_j) + eta * t, theta)``;
* an IHDP-style DGP: eight infant/mother covariates (read from CSV or
  simulated), a logistic treatment rule, an additive response surface and
  heteroskedastic Gaussian noise.

Every generator draws features, treatment noise and outcome noise from
separate child streams of the supplied ``RngStream``. Two parameter sets
that differ only in outcome parameters therefore produce identical ``X``
and ``t`` from the same stream, which is what concept-shift families rely on.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .mathcore import RngStream

__all__ = [
    "AdDgpParams",
    "Basis",
    "BasisRegistry",
    "DEFAULT_BASIS",
    "Dataset",
    "Dgp",
    "IHDP_COLUMNS",
    "IhdpDgpParams",
    "generate_ad_dataset",
    "generate_ihdp_dataset",
    "ground_truth_ate",
    "load_ihdp_csv",
    "make_concept_shift_family",
]

_FEATURES, _TREATMENT, _OUTCOME = 0, 1, 2

_E_HALF = math.exp(0.5)
_E_MINUS_HALF = math.exp(-0.5)
_E_EIGHTH = math.exp(0.125)


@dataclass(frozen=True)
class Basis:
    name: str
    formula: str
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=np.float64))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# Each entry is centred so that E[f(q)] = 0 exactly for q ~ N(0, 1).
# f4 carries a minus sign relative to a plain centred exp(-x); with the
# other skewed terms (f2, f5) this keeps the treated share near one half.
_DEFAULT_BASES = (
    Basis("f1", "-2 sin(2x)", lambda x: -2.0 * np.sin(2.0 * x)),
    Basis("f2", "x^2 - 1", lambda x: x * x - 1.0),
    Basis("f3", "x", lambda x: x.copy()),
    Basis("f4", "e^(1/2) - e^(-x)", lambda x: _E_HALF - np.exp(-x)),
    Basis("f5", "(x - 1/2)^2 - 5/4", lambda x: (x - 0.5) ** 2 - 1.25),
    Basis("f6", "cos(x) - e^(-1/2)", lambda x: np.cos(x) - _E_MINUS_HALF),
    Basis("f7", "tanh(2x)", lambda x: np.tanh(2.0 * x)),
    Basis("f8", "e^(x/2) - e^(1/8)", lambda x: np.exp(0.5 * x) - _E_EIGHTH),
    Basis("f9", "x sin(x) - e^(-1/2)", lambda x: x * np.sin(x) - _E_MINUS_HALF),
    Basis("f10", "1 / (1 + e^(-3x)) - 1/2", lambda x: _sigmoid(3.0 * x) - 0.5),
)


@dataclass(frozen=True)
class BasisRegistry:
    """Ordered basis functions ``f_1 .. f_10`` used by the advertisement DGP."""

    functions: tuple[Basis, ...] = _DEFAULT_BASES

    def __post_init__(self):
        if len(self.functions) != 10:
            raise ConfigError(f"basis registry needs exactly 10 functions, got {len(self.functions)}")

    def __getitem__(self, j: int) -> Basis:
        """1-based access, ``registry[1]`` is f_1."""
        if not 1 <= j <= 10:
            raise IndexError(j)
        return self.functions[j - 1]

    def names(self) -> list[str]:
        return [f"{b.name} = {b.formula}" for b in self.functions]


DEFAULT_BASIS = BasisRegistry()


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Features, binary treatment, factual outcome and ground-truth means.

    Arrays are stored read-only. ``mu0``/``mu1`` may be ``None`` for data
    loaded without ground truth.
    """

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = _frozen(self.X)
        if X.ndim != 2:
            raise ConfigError(f"X must be 2-d, got shape {X.shape}")
        n = X.shape[0]
        object.__setattr__(self, "X", X)
        for name in ("t", "y", "mu0", "mu1"):
            v = getattr(self, name)
            if v is None:
                if name in ("t", "y"):
                    raise ConfigError(f"dataset column {name} is required")
                continue
            v = _frozen(v)
            if v.shape != (n,):
                raise ConfigError(f"{name} has shape {v.shape}, expected ({n},)")
            object.__setattr__(self, name, v)
        if not np.all((self.t == 0) | (self.t == 1)):
            raise ConfigError("treatments must be 0 or 1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.mu0 is not None and self.mu1 is not None

    @property
    def ite(self) -> np.ndarray:
        if not self.has_truth:
            raise ConfigError("dataset has no ground-truth potential outcomes")
        return self.mu1 - self.mu0

    def subset(self, idx, **meta) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return Dataset(self.X[idx], self.t[idx], self.y[idx], pick(self.mu0), pick(self.mu1),
                       {**self.meta, **meta})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for v in (self.X, self.t, self.y, self.mu0, self.mu1):
            if v is not None:
                h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def to_csv(self, path, include_truth: bool = True) -> None:
        """Write columns ``x1..xp, t, y[, mu0, mu1]``."""
        include_truth = include_truth and self.has_truth
        header = [f"x{j + 1}" for j in range(self.p)] + ["t", "y"]
        if include_truth:
            header += ["mu0", "mu1"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.n):
                row = [repr(float(v)) for v in self.X[i]] + [str(int(self.t[i])), repr(float(self.y[i]))]
                if include_truth:
                    row += [repr(float(self.mu0[i])), repr(float(self.mu1[i]))]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> Dataset:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        col = {h: i for i, h in enumerate(header)}
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
        truth = "mu0" in col and "mu1" in col
        return cls(
            data[:, xcols], data[:, col["t"]], data[:, col["y"]],
            data[:, col["mu0"]] if truth else None,
            data[:, col["mu1"]] if truth else None,
            {"source": str(path)},
        )


def ground_truth_ate(ds: Dataset) -> float:
    """Mean of ``mu1 - mu0`` over the rows of ``ds``."""
    if not ds.has_truth:
        raise ConfigError("ground_truth_ate needs mu0 and mu1")
    return float(np.mean(ds.mu1 - ds.mu0))


# --------------------------------------------------------------------------
# advertisement DGP


@dataclass(frozen=True)
class AdDgpParams:
    n: int = 2000
    p: int = 10
    eta: float = 1.0
    theta: float = 1.0
    basis: BasisRegistry = DEFAULT_BASIS

    #: fields that only affect Y | T, X
    OUTCOME_FIELDS = ("eta", "theta")

    def validate(self) -> AdDgpParams:
        if self.p < 5:
            raise ConfigError(f"advertisement DGP needs p >= 5 (q1..q5 are confounders), got {self.p}")
        if self.n < 20:
            raise ConfigError(f"advertisement DGP needs n >= 20, got {self.n}")
        if not self.theta > 0:
            raise ConfigError(f"theta must be positive, got {self.theta}")
        return self

    def snapshot(self) -> dict:
        return {"kind": "ad", "n": self.n, "p": self.p, "eta": self.eta, "theta": self.theta,
                "basis": self.basis.names()}


def generate_ad_dataset(params: AdDgpParams, rng: RngStream, n: int | None = None) -> Dataset:
    """Draw one advertisement dataset.

    ``theta`` is the standard deviation of the outcome noise. Only
    ``q_1..q_5`` enter treatment and outcome; the remaining columns are
    pure noise features.
    """
    params.validate()
    n = params.n if n is None else n
    f = params.basis
    X = rng.child(_FEATURES).standard_normal(n * params.p).reshape(n, params.p)
    score = sum(f[j](X[:, j - 1]) for j in range(1, 6))
    t = (score + rng.child(_TREATMENT).standard_normal(n) > 0).astype(np.float64)
    base = sum(f[j + 5](X[:, j - 1]) for j in range(1, 6))
    mu0 = base
    mu1 = base + params.eta
    y = np.where(t == 1, mu1, mu0) + params.theta * rng.child(_OUTCOME).standard_normal(n)
    return Dataset(X, t, y, mu0, mu1, {"dgp": "ad", "params": params.snapshot(), "rng": rng.record()})


# --------------------------------------------------------------------------
# IHDP-style DGP

IHDP_COLUMNS = ("momage", "bilirubin", "birthplace", "bw", "b_head", "preterm", "birth_o", "nnhealth")


@dataclass(frozen=True)
class IhdpDgpParams:
    """IHDP-style DGP. Covariates are z-scored (population std) before use.

    ``mu0 = intercept + sum_j linear[j] z_j + sum_j quadratic[j] (z_j^2 - 1)``,
    ``mu1 = mu0 + effect``; the noise standard deviation is
    ``noise_scale * (0.5 + 0.5 * sigmoid(sum_j noise_coef[j] z_j))``;
    ``P(t = 1) = sigmoid(treat_intercept + sum_j treat_coef[j] z_j)``.
    """

    csv_path: str | None = None
    n: int = 3984
    n_features: int = 8
    intercept: float = 1.0
    linear: tuple[float, ...] = (0.8, -0.6, 0.5, 0.4, -0.3, 0.3, -0.2, 0.2)
    quadratic: tuple[float, ...] = (0.3, 0.2, 0.0, 0.1, 0.0, 0.0, 0.1, 0.0)
    effect: float = 4.0
    noise_scale: float = 1.0
    noise_coef: tuple[float, ...] = (0.5, 0.5, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0)
    treat_intercept: float = 0.0
    treat_coef: tuple[float, ...] = (0.6, -0.5, 0.4, 0.3, 0.0, 0.0, 0.0, 0.0)

    OUTCOME_FIELDS = ("intercept", "linear", "quadratic", "effect", "noise_scale", "noise_coef")

    def validate(self) -> IhdpDgpParams:
        if self.n_features != len(IHDP_COLUMNS):
            raise ConfigError(f"IHDP DGP uses {len(IHDP_COLUMNS)} features, got {self.n_features}")
        for name in ("linear", "quadratic", "noise_coef", "treat_coef"):
            if len(getattr(self, name)) != self.n_features:
                raise ConfigError(f"{name} needs {self.n_features} coefficients")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if self.csv_path is None and self.n < 20:
            raise ConfigError(f"IHDP DGP needs n >= 20, got {self.n}")
        return self

    def snapshot(self) -> dict:
        d = asdict(self)
        d["kind"] = "ihdp"
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def load_ihdp_csv(path) -> np.ndarray:
    """Read the eight IHDP covariate columns (extra columns are ignored)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"IHDP csv not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        missing = [c for c in IHDP_COLUMNS if c not in header]
        if missing:
            raise ConfigError(f"IHDP csv {path} is missing columns: {', '.join(missing)}")
        cols = [header.index(c) for c in IHDP_COLUMNS]
        try:
            rows = [[float(r[i]) for i in cols] for r in reader if r]
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"IHDP csv {path}: unparseable row ({exc})") from None
    if len(rows) < 20:
        raise ConfigError(f"IHDP csv {path} has {len(rows)} rows, need at least 20")
    return np.array(rows, dtype=np.float64)


def _ihdp_stand_in(rng: RngStream, n: int) -> np.ndarray:
    X = np.empty((n, 8))
    X[:, 0] = rng.child(0).integers(15, 41, n)                    # momage: uniform 15..40
    X[:, 1] = np.exp(0.5 * rng.child(1).standard_normal(n))       # bilirubin: lognormal(0, 0.5)
    X[:, 2] = rng.child(2).integers(0, 4, n)                      # birthplace: 4 categories
    X[:, 3:] = rng.child(3).standard_normal(5 * n).reshape(n, 5)  # bw, b_head, preterm, birth_o, nnhealth
    return X


def generate_ihdp_dataset(params: IhdpDgpParams, rng: RngStream, n: int | None = None) -> Dataset:
    params.validate()
    if params.csv_path is not None:
        X = load_ihdp_csv(params.csv_path)
    else:
        n = params.n if n is None else n
        if n < 20:
            raise ConfigError(f"IHDP DGP needs at least 20 rows, got {n}")
        X = _ihdp_stand_in(rng.child(_FEATURES), n)
    n = X.shape[0]
    sd = X.std(axis=0)
    Z = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)

    logit = params.treat_intercept + Z @ np.asarray(params.treat_coef)
    t = (rng.child(_TREATMENT).uniform(n) < _sigmoid(logit)).astype(np.float64)

    mu0 = params.intercept + Z @ np.asarray(params.linear) + (Z * Z - 1.0) @ np.asarray(params.quadratic)
    mu1 = mu0 + params.effect
    noise_sd = params.noise_scale * (0.5 + 0.5 * _sigmoid(Z @ np.asarray(params.noise_coef)))
    y = np.where(t == 1, mu1, mu0) + noise_sd * rng.child(_OUTCOME).standard_normal(n)
    return Dataset(X, t, y, mu0, mu1, {"dgp": "ihdp", "params": params.snapshot(), "rng": rng.record()})


# --------------------------------------------------------------------------
# DGP handles and concept-shift families


@dataclass(frozen=True)
class Dgp:
    """A named, parameterised generator."""

    dgp_id: str
    params: AdDgpParams | IhdpDgpParams

    def generate(self, rng: RngStream, n: int | None = None) -> Dataset:
        if isinstance(self.params, AdDgpParams):
            ds = generate_ad_dataset(self.params, rng, n)
        else:
            ds = generate_ihdp_dataset(self.params, rng, n)
        return Dataset(ds.X, ds.t, ds.y, ds.mu0, ds.mu1, {**ds.meta, "dgp_id": self.dgp_id})

    def population_size(self, omega: int) -> int:
        """Rows needed for ``omega`` chunks.

        The advertisement DGP can generate as much data as needed, so
        ``params.n`` is the per-task size and the population holds
        ``omega * n`` rows. The IHDP population is fixed.
        """
        if isinstance(self.params, AdDgpParams):
            return omega * self.params.n
        return self.params.n

    def snapshot(self) -> dict:
        return {"dgp_id": self.dgp_id, **self.params.snapshot()}


def make_concept_shift_family(base, variants: Sequence[dict], prefix: str | None = None) -> list[Dgp]:
    """Build DGPs sharing the feature and treatment mechanism of ``base``.

    Each variant may override only outcome parameters; anything else would
    change ``P(X)`` or ``P(T | X)`` and turn concept shift into covariate
    shift.
    """
    if len(variants) < 2:
        raise ConfigError(f"a concept-shift family needs at least 2 variants, got {len(variants)}")
    allowed = set(base.OUTCOME_FIELDS)
    known = {f.name for f in fields(base)}
    prefix = prefix or ("ad" if isinstance(base, AdDgpParams) else "ihdp")
    family = []
    for i, override in enumerate(variants):
        bad = sorted(set(override) - allowed)
        if bad:
            kind = "unknown" if set(bad) - known else "non-outcome"
            raise ConfigError(f"variant {i} overrides {kind} parameters {bad}; "
                              f"allowed: {sorted(allowed)}")
        clean = {k: tuple(v) if isinstance(v, list) else v for k, v in override.items()}
        family.append(Dgp(f"{prefix}-{i}", replace(base, **clean).validate()))
    return family

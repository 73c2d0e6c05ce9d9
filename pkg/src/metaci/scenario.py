"""Scenario files: the JSON document driving ``metaci eval``.

Example::

    {
      "id": "covariate-shift-omega7",
      "dataset": {"kind": "ad", "params": {"n": 500}},
      "omega": 7, "k": 6,
      "scheme": {"kind": "single", "features": [0]},
      "concept_shift": null,
      "meta": {"R": 100, "checkpoint_every": 25, "inner": {"epochs": 16}},
      "grid": {"learning_rate": [0.01], "dropout": [0.0], "eps_phi": [0.5], "eps_h": [0.5]},
      "methods": ["MetaCI", "RandomCI"],
      "seeds": [0, 1, 2]
    }
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cinet import CIConfig
from .dgp import AdDgpParams, Dgp, IhdpDgpParams, make_concept_shift_family
from .errors import ConfigError
from .meta import EPS_PRESETS, MetaConfig
from .tasking import ChunkScheme, blocked_dgp_map

METHODS = ("MetaCI", "RandomCI", "CI_Omega", "MetaNN4", "RandomNN4", "Oracle")
_ALIASES = {"CI_Ω": "CI_Omega", "CI_omega": "CI_Omega", "oracle": "Oracle"}

DEFAULT_AD_VARIANTS = ({"theta": 1.0}, {"theta": 10.0}, {"theta": 20.0})
DEFAULT_IHDP_VARIANTS = (
    {"effect": 4.0, "noise_scale": 1.0},
    {"effect": 2.0, "noise_scale": 2.0},
    {"effect": 6.0, "noise_scale": 3.0},
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(_Strict):
    kind: Literal["ad", "ihdp"]
    params: dict = Field(default_factory=dict)


class SchemeSpec(_Strict):
    kind: Literal["single", "joint"] = "single"
    features: list[int] = Field(default_factory=lambda: [0])
    bins: Optional[int] = None


class ConceptShiftSpec(_Strict):
    dgp_count: int = Field(ge=2)
    chunk_map: Optional[list[int]] = None
    variants: Optional[list[dict]] = None


class GridSpec(_Strict):
    learning_rate: list[float] = Field(default_factory=lambda: [1e-3, 1e-2], min_length=1)
    dropout: list[float] = Field(default_factory=lambda: [0.0, 0.2], min_length=1)
    eps_phi: list[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0], min_length=1)
    eps_h: list[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0], min_length=1)


class Scenario(_Strict):
    id: str = "scenario"
    dataset: DatasetSpec
    omega: int = Field(ge=2)
    k: int = Field(ge=1)
    scheme: SchemeSpec = Field(default_factory=SchemeSpec)
    concept_shift: Optional[ConceptShiftSpec] = None
    meta: dict = Field(default_factory=dict)
    grid: GridSpec = Field(default_factory=GridSpec)
    regimes: Optional[list[str]] = None
    methods: list[str] = Field(default_factory=lambda: ["MetaCI", "RandomCI"], min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)

    @field_validator("scheme", mode="before")
    @classmethod
    def _scheme_shorthand(cls, v):
        if v == "single":
            return {"kind": "single", "features": [0]}
        if v == "joint":
            return {"kind": "joint", "features": [0, 1]}
        return v

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v):
        out = [_ALIASES.get(m, m) for m in v]
        bad = [m for m in out if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        return out

    @field_validator("seeds")
    @classmethod
    def _u64(cls, v):
        if any(not 0 <= s < 2**64 for s in v):
            raise ValueError("seeds must be unsigned 64-bit integers")
        return v

    @field_validator("regimes")
    @classmethod
    def _known_regimes(cls, v):
        if v is not None:
            bad = [r for r in v if r not in EPS_PRESETS]
            if bad:
                raise ValueError(f"unknown regimes {bad}; choose from {list(EPS_PRESETS)}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.k > self.omega - 1:
            raise ValueError(f"k={self.k} must lie in [1, omega-1={self.omega - 1}]")
        try:
            self.meta_config()
            self.chunk_scheme()
            self.family()
            self.dgp_map()
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        return self

    # -- derived objects ---------------------------------------------------

    def meta_config(self, **overrides) -> MetaConfig:
        fields = dict(self.meta)
        inner = dict(fields.pop("inner", {}))
        inner.update(overrides.pop("inner", {}))
        fields.update(overrides)
        try:
            return MetaConfig(inner=CIConfig(**inner), **fields)
        except TypeError as exc:
            raise ConfigError(f"bad meta config: {exc}") from None

    def chunk_scheme(self) -> ChunkScheme:
        return ChunkScheme(self.scheme.kind, tuple(self.scheme.features), self.scheme.bins)

    def base_params(self):
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in self.dataset.params.items()}
        cls = AdDgpParams if self.dataset.kind == "ad" else IhdpDgpParams
        try:
            return cls(**params).validate()
        except TypeError as exc:
            raise ConfigError(f"bad dataset params: {exc}") from None

    def family(self) -> list[Dgp]:
        base = self.base_params()
        if self.concept_shift is None:
            return [Dgp(f"{self.dataset.kind}-0", base)]
        variants = self.concept_shift.variants
        if variants is None:
            defaults = DEFAULT_AD_VARIANTS if self.dataset.kind == "ad" else DEFAULT_IHDP_VARIANTS
            if self.concept_shift.dgp_count > len(defaults):
                raise ConfigError(f"no default variants for {self.concept_shift.dgp_count} DGPs")
            variants = list(defaults[: self.concept_shift.dgp_count])
        if len(variants) != self.concept_shift.dgp_count:
            raise ConfigError(f"{len(variants)} variants given for dgp_count={self.concept_shift.dgp_count}")
        return make_concept_shift_family(base, variants)

    def dgp_map(self) -> tuple[int, ...] | None:
        if self.concept_shift is None:
            return None
        if self.concept_shift.chunk_map is not None:
            m = tuple(self.concept_shift.chunk_map)
            if len(m) != self.omega or any(not 0 <= d < self.concept_shift.dgp_count for d in m):
                raise ConfigError(f"chunk_map must give a DGP in [0, {self.concept_shift.dgp_count}) "
                                  f"for each of {self.omega} chunks")
            return m
        return blocked_dgp_map(self.omega, self.concept_shift.dgp_count)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_scenario(doc)


def parse_scenario(doc: dict) -> Scenario:
    try:
        return Scenario.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid scenario: {exc}") from None

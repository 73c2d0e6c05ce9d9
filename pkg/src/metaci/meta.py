"""Multi-Reptile outer loop, fine-tuning and checkpoint selection."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write_text, config_hash, save_checkpoint
from .cinet import CIConfig, NetParams, TrainResult, update_operator
from .errors import ConfigError, MetaCIError
from .mathcore import RngStream

log = logging.getLogger(__name__)

__all__ = [
    "EPS_PRESETS",
    "IterationLog",
    "MetaConfig",
    "MetaState",
    "MetaTrainError",
    "Selection",
    "fine_tune",
    "inner_rng",
    "meta_train",
    "reptile_step",
    "select_best",
]

_SAMPLER, _INNER = 0, 1

#: (eps_h, eps_phi) pairs for the three relative-adaptation regimes
EPS_PRESETS = {
    "h_gt_phi": (1.0, 0.1),
    "h_eq_phi": (0.5, 0.5),
    "h_lt_phi": (0.1, 1.0),
}


class MetaTrainError(MetaCIError):
    def __init__(self, iteration: int, task_id: int, cause: Exception):
        super().__init__(f"inner loop failed at iteration {iteration} on task {task_id}: {cause}")
        self.iteration = iteration
        self.task_id = task_id


@dataclass(frozen=True)
class MetaConfig:
    R: int = 1000
    eps_phi: float = 0.5
    eps_h: float = 0.5
    eps_schedule: str = "linear"
    checkpoint_every: int = 100
    sampling: str = "uniform"
    finetune_epochs: int = 64
    inner: CIConfig = field(default_factory=CIConfig)

    def __post_init__(self):
        if isinstance(self.inner, dict):
            object.__setattr__(self, "inner", CIConfig(**self.inner))
        if self.R < 1:
            raise ConfigError("R must be >= 1")
        for name in ("eps_phi", "eps_h"):
            eps = getattr(self, name)
            if not 0 < eps <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {eps}")
        if self.eps_schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown eps schedule {self.eps_schedule!r}")
        if self.sampling not in ("uniform", "cyclic"):
            raise ConfigError(f"unknown task sampling {self.sampling!r}")
        if not 1 <= self.checkpoint_every <= self.R:
            raise ConfigError(f"checkpoint_every must lie in [1, R={self.R}]")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")

    def eps_scale(self, r: int) -> float:
        """Multiplier on both rates at 0-based iteration ``r``."""
        return 1.0 if self.eps_schedule == "constant" else 1.0 - r / self.R

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inner"] = self.inner.to_dict()
        return d


@dataclass(frozen=True)
class IterationLog:
    iteration: int
    task_id: int
    train_objective: float
    val_objective: float | None
    eps_phi: float
    eps_h: float


@dataclass
class MetaState:
    params: NetParams
    iteration: int = 0
    checkpoints: dict[int, NetParams] = field(default_factory=dict)
    log: list[IterationLog] = field(default_factory=list)

    def mean_val_objective(self) -> float:
        vals = [e.val_objective for e in self.log if e.val_objective is not None]
        return float(np.mean(vals)) if vals else float("inf")


def reptile_step(current: NetParams, inner_result: NetParams, eps_phi: float, eps_h: float) -> NetParams:
    """Move each block toward the inner-loop result: ``W + eps (W~ - W)``.

    The representation block moves by ``eps_phi`` and the hypothesis block by
    ``eps_h``. A network without a representation block (NN4) has a single
    block that moves by ``eps_h``. A rate of exactly 1 copies the inner
    result.
    """
    if not current.same_structure(inner_result):
        raise ConfigError("reptile_step: parameter partitions do not match")

    def lerp(eps):
        def f(w, w_new):
            return w_new.copy() if eps == 1.0 else w + eps * (w_new - w)
        return f

    phi = tuple((lerp(eps_phi)(W, W2), lerp(eps_phi)(b, b2))
                for (W, b), (W2, b2) in zip(current.phi, inner_result.phi))
    h = tuple((lerp(eps_h)(W, W2), lerp(eps_h)(b, b2))
              for (W, b), (W2, b2) in zip(current.h, inner_result.h))
    return replace(current, phi=phi, h=h)


def inner_rng(rng: RngStream, iteration: int) -> RngStream:
    """Stream used by the inner update at 0-based meta-iteration ``iteration``."""
    return rng.child(_INNER, iteration)


def meta_train(train_tasks: Sequence, config: MetaConfig, init: NetParams, rng: RngStream,
               run_dir=None, seed_record: dict | None = None) -> MetaState:
    """Run ``config.R`` Reptile iterations from ``init``.

    Each iteration samples a train task (uniformly with replacement, or
    cyclically), trains a copy of the current weights on it for
    ``config.inner.epochs`` epochs and interpolates toward the result.
    Weights after every ``checkpoint_every``-th iteration are kept in
    ``state.checkpoints`` and, if ``run_dir`` is given, written to
    ``run_dir/ckpt-{r}.json``.
    """
    tasks = list(train_tasks)
    if not tasks:
        raise ConfigError("meta_train needs at least one train task")
    sampler = rng.child(_SAMPLER)
    state = MetaState(init)
    chash = config_hash(config.to_dict())
    run_dir = Path(run_dir) if run_dir is not None else None
    for r in range(config.R):
        if config.sampling == "cyclic":
            task = tasks[r % len(tasks)]
        else:
            task = tasks[int(sampler.integers(0, len(tasks), 1)[0])]
        scale = config.eps_scale(r)
        eps_phi, eps_h = config.eps_phi * scale, config.eps_h * scale
        try:
            res = update_operator(state.params, task, config.inner, inner_rng(rng, r))
        except Exception as exc:
            raise MetaTrainError(r + 1, task.task_id, exc) from exc
        state.params = reptile_step(state.params, res.params, eps_phi, eps_h)
        state.iteration = r + 1
        state.log.append(IterationLog(r + 1, task.task_id, res.train_objective,
                                      res.val_objective, eps_phi, eps_h))
        if state.iteration % config.checkpoint_every == 0:
            state.checkpoints[state.iteration] = state.params
            if run_dir is not None:
                save_checkpoint(run_dir / f"ckpt-{state.iteration}.json", state.params, chash, seed_record)
    if run_dir is not None:
        manifest = {
            "config": config.to_dict(),
            "config_hash": chash,
            "seed": seed_record or rng.record(),
            "checkpoints": sorted(state.checkpoints),
            "train_tasks": [t.task_id for t in tasks],
        }
        atomic_write_text(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return state


def fine_tune(checkpoint: NetParams, test_task, config: CIConfig, rng: RngStream,
              epochs: int = 64, record_curve: bool = False) -> TrainResult:
    """Train a copy of ``checkpoint`` on the test task's train split."""
    if "validation" not in test_task.splits:
        raise ConfigError("fine_tune needs a task with a validation split")
    return update_operator(checkpoint, test_task, config.replace(epochs=epochs), rng, record_curve)


@dataclass
class Selection:
    checkpoint_id: int
    hypers: dict
    result: TrainResult
    table: list = field(default_factory=list)  # (checkpoint id, hypers, validation objective, TrainResult)


def _grid_key(h: dict):
    return tuple(sorted(h.items()))


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of a ``name -> values`` grid, lexicographically ordered."""
    names = sorted(grid)
    combos = [dict(zip(names, vals)) for vals in itertools.product(*(grid[n] for n in names))]
    return sorted(combos, key=_grid_key)


def select_best(checkpoints: dict[int, NetParams], test_task, hyper_grid: Sequence[dict],
                config: CIConfig, rng: RngStream, epochs: int = 64,
                record_curve: bool = False) -> Selection:
    """Fine-tune every (checkpoint, hypers) pair and keep the lowest
    validation objective. Ties go to the earlier checkpoint, then to the
    lexicographically smaller hyper-parameter set. Every candidate is
    trained with an identical copy of ``rng``.
    """
    if not checkpoints:
        raise ConfigError("select_best needs at least one checkpoint")
    grid = sorted((dict(h) for h in hyper_grid), key=_grid_key) or [{}]
    best: Selection | None = None
    best_val = float("inf")
    table = []
    for cid in sorted(checkpoints):
        for hypers in grid:
            stream = RngStream(rng.seed, rng.stream_id, rng.path)
            res = fine_tune(checkpoints[cid], test_task, config.replace(**hypers), stream,
                            epochs, record_curve)
            val = res.val_objective if res.val_objective is not None else float("inf")
            table.append((cid, hypers, val, res))
            if best is None or val < best_val:
                best, best_val = Selection(cid, hypers, res), val
    best.table = table
    return best

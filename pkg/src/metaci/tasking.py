"""Meta-learning task construction.

A population is cut into ``omega`` contiguous chunks along one or more
confounding features. Task ``w`` keeps 60% of chunk ``w`` and takes the
remaining 40% in equal parts from the ``k`` chunks that cyclically follow
it. Under concept shift, each task's responses come from the DGP assigned
to its own chunk.

Rounding rules (all integer arithmetic):

* chunk sizes: ``N // omega``, the first ``N % omega`` chunks get one extra row;
* mixing: ``floor(0.6 |own|)`` own rows plus ``floor(0.4 |own| / k)`` rows
  per donor; whatever is left to reach ``|own|`` is also drawn from the
  own chunk;
* splits: 1:1 gives ``n - n // 2`` train and ``n // 2`` validation rows;
  2:1:1 gives ``n // 4`` validation and test rows and the rest to train.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dgp import Dataset, Dgp
from .errors import ConfigError
from .mathcore import RngStream, empirical_quantile

__all__ = [
    "ChunkAssignment",
    "ChunkScheme",
    "Task",
    "TaskSet",
    "blocked_dgp_map",
    "build_taskset",
    "chunk_population",
    "leave_one_out",
    "mix_chunks",
    "mix_counts",
    "split_sizes",
]

_MIX, _ORDER, _POPULATION = 1, 2, 0


@dataclass(frozen=True)
class ChunkScheme:
    """``single`` sorts on one column; ``joint`` sorts lexicographically on
    quantile bins of every listed column but the last, then on the raw
    value of the last column."""

    kind: str = "single"
    features: tuple[int, ...] = (0,)
    bins: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        if self.kind not in ("single", "joint"):
            raise ConfigError(f"unknown chunk scheme {self.kind!r}")
        if self.kind == "single" and len(self.features) != 1:
            raise ConfigError("single-feature scheme takes exactly one feature index")
        if self.kind == "joint" and len(self.features) < 2:
            raise ConfigError("joint scheme needs at least two feature indices")

    @classmethod
    def single(cls, index: int = 0) -> ChunkScheme:
        return cls("single", (index,))

    @classmethod
    def joint(cls, indices: Sequence[int] = (0, 1), bins: int | None = None) -> ChunkScheme:
        return cls("joint", tuple(indices), bins)

    def bin_count(self, omega: int) -> int:
        return self.bins if self.bins is not None else max(2, math.ceil(math.sqrt(omega)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "features": list(self.features), "bins": self.bins}


@dataclass(frozen=True, eq=False)
class ChunkAssignment:
    count: int
    assignment: np.ndarray
    scheme: ChunkScheme
    boundaries: tuple = ()

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.count).tolist()

    def members(self, chunk: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == chunk)


def _quantile_bins(col: np.ndarray, bins: int) -> np.ndarray:
    edges = [empirical_quantile(col, i / bins) for i in range(1, bins)]
    return np.searchsorted(np.asarray(edges), col, side="right")


def chunk_population(X: np.ndarray, omega_count: int, scheme: ChunkScheme | None = None) -> ChunkAssignment:
    scheme = scheme or ChunkScheme.single(0)
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if omega_count < 2:
        raise ConfigError(f"need at least 2 chunks, got {omega_count}")
    if omega_count > n:
        raise ConfigError(f"cannot cut {n} rows into {omega_count} chunks")
    for j in scheme.features:
        if not 0 <= j < p:
            raise ConfigError(f"chunk feature index {j} outside [0, {p})")
        if np.ptp(X[:, j]) == 0:
            raise ConfigError(f"chunk feature {j} is constant; quantiles are degenerate")

    if scheme.kind == "single":
        order = np.argsort(X[:, scheme.features[0]], kind="stable")
    else:
        bins = scheme.bin_count(omega_count)
        keys = [X[:, scheme.features[-1]]]
        keys += [_quantile_bins(X[:, j], bins) for j in reversed(scheme.features[:-1])]
        order = np.lexsort(keys)

    base, extra = divmod(n, omega_count)
    sizes = [base + (1 if c < extra else 0) for c in range(omega_count)]
    assignment = np.empty(n, dtype=np.int64)
    bounds = []
    start = 0
    for c, size in enumerate(sizes):
        rows = order[start:start + size]
        assignment[rows] = c
        bounds.append({j: [float(X[rows, j].min()), float(X[rows, j].max())] for j in scheme.features})
        start += size
    assignment.flags.writeable = False
    return ChunkAssignment(omega_count, assignment, scheme, tuple(bounds))


def mix_counts(own_size: int, k: int) -> tuple[int, int, int]:
    """``(own quota, per-donor quota, remainder from own)`` for a task."""
    if k < 1:
        raise ConfigError(f"mixing chunk count k must be >= 1, got {k}")
    own = (6 * own_size) // 10
    donor = (4 * own_size) // (10 * k)
    return own, donor, own_size - own - k * donor


def mix_chunks(assignment: ChunkAssignment, own: int, k: int, rng: RngStream) -> np.ndarray:
    """Row indices of the task built around chunk ``own``.

    Own-chunk rows (quota plus remainder) come first, then each donor's rows
    in donor order ``own + 1, own + 2, ... (mod count)``. Sampling is
    without replacement.
    """
    if not 1 <= k <= assignment.count - 1:
        raise ConfigError(f"k must lie in [1, {assignment.count - 1}], got {k}")
    if not 0 <= own < assignment.count:
        raise ConfigError(f"chunk id {own} outside [0, {assignment.count})")
    own_rows = assignment.members(own)
    own_quota, donor_quota, remainder = mix_counts(own_rows.size, k)
    parts = [rng.sample_without_replacement(own_rows, own_quota + remainder)]
    for step in range(1, k + 1):
        donor = (own + step) % assignment.count
        rows = assignment.members(donor)
        if rows.size < donor_quota:
            raise ConfigError(f"donor chunk {donor} has {rows.size} rows, quota is {donor_quota}")
        parts.append(rng.sample_without_replacement(rows, donor_quota))
    return np.concatenate(parts)


def split_sizes(n: int, ratio: str) -> tuple[int, ...]:
    if ratio == "1:1":
        return (n - n // 2, n // 2)
    if ratio == "2:1:1":
        q = n // 4
        return (n - 2 * q, q, q)
    raise ConfigError(f"unknown split ratio {ratio!r}")


_SPLIT_NAMES = ("train", "validation", "test")


def _splits(order: np.ndarray, ratio: str) -> dict[str, np.ndarray]:
    out, start = {}, 0
    for name, size in zip(_SPLIT_NAMES, split_sizes(order.size, ratio)):
        part = np.sort(order[start:start + size])
        part.flags.writeable = False
        out[name] = part
        start += size
    return out


@dataclass(frozen=True, eq=False)
class Task:
    task_id: int
    dataset: Dataset
    provenance: np.ndarray
    role: str
    splits: dict
    dgp_id: str
    order: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.dataset.n

    def split(self, name: str) -> Dataset:
        return self.dataset.subset(self.splits[name], split=name)

    def provenance_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.provenance, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def as_role(self, role: str) -> Task:
        ratio = "2:1:1" if role == "test" else "1:1"
        return replace(self, role=role, splits=_splits(self.order, ratio))


@dataclass(frozen=True, eq=False)
class TaskSet:
    tasks: tuple[Task, ...]
    omega: int
    k: int
    chunks: ChunkAssignment
    dgp_map: tuple[int, ...]
    dgps: tuple[dict, ...]
    seed: dict

    def manifest(self) -> dict:
        return {
            "omega": self.omega,
            "k": self.k,
            "scheme": self.chunks.scheme.to_dict(),
            "seed": self.seed,
            "chunk_sizes": self.chunks.sizes(),
            "chunk_boundaries": [{str(j): v for j, v in b.items()} for b in self.chunks.boundaries],
            "dgp_map": list(self.dgp_map),
            "dgps": list(self.dgps),
            "tasks": [
                {
                    "task_id": t.task_id,
                    "role": t.role,
                    "n": t.n,
                    "dgp_id": t.dgp_id,
                    "provenance_counts": {str(c): v for c, v in t.provenance_counts().items()},
                    "splits": {name: idx.tolist() for name, idx in t.splits.items()},
                    "checksum": t.dataset.checksum(),
                }
                for t in self.tasks
            ],
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True)

    def checksum(self) -> str:
        return hashlib.sha256(self.manifest_json().encode()).hexdigest()

    def write_manifest(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.manifest_json() + "\n")


def blocked_dgp_map(omega: int, dgp_count: int) -> tuple[int, ...]:
    """Contiguous blocks of chunks per DGP, e.g. 8 chunks / 2 DGPs -> 0,0,0,0,1,1,1,1."""
    if dgp_count < 1 or dgp_count > omega:
        raise ConfigError(f"cannot spread {omega} chunks over {dgp_count} DGPs")
    base, extra = divmod(omega, dgp_count)
    out = []
    for d in range(dgp_count):
        out += [d] * (base + (1 if d < extra else 0))
    return tuple(out)


def build_taskset(
    source: Dataset | Dgp | Sequence[Dgp],
    omega_count: int,
    k: int,
    scheme: ChunkScheme | None,
    rng: RngStream,
    concept_shift_map: Sequence[int] | None = None,
) -> TaskSet:
    """Create ``omega_count`` tasks from a population or a DGP family.

    With a family, every member generates the population from the same
    stream (hence identical features and treatments); task ``w`` takes its
    outcomes from ``family[concept_shift_map[w]]``.
    """
    if isinstance(source, Dataset):
        datasets, snapshots = [source], [{"dgp_id": "population"}]
        ids = ["population"]
    else:
        family = [source] if isinstance(source, Dgp) else list(source)
        if not family:
            raise ConfigError("empty DGP family")
        n_pop = family[0].population_size(omega_count)
        datasets = [d.generate(rng.child(_POPULATION), n_pop) for d in family]
        snapshots = [d.snapshot() for d in family]
        ids = [d.dgp_id for d in family]
        for ds in datasets[1:]:
            if not (np.array_equal(ds.X, datasets[0].X) and np.array_equal(ds.t, datasets[0].t)):
                raise ConfigError("family members disagree on features/treatments; "
                                  "only outcome parameters may vary")

    if concept_shift_map is None:
        dgp_map = (0,) * omega_count
    else:
        dgp_map = tuple(int(d) for d in concept_shift_map)
        if len(dgp_map) != omega_count or any(not 0 <= d < len(datasets) for d in dgp_map):
            raise ConfigError(f"concept-shift map must assign each of {omega_count} chunks "
                              f"to a DGP in [0, {len(datasets)})")
    if len(datasets) > 1 and len(set(dgp_map)) < 2 and concept_shift_map is None:
        raise ConfigError("a DGP family needs a concept-shift map")

    population = datasets[0]
    chunks = chunk_population(population.X, omega_count, scheme)
    if not 1 <= k <= omega_count - 1:
        raise ConfigError(f"k must lie in [1, {omega_count - 1}], got {k}")

    tasks = []
    for w in range(omega_count):
        idx = mix_chunks(chunks, w, k, rng.child(_MIX, w))
        d = dgp_map[w]
        ds = datasets[d].subset(idx, task_id=w, dgp_id=ids[d])
        order = rng.child(_ORDER, w).permutation(idx.size)
        order.flags.writeable = False
        prov = chunks.assignment[idx]
        prov.flags.writeable = False
        tasks.append(Task(w, ds, prov, "train", _splits(order, "1:1"), ids[d], order))
    return TaskSet(tuple(tasks), omega_count, k, chunks, dgp_map, tuple(snapshots), rng.record())


def leave_one_out(ts: TaskSet, test_id: int) -> tuple[list[Task], Task]:
    if not 0 <= test_id < len(ts.tasks):
        raise ConfigError(f"test task id {test_id} outside [0, {len(ts.tasks)})")
    train = [t.as_role("train") for t in ts.tasks if t.task_id != test_id]
    return train, ts.tasks[test_id].as_role("test")

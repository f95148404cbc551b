"""Spatial task datasets: CSV I/O, normalization, splits and a synthetic benchmark.

A *task* is one (region, attribute) pair holding ``N`` location vectors of
width ``M + 2`` (two coordinates followed by ``M`` auxiliary features) and
``N`` scalar values.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

log = logging.getLogger(__name__)

TaskKey = tuple[str, str]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class NormRecord:
    """Per-column statistics used to (de-)normalize one task."""

    loc_mean: tuple[float, ...]
    loc_std: tuple[float, ...]
    y_mean: float
    y_std: float
    policy: str = "offline"
    warnings: tuple[str, ...] = ()

    def normalize_x(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.array(self.loc_mean)) / np.array(self.loc_std)

    def normalize_y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def denormalize_x(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * np.array(self.loc_std) + np.array(self.loc_mean)

    def denormalize_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.y_std + self.y_mean

    def denormalize_var(self, var: np.ndarray) -> np.ndarray:
        return np.asarray(var) * self.y_std**2

    def to_json(self) -> dict:
        return {"loc_mean": list(self.loc_mean), "loc_std": list(self.loc_std),
                "y_mean": self.y_mean, "y_std": self.y_std, "policy": self.policy,
                "warnings": list(self.warnings)}

    @classmethod
    def from_json(cls, d: Mapping) -> "NormRecord":
        return cls(tuple(d["loc_mean"]), tuple(d["loc_std"]), float(d["y_mean"]),
                   float(d["y_std"]), d.get("policy", "offline"), tuple(d.get("warnings", ())))


@dataclass(frozen=True)
class TaskDataset:
    region: str
    attribute: str
    x: np.ndarray  # (N, M + 2)
    y: np.ndarray  # (N,)
    record: NormRecord | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise DatasetError(f"task ({self.region}, {self.attribute}): {x.shape[0]} locations vs {y.shape[0]} values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def key(self) -> TaskKey:
        return (self.region, self.attribute)

    def __len__(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class DatasetCollection:
    tasks: Mapping[TaskKey, TaskDataset]
    n_aux: int = 0

    @property
    def n_features(self) -> int:
        return self.n_aux + 2

    @property
    def regions(self) -> list[str]:
        return sorted({r for r, _ in self.tasks})

    @property
    def attributes(self) -> list[str]:
        return sorted({c for _, c in self.tasks})

    def attributes_of(self, region: str) -> list[str]:
        return sorted(c for r, c in self.tasks if r == region)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks[k] for k in sorted(self.tasks))

    def __getitem__(self, key: TaskKey) -> TaskDataset:
        return self.tasks[key]

    def records(self) -> dict[TaskKey, NormRecord]:
        return {k: t.record for k, t in sorted(self.tasks.items()) if t.record is not None}

    def subset(self, regions: Iterable[str], attributes: Iterable[str]) -> "DatasetCollection":
        rs, cs = set(regions), set(attributes)
        return DatasetCollection(
            {k: t for k, t in self.tasks.items() if k[0] in rs and k[1] in cs}, self.n_aux
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.tasks):
            t = self.tasks[key]
            h.update(f"{key[0]}\x00{key[1]}\x00".encode())
            h.update(np.ascontiguousarray(t.x).tobytes())
            h.update(np.ascontiguousarray(t.y).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def csv_header(n_aux: int) -> list[str]:
    return ["region_id", "attribute_id", "x1", "x2", *[f"aux_{i + 1}" for i in range(n_aux)], "y"]


def load_csv(path: str | Path) -> DatasetCollection:
    """Read ``region_id,attribute_id,x1,x2,aux_1..aux_M,y`` rows grouped into tasks."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        n_aux = len(header) - 5
        if n_aux < 0 or header != csv_header(n_aux):
            raise DatasetError(f"{path}: bad header {header}; expected {csv_header(max(n_aux, 0))}")
        width = len(header)
        rows: dict[TaskKey, tuple[list, list]] = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{line}: expected {width} columns, got {len(row)}")
            try:
                nums = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise DatasetError(f"{path}:{line}: {exc}") from None
            if not all(math.isfinite(v) for v in nums):
                raise DatasetError(f"{path}:{line}: non-finite value")
            xs, ys = rows.setdefault((row[0].strip(), row[1].strip()), ([], []))
            xs.append(nums[:-1])
            ys.append(nums[-1])
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    tasks = {k: TaskDataset(k[0], k[1], np.array(xs), np.array(ys)) for k, (xs, ys) in rows.items()}
    return DatasetCollection(tasks, n_aux)


def write_csv(collection: DatasetCollection, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(collection.n_aux))
        for task in collection:
            for xi, yi in zip(task.x, task.y):
                w.writerow([task.region, task.attribute, *map(repr, xi.tolist()), repr(float(yi))])


def write_records(records: Mapping[TaskKey, NormRecord], path: str | Path) -> None:
    payload = {f"{r}/{c}": rec.to_json() for (r, c), rec in sorted(records.items())}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def read_records(path: str | Path) -> dict[TaskKey, NormRecord]:
    raw = json.loads(Path(path).read_text())
    out = {}
    for key, rec in raw.items():
        region, _, attribute = key.partition("/")
        out[(region, attribute)] = NormRecord.from_json(rec)
    return out


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def _stats(a: np.ndarray, label: str, warnings: list[str]) -> tuple[np.ndarray, np.ndarray]:
    a = a.reshape(-1, 1) if a.ndim == 1 else a
    mean = a.mean(axis=0)
    if a.shape[0] < 2:
        return mean, np.ones(a.shape[1])
    std = a.std(axis=0)
    bad = ~(std > 0)
    if bad.any():
        warnings.append(f"zero variance in {label} column(s) {np.flatnonzero(bad).tolist()}; std set to 1")
        std = np.where(bad, 1.0, std)
    return mean, std


def fit_record(x: np.ndarray, y: np.ndarray, policy: str = "offline",
               support_idx: Sequence[int] | None = None) -> NormRecord:
    """Statistics for one task.

    ``offline`` uses every point. ``support-only`` takes location statistics
    from all locations of the task (the grid geometry is known) but value
    statistics from the support rows only.
    """
    warnings: list[str] = []
    lm, ls = _stats(x, "location", warnings)
    if policy == "offline":
        yv = y
    elif policy == "support-only":
        if support_idx is None:
            raise ValueError("support-only normalization needs support indices")
        yv = y[np.asarray(support_idx)]
    else:
        raise ValueError(f"unknown normalization policy {policy!r}")
    ym, ys = _stats(yv[:, None], "value", warnings)
    for w in warnings:
        log.warning(w)
    return NormRecord(tuple(lm.tolist()), tuple(ls.tolist()), float(ym[0]), float(ys[0]),
                      policy, tuple(warnings))


def normalize_task(task: TaskDataset, policy: str = "offline",
                   support_idx: Sequence[int] | None = None) -> TaskDataset:
    rec = fit_record(task.x, task.y, policy, support_idx)
    return replace(task, x=rec.normalize_x(task.x), y=rec.normalize_y(task.y), record=rec)


def normalize(collection: DatasetCollection, policy: str = "offline") -> tuple[DatasetCollection, dict[TaskKey, NormRecord]]:
    """Standardize each task's location columns and values (per region, per attribute)."""
    tasks = {k: normalize_task(t, policy) for k, t in collection.tasks.items()}
    out = DatasetCollection(tasks, collection.n_aux)
    return out, out.records()


def denormalize(collection: DatasetCollection) -> DatasetCollection:
    tasks = {}
    for k, t in collection.tasks.items():
        if t.record is None:
            raise DatasetError(f"task {k}: no normalization record")
        tasks[k] = TaskDataset(t.region, t.attribute, t.record.denormalize_x(t.x), t.record.denormalize_y(t.y))
    return DatasetCollection(tasks, collection.n_aux)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


def _split_sizes(n: int, parts: Sequence[float]) -> tuple[int, int, int]:
    if len(parts) != 3:
        raise DatasetError(f"need three split parts, got {parts}")
    if all(float(p).is_integer() and p >= 1 for p in parts) and sum(parts) > 1.0 + 1e-9:
        sizes = tuple(int(p) for p in parts)
        if sum(sizes) > n:
            raise DatasetError(f"split counts {sizes} exceed {n} items")
        return sizes
    if abs(sum(parts) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions {parts} do not sum to 1")
    val = int(math.floor(parts[1] * n + 1e-9))
    tgt = int(math.floor(parts[2] * n + 1e-9))
    return n - val - tgt, val, tgt


@dataclass(frozen=True)
class Split:
    train: DatasetCollection
    validation: DatasetCollection
    target: DatasetCollection
    regions: tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]
    attributes: tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]

    def __iter__(self):
        return iter((self.train, self.validation, self.target))


def split(collection: DatasetCollection, regions: Sequence[float] = (0.8, 0.1, 0.1),
          attributes: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Partition regions and attributes into train/validation/target groups.

    Each part is a fraction (floored; the remainder goes to training) or,
    when all three are integers summing past 1, an item count.
    """
    rng = np.random.default_rng(seed)
    rs = collection.regions
    cs = collection.attributes
    rs = [rs[i] for i in rng.permutation(len(rs))]
    cs = [cs[i] for i in rng.permutation(len(cs))]
    nr = _split_sizes(len(rs), regions)
    nc = _split_sizes(len(cs), attributes)
    rparts = (rs[: nr[0]], rs[nr[0]: nr[0] + nr[1]], rs[nr[0] + nr[1]: sum(nr)])
    cparts = (cs[: nc[0]], cs[nc[0]: nc[0] + nc[1]], cs[nc[0] + nc[1]: sum(nc)])
    cols = [collection.subset(r, c) for r, c in zip(rparts, cparts)]
    for name, col in zip(("train", "validation", "target"), cols):
        if len(col) == 0:
            raise DatasetError(f"{name} split is empty (regions {nr}, attributes {nc})")
    train_r, train_c = set(rparts[0]), set(cparts[0])
    assert not (set(rparts[2]) & train_r) and not (set(cparts[2]) & train_c)
    return Split(*cols, tuple(tuple(sorted(p)) for p in rparts), tuple(tuple(sorted(p)) for p in cparts))


# --------------------------------------------------------------------------
# synthetic benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Gridded regions of Gaussian-random-field tasks with a shared trend family.

    Every task is ``a * GRF(length) + offset + slope . u + amp * sin(freq * (dir . u) + phase)``
    plus i.i.d. noise, on a ``grid x grid`` lattice over ``[-1, 1]^2``.
    """

    n_regions: int = 60
    n_attributes: int = 9
    grid: int = 16
    length_scale: tuple[float, float] = (0.15, 0.6)
    amplitude: tuple[float, float] = (0.3, 0.8)
    offset: tuple[float, float] = (-1.0, 1.0)
    slope: tuple[float, float] = (-1.0, 1.0)
    sin_amplitude: tuple[float, float] = (0.5, 1.5)
    sin_frequency: tuple[float, float] = (1.5, 3.0)
    noise_std: tuple[float, float] = (0.01, 0.1)
    seed: int = 0
    max_grid: int = 16

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                v = tuple(float(e) for e in v)
                object.__setattr__(self, f.name, v)
                if len(v) != 2 or v[0] > v[1]:
                    raise ValueError(f"{f.name}: need (lower, upper) with lower <= upper, got {v}")
        if self.length_scale[0] <= 0:
            raise ValueError("length_scale bounds must be positive")
        if self.n_regions < 1 or self.n_attributes < 1 or self.grid < 2:
            raise ValueError("need at least one region, one attribute and a 2x2 grid")

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"{path}: unknown synthetic config keys {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


def grid_locations(g: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, g)
    u1, u2 = np.meshgrid(axis, axis, indexing="xy")
    return np.column_stack([u1.ravel(), u2.ravel()])


def field_factor(locations: np.ndarray, length: float, jitter: float = 1e-8) -> np.ndarray:
    """Cholesky factor of the unit-amplitude squared-exponential grid covariance."""
    d2 = ((locations[:, None, :] - locations[None, :, :]) ** 2).sum(-1)
    cov = np.exp(-d2 / (2.0 * length**2)) + jitter * np.eye(len(locations))
    return np.linalg.cholesky(cov)


def sample_field(locations: np.ndarray, length: float, amplitude: float,
                 rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """``n`` zero-mean GRF draws (rows) with covariance ``a^2 exp(-d^2 / (2 l^2))``."""
    L = field_factor(locations, length)
    return amplitude * (L @ rng.standard_normal((len(locations), n))).T


def _log_uniform(rng, lo, hi) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> DatasetCollection:
    """Raw (unnormalized) synthetic tasks, ``n_regions x n_attributes`` of them."""
    if config.grid > config.max_grid:
        raise DatasetError(
            f"grid {config.grid} needs a {config.grid**2}x{config.grid**2} dense Cholesky; "
            f"use grid <= {config.max_grid} or raise max_grid"
        )
    rng = np.random.default_rng(config.seed)
    loc = grid_locations(config.grid)
    tasks = {}
    for r in range(config.n_regions):
        for c in range(config.n_attributes):
            length = _log_uniform(rng, *config.length_scale)
            amp = rng.uniform(*config.amplitude)
            offset = rng.uniform(*config.offset)
            slope = rng.uniform(*config.slope, size=2)
            s_amp = rng.uniform(*config.sin_amplitude)
            freq = rng.uniform(*config.sin_frequency)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            noise = rng.uniform(*config.noise_std)
            direction = np.array([np.cos(theta), np.sin(theta)])
            y = sample_field(loc, length, amp, rng)[0]
            y = y + offset + loc @ slope + s_amp * np.sin(freq * (loc @ direction) + phase)
            y = y + noise * rng.standard_normal(len(loc))
            key = (f"r{r:03d}", f"a{c:02d}")
            tasks[key] = TaskDataset(*key, loc.copy(), y)
    return DatasetCollection(tasks, 0)

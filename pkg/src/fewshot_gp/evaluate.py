"""Experiment runner: train methods, evaluate them on target tasks, sweep and ablate.

Metrics are always reported in the task's offline-normalized units so that
numbers from different methods and normalization policies are comparable.
Support sets for a given (seed, task, repeat) are identical across methods,
which is what makes the per-task paired t-tests meaningful.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy import stats

from . import __version__
from . import autodiff as ad
from .baselines import FineTunedNN, SharedNN, build_model, model_from_meta
from .data import (
    DatasetCollection,
    DatasetError,
    NormRecord,
    Split,
    SyntheticConfig,
    fit_record,
    generate_synthetic,
    load_csv,
    normalize,
    split,
)
from .gp import PRESETS, Architecture, Mode, Objective, SupportSet, gaussian_nll, mse
from .nn import Params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

POLICIES = ("support-only", "offline")
# experiment-level training defaults, merged under any ``train:`` section;
# eight episodes per step stays well inside the desk-scale time budget
TRAIN_DEFAULTS = {"batch_episodes": 8}


# --------------------------------------------------------------------------
# methods
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str
    mode: str = "full"
    objective: str | None = None  # None: use the experiment's training objective


ABLATIONS = {
    "ErrObj": MethodSpec("ErrObj", "ours", "full", "errobj"),
    "LikeObj": MethodSpec("LikeObj", "ours", "full", "likeobj"),
    "MarLikeObj": MethodSpec("MarLikeObj", "ours", "full", "marlikeobj"),
    "NoSptMean": MethodSpec("NoSptMean", "ours", "nosptmean", "errobj"),
    "ZeroMean": MethodSpec("ZeroMean", "ours", "zeromean", "errobj"),
}
KINDS = ("ours", "gpr", "np", "nn", "ft")


def parse_method(name: str) -> MethodSpec:
    """``ours``/``gpr``/``np``/``nn``/``ft`` or one of the ablation variant names."""
    for key, spec in ABLATIONS.items():
        if name.lower() == key.lower():
            return spec
    kind = name.lower()
    if kind not in KINDS:
        raise ValueError(f"unknown method {name!r}; choose from {list(KINDS) + list(ABLATIONS)}")
    return MethodSpec(kind, kind)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything a run needs. Loaded from YAML; unknown keys are rejected."""

    synthetic: dict = field(default_factory=dict)
    csv: str | None = None
    regions: tuple = (40, 8, 12)
    attributes: tuple = (6, 2, 1)
    preset: str = "desk"
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    n_support: int = 5
    n_repeats: int = 5
    policy: str = "support-only"
    methods: tuple = ("ours", "gpr", "nn")
    seeds: tuple = (0, 1, 2, 3, 4)
    ft_epochs: int = 100
    noise_in_cross: bool = True

    def __post_init__(self):
        self.regions = tuple(self.regions)
        self.attributes = tuple(self.attributes)
        self.methods = tuple(self.methods)
        self.train = {**TRAIN_DEFAULTS, **self.train}
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.n_support < 1 or self.n_repeats < 1:
            raise ValueError("n_support and n_repeats must be >= 1")
        for m in self.methods:
            parse_method(m)
        # fail early on bad nested keys
        self.architecture()
        self.train_config(0)
        SyntheticConfig(**self.synthetic)

    def architecture(self) -> Architecture:
        return replace(PRESETS[self.preset], **self.arch)

    def train_config(self, seed: int, **extra) -> TrainConfig:
        return TrainConfig(**{**self.train, **extra, "seed": seed})

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentConfig":
        if "config_hash" in raw and "config" in raw:  # a run manifest
            raw = raw["config"]
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        raw = {}
        if path is not None:
            raw = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(raw, dict):
                raise ValueError(f"{path}: expected a mapping at the top level")
            if "config_hash" in raw and "config" in raw:
                raw = raw["config"]
        for item in overrides:
            apply_override(raw, item)
        return cls.from_dict(raw)


def apply_override(raw: dict, item: str) -> None:
    """``a.b=value`` with the value parsed as YAML (so ``[1, 2]`` and ``0.5`` work)."""
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ValueError(f"override {item!r} is not of the form key=value")
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {item!r}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(value)


# --------------------------------------------------------------------------
# data and training
# --------------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig, seed: int) -> DatasetCollection:
    """Raw collection for one experiment seed.

    Synthetic data is re-drawn per seed (base seed + experiment seed); a CSV
    dataset is fixed and only the split changes with the seed.
    """
    if cfg.csv is not None:
        return load_csv(cfg.csv)
    syn = SyntheticConfig(**cfg.synthetic)
    return generate_synthetic(replace(syn, seed=syn.seed + seed))


def prepare_split(cfg: ExperimentConfig, seed: int) -> tuple[Split, str]:
    raw = load_dataset(cfg, seed)
    norm, _ = normalize(raw, "offline")
    return split(norm, cfg.regions, cfg.attributes, seed), raw.fingerprint()


@dataclass
class Trained:
    spec: MethodSpec
    model: object
    params: Params
    result: TrainResult | None
    train_s: float = 0.0


def make_model(spec: MethodSpec, cfg: ExperimentConfig, n_features: int, objective: str):
    kind = "nn" if spec.kind == "ft" else spec.kind
    return build_model(kind, n_features, cfg.architecture(), spec.mode,
                       variance_head=objective == Objective.LIKE.value,
                       noise_in_cross=cfg.noise_in_cross)


def train_method(spec: MethodSpec, cfg: ExperimentConfig, data: Split, seed: int,
                 log_path: str | Path | None = None) -> Trained:
    tc = cfg.train_config(seed)
    objective = spec.objective or tc.objective
    tc = replace(tc, objective=objective)
    model = make_model(spec, cfg, data.train.n_features, objective)
    result = train(model, tc, data.train, data.validation, log_path=log_path)
    if spec.kind == "ft":
        model = FineTunedNN(model, cfg.ft_epochs)
    return Trained(spec, model, result.params, result)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


METRICS = ("mse", "loglik")


@dataclass
class EvalReport:
    """Raw per-(method, seed, task, repeat) metrics plus timings; aggregates derive from them."""

    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    policy: str = "support-only"

    RAW_FIELDS = ("method", "seed", "region", "attribute", "repeat", "n_support", "mse", "loglik")

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.records.extend(other.records)
        self.timings.extend(other.timings)
        return self

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.records))

    def units(self, method: str, metric: str = "mse") -> dict[tuple, float]:
        """Per-task value averaged over repeats, keyed by (seed, region, attribute, n_support)."""
        acc: dict[tuple, list[float]] = {}
        for r in self.records:
            if r["method"] == method and r[metric] is not None:
                acc.setdefault((r["seed"], r["region"], r["attribute"], r["n_support"]), []).append(r[metric])
        return {k: math.fsum(v) / len(v) for k, v in sorted(acc.items())}

    def summary(self, metric: str = "mse") -> dict[str, tuple[float, float, int]]:
        """Mean, standard error and number of task units per method."""
        out = {}
        for m in self.methods:
            vals = np.array(list(self.units(m, metric).values()))
            if len(vals) == 0:
                continue
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")
            out[m] = (math.fsum(vals) / len(vals), se, len(vals))
        return out

    def paired(self, a: str, b: str, metric: str = "mse") -> dict:
        """Two-sided paired t-test of ``a`` against ``b`` over shared task units."""
        ua, ub = self.units(a, metric), self.units(b, metric)
        keys = sorted(set(ua) & set(ub))
        if len(keys) < 2:
            raise ValueError(f"paired test {a} vs {b}: need >= 2 shared units, have {len(keys)}")
        xa = np.array([ua[k] for k in keys])
        xb = np.array([ub[k] for k in keys])
        res = stats.ttest_rel(xa, xb)
        return {"a": a, "b": b, "metric": metric, "n": len(keys),
                "mean_diff": float(np.mean(xa - xb)), "t": float(res.statistic), "p": float(res.pvalue)}

    def tests_against_best(self, metric: str = "mse") -> list[dict]:
        summ = self.summary(metric)
        if not summ:
            return []
        pick = min if metric == "mse" else max
        best = pick(summ, key=lambda m: summ[m][0])
        return [{**self.paired(m, best, metric), "best": best} for m in summ if m != best]

    # ------------------------------------------------------------------ I/O

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "raw.csv", self.RAW_FIELDS, self.records)
        rows = []
        for metric in METRICS:
            for m, (mean, se, n) in self.summary(metric).items():
                rows.append({"metric": metric, "method": m, "mean": mean, "se": se, "n": n})
        _write_rows(out / "summary.csv", ("metric", "method", "mean", "se", "n"), rows)
        tests = [t for metric in METRICS for t in self.tests_against_best(metric)]
        _write_rows(out / "tests.csv", ("metric", "a", "b", "best", "n", "mean_diff", "t", "p"), tests)
        _write_rows(out / "timings.csv", ("method", "seed", "train_s", "test_s_per_region"), self.timings)

    @classmethod
    def read_raw(cls, path: str | Path) -> "EvalReport":
        rep = cls()
        with Path(path).open(newline="") as fh:
            for r in csv.DictReader(fh):
                rep.records.append({
                    "method": r["method"], "seed": int(r["seed"]), "region": r["region"],
                    "attribute": r["attribute"], "repeat": int(r["repeat"]),
                    "n_support": int(r["n_support"]), "mse": float(r["mse"]),
                    "loglik": float(r["loglik"]) if r["loglik"] else None,
                })
        return rep


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Mapping]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


def _episode_view(task, s_idx: np.ndarray, policy: str):
    """Model-space support/query arrays plus the map back to offline-normalized units."""
    if policy == "offline":
        return task.x, task.y, 1.0, 0.0
    if task.record is None:
        raise DatasetError(f"task {task.key}: support-only evaluation needs the offline record")
    raw_x = task.record.denormalize_x(task.x)
    raw_y = task.record.denormalize_y(task.y)
    rec = fit_record(raw_x, raw_y, "support-only", s_idx)
    # y_offline = scale * y_model + shift
    scale = rec.y_std / task.record.y_std
    shift = (rec.y_mean - task.record.y_mean) / task.record.y_std
    return rec.normalize_x(raw_x), rec.normalize_y(raw_y), scale, shift


def evaluate(models: Mapping[str, tuple[object, Params]], target: DatasetCollection,
             n_support: int = 5, n_repeats: int = 5, seed: int = 0,
             policy: str = "support-only") -> EvalReport:
    """Predict every non-support point of every target task, ``n_repeats`` support draws each."""
    if len(target) == 0:
        raise ValueError("evaluate: empty target collection")
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    for name, (model, _) in models.items():
        if model.n_features != target.n_features:
            raise ValueError(f"{name}: model expects {model.n_features} location features, "
                             f"target data has {target.n_features}")
    tasks = list(target)
    for t in tasks:
        if len(t) <= n_support:
            raise ValueError(f"task {t.key} has {len(t)} points; need more than n_support={n_support}")
    draws = []
    for i, t in enumerate(tasks):
        rng = np.random.default_rng([seed, i])
        draws.append([rng.permutation(len(t)) for _ in range(n_repeats)])

    report = EvalReport(policy=policy)
    n_regions = len({t.region for t in tasks})
    for name, (model, params) in models.items():
        t0 = time.perf_counter()
        with ad.Tape(recording=False):
            for t, perms in zip(tasks, draws):
                for rep, perm in enumerate(perms):
                    s_idx, q_idx = perm[:n_support], perm[n_support:]
                    x, y, scale, shift = _episode_view(t, s_idx, policy)
                    mean, var = model.predict_episode(params, SupportSet(x[s_idx], y[s_idx]), x[q_idx])
                    mean = mean * scale + shift
                    yq = t.y[q_idx]
                    ll = None
                    if var is not None:
                        ll = -gaussian_nll(mean, var * (scale * scale), yq).item()
                    report.records.append({
                        "method": name, "seed": seed, "region": t.region, "attribute": t.attribute,
                        "repeat": rep, "n_support": n_support, "mse": mse(mean, yq).item(), "loglik": ll,
                    })
        report.timings.append({"method": name, "seed": seed, "train_s": None,
                               "test_s_per_region": (time.perf_counter() - t0) / n_regions})
    return report


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def run_seed(cfg: ExperimentConfig, seed: int, methods: Sequence[str],
             support_sizes: Sequence[int] | None = None,
             out_dir: str | Path | None = None) -> tuple[EvalReport, dict[str, Trained]]:
    """Train ``methods`` on one seed's split and evaluate them at each support size."""
    data, _ = prepare_split(cfg, seed)
    trained: dict[str, Trained] = {}
    for name in methods:
        spec = parse_method(name)
        log_path = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(out_dir) / f"train_log_{name}_seed{seed}.csv"
        t0 = time.perf_counter()
        trained[name] = train_method(spec, cfg, data, seed, log_path)
        trained[name].train_s = time.perf_counter() - t0
    report = EvalReport(policy=cfg.policy)
    for ns in support_sizes or (cfg.n_support,):
        part = evaluate({n: (t.model, t.params) for n, t in trained.items()}, data.target,
                        ns, cfg.n_repeats, seed, cfg.policy)
        for row in part.timings:
            row["train_s"] = trained[row["method"]].train_s
        report.extend(part)
    return report, trained


def run_experiment(cfg: ExperimentConfig, methods: Sequence[str] | None = None,
                   support_sizes: Sequence[int] | None = None,
                   out_dir: str | Path | None = None) -> EvalReport:
    report = EvalReport(policy=cfg.policy)
    for seed in cfg.seeds:
        part, _ = run_seed(cfg, seed, methods or cfg.methods, support_sizes, out_dir)
        report.extend(part)
    return report


SWEEP_AXES = ("support_size", "n_train_attributes", "n_train_regions")


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[int],
          methods: Sequence[str] | None = None, out_dir: str | Path | None = None) -> list[dict]:
    """Mean target MSE +- standard error per (axis value, method)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = [int(v) for v in values]
    if not values or values != sorted(values):
        raise ValueError("sweep values must be non-empty and sorted ascending")
    methods = list(methods or cfg.methods)
    rows = []
    if axis == "support_size":
        rep = run_experiment(cfg, methods, values)
        for v in values:
            sub = EvalReport([r for r in rep.records if r["n_support"] == v])
            rows += _sweep_rows(axis, v, sub, methods)
    else:
        limit = cfg.regions[0] if axis == "n_train_regions" else cfg.attributes[0]
        if values[0] < 1 or values[-1] > limit:
            raise ValueError(f"{axis} values must lie in [1, {limit}] for this split")
        for v in values:
            rep = EvalReport(policy=cfg.policy)
            for seed in cfg.seeds:
                data, _ = prepare_split(cfg, seed)
                data = _shrink_train(data, axis, v)
                models = {}
                for name in methods:
                    t = train_method(parse_method(name), cfg, data, seed)
                    models[name] = (t.model, t.params)
                rep.extend(evaluate(models, data.target, cfg.n_support, cfg.n_repeats, seed, cfg.policy))
            rows += _sweep_rows(axis, v, rep, methods)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_rows(Path(out_dir) / f"sweep_{axis}.csv", ("axis", "value", "method", "mean", "se", "n"), rows)
    return rows


def _shrink_train(data: Split, axis: str, v: int) -> Split:
    regions, attributes = data.regions[0], data.attributes[0]
    if axis == "n_train_regions":
        regions = regions[:v]
    else:
        attributes = attributes[:v]
    return replace(data, train=data.train.subset(regions, attributes))


def _sweep_rows(axis: str, value: int, rep: EvalReport, methods: Sequence[str]) -> list[dict]:
    summ = rep.summary("mse")
    return [{"axis": axis, "value": value, "method": m, "mean": summ[m][0], "se": summ[m][1],
             "n": summ[m][2]} for m in methods]


def ablate(cfg: ExperimentConfig, variants: Sequence[str] = tuple(ABLATIONS),
           out_dir: str | Path | None = None) -> tuple[list[dict], EvalReport]:
    """Train and evaluate ablation variants; rows are metrics, columns are variants."""
    names = [parse_method(v).name for v in variants]
    for n in names:
        if n not in ABLATIONS:
            raise ValueError(f"{n!r} is not an ablation variant; choose from {list(ABLATIONS)}")
    rep = run_experiment(cfg, names, out_dir=out_dir)
    table = []
    for metric in METRICS:
        summ = rep.summary(metric)
        row = {"metric": metric}
        for n in names:
            row[n] = f"{summ[n][0]:.4f} +- {summ[n][1]:.4f}" if n in summ else ""
        table.append(row)
    if out_dir is not None:
        _write_rows(Path(out_dir) / "ablation.csv", ("metric", *names), table)
        rep.write(out_dir)
    return table, rep


# --------------------------------------------------------------------------
# grid export
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """A ``resolution x resolution`` lattice over a box in normalized coordinates."""

    region: str
    resolution: int = 32
    bbox: tuple[float, float, float, float] = (-1.7, 1.7, -1.7, 1.7)  # x1 lo, x1 hi, x2 lo, x2 hi
    aux: tuple[float, ...] | np.ndarray = ()

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        lo1, hi1, lo2, hi2 = self.bbox
        if not (hi1 > lo1 and hi2 > lo2):
            raise ValueError(f"degenerate bounding box {self.bbox}")

    def locations(self, n_aux: int) -> np.ndarray:
        lo1, hi1, lo2, hi2 = self.bbox
        g1 = np.linspace(lo1, hi1, self.resolution)
        g2 = np.linspace(lo2, hi2, self.resolution)
        a, b = np.meshgrid(g1, g2, indexing="ij")
        xy = np.column_stack([a.ravel(), b.ravel()])
        aux = np.asarray(self.aux, dtype=np.float64)
        if n_aux == 0:
            return xy
        if aux.ndim == 1 and aux.shape[0] == n_aux:
            return np.hstack([xy, np.tile(aux, (len(xy), 1))])
        if aux.shape == (len(xy), n_aux):
            return np.hstack([xy, aux])
        raise ValueError(f"aux plane must have {n_aux} values or shape ({len(xy)}, {n_aux})")


GRID_HEADER = ("x1", "x2", "predicted_mean", "predicted_variance", "is_support")


def predict_grid(model, params: Params, support_x: np.ndarray, support_y: np.ndarray,
                 record: NormRecord | None, grid: GridSpec, out: str | Path | None = None) -> list[dict]:
    """Predict a lattice from raw-unit support observations; output in raw units.

    Lattice cells within 1e-9 (normalized) of a support location are snapped
    onto it so the prediction there uses the exact support location.
    """
    if record is None:
        raise DatasetError(f"region {grid.region}: no normalization record for grid export")
    sx = record.normalize_x(np.atleast_2d(support_x))
    sy = record.normalize_y(np.asarray(support_y).reshape(-1))
    n_aux = sx.shape[1] - 2
    cells = grid.locations(n_aux)
    lo1, hi1, lo2, hi2 = grid.bbox
    tol = 1e-9
    if ((sx[:, 0] < lo1 - tol) | (sx[:, 0] > hi1 + tol) | (sx[:, 1] < lo2 - tol) | (sx[:, 1] > hi2 + tol)).any():
        raise ValueError("support locations fall outside the grid bounding box")
    flag = np.zeros(len(cells), dtype=bool)
    for i, p in enumerate(sx):
        hit = np.flatnonzero(np.abs(cells - p).max(axis=1) <= tol)
        cells[hit] = p
        flag[hit] = True
    with ad.Tape(recording=False):
        mean, var = model.predict_episode(params, SupportSet(sx, sy), cells)
    mean_raw = record.denormalize_y(mean.value[:, 0])
    var_raw = record.denormalize_var(var.value[:, 0]) if var is not None else np.full(len(cells), np.nan)
    raw_cells = record.denormalize_x(cells)
    rows = [{"x1": float(c[0]), "x2": float(c[1]), "predicted_mean": float(m),
             "predicted_variance": float(v), "is_support": int(f)}
            for c, m, v, f in zip(raw_cells, mean_raw, var_raw, flag)]
    if out is not None:
        _write_rows(Path(out), GRID_HEADER, rows)
    return rows


# --------------------------------------------------------------------------
# checkpoints and manifests
# --------------------------------------------------------------------------


def save_trained(path: str | Path, t: Trained, cfg: ExperimentConfig, seed: int) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    meta = {**t.model.meta(), "method": t.spec.name, "seed": seed, "config_hash": cfg.digest()}
    if t.result is not None:
        meta.update(best_episode=t.result.best_episode, best_val=t.result.best_val,
                    episodes_run=t.result.episodes_run)
    save_checkpoint(path, t.params, meta)


def load_trained(path: str | Path) -> tuple[object, Params, dict]:
    params, meta = load_checkpoint(path)
    return model_from_meta(meta), params, meta


def write_manifest(path: str | Path, cfg: ExperimentConfig, seeds: Sequence[int],
                   dataset_hashes: Mapping[int, str], command: str, **extra) -> dict:
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seeds": list(seeds),
        "dataset_hash": {str(k): v for k, v in dataset_hashes.items()},
        "version": __version__,
        **extra,
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest

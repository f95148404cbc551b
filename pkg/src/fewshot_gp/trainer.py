"""Episodic meta-training: sample a task, split it into support/query, step Adam.

Validation runs every ``val_interval`` episodes on a fixed set of validation
episodes (drawn once per run) with dropout off; the best snapshot is returned
(early stopping).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import DatasetCollection
from .gp import Objective, SupportSet, mse, objective_loss
from .nn import AdamState, Params, adam_step

log = logging.getLogger(__name__)

MAX_RESAMPLES = 100
LOG_HEADER = ["episode", "train_loss", "val_loss", "val_mse", "wall_clock_ms"]


class TrainingAborted(RuntimeError):
    """Non-finite loss or unrecoverable Cholesky failure inside an episode."""

    def __init__(self, episode: int, region: str, attribute: str, cause: str):
        self.episode, self.region, self.attribute = episode, region, attribute
        super().__init__(f"episode {episode} (region={region}, attribute={attribute}): {cause}")


@dataclass(frozen=True)
class Episode:
    region: str
    attribute: str
    support: SupportSet
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray


def support_standardize(y_s: np.ndarray, y_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Re-express support and query values in units of the support's own mean/std."""
    mean = y_s.mean()
    std = y_s.std() if len(y_s) > 1 else 1.0
    if not std > 0:
        std = 1.0
    return (y_s - mean) / std, (y_q - mean) / std


def sample_episode(datasets: DatasetCollection, rng: np.random.Generator,
                   n_support: int, n_query: int, value_norm: str = "offline") -> Episode:
    """Region uniform over regions, attribute uniform within it, then disjoint support/query draws.

    With ``value_norm="support-only"`` the episode's values are re-standardized
    by the support statistics, matching how target tasks are seen at test time.
    """
    if value_norm not in ("offline", "support-only"):
        raise ValueError(f"unknown value_norm {value_norm!r}")
    if len(datasets) == 0:
        raise ValueError("sample_episode: no tasks")
    regions = datasets.regions
    by_region = {r: datasets.attributes_of(r) for r in regions}
    for _ in range(MAX_RESAMPLES):
        r = regions[rng.integers(len(regions))]
        attrs = by_region[r]
        c = attrs[rng.integers(len(attrs))]
        task = datasets[(r, c)]
        if len(task) < n_support + n_query:
            continue
        perm = rng.permutation(len(task))
        s_idx = perm[:n_support]
        q_idx = perm[n_support:n_support + n_query]
        y_s, y_q = task.y[s_idx], task.y[q_idx]
        if value_norm == "support-only":
            y_s, y_q = support_standardize(y_s, y_q)
        return Episode(r, c, SupportSet(task.x[s_idx], y_s), task.x[q_idx], y_q, s_idx, q_idx)
    raise ValueError(
        f"sample_episode: {MAX_RESAMPLES} consecutive tasks had fewer than "
        f"{n_support + n_query} points"
    )


@dataclass
class TrainConfig:
    n_support: int = 5
    n_query: int = 64
    objective: str = "errobj"
    max_episodes: int = 2000
    val_interval: int = 50
    val_episodes: int = 50
    patience: int = 10
    batch_episodes: int = 1
    lr: float = 1e-3
    seed: int = 0
    value_norm: str = "offline"

    def __post_init__(self):
        self.objective = Objective(self.objective).value
        self.lr = float(self.lr)  # YAML reads "1e-3" as a string
        if self.n_support < 1 or self.n_query < 1:
            raise ValueError("n_support and n_query must be >= 1")
        if self.max_episodes < 1 or self.val_interval < 1 or self.batch_episodes < 1:
            raise ValueError("max_episodes, val_interval and batch_episodes must be >= 1")
        if self.value_norm not in ("offline", "support-only"):
            raise ValueError(f"value_norm must be 'offline' or 'support-only', got {self.value_norm!r}")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


@dataclass
class LogRow:
    episode: int
    train_loss: float
    val_loss: float | None = None
    val_mse: float | None = None
    wall_clock_ms: float = 0.0


@dataclass
class TrainResult:
    params: Params
    log: list[LogRow]
    best_val: float
    best_episode: int
    episodes_run: int
    train_seconds: float
    checks: list[tuple[int, float]] = field(default_factory=list)


def loss_and_grads(model, params: Params, episode: Episode, objective, rng) -> tuple[float, dict]:
    with ad.Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        loss = objective_loss(model, objective, leaves, episode.support,
                              episode.query_x, episode.query_y, train=True, rng=rng)
    grads = ad.backward(tape, loss)
    return loss.item(), {k: grads[n] for k, n in leaves.items()}


def episode_losses(model, params: Params, episodes: Sequence[Episode], objective) -> list[float]:
    """Per-episode objective in inference mode (no dropout, nothing recorded)."""
    out = []
    with ad.Tape(recording=False):
        for ep in episodes:
            out.append(objective_loss(model, objective, params, ep.support, ep.query_x, ep.query_y).item())
    return out


def validate(model, params: Params, datasets: DatasetCollection, n_episodes: int,
             n_support: int, n_query: int, objective, rng: np.random.Generator) -> float:
    episodes = [sample_episode(datasets, rng, n_support, n_query) for _ in range(n_episodes)]
    return float(np.mean(episode_losses(model, params, episodes, objective)))


def _validate_both(model, params, episodes, config: TrainConfig) -> tuple[float, float]:
    obj = float(np.mean(episode_losses(model, params, episodes, config.objective)))
    if config.objective == Objective.ERR.value:
        return obj, obj
    with ad.Tape(recording=False):
        errs = [mse(model.predict_episode(params, ep.support, ep.query_x)[0], ep.query_y).item()
                for ep in episodes]
    return obj, float(np.mean(errs))


def train(model, config: TrainConfig, train_data: DatasetCollection,
          val_data: DatasetCollection, init_params: Params | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Episodic training with early stopping on the training objective."""
    seq = np.random.SeedSequence(config.seed)
    rng_init, rng_ep, rng_drop, rng_val = (np.random.default_rng(s) for s in seq.spawn(4))
    params = init_params if init_params is not None else model.init_params(int(rng_init.integers(2**31)))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    state = AdamState(lr=config.lr)
    # one fixed validation sample so successive checks are comparable
    val_set = [sample_episode(val_data, rng_val, config.n_support, config.n_query, config.value_norm)
               for _ in range(config.val_episodes)]

    rows: list[LogRow] = []
    checks: list[tuple[int, float]] = []
    best, best_ep, best_params, since = np.inf, 0, dict(params), 0
    t0 = time.perf_counter()
    fh = writer = None
    if log_path is not None:
        fh = Path(log_path).open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)

    def emit(row: LogRow):
        rows.append(row)
        if writer is not None:
            writer.writerow(_format_row(row))

    ep_i = 0
    try:
        for ep_i in range(1, config.max_episodes + 1):
            total, acc = 0.0, None
            for _ in range(config.batch_episodes):
                episode = sample_episode(train_data, rng_ep, config.n_support, config.n_query,
                                         config.value_norm)
                try:
                    loss, grads = loss_and_grads(model, params, episode, config.objective, rng_drop)
                except (ad.CholeskyError, ad.NonFiniteError) as exc:
                    raise TrainingAborted(ep_i, episode.region, episode.attribute, str(exc)) from exc
                if not np.isfinite(loss):
                    raise TrainingAborted(ep_i, episode.region, episode.attribute, "non-finite loss")
                total += loss
                acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
            if config.batch_episodes > 1:
                acc = {k: g / config.batch_episodes for k, g in acc.items()}
            params = adam_step(state, params, acc)

            row = LogRow(ep_i, total / config.batch_episodes)
            if ep_i % config.val_interval == 0 or ep_i == config.max_episodes:
                val, val_mse = _validate_both(model, params, val_set, config)
                row.val_loss, row.val_mse = val, val_mse
                checks.append((ep_i, val))
                if val < best:
                    best, best_ep, best_params, since = val, ep_i, dict(params), 0
                else:
                    since += 1
            row.wall_clock_ms = (time.perf_counter() - t0) * 1e3
            emit(row)
            if since > config.patience:
                log.info("early stop at episode %d (best %d, val %.4f)", ep_i, best_ep, best)
                break
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(best_params, rows, float(best), best_ep, ep_i, time.perf_counter() - t0, checks)


def _format_row(r: LogRow) -> list[str]:
    opt = lambda v: "" if v is None else repr(v)
    return [str(r.episode), repr(r.train_loss), opt(r.val_loss), opt(r.val_mse), f"{r.wall_clock_ms:.3f}"]


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(_format_row(r) for r in rows)

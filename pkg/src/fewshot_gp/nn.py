"""Feed-forward networks, Adam, and the parameter checkpoint container.

Parameters live in a flat ``dict[str, ndarray]`` keyed ``"<net>.W<i>"`` and
``"<net>.b<i>"`` so one optimizer state and one checkpoint format serve every
model in the package.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "fewshot-gp-checkpoint/1"

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(input, hidden..., output)`` plus output transform and dropout."""

    widths: tuple[int, ...]
    output: str = "identity"  # or "positive" (softplus + 1e-6)
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError(
                f"MlpSpec needs at least one hidden layer, got widths {self.widths}"
            )
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"MlpSpec widths must be positive, got {self.widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.output not in ("identity", "positive"):
            raise ValueError(f"unknown output transform {self.output!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


POSITIVE_FLOOR = 1e-6


def init_mlp(spec: MlpSpec, seed: int | np.random.Generator, prefix: str) -> Params:
    """He-normal weights (variance 2/fan_in), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: Params = {}
    for i, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params[f"{prefix}.W{i}"] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        params[f"{prefix}.b{i}"] = np.zeros((1, n_out))
    return params


def mlp_forward(
    spec: MlpSpec,
    params: Mapping[str, ad.Node | np.ndarray],
    prefix: str,
    x,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ad.Node:
    """Forward pass; ReLU hidden layers with inverted dropout when ``train``."""
    x = x if isinstance(x, ad.Node) else ad.constant(x)
    if x.shape[1] != spec.widths[0]:
        raise ad.ShapeError(f"mlp_forward[{prefix}]", x.shape, (x.shape[0], spec.widths[0]))
    use_dropout = train and spec.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("mlp_forward: rng is required for dropout in train mode")
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        if i < last:
            h = ad.relu(h)
            if use_dropout:
                keep = rng.random(h.shape) >= spec.dropout
                h = h * (keep / (1.0 - spec.dropout))
    if spec.output == "positive":
        h = ad.softplus(h) + POSITIVE_FLOOR
    return h


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
    """One bias-corrected Adam update. Returns new arrays; ``state`` is advanced in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adam_step: non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"adam_step[{name}]", g.shape, params[name].shape)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out: Params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: dict) -> None:
    """Write ``params`` and JSON metadata into a zip of ``.npy`` members.

    Member timestamps are fixed so identical parameters give identical bytes.
    """
    header = {"format": CHECKPOINT_FORMAT, **meta}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_TIME), json.dumps(header, sort_keys=True))
        for name in sorted(params):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(params[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", _ZIP_TIME), member.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        params = {}
        for info in zf.infolist():
            if info.filename.startswith("params/"):
                name = info.filename[len("params/"):-len(".npy")]
                params[name] = np.lib.format.read_array(io.BytesIO(zf.read(info)), allow_pickle=False)
    return params, meta


def spec_to_dict(spec: MlpSpec) -> dict:
    d = asdict(spec)
    d["widths"] = list(spec.widths)
    return d


def spec_from_dict(d: dict) -> MlpSpec:
    return MlpSpec(tuple(d["widths"]), d.get("output", "identity"), d.get("dropout", 0.0))

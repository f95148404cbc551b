"""Comparison models sharing the episodic interface of :class:`~fewshot_gp.gp.TaskGP`.

Every model exposes ``init_params(seed)``, ``predict_episode(params, support,
xq, train, rng) -> (mean, var | None)`` and ``meta()``; GP-type models also
provide ``marginal_log_likelihood``. The trainer never looks further than that.
"""

from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .gp import PRESETS, Architecture, GpPosterior, LOG_2PI, Mode, SupportSet, TaskGP, delta_mask, mse
from .nn import POSITIVE_FLOOR, AdamState, MlpSpec, Params, adam_step, init_mlp, mlp_forward

_FIRST = np.array([[1.0], [0.0]])
_SECOND = np.array([[0.0], [1.0]])


def _split_head(out: ad.Node):
    """Split a two-column head into ``(mean, softplus(raw) + floor)``."""
    return out @ _FIRST, ad.softplus(out @ _SECOND) + POSITIVE_FLOOR


class GPR:
    """Zero-mean GP with a Gaussian kernel on raw locations.

    Three log-hyperparameters (signal variance, length scale, noise variance)
    are shared across all tasks and trained episodically.
    """

    kind = "gpr"
    supports_marginal = True

    def __init__(self, n_features: int, noise_in_cross: bool = True,
                 init_signal: float = 1.0, init_length: float = 0.5, init_noise: float = 0.1):
        self.n_features = int(n_features)
        self.noise_in_cross = noise_in_cross
        self._init = (init_signal, init_length, init_noise)

    def init_params(self, seed: int = 0) -> Params:
        sf2, ell, sn2 = self._init
        return {
            "gpr.log_signal": np.array([[math.log(sf2)]]),
            "gpr.log_length": np.array([[math.log(ell)]]),
            "gpr.log_noise": np.array([[math.log(sn2)]]),
        }

    def meta(self) -> dict:
        return {"kind": self.kind, "n_features": self.n_features, "noise_in_cross": self.noise_in_cross}

    @staticmethod
    def hyperparameters(params) -> dict[str, float]:
        val = lambda k: float(np.exp(np.asarray(getattr(params[k], "value", params[k]))).item())
        return {"signal": val("gpr.log_signal"), "length": val("gpr.log_length"), "noise": val("gpr.log_noise")}

    def _cov(self, params, xa, xb) -> ad.Node:
        sf2 = ad.exp(params["gpr.log_signal"])
        inv2l2 = 0.5 * ad.exp(-2.0 * params["gpr.log_length"])
        d2 = ad.constant(((xa[:, None, :] - xb[None, :, :]) ** 2).sum(-1))
        return sf2 * ad.exp(-(d2 * inv2l2))

    def fit_posterior(self, params, support: SupportSet, train=False, rng=None) -> GpPosterior:
        sn2 = ad.exp(params["gpr.log_noise"])
        K = self._cov(params, support.x, support.x) + sn2 * delta_mask(support.x, support.x)
        zero = ad.constant(np.zeros((len(support), 1)))
        alpha = ad.cholesky_solve(K, support.y_col)
        return GpPosterior(None, sn2, support, None, K, zero, alpha)

    def predict(self, params, post: GpPosterior, xq, train=False, rng=None):
        xq = np.atleast_2d(xq)
        kq = self._cov(params, xq, post.support.x)
        if self.noise_in_cross:
            mask = delta_mask(xq, post.support.x)
            if mask.any():
                kq = kq + post.noise * mask
        mean = kq @ post.alpha
        v = ad.cholesky_solve(post.K, kq.T)
        quad = ad.sum_(kq.T * v, axis=0).T
        prior = ad.exp(params["gpr.log_signal"]) + post.noise
        return mean, ad.maximum(prior - quad, 0.0)

    def predict_episode(self, params, support, xq, train=False, rng=None):
        return self.predict(params, self.fit_posterior(params, support), xq)

    def marginal_log_likelihood(self, params, support, train=False, rng=None) -> ad.Node:
        post = self.fit_posterior(params, support)
        y = support.y_col
        return (-0.5 * ad.dot(ad.constant(y), post.alpha) - 0.5 * ad.logdet_spd(post.K)
                - 0.5 * len(support) * LOG_2PI)


class NeuralProcess:
    """Conditional neural process: mean-pooled encoder plus a decoder on ``[x, z]``."""

    kind = "np"
    supports_marginal = False

    def __init__(self, n_features: int, arch: Architecture = PRESETS["desk"], variance_head: bool = False):
        self.n_features = int(n_features)
        self.arch = arch
        self.variance_head = variance_head
        d, k, hid, p = self.n_features, arch.latent, arch.hidden(), arch.dropout
        self.specs = {
            "fz": MlpSpec((d + 1, *hid, k), dropout=p),
            "dec": MlpSpec((d + k, *hid, 2 if variance_head else 1), dropout=p),
        }

    def init_params(self, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        params: Params = {}
        for name in sorted(self.specs):
            params.update(init_mlp(self.specs[name], rng, name))
        return params

    def meta(self) -> dict:
        return {"kind": self.kind, "n_features": self.n_features, "arch": asdict(self.arch),
                "variance_head": self.variance_head}

    def encode_task(self, params, support: SupportSet, train=False, rng=None) -> ad.Node:
        pairs = np.hstack([support.x, support.y_col])
        return ad.mean(mlp_forward(self.specs["fz"], params, "fz", pairs, train, rng), axis=0)

    def predict_episode(self, params, support, xq, train=False, rng=None):
        xq = np.atleast_2d(xq)
        z = self.encode_task(params, support, train, rng)
        inp = ad.concat([ad.constant(xq), ad.matmul(np.ones((xq.shape[0], 1)), z)], axis=1)
        out = mlp_forward(self.specs["dec"], params, "dec", inp, train, rng)
        if self.variance_head:
            return _split_head(out)
        return out, None


class SharedNN:
    """One network from location to value, shared by all tasks; ignores the support set."""

    kind = "nn"
    supports_marginal = False

    def __init__(self, n_features: int, arch: Architecture = PRESETS["desk"], variance_head: bool = False):
        self.n_features = int(n_features)
        self.arch = arch
        self.variance_head = variance_head
        self.spec = MlpSpec((self.n_features, *arch.hidden(), 2 if variance_head else 1),
                            dropout=arch.dropout)

    def init_params(self, seed: int) -> Params:
        return init_mlp(self.spec, np.random.default_rng(seed), "net")

    def meta(self) -> dict:
        return {"kind": self.kind, "n_features": self.n_features, "arch": asdict(self.arch),
                "variance_head": self.variance_head}

    def nn_predict(self, params, xq, train=False, rng=None):
        out = mlp_forward(self.spec, params, "net", np.atleast_2d(xq), train, rng)
        if self.variance_head:
            return _split_head(out)
        return out, None

    def predict_episode(self, params, support, xq, train=False, rng=None):
        return self.nn_predict(params, xq, train, rng)


def ft_adapt(model: SharedNN, params: Params, support: SupportSet, epochs: int = 100,
             lr: float = 1e-3) -> Params:
    """Fine-tune a copy of the shared network on the support set (full-batch Adam on MSE)."""
    adapted = {k: v.copy() for k, v in params.items()}
    state = AdamState(lr=lr)
    for _ in range(epochs):
        with ad.Tape() as tape:
            leaves = {k: tape.leaf(v) for k, v in adapted.items()}
            mean, _ = model.nn_predict(leaves, support.x)
            loss = mse(mean, support.y)
        grads = ad.backward(tape, loss)
        adapted = adam_step(state, adapted, {k: grads[n] for k, n in leaves.items()})
    return adapted


class FineTunedNN:
    """Evaluation-time wrapper: adapt the shared network to each support set, then predict."""

    kind = "ft"
    supports_marginal = False

    def __init__(self, base: SharedNN, epochs: int = 100, lr: float = 1e-3):
        self.base = base
        self.epochs = epochs
        self.lr = lr
        self.n_features = base.n_features

    def meta(self) -> dict:
        return {**self.base.meta(), "kind": self.kind, "epochs": self.epochs, "lr": self.lr}

    def predict_episode(self, params, support, xq, train=False, rng=None):
        adapted = ft_adapt(self.base, params, support, self.epochs, self.lr)
        return self.base.nn_predict(adapted, xq)


def build_model(kind: str, n_features: int, arch: Architecture = PRESETS["desk"],
                mode: Mode | str = Mode.FULL, variance_head: bool = False,
                noise_in_cross: bool = True, ft_epochs: int = 100):
    kind = kind.lower()
    if kind == "ours":
        return TaskGP(n_features, arch, mode, noise_in_cross)
    if kind == "gpr":
        return GPR(n_features, noise_in_cross)
    if kind == "np":
        return NeuralProcess(n_features, arch, variance_head)
    if kind == "nn":
        return SharedNN(n_features, arch, variance_head)
    if kind == "ft":
        return FineTunedNN(SharedNN(n_features, arch, variance_head), ft_epochs)
    raise ValueError(f"unknown model kind {kind!r}")


def model_from_meta(meta: dict):
    """Rebuild a model object from checkpoint metadata."""
    arch = Architecture(**meta["arch"]) if "arch" in meta else PRESETS["desk"]
    kind = meta["kind"]
    if kind == "ft":
        return FineTunedNN(SharedNN(meta["n_features"], arch, meta.get("variance_head", False)),
                           meta.get("epochs", 100), meta.get("lr", 1e-3))
    return build_model(kind, meta["n_features"], arch, meta.get("mode", "full"),
                       meta.get("variance_head", False), meta.get("noise_in_cross", True))

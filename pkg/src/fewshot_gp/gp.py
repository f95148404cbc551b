"""Task-conditioned Gaussian process with neural mean and kernel functions.

A support set is encoded into a task vector ``z`` by mean-pooling a network
over its ``[x, y]`` pairs. ``z`` then conditions

* the mean function ``m(x; z) = f_m([x, z])``,
* the kernel ``k(x, x'; z) = exp(-|f_k([x, z]) - f_k([x', z])|^2) + f_b(z) * [x == x']``,

and queries are predicted with the usual GP posterior formulas. Everything is
built from :mod:`fewshot_gp.autodiff` nodes so the losses can be
differentiated with respect to all four networks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .nn import MlpSpec, Params, init_mlp, mlp_forward

LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR = 1e-8


class Mode(str, Enum):
    FULL = "full"
    NO_SUPPORT_MEAN = "nosptmean"
    ZERO_MEAN = "zeromean"


class Objective(str, Enum):
    ERR = "errobj"
    LIKE = "likeobj"
    MARLIKE = "marlikeobj"


@dataclass(frozen=True)
class Architecture:
    """Hidden width/depth shared by every network, latent size and dropout."""

    width: int = 64
    depth: int = 2
    latent: int = 32
    dropout: float = 0.1

    def hidden(self) -> tuple[int, ...]:
        return (self.width,) * self.depth


PRESETS = {
    "full": Architecture(width=256, depth=2, latent=256, dropout=0.1),
    "desk": Architecture(width=64, depth=2, latent=32, dropout=0.1),
    "tiny": Architecture(width=16, depth=2, latent=8, dropout=0.1),
}


@dataclass(frozen=True)
class SupportSet:
    x: np.ndarray  # (N, D)
    y: np.ndarray  # (N,)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"support set needs N >= 1 matching rows, got x{x.shape} y{y.shape}")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValueError("support set contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def y_col(self) -> np.ndarray:
        return self.y[:, None]


@dataclass
class GpPosterior:
    z: ad.Node
    noise: ad.Node  # f_b(z), 1x1
    support: SupportSet
    embeddings: ad.Node  # f_k([x_n, z]) rows
    K: ad.Node
    m_vec: ad.Node
    alpha: ad.Node  # K^-1 (y - m)


def delta_mask(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """1.0 where two raw location rows are exactly equal, else 0.0."""
    return (xa[:, None, :] == xb[None, :, :]).all(axis=-1).astype(np.float64)


def _tile(z: ad.Node, n: int) -> ad.Node:
    return ad.matmul(np.ones((n, 1)), z)


class TaskGP:
    """The few-shot spatial regression model.

    ``n_features`` is the location-vector width ``M + 2``. ``noise_in_cross``
    keeps the ``f_b(z) * delta`` term in the query/support cross-covariance
    when a query coincides with a support location (the literal kernel
    definition); set it False for the textbook noise-free cross-covariance.
    """

    kind = "ours"
    supports_marginal = True

    def __init__(
        self,
        n_features: int,
        arch: Architecture = PRESETS["desk"],
        mode: Mode | str = Mode.FULL,
        noise_in_cross: bool = True,
    ):
        self.n_features = int(n_features)
        self.arch = arch
        self.mode = Mode(mode)
        self.noise_in_cross = noise_in_cross
        d, k, hid, p = self.n_features, arch.latent, arch.hidden(), arch.dropout
        self.specs = {
            "fz": MlpSpec((d + 1, *hid, k), dropout=p),
            "fk": MlpSpec((d + k, *hid, k), dropout=p),
            "fb": MlpSpec((k, *hid, 1), output="positive", dropout=p),
        }
        if self.mode is Mode.FULL:
            self.specs["fm"] = MlpSpec((d + k, *hid, 1), dropout=p)
        elif self.mode is Mode.NO_SUPPORT_MEAN:
            self.specs["fm"] = MlpSpec((d, *hid, 1), dropout=p)

    def init_params(self, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        params: Params = {}
        for name in sorted(self.specs):
            params.update(init_mlp(self.specs[name], rng, name))
        return params

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "arch": asdict(self.arch),
            "mode": self.mode.value,
            "noise_in_cross": self.noise_in_cross,
        }

    def _net(self, name, params, x, train, rng) -> ad.Node:
        return mlp_forward(self.specs[name], params, name, x, train, rng)

    # -- components -------------------------------------------------------

    def encode_task(self, params, support: SupportSet, train=False, rng=None) -> ad.Node:
        """Mean of ``f_z([x_n, y_n])`` over the support set, shape (1, K)."""
        pairs = np.hstack([support.x, support.y_col])
        return ad.mean(self._net("fz", params, pairs, train, rng), axis=0)

    def mean_function(self, params, x: np.ndarray, z: ad.Node, train=False, rng=None) -> ad.Node:
        """Mean-function values at rows of ``x``, shape (n, 1)."""
        x = np.atleast_2d(x)
        if self.mode is Mode.ZERO_MEAN:
            return ad.constant(np.zeros((x.shape[0], 1)))
        if self.mode is Mode.NO_SUPPORT_MEAN:
            return self._net("fm", params, x, train, rng)
        inp = ad.concat([ad.constant(x), _tile(z, x.shape[0])], axis=1)
        return self._net("fm", params, inp, train, rng)

    def embed(self, params, x: np.ndarray, z: ad.Node, train=False, rng=None) -> ad.Node:
        x = np.atleast_2d(x)
        inp = ad.concat([ad.constant(x), _tile(z, x.shape[0])], axis=1)
        return self._net("fk", params, inp, train, rng)

    def noise(self, params, z: ad.Node, train=False, rng=None) -> ad.Node:
        return self._net("fb", params, z, train, rng)

    def kernel(self, params, xa: np.ndarray, xb: np.ndarray, z: ad.Node) -> ad.Node:
        """Kernel matrix between rows of ``xa`` and ``xb`` (inference mode, no dropout)."""
        xa, xb = np.atleast_2d(xa), np.atleast_2d(xb)
        ea, eb = self.embed(params, xa, z), self.embed(params, xb, z)
        b = self.noise(params, z)
        return ad.exp(-ad.sqdist(ea, eb)) + b * delta_mask(xa, xb)

    # -- posterior --------------------------------------------------------

    def fit_posterior(self, params, support: SupportSet, train=False, rng=None) -> GpPosterior:
        """Kernel matrix, its solve against ``y - m`` and everything queries reuse."""
        z = self.encode_task(params, support, train, rng)
        emb = self.embed(params, support.x, z, train, rng)
        b = self.noise(params, z, train, rng)
        K = ad.exp(-ad.sqdist(emb, emb)) + b * delta_mask(support.x, support.x)
        m_vec = self.mean_function(params, support.x, z, train, rng)
        alpha = ad.cholesky_solve(K, support.y_col - m_vec)
        return GpPosterior(z, b, support, emb, K, m_vec, alpha)

    def predict(self, params, post: GpPosterior, xq: np.ndarray, train=False, rng=None):
        """Posterior mean and variance at query rows, each (n, 1)."""
        xq = np.atleast_2d(xq)
        z, b = post.z, post.noise
        mq = self.mean_function(params, xq, z, train, rng)
        eq = self.embed(params, xq, z, train, rng)
        kq = ad.exp(-ad.sqdist(eq, post.embeddings))
        if self.noise_in_cross:
            mask = delta_mask(xq, post.support.x)
            if mask.any():
                kq = kq + b * mask
        mean = mq + kq @ post.alpha
        v = ad.cholesky_solve(post.K, kq.T)
        quad = ad.sum_(kq.T * v, axis=0).T
        var = ad.maximum((1.0 + b) - quad, 0.0)
        return mean, var

    def predict_episode(self, params, support: SupportSet, xq, train=False, rng=None):
        post = self.fit_posterior(params, support, train, rng)
        return self.predict(params, post, xq, train, rng)

    def marginal_log_likelihood(self, params, support: SupportSet, train=False, rng=None) -> ad.Node:
        """``log N(y | m, K)`` of the support values under the task prior."""
        post = self.fit_posterior(params, support, train, rng)
        r = support.y_col - post.m_vec
        n = len(support)
        return -0.5 * ad.dot(r, post.alpha) - 0.5 * ad.logdet_spd(post.K) - 0.5 * n * LOG_2PI


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mse(mean: ad.Node, y: np.ndarray) -> ad.Node:
    r = mean - np.asarray(y, dtype=np.float64).reshape(-1, 1)
    return ad.mean(r * r)


def gaussian_nll(mean: ad.Node, var: ad.Node, y: np.ndarray) -> ad.Node:
    """Mean negative log Gaussian density; variance floored at 1e-8."""
    var = ad.maximum(var, VARIANCE_FLOOR)
    r = mean - np.asarray(y, dtype=np.float64).reshape(-1, 1)
    return ad.mean(0.5 * ad.log(var) + 0.5 * LOG_2PI + (r * r) / (2.0 * var))


def loss_mse(model, params, support: SupportSet, xq, yq, train=False, rng=None) -> ad.Node:
    mean, _ = model.predict_episode(params, support, xq, train, rng)
    return mse(mean, yq)


def loss_nll(model, params, support: SupportSet, xq, yq, train=False, rng=None) -> ad.Node:
    mean, var = model.predict_episode(params, support, xq, train, rng)
    if var is None:
        raise ValueError(f"{model.kind}: no predictive variance; build it with a variance head")
    return gaussian_nll(mean, var, yq)


def objective_loss(
    model, objective: Objective | str, params: Mapping, support: SupportSet, xq, yq,
    train=False, rng=None,
) -> ad.Node:
    """Training loss for one episode under the chosen objective."""
    objective = Objective(objective)
    if objective is Objective.ERR:
        return loss_mse(model, params, support, xq, yq, train, rng)
    if objective is Objective.LIKE:
        return loss_nll(model, params, support, xq, yq, train, rng)
    if not getattr(model, "supports_marginal", False):
        raise ValueError(f"{model.kind}: marginal-likelihood objective needs a GP model")
    return -model.marginal_log_likelihood(params, support, train, rng)

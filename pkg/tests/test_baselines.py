import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_gp import autodiff as ad
from fewshot_gp.baselines import GPR, FineTunedNN, NeuralProcess, SharedNN, build_model, ft_adapt, model_from_meta
from fewshot_gp.data import SyntheticConfig, generate_synthetic, normalize
from fewshot_gp.gp import Architecture, Mode, SupportSet, TaskGP
from fewshot_gp.nn import mlp_forward
from fewshot_gp.trainer import TrainConfig, sample_episode, train
from oracles import gauss_jordan_inverse, sqdist_loops

SMALL = Architecture(width=16, depth=2, latent=8, dropout=0.1)


def _support(rng, n=5, d=2):
    return SupportSet(rng.uniform(-1, 1, (n, d)), rng.standard_normal(n))


def _val(node):
    return np.asarray(node.value if isinstance(node, ad.Node) else node)


def _gpr_oracle(sf2, ell, sn2, xs, y, xq):
    same = lambda A, B: np.array([[float(np.array_equal(a, b)) for b in B] for a in A])
    K = sf2 * np.exp(-sqdist_loops(xs, xs) / (2 * ell**2)) + sn2 * same(xs, xs)
    kq = sf2 * np.exp(-sqdist_loops(xq, xs) / (2 * ell**2)) + sn2 * same(xq, xs)
    inv, _ = gauss_jordan_inverse(K.tolist())
    mean = kq @ inv @ y
    var = sf2 + sn2 - np.einsum("ij,jk,ik->i", kq, inv, kq)
    return mean, var


def _gpr_params(sf2, ell, sn2):
    return {"gpr.log_signal": np.array([[math.log(sf2)]]), "gpr.log_length": np.array([[math.log(ell)]]),
            "gpr.log_noise": np.array([[math.log(sn2)]])}


# -- GPR -------------------------------------------------------------------


def test_gpr_matches_oracle():
    rng = np.random.default_rng(0)
    model = GPR(2)
    for _ in range(20):
        sf2, ell, sn2 = rng.uniform(0.3, 2), rng.uniform(0.2, 1.5), rng.uniform(0.01, 0.5)
        s = _support(rng)
        xq = np.vstack([rng.uniform(-1, 1, (3, 2)), s.x[:1]])
        mean, var = model.predict_episode(_gpr_params(sf2, ell, sn2), s, xq)
        om, ov = _gpr_oracle(sf2, ell, sn2, s.x, s.y, xq)
        assert np.allclose(_val(mean).ravel(), om, rtol=1e-8, atol=1e-12)
        assert np.allclose(_val(var).ravel(), np.maximum(ov, 0), rtol=1e-8, atol=1e-12)


def test_gpr_far_field():
    rng = np.random.default_rng(1)
    s = _support(rng)
    mean, var = GPR(2).predict_episode(_gpr_params(1.3, 0.2, 0.05), s, np.array([[50.0, 50.0]]))
    assert abs(_val(mean).item()) < 1e-12
    assert _val(var).item() == pytest.approx(1.35, abs=1e-12)


def test_gpr_interpolates_single_point():
    s = SupportSet(np.array([[0.3, -0.2]]), np.array([1.7]))
    mean, _ = GPR(2).predict_episode(_gpr_params(1.0, 0.5, 1e-12), s, s.x)
    assert abs(_val(mean).item() - 1.7) < 1e-3


def test_gpr_hyperparameters_positive():
    h = GPR.hyperparameters(_gpr_params(2.0, 0.5, 0.1))
    assert h == pytest.approx({"signal": 2.0, "length": 0.5, "noise": 0.1})


def _bridge_params(ell, sn2, d=2, arch=SMALL):
    """TaskGP weights whose kernel is the Gaussian kernel on raw inputs with constant noise."""
    model = TaskGP(d, arch, Mode.ZERO_MEAN)
    p = model.init_params(3)
    k, w = arch.latent, arch.width
    shift, scale = 10.0, 1.0 / (math.sqrt(2.0) * ell)
    W0 = np.zeros((d + k, w)); W0[:d, :d] = np.eye(d)
    b0 = np.zeros((1, w)); b0[0, :d] = shift
    W1 = np.zeros((w, w)); W1[:d, :d] = np.eye(d)
    W2 = np.zeros((w, k)); W2[:d, :d] = scale * np.eye(d)
    b2 = np.zeros((1, k)); b2[0, :d] = -scale * shift
    p.update({"fk.W0": W0, "fk.b0": b0, "fk.W1": W1, "fk.b1": np.zeros((1, w)), "fk.W2": W2, "fk.b2": b2})
    p["fb.W2"] = np.zeros_like(p["fb.W2"])
    p["fb.b2"] = np.array([[math.log(math.expm1(sn2 - 1e-6))]])
    return model, p


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), ell=st.floats(0.2, 2.0), sn2=st.floats(0.01, 1.0))
def test_gpr_equals_zero_mean_taskgp(seed, ell, sn2):
    rng = np.random.default_rng(seed)
    s = _support(rng)
    xq = np.vstack([rng.uniform(-1, 1, (4, 2)), s.x[2:3]])
    model, p = _bridge_params(ell, sn2)
    m1, v1 = model.predict_episode(p, s, xq)
    m2, v2 = GPR(2).predict_episode(_gpr_params(1.0, ell, sn2), s, xq)
    assert np.allclose(_val(m1), _val(m2), rtol=1e-8, atol=1e-10)
    assert np.allclose(_val(v1), _val(v2), rtol=1e-8, atol=1e-10)
    l1 = model.marginal_log_likelihood(p, s).item()
    l2 = GPR(2).marginal_log_likelihood(_gpr_params(1.0, ell, sn2), s).item()
    assert l1 == pytest.approx(l2, rel=1e-8)


# -- NP --------------------------------------------------------------------


def test_np_permutation_invariant():
    rng = np.random.default_rng(4)
    model = NeuralProcess(2, SMALL)
    p = model.init_params(0)
    s = _support(rng, 6)
    perm = rng.permutation(6)
    xq = rng.uniform(-1, 1, (3, 2))
    a, _ = model.predict_episode(p, s, xq)
    b, _ = model.predict_episode(p, SupportSet(s.x[perm], s.y[perm]), xq)
    assert np.allclose(_val(a), _val(b), rtol=0, atol=1e-14)


def test_np_zero_decoder():
    model = NeuralProcess(2, SMALL)
    p = {k: (np.zeros_like(v) if k.startswith("dec.") else v) for k, v in model.init_params(0).items()}
    mean, var = model.predict_episode(p, _support(np.random.default_rng(0)), np.zeros((4, 2)))
    assert np.all(_val(mean) == 0) and var is None


def test_np_variance_head_positive():
    model = NeuralProcess(2, SMALL, variance_head=True)
    _, var = model.predict_episode(model.init_params(0), _support(np.random.default_rng(0)), np.zeros((4, 2)))
    assert np.all(_val(var) >= 1e-6)


def test_np_does_not_interpolate_where_gp_does():
    raw = generate_synthetic(SyntheticConfig(n_regions=4, n_attributes=2, grid=8, seed=0))
    data, _ = normalize(raw)
    cfg = TrainConfig(n_query=16, max_episodes=100, val_interval=50, val_episodes=4, seed=0)
    np_model = NeuralProcess(2, SMALL)
    np_params = train(np_model, cfg, data, data).params
    gp_model = TaskGP(2, SMALL)
    gp_params = train(gp_model, cfg, data, data).params
    ep = sample_episode(data, np.random.default_rng(1), 5, 5)
    np_mean, _ = np_model.predict_episode(np_params, ep.support, ep.support.x)
    gp_mean, _ = gp_model.predict_episode(gp_params, ep.support, ep.support.x)
    assert np.max(np.abs(_val(gp_mean).ravel() - ep.support.y)) < 1e-8
    assert np.max(np.abs(_val(np_mean).ravel() - ep.support.y)) > 1e-2


# -- NN / FT ---------------------------------------------------------------


def test_nn_ignores_support():
    rng = np.random.default_rng(5)
    model = SharedNN(2, SMALL)
    p = model.init_params(0)
    xq = rng.uniform(-1, 1, (5, 2))
    a, _ = model.predict_episode(p, _support(rng), xq)
    b, _ = model.predict_episode(p, _support(rng, 3), xq)
    assert np.array_equal(_val(a), _val(b))


def test_nn_zero_params():
    model = SharedNN(2, SMALL)
    p = {k: np.zeros_like(v) for k, v in model.init_params(0).items()}
    out, _ = model.nn_predict(p, np.ones((3, 2)))
    assert np.all(_val(out) == 0)


def test_nn_matches_mlp_forward():
    model = SharedNN(2, SMALL)
    p = model.init_params(2)
    x = np.random.default_rng(0).uniform(-1, 1, (6, 2))
    a, _ = model.nn_predict(p, x)
    assert np.array_equal(_val(a), _val(mlp_forward(model.spec, p, "net", x)))


def test_ft_zero_epochs_is_identity():
    model = SharedNN(2, SMALL)
    p = model.init_params(0)
    out = ft_adapt(model, p, _support(np.random.default_rng(0)), epochs=0)
    assert all(np.array_equal(out[k], p[k]) for k in p) and all(out[k] is not p[k] for k in p)


def _support_mse(model, p, s):
    m, _ = model.nn_predict(p, s.x)
    return float(np.mean((_val(m).ravel() - s.y) ** 2))


def test_ft_improves_support_fit():
    raw = generate_synthetic(SyntheticConfig(n_regions=5, n_attributes=1, grid=8, seed=2))
    data, _ = normalize(raw)
    model = SharedNN(2, SMALL)
    for seed in range(5):
        p = model.init_params(seed)
        ep = sample_episode(data, np.random.default_rng(seed), 5, 1)
        before = _support_mse(model, p, ep.support)
        snapshot = {k: v.copy() for k, v in p.items()}
        adapted = ft_adapt(model, p, ep.support, epochs=100)
        assert _support_mse(model, adapted, ep.support) <= before
        assert all(np.array_equal(p[k], snapshot[k]) for k in p)


def test_ft_deterministic():
    model = SharedNN(2, SMALL)
    p = model.init_params(1)
    s = _support(np.random.default_rng(3))
    a, b = ft_adapt(model, p, s, 20), ft_adapt(model, p, s, 20)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_ft_wrapper_prediction():
    base = SharedNN(2, SMALL)
    p = base.init_params(1)
    s = _support(np.random.default_rng(3))
    ft = FineTunedNN(base, epochs=10)
    xq = np.zeros((2, 2))
    m, _ = ft.predict_episode(p, s, xq)
    ref, _ = base.nn_predict(ft_adapt(base, p, s, 10), xq)
    assert np.array_equal(_val(m), _val(ref))


@pytest.mark.parametrize("kind", ["ours", "gpr", "np", "nn", "ft"])
def test_build_and_rebuild_from_meta(kind):
    model = build_model(kind, 3, SMALL)
    again = model_from_meta(model.meta())
    assert type(again) is type(model) and again.meta() == model.meta()


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_model("maml", 2)


@pytest.mark.parametrize("kind", ["gpr", "np", "nn"])
def test_trainer_runs_every_baseline(kind):
    raw = generate_synthetic(SyntheticConfig(n_regions=3, n_attributes=1, grid=6, seed=0))
    data, _ = normalize(raw)
    res = train(build_model(kind, 2, SMALL), TrainConfig(n_query=8, max_episodes=20, val_interval=10,
                                                          val_episodes=2), data, data)
    assert np.isfinite(res.best_val)

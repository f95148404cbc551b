import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fewshot_gp import autodiff as ad
from fewshot_gp.nn import (
    AdamState,
    MlpSpec,
    adam_step,
    init_mlp,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)


def test_init_is_deterministic():
    spec = MlpSpec((3, 16, 16, 2))
    a, b = init_mlp(spec, 7, "f"), init_mlp(spec, 7, "f")
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_init_weight_variance_he_scaling():
    params = init_mlp(MlpSpec((256, 256, 256, 1)), 0, "f")
    var = params["f.W1"].var()
    assert abs(var - 2.0 / 256) <= 0.2 * 2.0 / 256
    assert not params["f.b1"].any()


@pytest.mark.parametrize(
    "kwargs",
    [dict(widths=(3, 1)), dict(widths=(3, 0, 1)), dict(widths=(3, 4, 1), dropout=1.0),
     dict(widths=(3, 4, 1), dropout=-0.1), dict(widths=(3, 4, 1), output="tanh")],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        MlpSpec(**kwargs)


def _zeros(spec, prefix="f"):
    return {k: np.zeros_like(v) for k, v in init_mlp(spec, 0, prefix).items()}


def test_zero_network_outputs_zero():
    spec = MlpSpec((4, 8, 8, 1))
    out = mlp_forward(spec, _zeros(spec), "f", np.random.default_rng(0).standard_normal((5, 4)))
    assert not out.value.any()


def test_zero_positive_network_is_log2():
    spec = MlpSpec((4, 8, 8, 1), output="positive")
    out = mlp_forward(spec, _zeros(spec), "f", np.ones((1, 4)))
    assert out.item() == pytest.approx(math.log(2.0) + 1e-6, abs=1e-15)


def test_input_width_checked():
    spec = MlpSpec((4, 8, 1))
    with pytest.raises(ad.ShapeError):
        mlp_forward(spec, init_mlp(spec, 0, "f"), "f", np.ones((2, 3)))


def test_dropout_zero_fraction():
    # one hidden layer of 10^4 units fed a positive input: every unit is active
    spec = MlpSpec((1, 10_000, 1), dropout=0.1)
    params = {"f.W0": np.ones((1, 10_000)), "f.b0": np.zeros((1, 10_000)),
              "f.W1": np.eye(10_000)[:, :1], "f.b1": np.zeros((1, 1))}
    rng = np.random.default_rng(0)
    zeroed = []
    for _ in range(5):
        keep = rng.random((1, 10_000)) >= 0.1
        zeroed.append(1.0 - keep.mean())
    # same mechanism as mlp_forward: count via the forward pass with a probing last layer
    rng = np.random.default_rng(0)
    fracs = []
    for _ in range(5):
        params["f.W1"] = np.ones((10_000, 1))
        out = mlp_forward(spec, params, "f", np.ones((1, 1)), train=True, rng=rng).item()
        fracs.append(1.0 - out * 0.9 / 10_000)
    for f in fracs:
        assert abs(f - 0.1) <= 0.01
    assert_allclose(fracs, zeroed, atol=1e-12)


def test_dropout_requires_rng():
    spec = MlpSpec((2, 4, 1), dropout=0.5)
    with pytest.raises(ValueError):
        mlp_forward(spec, init_mlp(spec, 0, "f"), "f", np.ones((1, 2)), train=True)


def test_inference_ignores_rng_and_dropout():
    spec = MlpSpec((2, 16, 16, 1), dropout=0.5)
    params = init_mlp(spec, 1, "f")
    x = np.random.default_rng(2).standard_normal((6, 2))
    a = mlp_forward(spec, params, "f", x).value
    b = mlp_forward(spec, params, "f", x, train=False, rng=np.random.default_rng(99)).value
    assert a.tobytes() == b.tobytes()


def test_dropout_expectation_matches_inference_for_linear_output():
    # single hidden layer: output is linear in the (masked) hidden activations
    spec = MlpSpec((2, 32, 1), dropout=0.2)
    params = init_mlp(spec, 3, "f")
    x = np.array([[0.3, -0.7]])
    ref = mlp_forward(spec, params, "f", x).item()
    rng = np.random.default_rng(4)
    draws = np.array([mlp_forward(spec, params, "f", x, True, rng).item() for _ in range(20_000)])
    se = draws.std() / math.sqrt(len(draws))
    assert abs(draws.mean() - ref) <= 4 * se


def test_positive_output_for_extreme_inputs():
    spec = MlpSpec((3, 8, 1), output="positive")
    params = init_mlp(spec, 0, "f")
    x = np.array([[1e3, -1e3, 5e2], [-1e4, 1e4, 0.0]])
    assert (mlp_forward(spec, params, "f", x).value > 0).all()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([[1.0, -2.0]])}
    out = adam_step(AdamState(), p, {"w": np.zeros((1, 2))})
    assert out["w"].tolist() == [[1.0, -2.0]]


def test_adam_first_step_hand_computed():
    state = AdamState()
    out = adam_step(state, {"t": np.array([[1.0]])}, {"t": np.array([[1.0]])})
    assert out["t"].item() == pytest.approx(1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)), abs=1e-15)
    assert state.t == 1


def test_adam_converges_on_quadratic():
    state = AdamState()
    p = {"t": np.array([[1.0]])}
    losses = []
    for _ in range(200):
        losses.append(p["t"].item() ** 2)
        p = adam_step(state, p, {"t": 2.0 * p["t"]})
    assert abs(p["t"].item()) < 0.9
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert state.t == 200


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step(AdamState(), {"w": np.ones((1, 1))}, {"w": np.array([[np.nan]])})


def test_adam_order_invariant():
    rng = np.random.default_rng(0)
    params = {k: rng.standard_normal((2, 3)) for k in "abc"}
    grads = {k: rng.standard_normal((2, 3)) for k in "abc"}
    fwd = adam_step(AdamState(), params, grads)
    rev = adam_step(AdamState(), dict(reversed(params.items())), dict(reversed(grads.items())))
    for k in params:
        assert fwd[k].tobytes() == rev[k].tobytes()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_and_determinism(tmp_path):
    params = init_mlp(MlpSpec((3, 5, 2)), 0, "f")
    meta = {"kind": "ours", "latent": 8}
    save_checkpoint(tmp_path / "a.ckpt", params, meta)
    save_checkpoint(tmp_path / "b.ckpt", params, meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    loaded, m = load_checkpoint(tmp_path / "a.ckpt")
    assert m["kind"] == "ours" and m["format"].startswith("fewshot-gp-checkpoint/")
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()

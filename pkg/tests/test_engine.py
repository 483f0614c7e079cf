from pathlib import Path

import numpy as np
import pytest

from conftest import mlp, numeric_grad, small_convnet
from shedlab.engine import (
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    NetworkSpec,
    OptimizerState,
    ParamStore,
    ReLU,
    StructuralError,
    backward,
    forward,
    sgd_step,
    softmax_cross_entropy,
)
from shedlab.pruning import MaskState

DATA = Path(__file__).parent / "data"


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[a, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


def test_identity_dense():
    net = NetworkSpec((4,), [Dense(4, 4)])
    params = ParamStore({"0.weight": np.eye(4), "0.bias": np.zeros(4)}, ("0.weight",))
    x = np.random.default_rng(1).standard_normal((3, 4))
    out, _ = forward(net, params, x)
    np.testing.assert_array_equal(out, x)


def test_zero_weights_zero_logits():
    net = small_convnet()
    params = net.init_params(np.random.default_rng(0))
    for k in params.tensors:
        if not k.endswith("gamma"):
            params.tensors[k][...] = 0.0
    out, _ = forward(net, params, np.random.default_rng(1).standard_normal((2, 3, 6, 6)))
    np.testing.assert_array_equal(out, 0.0)


def test_golden_logits():
    rng = np.random.Generator(np.random.PCG64(1234))
    tensors = {"0.weight": rng.standard_normal((4, 5)), "0.bias": rng.standard_normal(4),
               "2.weight": rng.standard_normal((3, 4)), "2.bias": rng.standard_normal(3)}
    x = rng.standard_normal((6, 5))
    net = mlp([5, 4, 3])
    out, _ = forward(net, ParamStore(tensors, net.prunable_names()), x)
    np.testing.assert_allclose(out, np.load(DATA / "golden_logits.npy"), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    layer = Conv2d(2, 3, 3, 2, stride, pad)
    p = {"weight": rng.standard_normal((3, 2, 3, 2)), "bias": rng.standard_normal(3)}
    x = rng.standard_normal((2, 2, 5, 6))
    out, _ = layer.forward(p, x, True)
    np.testing.assert_allclose(out, naive_conv(x, p["weight"], p["bias"], stride, pad), rtol=1e-12, atol=1e-12)
    assert out.shape[1:] == layer.output_shape((2, 5, 6))


def test_shape_mismatch():
    net = mlp([4, 3])
    params = net.init_params(np.random.default_rng(0))
    with pytest.raises(StructuralError):
        forward(net, params, np.zeros((2, 5)))
    with pytest.raises(StructuralError):
        NetworkSpec((4,), [Dense(5, 3)])


def test_forward_deterministic():
    net = small_convnet()
    params = net.init_params(np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((4, 3, 6, 6))
    a, _ = forward(net, params, x)
    b, _ = forward(net, params, x)
    np.testing.assert_array_equal(a, b)


LAYER_CASES = {
    "dense": lambda: NetworkSpec((5,), [Dense(5, 4), Dense(4, 3)]),
    "relu": lambda: NetworkSpec((5,), [Dense(5, 7), ReLU(), Dense(7, 3)]),
    "conv_stride1_pad1": lambda: NetworkSpec((2, 5, 5), [Conv2d(2, 3, 3, 3, 1, 1), Flatten(), Dense(75, 3)]),
    "conv_stride2": lambda: NetworkSpec((2, 6, 5), [Conv2d(2, 3, 2, 3, 2, 0), Flatten(), Dense(18, 3)]),
    "flatten": lambda: NetworkSpec((1, 3, 3), [Flatten(), Dense(9, 2)]),
    "batchnorm_dense": lambda: NetworkSpec((4,), [Dense(4, 6), BatchNorm(6), Dense(6, 3)]),
    "batchnorm_conv": lambda: NetworkSpec((2, 4, 4), [Conv2d(2, 3, 3, 3, 1, 1), BatchNorm(3), Flatten(),
                                                      Dense(48, 3)]),
    "convnet": small_convnet,
}


def gradient_check(net, seed, rtol=1e-4, atol=1e-8):
    rng = np.random.default_rng(seed)
    params = net.init_params(rng)
    for k, v in params.items():
        v += 0.1 * rng.standard_normal(v.shape)  # non-trivial biases and batchnorm affine terms
    x = rng.standard_normal((4,) + net.input_shape)
    proj = rng.standard_normal((4,) + net.output_shape)

    def loss():
        out, _ = forward(net, params, x)
        return float(np.sum(out * proj))

    _, cache = forward(net, params, x)
    grads = backward(cache, proj)
    for name, arr in params.items():
        np.testing.assert_allclose(grads[name], numeric_grad(loss, arr), rtol=rtol, atol=atol,
                                   err_msg=f"{name} seed {seed}")


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_gradient_check(case, seed):
    gradient_check(LAYER_CASES[case](), seed)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    _, g = softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


def test_zero_loss_grad_gives_zero_grads():
    net = small_convnet()
    params = net.init_params(np.random.default_rng(0))
    out, cache = forward(net, params, np.random.default_rng(1).standard_normal((3, 3, 6, 6)))
    for g in backward(cache, np.zeros_like(out)).values():
        np.testing.assert_array_equal(g, 0.0)


def test_duplicated_rows_double_gradient():
    net = mlp([5, 6, 3])
    params = net.init_params(np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((1, 5))
    y = np.array([2])
    out1, c1 = forward(net, params, x)
    g1 = backward(c1, softmax_cross_entropy(out1, y, "sum")[1])
    out2, c2 = forward(net, params, np.concatenate([x, x]))
    g2 = backward(c2, softmax_cross_entropy(out2, np.concatenate([y, y]), "sum")[1])
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-13, atol=1e-15)


def test_stale_cache():
    net = mlp([3, 2])
    params = net.init_params(np.random.default_rng(0))
    out, cache = forward(net, params, np.ones((2, 3)))
    grads = backward(cache, np.ones_like(out))
    sgd_step(params, grads, OptimizerState.for_params(params), lr=0.1)
    with pytest.raises(StructuralError):
        backward(cache, np.ones_like(out))


def _single(w, v, g):
    params = ParamStore({"w": np.array([w], dtype=float)}, ("w",))
    opt = OptimizerState(0.9, 0.0, {"w": np.array([v], dtype=float)})
    return params, opt, {"w": np.array([g], dtype=float)}


def test_sgd_momentum_hand_example():
    params, opt, grads = _single(1.0, 1.0, 0.5)
    sgd_step(params, grads, opt, lr=0.1)
    assert opt.velocity["w"][0] == pytest.approx(1.4, abs=1e-15)
    assert params["w"][0] == pytest.approx(0.86, abs=1e-15)


def test_sgd_plain_bit_exact():
    rng = np.random.default_rng(5)
    net = mlp([6, 5, 2])
    params = net.init_params(rng)
    before = params.copy()
    grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    sgd_step(params, grads, OptimizerState.for_params(params, momentum=0.0), lr=0.037)
    for k in params:
        assert np.array_equal(params[k], before[k] - 0.037 * grads[k])


def test_sgd_weight_decay_and_per_weight_decay():
    params, opt, grads = _single(2.0, 0.0, 0.0)
    opt.weight_decay = 0.5
    sgd_step(params, grads, opt, lr=0.1)
    assert params["w"][0] == pytest.approx(2.0 - 0.1 * 1.0)
    sgd_step(params, grads, opt, lr=0.1, decay={"w": np.array([0.0])})
    # decay 0 for this step: only momentum carries the weight
    assert opt.velocity["w"][0] == pytest.approx(0.9 * 1.0)


def test_sgd_masked_weights_zeroed():
    rng = np.random.default_rng(2)
    net = mlp([8, 6, 3])
    params = net.init_params(rng)
    mask = MaskState.fresh(params)
    mask.weight_kept[rng.random(mask.total) < 0.5] = False
    mask.weight_kept[: 48] = False  # first tensor fully masked
    opt = OptimizerState.for_params(params, momentum=0.9)
    for _ in range(3):
        grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        sgd_step(params, grads, opt, mask, lr=0.1)
        for s in mask.layout:
            m = mask.mask_for(s.name)
            assert np.all(params[s.name][~m] == 0.0)
            assert np.all(opt.velocity[s.name][~m] == 0.0)
    np.testing.assert_array_equal(params["0.weight"], 0.0)
    assert np.any(params["0.bias"] != 0.0)  # biases are never masked


def test_sgd_non_finite_gradient():
    params, opt, grads = _single(1.0, 0.0, np.nan)
    with pytest.raises(FloatingPointError, match="'w'"):
        sgd_step(params, grads, opt, lr=0.1)


def test_optimizer_validation():
    with pytest.raises(ValueError):
        OptimizerState(momentum=1.0)
    with pytest.raises(ValueError):
        OptimizerState(weight_decay=-1)

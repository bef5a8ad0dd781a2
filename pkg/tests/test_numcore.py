import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pad.numcore import (
    NonFiniteError,
    ShapeError,
    backward,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    silu,
    softmax,
    tensor,
)

D = torch.float64


class TestMatmul:
    def test_identity(self):
        eye = torch.eye(2, dtype=D)
        assert torch.equal(matmul(eye, eye), eye)

    def test_hand_product(self):
        a = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=D)
        b = torch.tensor([[1.0], [1.0]], dtype=D)
        assert matmul(a, b).tolist() == [[3.0], [7.0]]

    def test_grad_of_sum_is_ones_times_bT(self):
        a = torch.randn(3, 4, dtype=D, requires_grad=True)
        b = torch.randn(4, 5, dtype=D)
        backward(matmul(a, b).sum())
        assert torch.allclose(a.grad, torch.ones(3, 5, dtype=D) @ b.T)
        assert grad_check(lambda x: matmul(x, b).sum(), a) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(torch.ones(2, 3), torch.ones(2, 3))


class TestSoftmax:
    def test_uniform(self):
        out = softmax(torch.zeros(3, dtype=D), axis=0)
        assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=D))

    def test_no_overflow(self):
        out = softmax(torch.tensor([1000.0, 0.0]), axis=0)
        assert torch.isfinite(out).all()
        assert out[0].item() == pytest.approx(1.0) and out[1].item() == pytest.approx(0.0, abs=1e-30)

    def test_log_weights(self):
        out = softmax(torch.log(torch.tensor([1.0, 2.0, 3.0], dtype=D)), axis=0)
        assert torch.allclose(out, torch.tensor([1 / 6, 2 / 6, 3 / 6], dtype=D), atol=1e-15)

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            softmax(torch.zeros(3), axis=2)


class TestLayerNorm:
    def test_constant_row(self):
        assert torch.equal(layer_norm(torch.full((2, 5), 3.0, dtype=D)), torch.zeros(2, 5, dtype=D))

    def test_two_values(self):
        out = layer_norm(torch.tensor([1.0, 3.0], dtype=D), eps=0.0)
        assert torch.allclose(out, torch.tensor([-1.0, 1.0], dtype=D))

    def test_matches_formula(self):
        x = torch.randn(4, 7, dtype=D)
        mu = x.mean(-1, keepdim=True)
        var = ((x - mu) ** 2).mean(-1, keepdim=True)
        assert torch.allclose(layer_norm(x, 1e-6), (x - mu) / torch.sqrt(var + 1e-6), atol=1e-12)

    def test_grad(self):
        x = torch.randn(3, 6, dtype=D)
        w = torch.randn(3, 6, dtype=D)
        assert grad_check(lambda v: (layer_norm(v) * w).sum(), x) <= 1e-4


class TestActivations:
    def test_zeros(self):
        z = torch.zeros(1, dtype=D)
        assert gelu(z).item() == 0.0 and silu(z).item() == 0.0

    def test_gelu_tanh_formula(self):
        x = torch.linspace(-4, 4, 41, dtype=D)
        ref = 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        assert torch.allclose(gelu(x), ref, atol=1e-14)
        assert gelu(torch.ones(1, dtype=D)).item() == pytest.approx(0.8412, abs=1e-4)

    def test_silu_formula(self):
        x = torch.linspace(-4, 4, 41, dtype=D)
        assert torch.allclose(silu(x), x / (1 + torch.exp(-x)), atol=1e-14)


class TestBackward:
    def test_identity(self):
        x = tensor(2.0, dtype=D, requires_grad=True)
        backward(x)
        assert x.grad.item() == 1.0

    def test_square(self):
        x = tensor(3.0, dtype=D, requires_grad=True)
        backward(x * x)
        assert x.grad.item() == 6.0

    def test_fan_out(self):
        x = tensor(1.5, dtype=D, requires_grad=True)
        backward(x + x)
        assert x.grad.item() == 2.0

    def test_accumulates(self):
        x = tensor(1.0, dtype=D, requires_grad=True)
        backward(3 * x)
        backward(3 * x)
        assert x.grad.item() == 6.0

    def test_non_scalar(self):
        with pytest.raises(ShapeError):
            backward(torch.ones(2, requires_grad=True) * 2)

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            tensor([1.0, float("nan")])

    def test_linearity(self):
        torch.manual_seed(0)
        x = torch.randn(5, dtype=D, requires_grad=True)
        a, b = 0.7, -1.3

        def l1(v):
            return (v**3).sum()

        def l2(v):
            return torch.sin(v).sum()

        g1 = torch.autograd.grad(l1(x), x)[0]
        g2 = torch.autograd.grad(l2(x), x)[0]
        backward(a * l1(x) + b * l2(x))
        assert torch.allclose(x.grad, a * g1 + b * g2, atol=1e-6)


class TestGradCheck:
    def test_sum(self):
        assert grad_check(lambda v: v.sum(), torch.randn(4, dtype=D)) < 1e-9

    def test_quadratic_form(self):
        g = torch.Generator().manual_seed(1)
        A = torch.randn(5, 5, generator=g, dtype=D)
        x = torch.randn(5, 1, generator=g, dtype=D)
        assert grad_check(lambda v: (v.T @ A @ v).sum(), x) <= 1e-6

    def test_non_finite_output(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda v: (v / 0.0).sum(), torch.ones(2, dtype=D))

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * 2

            @staticmethod
            def backward(ctx, g):
                return g * 3

        assert grad_check(lambda v: Bad.apply(v).sum(), torch.randn(3, dtype=D)) > 0.3


@settings(max_examples=20, deadline=None)
@given(m=st.integers(1, 8), n=st.integers(2, 8), seed=st.integers(0, 2**16))
def test_primitives_gradcheck_random(m, n, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(m, n, generator=g, dtype=D)
    w = torch.randn(m, n, generator=g, dtype=D)
    b = torch.randn(n, m, generator=g, dtype=D)
    assert grad_check(lambda v: (matmul(v, b) * matmul(w, b)).sum(), x) <= 1e-4
    assert grad_check(lambda v: (softmax(v, -1) * w).sum(), x) <= 1e-4
    assert grad_check(lambda v: (layer_norm(v) * w).sum(), x) <= 1e-4
    assert grad_check(lambda v: (gelu(v) * w).sum(), x) <= 1e-4
    assert grad_check(lambda v: (silu(v) * w).sum(), x) <= 1e-4


def test_determinism():
    def run():
        g = torch.Generator().manual_seed(3)
        x = torch.randn(6, 6, generator=g, requires_grad=True)
        y = layer_norm(gelu(matmul(x, x))).sum()
        backward(y)
        return y.detach().numpy().tobytes(), x.grad.numpy().tobytes()

    assert run() == run()


def test_tensor_helper_roundtrip():
    t = tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3) and t.dtype == torch.float32

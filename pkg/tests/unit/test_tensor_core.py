"""
Unit tests for evsign/tensor_core.py.
Tests the op catalog, reverse-mode sweep, checked mode and the finite-difference oracle.
"""

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from evsign import tensor_core as tc
from evsign.errors import NonFiniteError, ShapeError


def f64(data, requires_grad=True):
    return torch.tensor(data, dtype=torch.float64, requires_grad=requires_grad)


class _SkewedLinear(torch.autograd.Function):
    """100 * x0 + 0.01 * x1 with a configurable partial for x1."""

    @staticmethod
    def forward(ctx, x, small_grad):
        ctx.small_grad = small_grad
        return 100.0 * x[0] + 0.01 * x[1]

    @staticmethod
    def backward(ctx, grad):
        return grad * torch.tensor([100.0, ctx.small_grad], dtype=grad.dtype), None



@pytest.mark.unit
class TestOpCatalog:
    """Forward semantics and shape errors of the catalog ops."""

    def test_softmax_rows_sum_to_one(self, generator):
        x = torch.randn(5, 7, generator=generator)
        torch.testing.assert_close(tc.softmax(x, -1).sum(-1), torch.ones(5), atol=1e-6, rtol=0)

    def test_softmax_empty_axis(self):
        with pytest.raises(ShapeError):
            tc.softmax(torch.zeros(3, 0), -1)

    def test_matmul_identity(self, generator):
        a = torch.randn(4, 3, generator=generator)
        assert torch.equal(tc.matmul(torch.eye(4), a), a)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(torch.zeros(2, 3), torch.zeros(2, 3))

    def test_relu_products_vanish(self, generator):
        x = torch.randn(100, generator=generator)
        assert torch.count_nonzero(tc.relu(-x) * tc.relu(x)) == 0

    def test_reshape_transpose_round_trips(self, generator):
        x = torch.randn(3, 4, generator=generator)
        assert torch.equal(tc.reshape(tc.reshape(x, (12,)), (3, 4)), x)
        assert torch.equal(tc.transpose(tc.transpose(x)), x)
        with pytest.raises(ShapeError):
            tc.reshape(x, (5, 2))

    def test_concat_and_slice(self, generator):
        a, b = torch.randn(2, 3, generator=generator), torch.randn(4, 3, generator=generator)
        cat = tc.concat([a, b], axis=0)
        assert torch.equal(tc.slice_(cat, 0, 2, 6), b)
        with pytest.raises(ShapeError):
            tc.concat([a, torch.zeros(2, 4)], axis=0)
        with pytest.raises(ShapeError):
            tc.slice_(a, 0, 1, 5)

    def test_broadcast_errors(self):
        with pytest.raises(ShapeError):
            tc.add(torch.zeros(2, 3), torch.zeros(4))

    def test_max_pool_halves_tokens(self):
        x = torch.tensor([[1.0, 0.0], [3.0, -1.0], [2.0, 5.0], [0.0, 4.0]])
        out = tc.max_pool_1d(x, 2, 2)
        assert torch.equal(out, torch.tensor([[3.0, 0.0], [2.0, 5.0]]))
        assert torch.equal(tc.avg_pool_1d(x, 2, 2), torch.tensor([[2.0, -0.5], [1.0, 4.5]]))

    def test_embedding_out_of_range(self):
        with pytest.raises(ShapeError):
            tc.embedding_lookup(torch.zeros(3, 2), torch.tensor([3]))

    def test_layer_norm_normalizes(self, generator):
        x = torch.randn(4, 16, generator=generator, dtype=torch.float64)
        out = tc.layer_norm(x, -1)
        torch.testing.assert_close(out.mean(-1), torch.zeros(4, dtype=torch.float64), atol=1e-9, rtol=0)

    def test_masked_fill(self):
        x = torch.ones(2, 2)
        out = tc.masked_fill(x, torch.tensor([[True, False], [False, True]]), -3.0)
        assert torch.equal(out, torch.tensor([[-3.0, 1.0], [1.0, -3.0]]))


@pytest.mark.unit
class TestBackward:
    """Tests for the scalar reverse-mode sweep."""

    def test_sum_gives_ones(self):
        x = f64([[1.0, 2.0], [3.0, 4.0]])
        grads = tc.backward(tc.sum_(x), {"x": x})
        assert torch.equal(grads["x"], torch.ones(2, 2, dtype=torch.float64))

    def test_product_of_scalars(self):
        x, y = f64(2.0), f64(-5.0)
        grads = tc.backward(tc.mul(x, y), [("x", x), ("y", y)])
        assert grads["x"].item() == -5.0 and grads["y"].item() == 2.0

    def test_unused_leaf_gets_zeros(self):
        x, y = f64([1.0, 2.0]), f64([3.0])
        grads = tc.backward(tc.sum_(x), {"x": x, "y": y})
        assert torch.equal(grads["y"], torch.zeros(1, dtype=torch.float64))

    def test_non_scalar_loss(self):
        x = f64([1.0, 2.0])
        with pytest.raises(ShapeError):
            tc.backward(tc.scalar_mul(x, 2.0), {"x": x})

    def test_deterministic(self, generator):
        w = torch.randn(6, 4, generator=generator, dtype=torch.float64, requires_grad=True)
        x = torch.randn(3, 6, generator=generator, dtype=torch.float64)
        loss = lambda: tc.sum_(tc.softmax(tc.matmul(x, w), -1) * torch.arange(4.0, dtype=torch.float64))
        first = tc.backward(loss(), {"w": w})["w"]
        second = tc.backward(loss(), {"w": w})["w"]
        assert torch.equal(first, second)

    def test_two_layer_mlp_matches_finite_differences(self, generator):
        with tc.precision(tc.CHECK_DTYPE):
            w1 = torch.randn(5, 8, generator=generator, requires_grad=True)
            w2 = torch.randn(8, 3, generator=generator, requires_grad=True)
            x = torch.randn(4, 5, generator=generator)
            target = torch.randn(4, 3, generator=generator)

            def loss():
                h = tc.relu(tc.matmul(x, w1))
                err = tc.sub(tc.matmul(h, w2), target)
                return tc.mean(tc.mul(err, err))

            assert tc.finite_diff_check(loss, [w1, w2], eps=1e-6) < 1e-4


@pytest.mark.unit
class TestFiniteDiffCheck:
    """Tests for the central-difference oracle."""

    def test_square_at_three(self):
        x = f64([3.0])
        assert tc.finite_diff_check(lambda: tc.sum_(tc.mul(x, x)), [x], eps=1e-4) < 1e-6

    def test_linear_is_exact(self):
        x = f64([1.0, -2.0, 0.5])
        for eps in (1e-2, 1e-5):
            assert tc.finite_diff_check(lambda: tc.sum_(tc.scalar_mul(x, 3.0)), [x], eps=eps) < 1e-9

    def test_constant_function(self):
        x = f64([1.0, 2.0])
        assert tc.finite_diff_check(lambda: tc.sum_(tc.scalar_mul(x, 0.0)), [x]) == 0.0

    def test_non_finite_evaluation(self):
        x = f64([0.0])
        with pytest.raises(NonFiniteError):
            tc.finite_diff_check(lambda: tc.sum_(tc.log(x)), [x])

    def test_eps_must_be_positive(self):
        x = f64([1.0])
        with pytest.raises(ValueError):
            tc.finite_diff_check(lambda: tc.sum_(x), [x], eps=0.0)

    def test_wrong_small_partial_fails(self):
        x = f64([0.3, -0.7])
        # the large partial is right, the small one has the wrong sign
        err = tc.finite_diff_check(lambda: _SkewedLinear.apply(x, -0.01), [x], eps=1e-6)
        assert err >= 1e-4
        assert err == pytest.approx(2.0, rel=1e-3)

    def test_correct_small_partial_passes(self):
        x = f64([0.3, -0.7])
        assert tc.finite_diff_check(lambda: _SkewedLinear.apply(x, 0.01), [x], eps=1e-6) < 1e-5

    def test_floor_must_be_positive(self):
        x = f64([1.0])
        with pytest.raises(ValueError):
            tc.finite_diff_check(lambda: tc.sum_(x), [x], floor=0.0)

    def test_renamed_ops_keep_catalog_names(self):
        assert tc.OP_CATALOG["sum"].fn is tc.sum_
        assert tc.OP_CATALOG["slice"].fn is tc.slice_
        with tc.checked_mode():
            with pytest.raises(NonFiniteError, match="by sum$"):
                tc.sum_(torch.tensor([float("inf"), 1.0]))

    @pytest.mark.parametrize("name", sorted(tc.OP_CATALOG))
    def test_catalog_op_gradients(self, name):
        g = torch.Generator().manual_seed(11)
        f, leaves = tc.catalog_objective(tc.OP_CATALOG[name], g)
        assert tc.finite_diff_check(f, leaves, eps=1e-5) < 1e-4


@pytest.mark.unit
class TestCheckedMode:
    """Finiteness assertions after every op while checked mode is on."""

    def test_log_of_negative_raises_when_checked(self):
        with tc.checked_mode():
            with pytest.raises(NonFiniteError):
                tc.log(torch.tensor([-1.0]))

    def test_unchecked_mode_passes_nan_through(self):
        out = tc.log(torch.tensor([-1.0]))
        assert torch.isnan(out).all()

    def test_module_hooks(self):
        layer = torch.nn.Linear(2, 2)
        with torch.no_grad():
            layer.weight.fill_(float("inf"))
        tc.install_finite_checks(layer)
        layer(torch.ones(1, 2))
        with tc.checked_mode():
            with pytest.raises(NonFiniteError):
                layer(torch.ones(1, 2))

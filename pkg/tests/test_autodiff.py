import functools
import math

import numpy as np
import pytest

from fevit.autodiff import (
    Function,
    Graph,
    Tensor,
    backward,
    concat,
    cross_entropy,
    gelu,
    get_precision,
    grad_check,
    layer_norm,
    matmul,
    no_grad,
    precision,
    softmax,
)
from fevit.errors import ConfigError, GradCheckError, GraphConsumedError, LabelError, ShapeError
from fevit.model import FEModelConfig, forward, init_params

close_enough = functools.partial(math.isclose, rel_tol=1e-9, abs_tol=1e-12)


@pytest.fixture
def f64():
    with precision('f64'):
        yield


def random_tensor(shape, seed, requires_grad=True, name=None):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=requires_grad, name=name)


class TestTensor:
    def test_default_precision(self):
        assert get_precision() == 'f32'
        assert Tensor([1.0, 2.0]).data.dtype == np.float32

    def test_precision_context(self):
        with precision('f64'):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_unknown_precision(self):
        with pytest.raises(ConfigError):
            with precision('f16'):
                pass

    def test_non_positive_dimension(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_size_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == int(np.prod(t.shape)) == 24


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(Tensor(np.eye(2)), m).data, m.data)

    def test_zero(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.zeros((2, 2))))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))
        assert '(3, 4)' in str(e.value) and '(3, 2)' in str(e.value)

    def test_gradient_formula(self, f64):
        a, b = random_tensor((3, 4), 0), random_tensor((4, 2), 1)
        backward(matmul(a, b).sum())
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_grad_check(self, f64):
        a, b = random_tensor((3, 4), 0), random_tensor((4, 2), 1)
        report = grad_check(lambda x, y: matmul(x, y).sum(), [a, b], tol=1e-6)
        assert report.passed, report.errors

    def test_batched_grad_check(self, f64):
        a, b = random_tensor((2, 3, 4), 2), random_tensor((4, 5), 3)
        w = random_tensor((2, 3, 5), 4, requires_grad=False)
        assert grad_check(lambda x, y: (matmul(x, y) * w).sum(), [a, b])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_stabilized(self, f64):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12

    def test_slices_sum_to_one(self):
        out = softmax(random_tensor((4, 3, 7), 5, requires_grad=False)).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_grad_check(self, f64):
        x = random_tensor((5, ), 6)
        w = random_tensor((5, ), 7, requires_grad=False)
        report = grad_check(lambda t: (softmax(t) * w).sum(), [x], tol=1e-6)
        assert report.passed, report.errors


class TestLayerNorm:
    def test_constant_slice(self):
        out = layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-6)

    def test_normalized(self, f64):
        x = random_tensor((6, 16), 8, requires_grad=False) * 3.0 + 5.0
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_affine(self, f64):
        x = random_tensor((2, 4), 9, requires_grad=False)
        gamma, beta = Tensor([1.0, 2.0, 3.0, 4.0]), Tensor([0.5, 0.5, -0.5, -0.5])
        plain = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        np.testing.assert_allclose(layer_norm(x, gamma, beta).data, gamma.data * plain + beta.data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_grad_check(self, f64):
        x, gamma, beta = random_tensor((3, 6), 10), random_tensor((6, ), 11), random_tensor((6, ), 12)
        w = random_tensor((3, 6), 13, requires_grad=False)
        assert grad_check(lambda a, g, b: (layer_norm(a, g, b) * w).sum(), [x, gamma, beta])


class TestGelu:
    def test_values(self, f64):
        out = gelu(Tensor([0.0, 1.0, -1.0])).data
        assert out[0] == 0.0
        assert close_enough(out[1], 0.8413447460685429)
        assert close_enough(out[2], -0.15865525393145707)

    def test_grad_check(self, f64):
        assert grad_check(lambda t: gelu(t).sum(), [random_tensor((17, ), 14)], tol=1e-6)


class TestCrossEntropy:
    def test_uniform_logits(self, f64):
        loss = cross_entropy(Tensor(np.zeros((3, 8))), [0, 3, 7])
        assert close_enough(loss.item(), math.log(8))

    def test_label_out_of_range(self):
        with pytest.raises(LabelError) as e:
            cross_entropy(Tensor(np.zeros((2, 4))), [1, 4])
        assert 'index 1' in str(e.value)

    def test_negative_label(self):
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.zeros((1, 4))), [-1])

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((2, 4))), [1])

    def test_label_smoothing(self, f64):
        logits = random_tensor((4, 5), 15, requires_grad=False)
        labels = [0, 1, 2, 3]
        log_probs = logits.data - np.log(np.exp(logits.data).sum(axis=1, keepdims=True))
        expected = -(0.9 * log_probs[np.arange(4), labels] + 0.1 * log_probs.mean(axis=1)).mean()
        assert close_enough(cross_entropy(logits, labels, label_smoothing=0.1).item(), expected)

    @pytest.mark.parametrize('label_smoothing', [0.0, 0.2])
    def test_grad_check(self, f64, label_smoothing):
        logits = random_tensor((4, 6), 16)
        assert grad_check(lambda t: cross_entropy(t, [5, 0, 2, 2], label_smoothing), [logits])


class TestGraph:
    def test_gating_skips_frozen_inputs(self):
        a, b = random_tensor((2, 3), 0, requires_grad=False), random_tensor((3, 2), 1, requires_grad=False)
        out = matmul(a, b)
        assert not out.requires_grad
        assert out.is_leaf
        assert len(Graph.trace(out)) == 0

    def test_frozen_tensor_never_accumulates(self):
        frozen = random_tensor((3, 3), 2, requires_grad=False)
        trainable = random_tensor((3, 3), 3)
        backward(matmul(frozen, trainable).sum())
        assert frozen.grad is None
        assert trainable.grad is not None and trainable.grad.shape == trainable.shape

    def test_no_grad(self):
        x = random_tensor((2, 2), 4)
        with no_grad():
            out = (x * x).sum()
        assert not out.requires_grad

    def test_creation_order(self):
        x = random_tensor((2, 2), 5)
        y = (x * 2.0 + 1.0).sum()
        seqs = [node.seq for node in Graph.trace(y).nodes]
        assert seqs == sorted(seqs)
        assert len(seqs) == 3

    def test_backward_twice(self):
        x = random_tensor((2, 2), 6)
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(GraphConsumedError):
            backward(loss)

    def test_non_scalar_loss(self):
        with pytest.raises(ShapeError):
            backward(random_tensor((2, 2), 7) * 2.0)

    def test_shared_input_accumulates(self, f64):
        x = Tensor([3.0], requires_grad=True)
        backward((x * x + x).sum())
        assert close_enough(float(x.grad[0]), 7.0)

    def test_concat_and_indexing(self, f64):
        a, b = random_tensor((2, 3), 8), random_tensor((1, 3), 9)
        assert grad_check(lambda s, t: (concat([s, t], axis=0)[1:, :2] * 2.0).sum(), [a, b])


class TestGradCheck:
    def test_requires_f64(self):
        with pytest.raises(GradCheckError):
            grad_check(lambda t: t.sum(), [random_tensor((2, ), 0)])

    def test_detects_wrong_gradient(self, f64):
        class HalfSquare(Function):
            def forward(self, a):
                self.a = a
                return a * a

            def backward(self, grad):
                return (grad * self.a, )  # should be 2a

        x = random_tensor((3, ), 1)
        report = grad_check(lambda t: HalfSquare.apply(t).sum(), [x])
        assert not report.passed
        assert math.isclose(report.max_error, 0.5, rel_tol=1e-6)

    def test_non_finite_value_names_input(self, f64):
        x = Tensor([0.0], requires_grad=True, name='x')
        with pytest.raises(GradCheckError) as e:
            grad_check(lambda t: (Tensor([1.0]) / t).sum(), [x])
        assert 'x' in str(e.value)

    def test_full_model(self, f64):
        config = FEModelConfig(num_frames=2)
        store = init_params(config, 'sfa', seed=0)
        # Non-zero second adapter layer so every adapter record has a gradient
        store.replace('adapter/fc2/kernel', np.random.default_rng(0).normal(0.0, 0.02, (64, 64)))
        video = np.random.default_rng(1).uniform(size=(1, 2, 32, 32, 3))
        names = store.names()
        tensors = [store[name] for name in names]

        def loss(*_):
            return cross_entropy(forward(video, store, config, 'sfa'), [3])

        report = grad_check(loss, tensors, step=1e-4, samples_per_input=3, tol=1e-5)
        assert report.passed, {k: v for k, v in report.errors.items() if v > 1e-5}
        assert set(report.errors) == set(names)

import numpy as np
import pytest

from slotmerge import diffcore as dc
from slotmerge.errors import CalibrationError, DimensionError, FormatError

N_SEEDS = 100
OP_TOL = 1e-5


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# each entry: builder(rng) -> (leaves, f) where f() returns the op output
def _unary(fn, sample=lambda rng: rng.normal(size=(3, 4))):
    def build(rng):
        x = dc.parameter(sample(rng))
        return [x], lambda: fn(x)
    return build


def _binary(fn, sa=(3, 4), sb=(3, 4), sample_b=None):
    def build(rng):
        a = dc.parameter(rng.normal(size=sa))
        b = dc.parameter(sample_b(rng, sb) if sample_b else rng.normal(size=sb))
        return [a, b], lambda: fn(a, b)
    return build


def _layernorm(rng):
    x = dc.parameter(rng.normal(size=(3, 5)))
    g = dc.parameter(rng.normal(size=5))
    b = dc.parameter(rng.normal(size=5))
    return [x, g, b], lambda: dc.layernorm(x, g, b)


def _masked_softmax(rng):
    x = dc.parameter(rng.normal(size=(3, 4)))
    mask = np.ones((3, 4), dtype=bool)
    mask[:, 1] = False
    return [x], lambda: dc.softmax(x, axis=1, mask=mask)


OPS = {
    "add": _binary(dc.add),
    "add_broadcast": _binary(dc.add, sb=(4,)),
    "sub": _binary(dc.sub, sb=(1, 4)),
    "mul": _binary(dc.mul, sb=(3, 1)),
    "div": _binary(dc.div, sample_b=lambda rng, s: _away_from_zero(rng, s, 0.5)),
    "div_eps": _binary(lambda a, b: dc.div(a, b, eps=1e-3), sample_b=lambda rng, s: np.abs(rng.normal(size=s)) + 0.5),
    "scale": _unary(lambda x: dc.scale(x, -2.5)),
    "sigmoid": _unary(dc.sigmoid, lambda rng: 3 * rng.normal(size=(3, 4))),
    "tanh": _unary(dc.tanh),
    "relu": _unary(dc.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "exp": _unary(dc.exp),
    "square": _unary(dc.square),
    "sum_axis": _unary(lambda x: dc.sum_(x, axis=0)),
    "sum_keepdims": _unary(lambda x: dc.sum_(x, axis=1, keepdims=True)),
    "mean": _unary(lambda x: dc.mean(x, axis=-1)),
    "reshape": _unary(lambda x: dc.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: dc.transpose(x)),
    "concat": _binary(lambda a, b: dc.concat([a, b], axis=1), sb=(3, 2)),
    "slice": _unary(lambda x: dc.slice_(x, (slice(0, 2), slice(1, 4)))),
    "slice_fancy": _unary(lambda x: dc.slice_(x, (np.array([0, 2, 0]), np.array([1, 1, 3])))),
    "masked_select": _unary(lambda x: dc.masked_select(x, np.arange(12).reshape(3, 4) % 3 == 0)),
    "broadcast_to": _unary(lambda x: dc.broadcast_to(x, (2, 3, 4))),
    "matmul": _binary(dc.matmul, sb=(4, 2)),
    "matmul_batched": _binary(dc.matmul, sa=(2, 3, 4), sb=(2, 4, 2)),
    "matmul_folded": _binary(dc.matmul, sa=(2, 3, 4), sb=(4, 2)),
    "softmax": _unary(lambda x: dc.softmax(x, axis=0)),
    "softmax_masked": _masked_softmax,
    "layernorm": _layernorm,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_backward_matches_finite_differences(name):
    worst = 0.0
    for seed in range(N_SEEDS):
        rng = np.random.default_rng([seed, 7])
        leaves, fn = OPS[name](rng)
        R = rng.normal(size=fn().shape)
        worst = max(worst, dc.gradcheck(lambda: dc.sum_(fn() * R), leaves))
    assert worst < OP_TOL, f"{name}: worst relative error {worst:.2e}"


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(dc.Tensor(np.eye(2)), dc.Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_selector_row(self):
        out = dc.matmul(dc.Tensor([[1.0, 0.0]]), dc.Tensor([[2.0], [3.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a, b = dc.parameter(rng.normal(size=(3, 3))), dc.parameter(rng.normal(size=(3, 3)))
        assert dc.gradcheck(lambda: dc.sum_(dc.matmul(a, b)), [a]) < 1e-6

    def test_backward_formula(self):
        rng = np.random.default_rng(1)
        a, b = dc.parameter(rng.normal(size=(3, 4))), dc.parameter(rng.normal(size=(4, 2)))
        g = rng.normal(size=(3, 2))
        dc.sum_(dc.matmul(a, b) * g).backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(dc.softmax(dc.Tensor(np.zeros(3)), axis=0).data, [1 / 3] * 3, atol=1e-15)

    def test_large_logits(self):
        out = dc.softmax(dc.Tensor([1000.0, 0.0]), axis=0).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        out = dc.softmax(dc.Tensor(10 * rng.normal(size=(5, 7))), axis=1).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_mask_gives_exact_zero(self):
        mask = np.array([True, False, True])
        x = dc.parameter([0.3, 5.0, -1.0])
        out = dc.softmax(x, axis=0, mask=mask)
        assert out.data[1] == 0.0
        dc.sum_(out * dc.Tensor([1.0, 2.0, 3.0])).backward()
        assert x.grad[1] == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = dc.parameter(rng.normal(size=4))
        R = rng.normal(size=4)
        assert dc.gradcheck(lambda: dc.sum_(dc.softmax(x, axis=0) * R), [x]) < 1e-6


class TestLayerNorm:
    def test_constant_row(self):
        out = dc.layernorm(dc.Tensor(np.full((1, 4), 3.0)), dc.Tensor(np.ones(4)), dc.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_zero_mean_row(self):
        out = dc.layernorm(dc.Tensor([[1.0, -1.0]]), dc.Tensor(np.ones(2)), dc.Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_normalises(self):
        rng = np.random.default_rng(5)
        out = dc.layernorm(dc.Tensor(rng.normal(3.0, 2.0, size=(6, 16))), dc.Tensor(np.ones(16)),
                           dc.Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gain_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dc.layernorm(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones(2)), dc.Tensor(np.zeros(3)))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert dc.sigmoid(dc.Tensor(0.0)).item() == 0.5

    def test_sigmoid_extremes_finite(self):
        out = dc.sigmoid(dc.Tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_sum_axis(self):
        np.testing.assert_array_equal(dc.sum_(dc.Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0).data, [4.0, 6.0])

    def test_composite_expression(self):
        rng = np.random.default_rng(6)
        x = dc.parameter(rng.normal(size=(2, 3)))
        y = dc.parameter(np.abs(rng.normal(size=(3,))) + 0.5)

        def f():
            h = dc.tanh(x * y) + dc.sigmoid(x) / y
            return dc.mean(dc.square(h - dc.exp(dc.scale(x, 0.3))))

        assert dc.gradcheck(f, [x, y]) < 1e-5

    def test_operator_overloads_match_functions(self):
        a, b = dc.Tensor([1.0, 2.0]), dc.Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, dc.add(a, b).data)
        np.testing.assert_array_equal((a - b).data, dc.sub(a, b).data)
        np.testing.assert_array_equal((a * b).data, dc.mul(a, b).data)
        np.testing.assert_array_equal((a / b).data, dc.div(a, b).data)
        np.testing.assert_array_equal((2.0 - a).data, [1.0, 0.0])
        np.testing.assert_array_equal((np.array([2.0, 2.0]) * a).data, [2.0, 4.0])
        assert isinstance(np.ones(2) * a, dc.Tensor)

    def test_div_eps_is_explicit(self):
        out = dc.div(dc.Tensor([1.0]), dc.Tensor([0.0]), eps=0.5)
        np.testing.assert_array_equal(out.data, [2.0])

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            dc.add(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))


class TestGradcheck:
    def test_sum_is_exact(self):
        x = dc.parameter(np.random.default_rng(0).normal(size=(3, 2)))
        f = lambda: dc.sum_(x)  # noqa: E731
        f().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
        x.zero_grad()
        assert dc.gradcheck(f, [x]) < 1e-9

    def test_softmax_squared(self):
        x = dc.parameter(np.random.default_rng(1).normal(size=5))
        assert dc.gradcheck(lambda: dc.sum_(dc.square(dc.softmax(x, axis=0))), [x]) < 1e-6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self):
        x = dc.parameter([1.0, -1.0])
        with pytest.raises(CalibrationError):
            dc.gradcheck(lambda: dc.sum_(dc.div(x, dc.Tensor([0.0, 0.0]))), [x])

    def test_detects_wrong_gradient(self):
        x = dc.parameter([0.5, 1.5])

        def wrong():
            out = dc.square(x)
            out._backward = lambda g: (3.0 * g * x.data,)  # deliberately wrong factor
            return dc.sum_(out)

        assert dc.gradcheck(wrong, [x]) > 0.1


class TestTape:
    def test_graph_order_is_topological(self):
        x = dc.parameter([1.0, 2.0])
        y = dc.sum_(dc.tanh(x * x) + x)
        graph = dc.Graph.from_output(y)
        ids = [node._id for node in graph.nodes]
        assert ids == sorted(ids)
        assert graph.nodes[-1] is y
        for node in graph.nodes:
            for parent in node._parents:
                assert parent._id < node._id

    def test_node_reused_gets_summed_gradient(self):
        x = dc.parameter([2.0])
        y = x * x + x
        y.backward(np.ones(1))
        np.testing.assert_array_equal(x.grad, [5.0])

    def test_additivity(self):
        rng = np.random.default_rng(2)
        xv = rng.normal(size=(3, 3))

        def losses(x):
            return dc.sum_(dc.tanh(dc.matmul(x, x))), dc.mean(dc.exp(x))

        x = dc.parameter(xv)
        l1, l2 = losses(x)
        (l1 + l2).backward()
        together = x.grad.copy()
        x1, x2 = dc.parameter(xv), dc.parameter(xv)
        losses(x1)[0].backward()
        losses(x2)[1].backward()
        np.testing.assert_allclose(together, x1.grad + x2.grad, rtol=1e-13, atol=1e-15)

    def test_leaf_gradients_accumulate_across_backwards(self):
        x = dc.parameter([1.0, 3.0])
        dc.sum_(x * 2.0).backward()
        dc.sum_(x * 2.0).backward()
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_replay_is_bit_identical(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            x = dc.parameter(rng.normal(size=(4, 5)))
            w = dc.parameter(rng.normal(size=(5, 3)))
            y = dc.mean(dc.softmax(dc.matmul(x, w), axis=1))
            y.backward()
            return y.data, x.grad, w.grad

        for a, b in zip(run(11), run(11)):
            np.testing.assert_array_equal(a, b)

    def test_grads_finite(self):
        x = dc.parameter(np.random.default_rng(3).normal(size=(4, 4)) * 50)
        dc.sum_(dc.layernorm(dc.softmax(x, axis=0), dc.Tensor(np.ones(4)), dc.Tensor(np.zeros(4)))).backward()
        assert np.all(np.isfinite(x.grad))

    def test_detach_blocks_gradient(self):
        x = dc.parameter([1.0, 2.0])
        y = dc.sum_(x * x.detach())
        y.backward()
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])


class TestCheckpointContainer:
    def test_roundtrip(self, tmp_path):
        arrays = {"w": np.arange(6.0).reshape(2, 3), "s": np.array(2.5), "v": np.array([1e-300, -np.pi])}
        path = tmp_path / "x.ckpt"
        dc.save_arrays(path, arrays, {"step": 7, "note": "hello world"})
        loaded, meta = dc.load_arrays(path)
        assert meta == {"step": "7", "note": "hello world"}
        for k, v in arrays.items():
            assert loaded[k].shape == v.shape
            np.testing.assert_array_equal(loaded[k], v)

    def test_layout(self, tmp_path):
        path = tmp_path / "x.ckpt"
        dc.save_arrays(path, {"a": np.array([1.0, 2.0]), "b": np.array(3.0)})
        blob = path.read_bytes()
        header = b"DIFFCORE-CKPT v1\ntensor a 2 0\ntensor b - 16\nend 24\n"
        assert blob.startswith(header)
        np.testing.assert_array_equal(np.frombuffer(blob[len(header):], dtype="<f8"), [1.0, 2.0, 3.0])

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"DIFFCORE-CKPT v2\nend 0\n")
        with pytest.raises(FormatError):
            dc.load_arrays(path)

    def test_rejects_truncated_payload(self, tmp_path):
        path = tmp_path / "x.ckpt"
        dc.save_arrays(path, {"a": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            dc.load_arrays(path)

import numpy as np
import pytest

from fibo import diffcore as dc
from fibo.config import NonFiniteError, ShapeError


def test_add_elementwise():
    out = dc.apply_primitive("add", [np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    np.testing.assert_array_equal(out.numpy(), [4.0, 6.0])


def test_matmul_identity(rng):
    A = rng.standard_normal((3, 3))
    out = dc.apply_primitive(dc.Primitive.MATMUL, [np.eye(3), A])
    np.testing.assert_array_equal(out.numpy(), A)


def test_softmax_symmetric():
    np.testing.assert_allclose(dc.softmax(np.zeros(3)).numpy(), np.full(3, 1.0 / 3.0), rtol=0, atol=1e-15)


def test_square_gradient():
    with dc.Tape() as tape:
        x = tape.variable(3.0)
        y = x * x
    assert tape.backward(y)[x] == pytest.approx(6.0)


def test_cos_sum_gradient():
    with dc.Tape() as tape:
        x = tape.variable(np.array([0.0, np.pi / 2]))
        y = dc.cos(x).sum()
    np.testing.assert_allclose(tape.backward(y)[x], [0.0, -1.0], atol=1e-15)


def test_two_layer_tanh_network(rng):
    x = rng.uniform(-2, 2, size=(5, 3))
    W1 = rng.uniform(-2, 2, size=(3, 8))
    b1 = rng.uniform(-2, 2, size=8)
    W2 = rng.uniform(-2, 2, size=(8, 1))

    def net(W1, b1, W2):
        return (dc.tanh(dc.constant(x) @ W1 + b1) @ W2).sum()

    assert dc.check_gradients(net, [W1, b1, W2]) < 1e-4


def _positive(a):
    return np.abs(a) + 0.5


# (name, function of tensors, input arrays built from a uniform [-2, 2] generator)
PRIMITIVE_CASES = [
    ("add", lambda a, b: (a + b).sum(), lambda r: [r((3, 2)), r((3, 2))]),
    ("add-broadcast", lambda a, b: (a + b).sum(), lambda r: [r((4, 3)), r((3,))]),
    ("subtract", lambda a, b: ((a - b) * (a - b)).sum(), lambda r: [r((3,)), r((3,))]),
    ("multiply", lambda a, b: (a * b).sum(), lambda r: [r((2, 3)), r((2, 3))]),
    ("divide", lambda a, b: (a / b).sum(), lambda r: [r((4,)), _positive(r((4,)))]),
    ("matmul", lambda a, b: (a @ b).sum(), lambda r: [r((3, 4)), r((4, 2))]),
    ("matmul-vector", lambda a, b: (a @ b).sum(), lambda r: [r((4,)), r((4, 2))]),
    ("sum-axis", lambda a: (a.sum(axis=0) ** 2).sum(), lambda r: [r((3, 4))]),
    ("mean-axis", lambda a: (a.mean(axis=1) ** 2).sum(), lambda r: [r((3, 4))]),
    ("broadcast", lambda a: (dc.broadcast_to(a, (3, 4)) * np.arange(12.0).reshape(3, 4)).sum(),
     lambda r: [r((1, 4))]),
    ("concatenate", lambda a, b: (dc.concatenate([a, b], axis=1) ** 2).sum(), lambda r: [r((2, 3)), r((2, 1))]),
    ("slice", lambda a: (a[1:, :2] ** 2).sum(), lambda r: [r((3, 3))]),
    ("gather", lambda a: (dc.gather(a, np.array([[2], [0], [1]]), axis=1) ** 2).sum(), lambda r: [r((3, 4))]),
    ("reshape", lambda a: (a.reshape(6) * np.arange(6.0)).sum(), lambda r: [r((2, 3))]),
    ("transpose", lambda a: (a.T @ np.arange(6.0).reshape(2, 3)).sum(), lambda r: [r((2, 4))]),
    ("where", lambda a, b: (dc.where(np.array([True, False, True]), a, b) ** 2).sum(), lambda r: [r((3,)), r((3,))]),
    ("tanh", lambda a: dc.tanh(a).sum(), lambda r: [r((5,))]),
    ("sigmoid", lambda a: dc.sigmoid(a).sum(), lambda r: [r((5,))]),
    ("softplus", lambda a: dc.softplus(a).sum(), lambda r: [r((5,))]),
    ("exp", lambda a: dc.exp(a).sum(), lambda r: [r((5,))]),
    ("log", lambda a: dc.log(a).sum(), lambda r: [_positive(r((5,)))]),
    ("cos", lambda a: dc.cos(a).sum(), lambda r: [r((5,))]),
    ("sin", lambda a: dc.sin(a).sum(), lambda r: [r((5,))]),
    ("power", lambda a: (a ** 3.0).sum(), lambda r: [r((5,))]),
    ("sqrt", lambda a: dc.sqrt(a).sum(), lambda r: [_positive(r((5,)))]),
    ("softmax", lambda a: (dc.softmax(a, axis=-1) * np.arange(8.0).reshape(2, 4)).sum(), lambda r: [r((2, 4))]),
    ("affine", lambda a: (dc.affine(a, 2.5, -1.0) ** 2).sum(), lambda r: [r((5,))]),
]


@pytest.mark.parametrize("name,fn,make_inputs", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients(name, fn, make_inputs):
    generator = np.random.default_rng([ord(c) for c in name])

    def uniform(shape):
        return generator.uniform(-2.0, 2.0, size=shape)

    assert dc.check_gradients(fn, make_inputs(uniform)) < 1e-4


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        dc.apply_primitive("matmul", [np.ones((2, 3)), np.ones((2, 3))])


def test_general_broadcasting_is_rejected():
    with pytest.raises(ShapeError, match="add"):
        dc.constant(np.ones((3, 1))) + np.ones((1, 4))


def test_non_finite_output_is_an_error():
    with pytest.raises(NonFiniteError, match="log"):
        dc.log(np.array([-1.0]))


def test_backward_requires_scalar_root():
    with dc.Tape() as tape:
        x = tape.variable(np.ones(3))
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_unreached_leaf_gets_zero_gradient():
    with dc.Tape() as tape:
        x = tape.variable(np.array([1.0, 2.0]))
        unused = tape.variable(np.ones((2, 2)))
        y = (x * x).sum()
    grads = tape.backward(y)
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_adjoint_linearity(rng):
    a0, b0 = rng.standard_normal(4), rng.standard_normal(4)

    def grads_of(build):
        with dc.Tape() as tape:
            a, b = tape.variable(a0), tape.variable(b0)
            root = build(a, b)
        g = tape.backward(root)
        return g[a], g[b]

    f = lambda a, b: (dc.sin(a) * b).sum()
    g = lambda a, b: (a * a + dc.exp(b)).sum()
    fa, fb = grads_of(f)
    ga, gb = grads_of(g)
    sa, sb = grads_of(lambda a, b: f(a, b) + g(a, b))
    np.testing.assert_allclose(sa, fa + ga, rtol=1e-14)
    np.testing.assert_allclose(sb, fb + gb, rtol=1e-14)


def test_forward_backward_is_deterministic():
    def run():
        data = np.random.default_rng(5).standard_normal((6, 3))
        with dc.Tape() as tape:
            w = tape.variable(data)
            root = dc.softmax(dc.tanh(w), axis=1).mean()
        return root.item(), tape.backward(root)[w]

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_inference_mode_records_nothing():
    x = dc.constant(np.ones(3))
    y = dc.exp(x)
    assert not y.requires_grad
    assert not dc.recording()


def test_count_ops_nests():
    with dc.count_ops() as outer:
        dc.exp(np.ones(2))
        with dc.count_ops() as inner:
            dc.exp(np.ones(2))
            dc.tanh(np.ones(2))
    assert inner["exp"] == 1 and inner["tanh"] == 1
    assert outer["exp"] == 2 and outer["tanh"] == 1


def test_matches_torch_reference(rng):
    torch = pytest.importorskip("torch")
    x = rng.standard_normal((4, 3))
    W = rng.standard_normal((3, 5))

    with dc.Tape() as tape:
        w = tape.variable(W)
        root = dc.softplus(dc.tanh(dc.constant(x) @ w)).mean()
    ours = tape.backward(root)[w]

    tw = torch.tensor(W, dtype=torch.float64, requires_grad=True)
    torch.nn.functional.softplus(torch.tanh(torch.tensor(x, dtype=torch.float64) @ tw)).mean().backward()
    np.testing.assert_allclose(ours, tw.grad.numpy(), rtol=1e-12, atol=1e-14)

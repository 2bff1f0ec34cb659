import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrsl import tensor as T
from dynrsl.errors import ContractError, DegenerateVectorError, ParameterError, ShapeError
from dynrsl.tensor import Tensor


def central_diff(f, x, eps=1e-5):
    """Independent numeric gradient of scalar f at array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        up = f(x)
        x[i] = orig - eps
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def check_unary(op, shape, seed=0, lo=-2.0, hi=2.0):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(lo, hi, size=shape)
    w = rng.normal(size=op(Tensor(x0)).shape)

    def scalar(xv):
        return float((op(Tensor(xv)).data * w).sum())

    x = Tensor(x0.copy(), requires_grad=True)
    T.backward(T.tsum(T.mul(op(x), Tensor(w))))
    num = central_diff(scalar, x0.copy())
    rel = np.abs(x.grad - num) / np.maximum(1e-8, np.abs(num))
    return rel.max()


# ---- matmul


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert out.data.tolist() == [[3.0, 4.0], [5.0, 6.0]]


def test_matmul_dot():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    rng = np.random.default_rng(1)
    out = T.matmul(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 5))))
    assert not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients():
    rng = np.random.default_rng(2)
    b = rng.uniform(-2, 2, size=(4, 3))
    a = rng.uniform(-2, 2, size=(2, 4))
    assert check_unary(lambda x: T.matmul(x, Tensor(b)), (2, 4)) < 1e-6
    assert check_unary(lambda x: T.matmul(Tensor(a), x), (4, 3)) < 1e-6


def test_batched_matmul_broadcast_gradients():
    rng = np.random.default_rng(3)
    b = rng.uniform(-2, 2, size=(4, 3))
    assert check_unary(lambda x: T.matmul(x, Tensor(b)), (2, 5, 4)) < 1e-6
    a = rng.uniform(-2, 2, size=(2, 5, 4))
    assert check_unary(lambda x: T.matmul(Tensor(a), x), (4, 3)) < 1e-6


# ---- softmax


def test_softmax_zero_row_uniform():
    p = T.softmax_rows(Tensor(np.zeros((1, 5))), 1.0).data
    assert np.allclose(p, 0.2, atol=1e-15)


def test_softmax_two_entries():
    p = T.softmax_rows(Tensor([[1.0, 0.0]]), 1.0).data[0]
    e = math.e
    assert p[0] == pytest.approx(e / (e + 1), abs=1e-12)
    assert p[1] == pytest.approx(1 / (e + 1), abs=1e-12)
    assert p[0] == pytest.approx(0.7311, abs=1e-4)


def test_softmax_lower_temperature_lower_entropy():
    x = Tensor([[1.0, 0.0]])
    h1 = T.entropy_rows(T.softmax_rows(x, 1.0).data)[0]
    h01 = T.entropy_rows(T.softmax_rows(x, 0.1).data)[0]
    assert h01 < h1


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(ParameterError):
        T.softmax_rows(Tensor([[1.0, 2.0]]), tau)


def test_softmax_large_logits_stable():
    p = T.softmax_rows(Tensor([[1000.0, 0.0, -1000.0]]), 0.07).data
    assert np.isfinite(p).all()
    assert p[0, 0] == 1.0


def test_softmax_mask_excludes_entries():
    p = T.softmax_rows(Tensor([[3.0, 1.0, 2.0]]), 1.0, mask=np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("tau", [1.0, 0.3])
def test_softmax_gradient(tau):
    assert check_unary(lambda x: T.softmax_rows(x, tau), (3, 5)) < 1e-4


@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=12),
    st.floats(0.05, 5.0),
)
def test_softmax_rows_sum_to_one(row, tau):
    p = T.softmax_rows(Tensor([row]), tau).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p >= 0).all() and (p <= 1).all()


@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=8))
def test_softmax_entries_strictly_inside_unit_interval(row):
    p = T.softmax_rows(Tensor([row]), 1.0).data
    assert (p > 0).all() and (p < 1).all()


@given(
    st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=8).filter(lambda r: max(r) - min(r) > 1e-3),
    st.floats(0.05, 4.0),
    st.floats(0.05, 4.0),
)
def test_entropy_non_increasing_as_temperature_drops(row, t1, t2):
    lo, hi = sorted((t1, t2))
    x = Tensor([row])
    h_hi = T.entropy_rows(T.softmax_rows(x, hi).data)[0]
    h_lo = T.entropy_rows(T.softmax_rows(x, lo).data)[0]
    assert h_lo <= h_hi + 1e-12


# ---- cosine


def test_cosine_identity_and_orthogonal():
    u = Tensor([0.3, -1.2, 2.0])
    assert T.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == 0.0


def test_cosine_hand_value():
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(
        1 / math.sqrt(2), abs=1e-15
    )


def test_cosine_zero_vector_rejected():
    with pytest.raises(DegenerateVectorError):
        T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


@given(vec, vec, st.floats(1e-2, 1e2), st.floats(1e-2, 1e2))
def test_cosine_symmetric_scale_invariant(u, v, a, b):
    s = T.cosine_similarity(Tensor(u), Tensor(v)).item()
    assert T.cosine_similarity(Tensor(v), Tensor(u)).item() == pytest.approx(s, abs=1e-12)
    scaled = T.cosine_similarity(Tensor(np.array(u) * a), Tensor(np.array(v) * b)).item()
    assert scaled == pytest.approx(s, abs=1e-12)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


def test_cosine_gradient():
    v = np.array([0.4, -1.1, 0.7])
    assert check_unary(lambda x: T.cosine_similarity(x, Tensor(v)), (3,)) < 1e-5


# ---- relu


def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.relu(Tensor([1.0, 3.5])).data.tolist() == [1.0, 3.5]


def test_relu_gradient_flat_and_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


# ---- backward


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_backward_disconnected_parameter_zero():
    x = Tensor([3.0], requires_grad=True)
    p = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert p.grad is None or not p.grad.any()


def test_backward_accumulates():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    T.backward(T.tsum(T.mul(x, x)))
    assert x.grad.tolist() == [12.0]


def test_backward_non_scalar_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.scale(x, 2.0))


def test_frozen_tensor_gets_no_grad():
    w = Tensor([[1.0, 2.0]], requires_grad=False)
    x = Tensor([[0.5], [0.25]], requires_grad=True)
    T.backward(T.tsum(T.matmul(w, x)))
    assert w.grad is None
    assert x.grad.tolist() == [[1.0], [2.0]]


def test_shared_subgraph_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = Tensor([-4.0], requires_grad=True)
    q = T.mul(T.add(x, y), T.add(x, 1.0))
    T.backward(T.tsum(q))
    assert x.grad.tolist() == [1.0]
    assert y.grad.tolist() == [3.0]
    graph = T.Graph.from_output(T.tsum(q))
    ids = [id(n) for n in graph.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): k for k, n in enumerate(graph.nodes)}
    for n in graph.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


def test_non_finite_rejected():
    with pytest.raises(FloatingPointError):
        Tensor([np.nan])
    with pytest.raises(FloatingPointError):
        T.div(Tensor([1.0]), Tensor([0.0]))


# ---- every differentiable primitive against central differences on [-2, 2]

RNG = np.random.default_rng(7)
_B = RNG.uniform(-2, 2, size=(3, 4))
_G = RNG.uniform(0.5, 1.5, size=(4,))
_BETA = RNG.uniform(-1, 1, size=(4,))
_TABLE_IDS = np.array([2, 0, 2, 1])

PRIMITIVES = {
    "add": lambda x: T.add(x, Tensor(_B)),
    "add_broadcast": lambda x: T.add(Tensor(_B), T.getitem(x, 0)),
    "sub": lambda x: T.sub(Tensor(_B), x),
    "mul": lambda x: T.mul(x, Tensor(_B)),
    "mul_self": lambda x: T.mul(x, x),
    "div": lambda x: T.div(Tensor(_B), T.add(T.mul(x, x), 1.0)),
    "scale": lambda x: T.scale(x, -2.5),
    "mean": lambda x: T.mean(x, axis=1),
    "mean_all": lambda x: T.mean(x),
    "sum_keep": lambda x: T.tsum(x, axis=0, keepdims=True),
    "max_rows": lambda x: T.max_rows(x)[0],
    "concat": lambda x: T.concat([x, T.scale(x, 2.0)], axis=1),
    "concat0": lambda x: T.concat([Tensor(_B), x], axis=0),
    "layer_norm": lambda x: T.layer_norm(x, Tensor(_G), Tensor(_BETA)),
    "sigmoid": T.sigmoid,
    "exp": T.exp,
    "log": lambda x: T.log(T.add(T.mul(x, x), 0.5)),
    "relu": T.relu,
    "transpose": lambda x: T.transpose(x),
    "reshape": lambda x: T.reshape(x, (4, 3)),
    "getitem": lambda x: T.getitem(x, (slice(0, 2), np.array([0, 3]))),
    "l2_normalize": T.l2_normalize,
    "log_softmax": T.log_softmax_rows,
    "bce": lambda x: T.bce_with_logits(x, (_B > 0).astype(float)),
    "cross_entropy": lambda x: T.cross_entropy(x, np.array([0, 3, 1])),
    "cross_entropy_weighted": lambda x: T.cross_entropy(x, np.array([0, 3, 1]), weights=[1, 0, 1]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_central_differences(name):
    assert check_unary(PRIMITIVES[name], (3, 4), seed=zlib.crc32(name.encode()) % 1000) <= 1e-4


def test_layer_norm_parameter_gradients():
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 2, size=(3, 4))
    assert check_unary(lambda g: T.layer_norm(Tensor(x), g, Tensor(_BETA)), (4,), lo=0.5) < 1e-4
    assert check_unary(lambda b: T.layer_norm(Tensor(x), Tensor(_G), b), (4,)) < 1e-4


def test_embedding_lookup_and_gradient():
    table = np.arange(6.0).reshape(3, 2)
    out = T.embedding(Tensor(table), _TABLE_IDS)
    assert out.data.tolist() == [[4, 5], [0, 1], [4, 5], [2, 3]]
    assert check_unary(lambda t: T.embedding(t, _TABLE_IDS), (3, 2)) < 1e-6
    with pytest.raises(ShapeError):
        T.embedding(Tensor(table), [3])


def test_bce_known_values():
    assert T.bce_with_logits(Tensor([0.0]), [1.0]).item() == pytest.approx(math.log(2), abs=1e-15)
    big = T.bce_with_logits(Tensor([800.0, -800.0]), [1.0, 0.0]).item()
    assert big == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_uniform_logits():
    v = 7
    loss = T.cross_entropy(Tensor(np.zeros((3, v))), [0, 4, 6]).item()
    assert loss == pytest.approx(math.log(v), abs=1e-14)


# ---- finite_diff_check


def test_finite_diff_check_linear_is_exact():
    w = Tensor(np.random.default_rng(0).normal(size=(5,)), requires_grad=True)
    c = Tensor(np.arange(5.0))
    assert T.finite_diff_check(lambda: T.tsum(T.mul(w, c)), [w]) < 1e-9


def test_finite_diff_check_softmax_cross_entropy():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    targets = rng.integers(0, 6, size=4)
    err = T.finite_diff_check(lambda: T.cross_entropy(logits, targets), [logits], samples_per_param=24)
    assert err <= 1e-4


def test_finite_diff_check_skips_frozen():
    w = Tensor([1.0, 2.0], requires_grad=True)
    frozen = Tensor([3.0, 4.0], requires_grad=False)
    err = T.finite_diff_check(lambda: T.tsum(T.mul(T.mul(w, w), frozen)), [w, frozen])
    assert err < 1e-6
    assert frozen.grad is None


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_loss_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w1 = Tensor(rng.uniform(-2, 2, size=(4, 5)), requires_grad=True)
    w2 = Tensor(rng.uniform(-2, 2, size=(5, 3)), requires_grad=True)
    x = Tensor(rng.uniform(-2, 2, size=(6, 4)))
    y = rng.integers(0, 3, size=6)

    def f():
        h = T.layer_norm(T.matmul(x, w1), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        return T.cross_entropy(T.matmul(T.sigmoid(h), w2), y)

    assert T.finite_diff_check(f, [w1, w2], samples_per_param=6, rng=rng) <= 1e-4

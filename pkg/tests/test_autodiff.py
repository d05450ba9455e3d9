import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cogplan.autodiff import (
    Adam,
    Linear,
    MultiHeadAttention,
    OptimizerState,
    Parameter,
    Tensor,
    attention,
    load_archive,
    no_grad,
    optimizer_step,
    save_archive,
)
from cogplan.autodiff import tensor as T
from cogplan.exceptions import ConfigError, InputError, UsageError


def numeric_grad(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    """Central differences of a numpy-valued scalar function; independent of the engine."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-300)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity_and_hand_arithmetic():
    m = np.array([[1.5, -2.0], [0.25, 7.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a_np, b_np = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = Tensor(a_np.copy(), requires_grad=True)
    (a @ Tensor(b_np)).sum().backward()
    num = numeric_grad(lambda x: (x @ b_np).sum(), a_np.copy())
    assert rel_err(a.grad, num) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(InputError, match=r"\(3, 4\).*\(5, 2\)"):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((5, 2)))


def test_batched_matmul_broadcasts_leading_dims():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (ta @ tb).sum().backward()
    assert np.allclose((ta @ tb).data, a @ b)
    assert np.allclose(tb.grad, numeric_grad(lambda x: (a @ x).sum(), b.copy()), rtol=1e-6)


# -- softmax / normalize --------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    expected = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    assert np.allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003057, 0.24472847, 0.66524096],
                       atol=5e-9)
    assert np.allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, expected, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_l2_normalize_examples():
    assert np.allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(T.l2_normalize(Tensor(u)).data, u)
    assert np.array_equal(T.l2_normalize(Tensor(np.zeros(4)), eps=1e-12).data, np.zeros(4))


def test_l2_normalize_zero_row_has_zero_gradient():
    x = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    (T.l2_normalize(x, axis=-1) * Tensor([[1.0, 2.0], [1.0, 2.0]])).sum().backward()
    assert np.array_equal(x.grad[0], [0.0, 0.0])
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit_norm(x):
    out = T.l2_normalize(Tensor(x), axis=-1).data
    norms = np.linalg.norm(out, axis=-1)
    live = np.linalg.norm(x, axis=-1) >= 1e-12
    assert np.allclose(norms[live], 1.0, atol=1e-9)
    assert np.all(norms[~live] == 0)


# -- attention ----------------------------------------------------------------------

def test_single_key_attention_returns_the_value():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(1, 4))
    out = attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v), heads=1)
    assert np.array_equal(out.data, np.repeat(v, 3, axis=0))


def test_identical_keys_average_the_values():
    k = np.array([[0.3, -1.2], [0.3, -1.2]])
    v = np.array([[2.0, 4.0], [6.0, -8.0]])
    out = attention(Tensor([[5.0, 1.0]]), Tensor(k), Tensor(v), heads=1)
    assert np.allclose(out.data, [[4.0, -2.0]], atol=1e-15)


def test_attention_matches_loop_oracle_with_positions():
    rng = np.random.default_rng(3)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 6))
    qp, kp = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    out = attention(Tensor(q), Tensor(k), Tensor(v), heads=2, q_pos=Tensor(qp), k_pos=Tensor(kp)).data
    ref = np.zeros((2, 6))
    for h in range(2):
        qs, ks, vs = slice(2 * h, 2 * h + 2), slice(2 * h, 2 * h + 2), slice(3 * h, 3 * h + 3)
        for i in range(2):
            scores = [math.fsum((q[i, qs] + qp[i, qs]) * (k[j, ks] + kp[j, ks])) / math.sqrt(2)
                      for j in range(3)]
            w = np.exp(np.array(scores) - max(scores))
            w /= w.sum()
            ref[i, vs] = sum(w[j] * v[j, vs] for j in range(3))
    assert np.allclose(out, ref, atol=1e-13)


def test_attention_gradients_with_positional_encodings():
    rng = np.random.default_rng(4)
    arrs = [rng.normal(size=s) for s in [(2, 4), (3, 4), (3, 4), (2, 4), (3, 4)]]
    w = rng.normal(size=(2, 4))
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrs]
    (attention(leaves[0], leaves[1], leaves[2], heads=2, q_pos=leaves[3], k_pos=leaves[4]) * w).sum().backward()

    def f_np(i):
        def f(x):
            vals = [a if j != i else x for j, a in enumerate(arrs)]
            with no_grad():
                return float((attention(*map(Tensor, vals[:3]), heads=2, q_pos=Tensor(vals[3]),
                                        k_pos=Tensor(vals[4])).data * w).sum())
        return f

    for i, leaf in enumerate(leaves):
        assert rel_err(leaf.grad, numeric_grad(f_np(i), arrs[i].copy())) < 1e-5


def test_attention_head_divisibility_is_config_error():
    with pytest.raises(ConfigError):
        attention(Tensor(np.ones((1, 6))), Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), heads=4)
    with pytest.raises(ConfigError):
        MultiHeadAttention(10, 4, np.random.default_rng(0))


def test_attention_position_shape_checked():
    with pytest.raises(InputError):
        attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))),
                  q_pos=Tensor(np.ones((3, 4))))


# -- backward ----------------------------------------------------------------------

def test_backward_square_and_accumulation():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0
    y = Tensor(1.0, requires_grad=True)
    (y + y).backward()
    assert y.grad == 2.0


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_five_op_graph_matches_finite_differences():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 3))
    W = rng.normal(size=(3, 3))

    def f_np(x):
        h = np.tanh(x @ W)
        e = np.exp(h) / np.exp(h).sum(axis=-1, keepdims=True)
        return float((e * x).sum() + np.log(1 + (x * x).sum()))

    x = Tensor(x0.copy(), requires_grad=True)
    h = (x @ Tensor(W)).tanh()
    (T.softmax(h, axis=-1) * x).sum().__add__((1.0 + (x * x).sum()).log()).backward()
    assert rel_err(x.grad, numeric_grad(f_np, x0.copy())) < 1e-5


def test_each_node_visited_once_on_diamond_graph():
    # a feeds two branches that rejoin; counting via gradient: d/dx (x*2 + x*3)^2 at x=1 -> 2*5*5 = 50
    x = Tensor(1.0, requires_grad=True)
    a = x * 1.0
    y = (a * 2.0 + a * 3.0)
    (y * y).backward()
    assert x.grad == 50.0


def test_no_grad_builds_no_graph():
    x = Tensor(2.0, requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


# -- optimizer -------------------------------------------------------------------------

def test_sgd_hand_arithmetic():
    w = Parameter(np.array(1.0))
    w.grad = np.array(2.0)
    optimizer_step(OptimizerState(0.1, mode="sgd"), [w])
    assert w.data == pytest.approx(0.8, abs=1e-15)
    assert w.grad is None


@pytest.mark.parametrize("g", [1e-6, 0.3, 250.0, -4.0])
def test_adam_first_step_magnitude_is_learning_rate(g):
    w = Parameter(np.array(0.5))
    w.grad = np.array(g)
    optimizer_step(OptimizerState(1e-3, eps=0.0), [w])
    assert abs(0.5 - w.data) == pytest.approx(1e-3, abs=1e-6)


def test_frozen_parameter_is_bitwise_unchanged():
    rng = np.random.default_rng(6)
    frozen = Parameter(rng.normal(size=(4, 3)), frozen=True)
    live = Parameter(rng.normal(size=3))
    before = frozen.data.tobytes()
    state = OptimizerState(0.1, weight_decay=0.1)
    for _ in range(5):
        frozen.grad = rng.normal(size=(4, 3))
        live.grad = rng.normal(size=3)
        optimizer_step(state, [frozen, live])
    assert frozen.data.tobytes() == before
    assert id(frozen) not in state.first_moment and id(live) in state.first_moment


def test_missing_gradient_is_usage_error():
    with pytest.raises(UsageError):
        optimizer_step(OptimizerState(0.1), [Parameter(np.zeros(2))])


def test_training_is_deterministic_under_seed():
    def run():
        rng = np.random.default_rng(9)
        lin = Linear(3, 2, rng)
        opt = Adam(lin.parameters(), lr=1e-2)
        x = np.random.default_rng(10).normal(size=(8, 3))
        for _ in range(5):
            (lin(Tensor(x)) ** 2).mean().backward()
            opt.step()
        return b"".join(p.data.tobytes() for p in lin.parameters())

    assert run() == run()


# -- checkpoint archive ----------------------------------------------------------------

def test_archive_round_trip_and_determinism(tmp_path):
    rng = np.random.default_rng(7)
    tensors = {"a.weight": rng.normal(size=(3, 2)), "b": np.array(1.5)}
    p1 = save_archive(tmp_path / "x.ckpt", tensors, {"b": True}, seed=4, metadata={"k": 1})
    p2 = save_archive(tmp_path / "y.ckpt", tensors, {"b": True}, seed=4, metadata={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
    loaded, manifest = load_archive(p1)
    assert manifest["seed"] == 4 and manifest["metadata"] == {"k": 1}
    assert {e["name"]: e["frozen"] for e in manifest["tensors"]} == {"a.weight": False, "b": True}
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])


def test_load_state_dict_names_shape_mismatch():
    lin = Linear(3, 2, np.random.default_rng(0))
    with pytest.raises(ConfigError, match=r"\(4, 2\).*\(3, 2\)"):
        lin.load_state_dict({"weight": np.zeros((4, 2)), "bias": np.zeros(2)})


def test_missing_archive_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_archive(tmp_path / "absent.ckpt")

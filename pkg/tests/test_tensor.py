import math

import numpy as np
import pytest

from hatseq.tensor import (
    DropoutRng,
    Tensor,
    concat,
    dropout,
    gather,
    gelu,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    no_grad,
    pick,
    softmax,
)
from helpers import numeric_grad, rel_err


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    m = np.arange(9, dtype=np.float64).reshape(3, 3)
    out = matmul(Tensor(np.eye(3)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_value():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_zeros():
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).random((3, 4))))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 4\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_matmul_batched_with_broadcast_weight():
    rng = np.random.default_rng(1)
    a = rng.random((4, 3, 5))
    w = rng.random((5, 2))
    out = matmul(Tensor(a), Tensor(w))
    assert out.shape == (4, 3, 2)
    assert np.allclose(out.data, a @ w)


# -- softmax ------------------------------------------------------------------

def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_stabilized_no_overflow():
    out = softmax(Tensor([1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_closed_form():
    out = softmax(Tensor([0.0, math.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    out = softmax(Tensor(rng.normal(size=(5, 7)) * 10), axis=-1)
    assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-12
    assert np.all(out.data >= 0)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    a = log_softmax(Tensor(x), axis=-1).data
    b = np.log(softmax(Tensor(x), axis=-1).data)
    assert np.allclose(a, b, atol=1e-12)


# -- gelu ---------------------------------------------------------------------

def test_gelu_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_asymptotics():
    assert abs(gelu(Tensor([12.0])).data[0] - 12.0) < 1e-12
    assert abs(gelu(Tensor([-12.0])).data[0]) < 1e-12


def test_gelu_erf_oracle_at_one():
    expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert abs(gelu(Tensor([1.0])).data[0] - expected) < 1e-12
    assert abs(expected - 0.8413447) < 5e-8


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_zero_gain_broadcasts_bias():
    bias = np.array([1.0, 2.0, 3.0])
    out = layer_norm(Tensor(np.random.default_rng(4).random((5, 3))),
                     Tensor(np.zeros(3)), Tensor(bias))
    assert np.allclose(out.data, np.tile(bias, (5, 1)))


def test_layer_norm_statistics():
    rng = np.random.default_rng(5)
    out = layer_norm(Tensor(rng.normal(size=(3, 64)) * 2 + 1),
                     Tensor(np.ones(64)), Tensor(np.zeros(64)))
    assert np.max(np.abs(out.data.mean(axis=-1))) < 1e-10
    assert np.max(np.abs(out.data.var(axis=-1) - 1.0)) < 1e-3


def test_layer_norm_bad_eps():
    with pytest.raises(ValueError):
        layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]), eps=0.0)


# -- backward -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(6).random((3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic_gives_x():
    data = np.random.default_rng(7).random((4, 2))
    x = Tensor(data, requires_grad=True)
    ((x * x).sum() * 0.5).backward()
    assert np.allclose(x.grad, data, atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_accumulates_exactly():
    x = Tensor(np.random.default_rng(8).random(5), requires_grad=True)

    def loss():
        return (gelu(x) * x).sum()

    loss().backward()
    once = x.grad.copy()
    loss().backward()
    assert np.array_equal(x.grad, 2.0 * once)


def test_composed_graph_matches_finite_differences():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)

    def build():
        h = gelu(matmul(x, w) + b)
        p = softmax(h, axis=-1)
        return (p * p).sum() + log_softmax(h, axis=-1).mean()

    build().backward()
    for t in (x, w, b):
        numeric = numeric_grad(lambda: float(build().data), t.data)
        assert rel_err(t.grad, numeric) < 1e-4


@pytest.mark.parametrize("name", [
    "add_broadcast", "mul", "scale", "matmul", "transpose", "reshape",
    "concat", "gather", "pick", "softmax", "log_softmax", "gelu",
    "layer_norm", "masked_fill", "sum_axis", "mean", "log", "exp", "dropout",
])
def test_primitive_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    aux = Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    row_const = rng.normal(size=6)
    gain_const = np.abs(rng.normal(size=6)) + 0.5
    bias_const = rng.normal(size=6)

    def build():
        if name == "add_broadcast":
            return (x + aux + Tensor(row_const)).sum()
        if name == "mul":
            return (x * aux).sum()
        if name == "scale":
            return (x * -1.7).sum()
        if name == "matmul":
            return matmul(x, aux.transpose()).sum()
        if name == "transpose":
            return (x.transpose() * aux.transpose()).sum()
        if name == "reshape":
            return (x.reshape(2, 12) * x.reshape(2, 12)).sum()
        if name == "concat":
            return (concat([x, aux], axis=0) * 0.5).sum()
        if name == "gather":
            return gather(x, np.array([0, 2, 2, 1])).sum()
        if name == "pick":
            return pick(x, np.array([0, 5, 5, 3])).sum()
        if name == "softmax":
            return (softmax(x, axis=-1) * aux).sum()
        if name == "log_softmax":
            return (log_softmax(x, axis=-1) * aux).sum()
        if name == "gelu":
            return gelu(x).sum()
        if name == "layer_norm":
            return (layer_norm(x, Tensor(gain_const), Tensor(bias_const)) * aux).sum()
        if name == "masked_fill":
            mask = np.zeros((4, 6), dtype=bool)
            mask[1, 2] = mask[3, 3] = True
            return (masked_fill(x, mask, -5.0) * aux).sum()
        if name == "sum_axis":
            return (x.sum(axis=0) * aux.sum(axis=0)).sum()
        if name == "mean":
            return x.mean() * 7.0 + x.mean(axis=1).sum()
        if name == "log":
            return (x * x + 0.1).log().sum()
        if name == "exp":
            return (x * 0.3).exp().sum()
        if name == "dropout":
            rng_drop = DropoutRng(1234)
            return (dropout(x, 0.4, rng_drop, train=True) * aux).sum()
        raise AssertionError(name)

    loss = build()
    loss.backward()
    grads = {id(t): t.grad for t in (x, aux) if t.grad is not None}
    for t in (x, aux):
        if id(t) not in grads:
            continue
        numeric = numeric_grad(lambda: float(build().data), t.data)
        assert rel_err(grads[id(t)], numeric) < 1e-4, name


def test_layer_norm_gain_bias_gradients():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    g = Tensor(rng.normal(size=8) + 1.5, requires_grad=True)
    b = Tensor(rng.normal(size=8), requires_grad=True)
    weight = rng.normal(size=(5, 8))

    def build():
        return (layer_norm(x, g, b) * Tensor(weight)).sum()

    build().backward()
    for t in (x, g, b):
        numeric = numeric_grad(lambda: float(build().data), t.data)
        assert rel_err(t.grad, numeric) < 1e-4


# -- indexing backward ----------------------------------------------------------

def test_gather_scatter_add_accumulates_duplicates():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    gather(x, np.array([1, 1, 1])).sum().backward()
    assert np.array_equal(x.grad, [[0, 0], [3, 3], [0, 0]])


def test_pick_backward_scatters():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    (pick(x, np.array([2, 2])) * Tensor([2.0, 5.0])).sum().backward()
    assert np.array_equal(x.grad, [[0, 0, 2], [0, 0, 5]])


# -- masking / dropout -----------------------------------------------------------

def test_masked_fill_forward_and_blocked_grad():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    mask = np.array([[True, False], [False, True]])
    out = masked_fill(x, mask, -1e9)
    assert out.data[0, 0] == -1e9 and out.data[1, 0] == 3.0
    out.sum().backward()
    assert np.array_equal(x.grad, [[0, 1], [1, 0]])


def test_dropout_eval_is_identity():
    x = Tensor(np.ones(10), requires_grad=True)
    assert dropout(x, 0.5, None, train=False) is x
    assert dropout(x, 0.0, None, train=True) is x


def test_dropout_train_scales_kept_entries():
    x = Tensor(np.ones(4000))
    out = dropout(x, 0.25, DropoutRng(7), train=True)
    kept = out.data != 0.0
    assert np.allclose(out.data[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.03


def test_dropout_requires_rng_in_train_mode():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 0.5, None, train=True)


def test_dropout_rng_is_counter_addressed():
    a = DropoutRng(42)
    b = DropoutRng(42)
    m1 = a.keep_mask((100,), 0.5)
    m2 = a.keep_mask((100,), 0.5)
    assert np.array_equal(m1, b.keep_mask((100,), 0.5))
    assert np.array_equal(m2, b.keep_mask((100,), 0.5))
    assert not np.array_equal(m1, m2)


# -- determinism / grad control ---------------------------------------------------

def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        out = softmax(matmul(gelu(x), w), axis=-1).sum(axis=0)
        loss = (out * out).sum()
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (x * x).sum()
    assert not out.requires_grad
    assert out._vjp is None

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evotrain import runtime
from evotrain import tensor as T
from evotrain.autodiff import grad_check
from evotrain.prng import Prng
from evotrain.tensor import DType, bf16_round

# ---------------------------------------------------------------------------
# finite-difference gradient coverage, one case per differentiable op.
# Each loss is weighted by a fixed random tensor so no op's true gradient
# degenerates to zero (plain means of softmax/layer_norm are constants).

_RNG = Prng(123)
_C34 = T.tensor(_RNG.uniform((3, 4)))
_C35 = T.tensor(_RNG.uniform((3, 5)))
_C43 = T.tensor(_RNG.uniform((4, 3)))
_C64 = T.tensor(_RNG.uniform((6, 4)))


def _weighted(out, c):
    return T.mean_all(T.mul(out, c))


def _x(shape, seed=5, scale=1.0):
    return T.parameter(Prng(seed).uniform(shape) * scale)


W45 = T.tensor(Prng(17).uniform((4, 5)) * 0.4)


CASES = [
    ("matmul", (3, 4), lambda x: _weighted(T.matmul(x, W45), _C35)),
    ("add", (3, 4), lambda x: _weighted(T.add(x, _C34), _C34)),
    ("add_broadcast", (3, 4), lambda x: _weighted(T.add(x, T.tensor(np.float32(0.25))), _C34)),
    ("mul", (3, 4), lambda x: _weighted(T.mul(x, _C34), _C34)),
    ("scale", (3, 4), lambda x: _weighted(T.scale(x, 1.7), _C34)),
    ("sigmoid", (3, 4), lambda x: _weighted(T.sigmoid(x), _C34)),
    ("relu", (3, 4), lambda x: _weighted(T.relu(T.add(x, T.tensor(np.float32(0.05)))), _C34)),
    ("recip", (3, 4), lambda x: _weighted(T.recip(T.add(T.mul(x, x), T.tensor(np.float32(1.0)))), _C34)),
    ("softmax", (3, 4), lambda x: _weighted(T.softmax_lastdim(x), _C34)),
    ("layer_norm", (3, 4), lambda x: _weighted(
        T.layer_norm(x, T.parameter(np.ones(4, np.float32)),
                     T.parameter(np.zeros(4, np.float32))), _C34)),
    ("transpose", (4, 3), lambda x: _weighted(T.transpose(x, (1, 0)), _C34)),
    ("reshape", (2, 6), lambda x: _weighted(T.reshape(x, (3, 4)), _C34)),
    ("reduce_sum", (3, 4), lambda x: T.mean_all(T.mul(T.reduce_sum(x, axis=1, keepdims=True), T.tensor(Prng(9).uniform((3, 1)))))),
    ("mean_all", (3, 4), lambda x: T.mul(T.mean_all(x), T.mean_all(T.mul(x, _C34)))),
    ("concat", (3, 4), lambda x: _weighted(T.concat([x, T.mul(x, _C34)], axis=0), T.tensor(Prng(11).uniform((6, 4))))),
    ("split", (6, 4), lambda x: _weighted(T.split(x, 2, axis=0)[1], _C34)),
]


@pytest.mark.parametrize("name,shape,loss", CASES, ids=[c[0] for c in CASES])
def test_op_gradient_finite_difference(name, shape, loss):
    x = _x(shape)
    err = grad_check(lambda _: loss(x), x)
    assert err <= 1e-3, f"{name}: rel err {err}"


def test_cast_gradient_is_straight_through():
    # cast quantizes, so finite differences are meaningless; the tape
    # gradient must pass through unchanged
    from evotrain.autodiff import Tape, backward
    x = _x((3, 4))
    with Tape() as t:
        loss = _weighted(T.widen(T.cast_bf16(x)), _C34)
    g = backward(t, loss, [x])[x.bid].data
    t.close()
    assert np.allclose(g, _C34.data / 12.0)


# ---------------------------------------------------------------------------
# bf16 emulation properties


@given(st.floats(min_value=-1e30, max_value=1e30, allow_nan=False,
                 allow_subnormal=False))
@settings(max_examples=200)
def test_bf16_round_idempotent(v):
    a = bf16_round(np.array([v], np.float32))
    assert np.array_equal(bf16_round(a), a)


@given(st.integers(min_value=-120, max_value=120))
def test_bf16_powers_of_two_exact(e):
    v = np.array([2.0**e], np.float32)
    assert np.array_equal(bf16_round(v), v)


def test_bf16_round_to_nearest_even():
    # 1 + 2^-8 sits exactly between 1.0 and 1 + 2^-7: ties go to even (1.0)
    v = np.float32(1.0 + 2.0**-8)
    assert bf16_round(np.array([v], np.float32))[0] == np.float32(1.0)
    # 1 + 3*2^-8 is between 1 + 2^-7 (odd mantissa) and 1 + 2^-6 (even): up
    v2 = np.float32(1.0 + 3 * 2.0**-8)
    assert bf16_round(np.array([v2], np.float32))[0] == np.float32(1.0 + 2.0**-6)


def test_bf16_tensor_halves_ledger_bytes():
    a = T.tensor(np.ones((10, 10), np.float32))
    b = T.tensor(np.ones((10, 10), np.float32), DType.BF16)
    assert a.nbytes == 400 and b.nbytes == 200


def test_act_dtype_policy_rounds_op_outputs():
    cx = runtime.ctx()
    x = T.parameter(Prng(2).uniform((8, 8)))
    y32 = T.matmul(x, x)
    cx.act_dtype = DType.BF16
    y16 = T.matmul(x, x)
    cx.act_dtype = None
    assert y16.dtype is DType.BF16
    assert np.array_equal(y16.data, bf16_round(y32.data))
    assert y16.nbytes * 2 == y32.nbytes


# ---------------------------------------------------------------------------
# shape/bookkeeping properties


def test_unbroadcast_reduces_to_shape():
    g = np.ones((2, 3, 4), np.float32)
    assert T.unbroadcast(g, (3, 4)).shape == (3, 4)
    assert T.unbroadcast(g, (1, 4)).shape == (1, 4)
    assert float(T.unbroadcast(g, (1, 4))[0, 0]) == 6.0


def test_release_frees_ledger_entry():
    led = runtime.ctx().ledger
    t = T.tensor(np.zeros((4,), np.float32))
    assert led.is_live(t.bid)
    t.release()
    assert not led.is_live(t.bid)


def test_split_concat_roundtrip():
    x = T.tensor(Prng(4).uniform((6, 3)))
    parts = T.split(x, 3, axis=0)
    back = T.concat(parts, axis=0)
    assert np.array_equal(back.data, x.data)

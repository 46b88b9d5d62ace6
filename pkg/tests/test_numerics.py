import math

import numpy as np
import pytest

from hier_attn import numerics as nm
from hier_attn.numerics import (
    Adam,
    ParamBlock,
    ShapeError,
    Tape,
    Tensor,
    add,
    bce_with_logits,
    concat,
    grad_check,
    grad_check_params,
    layer_norm,
    log_softmax,
    masked_softmax,
    matmul,
    mlp_forward,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    seq_matmul,
    slice_axis,
    smooth_l1,
    sub,
    take_rows,
    transpose,
)


def constant(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_matmul_identity():
    v = np.array([[1.0], [2.0], [-3.0]])
    out = matmul(constant(np.eye(3)), constant(v))
    assert np.array_equal(out.data, v)


def test_matmul_1x1_is_scalar_product():
    out = matmul(constant([[3.0]]), constant([[-2.0]]))
    assert out.data.shape == (1, 1)
    assert out.item() == -6.0


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


def test_seq_matmul_matches_matmul():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 7))
    b = rng.normal(size=(7, 5))
    got = seq_matmul(constant(a), constant(b)).data
    want = a @ b
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_seq_matmul_zero_padding_is_bitwise_noop():
    # appending zero rows/cols along the contraction axis must not change
    # a single bit of the result
    rng = np.random.default_rng(1)
    w = rng.normal(size=(1, 5))
    v = rng.normal(size=(5, 3))
    w_pad = np.concatenate([w, np.zeros((1, 11))], axis=1)
    v_pad = np.concatenate([v, np.zeros((11, 3))], axis=0)
    small = seq_matmul(constant(w), constant(v)).data
    big = seq_matmul(constant(w_pad), constant(v_pad)).data
    assert small.tobytes() == big.tobytes()


def test_softmax_reference_values():
    # scalar reference computation for logits (1, 2, 3)
    logits = [1.0, 2.0, 3.0]
    exps = [math.exp(v - 3.0) for v in logits]
    total = sum(exps)
    want = np.array([e / total for e in exps])
    got = masked_softmax(constant([logits])).data[0]
    assert np.allclose(got, want, rtol=1e-14, atol=1e-15)


def test_masked_softmax_two_equal_unmasked():
    out = masked_softmax(constant([[2.5, 2.5, 9.0]]), mask=[[True, True, False]])
    assert out.data[0, 0] == out.data[0, 1] == 0.5
    assert out.data[0, 2] == 0.0


def test_masked_softmax_single_unmasked_position():
    out = masked_softmax(constant([[4.0, -1.0]]), mask=[[False, True]])
    assert out.data[0, 1] == 1.0
    assert out.data[0, 0] == 0.0


def test_masked_softmax_fully_masked_row_is_zero_not_nan():
    tape = Tape()
    x = tape.watch(constant([[1.0, 2.0], [3.0, 4.0]]))
    y = masked_softmax(x, mask=[[False, False], [True, True]])
    assert np.array_equal(y.data[0], [0.0, 0.0])
    loss = reduce_sum(y)
    tape.backward(loss)
    assert np.array_equal(x.grad[0], [0.0, 0.0])
    assert np.all(np.isfinite(x.grad))


def test_masked_softmax_row_sums():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 9))
    mask = rng.random((6, 9)) > 0.4
    mask[2, :] = False
    y = masked_softmax(constant(x), mask=mask).data
    assert np.all(y >= 0.0) and np.all(y <= 1.0)
    sums = y.sum(axis=-1)
    for r in range(6):
        want = 0.0 if not mask[r].any() else 1.0
        assert abs(sums[r] - want) < 1e-12
    # masked positions carry exactly zero weight
    assert np.all(y[~mask] == 0.0)


def test_masked_softmax_axis_argument():
    x = np.random.default_rng(4).normal(size=(3, 5))
    a = masked_softmax(constant(x), axis=0).data
    b = masked_softmax(constant(x.T), axis=-1).data.T
    assert np.allclose(a, b, atol=1e-15)


def test_mlp_zero_weights_returns_bias():
    params = ParamBlock(0)
    params.mlp("f", [3, 4, 2])
    params["f.0.w"].data[:] = 0.0
    params["f.1.w"].data[:] = 0.0
    params["f.1.b"].data[:] = [0.5, -1.5]
    out = mlp_forward(constant(np.ones((5, 3))), params, "f")
    assert np.allclose(out.data, np.tile([0.5, -1.5], (5, 1)))


def test_mlp_identity_single_layer():
    params = ParamBlock(0)
    params.dense("f.0", 4, 4)
    params["f.0.w"].data[:] = np.eye(4)
    x = np.random.default_rng(5).normal(size=(3, 4))
    out = mlp_forward(constant(x), params, "f")
    assert np.array_equal(out.data, x)


def test_relu_and_structural_ops():
    x = constant([[-1.0, 2.0], [3.0, -4.0]])
    assert np.array_equal(relu(x).data, [[0.0, 2.0], [3.0, 0.0]])
    assert np.array_equal(reshape(x, (4,)).data, [-1.0, 2.0, 3.0, -4.0])
    assert np.array_equal(transpose(x, (1, 0)).data, x.data.T)
    assert np.array_equal(slice_axis(x, 1, 0, 1).data, [[-1.0], [3.0]])
    assert np.array_equal(concat([x, x], axis=0).data.shape, (4, 2))
    assert np.array_equal(take_rows(x, [1, 1, 0]).data, [[3.0, -4.0], [3.0, -4.0], [-1.0, 2.0]])


def test_take_rows_accumulates_gradient_for_repeats():
    tape = Tape()
    x = tape.watch(constant([[1.0, 1.0], [2.0, 2.0]]))
    y = take_rows(x, [0, 0, 1])
    tape.backward(reduce_sum(y))
    assert np.array_equal(x.grad, [[2.0, 2.0], [1.0, 1.0]])


def test_gradients_accumulate_for_reused_tensor():
    tape = Tape()
    x = tape.watch(constant([2.0]))
    y = add(mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 5
    tape.backward(reduce_sum(y))
    assert np.allclose(x.grad, [5.0])


# ---------------------------------------------------------------------------
# gradient checks (central differences, step 1e-5, rel err < 1e-4)
# ---------------------------------------------------------------------------

GRAD_SEEDS = [0, 1, 2]


def test_grad_check_linear_is_exact():
    w = np.random.default_rng(7).normal(size=(4, 1))

    def f(x):
        return reduce_sum(matmul(x, constant(w)))

    err = grad_check(f, constant(np.random.default_rng(8).normal(size=(3, 4))))
    assert err < 1e-9


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grad_check_matmul(seed):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(5, 2))
    w = rng.normal(size=(3, 2))

    def f(x):
        return reduce_sum(mul(matmul(x, constant(b)), constant(w)))

    assert grad_check(f, constant(rng.normal(size=(3, 5)))) < 1e-4


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grad_check_seq_matmul(seed):
    rng = np.random.default_rng(seed + 10)
    b = rng.normal(size=(2, 6, 4))
    w = rng.normal(size=(2, 3, 4))

    def f(x):
        return reduce_sum(mul(seq_matmul(x, constant(b)), constant(w)))

    assert grad_check(f, constant(rng.normal(size=(2, 3, 6)))) < 1e-4


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grad_check_masked_softmax_loss(seed):
    rng = np.random.default_rng(seed + 20)
    mask = rng.random((3, 6)) > 0.3
    mask[:, 0] = True
    w = rng.normal(size=(3, 6))

    def f(x):
        return reduce_sum(mul(masked_softmax(x, mask=mask), constant(w)))

    assert grad_check(f, constant(rng.normal(size=(3, 6)))) < 1e-4


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grad_check_mlp(seed):
    params = ParamBlock(seed)
    params.mlp("f", [8, 6, 3])
    rng = np.random.default_rng(seed + 30)
    w = rng.normal(size=(4, 3))
    x0 = constant(rng.normal(size=(4, 8)))

    def loss_fn():
        return reduce_sum(mul(mlp_forward(x0, params, "f"), constant(w)))

    assert grad_check_params(loss_fn, params) < 1e-4


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grad_check_assorted_ops(seed):
    rng = np.random.default_rng(seed + 40)
    t = rng.normal(size=(3, 4))

    def f(x):
        a = relu(add(x, 0.1))
        b = layer_norm(a, constant(np.ones(4)), constant(np.zeros(4)))
        c = reduce_max(b, axis=1)
        d = add(reduce_sum(smooth_l1(x, t, beta=0.7)), reduce_sum(c))
        e = add(d, reduce_sum(bce_with_logits(x, (t > 0).astype(float))))
        return add(e, reduce_sum(mul(log_softmax(x), t)))

    assert grad_check(f, constant(rng.normal(size=(3, 4)))) < 1e-4


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_grad_check_reductions_and_slices(seed):
    rng = np.random.default_rng(seed + 50)
    w = rng.normal(size=(2, 2))

    def f(x):
        y = concat([slice_axis(x, 0, 0, 2), slice_axis(x, 0, 2, 4)], axis=0)
        z = sub(scale(y, 1.7), reduce_mean(y, axis=0, keepdims=True))
        return reduce_sum(mul(slice_axis(z, 1, 1, 3), constant(np.tile(w, (2, 1)))))

    assert grad_check(f, constant(rng.normal(size=(4, 5)))) < 1e-4


# ---------------------------------------------------------------------------
# parameters, checkpoints, determinism
# ---------------------------------------------------------------------------

def test_parambLock_init_deterministic():
    a = ParamBlock(123)
    a.dense("layer", 16, 8)
    b = ParamBlock(123)
    b.dense("layer", 16, 8)
    assert a["layer.w"].data.tobytes() == b["layer.w"].data.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    params = ParamBlock(9)
    params.dense("enc", 5, 7)
    params.tensor("gain", (7,), init="ones")
    path = tmp_path / "model.npk"
    nm.save_params(params, path)
    loaded = nm.load_params(path)
    assert loaded.names() == params.names()
    for name in params.names():
        assert loaded[name].data.tobytes() == params[name].data.tobytes()
    # archive is byte-stable
    path2 = tmp_path / "model2.npk"
    nm.save_params(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.npk"
    p.write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        nm.load_params(p)


def test_adam_descends_quadratic():
    params = ParamBlock(0)
    t = params.tensor("x", (3,), init="zeros")
    t.data[:] = [5.0, -4.0, 2.0]
    opt = Adam(params, lr=0.05)
    for _ in range(500):
        tape = Tape()
        params.watch_all(tape)
        loss = reduce_sum(mul(params["x"], params["x"]))
        tape.backward(loss)
        opt.step()
    assert np.all(np.abs(t.data) < 1e-2)


def test_assert_finite_flags_nan():
    t = constant([1.0, np.nan])
    with pytest.raises(nm.NumericError):
        nm.assert_finite(t)


def test_tape_rejects_double_backward():
    tape = Tape()
    x = tape.watch(constant([1.0]))
    y = reduce_sum(mul(x, x))
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contactavatar import autodiff as ad
from contactavatar.autodiff import (NonFiniteError, OP_REGISTRY, ShapeError,
                                    Tape, TapeError, Tensor)
from contactavatar.checkpoint import load_tensors, save_tensors
from contactavatar.nn import AdamState, Mlp, adam_step, positional_encoding

from fdcheck import assert_grads_close, finite_diff


def test_square_forward_and_grad():
    tape = Tape()
    x = tape.leaf(3.0)
    y = x * x
    assert y.item() == 9.0
    tape.backward(y)
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)


def test_sin_exp_matches_finite_difference():
    def f(arrays):
        return float(np.sin(np.exp(arrays[0])))

    x0 = np.array(0.5)
    (fd,) = finite_diff(f, [x0], h=1e-5)
    tape = Tape()
    x = tape.leaf(x0)
    y = ad.sin(ad.exp(x))
    tape.backward(y)
    assert_grads_close(x.grad, fd, rtol=1e-5, label="sin(exp(x))")


@pytest.mark.parametrize("opname", sorted(OP_REGISTRY))
def test_registered_primitive_gradients(opname):
    # every primitive: reverse-mode vs central differences on 100 random
    # inputs, rel 1e-4 with a 1e-7 absolute floor
    spec = OP_REGISTRY[opname]
    rng = np.random.default_rng(hash(opname) % (2 ** 32))
    for _ in range(100):
        arrays = spec.sample(rng)
        w = None

        def scalarize(out_data):
            nonlocal w
            if w is None:
                w = rng.normal(size=out_data.shape)
            return float((out_data * w).sum())

        def f(arrs):
            out = spec.apply([Tensor(a) for a in arrs])
            return scalarize(out.data)

        fd = finite_diff(f, arrays)
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        out = spec.apply(leaves)
        loss = ad.tsum(ad.mul(out, w))
        tape.backward(loss)
        for leaf, g in zip(leaves, fd):
            assert_grads_close(leaf.grad, g, rtol=1e-4, atol=1e-7, label=opname)


def test_gradient_of_sum_equals_sum_of_gradients():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(4,))

    def build(x):
        a = ad.tsum(ad.square(x))
        b = ad.tsum(ad.tanh(x))
        return a, b

    tape = Tape()
    x = tape.leaf(x0)
    a, b = build(x)
    tape.backward(ad.add(a, b))
    g_sum = x.grad.copy()

    tape_a = Tape()
    xa = tape_a.leaf(x0)
    tape_a.backward(build(xa)[0])
    tape_b = Tape()
    xb = tape_b.leaf(x0)
    tape_b.backward(build(xb)[1])
    np.testing.assert_allclose(g_sum, xa.grad + xb.grad, rtol=0, atol=1e-15)


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(3)
    mlp = Mlp([4, 8, 8, 2], rng=np.random.default_rng(11))
    x = rng.normal(size=(5, 4))
    out1 = mlp(x)
    out2 = mlp(x)
    assert np.array_equal(out1, out2)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = tape.leaf(np.ones(2))
    loss = ad.tsum(ad.square(x))
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_backward_before_forward_raises():
    tape = Tape()
    with pytest.raises(TapeError):
        tape.backward(Tensor(1.0, tape, 0))
    t2 = Tape()
    x = t2.leaf(1.0)
    with pytest.raises(TapeError):
        _ = x.grad


def test_shape_and_finite_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([-1.0])))
    with pytest.raises(NonFiniteError):
        ad.div(Tensor(1.0), Tensor(0.0))


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(1.0)
    b = t2.leaf(2.0)
    with pytest.raises(TapeError):
        ad.add(a, b)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(3, 6))
    s = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0.0)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_gather_rows_accumulates_duplicates(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(4, 2))
    tape = Tape()
    x = tape.leaf(x0)
    out = ad.gather_rows(x, [1, 1, 3])
    tape.backward(ad.tsum(out))
    expected = np.zeros((4, 2))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


# ---------------------------------------------------------------------------
# Mlp


def test_mlp_zero_weights_outputs_bias():
    mlp = Mlp([3, 4, 2], rng=np.random.default_rng(0))
    for w in mlp.weights:
        w[:] = 0.0
    mlp.biases[-1][:] = np.array([0.25, -0.5])
    out = mlp(np.random.default_rng(1).normal(size=(6, 3)))
    np.testing.assert_allclose(out, np.tile([0.25, -0.5], (6, 1)), atol=1e-15)


def test_mlp_parameter_count():
    mlp = Mlp([4, 64, 64, 3])
    assert mlp.param_count == (4 + 1) * 64 + (64 + 1) * 64 + (64 + 1) * 3
    total = sum(p.size for p in mlp.params().values())
    assert total == mlp.param_count


def test_mlp_parameter_gradients_match_finite_difference():
    rng = np.random.default_rng(5)
    mlp = Mlp([3, 5, 4, 2], out_activation="sigmoid",
              rng=np.random.default_rng(9))
    x0 = rng.normal(size=(4, 3))
    names = sorted(mlp.params())
    base = {k: v.copy() for k, v in mlp.params().items()}

    def f(arrays):
        override = dict(zip(names, arrays))
        return float(mlp(x0, params=override).sum())

    fd = finite_diff(f, [base[n] for n in names])

    tape = Tape()
    leaves = {n: tape.leaf(base[n]) for n in names}
    out = mlp(tape.leaf(x0), params=leaves)
    tape.backward(ad.tsum(out))
    for n, g in zip(names, fd):
        assert_grads_close(leaves[n].grad, g, rtol=1e-4, label=n)


def test_mlp_tape_matches_numpy_path():
    mlp = Mlp([3, 6, 2], out_activation="sigmoid", rng=np.random.default_rng(2))
    x = np.random.default_rng(4).normal(size=(5, 3))
    tape = Tape()
    out_t = mlp(tape.leaf(x))
    np.testing.assert_array_equal(out_t.data, mlp(x))


def test_positional_encoding_shapes_and_tape_parity():
    x = np.random.default_rng(0).normal(size=(7, 3))
    enc = positional_encoding(x, octaves=6)
    assert enc.shape == (7, 3 * 13)
    tape = Tape()
    enc_t = positional_encoding(tape.leaf(x), octaves=6)
    np.testing.assert_array_equal(enc_t.data, enc)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_fixed_point():
    params = {"p": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    adam_step(state, params, {"p": np.zeros(2)})
    np.testing.assert_array_equal(params["p"], [1.0, -2.0])
    assert state.step_count == 1


def test_adam_single_step_hand_value():
    # m=0.1, v=0.001; mhat=1, vhat=1 -> p = 1 - 0.1*1/(1+eps) ~ 0.9
    params = {"p": np.array([1.0])}
    state = AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(state, params, {"p": np.array([1.0])})
    assert params["p"][0] == pytest.approx(0.9, abs=1e-8)


def test_adam_elementwise_independence():
    joint = {"p": np.array([1.0, -3.0])}
    s = AdamState(lr=0.05)
    for g in ([0.5, -1.0], [0.2, 0.3], [-0.4, 0.1]):
        adam_step(s, joint, {"p": np.array(g)})

    split = {"a": np.array([1.0]), "b": np.array([-3.0])}
    s2 = AdamState(lr=0.05)
    for g in ([0.5, -1.0], [0.2, 0.3], [-0.4, 0.1]):
        adam_step(s2, split, {"a": np.array(g[:1]), "b": np.array(g[1:])})
    np.testing.assert_allclose(joint["p"],
                               np.concatenate([split["a"], split["b"]]),
                               atol=0, rtol=0)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"p": np.zeros(2)}, {"p": np.zeros(3)})


# ---------------------------------------------------------------------------
# checkpoint container


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.W0": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,)),
               "scalarish": np.array(3.25)}
    meta = {"kind": "test", "note": "x"}
    path = tmp_path / "t.ckpt"
    save_tensors(path, tensors, meta)
    loaded, meta2 = load_tensors(path)
    assert meta2 == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_checkpoint_bytes_reproducible(tmp_path):
    tensors = {"x": np.arange(6, dtype=np.float64).reshape(2, 3)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_tensors(p1, tensors, {"v": 1})
    save_tensors(p2, tensors, {"v": 1})
    assert p1.read_bytes() == p2.read_bytes()

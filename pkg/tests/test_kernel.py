import zlib

import numpy as np
import pytest

from crl_mmnar.kernel import AdamW, NonFiniteGradientError, ShapeError, Tape, Tensor, ops
from crl_mmnar.kernel.checkpoint import (CheckpointError, decode_checkpoint,
                                         encode_checkpoint)
from crl_mmnar.kernel.layers import MLP, Linear

from gradcheck import numeric_grad, relative_error


def _param(arr):
    return Tensor(np.array(arr, dtype=float), requires_grad=True)


def _check(build, arrays, floor=1e-7, tol=1e-4):
    """Compare tape gradients of scalar build(*params) with central differences."""
    params = [_param(a) for a in arrays]

    def f():
        return build(*params).item()

    with Tape() as tape:
        loss = build(*params)
    grads = tape.backward(loss, params)
    numeric = numeric_grad(f, [p.data for p in params])
    for p, n in zip(params, numeric):
        assert relative_error(grads[p], n, floor) < tol


# A weighted reduction makes the scalar loss sensitive to every output entry.
def _w(shape, seed=99):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def _reduce(t):
    return ops.sum(ops.mul(t, _w(t.shape)))


OPS = {
    "add": (lambda a, b: _reduce(ops.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: _reduce(ops.sub(a, b)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: _reduce(ops.mul(a, b)), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: _reduce(ops.matmul(a, b)), [(3, 5), (5, 2)]),
    "batched_matmul": (lambda a, b: _reduce(ops.matmul(a, b)), [(2, 3, 5), (2, 5, 4)]),
    "sigmoid": (lambda a: _reduce(ops.sigmoid(a)), [(3, 4)]),
    "tanh": (lambda a: _reduce(ops.tanh(a)), [(3, 4)]),
    "relu": (lambda a: _reduce(ops.relu(a)), [(3, 4)]),
    "exp": (lambda a: _reduce(ops.exp(a)), [(3, 4)]),
    "softmax": (lambda a: _reduce(ops.softmax(a, axis=-1)), [(3, 5)]),
    "masked_softmax": (lambda a: _reduce(ops.softmax(
        a, axis=-1, mask=np.array([[1, 0, 1, 1], [0, 1, 0, 0], [1, 1, 1, 1]], bool))), [(3, 4)]),
    "log_softmax": (lambda a: _reduce(ops.log_softmax(a, axis=-1)), [(3, 5)]),
    "mean": (lambda a: _reduce(ops.mean(a, axis=0)), [(3, 4)]),
    "sum": (lambda a: _reduce(ops.sum(a, axis=1, keepdims=True)), [(3, 4)]),
    "l2_norm": (lambda a: _reduce(ops.l2_norm(a)), [(3, 4)]),
    "normalize": (lambda a: _reduce(ops.normalize(a)), [(3, 4)]),
    "cosine_sim": (lambda a, b: _reduce(ops.cosine_sim(a, b)), [(3, 4), (3, 4)]),
    "pairwise_cosine": (lambda a, b: _reduce(ops.pairwise_cosine(a, b)), [(3, 4), (5, 4)]),
    "concat": (lambda a, b: _reduce(ops.concat([a, b], axis=1)), [(3, 2), (3, 4)]),
    "stack": (lambda a, b: _reduce(ops.stack([a, b], axis=1)), [(3, 4), (3, 4)]),
    "reshape_transpose": (lambda a: _reduce(ops.transpose(ops.reshape(a, (2, 3, 2)), (0, 2, 1))),
                          [(3, 4)]),
    "take_rows": (lambda a: _reduce(ops.take_rows(a, np.array([2, 0, 2]))), [(3, 4)]),
    "scatter_rows": (lambda a: _reduce(ops.scatter_rows(a, np.array([4, 1]), 5)), [(2, 3)]),
    "masked_mean_pool": (lambda a: _reduce(ops.masked_mean_pool(
        a, np.array([[1, 0, 1], [0, 1, 0]]))), [(2, 3, 4)]),
    "bce_with_logits": (lambda a: ops.sum(ops.bce_with_logits(a, np.array([[1, 0, 1], [0, 0, 1]]))),
                        [(2, 3)]),
    "focal": (lambda a: ops.sum(ops.focal_bce_with_logits(
        a, np.array([[1, 0, 1], [0, 0, 1]]), gamma=2.0)), [(2, 3)]),
    "mse": (lambda a, b: ops.mse(a, b), [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        arrays = [rng.normal(size=s) for s in shapes]
        if name == "relu":
            # keep points away from the kink
            arrays = [np.where(np.abs(a) < 1e-3, 0.5, a) for a in arrays]
        _check(build, arrays)


def test_trivial_values():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    s = ops.softmax(Tensor([[2.0, 2.0, 2.0]])).data
    np.testing.assert_allclose(s, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)
    v = Tensor(np.random.default_rng(0).normal(size=(1, 7)))
    # the 1e-12 norm offset shifts self-similarity by ~2e-12/||v||
    assert ops.cosine_sim(v, v).item() == pytest.approx(1.0, abs=1e-11)


def test_trivial_derivatives():
    x = _param(0.0)
    with Tape() as tape:
        y = ops.sigmoid(x)
    assert tape.backward(y, [x])[x] == pytest.approx(0.25)
    x = _param(3.0)
    with Tape() as tape:
        y = x * x
    assert tape.backward(y, [x])[x] == pytest.approx(6.0)


def test_backward_of_loss_is_one_and_needs_scalar():
    x = _param([1.0, 2.0])
    with Tape() as tape:
        y = ops.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)
    leaf = _param(4.0)
    with Tape() as tape:
        pass
    assert tape.backward(leaf)[leaf] == 1.0


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=30, size=(50, 9))
    mask = rng.random((50, 9)) < 0.6
    mask[:, 0] = True
    for m in (None, mask):
        s = ops.softmax(Tensor(x), mask=m).data
        assert np.max(np.abs(s.sum(axis=1) - 1)) < 1e-12
    s = ops.softmax(Tensor(x), mask=mask).data
    assert np.all(s[~mask] == 0.0)


def test_masked_mean_pool_single_position_is_exact():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 5))
    mask = np.zeros((3, 4))
    mask[0, 2] = mask[1, 0] = mask[2, 3] = 1
    out = ops.masked_mean_pool(Tensor(x), mask).data
    assert np.array_equal(out[0], x[0, 2])
    assert np.array_equal(out[1], x[1, 0])
    assert np.array_equal(out[2], x[2, 3])


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul: incompatible shapes \(2, 3\) and \(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(5)
        mlp = MLP(6, 8, 3, rng)
        x = Tensor(rng.normal(size=(4, 6)))
        with Tape() as tape:
            loss = ops.sum(ops.tanh(mlp(x)))
        g = tape.backward(loss, mlp.parameters())
        return loss.item(), [g[p].tobytes() for p in mlp.parameters()]
    assert run() == run()


def test_focal_with_zero_gamma_equals_bce():
    x = Tensor(np.linspace(-5, 5, 11))
    y = (np.arange(11) % 2).astype(float)
    a = ops.bce_with_logits(x, y).data
    b = ops.focal_bce_with_logits(x, y, gamma=0.0).data
    assert np.max(np.abs(a - b)) <= 1e-12
    # the gamma > 0 path evaluated at a vanishing exponent also agrees
    c = ops.focal_bce_with_logits(x, y, gamma=1e-300).data
    assert np.max(np.abs(a - c)) <= 1e-12


class TestAdamW:
    def test_zero_gradient_zero_decay_is_identity(self):
        p = _param([1.0, -2.0])
        opt = AdamW(learning_rate=0.1, weight_decay=0.0)
        for _ in range(5):
            opt.step({p: np.zeros(2)})
        assert np.array_equal(p.data, [1.0, -2.0])
        assert opt.step_count == 5

    def test_constant_gradient_descends(self):
        p = _param(0.0)
        opt = AdamW(learning_rate=0.01, weight_decay=0.0)
        for _ in range(100):
            opt.step({p: np.array(2.5)})
        assert p.item() < 0

    def test_decoupled_decay_hand_computed(self):
        p = _param(1.0)
        AdamW(learning_rate=0.01, weight_decay=0.1).step({p: np.array(0.0)})
        assert p.item() == pytest.approx(0.999, abs=1e-15)

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.ones(3), requires_grad=True, name="heads.0.fc1.weight")
        with pytest.raises(NonFiniteGradientError, match="heads.0.fc1.weight"):
            AdamW().step({p: np.array([0.0, np.nan, 0.0])})

    def test_moments_shape_match(self):
        lin = Linear(3, 2, np.random.default_rng(0))
        opt = AdamW()
        opt.step({p: np.ones_like(p.data) for p in lin.parameters()})
        for p in lin.parameters():
            assert opt.first_moment[id(p)].shape == p.shape
            assert opt.second_moment[id(p)].shape == p.shape


def test_checkpoint_roundtrip_and_layout():
    lin = Linear(3, 2, np.random.default_rng(0))
    payload = encode_checkpoint(lin.state_dict(), {"config_hash": "abc"})
    assert payload[:8] == b"CRLMMCKP"
    params, meta = decode_checkpoint(payload)
    assert meta == {"config_hash": "abc"}
    assert list(params) == ["weight", "bias"]
    for name, arr in lin.state_dict().items():
        assert np.array_equal(params[name], arr)
    # little-endian float64 payload in manifest order
    tail = np.frombuffer(payload[-8 * 8:], dtype="<f8")
    assert np.array_equal(tail, np.concatenate([lin.weight.data.ravel(), lin.bias.data]))
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload[:-8])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"garbage" + payload)


def test_backward_rejects_loss_computed_after_tape_closed():
    w = _param([1.0, 2.0])
    with Tape() as tape:
        y = ops.mul(w, w)
    loss = ops.sum(y)
    with pytest.raises(ValueError, match="not recorded"):
        tape.backward(loss, [w])

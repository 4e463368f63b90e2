import numpy as np
import pytest

from coamd import diffcore as dc
from coamd.diffcore import checkpoint
from coamd.diffcore.gradcheck import check_grad, numeric_grad

R = np.random.default_rng(0)


def rnd(*shape):
    return R.standard_normal(shape)


# (name, fn, input arrays) -- every differentiable primitive
PRIMITIVES = [
    ("add", lambda t: (t[0] + t[1]).sum(), [rnd(2, 3), rnd(3)]),
    ("sub", lambda t: ((t[0] - t[1]) ** 2).sum(), [rnd(2, 3), rnd(2, 1)]),
    ("mul", lambda t: (t[0] * t[1]).sum(), [rnd(2, 3), rnd(2, 3)]),
    ("div", lambda t: (t[0] / (dc.exp(t[1]) + 1)).sum(), [rnd(4), rnd(4)]),
    ("pow", lambda t: (dc.exp(t[0]) ** 1.5).sum(), [rnd(5)]),
    ("exp_log", lambda t: dc.log(dc.exp(t[0]) + 2).sum(), [rnd(6)]),
    ("sqrt", lambda t: dc.sqrt(t[0] * t[0] + 1).sum(), [rnd(6)]),
    ("tanh", lambda t: dc.tanh(t[0]).sum(), [rnd(6)]),
    ("gelu", lambda t: (dc.gelu(t[0]) * t[1]).sum(), [rnd(3, 4), rnd(3, 4)]),
    ("matmul", lambda t: ((t[0] @ t[1]) ** 2).sum(), [rnd(2, 3), rnd(3, 4)]),
    ("bmm", lambda t: ((t[0] @ t[1]) ** 2).sum(), [rnd(2, 2, 3), rnd(3, 2)]),
    ("conv1d", lambda t: (dc.conv1d(t[0], t[1], t[2], stride=2, padding=1) ** 2).sum(),
     [rnd(2, 7, 3), rnd(4, 3, 2), rnd(2)]),
    ("transpose", lambda t: (t[0].transpose(1, 0, 2) * t[1]).sum(), [rnd(2, 3, 2), rnd(3, 2, 2)]),
    ("concat", lambda t: (dc.concat([t[0], t[1]], axis=1) ** 2 * np.arange(5)).sum(),
     [rnd(2, 2), rnd(2, 3)]),
    ("stack", lambda t: (dc.stack([t[0], t[1]], axis=0) ** 3).sum(), [rnd(3), rnd(3)]),
    ("slice", lambda t: (t[0][1:, ::2] ** 2).sum(), [rnd(3, 5)]),
    ("gather", lambda t: (t[0][np.array([0, 2, 0])] ** 2).sum(), [rnd(3, 2)]),
    ("masked_select", lambda t: (dc.masked_select(t[0], np.array([True, False, True])) ** 2).sum(),
     [rnd(3, 2)]),
    ("where", lambda t: (dc.where(np.array([True, False, True]), t[0], t[1]) ** 2).sum(), [rnd(3), rnd(3)]),
    ("repeat", lambda t: (dc.repeat(t[0], 2, axis=1) ** 2 * np.arange(6)).sum(), [rnd(2, 3)]),
    ("layer_norm", lambda t: (dc.layer_norm(t[0], t[1], t[2]) * np.arange(4)).sum(),
     [rnd(3, 4), rnd(4), rnd(4)]),
    ("softmax", lambda t: (dc.softmax(t[0], axis=-1) * np.arange(4)).sum(), [rnd(2, 4)]),
    ("log_softmax", lambda t: (dc.log_softmax(t[0]) * np.arange(4)).sum(), [rnd(2, 4)]),
    ("mean", lambda t: (t[0].mean(axis=0) ** 2).sum(), [rnd(3, 4)]),
    ("sum", lambda t: (t[0].sum(axis=1, keepdims=True) ** 2).sum(), [rnd(3, 4)]),
    ("reshape", lambda t: (t[0].reshape(6) * np.arange(6)).sum(), [rnd(2, 3)]),
    ("l1_loss", lambda t: dc.l1_loss(t[0], t[1]), [rnd(3, 3), rnd(3, 3) + 5]),
    ("mse_loss", lambda t: dc.mse_loss(t[0], t[1]), [rnd(3, 3), rnd(3, 3)]),
    ("cosine", lambda t: dc.cosine_similarity(t[0], t[1]).sum(), [rnd(2, 5), rnd(2, 5)]),
    ("l2_norm", lambda t: dc.l2_norm(t[0]).sum(), [rnd(3, 4)]),
    ("cross_entropy", lambda t: dc.cross_entropy(t[0], np.array([1, 0, 2])), [rnd(3, 4)]),
    ("pad", lambda t: (dc.pad_time(t[0], 1, 2) ** 2 * np.arange(6)[None, :, None]).sum(), [rnd(1, 3, 2)]),
    ("neg", lambda t: (dc.neg(t[0]) * np.arange(3)).sum(), [rnd(3)]),
    ("abs", lambda t: (dc.abs_(t[0]) * np.arange(4)).sum(), [rnd(4) + np.array([2, -2, 2, -2])]),
    ("relu", lambda t: (dc.relu(t[0]) ** 2).sum(), [rnd(5) + np.array([1, -1, 1, -1, 1]) * 0.5]),
    ("max", lambda t: (dc.max_(t[0], axis=1) ** 2).sum(), [np.array([[0.1, 2.0, -1.0], [3.0, 0.5, 1.0]])]),
    ("swapaxes", lambda t: (dc.swapaxes(t[0], 0, 2) * t[1]).sum(), [rnd(2, 3, 4), rnd(4, 3, 2)]),
    ("normalize", lambda t: (dc.normalize(t[0]) * np.arange(4)).sum(), [rnd(3, 4)]),
]


@pytest.mark.parametrize("name,fn,arrays", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients_match_finite_differences(name, fn, arrays):
    assert check_grad(fn, arrays) <= 1e-4


def test_matmul_identity_and_shape():
    a = dc.tensor(rnd(2, 3))
    assert (a @ dc.tensor(rnd(3, 4))).shape == (2, 4)
    np.testing.assert_array_equal((a @ dc.tensor(np.eye(3))).data, a.data)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 4\)"):
        dc.tensor(np.ones((2, 3))) @ dc.tensor(np.ones((4, 4)))


def test_softmax_uniform_and_rows_sum_to_one():
    np.testing.assert_allclose(dc.softmax(dc.tensor(np.zeros(3))).data, np.full(3, 1 / 3), rtol=1e-6)
    y = dc.softmax(dc.tensor(rnd(10, 7) * 5)).data
    np.testing.assert_allclose(y.sum(-1), 1, atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    x = dc.tensor(np.full((1, 5), 3.0))
    out = dc.layer_norm(x, dc.tensor(np.ones(5)), dc.tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0)


def test_layer_norm_statistics():
    out = dc.layer_norm(dc.tensor(rnd(20, 64) * 2 + 1)).data
    assert np.abs(out.mean(-1)).max() <= 1e-6
    assert np.abs(out.var(-1) - 1).max() <= 1e-4


def test_non_finite_raises():
    with pytest.raises(dc.NumericError):
        dc.log(dc.tensor(np.array([-1.0, 1.0])))


def test_backward_sum_of_squares():
    x = dc.tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2, 4])


def test_cosine_grad_zero_along_x_when_equal():
    v = np.array([0.6, 0.8, 0.0])
    f = lambda t: dc.cosine_similarity(t[0], dc.tensor(v))
    x = dc.tensor(v.copy(), requires_grad=True)
    f([x]).backward()
    num = numeric_grad(lambda a: float(f([dc.tensor(a[0])]).data), [v.copy()])[0]
    np.testing.assert_allclose(x.grad, num, atol=1e-8)
    assert abs(x.grad @ v) < 1e-10


def test_backward_rejects_non_scalar_and_second_pass():
    x = dc.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.ShapeError):
        dc.backward(x * 2)
    loss = (x * 2).sum()
    loss.backward()
    with pytest.raises(dc.TapeError):
        loss.backward()


def test_unused_leaf_gets_zero_grad():
    x = dc.tensor(np.ones(3), requires_grad=True)
    y = dc.tensor(np.ones(2), requires_grad=True)
    gx, gy = dc.grad((x * 3).sum(), [x, y])
    np.testing.assert_array_equal(gx, 3)
    np.testing.assert_array_equal(gy, 0)


def test_no_grad_records_nothing():
    x = dc.tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": dc.tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st = dc.OptimizerState(lr=0.1)
    dc.adamw_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert st.step == 1


def test_adamw_first_step_moves_by_lr():
    p = {"w": dc.tensor(np.array([1.0]), requires_grad=True)}
    dc.adamw_step(p, {"w": np.array([1.0])}, dc.OptimizerState(lr=0.1, betas=(0.9, 0.999)))
    np.testing.assert_allclose(p["w"].data, [0.9], atol=1e-7)


def test_adamw_rejects_nonfinite_gradient():
    p = {"w": dc.tensor(np.array([1.0]), requires_grad=True)}
    with pytest.raises(dc.NumericError, match="'w'"):
        dc.adamw_step(p, {"w": np.array([np.nan])}, dc.OptimizerState())


def _train_tiny(seed):
    rng = dc.Rng(seed)
    lin = dc.nn.Linear(4, 2, rng)
    opt = dc.AdamW(lin.named_parameters(), lr=1e-2)
    x = dc.tensor(rng.normal((16, 4)))
    for _ in range(5):
        opt.zero_grad()
        dc.mse_loss(lin(x), np.zeros((16, 2), np.float32)).backward()
        opt.step()
    return lin.state_dict()


def test_training_is_bit_deterministic():
    a, b = _train_tiny(3), _train_tiny(3)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_rng_determinism_and_moments():
    a = dc.rng_normal(dc.Rng(5), (4, 4)).data
    b = dc.rng_normal(dc.Rng(5), (4, 4)).data
    c = dc.rng_normal(dc.Rng(6), (4, 4)).data
    assert a.tobytes() == b.tobytes()
    assert (a != c).any()
    big = dc.Rng(1).normal(10**6, np.float64)
    assert abs(big.mean()) < 0.01 and abs(big.var() - 1) < 0.01


def test_rng_spawned_streams_differ_and_repeat():
    r = dc.Rng(9)
    assert (r.spawn(1).normal(8) != r.spawn(2).normal(8)).any()
    assert r.spawn(1).normal(8).tobytes() == dc.Rng(9).spawn(1).normal(8).tobytes()


def test_checkpoint_roundtrip_and_layout():
    t = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    buf = checkpoint.to_bytes(t, {"module": "ae"})
    assert buf[:7] == b"COAMD1\0"
    assert int.from_bytes(buf[7:11], "little") == 2
    tensors, meta = checkpoint.from_bytes(buf)
    assert meta == {"module": "ae"}
    np.testing.assert_array_equal(tensors["w"], t["w"])


def test_checkpoint_rejects_bad_magic():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(b"NOTME\0\0\0\0\0\0")

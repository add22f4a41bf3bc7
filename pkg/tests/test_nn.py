"""Numeric core: forward values against hand-computed references, gradients
against central differences, checkpoint round-trips."""
import numpy as np
import pytest

from dstrack import nn


def t(x, grad=True):
    return nn.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# forward values

def test_linear_hand_product():
    # [1,2] @ [[1,1],[0,1]]^T = [1*1+2*1, 1*0+2*1] = [3, 2]
    y = nn.linear(t([[1.0, 2.0]]), t([[1.0, 1.0], [0.0, 1.0]]))
    np.testing.assert_allclose(y.data, [[3.0, 2.0]], atol=1e-12)


def test_linear_bias_and_shape_error():
    y = nn.linear(t([[1.0, 2.0]]), t([[1.0, 1.0]]), t([0.5]))
    np.testing.assert_allclose(y.data, [[3.5]])
    with pytest.raises(ValueError, match="inner dims"):
        nn.linear(t([[1.0, 2.0, 3.0]]), t([[1.0, 1.0]]))


def test_gelu_reference_value():
    # 0.5 * 2 * (1 + erf(2/sqrt(2))), frozen reference
    y = nn.gelu(t([2.0]))
    np.testing.assert_allclose(y.data, [1.9544997361036416], rtol=1e-12)
    # odd-ish tails: gelu(-10) ~ 0, gelu(10) ~ 10
    z = nn.gelu(t([-10.0, 10.0]))
    np.testing.assert_allclose(z.data, [0.0, 10.0], atol=1e-8)


def test_relu_sigmoid_values():
    np.testing.assert_allclose(nn.relu(t([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(nn.sigmoid(t([0.0])).data, [0.5])


def test_softmax_null_ln3():
    # single logit ln(3) against the implicit zero: [3/4, 1/4]
    p = nn.softmax_null(t([[np.log(3.0)]]))
    np.testing.assert_allclose(p.data, [[0.75, 0.25]], rtol=1e-12)


def test_softmax_null_rows_sum_to_one():
    rng = np.random.default_rng(7)
    logits = t(rng.standard_normal((5, 4)) * 3.0)
    p = nn.softmax_null(logits)
    assert p.data.shape == (5, 5)
    np.testing.assert_allclose(p.data.sum(axis=1), np.ones(5), atol=1e-12)
    assert (p.data > 0.0).all()


def test_softmax_null_zero_columns():
    # no candidates at all: every row is [1.0]
    p = nn.softmax_null(nn.Tensor(np.zeros((3, 0))))
    np.testing.assert_allclose(p.data, np.ones((3, 1)))


def test_softmax_null_is_shift_invariant_vs_plain_softmax():
    # appending the zero logit and softmaxing must equal softmax over the
    # augmented row computed by hand
    row = np.array([[1.0, -2.0, 0.5]])
    p = nn.softmax_null(nn.Tensor(row)).data
    aug = np.concatenate([row, [[0.0]]], axis=1)
    e = np.exp(aug - aug.max())
    np.testing.assert_allclose(p, e / e.sum(), rtol=1e-12)


def test_layer_norm_zero_mean_unit_var():
    rng = np.random.default_rng(3)
    x = t(rng.standard_normal((4, 8)) * 5.0 + 2.0)
    y = nn.layer_norm(x)
    np.testing.assert_allclose(y.data.mean(axis=-1), np.zeros(4), atol=1e-10)
    np.testing.assert_allclose(y.data.var(axis=-1), np.ones(4), atol=1e-4)


def test_layer_norm_affine():
    x = t([[1.0, -1.0, 2.0, -2.0]])
    g = t(np.full(4, 2.0))
    b = t(np.full(4, 0.5))
    y0 = nn.layer_norm(x).data
    y = nn.layer_norm(x, g, b).data
    np.testing.assert_allclose(y, 2.0 * y0 + 0.5, rtol=1e-12)


def test_conv3x3_matches_naive_loop():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y = nn.conv3x3(t(x), t(w), t(b)).data

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    acc = b[o]
                    for c in range(3):
                        for dy in range(3):
                            for dx in range(3):
                                acc += w[o, c, dy, dx] * xp[n, c, i + dy, j + dx]
                    ref[n, o, i, j] = acc
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_conv3x3_unbatched_and_channel_mismatch():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    y3 = nn.conv3x3(t(x), t(w)).data
    y4 = nn.conv3x3(t(x[None]), t(w)).data
    np.testing.assert_allclose(y3, y4[0], atol=1e-12)
    with pytest.raises(ValueError, match="channels"):
        nn.conv3x3(t(np.zeros((2, 4, 4))), t(w))


def test_avg_pool2_value():
    x = t(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    y = nn.avg_pool2(x)
    np.testing.assert_allclose(y.data, [[[[2.5, 4.5], [10.5, 12.5]]]])
    with pytest.raises(ValueError, match="even"):
        nn.avg_pool2(t(np.zeros((1, 1, 3, 4))))


def test_reduce_max_routes_gradient_to_argmax():
    x = t([[1.0, 5.0, 2.0], [7.0, 0.0, 3.0]])
    y = nn.reduce_max(x, axis=1)
    nn.reduce_sum(y).backward()
    np.testing.assert_allclose(x.grad, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def test_concat_and_getitem_gradients():
    a, b = t([1.0, 2.0]), t([3.0])
    c = nn.concat([a, b])
    nn.reduce_sum(c[1:]).backward()
    np.testing.assert_allclose(a.grad, [0.0, 1.0])
    np.testing.assert_allclose(b.grad, [1.0])


def test_add_broadcast_gradient():
    a = t(np.ones((3, 4)))
    b = t(np.ones(4))
    nn.reduce_sum(a + b).backward()
    np.testing.assert_allclose(b.grad, [3.0, 3.0, 3.0, 3.0])


def test_graph_reuse_accumulates():
    # y = x*x + x: dy/dx = 2x + 1
    x = t([3.0])
    y = x * x + x
    y.backward()
    np.testing.assert_allclose(x.grad, [7.0])


# ---------------------------------------------------------------------------
# gradient checks per op

def _check(fn, *arrays, seed=0, tol=1e-4):
    inputs = [t(a) for a in arrays]
    res = nn.grad_check(fn, inputs, rng=np.random.default_rng(seed))
    assert not res.skipped
    assert res.max_rel_error <= tol, f"max rel error {res.max_rel_error:.3e}"


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    _check(nn.gelu, x, seed=seed)
    _check(nn.sigmoid, x, seed=seed)
    _check(nn.exp, x * 0.5, seed=seed)
    _check(nn.log, np.abs(x) + 0.5, seed=seed)
    _check(nn.sqrt, np.abs(x) + 0.5, seed=seed)
    # keep relu probes away from the kink
    xr = x + np.sign(x) * 0.1
    _check(nn.relu, xr, seed=seed)


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_matmul_linear(seed):
    rng = np.random.default_rng(seed)
    _check(nn.matmul, rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), seed=seed)
    _check(
        nn.linear,
        rng.standard_normal((3, 4)),
        rng.standard_normal((5, 4)),
        rng.standard_normal(5),
        seed=seed,
    )


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_softmax_null(seed):
    rng = np.random.default_rng(seed)
    _check(nn.softmax_null, rng.standard_normal((4, 3)), seed=seed)


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_layer_norm(seed):
    rng = np.random.default_rng(seed)
    _check(
        nn.layer_norm,
        rng.standard_normal((3, 6)),
        rng.standard_normal(6),
        rng.standard_normal(6),
        seed=seed,
    )


def test_gradcheck_layer_norm_degenerate_row_is_flagged():
    x = t(np.ones((2, 4)))  # constant rows: gradient is numerically unstable
    res = nn.grad_check(
        nn.layer_norm,
        [x],
        skip_if=lambda ts: "degenerate layer_norm input"
        if nn.layer_norm_degenerate(ts[0])
        else "",
    )
    assert res.skipped
    assert "degenerate" in res.reason


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_conv_and_pool(seed):
    rng = np.random.default_rng(seed)
    _check(
        nn.conv3x3,
        rng.standard_normal((2, 2, 4, 4)),
        rng.standard_normal((3, 2, 3, 3)),
        rng.standard_normal(3),
        seed=seed,
    )
    _check(nn.avg_pool2, rng.standard_normal((1, 2, 4, 4)), seed=seed)


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_ffn(seed):
    rng = np.random.default_rng(seed)
    _check(
        nn.ffn,
        rng.standard_normal((2, 3)),
        rng.standard_normal((5, 3)),
        rng.standard_normal(5),
        rng.standard_normal((3, 5)),
        rng.standard_normal(3),
        seed=seed,
    )


def test_gradcheck_reductions():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 4))
    _check(lambda a: nn.reduce_sum(a, axis=1), x)
    _check(lambda a: nn.reduce_mean(a, axis=0), x)
    _check(lambda a: nn.reduce_max(a, axis=1), x)
    _check(lambda a: nn.reshape(a, (4, 3)), x)


# ---------------------------------------------------------------------------
# parameter store and checkpoints

def test_param_store_init_bounds_and_duplicates():
    store = nn.ParamStore()
    rng = np.random.default_rng(0)
    w = store.create("w", (64, 16), rng)
    assert np.abs(w.data).max() <= 1.0 / 4.0  # fan_in 16
    store.create("z", (3,), rng, init="zeros")
    assert np.all(store["z"].data == 0.0)
    with pytest.raises(ValueError, match="duplicate"):
        store.create("w", (2, 2), rng)


def test_checkpoint_roundtrip(tmp_path):
    store = nn.ParamStore()
    rng = np.random.default_rng(1)
    store.create("a", (3, 4), rng)
    store.create("b", (5,), rng)
    path = tmp_path / "weights.bin"
    store.save(path)

    fresh = nn.ParamStore()
    rng2 = np.random.default_rng(99)
    fresh.create("a", (3, 4), rng2)
    fresh.create("b", (5,), rng2)
    fresh.load(path)
    for name in ("a", "b"):
        np.testing.assert_allclose(
            fresh[name].data, store[name].data.astype(np.float32), rtol=1e-7
        )


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"nope" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        nn.load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    store = nn.ParamStore()
    store.create("a", (2, 2), np.random.default_rng(0))
    path = tmp_path / "w.bin"
    store.save(path)
    other = nn.ParamStore()
    other.create("a", (3, 3), np.random.default_rng(0))
    with pytest.raises(ValueError, match="shape mismatch"):
        other.load(path)


def test_zero_grad():
    store = nn.ParamStore()
    w = store.create("w", (2, 2), np.random.default_rng(0))
    nn.reduce_sum(nn.mul(w, w)).backward()
    assert w.grad is not None
    store.zero_grad()
    assert w.grad is None

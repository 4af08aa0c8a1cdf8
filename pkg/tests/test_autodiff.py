import zlib

import numpy as np
import pytest
from scipy.special import erf

from splatlab import autodiff as ad
from splatlab.autodiff import GraphError, ShapeError, Tensor

from conftest import central_diff

# op name -> (function of tensors, input shapes, positive inputs?)
OPS = {
    "add": (lambda a, b: a + b, [(4, 4), (4, 4)], False),
    "mul": (lambda a, b: a * b, [(4, 4), (4, 4)], False),
    "sub": (lambda a, b: a - b, [(4, 4), (4, 4)], False),
    "div": (lambda a, b: a / b, [(4, 4), (4, 4)], True),
    "gelu": (lambda a: ad.gelu(a), [(4, 4)], False),
    "exp": (lambda a: ad.exp(a), [(4, 4)], False),
    "log": (lambda a: ad.log(a), [(4, 4)], True),
    "sqrt": (lambda a: ad.sqrt(a), [(4, 4)], True),
    "tanh": (lambda a: ad.tanh(a), [(4, 4)], False),
    "sigmoid": (lambda a: ad.sigmoid(a), [(4, 4)], False),
    "softplus": (lambda a: ad.softplus(a), [(4, 4)], False),
    "square": (lambda a: ad.square(a), [(4, 4)], False),
    "mean": (lambda a: ad.mean(a, axis=0), [(4, 4)], False),
    "matmul": (lambda a, b: ad.matmul(a, b), [(4, 4), (4, 3)], False),
    "concat": (lambda a, b: ad.concat_channels([a, b]), [(4, 4, 2), (4, 4, 3)], False),
    "getitem": (lambda a: a[1:3, ::2], [(4, 4)], False),
    "reshape": (lambda a: ad.reshape(a, (2, 8)), [(4, 4)], False),
    "conv3x3": (lambda x, w, b: ad.conv3x3(x, w, b), [(4, 4, 2), (3, 2, 3, 3), (3,)], False),
    "conv1x1": (lambda x, w, b: ad.conv1x1(x, w, b), [(4, 4, 2), (3, 2, 1, 1), (3,)], False),
    "bilinear_up": (lambda x: ad.bilinear_resize(x, 7, 6), [(4, 4, 2)], False),
    "bilinear_down": (lambda x: ad.bilinear_resize(x, 2, 3), [(4, 4, 2)], False),
    "filter2d": (lambda x: ad.filter2d(x, np.array([[1.0, 0, -1], [2, 0, -2], [1, 0, -1]])), [(4, 4, 2)], False),
}


def _inputs(rng, shapes, positive, dtype):
    return [(rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s)).astype(dtype) for s in shapes]


def _fd_grads(fn, arrays, weight):
    xs = [a.astype(np.float64) for a in arrays]

    def value():
        return float((fn(*[Tensor(x) for x in xs]).data * weight).sum())

    return [central_diff(value, x) for x in xs]


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-5), (np.float32, 1e-3)])
def test_op_gradients_match_finite_differences(name, dtype, tol):
    fn, shapes, positive = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = _inputs(rng, shapes, positive, dtype)
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    weight = rng.normal(size=out.shape)
    ad.tsum(out * weight.astype(dtype)).backward()
    for t, fd in zip(ts, _fd_grads(fn, arrays, weight)):
        err = np.abs(t.grad - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert err <= tol, (name, err)


def test_gelu_exact_form():
    x = np.linspace(-4, 4, 41)
    assert ad.gelu(Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]
    assert np.allclose(ad.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-15)


def test_identity_conv_reproduces_input(rng):
    x = rng.normal(size=(5, 6, 3))
    w3 = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w3[c, c, 1, 1] = 1.0
    assert np.array_equal(ad.conv3x3(Tensor(x), Tensor(w3)).data, x)
    w1 = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(ad.conv1x1(Tensor(x), Tensor(w1)).data, x)


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(5, 4, 2))
    w = rng.normal(size=(3, 2, 3, 3))
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 4, 3))
    for i in range(5):
        for j in range(4):
            for o in range(3):
                ref[i, j, o] = np.sum(xp[i:i + 3, j:j + 3, :] * w[o].transpose(1, 2, 0))
    assert np.allclose(ad.conv3x3(Tensor(x), Tensor(w)).data, ref, atol=1e-12)


def test_simple_backward_examples(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ad.tsum(y * y).backward()
    assert np.array_equal(y.grad, 2 * y.data)


def test_stop_gradient_blocks(rng):
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    y = ad.stop_gradient(x * 2.0)
    z = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    loss = ad.tsum(y * z) + ad.tsum(x)
    loss.backward()
    assert np.array_equal(y.data, 2 * x.data)
    assert np.array_equal(x.grad, np.ones((4, 4)))  # only the direct path
    assert np.array_equal(z.grad, 2 * x.data)


def test_backward_twice_raises(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    loss = ad.tsum(ad.exp(x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_shape_mismatch_errors(rng):
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        ad.concat_channels([Tensor(np.ones((2, 2, 1))), Tensor(np.ones((3, 2, 1)))])
    with pytest.raises(ShapeError):
        ad.conv3x3(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 5, 3, 3))))


def _net(x, w1, b1, w2, b2):
    return ad.conv1x1(ad.gelu(ad.conv3x3(x, w1, b1)), w2, b2)


def test_conv_gelu_conv_net_finite_differences(rng):
    arrays = [rng.normal(size=s) for s in ((5, 5, 3), (4, 3, 3, 3), (4,), (2, 4, 1, 1), (2,))]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    weight = rng.normal(size=(5, 5, 2))
    ad.tsum(_net(*ts) * weight).backward()
    for t, fd in zip(ts, _fd_grads(_net, arrays, weight)):
        assert np.allclose(t.grad, fd, rtol=1e-5, atol=1e-7)


def test_backward_is_linear(rng):
    arrays = [rng.normal(size=s) for s in ((4, 4, 2), (3, 2, 3, 3), (3,), (2, 3, 1, 1), (2,))]
    r1, r2 = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
    a, b = 0.7, -1.9

    def grads(fn):
        ts = [Tensor(x, requires_grad=True) for x in arrays]
        fn(_net(*ts)).backward()
        return [t.grad for t in ts]

    g1 = grads(lambda o: ad.tsum(o * r1))
    g2 = grads(lambda o: ad.tsum(o * r2))
    gc = grads(lambda o: ad.tsum(o * r1) * a + ad.tsum(o * r2) * b)
    for x, y, z in zip(g1, g2, gc):
        assert np.allclose(a * x + b * y, z, atol=1e-6)


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        arrays = [rng.normal(size=s).astype(np.float32) for s in ((6, 6, 3), (4, 3, 3, 3), (4,), (2, 4, 1, 1), (2,))]
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = _net(*ts)
        ad.tsum(ad.square(out)).backward()
        return [out.data] + [t.grad for t in ts]

    for x, y in zip(run(), run()):
        assert np.array_equal(x, y)


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "b/weight": rng.normal(size=(4,)).astype(np.float32),
               "scalar": np.array(3.0), "bytes": np.arange(5, dtype=np.uint8)}
    path = tmp_path / "ck.bin"
    ad.save_checkpoint(path, tensors, meta={"iter": 7})
    back, meta = ad.load_checkpoint(path)
    assert meta == {"iter": 7}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k])


def test_checkpoint_truncated(tmp_path, rng):
    path = tmp_path / "ck.bin"
    ad.save_checkpoint(path, {"a": rng.normal(size=(8,))})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(path)

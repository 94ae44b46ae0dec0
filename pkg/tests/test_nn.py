import json

import numpy as np
import pytest

from memsim.crossbar import CrossbarConfig
from memsim.device import DeviceModel
from memsim.dpe import EngineConfig, max_resolution
from memsim.nn import autodiff as ad
from memsim.nn.autodiff import Tensor, col2im, conv_output_size, img2col
from memsim.nn.checkpoint import layer_configs, load_checkpoint, read_layer_config, save_checkpoint
from memsim.nn.data import load_mnist, make_blobs, read_idx, write_idx
from memsim.nn.layers import (DIGITAL, LENET_LAYERS, MemConv2d, MemLayerConfig, MemLinear, ReLU,
                              Sequential, StaleCacheError, configure, lenet)
from memsim.nn.train import SGD, infer, train
from memsim.numerics import stream
from memsim.slicing import to_integers


def grad_check(build, arrays, eps=1e-6, seed=0):
    """Central differences of sum(R * build(...)) against reverse mode."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(r if out.data.ndim else None)
    if not out.data.ndim:
        r = 1.0
    worst = 0.0
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus, minus = [x.copy() for x in arrays], [x.copy() for x in arrays]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            fp = np.sum(r * build(*[Tensor(x) for x in plus]).data)
            fm = np.sum(r * build(*[Tensor(x) for x in minus]).data)
            num[idx] = (fp - fm) / (2 * eps)
        ana = leaves[k].grad
        worst = max(worst, np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12))
    return worst


RNG = np.random.default_rng(42)


def away_from_zero(shape):
    x = RNG.standard_normal(shape)
    return np.where(np.abs(x) < 0.1, 0.5, x)


@pytest.mark.parametrize("name,build,arrays", [
    ("matmul", lambda a, b: ad.matmul(a, b), [RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2))]),
    ("add_broadcast", lambda a, b: ad.add(a, b), [RNG.standard_normal((3, 4)), RNG.standard_normal(4)]),
    ("relu", lambda a: ad.relu(a), [away_from_zero((4, 5))]),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [RNG.standard_normal((3, 4))]),
    ("flatten", lambda a: ad.flatten(a), [RNG.standard_normal((2, 3, 2, 2))]),
    ("maxpool", lambda a: ad.maxpool2d(a, 2), [RNG.permutation(64).reshape(1, 1, 8, 8) * 0.1]),
    ("conv", lambda x, w, b: ad.conv2d(x, w, b),
     [RNG.standard_normal((2, 2, 6, 6)), RNG.standard_normal((3, 2, 3, 3)), RNG.standard_normal(3)]),
    ("conv_stride_pad", lambda x, w: ad.conv2d(x, w, stride=2, padding=1),
     [RNG.standard_normal((1, 2, 5, 5)), RNG.standard_normal((2, 2, 3, 3))]),
    ("xent", lambda z: ad.softmax_cross_entropy(z, [0, 2, 1, 2]), [RNG.standard_normal((4, 3))]),
])
def test_primitive_gradients(name, build, arrays):
    assert grad_check(build, arrays) <= 1e-4


def test_mem_linear_5x4_gradients():
    layer = MemLinear(5, 4, rng=stream(1, "init"))
    x = RNG.standard_normal((3, 5))

    def build(xt, w, b):
        layer.weight, layer.bias = w, b
        return layer(xt)

    assert grad_check(build, [x, layer.weight.data.copy(), layer.bias.data.copy()]) <= 1e-4


def test_mem_conv_gradients():
    layer = MemConv2d(2, 3, 3, padding=1, rng=stream(2, "init"))
    x = RNG.standard_normal((2, 2, 5, 5))

    def build(xt, w, b):
        layer.weight, layer.bias = w, b
        return layer(xt)

    assert grad_check(build, [x, layer.weight.data.copy(), layer.bias.data.copy()]) <= 1e-4


def test_composite_network_gradient():
    def build(x, w1, w2):
        h = ad.maxpool2d(ad.relu(ad.conv2d(x, w1)), 2)
        z = ad.matmul(ad.flatten(h), w2)
        return ad.softmax_cross_entropy(z, [1, 0])

    arrays = [RNG.standard_normal((2, 1, 6, 6)), RNG.standard_normal((2, 1, 3, 3)), RNG.standard_normal((8, 3))]
    assert grad_check(build, arrays) <= 1e-4


def test_backward_accumulates_shared_use():
    a = Tensor(np.array([[2.0]]), requires_grad=True)
    ad.add(ad.matmul(a, a), a).backward(np.ones((1, 1)))
    assert a.grad[0, 0] == pytest.approx(2 * 2.0 + 1)
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_img2col_example():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    cols = img2col(x, 2, 2)
    assert cols.tolist() == [[0, 1, 3, 4], [1, 2, 4, 5], [3, 4, 6, 7], [4, 5, 7, 8]]
    assert img2col(x, 3, 3).tolist() == [list(range(9))]
    assert img2col(x, 1, 1, padding=1).shape == (25, 1)
    assert conv_output_size(28, 28, 5, 5, 1, 0) == (24, 24)
    with pytest.raises(ValueError):
        conv_output_size(3, 3, 5, 5, 1, 0)


def test_col2im_is_adjoint():
    x = RNG.standard_normal((2, 3, 7, 6))
    c = RNG.standard_normal(img2col(x, 3, 2, 2, 1).shape)
    lhs = np.sum(img2col(x, 3, 2, 2, 1) * c)
    rhs = np.sum(x * col2im(c, x.shape, 3, 2, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def loop_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = conv_output_size(h, wd, kh, kw, stride, pad)
    out = np.zeros((n, o, oh, ow))
    for a in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[a, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[a, f, i, j] = np.sum(patch * w[f]) + b[f]
    return out


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c, o = rng.integers(1, 4, 2)
        kh, kw = rng.integers(1, 4, 2)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, wd = rng.integers(max(kh, kw), 8, 2)
        x = rng.standard_normal((2, c, h, wd))
        w = rng.standard_normal((o, c, kh, kw))
        b = rng.standard_normal(o)
        got = ad.conv2d(x, w, b, stride, pad).data
        assert np.allclose(got, loop_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def exact_config(size=16, scheme="int8:1,1,2,4"):
    eng = EngineConfig(device=DeviceModel(cv=0.0), crossbar=CrossbarConfig(rows=size, cols=size, r_wire=0.0),
                       weight_scheme=scheme, input_scheme=scheme, noise_mode="ideal")
    return MemLayerConfig(max_resolution(eng))


def test_layer_config_validation():
    with pytest.raises(ValueError):
        MemLayerConfig(mode="hardware")
    with pytest.raises(ValueError):
        MemLayerConfig(mode="analog")
    cfg = MemLayerConfig(EngineConfig(), input_sli_med="int4:1,1,2", weight_sli_med="fp:16:1,1,2,4,4")
    eng = cfg.resolved_engine()
    assert str(eng.input_scheme) == "int4:1,1,2" and str(eng.weight_scheme) == "fp:16:1,1,2,4,4"
    assert DIGITAL.resolved_engine() is None


def test_digital_linear_is_matmul_plus_bias():
    layer = MemLinear(7, 3, rng=stream(4, "init"))
    x = RNG.standard_normal((5, 7))
    assert np.allclose(layer(x).data, x @ layer.weight.data.T + layer.bias.data, rtol=1e-14)


def test_hardware_linear_integer_oracle():
    layer = MemLinear(16, 16, config=exact_config(), rng=stream(5, "init"))
    layer.update_weight()
    x = RNG.standard_normal((16, 16))
    qx, sx = to_integers(x, layer.engine.input_scheme)
    qw, sw = to_integers(layer.weight_matrix(), layer.engine.weight_scheme)
    assert np.array_equal(layer(x).data, (qx @ qw) * (sx * sw) + layer.bias.data)


def test_hardware_without_program_raises():
    layer = MemLinear(4, 2, config=exact_config(4, "int4:1,1,2"))
    with pytest.raises(StaleCacheError):
        layer(np.ones((1, 4)))


def test_stale_cache_strict_and_relaxed():
    cfg = MemLayerConfig(EngineConfig(crossbar=CrossbarConfig(rows=8, cols=8)))
    x = RNG.standard_normal((3, 8))
    strict = MemLinear(8, 4, config=cfg, rng=stream(6, "init"))
    strict.update_weight()
    strict.weight.data = strict.weight.data + 0.1
    with pytest.raises(StaleCacheError):
        strict(x)
    relaxed = MemLinear(8, 4, config=cfg, rng=stream(6, "init"), strict_cache=False)
    relaxed.update_weight(0)
    before = relaxed(x).data
    relaxed.weight.data = relaxed.weight.data + 0.1
    # the forward still uses the old programmed copy; only the bias add sees new masters
    assert np.array_equal(relaxed(x).data, before)
    relaxed.update_weight(0)
    assert not np.array_equal(relaxed(x).data, before)


def test_straight_through_by_cache_perturbation():
    cfg = MemLayerConfig(EngineConfig(crossbar=CrossbarConfig(rows=8, cols=8)))
    layer = MemLinear(8, 4, config=cfg, rng=stream(7, "init"), strict_cache=False)
    layer.update_weight()
    x = Tensor(RNG.standard_normal((3, 8)), requires_grad=True)
    g = RNG.standard_normal((3, 4))
    layer(x).backward(g)
    gx, gw = x.grad.copy(), layer.weight.grad.copy()
    # wreck the programmed conductances: forward changes, backward must not
    out_before = layer(x).data
    layer.programmed.conductances = layer.programmed.conductances * 1.5
    x.grad, layer.weight.grad = None, None
    out = layer(x)
    out.backward(g)
    assert not np.array_equal(out.data, out_before)
    assert np.array_equal(x.grad, gx) and np.array_equal(layer.weight.grad, gw)
    assert np.allclose(gw, g.T @ x.data) and np.allclose(gx, g @ layer.weight.data)


def test_update_weight_deterministic_per_cycle():
    cfg = MemLayerConfig(EngineConfig(crossbar=CrossbarConfig(rows=8, cols=8)))
    a = MemLinear(8, 8, config=cfg, rng=stream(8, "init"))
    b = MemLinear(8, 8, config=cfg, rng=stream(8, "init"))
    a.update_weight(5)
    b.update_weight(5)
    assert np.array_equal(a.programmed.conductances, b.programmed.conductances)
    b.update_weight(6)
    assert not np.array_equal(a.programmed.conductances, b.programmed.conductances)


def test_layer_isolation():
    eng = EngineConfig(crossbar=CrossbarConfig(rows=32, cols=32), device=DeviceModel(cv=0.1))
    model = lenet({"fc1": MemLayerConfig(eng)}, seed=0)
    ref = lenet(None, seed=0)
    assert [m.mode for _, m in model.mem_layers()] == ["digital", "digital", "hardware", "digital"]
    model.update_weight(0)
    x = RNG.uniform(0, 1, (2, 1, 28, 28))
    a, b = Tensor(x), Tensor(x)
    for (name, m), (_, r) in zip(model.layers, ref.layers):
        a, b = m(a), r(b)
        if name == "flatten":
            assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, b.data)
    # each hardware layer gets its own noise stream
    both = lenet({"fc1": MemLayerConfig(eng), "fc2": MemLayerConfig(eng)}, seed=0)
    assert both["fc1"].engine.stream_tag != both["fc2"].engine.stream_tag


def test_configure_drops_cache():
    eng = EngineConfig(crossbar=CrossbarConfig(rows=32, cols=32))
    model = lenet(MemLayerConfig(eng), seed=0)
    model.update_weight(0)
    configure(model, {"conv1": DIGITAL})
    assert model["conv1"].programmed is None and model["conv2"].programmed is not None
    assert model["conv1"].mode == "digital"


def test_sgd_momentum_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data[0] == pytest.approx(1 - 0.1 * 2)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.8 - 0.1 * (0.5 * 2 + 2))


def test_blob_training_digital():
    data = make_blobs(400, 2, seed=1)
    model = Sequential(("fc1", MemLinear(2, 16, rng=stream(0, "init", 0))), ("relu", ReLU()),
                       ("fc2", MemLinear(16, 2, rng=stream(0, "init", 1))))
    log = train(model, data, data, epochs=20, batch_size=16)
    assert not log.halted and log.final_test_acc > 0.99


def test_blob_training_hardware():
    data = make_blobs(200, 2, seed=2)
    cfg = MemLayerConfig(EngineConfig(crossbar=CrossbarConfig(rows=16, cols=16)))
    model = Sequential(("fc1", MemLinear(2, 8, cfg, rng=stream(0, "init", 0))), ("relu", ReLU()),
                       ("fc2", MemLinear(8, 2, cfg, rng=stream(0, "init", 1))))
    log = train(model, data, data, epochs=5, batch_size=16)
    assert log.final_test_acc > 0.95


def test_infer_report():
    data = make_blobs(60, 3, seed=3)
    model = Sequential(("fc", MemLinear(2, 3, rng=stream(0, "init"))))
    res = infer(model, data)
    assert res.confusion.sum() == 60 and res.confusion.shape == (3, 3)
    assert res.accuracy == pytest.approx(np.trace(res.confusion) / 60)
    assert sum(c["count"] for c in res.per_class) == 60


def test_idx_round_trip(tmp_path):
    for arr in (np.arange(24, dtype=np.uint8).reshape(2, 3, 4), np.linspace(0, 1, 5).astype(np.float32),
                np.array([-3, 4], dtype=np.int32)):
        for name in ("a.idx", "a.idx.gz"):
            write_idx(tmp_path / name, arr)
            back = read_idx(tmp_path / name)
            assert back.dtype == arr.dtype and np.array_equal(back, arr)
    (tmp_path / "bad").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(ValueError):
        read_idx(tmp_path / "bad")


def test_bundled_mnist_subset():
    from memsim.nn.data import bundled_mnist_dir
    d = bundled_mnist_dir()
    tr, te = load_mnist(d, "train"), load_mnist(d, "test")
    assert tr.x.shape == (2000, 1, 28, 28) and te.x.shape == (1000, 1, 28, 28)
    assert tr.x.min() >= 0 and tr.x.max() <= 1
    assert np.all(np.bincount(tr.y, minlength=10) == 200)


def test_checkpoint_round_trip(tmp_path):
    model = lenet(None, seed=3)
    save_checkpoint(model, tmp_path / "ck", extra={"epochs": 1})
    other = lenet(None, seed=4)
    manifest = load_checkpoint(other, tmp_path / "ck")
    assert manifest["extra"] == {"epochs": 1}
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    blob = tmp_path / "ck" / "fc2.bias.bin"
    blob.write_bytes(b"\x00" * len(blob.read_bytes()))
    with pytest.raises(ValueError):
        load_checkpoint(other, tmp_path / "ck")


def test_layer_config_file(tmp_path):
    spec = {"default": {"mode": "hardware", "weight_scheme": "int8:1,1,2,4"},
            "layers": {"conv1": {"mode": "digital"}, "fc2": {"input_scheme": "int4:1,1,2"}}}
    p = tmp_path / "layers.json"
    p.write_text(json.dumps(spec))
    cfgs = read_layer_config(p, EngineConfig())
    assert set(cfgs) == set(LENET_LAYERS)
    assert cfgs["conv1"].mode == "digital" and cfgs["conv2"].mode == "hardware"
    assert str(cfgs["fc2"].resolved_engine().input_scheme) == "int4:1,1,2"
    for bad in ({"layers": {"fc9": {}}}, {"default": {"colour": 1}}, {"extra": {}}):
        with pytest.raises(ValueError):
            layer_configs(bad, EngineConfig())

import json
import struct

import numpy as np
import pytest

from psl import models
from psl import tensor as T
from psl.models import CheckpointError, build, forward, load, save
from psl.quant import QuantTap, identity
from psl.tensor import Tensor


def _images(seed, n=3, size=8):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size))


def test_same_seed_same_parameters():
    a, b = build("mini_resnet", seed=7), build("mini_resnet", seed=7)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_different_seeds_differ():
    a, b = build(seed=1), build(seed=2)
    assert not np.array_equal(a.params["conv0.weight"].data, b.params["conv0.weight"].data)


def test_tap_points():
    assert list(build("tiny_cnn").tap_points) == ["conv0", "block1", "block2"]
    assert list(build("mini_resnet").tap_points) == ["conv0", "block1", "block2"]


def test_unknown_arch_rejected():
    with pytest.raises(ValueError, match="unknown architecture"):
        build("resnet18")


def test_swish_network_uses_swish_everywhere():
    net = build("mini_resnet", activation="swish", seed=0)
    x = _images(0)
    _, feats = forward(net, x)
    for name in ("conv0", "block1", "block2"):
        pre = feats[f"{name}.preact"].data
        assert np.allclose(feats[name].data, pre / (1 + np.exp(-pre)), rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("arch", ["tiny_cnn", "mini_resnet"])
def test_identity_taps_are_transparent(arch):
    net = build(arch, seed=4)
    x = _images(4)
    bare, _ = forward(net, x)
    tapped, _ = forward(net, x, {t: identity for t in net.tap_points})
    assert np.array_equal(bare.data, tapped.data)


def test_unknown_tap_rejected():
    with pytest.raises(KeyError, match="unknown tap"):
        forward(build(), _images(0), {"layer4": identity})


def test_tap_output_feeds_downstream():
    net = build(seed=2)
    x = _images(2)
    seen = {}

    def spy(name):
        def f(t):
            seen[name] = t.data.copy()
            return t
        return f

    q = QuantTap(8.0, "conv0")
    _, feats = forward(net, x, {"conv0": q, "block1": spy("block1")})
    # block1 recomputed from the quantized conv0 output
    ref_in = T.floor_scale(feats["conv0"], 8.0).data
    pre = T.affine(T.conv2d(Tensor(ref_in), net.params["block1.weight"]),
                   net.params["block1.scale"], net.params["block1.shift"])
    assert np.array_equal(seen["block1"], T.relu(pre).data)
    # raw (pre-transform) features are what is returned
    assert not np.array_equal(feats["conv0"].data, ref_in)


def test_zero_head_gives_zero_logits():
    net = build(seed=0)
    net.params["head.weight"].data[:] = 0
    net.params["head.bias"].data[:] = 0
    logits, _ = forward(net, _images(0))
    assert np.all(logits.data == 0)


def test_residual_with_zero_branch_is_skip_path():
    net = build("mini_resnet", seed=5)
    for blk in ("block1", "block2"):
        for conv in ("conv1", "conv2"):
            net.params[f"{blk}.{conv}.weight"].data[:] = 0
            net.params[f"{blk}.{conv}.shift"].data[:] = 0
    x = _images(5)
    _, feats = forward(net, x)
    c0 = feats["conv0"].data
    # with relu the skip path is idempotent: relu(relu(h)) == relu(h)
    assert np.array_equal(feats["block1"].data, c0)
    assert np.array_equal(feats["block2"].data, c0)


def test_pre_final_activation_tap_feeds_head():
    net = build("tiny_cnn", seed=6)
    x = _images(6)
    logits, feats = forward(net, x)
    pre = feats[net.pre_final_activation_tap]
    pooled = T.relu(pre).data.mean(axis=(2, 3))
    ref = pooled @ net.params["head.weight"].data.T + net.params["head.bias"].data
    assert np.array_equal(T.relu(pre).data, feats["block2"].data)
    np.testing.assert_allclose(logits.data, ref, rtol=1e-13)


def test_wrong_input_channels():
    with pytest.raises(T.ShapeError):
        forward(build(), np.zeros((1, 1, 8, 8)))


def test_accuracy_of_empty_dataset_rejected():
    with pytest.raises(ValueError):
        models.accuracy(build(), np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int))


@pytest.mark.parametrize("arch", ["tiny_cnn", "mini_resnet"])
def test_checkpoint_round_trip(tmp_path, arch):
    net = build(arch, activation="swish", seed=9, width=4)
    path = tmp_path / "m.psl"
    save(net, path, {"epsilon": 4, "epoch": 11, "seed": 123})
    back = load(path, expect_topology=net.topology())
    assert list(back.params) == list(net.params)
    for k in net.params:
        assert back.params[k].data.tobytes() == net.params[k].data.tobytes()
    assert back.metadata == {"epsilon": 4, "epoch": 11, "seed": 123}
    assert back.activation == "swish"


def test_checkpoint_layout(tmp_path):
    net = build(seed=0, width=2)
    path = tmp_path / "m.psl"
    save(net, path)
    raw = path.read_bytes()
    assert raw[:4] == b"PSL1"
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12:12 + hlen])
    entry = next(e for e in header["tensors"] if e["name"] == "conv0.weight")
    start = 12 + hlen + entry["offset"]
    arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype="<f8").reshape(entry["shape"])
    assert np.array_equal(arr, net.params["conv0.weight"].data)
    assert len(raw) == 12 + hlen + sum(e["nbytes"] for e in header["tensors"])


def test_truncated_checkpoint_reports_offset(tmp_path):
    path = tmp_path / "m.psl"
    save(build(seed=0), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="offset"):
        load(path)
    path.write_bytes(raw[:8])
    with pytest.raises(CheckpointError, match="offset 4"):
        load(path)
    path.write_bytes(raw[:40])
    with pytest.raises(CheckpointError, match="offset 12"):
        load(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.psl"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.psl"
    save(build(seed=0), path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12:12 + hlen])
    header["format_version"] = 99
    new = json.dumps(header).encode()
    path.write_bytes(raw[:4] + struct.pack("<Q", len(new)) + new + raw[12 + hlen:])
    with pytest.raises(CheckpointError, match="version"):
        load(path)


def test_topology_mismatch(tmp_path):
    path = tmp_path / "m.psl"
    save(build("tiny_cnn", seed=0), path)
    with pytest.raises(CheckpointError, match="topology"):
        load(path, expect_topology=build("mini_resnet").topology())


def test_frozen_view_shares_data_without_grad():
    net = build(seed=0)
    view = net.frozen()
    assert all(view.params[k].data is net.params[k].data for k in net.params)
    assert not any(p.requires_grad for p in view.parameters())

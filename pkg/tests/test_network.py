import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d3dlab import tensor as tc
from d3dlab.network import (BLOCKS, LayerName, Network, NetworkConfig, build_network, conv_macs, count_flops,
                            layer_shapes, load_network, save_network)
from d3dlab.tensor import ConvSpec, Tensor

SMALL = NetworkConfig(input_channels=3, num_classes=4, base_width=4, clip_extents=(4, 16, 16), seed=1)


def test_layer_order_is_execution_order():
    names = [l for l in LayerName]
    assert [l.order for l in names] == list(range(len(names)))
    assert names[0] == LayerName.Conv1 and names[-1] == LayerName.Logits


def test_layer_parse():
    assert LayerName.parse("3A") == LayerName.Block3A
    assert LayerName.parse("block4f") == LayerName.Block4F
    assert LayerName.parse("2C") == LayerName.Conv2C
    with pytest.raises(ValueError):
        LayerName.parse("Block9Z")


def test_block3a_extents_at_default_scale():
    shapes = {s.layer: s for s in layer_shapes(NetworkConfig())}
    assert shapes[LayerName.Block3A].extents == (8, 8, 8)
    assert shapes[LayerName.Block3A].channels == 16
    assert shapes[LayerName.Block3A].stride == (1, 4, 4)


def test_channel_schedule():
    net = build_network(NetworkConfig(base_width=8))
    assert [net.channels(b[0]) for b in BLOCKS] == [8, 8, 16, 16, 32, 32, 64, 64]


def test_same_seed_same_checkpoint():
    a = build_network(NetworkConfig(seed=7))
    b = build_network(NetworkConfig(seed=7))
    assert tc.checkpoint_bytes(a.params) == tc.checkpoint_bytes(b.params)
    c = build_network(NetworkConfig(seed=8))
    assert tc.checkpoint_bytes(a.params) != tc.checkpoint_bytes(c.params)


def test_config_invariants():
    with pytest.raises(ValueError):
        NetworkConfig(base_width=3)
    with pytest.raises(ValueError):
        NetworkConfig(clip_extents=(3, 32, 32))


def test_collapse_names_layer():
    with pytest.raises(ValueError, match="Block"):
        build_network(NetworkConfig(clip_extents=(4, 8, 8)))


def test_zero_clip_gives_final_bias():
    net = build_network(SMALL)
    logits, _ = net.forward(Tensor(np.zeros((3, 4, 16, 16))))
    np.testing.assert_array_equal(logits.data, net.params["Logits.bias"].data)


def test_logits_tap_matches_output():
    net = build_network(SMALL)
    clip = np.random.default_rng(0).uniform(size=(3, 4, 16, 16))
    logits, taps = net.forward(Tensor(clip), taps=[LayerName.Logits])
    np.testing.assert_array_equal(taps[LayerName.Logits].activation.data, logits.data)
    again, _ = net.forward(Tensor(clip))
    np.testing.assert_array_equal(again.data, logits.data)


def test_unknown_tap_rejected():
    net = build_network(SMALL)
    with pytest.raises(ValueError):
        net.forward(Tensor(np.zeros((3, 4, 16, 16))), taps=["Block7"])


def test_tap_strides_match_extents():
    cfg = NetworkConfig()
    net = build_network(cfg)
    clip = np.random.default_rng(1).uniform(size=(3, *cfg.clip_extents))
    _, taps = net.forward(Tensor(clip), taps=list(LayerName)[:-2])
    for layer, tap in taps.items():
        ext = tap.activation.shape[1:]
        assert tuple(f // e for f, e in zip(cfg.clip_extents, ext)) == tap.stride, layer
        assert tuple(f % e for f, e in zip(cfg.clip_extents, ext)) == (0, 0, 0)


def test_batched_forward_matches_single():
    net = build_network(SMALL)
    clips = np.random.default_rng(2).uniform(size=(3, 3, 4, 16, 16)).astype(np.float32)
    batched, _ = net.forward(Tensor(clips))
    for i in range(3):
        single, _ = net.forward(Tensor(clips[i]))
        np.testing.assert_allclose(batched.data[i], single.data, rtol=1e-5, atol=1e-6)


def test_class_permutation_permutes_logits():
    net = build_network(SMALL)
    clip = Tensor(np.random.default_rng(3).uniform(size=(3, 4, 16, 16)))
    base, _ = net.forward(clip)
    perm = np.array([2, 0, 3, 1])
    other = net.copy()
    other.params["Logits.weight"].data[...] = net.params["Logits.weight"].data[perm]
    other.params["Logits.bias"].data[...] = net.params["Logits.bias"].data[perm]
    permuted, _ = other.forward(clip)
    np.testing.assert_array_equal(permuted.data, base.data[perm])


def test_count_flops_single_unit_conv():
    assert conv_macs(ConvSpec(1, (1, 1, 1)), 1, (1, 1, 1)) == 1


def test_count_flops_default_oracle():
    # per-layer MACs written out by hand for base width 8, clip 8x32x32:
    # conv1 spatial stride 2 -> 8x16x16, pooled to 8x8x8; 3B pooled to 4x4x4; 4F to 2x2x2
    def spatial(cout, cin, t, h, w):
        return cout * cin * 9 * t * h * w

    def temporal(c, t, h, w):
        return c * c * 3 * t * h * w

    expected = (spatial(8, 3, 8, 16, 16) + temporal(8, 8, 16, 16)
                + spatial(8, 8, 8, 8, 8) + temporal(8, 8, 8, 8)
                + spatial(16, 8, 8, 8, 8) + temporal(16, 8, 8, 8)
                + spatial(16, 16, 8, 8, 8) + temporal(16, 8, 8, 8)
                + spatial(32, 16, 4, 4, 4) + temporal(32, 4, 4, 4)
                + spatial(32, 32, 4, 4, 4) + temporal(32, 4, 4, 4)
                + spatial(64, 32, 4, 4, 4) + temporal(64, 4, 4, 4)
                + spatial(64, 64, 2, 2, 2) + temporal(64, 2, 2, 2)
                + 64 * 4)
    assert expected == 7_422_208
    assert count_flops(build_network(NetworkConfig())) == expected


def test_streams_share_topology():
    rgb = build_network(NetworkConfig(seed=0))
    flow = build_network(NetworkConfig(seed=5))
    assert count_flops(rgb) == count_flops(flow)


def test_save_load_round_trip(tmp_path):
    net = build_network(SMALL)
    save_network(tmp_path / "n.ckpt", net)
    back = load_network(tmp_path / "n.ckpt", SMALL)
    assert tc.checksum(back.params) == tc.checksum(net.params)
    with pytest.raises(ValueError):
        load_network(tmp_path / "n.ckpt", NetworkConfig())


def test_calibrate_normalizes_pre_activation():
    net = build_network(SMALL)
    clips = np.random.default_rng(4).uniform(size=(6, 3, 4, 16, 16)).astype(np.float32)
    net.calibrate(clips)
    p = net.params
    x = tc.conv3d(Tensor(clips), ConvSpec(4, (1, 3, 3), (1, 2, 2)), p["Conv1.spatial.weight"])
    x = tc.conv3d(x, ConvSpec(4, (3, 1, 1)), p["Conv1.temporal.weight"])
    pre = tc.channel_affine(x, p["Conv1.scale"], p["Conv1.bias"]).data
    np.testing.assert_allclose(pre.mean(axis=(0, 2, 3, 4)), 0, atol=1e-4)
    np.testing.assert_allclose(pre.std(axis=(0, 2, 3, 4)), 1, atol=1e-3)


def test_full_network_gradient():
    cfg = NetworkConfig(input_channels=3, num_classes=3, base_width=4, clip_extents=(4, 16, 16), seed=2)
    net = build_network(cfg)
    clip = np.random.default_rng(5).uniform(size=(3, 4, 16, 16))
    names = ["Conv1.spatial.weight", "Block4C.temporal.weight", "Block5B.scale", "Logits.weight"]

    def f(*arrs):
        params = dict(net.params)
        params.update(zip(names, arrs))
        return tc.softmax_cross_entropy(Network(cfg, params).forward(Tensor(clip, dtype=arrs[0].dtype))[0], 1)

    inputs = [net.params[n].data.astype(np.float64) for n in names]
    assert tc.finite_difference_check(f, inputs, eps=1e-3) < 1e-3


@settings(max_examples=5, deadline=None, derandomize=True)
@given(seed=st.integers(0, 10_000))
def test_forward_is_finite(seed):
    net = build_network(SMALL.with_seed(seed))
    clip = np.random.default_rng(seed).uniform(size=(3, 4, 16, 16))
    logits, _ = net.forward(Tensor(clip))
    assert np.all(np.isfinite(logits.data))

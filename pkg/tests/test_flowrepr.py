import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from d3dlab import tensor as tc
from d3dlab.flowrepr import (FlowRepr3, decode_flow, downsample_flow_batch, downsample_flow_target, encode_flow,
                             encode_stack, endpoint_error, flow_loss, pool_flow, read_repr, repr_bytes,
                             repr_from_bytes, write_repr)
from d3dlab.tensor import Tensor
from d3dlab.tvl1 import FlowField

finite = st.floats(-50, 50, allow_nan=False, width=32)


def field(u, v):
    return FlowField(np.asarray(u, np.float32), np.asarray(v, np.float32))


def test_three_four_five():
    r = encode_flow(field([[3.0]], [[4.0]]))
    assert r.mag[0, 0] == 5 and r.cos_t[0, 0] == pytest.approx(0.6) and r.sin_t[0, 0] == pytest.approx(0.8)


def test_zero_flow_convention():
    r = encode_flow(field([[0.0]], [[0.0]]))
    assert (r.mag[0, 0], r.sin_t[0, 0], r.cos_t[0, 0]) == (0, 0, 1)


def test_decode_examples():
    f = decode_flow(FlowRepr3([[5.0]], [[0.8]], [[0.6]]))
    assert f.u[0, 0] == pytest.approx(3) and f.v[0, 0] == pytest.approx(4)
    rng = np.random.default_rng(0)
    z = decode_flow(FlowRepr3(np.zeros((4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))))
    assert not z.u.any() and not z.v.any()


def test_decode_does_not_renormalize():
    f = decode_flow(FlowRepr3([[2.0]], [[0.0]], [[3.0]]))
    assert f.u[0, 0] == 6


@settings(max_examples=60, derandomize=True)
@given(arrays(np.float32, (2, 5, 6), elements=finite))
def test_round_trip(uv):
    back = decode_flow(encode_flow(uv))
    assert np.abs(back.u - uv[0]).max() < 1e-5
    assert np.abs(back.v - uv[1]).max() < 1e-5


@settings(max_examples=60, derandomize=True)
@given(arrays(np.float32, (2, 5, 6), elements=finite))
def test_unit_angle(uv):
    r = encode_flow(uv)
    moving = r.mag > 1e-6
    np.testing.assert_allclose((r.sin_t ** 2 + r.cos_t ** 2)[moving], 1, atol=1e-5)


def test_encode_decode_on_unit_angles_is_identity():
    rng = np.random.default_rng(1)
    ang = rng.uniform(-np.pi, np.pi, size=(6, 6))
    r = FlowRepr3(rng.uniform(0.1, 3, size=(6, 6)), np.sin(ang), np.cos(ang))
    again = encode_flow(decode_flow(r))
    for a, b in zip(again.stack(), r.stack()):
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_flow_loss_identity_and_single_pixel():
    t = FlowRepr3([[2.0]], [[1.0]], [[0.0]])
    assert flow_loss(t, t).item() == 0
    assert flow_loss(FlowRepr3([[1.0]], [[0.0]], [[0.0]]), t).item() == pytest.approx(3.0)


def test_flow_loss_suppresses_angle_on_zero_target():
    rng = np.random.default_rng(2)
    tgt = encode_flow(np.zeros((2, 4, 4)))
    pred = FlowRepr3(np.zeros((4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    assert flow_loss(pred, tgt).item() == 0.0


def loss_oracle(pred, tgt):
    total = 0.0
    for idx in np.ndindex(tgt.shape[1:]):
        pm, ps, pc = (float(pred[(c,) + idx]) for c in range(3))
        tm, ts, tcos = (float(tgt[(c,) + idx]) for c in range(3))
        total += (pm - tm) ** 2 + tm * ((ps - ts) ** 2 + (pc - tcos) ** 2)
    return total / np.prod(tgt.shape[1:])


def test_flow_loss_matches_loop_oracle():
    rng = np.random.default_rng(3)
    tgt = encode_stack(rng.normal(size=(2, 2, 3, 3)))
    pred = rng.normal(size=tgt.shape)
    assert flow_loss(pred, tgt).item() == pytest.approx(loss_oracle(pred, tgt), rel=1e-6)


def test_flow_loss_batched_matches_mean_of_singles():
    rng = np.random.default_rng(4)
    tgt = np.stack([encode_stack(rng.normal(size=(2, 2, 3, 3))) for _ in range(3)])
    pred = rng.normal(size=tgt.shape)
    singles = [flow_loss(pred[i], tgt[i]).item() for i in range(3)]
    assert flow_loss(pred, tgt).item() == pytest.approx(np.mean(singles), rel=1e-6)


@settings(max_examples=40, derandomize=True)
@given(st.integers(0, 10_000))
def test_flow_loss_zero_iff_match(seed):
    rng = np.random.default_rng(seed)
    uv = rng.normal(size=(2, 3, 3))
    uv[:, 0, 0] = 0
    tgt = encode_flow(uv).stack()
    pred = tgt.copy()
    # the angle at a zero-target pixel is free
    pred[1:, 0, 0] = rng.normal(size=2)
    assert flow_loss(pred, tgt).item() == 0
    pred[0, 1, 1] += 0.1
    assert flow_loss(pred, tgt).item() > 0


def test_flow_loss_gradient():
    rng = np.random.default_rng(5)
    tgt = encode_stack(rng.normal(size=(2, 2, 3, 3)))
    pred = rng.normal(size=tgt.shape)
    assert tc.finite_difference_check(lambda p: flow_loss(p, tgt), [pred]) < 1e-4


def test_flow_loss_shape_mismatch():
    with pytest.raises(ValueError):
        flow_loss(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)))


def test_epe_examples():
    ref = field(np.full((4, 4), 3.0), np.full((4, 4), 4.0))
    assert endpoint_error(ref, ref).epe == 0
    assert endpoint_error(field(np.zeros((4, 4)), np.zeros((4, 4))), ref).epe == pytest.approx(5.0)
    with pytest.raises(ValueError):
        endpoint_error(ref, field(np.zeros((4, 5)), np.zeros((4, 5))))


def test_epe_interior_excludes_border():
    err = np.zeros((2, 8, 8))
    err[0, 0, :] = 10
    m = endpoint_error(err, np.zeros_like(err))
    assert m.epe_interior == 0 and m.epe == pytest.approx(10 / 8)


def test_epe_per_frame():
    ref = np.zeros((2, 3, 4, 4))
    pred = ref.copy()
    pred[0, 1] = 2
    assert endpoint_error(pred, ref).per_frame == [0, 2, 0]


def test_all_zeros_epe_is_mean_magnitude():
    rng = np.random.default_rng(6)
    flows = rng.normal(size=(2, 5, 6, 6)).astype(np.float32)
    total = 0.0
    for t in range(5):
        for y in range(6):
            for x in range(6):
                total += math.hypot(float(flows[0, t, y, x]), float(flows[1, t, y, x]))
    epe = endpoint_error(np.zeros_like(flows), flows).epe
    assert abs(epe - total / flows[0].size) < 1e-6


@settings(max_examples=40, derandomize=True)
@given(st.integers(0, 10_000))
def test_epe_is_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(2, 5, 5)) for _ in range(3))
    d = lambda p, q: endpoint_error(p, q).epe
    assert d(a, b) == pytest.approx(d(b, a))
    assert d(a, a) == 0 and d(a, b) > 0
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-12


def test_downsample_constant():
    r = downsample_flow_target(np.stack([np.ones((4, 8, 8)), np.zeros((4, 8, 8))]), (2, 2, 2))
    assert np.all(r.mag == 1) and np.all(r.sin_t == 0) and np.all(r.cos_t == 1)


def test_downsample_cancellation():
    flow = np.zeros((2, 1, 2, 2))
    flow[0, 0, :, 0] = 1
    flow[0, 0, :, 1] = -1
    r = downsample_flow_target(flow, (1, 1, 1))
    assert (r.mag.item(), r.sin_t.item(), r.cos_t.item()) == (0, 0, 1)


def test_downsample_matches_loop_oracle():
    rng = np.random.default_rng(7)
    flow = rng.normal(size=(2, 1, 8, 8))
    got = downsample_flow_target(flow, (1, 4, 4))
    for y in range(4):
        for x in range(4):
            u = sum(flow[0, 0, 2 * y + i, 2 * x + j] for i in range(2) for j in range(2)) / 4
            v = sum(flow[1, 0, 2 * y + i, 2 * x + j] for i in range(2) for j in range(2)) / 4
            mag = math.hypot(u, v)
            assert abs(got.mag[0, y, x] - mag) < 1e-6
            assert abs(got.cos_t[0, y, x] - u / mag) < 1e-6
            assert abs(got.sin_t[0, y, x] - v / mag) < 1e-6


def test_pool_flow_averages_time():
    flow = np.zeros((2, 4, 2, 2))
    flow[0] = np.arange(4)[:, None, None]
    np.testing.assert_allclose(pool_flow(flow, (2, 2, 2))[0, :, 0, 0], [0.5, 2.5])


def test_downsample_rejects_fractional_factor():
    with pytest.raises(ValueError, match="H"):
        downsample_flow_target(np.zeros((2, 4, 8, 8)), (4, 3, 4))


def test_downsample_batch():
    rng = np.random.default_rng(8)
    flows = rng.normal(size=(3, 2, 4, 8, 8))
    out = downsample_flow_batch(flows, (2, 4, 4))
    assert out.shape == (3, 3, 2, 4, 4)
    np.testing.assert_array_equal(out[1], downsample_flow_target(flows[1], (2, 4, 4)).stack())


def test_repr_serialization(tmp_path):
    r = encode_flow(np.random.default_rng(9).normal(size=(2, 3, 5)))
    raw = repr_bytes(r)
    assert np.frombuffer(raw[:4], "<f4")[0] == np.float32(202021.75)
    back = repr_from_bytes(raw)
    assert back.stack().tobytes() == r.stack().tobytes()
    write_repr(tmp_path / "r.bin", r)
    assert read_repr(tmp_path / "r.bin").stack().tobytes() == r.stack().tobytes()
    flo_like = np.float32(202021.25).tobytes() + raw[4:]
    with pytest.raises(ValueError, match="magic"):
        repr_from_bytes(flo_like)


def test_mismatched_planes_rejected():
    with pytest.raises(ValueError):
        FlowRepr3(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))


def test_tensor_prediction_is_differentiable():
    tgt = encode_stack(np.random.default_rng(10).normal(size=(2, 1, 2, 2)))
    pred = Tensor(np.zeros(tgt.shape), requires_grad=True)
    flow_loss(pred, tgt).backward()
    assert pred.grad is not None and np.any(pred.grad != 0)

import numpy as np
import pytest
from scipy import ndimage as ndi

from d3dlab.flowrepr import endpoint_error
from d3dlab.tvl1 import (FlowField, TVL1Params, flo_bytes, flow_for_clip, flow_from_flo_bytes, read_flo,
                         relaxed_energy, to_gray, tvl1, tvl1_batch, write_flo)


def texture(seed, size=32, sigma=1.0):
    rng = np.random.default_rng(seed)
    img = ndi.gaussian_filter(rng.uniform(size=(size, size)), sigma, mode="wrap")
    return (img - img.min()) / (img.max() - img.min())


def shifted(img, dx, dy):
    # content moves by (dx, dy): b(x + d) = a(x)
    return np.roll(img, (dy, dx), axis=(0, 1))


def interior_epe(flow, u, v, border=2):
    ref = FlowField(np.full(flow.shape, u, np.float32), np.full(flow.shape, v, np.float32))
    return endpoint_error(flow, ref, border=border).epe_interior


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_translation_one_pixel(seed):
    a = texture(seed)
    assert interior_epe(tvl1(a, shifted(a, 1, 0)), 1, 0) < 0.25


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_translation_two_pixels_down(seed):
    a = texture(seed)
    assert interior_epe(tvl1(a, shifted(a, 0, 2)), 0, 2) < 0.35


def test_zero_motion_fixed_point():
    a = texture(3)
    f = tvl1(a, a)
    assert np.hypot(f.u, f.v).mean() < 0.05


@pytest.mark.parametrize("params", [TVL1Params(median_filter=False), TVL1Params(levels=1),
                                    TVL1Params(lambda_data=0.05, theta_coupling=0.5, tau_step=0.1)])
def test_zero_motion_for_other_params(params):
    a = texture(4)
    f = tvl1(a, a, params)
    assert np.hypot(f.u, f.v).mean() < 0.05


def test_antisymmetry():
    a = texture(5)
    b = shifted(a, 1, 0)
    fwd, bwd = tvl1(a, b), tvl1(b, a)
    diff = np.hypot(fwd.u + bwd.u, fwd.v + bwd.v)[2:-2, 2:-2]
    assert diff.mean() < 0.3


def test_deterministic():
    a = texture(6)
    b = shifted(a, 0, 1)
    f1, f2 = tvl1(a, b), tvl1(a, b)
    assert f1.u.tobytes() == f2.u.tobytes() and f1.v.tobytes() == f2.v.tobytes()


def test_batch_matches_single_pairs():
    a = np.stack([texture(7), texture(8)])
    b = np.stack([shifted(a[0], 1, 0), shifted(a[1], 0, -1)])
    batch = tvl1_batch(a, b)
    for i in range(2):
        f = tvl1(a[i], b[i])
        np.testing.assert_allclose(batch[i, 0], f.u, atol=1e-6)
        np.testing.assert_allclose(batch[i, 1], f.v, atol=1e-6)


@pytest.mark.parametrize("median", [True, False])
def test_energy_non_increasing_within_each_warp(median):
    a = texture(9)
    b = shifted(a, 1, 0)
    params = TVL1Params(median_filter=median)
    energies = []  # (warp id, energy)

    def trace(u, v, w1, w2, rho_c, ix, iy):
        energies.append((id(rho_c), relaxed_energy(u[0], v[0], w1[0], w2[0], rho_c[0], ix[0], iy[0], params)))

    tvl1(a, b, params, trace=trace)
    assert len(energies) == params.warps * params.inner_iterations
    for k in range(1, len(energies)):
        if energies[k][0] == energies[k - 1][0]:
            prev, cur = energies[k - 1][1], energies[k][1]
            assert cur <= prev * (1 + 1e-9) + 1e-9, (k, prev, cur)


def test_params_invariants():
    with pytest.raises(ValueError):
        TVL1Params(tau_step=0.2)
    with pytest.raises(ValueError):
        TVL1Params(scale=1.0)
    with pytest.raises(ValueError):
        TVL1Params(levels=0)


def test_too_small_rejected():
    with pytest.raises(ValueError, match="minimum"):
        tvl1(np.zeros((6, 6)), np.zeros((6, 6)))


def test_gray_weights():
    clip = np.zeros((3, 1, 1, 1))
    clip[:, 0, 0, 0] = [1.0, 0.0, 0.0]
    assert to_gray(clip)[0, 0, 0] == pytest.approx(0.299)
    clip[:, 0, 0, 0] = [1.0, 1.0, 1.0]
    assert to_gray(clip)[0, 0, 0] == pytest.approx(1.0)


def test_static_clip_gives_zero_flow():
    frame = texture(10)
    clip = np.repeat(np.repeat(frame[None, None], 4, axis=1), 3, axis=0)
    flow = flow_for_clip(clip)
    assert flow.shape == (2, 4, 32, 32)
    assert np.hypot(flow[0], flow[1]).mean() < 0.05


def test_moving_square():
    bg = texture(11) * 0.5
    fg = texture(12) * 0.5 + 0.5
    frames = []
    for t in range(4):
        img = bg.copy()
        img[10:22, 6 + t:18 + t] = fg[10:22, 6:18]
        frames.append(img)
    clip = np.repeat(np.stack(frames)[None], 3, axis=0)
    flow = flow_for_clip(clip)
    # the square's interior moves by (1, 0)
    for t in range(3):
        err = np.hypot(flow[0, t, 12:20, 9 + t:15 + t] - 1, flow[1, t, 12:20, 9 + t:15 + t])
        assert err.mean() < 0.3


def test_two_frame_clip_repeats_flow():
    a = texture(13)
    clip = np.repeat(np.stack([a, shifted(a, 1, 0)])[None], 3, axis=0)
    flow = flow_for_clip(clip)
    np.testing.assert_array_equal(flow[:, 0], flow[:, 1])


def test_one_frame_clip_rejected():
    with pytest.raises(ValueError):
        flow_for_clip(np.zeros((3, 1, 32, 32)))


def test_flo_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    f = FlowField(rng.normal(size=(5, 7)), rng.normal(size=(5, 7)))
    write_flo(tmp_path / "a.flo", f)
    back = read_flo(tmp_path / "a.flo")
    assert back.u.tobytes() == f.u.tobytes() and back.v.tobytes() == f.v.tobytes()
    raw = (tmp_path / "a.flo").read_bytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == np.float32(202021.25)
    assert np.frombuffer(raw[4:12], "<i4").tolist() == [7, 5]
    # interleaved (u, v), row-major
    assert np.frombuffer(raw[12:20], "<f4").tolist() == [f.u[0, 0], f.v[0, 0]]
    with pytest.raises(ValueError):
        flow_from_flo_bytes(b"\0" * 12)
    assert flo_bytes(back) == raw

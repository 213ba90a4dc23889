"""Display windowing, RMSE/PSNR/SSIM, and the comparison table."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctlformer.errors import ContractError, ShapeError
from ctlformer.metrics import (
    MetricReport,
    build_report,
    psnr,
    report_table,
    rmse,
    ssim,
    window_to_display,
)
from ctlformer.tensor import Tensor


def noise_image(h, w, seed, center=127.5, spread=60.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(center - spread, center + spread, size=(h, w))


# --- display windowing -------------------------------------------------------

def test_window_endpoints_and_midpoint():
    img = np.array([[-100.0, 0.0, 50.0, 100.0, 300.0]])
    out = window_to_display(img, 0.0, 100.0).data
    np.testing.assert_allclose(out[0], [0.0, 0.0, 127.5, 255.0, 255.0])


def test_window_accepts_tensor_and_validates():
    out = window_to_display(Tensor(np.full((3, 3), 40.0, np.float32)), -160.0, 240.0)
    np.testing.assert_allclose(out.data, 127.5)
    with pytest.raises(ContractError):
        window_to_display(np.zeros((2, 2)), 10.0, 10.0)
    with pytest.raises(ContractError):
        window_to_display(np.zeros((2, 2)), 5.0, -5.0)


# --- rmse ---------------------------------------------------------------------

def test_rmse_zero_offset_and_hand_value():
    x = noise_image(8, 8, 0)
    assert rmse(x, x) == 0.0
    assert abs(rmse(x, x + 3.0) - 3.0) < 1e-12
    assert abs(rmse(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
               - math.sqrt(12.5)) < 1e-12


def test_rmse_symmetric_and_shape_checked():
    a, b = noise_image(6, 6, 1), noise_image(6, 6, 2)
    assert rmse(a, b) == rmse(b, a)
    with pytest.raises(ShapeError):
        rmse(a, noise_image(6, 7, 3))
    with pytest.raises(ShapeError):
        rmse(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)))


def test_rmse_accepts_channel_leading_tensor():
    a = Tensor(np.zeros((1, 4, 4), np.float32))
    b = Tensor(np.full((1, 4, 4), 2.0, np.float32))
    assert rmse(a, b) == 2.0


# --- psnr ---------------------------------------------------------------------

def test_psnr_zero_db_at_full_scale_error():
    a = np.zeros((5, 5))
    b = np.full((5, 5), 255.0)
    assert psnr(a, b) == 0.0


def test_psnr_table_consistent_value():
    a = noise_image(16, 16, 4)
    b = a + 9.0133
    assert abs(psnr(a, b) - 29.03) < 0.01


def test_psnr_identical_images_is_infinite():
    a = noise_image(5, 5, 5)
    assert math.isinf(psnr(a, a))


def test_psnr_monotone_decreasing_in_rmse():
    base = noise_image(10, 10, 6)
    values = [psnr(base, base + off) for off in (1.0, 2.0, 5.0, 11.0)]
    assert values == sorted(values, reverse=True)


# --- ssim ---------------------------------------------------------------------

def test_ssim_self_is_one():
    x = noise_image(24, 24, 7)
    assert abs(ssim(x, x) - 1.0) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_ssim_inverted_image_disagrees(seed):
    x = noise_image(32, 32, seed + 100)
    assert ssim(x, 255.0 - x) < 0.1


def test_ssim_symmetric():
    a, b = noise_image(20, 20, 8), noise_image(20, 20, 9)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-6


def test_ssim_rejects_small_images():
    with pytest.raises(ContractError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_ssim_brightness_shift_closed_form():
    # constant images: contrast/structure terms are 1, luminance term remains
    v, c = 100.0, 25.0
    a = np.full((16, 16), v)
    b = np.full((16, 16), v + c)
    c1 = (0.01 * 255.0) ** 2
    expected = (2.0 * v * (v + c) + c1) / (v * v + (v + c) ** 2 + c1)
    assert abs(ssim(a, b) - expected) < 1e-6


def _ssim_reference(x, y):
    # independent route: explicit per-window loop over weighted moments
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    w = g[:, None] * g[None, :]
    c1, c2 = (0.01 * 255.0) ** 2, (0.03 * 255.0) ** 2
    h, wd = x.shape
    vals = []
    for r in range(h - 10):
        for c in range(wd - 10):
            px = x[r:r + 11, c:c + 11]
            py = y[r:r + 11, c:c + 11]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * px * px).sum() - mx * mx
            vy = (w * py * py).sum() - my * my
            vxy = (w * px * py).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * vxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_independent_loop_implementation():
    a, b = noise_image(18, 21, 10), noise_image(18, 21, 11)
    assert abs(ssim(a, b) - _ssim_reference(a, b)) < 1e-10


@given(seed=st.integers(0, 300))
@settings(max_examples=30)
def test_ssim_bounded(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 255, (16, 16))
    b = rng.uniform(0, 255, (16, 16))
    v = ssim(a, b)
    assert -1.0 <= v <= 1.0


# --- reports ------------------------------------------------------------------

def test_build_report_identity_pairs():
    imgs = [noise_image(16, 16, s) for s in range(3)]
    rep = build_report(imgs, imgs)
    assert rep.images == 3
    assert rep.rmse == 0.0
    assert math.isinf(rep.psnr)
    assert abs(rep.ssim - 1.0) < 1e-6
    assert (rep.window_lo, rep.window_hi) == (0.0, 255.0)


def test_build_report_applies_window():
    pred = [np.full((16, 16), 0.25)]
    ref = [np.full((16, 16), 0.75)]
    rep = build_report(pred, ref, window=(0.0, 1.0))
    assert abs(rep.rmse - 127.5) < 1e-9


def test_build_report_rejects_mismatched_lists():
    imgs = [noise_image(16, 16, 1)]
    with pytest.raises(ContractError):
        build_report(imgs, imgs * 2)
    with pytest.raises(ContractError):
        build_report([], [])


def test_metric_report_validates_fields():
    with pytest.raises(ContractError):
        MetricReport((1.0,), (1.0,), (0.5,), rmse=-1.0, psnr=1.0, ssim=0.5,
                     window_lo=0, window_hi=255, images=1)
    with pytest.raises(ContractError):
        MetricReport((1.0,), (1.0,), (0.5,), rmse=1.0, psnr=1.0, ssim=1.5,
                     window_lo=0, window_hi=255, images=1)
    with pytest.raises(ContractError):
        MetricReport((1.0, 2.0), (1.0,), (0.5,), rmse=1.0, psnr=1.0, ssim=0.5,
                     window_lo=0, window_hi=255, images=1)


# --- table --------------------------------------------------------------------

def test_table_renders_reference_row_literally():
    text = report_table([("CTLformer", 0.9141, 9.0133, "1.85M")])
    lines = text.splitlines()
    assert lines[0].split() == ["Method", "|", "SSIM", "|", "RMSE", "|", "params"]
    assert "CTLformer" in lines[2]
    assert "0.9141" in lines[2]
    assert "9.0133" in lines[2]
    assert "1.85M" in lines[2]


def test_table_rounds_half_away_from_zero():
    text = report_table([("m", 0.91405, 0.12344999, "x")])
    assert "0.9141" in text
    assert "0.1234" in text


def test_table_empty_rows_is_header_only():
    text = report_table([])
    lines = text.splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("Method")


def test_table_csv_mode():
    text = report_table([("CTLformer", 0.9141, 9.0133, "1.85M"),
                         ("baseline", 0.8, 14.0, "n/a")], csv=True)
    assert text.splitlines() == [
        "Method,SSIM,RMSE,params",
        "CTLformer,0.9141,9.0133,1.85M",
        "baseline,0.8000,14.0000,n/a",
    ]


def test_table_preserves_row_order():
    text = report_table([("b", 0.1, 0.1, "1"), ("a", 0.2, 0.2, "2")])
    assert text.index("\nb ") < text.index("\na ")

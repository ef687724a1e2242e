import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uwrestore.core import InvalidInputError
from uwrestore.metrics import (UCIQE_WEIGHTS, UIQM_WEIGHTS, MetricReport, eme, psnr, score_pair,
                               sobel_magnitude, srgb_to_lab, ssim, trimmed_mean, uciqe, uciqe_components,
                               uiconm, uicm, uiqm, uiqm_components, uism)
from uwrestore.synthetic import blur, clean_image

# naive per-pixel oracles, written independently of the vectorised code


def luma_loop(img):
    h, w, _ = img.shape
    return [[0.299 * img[r, c, 0] + 0.587 * img[r, c, 1] + 0.114 * img[r, c, 2] for c in range(w)]
            for r in range(h)]


def ssim_loop(a, b, win, sigma=1.5, peak=1.0):
    x, y = luma_loop(a), luma_loop(b)
    g = [math.exp(-((i - (win - 1) / 2) ** 2) / (2 * sigma ** 2)) for i in range(win)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h, w = len(x), len(x[0])
    vals = []
    for r in range(h - win + 1):
        for c in range(w - win + 1):
            mx = my = xx = yy = xy = 0.0
            for i in range(win):
                for j in range(win):
                    wt = g[i] * g[j]
                    p, q = x[r + i][c + j], y[r + i][c + j]
                    mx += wt * p
                    my += wt * q
                    xx += wt * p * p
                    yy += wt * q * q
                    xy += wt * p * q
            vx, vy, cxy = xx - mx * mx, yy - my * my, xy - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def lab_pixel(r, g, b):
    def lin(v):
        return v / 12.92 if v <= 0.04045 else ((v + 0.055) / 1.055) ** 2.4

    rl, gl, bl = lin(r), lin(g), lin(b)
    m = [[0.412453, 0.357580, 0.180423], [0.212671, 0.715160, 0.072169], [0.019334, 0.119193, 0.950227]]
    xyz = [sum(m[i][j] * v for j, v in enumerate((rl, gl, bl))) / sum(m[i]) for i in range(3)]

    def f(t):
        d = 6 / 29
        return t ** (1 / 3) if t > d ** 3 else t / (3 * d * d) + 4 / 29

    fx, fy, fz = (f(t) for t in xyz)
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def quantile_loop(values, q):
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def uciqe_loop(img):
    h, w, _ = img.shape
    L, C, S = [], [], []
    for r in range(h):
        for c in range(w):
            l, a, b = (v / 100 for v in lab_pixel(*img[r, c]))
            ch = math.sqrt(a * a + b * b)
            L.append(l)
            C.append(ch)
            S.append(ch / l if l > 0 else 0.0)
    mc = sum(C) / len(C)
    sd = math.sqrt(sum((v - mc) ** 2 for v in C) / len(C))
    con = quantile_loop(L, 0.99) - quantile_loop(L, 0.01)
    return 0.4680 * sd + 0.2745 * con + 0.2576 * sum(S) / len(S)


def trimmed_loop(values, a=0.1):
    s = sorted(values)
    k = len(s)
    hi = math.floor(a * k)
    lo = min(math.ceil(a * k), k - 1 - hi)
    kept = s[lo:k - hi]
    return sum(kept) / len(kept)


def sobel_loop(ch):
    h, w = ch.shape

    def px(r, c):
        r = -r if r < 0 else (2 * (h - 1) - r if r >= h else r)
        c = -c if c < 0 else (2 * (w - 1) - c if c >= w else c)
        return ch[r, c]

    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            gx = sum(k * (px(r + dr, c + 1) - px(r + dr, c - 1)) for dr, k in ((-1, 1), (0, 2), (1, 1)))
            gy = sum(k * (px(r + 1, c + dc) - px(r - 1, c + dc)) for dc, k in ((-1, 1), (0, 2), (1, 1)))
            out[r, c] = math.sqrt(gx * gx + gy * gy)
    return out


def blocks_loop(ch, n=8):
    return [[ch[r + i, c + j] for i in range(n) for j in range(n)]
            for r in range(0, ch.shape[0] - n + 1, n) for c in range(0, ch.shape[1] - n + 1, n)]


def eme_loop(ch):
    bl = blocks_loop(ch)
    return 2 / len(bl) * sum(math.log(max(b) / min(b)) if min(b) > 0 else 0.0 for b in bl)


def uiqm_loop(img):
    x = img * 255
    h, w, _ = x.shape
    rg = [x[r, c, 0] - x[r, c, 1] for r in range(h) for c in range(w)]
    yb = [(x[r, c, 0] + x[r, c, 1]) / 2 - x[r, c, 2] for r in range(h) for c in range(w)]
    mrg, myb = trimmed_loop(rg), trimmed_loop(yb)
    var = sum((v - mrg) ** 2 for v in rg) / len(rg) + sum((v - myb) ** 2 for v in yb) / len(yb)
    cm = -0.0268 * math.sqrt(mrg ** 2 + myb ** 2) + 0.1586 * math.sqrt(var)
    sm = sum(k * eme_loop(sobel_loop(x[..., c]) * x[..., c]) for c, k in enumerate((0.299, 0.587, 0.114)))
    inten = np.array(luma_loop(x))
    con = 0.0
    bl = blocks_loop(inten)
    for b in bl:
        mx, mn = max(b), min(b)
        rr = (mx - mn) / (mx + mn) if mx + mn > 0 else 0.0
        con -= rr * math.log(rr) if rr > 0 else 0.0
    con /= len(bl)
    return 0.0282 * cm + 0.2953 * sm + 3.5753 * con, (cm, sm, con)


def test_metric_constants():
    assert UCIQE_WEIGHTS == (0.4680, 0.2745, 0.2576)
    assert UIQM_WEIGHTS == (0.0282, 0.2953, 3.5753)


def test_psnr_formula(rng):
    a = rng.integers(0, 200, (8, 8, 3)) / 255.0
    b = a + 16 / 255.0
    assert abs(psnr(a, b) - 20 * math.log10(255 / 16)) < 1e-9
    halved = psnr(a, a + 8 / 255.0)
    assert abs(halved - psnr(a, b) - 20 * math.log10(2)) < 1e-9
    assert psnr(a, a) == math.inf
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(InvalidInputError):
        psnr(a, a[:4])


def test_psnr_decreases_with_noise(rng):
    a = rng.random((8, 8, 3))
    n = rng.standard_normal((8, 8, 3))
    vals = [psnr(a, a + s * n) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_matches_loop_oracle(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert abs(ssim(a, b, win_size=7) - ssim_loop(a, b, 7)) < 1e-9
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert abs(ssim(a, b) - ssim_loop(a, b, 11)) < 1e-9


def test_ssim_matches_reference_library(rng):
    skm = pytest.importorskip("skimage.metrics")
    a, b = rng.random((24, 20, 3)), rng.random((24, 20, 3))
    ref = skm.structural_similarity(a @ [0.299, 0.587, 0.114], b @ [0.299, 0.587, 0.114], data_range=1.0,
                                    gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert abs(ssim(a, b) - ref) < 1e-9


def test_ssim_properties(rng):
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    assert ssim(a, b) == ssim(b, a)
    binary = (rng.random((32, 32, 1)) > 0.5).astype(float)
    assert ssim(binary, 1 - binary) < 0.1
    with pytest.raises(InvalidInputError):
        ssim(rng.random((8, 8, 3)), rng.random((8, 8, 3)))


def test_lab_against_reference_library(rng):
    color = pytest.importorskip("skimage.color")
    rgb = rng.random((6, 6, 3))
    # the reference library uses a rounded D65 white; a* scales that rounding by 500
    np.testing.assert_allclose(srgb_to_lab(rgb), color.rgb2lab(rgb), atol=1e-2)
    grey = srgb_to_lab(np.full((1, 1, 3), 0.4))
    assert abs(grey[0, 0, 1]) < 1e-12 and abs(grey[0, 0, 2]) < 1e-12


def test_uciqe_grey_is_zero():
    assert uciqe(np.full((8, 8, 3), 0.5)) == pytest.approx(0.0, abs=1e-12)
    c = uciqe_components(np.full((8, 8, 3), 0.5))
    assert all(abs(v) < 1e-12 for v in c.values())


def test_uciqe_matches_loop_oracle(rng):
    img = rng.random((8, 8, 3))
    img[0, 0] = 0.0     # exercises the zero-lightness saturation rule
    assert abs(uciqe(img) - uciqe_loop(img)) < 1e-9


def test_uciqe_prefers_saturated(rng):
    img = clean_image(32, rng).data.astype(np.float64)
    grey = img @ [0.299, 0.587, 0.114]
    washed = 0.2 * img + 0.8 * grey[..., None]
    assert uciqe(washed) < uciqe(img)


def test_trimmed_mean_loop(rng):
    for n in (1, 7, 10, 33):
        x = rng.standard_normal(n)
        assert abs(trimmed_mean(x) - trimmed_loop(x.tolist())) < 1e-12


def test_sobel_loop(rng):
    ch = rng.random((6, 7))
    np.testing.assert_allclose(sobel_magnitude(ch), sobel_loop(ch), atol=1e-12)


def test_uiqm_matches_loop_oracle(rng):
    img = rng.random((16, 24, 3))
    total, (cm, sm, con) = uiqm_loop(img)
    c = uiqm_components(img)
    assert abs(c["uicm"] - cm) < 1e-9 and abs(c["uism"] - sm) < 1e-9 and abs(c["uiconm"] - con) < 1e-9
    assert abs(uiqm(img) - total) < 1e-9


def test_uiqm_grey_components_vanish():
    c = uiqm_components(np.full((16, 16, 3), 0.5))
    assert c == {"uicm": 0.0, "uism": 0.0, "uiconm": 0.0}


def test_uiqm_recomposition(rng):
    img = rng.random((16, 16, 3))
    c = uiqm_components(img)
    assert uiqm(img) == 0.0282 * c["uicm"] + 0.2953 * c["uism"] + 3.5753 * c["uiconm"]


def test_uiqm_partial_blocks_dropped(rng):
    ch = rng.random((20, 21)) + 0.1
    assert eme(ch) == eme(ch[:16, :16])
    rgb = rng.random((20, 21, 3)) * 255
    assert uiconm(rgb) == uiconm(rgb[:16, :16])
    with pytest.raises(InvalidInputError):
        uiqm(rng.random((7, 30, 3)))


def test_uism_sharpened_beats_blurred(rng):
    img = clean_image(48, rng)
    soft = blur(img, 1.5).data.astype(np.float64)
    base = img.data.astype(np.float64)
    sharp = np.clip(base + 1.0 * (base - soft), 0, 1)
    assert uism(sharp * 255) >= uism(soft * 255)


def test_eme_and_uiconm_edge_cases():
    zeros = np.zeros((8, 8))
    assert eme(zeros) == 0.0 and uiconm(np.zeros((8, 8, 3))) == 0.0
    ramp = np.arange(1, 65, dtype=float).reshape(8, 8)
    assert abs(eme(ramp) - 2 * math.log(64)) < 1e-12
    assert uicm(np.full((4, 4, 3), 100.0)) == 0.0


@given(seed=st.integers(0, 1000), axis=st.sampled_from([0, 1]))
def test_flip_invariance(seed, axis):
    img = np.random.default_rng(seed).random((16, 16, 3))
    flipped = np.flip(img, axis=axis)
    assert abs(uciqe(flipped) - uciqe(img)) < 1e-12
    assert abs(uiqm(flipped) - uiqm(img)) < 1e-9
    transposed = img.transpose(1, 0, 2)
    assert abs(uiqm(transposed) - uiqm(img)) < 1e-9


def test_metrics_finite(rng):
    for img in (rng.random((16, 16, 3)), np.zeros((16, 16, 3)), np.ones((16, 16, 3))):
        scores = score_pair(img, rng.random((16, 16, 3)))
        assert all(math.isfinite(v) for v in scores.values())


def test_report_csv(tmp_path, rng):
    rep = MetricReport()
    a = rng.random((16, 16, 3))
    rep.add("a.png", **score_pair(a, a))
    rep.add("b.png", **score_pair(a, np.clip(a + 0.1, 0, 1)))
    rep.add("c.png", psnr=20.0)
    rep.write_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["image", "psnr", "ssim", "uciqe", "uiqm"]
    assert rows[1][1] == "inf" and rows[-1][0] == "mean" and rows[-1][1] == "inf"
    assert rows[3][2:] == ["", "", ""]
    mean_ssim = float(rows[-1][2])
    assert abs(mean_ssim - (rep.rows[0]["ssim"] + rep.rows[1]["ssim"]) / 2) < 1e-15


def test_report_plot(tmp_path, rng):
    pytest.importorskip("matplotlib")
    rep = MetricReport()
    for i in range(3):
        rep.add(f"{i}.png", **score_pair(rng.random((16, 16, 3))))
    rep.plot_histograms(tmp_path / "h.png")
    assert (tmp_path / "h.png").stat().st_size > 0

import sys

import numpy as np
import pytest
import torch

from uwrestore.core import DepthRaster, ImagePlane, InvalidInputError
from uwrestore.depth import (DepthProviderError, DepthProviderSpec, downsample_depth, normalize_depth,
                             predict_depth, read_png16, stub_depth, write_png16)
from uwrestore.pipeline import DepthService

from conftest import assert_grad_matches_fd

FAKE_PROVIDER = """
import sys
import numpy as np
from PIL import Image
src, dst = sys.argv[1], sys.argv[2]
rgb = np.asarray(Image.open(src).convert("RGB"), dtype=np.float64)
depth = 1000.0 + rgb[..., 0] * 10 {extra}
Image.fromarray(depth.astype(np.uint16)).save(dst)
"""


def stub_oracle(img):
    """Per-pixel loop: 5x5 box mean of 1 - Y with mirrored borders."""
    y = 1.0 - (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])
    h, w = y.shape

    def mirror(i, n):
        if n == 1:
            return 0
        while not 0 <= i < n:
            i = -i if i < 0 else 2 * (n - 1) - i
        return i

    out = np.zeros_like(y)
    for r in range(h):
        for c in range(w):
            out[r, c] = np.mean([y[mirror(r + a, h), mirror(c + b, w)] for a in range(-2, 3) for b in range(-2, 3)])
    return out


def test_spec_modes():
    assert DepthProviderSpec().differentiable
    assert not DepthProviderSpec("external", "cmd").differentiable
    assert DepthProviderSpec("stub", differentiable=False).differentiable
    with pytest.raises(InvalidInputError):
        DepthProviderSpec("external")


@pytest.mark.parametrize("value,expected", [(1.0, 0.0), (0.0, 1.0)])
def test_stub_constant_images(value, expected):
    d = predict_depth(ImagePlane(np.full((6, 5, 3), value)))
    assert d.provenance == "stub" and d.shape == (6, 5)
    np.testing.assert_allclose(d.data, expected, atol=1e-12)


@pytest.mark.parametrize("shape", [(1, 1), (2, 3), (7, 9)])
def test_stub_matches_loop_oracle(rng, shape):
    img = rng.random(shape + (3,))
    d = stub_depth(ImagePlane(img).to_tensor(torch.float64))[0, 0].numpy()
    np.testing.assert_allclose(d, stub_oracle(img), atol=1e-12)


def test_stub_gradient(f64):
    x = torch.rand(1, 3, 6, 6)
    w = torch.rand(1, 1, 6, 6)
    assert_grad_matches_fd(lambda t: (stub_depth(t) * w).sum(), x, n_points=5)


def test_normalize_depth():
    np.testing.assert_allclose(normalize_depth([[2, 4], [6, 8]]).data, [[0, 1 / 3], [2 / 3, 1]])
    np.testing.assert_array_equal(normalize_depth([[5, 5], [5, 5]]).data, 0.5)
    with pytest.raises(InvalidInputError):
        normalize_depth([[1, np.nan]])


def test_normalize_random(rng):
    d = normalize_depth(rng.standard_normal((5, 7)) * 30)
    assert d.data.min() == 0.0 and d.data.max() == 1.0


def test_downsample(rng):
    d = DepthRaster(rng.random((8, 8)))
    np.testing.assert_array_equal(downsample_depth(d, 0).data, d.data)
    np.testing.assert_array_equal(downsample_depth(DepthRaster(np.array([[0, 1], [1, 0]])), 1).data, [[0.5]])
    twice = downsample_depth(downsample_depth(d, 1), 1)
    np.testing.assert_allclose(downsample_depth(d, 2).data, twice.data, atol=1e-15)
    assert abs(downsample_depth(d, 3).data.mean() - d.data.mean()) < 1e-15
    with pytest.raises(InvalidInputError):
        downsample_depth(DepthRaster(rng.random((6, 6))), 2)


def test_png16_round_trip(tmp_path, rng):
    d = rng.random((5, 4))
    write_png16(tmp_path / "d.png", d)
    np.testing.assert_allclose(read_png16(tmp_path / "d.png") / 65535.0, d, atol=0.5 / 65535)


def _provider(tmp_path, extra=""):
    script = tmp_path / "provider.py"
    script.write_text(FAKE_PROVIDER.format(extra=extra))
    return f"{sys.executable} {script}"


def test_external_provider(tmp_path, rng):
    img = ImagePlane(rng.random((6, 5, 3)))
    d = predict_depth(img, DepthProviderSpec("external", _provider(tmp_path)))
    assert d.provenance == "external" and d.shape == (6, 5)
    assert d.data.min() == 0.0 and d.data.max() == 1.0
    r8 = np.round(img.data[..., 0] * 255)
    np.testing.assert_allclose(d.data, (r8 - r8.min()) / (r8.max() - r8.min()), atol=1e-12)


def test_external_failure_diagnostics(tmp_path, rng):
    spec = DepthProviderSpec("external", _provider(tmp_path, "; sys.stderr.write('boom'); sys.exit(3)"))
    with pytest.raises(DepthProviderError, match="boom"):
        predict_depth(ImagePlane(rng.random((4, 4, 3))), spec)


def test_external_size_mismatch(tmp_path, rng):
    spec = DepthProviderSpec("external", _provider(tmp_path, "; depth = depth[:-1]"))
    with pytest.raises(DepthProviderError, match="depth map is 3x4"):
        predict_depth(ImagePlane(rng.random((4, 4, 3))), spec)


def test_depth_service_caches(tmp_path, rng):
    calls = tmp_path / "calls.txt"
    extra = f"; open({str(calls)!r}, 'a').write('x')"
    svc = DepthService(DepthProviderSpec("external", _provider(tmp_path, extra)), cache_dir=tmp_path / "cache")
    x = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    a = svc(x)
    b = svc(x)
    assert a.shape == (2, 1, 8, 8) and torch.equal(a, b)
    assert calls.read_text() == "xx"
    fresh = DepthService(svc.spec, cache_dir=tmp_path / "cache")
    assert torch.allclose(fresh(x), a, atol=1e-4)
    assert calls.read_text() == "xx"

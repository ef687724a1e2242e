import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default torch dtype."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def central_difference(fn, x: torch.Tensor, idx, h=1e-6):
    """d fn(x) / d x[idx] by central differences (float64)."""
    xp, xm = x.detach().clone(), x.detach().clone()
    xp[idx] += h
    xm[idx] -= h
    with torch.no_grad():
        return (float(fn(xp)) - float(fn(xm))) / (2 * h)


def assert_grad_matches_fd(fn, x: torch.Tensor, n_points=5, rtol=1e-4, atol=1e-8, seed=0, h=1e-6):
    """Compare autograd and central differences of scalar ``fn`` at a few coordinates of ``x``."""
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x, allow_unused=True)
    if g is None:       # x not on the graph (e.g. an expert skipped by top-k): true gradient is 0
        g = torch.zeros_like(x)
    gen = np.random.default_rng(seed)
    flat = gen.choice(x.numel(), size=min(n_points, x.numel()), replace=False)
    for f in flat:
        idx = np.unravel_index(int(f), tuple(x.shape))
        fd = central_difference(fn, x, idx, h)
        an = float(g[idx])
        assert abs(an - fd) <= atol + rtol * max(abs(an), abs(fd)), (idx, an, fd)


def make_dataset(root, n=3, size=40, seed=0, degradation="color"):
    """Write ``n`` toy pairs as 8-bit PNGs under ``root/input`` and ``root/gt``."""
    from uwrestore.data import write_png8
    from uwrestore.synthetic import toy_pairs

    for i, (lq, gt) in enumerate(toy_pairs(n, size, degradation, seed)):
        write_png8(root / "input" / f"img{i:02d}.png", lq)
        write_png8(root / "gt" / f"img{i:02d}.png", gt)
    return root


TINY_CONFIG = "profile = tiny\ncrop = 32\nbatch = 2\ncheckpoint_every = 10\n"


# acceptance reporting: tests marked criterion(n, title) roll up into one line per criterion
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False})
    entry["ran"] = entry["ran"] or rep.when == "call"
    entry["ok"] = entry["ok"] and not rep.failed and not rep.skipped


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']}")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_conv2d(x, w, b, stride, pad):
    """Direct six-loop cross-correlation, used as an independent oracle."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[bi, :, y * stride : y * stride + kh, z * stride : z * stride + kw]
                    out[bi, o, y, z] = np.sum(patch * w[o]) + b[o]
    return out


def naive_convtranspose2(x, w, b):
    """Scatter-add definition of the 2x2 stride-2 transposed convolution."""
    n, c, h, wd = x.shape
    co = w.shape[0]
    out = np.zeros((n, co, 2 * h, 2 * wd))
    for bi in range(n):
        for i in range(h):
            for j in range(wd):
                for o in range(co):
                    out[bi, o, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2] += np.tensordot(
                        x[bi, :, i, j], w[o], axes=(0, 0)
                    )
    return out + b[None, :, None, None]


# -- acceptance report ----------------------------------------------------------------


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def criterion(request):
    """``record(n, ok, detail)`` stores one acceptance verdict for the final report."""

    def record(n, ok, detail=""):
        request.config._acceptance[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    res = getattr(config, "_acceptance", {})
    if not res:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(res):
        ok, detail = res[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

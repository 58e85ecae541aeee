import numpy as np
import pytest

from mflow import tensor as T


def fd_relative_error(fn, leaves, rng=None, max_coords=None, step=1e-5):
    """Relative error between backward() gradients and central differences.

    ``fn`` rebuilds a scalar Tensor from the float64 ``leaves``. When
    ``max_coords`` is set, that many coordinates per leaf are sampled.
    Returns ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||).
    """
    rng = rng or np.random.default_rng(0)
    T.current_record().clear()
    for t in leaves:
        t.grad = None
    T.backward(fn())
    analytic, numeric = [], []
    for t in leaves:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        idx = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            idx = rng.choice(t.data.size, max_coords, replace=False)
        flat = t.data.reshape(-1)
        for i in idx:
            orig = flat[i]
            with T.no_grad():
                flat[i] = orig + step
                fp = float(fn().data)
                flat[i] = orig - step
                fm = float(fn().data)
            flat[i] = orig
            numeric.append((fp - fm) / (2 * step))
            analytic.append(g.reshape(-1)[i])
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / scale)


def leaf(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return T.Tensor(x, requires_grad=True, dtype=np.float64)


def projected(out, rng_or_weights):
    """Scalar sum(out * R) for a fixed random R, so every output element matters."""
    r = rng_or_weights
    if isinstance(r, np.random.Generator):
        r = r.standard_normal(out.shape)
    return T.sum_all(T.mul(out, T.Tensor(r, dtype=np.float64)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_lines(request):
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(text)

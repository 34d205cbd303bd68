import numpy as np
import pytest


def central_diff(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``arrays`` (mutated in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = fn()
            arr[i] = old - h
            down = fn()
            arr[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=float)
        n = np.asarray(n, dtype=float)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


@pytest.fixture(scope="session")
def run_cache():
    """Training runs shared across tests, keyed by (run_key, seed)."""
    return {}


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

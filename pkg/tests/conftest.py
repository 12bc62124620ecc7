import numpy as np
import pytest

from cdesurv import tensor as T


def numeric_grad(fn, arr, eps=1e-6):
    """Central finite differences of the scalar ``fn()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        hi = fn()
        arr[idx] = old - eps
        lo = fn()
        arr[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, n, floor=1e-6):
    """Worst per-coordinate relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, dict]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid] = (report.outcome, props)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    rows = sorted(_ACCEPTANCE.items(), key=lambda kv: kv[1][1].get("criterion", 99))
    for nodeid, (outcome, props) in rows:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        label = props.get("criterion", "?")
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"criterion {label:>2} {verdict}  {name}  {props.get('detail', '')}")

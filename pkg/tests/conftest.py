import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    info = _CRITERION_OF.get(report.nodeid)
    if info is None:
        return
    number, title = info
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": []})
    if hasattr(report, "wasxfail"):
        outcome = "xfail" if report.skipped else "xpass"
    else:
        outcome = report.outcome
    entry["outcomes"].append((report.nodeid.split("::")[-1], outcome))


_CRITERION_OF: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERION_OF[item.nodeid] = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = [o for _, o in entry["outcomes"]]
        if any(o in ("failed", "xpass") for o in outcomes):
            status = "FAIL"
        elif "xfail" in outcomes:
            status = "PARTIAL"
        else:
            status = "PASS"
        known = [name for name, o in entry["outcomes"] if o == "xfail"]
        note = f" (known deviation: {', '.join(known)})" if known else ""
        terminalreporter.write_line(f"criterion {number:>2} {status:<7} {entry['title']}{note}")

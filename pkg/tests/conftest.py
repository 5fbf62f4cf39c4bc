import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def store():
    """Pretrained teachers, cached on disk across sessions (override with TRANSPLANT_CACHE)."""
    import os
    from pathlib import Path

    from transplant.data import ShapeWorldSpec
    from transplant.experiments import TeacherStore

    root = os.environ.get("TRANSPLANT_CACHE") or Path(__file__).resolve().parent.parent / ".cache" / "teachers"
    return TeacherStore(root, ShapeWorldSpec())


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in getattr(rep, "nodeid", "") or (rep.when != "call" and rep.passed):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            name = rep.nodeid.split("::")[-1]
            lines.append((name, "PASS" if rep.passed else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict} {name}: {detail}")

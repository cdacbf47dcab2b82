"""Acceptance suite: one experiment of ``configs/acceptance.toml`` per criterion.

Run with ``pytest tests/test_acceptance.py`` (the PASS/FAIL lines appear in
the terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

from pathlib import Path

import pytest

from levybsde.cli import run_spec
from levybsde.config import load_config

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.toml"

CRITERIA = [
    (1, "jump_derivative_exactness", "jump-direction derivative is exact"),
    (2, "isometry", "first and second order isometry, orthogonality"),
    (3, "girsanov", "Cameron-Martin shift against density weighting"),
    (4, "martingale_bsde", "martingale BSDE controls"),
    (5, "linear_driver", "linear driver and first-order time step sweep"),
    (6, "tree_equivalence", "regression with exact basis on tree paths"),
    (7, "derivative_triangle", "derivative BSDE against shifted re-solve"),
    (8, "chain_rule", "chain rule against finite differences"),
    (9, "representation", "Z and U from derivative fields"),
    (10, "picard_gronwall", "global Picard gaps satisfy the sequence bound"),
    (11, "stability", "stability ratio across perturbation sizes"),
    (12, "utility_truncation", "truncated exponential jump term is inactive"),
]

RESULT_LINES = []


@pytest.fixture(scope="module")
def config():
    return load_config(CONFIG)


def _line(number, name, what, result):
    verdict = "PASS" if result.passed else "FAIL"
    worst = [f"{c.name} = {c.value:.3g} (limit {c.tolerance:.3g})" for c in result.checks if not c.passed]
    tail = f"; failing: {'; '.join(worst)}" if worst else ""
    return f"criterion {number:2d} [{verdict}] {name}: {what} ({len(result.checks)} checks){tail}"


@pytest.mark.parametrize("number,name,what", CRITERIA, ids=[c[1] for c in CRITERIA])
def test_criterion(config, number, name, what):
    spec = next(s for s in config.experiments if s.name == name)
    result = run_spec(spec)
    line = _line(number, name, what, result)
    RESULT_LINES.append(line)
    print(line)
    failing = [c for c in result.checks if not c.passed]
    assert not failing, "; ".join(f"{c.name}: value {c.value!r} outside [{c.lower}, {c.tolerance}]" for c in failing)


def test_tree_against_closed_form(config):
    """Oracle cross-check run alongside the criteria (tree vs closed form)."""
    spec = next(s for s in config.experiments if s.name == "tree_closed_form")
    result = run_spec(spec)
    line = _line(0, "tree_closed_form", "closed form against a 4-step tree (oracle check)", result)
    RESULT_LINES.append(line.replace("criterion  0", "oracle      "))
    assert result.passed


if __name__ == "__main__":
    cfg = load_config(CONFIG)
    by_name = {s.name: s for s in cfg.experiments}
    ok = True
    for number, name, what in CRITERIA:
        res = run_spec(by_name[name])
        ok &= res.passed
        print(_line(number, name, what, res), flush=True)
    raise SystemExit(0 if ok else 1)

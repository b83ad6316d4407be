from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import random_orthonormal  # noqa: E402

from probcontour.autodiff import Tensor  # noqa: E402
from probcontour.encoder import EncoderOutput  # noqa: E402
from probcontour.shape_model import PcaShapeModel  # noqa: E402


def make_model(rng: np.random.Generator, vertex_count: int, k: int, scale: float = 3.0) -> PcaShapeModel:
    """Shape model with a random orthonormal basis and descending spectrum."""
    u = random_orthonormal(rng, 2 * vertex_count, k)
    evals = np.sort(rng.uniform(0.5, 4.0, k))[::-1] * scale
    doc = {
        "vertex_count": vertex_count,
        "num_components": k,
        "ddof": 1,
        "mean": list(rng.normal(10.0, 2.0, 2 * vertex_count)),
        "eigenvalues": list(evals),
        "components": [list(c) for c in u.T],
    }
    return PcaShapeModel.from_dict(doc)


def make_output(mean, logvar, shift) -> EncoderOutput:
    f = lambda a: Tensor(np.atleast_2d(np.asarray(a, dtype=np.float64)))  # noqa: E731
    return EncoderOutput(f(mean), f(logvar), f(shift))


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""

    def _report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

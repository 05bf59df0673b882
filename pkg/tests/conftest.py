import numpy as np
import pytest

from xtab.data import BINARY, CATEGORICAL, FEATURE, LABEL, NUMERICAL, ColumnSchema, TableDataset
from xtab.tensor import set_verification_mode, is_verification_mode


@pytest.fixture
def f64():
    """Run the test in float64 verification mode."""
    previous = is_verification_mode()
    set_verification_mode(True)
    yield
    set_verification_mode(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_table(n_rows=40, n_num=2, cat_levels=(3,), task=BINARY, seed=0, name="toy"):
    """Small mixed table with a binary or regression label."""
    r = np.random.default_rng(seed)
    schema, columns = [], {}
    for j in range(n_num):
        schema.append(ColumnSchema(f"n{j}", NUMERICAL, FEATURE))
        columns[f"n{j}"] = r.normal(size=n_rows) * (j + 1) + j
    for j, levels in enumerate(cat_levels):
        cats = tuple(f"v{i}" for i in range(levels))
        schema.append(ColumnSchema(f"c{j}", CATEGORICAL, FEATURE, cats))
        columns[f"c{j}"] = r.integers(0, levels, size=n_rows) + 2
    if task == BINARY:
        schema.append(ColumnSchema("y", CATEGORICAL, LABEL, ("0", "1")))
        y = r.integers(0, 2, size=n_rows)
        y[:2] = [0, 1]
        columns["y"] = y
    else:
        schema.append(ColumnSchema("y", NUMERICAL, LABEL))
        columns["y"] = r.normal(size=n_rows) * 3 + 10
    return TableDataset(name, schema, columns, task)


def relative_error(analytic, numeric, floor=1e-6):
    """Element-wise relative error over entries whose gradient magnitude exceeds ``floor``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    keep = scale > floor
    if not keep.any():
        return 0.0
    return float((np.abs(analytic - numeric)[keep] / scale[keep]).max())


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

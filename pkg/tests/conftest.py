import csv

import numpy as np
import pytest

from mggp.data import Dataset
from mggp.expr import FunctionSet, GrowthConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def growth4():
    return GrowthConfig(n_vars=4, max_depth=5, function_set=FunctionSet.with_cos())


@pytest.fixture
def small_dataset(rng):
    X = rng.uniform(-2, 2, (120, 3))
    y = 1 + 2 * X[:, 0] + 0.5 * X[:, 1] ** 2
    return Dataset.from_arrays(X, y)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def synthetic_flight(rng, n, shift=0.0, blank_gap=True):
    """Flight-like table: one redundant copy, one constant, one column with
    a blank cell, one string column, and an EGT target."""
    a = rng.normal(size=n) + shift
    b = rng.normal(size=n)
    c = rng.normal(size=n)
    cols = {
        "N1": a,
        "N1_dup": 2 * a + 3 + rng.normal(scale=0.01, size=n),
        "T25": b,
        "P3": c,
        "gap": rng.normal(size=n),
        "const": np.ones(n),
    }
    cols["EGT"] = 600 + 30 * a + 5 * b ** 2 - 10 * np.exp(-0.5 * c) + rng.normal(scale=0.5, size=n)
    header = list(cols) + ["status"]
    rows = []
    for i in range(n):
        row = [repr(float(cols[k][i])) for k in cols]
        if blank_gap and i == 5:
            row[4] = ""
        rows.append(row + ["ok"])
    return header, rows


@pytest.fixture
def flight_files(tmp_path):
    r = np.random.default_rng(7)
    paths = []
    for i in range(3):
        header, rows = synthetic_flight(r, 150)
        paths.append(str(write_csv(tmp_path / f"flight{i + 1}.csv", header, rows)))
    header, rows = synthetic_flight(r, 120, shift=0.3, blank_gap=False)
    val = str(write_csv(tmp_path / "flight4.csv", header, rows))
    return paths, val


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)

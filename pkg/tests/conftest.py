import numpy as np
import pytest

from stencilpipe import create_grid, reference_sweep


class OracleCache:
    """Reference-sweep stacks, computed once per (size, seed) and extended on
    demand so the many pipelined configurations can share their oracles."""

    def __init__(self):
        self._runs = {}

    def after_sweeps(self, size, seed, sweeps):
        key = (size, seed)
        if key not in self._runs:
            g = create_grid(size, size, size, init="random", seed=seed)
            self._runs[key] = [g, g.copy(), 0, {0: g.interior_view().copy()}]
        cur, nxt, done, snaps = self._runs[key]
        while done < sweeps:
            reference_sweep(cur, nxt)
            cur, nxt = nxt, cur
            done += 1
            snaps[done] = cur.interior_view().copy()
        self._runs[key] = [cur, nxt, done, snaps]
        return snaps[sweeps]


@pytest.fixture(scope="session")
def oracle():
    return OracleCache()


def assert_bitwise(actual: np.ndarray, expected: np.ndarray):
    __tracebackhide__ = True
    assert actual.shape == expected.shape
    if not np.array_equal(actual, expected):
        diff = np.flatnonzero(actual != expected)
        raise AssertionError(
            f"grids differ at {diff.size} cells (first flat index {diff[0]})")

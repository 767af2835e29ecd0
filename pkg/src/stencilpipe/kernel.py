"""Jacobi stencil updates on cells, windows and whole grids.

Every execution path funnels through :func:`apply_window`, which fixes the
per-cell summation order (x-low, x-high, y-low, y-high, z-low, z-high, then
multiply by 1/6).  Because the order never changes, blocked, shifted and
pipelined runs are bitwise identical to the plain reference sweep, which is
the oracle for everything else.
"""

from __future__ import annotations

import numpy as np

from .grid import Grid3, BlockSpec, decompose_blocks

SIXTH = 1.0 / 6.0

AXES = ("x", "y", "z")


def stencil_update_cell(grid: Grid3, i: int, j: int, k: int) -> float:
    """Single cell update: mean of the six face neighbors (center excluded)."""
    if not (0 <= i < grid.nx and 0 <= j < grid.ny and 0 <= k < grid.nz):
        raise IndexError(f"cell {(i, j, k)} outside interior {grid.shape}")
    o = grid.origin - grid.alignment
    d = grid.data
    z, y, x = o + k, o + j, o + i
    return ((((d[z, y, x - 1] + d[z, y, x + 1]) + d[z, y - 1, x])
             + d[z, y + 1, x]) + d[z - 1, y, x] + d[z + 1, y, x]) * SIXTH


def window_is_empty(window) -> bool:
    return any(lo >= hi for lo, hi in window)


def apply_window(src: np.ndarray, dst: np.ndarray, window, src_off: int,
                 dst_off: int) -> None:
    """Update one rectangular window of logical cells.

    window = ((xlo, xhi), (ylo, yhi), (zlo, zhi)) half-open in logical
    coordinates; src_off/dst_off translate logical coordinate 0 to the storage
    index of the source and destination frames (same offset on every axis).
    src and dst may alias: the window result is fully computed before any
    store, so a diagonally shifted in-place write is safe.
    """
    (xl, xh), (yl, yh), (zl, zh) = window
    if xl >= xh or yl >= yh or zl >= zh:
        return
    so, do = src_off, dst_off
    xs, ys, zs = slice(xl + so, xh + so), slice(yl + so, yh + so), slice(zl + so, zh + so)
    buf = np.add(src[zs, ys, xl + so - 1:xh + so - 1],
                 src[zs, ys, xl + so + 1:xh + so + 1])
    buf += src[zs, yl + so - 1:yh + so - 1, xs]
    buf += src[zs, yl + so + 1:yh + so + 1, xs]
    buf += src[zl + so - 1:zh + so - 1, ys, xs]
    buf += src[zl + so + 1:zh + so + 1, ys, xs]
    buf *= SIXTH
    dst[zl + do:zh + do, yl + do:yh + do, xl + do:xh + do] = buf


def write_ring_strips(dst: np.ndarray, faces: dict, window, dst_off: int,
                      sides, dims) -> None:
    """Re-materialize Dirichlet values next to a window in the destination
    frame.  ``sides`` lists (axis, side) pairs where the window touches a
    physical domain face; the strip spans the window's extent in the other two
    axes.  Needed only when the write frame is displaced (compressed mode):
    the shifted ring position must hold boundary values before the next update
    level reads them."""
    (xl, xh), (yl, yh), (zl, zh) = window
    do = dst_off
    nx, ny, nz = dims
    for axis, side in sides:
        vals = faces[(axis, side)]
        if axis == "x":
            p = (-1 if side == 0 else nx) + do
            dst[zl + do:zh + do, yl + do:yh + do, p] = vals[zl:zh, yl:yh]
        elif axis == "y":
            p = (-1 if side == 0 else ny) + do
            dst[zl + do:zh + do, p, xl + do:xh + do] = vals[zl:zh, xl:xh]
        else:
            p = (-1 if side == 0 else nz) + do
            dst[p, yl + do:yh + do, xl + do:xh + do] = vals[yl:yh, xl:xh]


def _copy_ring(a: Grid3, b: Grid3) -> None:
    """Copy the one-cell boundary shell of A onto B (same alignment)."""
    o = a.origin - a.alignment
    nx, ny, nz = a.shape
    sa, sb = a.data, b.data
    sl = (slice(o - 1, o + nz + 1), slice(o - 1, o + ny + 1), slice(o - 1, o + nx + 1))
    for axis in range(3):
        for face in (o - 1, (o + (nz, ny, nx)[axis])):
            idx = list(sl)
            idx[axis] = face
            idx = tuple(idx)
            sb[idx] = sa[idx]


def reference_sweep(a: Grid3, b: Grid3) -> None:
    """One plain Jacobi sweep: B.interior = stencil(A), B.ring = A.ring.

    This is the oracle for every blocked, compressed and pipelined path.
    """
    if a.shape != b.shape:
        raise ValueError(f"grid shapes differ: {a.shape} vs {b.shape}")
    if a.alignment != b.alignment:
        raise ValueError("reference_sweep requires equal alignments")
    window = ((0, a.nx), (0, a.ny), (0, a.nz))
    off = a.origin - a.alignment
    apply_window(a.data, b.data, window, off, off)
    _copy_ring(a, b)


def spatial_blocked_sweep(a: Grid3, b: Grid3, spec: BlockSpec) -> None:
    """Reference sweep traversed block by block (no temporal skew).  Block
    order cannot change per-cell arithmetic, so the result is bitwise equal to
    reference_sweep."""
    if a.shape != b.shape:
        raise ValueError(f"grid shapes differ: {a.shape} vs {b.shape}")
    plan = decompose_blocks(a, spec, 1)
    off = a.origin - a.alignment
    for (bx, by, bz), (sx, sy, sz) in plan.blocks:
        window = ((bx, bx + sx), (by, by + sy), (bz, bz + sz))
        apply_window(a.data, b.data, window, off, off)
    _copy_ring(a, b)

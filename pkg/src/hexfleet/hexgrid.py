"""Hexagonal grid world.

Grids are laid out on an ``rows x cols`` patch in odd-q offset coordinates
(odd columns shifted down half a cell) and stored internally in axial
coordinates, which makes neighbour arithmetic a constant offset per direction.

Direction indices are global and stable::

    0: (+1,  0)   1: (+1, -1)   2: ( 0, -1)
    3: (-1,  0)   4: (-1, +1)   5: ( 0, +1)
    6: stay

so the reverse of direction ``k < 6`` is ``(k + 3) % 6``.  Every 7-vector in
the package (geographic / collaborative masks, policy logits, tabular rows)
uses this order with "stay" last.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_DIRECTIONS = 7
STAY = 6

AXIAL_DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


def reverse_direction(k: int) -> int:
    if k == STAY:
        return STAY
    return (k + 3) % 6


def offset_to_axial(row: int, col: int) -> tuple[int, int]:
    q = col
    r = row - (col - (col & 1)) // 2
    return q, r


def axial_to_offset(q: int, r: int) -> tuple[int, int]:
    col = q
    row = r + (q - (q & 1)) // 2
    return row, col


@dataclass(frozen=True, eq=False)
class GridWorld:
    rows: int
    cols: int
    valid: np.ndarray  # (N,) bool
    axial: np.ndarray  # (N, 2) int
    neighbor_table: np.ndarray  # (N, 6) int, -1 where absent
    _targets: np.ndarray = field(repr=False)  # (N, 7) int, -1 where absent
    _geo: np.ndarray = field(repr=False)  # (N, 7) int8

    @property
    def n_grids(self) -> int:
        return self.rows * self.cols

    @property
    def valid_ids(self) -> np.ndarray:
        return np.flatnonzero(self.valid)

    def neighbors(self, g: int) -> list[int]:
        """Valid neighbour ids of ``g`` (excluding ``g`` itself)."""
        return [int(x) for x in self.neighbor_table[g] if x >= 0]

    def ner(self, g: int) -> list[int]:
        """Neighbourhood of ``g`` including ``g``; at most 7 entries."""
        return [int(g)] + self.neighbors(g)

    def target(self, g: int, k: int) -> int:
        """Grid reached from ``g`` along direction ``k``; -1 if off-map/invalid."""
        return int(self._targets[g, k])

    @property
    def targets(self) -> np.ndarray:
        """(N, 7) table of destination grids, -1 where the move is impossible."""
        return self._targets

    @property
    def geo_masks(self) -> np.ndarray:
        """(N, 7) int8 table of geographic contexts (all-zero rows for invalid grids)."""
        return self._geo

    def state_signature(self) -> str:
        return f"{self.rows}x{self.cols}:" + "".join("." if v else "#" for v in self.valid)


def _check_grid(world: GridWorld, g) -> int:
    if not (0 <= int(g) < world.n_grids):
        raise IndexError(f"grid id {g} out of range [0, {world.n_grids})")
    return int(g)


def build_grid(rows: int, cols: int, invalid_ids=()) -> GridWorld:
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    n = rows * cols
    invalid = set(int(i) for i in invalid_ids)
    bad = [i for i in invalid if not 0 <= i < n]
    if bad:
        raise ValueError(f"invalid ids out of range: {sorted(bad)}")
    valid = np.ones(n, dtype=bool)
    valid[list(invalid)] = False
    if not valid.any():
        raise ValueError("grid world has no valid grids")

    axial = np.zeros((n, 2), dtype=int)
    lookup = {}
    for g in range(n):
        row, col = divmod(g, cols)
        q, r = offset_to_axial(row, col)
        axial[g] = q, r
        lookup[(q, r)] = g

    nbr = -np.ones((n, 6), dtype=int)
    for g in range(n):
        if not valid[g]:
            continue
        q, r = axial[g]
        for k, (dq, dr) in enumerate(AXIAL_DIRECTIONS):
            h = lookup.get((q + dq, r + dr))
            if h is not None and valid[h]:
                nbr[g, k] = h

    targets = -np.ones((n, N_DIRECTIONS), dtype=int)
    targets[:, :6] = nbr
    targets[valid, STAY] = np.flatnonzero(valid)
    geo = (targets >= 0).astype(np.int8)
    return GridWorld(rows, cols, valid, axial, nbr, targets, geo)


def load_map(path) -> GridWorld:
    """Read a map file: one line per row, ``.`` valid and ``#`` invalid."""
    text = Path(path).read_text()
    return parse_map(text)


def parse_map(text: str) -> GridWorld:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty map")
    cols = len(lines[0])
    invalid = []
    for row, ln in enumerate(lines):
        if len(ln) != cols:
            raise ValueError(f"row {row} has width {len(ln)}, expected {cols}")
        for col, ch in enumerate(ln):
            if ch == "#":
                invalid.append(row * cols + col)
            elif ch != ".":
                raise ValueError(f"unexpected map character {ch!r} at row {row}")
    return build_grid(len(lines), cols, invalid)


def geographic_context(world: GridWorld, g) -> np.ndarray:
    g = _check_grid(world, g)
    if not world.valid[g]:
        raise ValueError(f"grid {g} is invalid")
    return world.geo_masks[g].copy()


def adjacency_matrix(world: GridWorld) -> np.ndarray:
    """Binary N x N matrix with D[i, j] = 1 iff j is in Ner(i); diagonal set for valid grids."""
    n = world.n_grids
    D = np.zeros((n, n), dtype=np.int8)
    for g in world.valid_ids:
        D[g, g] = 1
        for h in world.neighbors(g):
            D[g, h] = 1
    return D


def one_hot(world: GridWorld, g) -> np.ndarray:
    g = _check_grid(world, g)
    v = np.zeros(world.n_grids)
    v[g] = 1.0
    return v

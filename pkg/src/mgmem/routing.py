"""Information-flow reachability over a multigrid layer topology.

Models an unrolled stack of layers, each holding a pyramid of square
grids whose side doubles per level.  Between consecutive layers a unit
can reach the 3x3 conv halo at its own level, the halo of its 2x
nearest-neighbor duplicates one level finer, and the halo of its pool
parent one level coarser.  Exhaustive BFS over this graph checks that
the reach set from corner (1,1) of the coarsest source grid contains
the analytic box of side (m - n + 2) * 2^(n-1) - 1 at layer m, level n,
and contrasts the growth against a single-grid conv stack whose extent
is just m.

Layers and levels are 1-indexed here, matching the box formula.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class TopologySpec:
    layers: int
    levels: int
    base: int = 4            # side of the coarsest (level-1) grid

    def __post_init__(self):
        if self.layers < 1 or self.levels < 1 or self.base < 1:
            raise ValueError("layers, levels and base side must be >= 1")

    def side(self, level: int) -> int:
        """Grid side at a 1-indexed level; doubles per level."""
        if not 1 <= level <= self.levels:
            raise ValueError(f"level {level} out of range")
        return self.base * (2 ** (level - 1))


@dataclass(frozen=True)
class TopologyNode:
    layer: int
    level: int
    row: int                 # 1-indexed
    col: int


@dataclass
class ReachSet:
    """Per-(layer, level) boolean reach grids, 0-indexed arrays inside."""

    spec: TopologySpec
    grids: dict[tuple[int, int], np.ndarray]

    def contains(self, node: TopologyNode) -> bool:
        grid = self.grids.get((node.layer, node.level))
        return grid is not None and bool(grid[node.row - 1, node.col - 1])

    def box_extent(self, layer: int, level: int) -> int:
        """Largest e with the full box [1, e]^2 reached."""
        grid = self.grids[(layer, level)]
        e = 0
        while e < grid.shape[0] and grid[:e + 1, :e + 1].all():
            e += 1
        return e

    def bounding_box(self, layer: int, level: int) -> tuple[int, int]:
        grid = self.grids[(layer, level)]
        if not grid.any():
            return 0, 0
        rows, cols = np.nonzero(grid)
        return int(rows.max()) + 1, int(cols.max()) + 1


def _halo(row: int, col: int, side: int) -> Iterable[tuple[int, int]]:
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = row + dr, col + dc
            if 1 <= r <= side and 1 <= c <= side:
                yield r, c


def neighbors(node: TopologyNode, spec: TopologySpec) -> list[TopologyNode]:
    """Successors of a node in the next layer: same-level conv halo,
    up-edge duplicates plus halo, and pool parent plus halo."""
    if node.layer >= spec.layers:
        return []
    out = []
    side = spec.side(node.level)
    if not (1 <= node.row <= side and 1 <= node.col <= side):
        raise ValueError(f"node {node} outside its grid")
    for r, c in _halo(node.row, node.col, side):
        out.append(TopologyNode(node.layer + 1, node.level, r, c))
    if node.level < spec.levels:
        fine = spec.side(node.level + 1)
        targets = set()
        for r in (2 * node.row - 1, 2 * node.row):
            for c in (2 * node.col - 1, 2 * node.col):
                targets.update(_halo(r, c, fine))
        for r, c in sorted(targets):
            out.append(TopologyNode(node.layer + 1, node.level + 1, r, c))
    if node.level > 1:
        coarse = spec.side(node.level - 1)
        pr, pc = (node.row + 1) // 2, (node.col + 1) // 2
        for r, c in _halo(pr, pc, coarse):
            out.append(TopologyNode(node.layer + 1, node.level - 1, r, c))
    return out


def _dilate(mask: np.ndarray) -> np.ndarray:
    """3x3 binary dilation via shifted ORs."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    col = out.copy()
    out[:, 1:] |= col[:, :-1]
    out[:, :-1] |= col[:, 1:]
    return out


def _up(mask: np.ndarray) -> np.ndarray:
    return mask.repeat(2, axis=0).repeat(2, axis=1)


def _pool(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // 2, 2, w // 2, 2).any(axis=(1, 3))


def reachable(spec: TopologySpec, source: TopologyNode) -> ReachSet:
    """Exact layer-by-layer BFS from the source node."""
    grids: dict[tuple[int, int], np.ndarray] = {}
    current = {lv: np.zeros((spec.side(lv), spec.side(lv)), dtype=bool)
               for lv in range(1, spec.levels + 1)}
    current[source.level][source.row - 1, source.col - 1] = True
    for lv in range(1, spec.levels + 1):
        grids[(source.layer, lv)] = current[lv].copy()
    for layer in range(source.layer + 1, spec.layers + 1):
        nxt = {}
        for lv in range(1, spec.levels + 1):
            mask = _dilate(current[lv])
            if lv > 1:
                mask |= _dilate(_up(current[lv - 1]))
            if lv < spec.levels:
                mask |= _dilate(_pool(current[lv + 1]))
            nxt[lv] = mask
        current = nxt
        for lv in range(1, spec.levels + 1):
            grids[(layer, lv)] = current[lv].copy()
    return ReachSet(spec, grids)


def reachable_bfs(spec: TopologySpec, source: TopologyNode) -> ReachSet:
    """Queue-based BFS over explicit node successors; cross-check oracle."""
    grids = {(layer, lv): np.zeros((spec.side(lv), spec.side(lv)), dtype=bool)
             for layer in range(source.layer, spec.layers + 1)
             for lv in range(1, spec.levels + 1)}
    grids[(source.layer, source.level)][source.row - 1, source.col - 1] = True
    frontier = [source]
    while frontier:
        nxt = []
        for node in frontier:
            for succ in neighbors(node, spec):
                grid = grids[(succ.layer, succ.level)]
                if not grid[succ.row - 1, succ.col - 1]:
                    grid[succ.row - 1, succ.col - 1] = True
                    nxt.append(succ)
        frontier = nxt
    return ReachSet(spec, {key: g for key, g in grids.items()})


def reach_bound(layer: int, level: int) -> int:
    """Analytic lower-bound box side at (layer m, level n), m >= n."""
    return (layer - level + 2) * 2 ** (level - 1) - 1


def baseline_extent(layers: int) -> int:
    """Corner reach extent of a single-grid 3x3 conv stack: one per layer."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    return layers


@dataclass
class RoutingRow:
    layer: int
    level: int
    bound: int
    actual_extent: int
    contains_bound: bool
    first_missing: tuple[int, int] | None = None


@dataclass
class RoutingReport:
    rows: list[RoutingRow]

    @property
    def ok(self) -> bool:
        return all(r.contains_bound for r in self.rows)


def verify_prop1(spec: TopologySpec, m_max: int, n_max: int) -> RoutingReport:
    """Check box containment of the analytic bound for all n <= m.

    The BFS reach set must contain the full box [1, bound]^2; the report
    also carries the largest fully covered box for comparison.
    """
    if not (m_max >= n_max >= 1):
        raise ValueError("need m_max >= n_max >= 1")
    if spec.layers < m_max or spec.levels < n_max:
        raise ValueError("topology smaller than the requested verification range")
    for n in range(1, n_max + 1):
        need = reach_bound(m_max, n)
        if spec.side(n) < need:
            raise ValueError(f"level {n} side {spec.side(n)} below bound {need}")
    reach = reachable(spec, TopologyNode(1, 1, 1, 1))
    rows = []
    for m in range(1, m_max + 1):
        for n in range(1, min(m, n_max) + 1):
            bound = reach_bound(m, n)
            grid = reach.grids[(m, n)]
            box = grid[:bound, :bound]
            contains = bool(box.all())
            first_missing = None
            if not contains:
                miss = np.argwhere(~box)[0]
                first_missing = (int(miss[0]) + 1, int(miss[1]) + 1)
            rows.append(RoutingRow(m, n, bound, reach.box_extent(m, n),
                                   contains, first_missing))
    return RoutingReport(rows)


def write_report_csv(path, report: RoutingReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["m", "n", "bound", "actual_max_extent", "contains_bound"])
        for row in report.rows:
            writer.writerow([row.layer, row.level, row.bound, row.actual_extent,
                             str(row.contains_bound).lower()])


def reach_overlay(reach: ReachSet, layer: int, level: int) -> np.ndarray:
    """(h, w, 3) uint8 image: reached cells in blue, others white."""
    grid = reach.grids[(layer, level)]
    img = np.full(grid.shape + (3,), 255, dtype=np.uint8)
    img[grid] = (40, 90, 235)
    return img

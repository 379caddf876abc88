"""Maze navigation: grid graph from wall geometry, BFS solving, step collapse.

START and END are the cells holding the two geometry fiducials. A "step" is
a maximal straight run of the solved path, the unit in which an operator
drives the bead corridor by corridor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .world import WorldGeometry, cell_center, cell_of, free_neighbors, wall_grid

# neighbor probe order: +x, +y, -x, -y (deterministic tie-breaking)
_MOVES = ((1, 0), (0, 1), (-1, 0), (0, -1))


class MazeError(ValueError):
    pass


class NoPathError(MazeError):
    pass


@dataclass(frozen=True)
class MazeGraph:
    origin: tuple[float, float]      # mm of cell (0, 0) corner
    cell_mm: float
    cols: int
    rows: int
    adjacency: dict                  # cell -> tuple of neighbor cells
    start: tuple[int, int]
    end: tuple[int, int]

    @classmethod
    def from_geometry(cls, geom: WorldGeometry) -> "MazeGraph":
        origin, cell, cols, rows, blocked = wall_grid(geom)
        start = cell_of(origin, cell, geom.fiducials[0])
        end = cell_of(origin, cell, geom.fiducials[1])
        for name, c in (("START", start), ("END", end)):
            if not (0 <= c[0] < cols and 0 <= c[1] < rows):
                raise MazeError(f"{name} fiducial outside the maze grid: {c}")
        if start == end:
            # legal: solve_maze returns no steps
            pass
        adjacency = {}
        for i in range(cols):
            for j in range(rows):
                nbrs = []
                for di, dj in _MOVES:
                    cand = (i + di, j + dj)
                    if cand in free_neighbors((i, j), cols, rows, blocked):
                        nbrs.append(cand)
                adjacency[(i, j)] = tuple(nbrs)
        return cls(origin, cell, cols, rows, adjacency, start, end)

    def center_mm(self, ij):
        return cell_center(self.origin, self.cell_mm, ij)

    def dead_ends(self):
        return [c for c, nbrs in self.adjacency.items() if len(nbrs) == 1
                and c not in (self.start, self.end)]


def shortest_cells(graph: MazeGraph):
    """BFS cell path START..END inclusive; NoPathError when unreachable."""
    if graph.start == graph.end:
        return [graph.start]
    parent = {graph.start: None}
    q = deque([graph.start])
    while q:
        cur = q.popleft()
        if cur == graph.end:
            path = [cur]
            while parent[cur] is not None:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        for nb in graph.adjacency[cur]:
            if nb not in parent:
                parent[nb] = cur
                q.append(nb)
    raise NoPathError(f"END {graph.end} unreachable from START {graph.start}")


def collapse_straight(cells):
    """Waypoints at direction changes: one entry per straight step."""
    if len(cells) < 2:
        return []
    waypoints = []
    direction = None
    for a, b in zip(cells, cells[1:]):
        d = (b[0] - a[0], b[1] - a[1])
        if d != direction:
            if direction is not None:
                waypoints.append(a)
            direction = d
    waypoints.append(cells[-1])
    return waypoints


def solve_maze(graph: MazeGraph):
    """Straight-step waypoint cells from START to END (empty when equal)."""
    return collapse_straight(shortest_cells(graph))

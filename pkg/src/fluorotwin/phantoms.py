"""Builders for the two bundled phantom geometries.

The shipped scenarios/*.geometry.json files are generated from these
functions; a test keeps them in sync. The maze is carved as a spanning tree
over an 8x6 grid, so the START-to-END route is unique and its straight-run
count is fixed by construction (seven steps).
"""

from __future__ import annotations

import math

TRUNK_LENGTH_MM = 186.0
TRUNK_WIDTH_MM = 12.0
BRANCH_LENGTH_MM = 60.0
BRANCH_START_WIDTH_MM = 6.0
BRANCH_END_WIDTHS_MM = (3.0, 2.0, 1.0)
BRANCH_ANGLES_RAD = (0.45, 0.0, -0.45)

MAZE_COLS = 8
MAZE_ROWS = 6
MAZE_CELL_MM = 20.0
MAZE_START = (0, 0)
MAZE_END = (7, 5)

# the seven-straight-step route the maze is carved around
_MAZE_MAIN_PATH = [
    (0, 0), (0, 1), (0, 2), (0, 3),
    (1, 3), (2, 3),
    (2, 2), (2, 1),
    (3, 1), (4, 1), (5, 1),
    (5, 2), (5, 3), (5, 4),
    (6, 4), (7, 4),
    (7, 5),
]


def build_branched_phantom() -> dict:
    """Straight trunk with three conical branches fanning from its end."""
    junction = (TRUNK_LENGTH_MM, 0.0)
    channels = [{
        "points": [[0.0, 0.0], [TRUNK_LENGTH_MM, 0.0]],
        "widths": [TRUNK_WIDTH_MM, TRUNK_WIDTH_MM],
    }]
    for angle, end_width in zip(BRANCH_ANGLES_RAD, BRANCH_END_WIDTHS_MM):
        end = (junction[0] + BRANCH_LENGTH_MM * math.cos(angle),
               junction[1] + BRANCH_LENGTH_MM * math.sin(angle))
        channels.append({
            "points": [[junction[0], junction[1]], [end[0], end[1]]],
            "widths": [BRANCH_START_WIDTH_MM, end_width],
        })
    return {
        "units": "mm",
        "channels": channels,
        "walls": [],
        "fiducials": [[0.0, 0.0], [TRUNK_LENGTH_MM, 0.0]],
        "reference_length_mm": TRUNK_LENGTH_MM,
    }


def _carve_tree():
    """Passage set (frozenset cell pairs) forming a spanning tree."""
    passages = set()
    carved = [_MAZE_MAIN_PATH[0]]
    carved_set = {_MAZE_MAIN_PATH[0]}
    for a, b in zip(_MAZE_MAIN_PATH, _MAZE_MAIN_PATH[1:]):
        passages.add(frozenset((a, b)))
        carved.append(b)
        carved_set.add(b)

    # attach every remaining cell by exactly one edge; scanning carved cells
    # in insertion order grows corridor-like dead ends off the main path
    total = MAZE_COLS * MAZE_ROWS
    moves = ((1, 0), (0, 1), (-1, 0), (0, -1))
    while len(carved) < total:
        progressed = False
        for cell in list(carved):
            for di, dj in moves:
                nb = (cell[0] + di, cell[1] + dj)
                if (0 <= nb[0] < MAZE_COLS and 0 <= nb[1] < MAZE_ROWS
                        and nb not in carved_set):
                    passages.add(frozenset((cell, nb)))
                    carved.append(nb)
                    carved_set.add(nb)
                    progressed = True
                    break
            if progressed:
                break
        if not progressed:
            raise AssertionError("maze carving stalled")
    return passages


def build_maze() -> dict:
    """Closed 8x6 maze; fiducials mark the START and END cell centers."""
    s = MAZE_CELL_MM
    passages = _carve_tree()
    walls = []
    for i in range(MAZE_COLS + 1):          # vertical edges
        for j in range(MAZE_ROWS):
            open_edge = frozenset(((i - 1, j), (i, j))) in passages
            if not open_edge:
                walls.append([i * s, j * s, i * s, (j + 1) * s])
    for j in range(MAZE_ROWS + 1):          # horizontal edges
        for i in range(MAZE_COLS):
            open_edge = frozenset(((i, j - 1), (i, j))) in passages
            if not open_edge:
                walls.append([i * s, j * s, (i + 1) * s, j * s])

    start_c = ((MAZE_START[0] + 0.5) * s, (MAZE_START[1] + 0.5) * s)
    end_c = ((MAZE_END[0] + 0.5) * s, (MAZE_END[1] + 0.5) * s)
    return {
        "units": "mm",
        "channels": [],
        "walls": walls,
        "fiducials": [[start_c[0], start_c[1]], [end_c[0], end_c[1]]],
        "reference_length_mm": math.hypot(end_c[0] - start_c[0],
                                          end_c[1] - start_c[1]),
    }

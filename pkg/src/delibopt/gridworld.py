"""Gridworld layouts and their MDPs: four-rooms and corridor (intersection) mazes."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .mdp import Mdp, ValidationError

# N, S, E, W
ACTIONS = ((-1, 0), (1, 0), (0, 1), (0, -1))
ACTION_NAMES = "NSEW"

FOUR_ROOMS = """\
#############
#S    #     #
#     #     #
#           #
#     #     #
#     #     #
## ####     #
#     ### ###
#     #     #
#     #     #
#           #
#     #    G#
#############
"""

Cell = tuple[int, int]


@dataclass(frozen=True)
class GridLayout:
    rows: int
    cols: int
    walls: frozenset
    goal: Cell | None
    start: Cell | None = None
    slip: float = 1.0 / 3.0
    step_reward: float = 0.0
    goal_reward: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.slip < 1.0:
            raise ValidationError(f"slip must lie in [0, 1), got {self.slip}")
        cells = self.walkable_cells()
        if not cells:
            raise ValidationError("layout has no walkable cells")
        for name, cell in (("goal", self.goal), ("start", self.start)):
            if cell is not None and cell not in self._index:
                raise ValidationError(f"{name} {cell} is not a walkable cell")
        if len(self._reachable(cells[0])) != len(cells):
            raise ValidationError("walkable cells are not connected")

    @classmethod
    def from_ascii(cls, text: str, **kwargs) -> "GridLayout":
        """Parse '#' wall, '.' or ' ' floor, 'G' goal, 'S' start."""
        lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip()]
        cols = max(len(ln) for ln in lines)
        walls, goal, start = set(), None, None
        for r, line in enumerate(lines):
            for c, ch in enumerate(line.ljust(cols, "#")):
                if ch == "#":
                    walls.add((r, c))
                elif ch == "G":
                    goal = (r, c)
                elif ch == "S":
                    start = (r, c)
                elif ch not in ". ":
                    raise ValidationError(f"unknown layout character {ch!r} at {(r, c)}")
        return cls(len(lines), cols, frozenset(walls), goal, start, **kwargs)

    @classmethod
    def load(cls, path, **kwargs) -> "GridLayout":
        return cls.from_ascii(Path(path).read_text(), **kwargs)

    def to_ascii(self) -> str:
        out = []
        for r in range(self.rows):
            row = []
            for c in range(self.cols):
                cell = (r, c)
                if cell in self.walls:
                    row.append("#")
                elif cell == self.goal:
                    row.append("G")
                elif cell == self.start:
                    row.append("S")
                else:
                    row.append(".")
            out.append("".join(row))
        return "\n".join(out) + "\n"

    def walkable_cells(self) -> list[Cell]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)
                if (r, c) not in self.walls]

    @cached_property
    def _index(self) -> dict:
        return {cell: i for i, cell in enumerate(self.walkable_cells())}

    def state_of(self, cell: Cell) -> int:
        return self._index[tuple(cell)]

    def cell_of(self, state: int) -> Cell:
        return self._cells[state]

    @cached_property
    def _cells(self) -> list:
        return self.walkable_cells()

    def neighbors(self, cell: Cell) -> list[Cell]:
        r, c = cell
        out = []
        for dr, dc in ACTIONS:
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < self.rows and 0 <= nxt[1] < self.cols and nxt not in self.walls:
                out.append(nxt)
        return out

    def _reachable(self, root: Cell) -> set:
        seen, queue = {root}, deque([root])
        while queue:
            for nxt in self.neighbors(queue.popleft()):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    def intersections(self) -> set:
        """Walkable cells with at least three walkable neighbours."""
        return {cell for cell in self.walkable_cells() if len(self.neighbors(cell)) >= 3}

    def to_mdp(self, gamma: float = 0.99) -> Mdp:
        cells = self.walkable_cells()
        index = {cell: i for i, cell in enumerate(cells)}
        n = len(cells)
        P = np.zeros((n, len(ACTIONS), n))
        R = np.zeros((n, len(ACTIONS)))
        goal = index.get(self.goal) if self.goal is not None else None
        for s, (r, c) in enumerate(cells):
            if s == goal:
                P[s, :, s] = 1.0
                continue
            moves = []
            for dr, dc in ACTIONS:
                nxt = (r + dr, c + dc)
                moves.append(index.get(nxt, s))
            for a in range(len(ACTIONS)):
                P[s, a, moves[a]] += 1.0 - self.slip
                for b in range(len(ACTIONS)):
                    P[s, a, moves[b]] += self.slip / len(ACTIONS)
            R[s] = self.step_reward
            if goal is not None:
                R[s] += self.goal_reward * P[s, :, goal]
        if self.start is not None:
            init = np.zeros(n)
            init[index[self.start]] = 1.0
        else:
            init = np.ones(n)
            if goal is not None:
                init[goal] = 0.0
            init /= init.sum()
        return Mdp(P, R, gamma, init)


def four_rooms_layout(slip: float = 1.0 / 3.0, **kwargs) -> GridLayout:
    return GridLayout.from_ascii(FOUR_ROOMS, slip=slip, **kwargs)


def build_four_rooms(slip: float = 1.0 / 3.0, gamma: float = 0.99) -> Mdp:
    return four_rooms_layout(slip).to_mdp(gamma)


def ladder_layout(n_horizontal: int = 3, n_vertical: int = 3, spacing: int = 4,
                  slip: float = 0.0, **kwargs) -> GridLayout:
    """Grid of straight corridors; crossings away from the corners are intersections.

    Start sits in the top-left corner and the goal in the bottom-right corner.
    """
    if n_horizontal < 2 or n_vertical < 2 or spacing < 2:
        raise ValidationError("ladder needs >= 2 corridors each way and spacing >= 2")
    rows = 2 + (n_horizontal - 1) * spacing + 1
    cols = 2 + (n_vertical - 1) * spacing + 1
    corridor_rows = {1 + i * spacing for i in range(n_horizontal)}
    corridor_cols = {1 + j * spacing for j in range(n_vertical)}
    walls = set()
    for r in range(rows):
        for c in range(cols):
            inside = 0 < r < rows - 1 and 0 < c < cols - 1
            if not inside or (r not in corridor_rows and c not in corridor_cols):
                walls.add((r, c))
    return GridLayout(rows, cols, frozenset(walls), goal=(rows - 2, cols - 2),
                      start=(1, 1), slip=slip, **kwargs)


def plus_layout(arm: int = 2, slip: float = 0.0, **kwargs) -> GridLayout:
    """A single crossing: two corridors of half-length ``arm`` meeting at the centre."""
    size = 2 * arm + 3
    mid = size // 2
    walls = {(r, c) for r in range(size) for c in range(size)
             if not ((r == mid and 0 < c < size - 1) or (c == mid and 0 < r < size - 1))}
    return GridLayout(size, size, frozenset(walls), goal=(mid, size - 2),
                      start=(mid, 1), slip=slip, **kwargs)


def build_intersection_maze(layout: GridLayout, gamma: float = 0.99) -> Mdp:
    return layout.to_mdp(gamma)

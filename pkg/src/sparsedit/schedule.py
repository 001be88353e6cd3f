"""Timestep-wise pruning rate and the batch-consistent timestep sampler.

Timesteps are diffusion noise indices: ``t = 0`` is nearly clean, ``t = T - 1``
is the noisiest. Sampling walks ``t`` downward, so the pruning rate held at
``r_min`` for ``t < T/4`` covers the last quarter of denoising.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .grid import TokenGrid


def rate_from_grid(dense: TokenGrid, sparse: TokenGrid) -> float:
    """Pruning rate ``1 - M/N``."""
    if sparse.n > dense.n:
        raise ValueError(f"sparse grid {sparse} has more tokens than dense grid {dense}")
    return 1.0 - sparse.n / dense.n


def grid_from_rate(dense: TokenGrid, r: float, ladder: Sequence[TokenGrid]) -> TokenGrid:
    """Ladder entry whose rate is nearest ``r``; ties go to the grid with more tokens."""
    if not ladder:
        raise ValueError("grid ladder is empty")
    return min(ladder, key=lambda g: (abs(rate_from_grid(dense, g) - r), -g.n))


def square_ladder(dense: TokenGrid, r_min: float, r_max: float) -> tuple[TokenGrid, ...]:
    """Square grids from the one realising ``r_min`` down to the one realising ``r_max``."""
    sides = range(min(dense.h, dense.w), 0, -1)
    squares = [TokenGrid(s, s) for s in sides]
    hi = grid_from_rate(dense, r_min, squares).h
    lo = grid_from_rate(dense, r_max, squares).h
    return tuple(TokenGrid(s, s) for s in range(hi, lo - 1, -1))


@dataclass(frozen=True)
class Piece:
    start: int
    stop: int
    grid: TokenGrid

    def __len__(self) -> int:
        return self.stop - self.start

    def __contains__(self, t: int) -> bool:
        return self.start <= t < self.stop


@dataclass(frozen=True)
class PruneSchedule:
    """Pruning-rate range over ``T`` timesteps, quantised onto ``ladder``.

    ``ladder`` is ordered from most tokens (lowest rate) to fewest.
    """

    r_min: float
    r_max: float
    T: int
    dense: TokenGrid
    ladder: tuple[TokenGrid, ...]

    def __post_init__(self) -> None:
        if not 0.0 <= self.r_min < self.r_max < 1.0:
            raise ValueError(f"need 0 <= r_min < r_max < 1, got r_min={self.r_min}, r_max={self.r_max}")
        if self.T < 1:
            raise ValueError(f"T must be positive, got {self.T}")
        if not self.ladder:
            raise ValueError("grid ladder is empty")
        object.__setattr__(self, "ladder", tuple(TokenGrid.parse(g) for g in self.ladder))
        rates = [rate_from_grid(self.dense, g) for g in self.ladder]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"ladder rates must strictly increase, got {[round(r, 6) for r in rates]}")

    @classmethod
    def square(cls, r_min: float, r_max: float, T: int, dense: TokenGrid) -> "PruneSchedule":
        return cls(r_min, r_max, T, dense, square_ladder(dense, r_min, r_max))

    @classmethod
    def constant(cls, grid: TokenGrid, T: int, dense: TokenGrid) -> "PruneSchedule":
        """Single-grid schedule (no timestep dependence)."""
        r = rate_from_grid(dense, grid)
        return cls(r, r + 1e-9, T, dense, (grid,))

    def rate_at(self, t: int) -> float:
        return pruning_rate_at(self, t)

    def grid_at(self, t: int) -> TokenGrid:
        return grid_from_rate(self.dense, pruning_rate_at(self, t), self.ladder)

    @cached_property
    def pieces(self) -> tuple[Piece, ...]:
        return tuple(build_pieces(self))

    def piece_of(self, t: int) -> Piece:
        for piece in self.pieces:
            if t in piece:
                return piece
        raise ValueError(f"timestep {t} outside [0, {self.T})")

    def to_dict(self) -> dict:
        return {
            "r_min": self.r_min,
            "r_max": self.r_max,
            "T": self.T,
            "dense": [self.dense.h, self.dense.w],
            "ladder": [[g.h, g.w] for g in self.ladder],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneSchedule":
        return cls(float(d["r_min"]), float(d["r_max"]), int(d["T"]), TokenGrid.parse(d["dense"]),
                   tuple(TokenGrid.parse(g) for g in d["ladder"]))


def pruning_rate_at(s: PruneSchedule, t: int) -> float:
    """``r_min`` up to ``T/4``; above it the line through ``(T/4, r_min)`` and ``(T, r_max)``."""
    if not 0 <= t < s.T:
        raise ValueError(f"timestep {t} outside [0, {s.T})")
    T = s.T
    if 4 * t <= T:
        return s.r_min
    return ((4 * T - 4 * t) * s.r_min + (4 * t - T) * s.r_max) / (3 * T)


def build_pieces(s: PruneSchedule) -> list[Piece]:
    """Maximal runs of consecutive timesteps sharing one quantised grid."""
    pieces: list[Piece] = []
    start, current = 0, s.grid_at(0)
    for t in range(1, s.T):
        g = s.grid_at(t)
        if g != current:
            pieces.append(Piece(start, t, current))
            start, current = t, g
    pieces.append(Piece(start, s.T, current))
    return pieces


def sample_timestep_batch(s: PruneSchedule, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, TokenGrid]:
    """Draw ``batch`` timesteps that all share one grid.

    A piece is chosen with probability proportional to its length, then the
    timesteps are uniform within it, so each returned ``t`` is marginally
    uniform on ``[0, T)``. Pass a generator from
    ``rng_stream(seed, "timesteps", step, worker)`` to key the draw.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    pieces = s.pieces
    lengths = np.array([len(p) for p in pieces], dtype=np.float64)
    piece = pieces[rng.choice(len(pieces), p=lengths / lengths.sum())]
    ts = rng.integers(piece.start, piece.stop, size=batch)
    return ts, piece.grid

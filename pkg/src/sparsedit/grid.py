"""Spatial token layouts."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True, order=True)
class TokenGrid:
    """An ``h x w`` arrangement of tokens, flattened row-major."""

    h: int
    w: int

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1:
            raise ValueError(f"grid extents must be positive, got {self.h}x{self.w}")

    @property
    def n(self) -> int:
        return self.h * self.w

    def fits_in(self, other: "TokenGrid") -> bool:
        return self.h <= other.h and self.w <= other.w

    def transpose(self) -> "TokenGrid":
        return TokenGrid(self.w, self.h)

    def __str__(self) -> str:
        return f"{self.h}x{self.w}"

    @classmethod
    def parse(cls, value) -> "TokenGrid":
        """Accept ``TokenGrid``, ``"6x6"``, ``6`` (square) or ``[h, w]``."""
        if isinstance(value, TokenGrid):
            return value
        if isinstance(value, int):
            return cls(value, value)
        if isinstance(value, str):
            h, _, w = value.lower().partition("x")
            return cls(int(h), int(w or h))
        h, w = value
        return cls(int(h), int(w))

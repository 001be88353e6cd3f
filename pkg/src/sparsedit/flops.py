"""Analytic FLOPs model for dense DiT and SparseDiT.

Two conventions are supported:

* ``"2·MAC"``: two FLOPs per multiply-accumulate plus ``ELEMENTWISE_COST``
  per element of softmax, layer norm and activations, and one per element for
  mean/adaptive pooling.
* ``"MAC"``: multiply-accumulates of matrix products only. This is the unit
  of the commonly quoted DiT "GFLOPs" figures (DiT-XL/2 at 256px is
  118.6 in these units).

The counts here are written out by hand; the test-suite checks them against
what the primitives in :mod:`sparsedit.nn_core` actually record during a
forward pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .grid import TokenGrid
from .network import ModelConfig
from .nn_core import ELEMENTWISE_COST as E
from .schedule import PruneSchedule

CONVENTIONS = ("2·MAC", "MAC")
_ALIASES = {"2*MAC": "2·MAC", "2MAC": "2·MAC", "2xMAC": "2·MAC"}


def _convention(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in CONVENTIONS:
        raise ValueError(f"unknown FLOPs convention {name!r}; expected one of {CONVENTIONS}")
    return name


@dataclass(frozen=True)
class Cost:
    macs: int = 0
    elementwise: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.macs + other.macs, self.elementwise + other.elementwise)

    def flops(self, convention: str = "2·MAC") -> int:
        return self.macs if _convention(convention) == "MAC" else 2 * self.macs + self.elementwise


def linear_cost(rows: int, c_in: int, c_out: int) -> Cost:
    return Cost(rows * c_in * c_out)


def count_linear(rows: int, c_in: int, c_out: int, convention: str = "2·MAC") -> int:
    return linear_cost(rows, c_in, c_out).flops(convention)


def _adaln(c: int, chunks: int) -> Cost:
    return Cost(c * chunks * c, E * c)


def _mlp(n: int, c: int, hidden: int) -> Cost:
    return Cost(2 * n * c * hidden, E * n * c + E * n * hidden)  # pre-norm + GELU


def _attention(a: int, b: int, c: int, heads: int) -> Cost:
    """q on ``a`` tokens, k/v on ``b`` tokens, scores, softmax, weighted sum, output."""
    return Cost(a * c * c + 2 * b * c * c + 2 * a * b * c + a * c * c, E * heads * a * b)


def block_cost(kind: str, n: int, m: int, c: int, heads: int, mlp_ratio: float = 4.0) -> Cost:
    """Cost of one block on a single sample with ``n`` dense and ``m`` sparse tokens."""
    if m > n:
        raise ValueError(f"sparse token count {m} exceeds dense count {n}")
    hidden = int(c * mlp_ratio)
    base = _adaln(c, 6)
    if kind == "dense":
        return base + Cost(0, E * n * c) + _attention(n, n, c, heads) + _mlp(n, c, hidden)
    if kind == "sparse":
        return block_cost("dense", m, m, c, heads, mlp_ratio)
    if kind == "pooling":
        # value projection, mean over tokens, output projection of the single mean token
        return base + Cost(n * c * c + c * c, E * n * c + n * c) + _mlp(n, c, hidden)
    if kind == "generate":
        pool = Cost(0, n * c) if m != n else Cost()
        return base + pool + Cost(0, E * m * c + E * n * c) + _attention(m, n, c, heads) + _mlp(m, c, hidden)
    if kind == "recover":
        merge = Cost(2 * n * c * c)
        return base + merge + Cost(0, E * n * c + E * m * c) + _attention(n, m, c, heads) + _mlp(n, c, hidden)
    raise ValueError(f"unknown block kind {kind!r}")


def count_block(kind: str, n: int, m: int, c: int, heads: int, mlp_ratio: float = 4.0,
                convention: str = "2·MAC") -> int:
    return block_cost(kind, n, m, c, heads, mlp_ratio).flops(convention)


def merge_overhead(cfg: ModelConfig) -> Cost:
    """Extra cost of the SDTM plumbing at ``M == N`` relative to plain dense blocks
    (the two merge projections per recovery block)."""
    n, c = cfg.grid.n, cfg.hidden
    return Cost(len(cfg.sdtm) * 2 * n * c * c)


def layer_costs(cfg: ModelConfig, grid: TokenGrid | None = None) -> list[tuple[str, Cost]]:
    """Per-layer costs of one forward pass on one sample."""
    n = cfg.grid.n
    m = (grid or cfg.grid).n
    c = cfg.hidden
    p2 = cfg.patch * cfg.patch
    layers = [
        ("embed", linear_cost(n, p2 * cfg.in_channels, c)),
        ("condition", Cost(256 * c + c * c, E * c)),
    ]
    for i, kind in enumerate(cfg.block_kinds):
        layers.append((f"blocks.{i}.{kind}", block_cost(kind, n, m, c, cfg.heads, cfg.mlp_ratio)))
    layers.append(("final", _adaln(c, 2) + Cost(0, E * n * c) + linear_cost(n, c, p2 * cfg.out_channels)))
    return layers


@dataclass
class FlopsReport:
    rows: list[tuple[str, int, int]]
    per_timestep: dict[int, int]
    schedule_average: float
    convention: str
    per_layer: list[tuple[str, float]] = field(default_factory=list)

    @property
    def gflops(self) -> float:
        return self.schedule_average / 1e9

    def summary(self) -> str:
        return (f"schedule_average_gflops={self.gflops:.4f} convention={self.convention} "
                f"timesteps={len(self.per_timestep)}")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer", "t", "flops"])
            writer.writerows(self.rows)


def count_model(
    cfg: ModelConfig,
    schedule: PruneSchedule | Mapping[int, TokenGrid] | Callable[[int], TokenGrid] | None = None,
    *,
    T: int | None = None,
    convention: str = "2·MAC",
    cfg_doubling: bool = False,
) -> FlopsReport:
    """FLOPs per timestep and averaged over the schedule (one forward per step,
    two with ``cfg_doubling``)."""
    convention = _convention(convention)
    if isinstance(schedule, PruneSchedule):
        grid_at, T = schedule.grid_at, schedule.T
    elif isinstance(schedule, Mapping):
        grid_at, T = schedule.__getitem__, T or len(schedule)
    elif callable(schedule):
        grid_at = schedule
    else:
        grid_at = lambda t: cfg.grid  # noqa: E731
    T = T or 1
    factor = 2 if cfg_doubling else 1

    cache: dict[TokenGrid, list[tuple[str, int]]] = {}
    rows: list[tuple[str, int, int]] = []
    per_timestep: dict[int, int] = {}
    layer_sum: dict[str, int] = {}
    for t in range(T):
        grid = TokenGrid.parse(grid_at(t))
        if grid not in cache:
            cache[grid] = [(name, factor * cost.flops(convention)) for name, cost in layer_costs(cfg, grid)]
        total = 0
        for name, flops in cache[grid]:
            rows.append((name, t, flops))
            layer_sum[name] = layer_sum.get(name, 0) + flops
            total += flops
        per_timestep[t] = total
    average = sum(per_timestep.values()) / T
    per_layer = [(name, s / T) for name, s in layer_sum.items()]
    return FlopsReport(rows, per_timestep, average, convention, per_layer)

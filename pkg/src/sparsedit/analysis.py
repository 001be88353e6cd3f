"""Attention-variance profiling and the uniform-attention ablation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .diffusion import NoiseSchedule, q_sample
from .grid import TokenGrid
from .network import Probe, SparseDiT
from .rng import rng_stream
from .schedule import PruneSchedule


def attention_row_variance(attn: Tensor) -> float:
    """Mean over batch, heads and query rows of the (population) variance across keys."""
    return attn.var(dim=-1, unbiased=False).mean().item()


@dataclass
class VarianceProfile:
    layers: list[str]
    timesteps: list[int]
    raw: np.ndarray  # (layers, timesteps)

    @property
    def normalized(self) -> np.ndarray:
        peak = self.raw.max(axis=0, keepdims=True)
        return np.divide(self.raw, peak, out=np.zeros_like(self.raw), where=peak > 0)

    def rows(self) -> list[tuple[str, int, float, float]]:
        norm = self.normalized
        return [(layer, t, float(self.raw[i, j]), float(norm[i, j]))
                for j, t in enumerate(self.timesteps) for i, layer in enumerate(self.layers)]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer", "t", "raw", "normalized"])
            writer.writerows(self.rows())


def _grid_for(model: SparseDiT, schedule: PruneSchedule | None, t: int) -> TokenGrid | None:
    if not model.cfg.sdtm:
        return None
    if schedule is None:
        raise ValueError("a pruning schedule is needed to pick sparse grids for this model")
    return schedule.grid_at(t)


def layer_names(model: SparseDiT) -> list[str]:
    return [f"blocks.{i}.{kind}" for i, kind in enumerate(model.kinds)]


@torch.no_grad()
def attn_variance_profile(model: SparseDiT, x0: Tensor, labels: Tensor, timesteps: list[int],
                          ns: NoiseSchedule, schedule: PruneSchedule | None = None,
                          seed: int = 0) -> VarianceProfile:
    """Attention-map variance of every layer at each noise level.

    ``x0`` is noised to each timestep with a seeded draw. Poolingformers report
    their implied uniform map (variance 0).
    """
    names = layer_names(model)
    raw = np.zeros((len(names), len(timesteps)))
    for j, t in enumerate(timesteps):
        eps = torch.as_tensor(rng_stream(seed, "profile-noise", t).standard_normal(tuple(x0.shape)), dtype=x0.dtype)
        x_t = q_sample(x0, t, eps, ns)
        seen: dict[int, float] = {}
        probe = Probe(on_attention=lambda i, attn: seen.__setitem__(i, attention_row_variance(attn)))
        model(x_t, torch.full((len(x0),), t, dtype=torch.int64), labels, _grid_for(model, schedule, t), probe)
        if not seen:
            raise ValueError("no attention layers were instrumented")
        for i, v in seen.items():
            raw[i, j] = v
    return VarianceProfile(names, list(timesteps), raw)


@dataclass
class AblationReport:
    k: int
    layers: list[str]
    layer_mse: list[float]
    final_mse: float

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer", "mse"])
            writer.writerows(zip(self.layers, self.layer_mse))
            writer.writerow(["output", self.final_mse])


@torch.no_grad()
def ablate_uniform_attention(model: SparseDiT, k: int, x: Tensor, t: Tensor, y: Tensor,
                             grid: TokenGrid | None = None) -> AblationReport:
    """Compare a normal forward with one whose first ``k`` attention maps are uniform.

    Overriding a poolingformer changes nothing, so when the first ``k`` layers
    are all poolingformers the two outputs must agree exactly.
    """
    n_layers = len(model.blocks)
    if not 0 <= k <= n_layers:
        raise ValueError(f"k={k} outside [0, {n_layers}]")

    def run(uniform: frozenset[int]) -> tuple[list[Tensor], Tensor]:
        outs: list[Tensor] = []
        out = model(x, t, y, grid, Probe(uniform=uniform, on_block=lambda i, o: outs.append(o)))
        return outs, out

    base_blocks, base = run(frozenset())
    abl_blocks, abl = run(frozenset(range(k)))
    if all(kind == "pooling" for kind in model.kinds[:k]) and not torch.equal(base, abl):
        raise AssertionError("overriding poolingformer attention changed the output")
    layer_mse = [torch.mean((a - b) ** 2).item() for a, b in zip(base_blocks, abl_blocks)]
    return AblationReport(k, layer_names(model), layer_mse, torch.mean((base - abl) ** 2).item())

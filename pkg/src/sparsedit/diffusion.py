"""Desk-scale DDPM training and DDPM/DDIM sampling on synthetic blob images."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import Tensor

from .grid import TokenGrid
from .network import Probe, SparseDiT
from .rng import rng_stream
from .schedule import PruneSchedule, sample_timestep_batch

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class NonFiniteSample(FloatingPointError):
    pass


# --------------------------------------------------------------------------- #
# Noise schedule
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self) -> None:
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must be a 1-D array in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T, dtype=np.float64))

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def _per_sample(values: np.ndarray, t, like: Tensor) -> Tensor:
    v = torch.as_tensor(np.asarray(values)[np.asarray(t)], dtype=like.dtype)
    return v.reshape(-1, *([1] * (like.dim() - 1))) if v.dim() else v


def q_sample(x0: Tensor, t, eps: Tensor, ns: NoiseSchedule) -> Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is an int or one per sample."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    ta = np.asarray(t)
    if np.any(ta < 0) or np.any(ta >= ns.T):
        raise ValueError(f"timestep out of range [0, {ns.T})")
    ab = _per_sample(ns.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# --------------------------------------------------------------------------- #
# Synthetic data
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SyntheticDataset:
    """Bright discs on a dark background; label ``k`` has ``k + 1`` discs.

    Pixels lie in ``[-1, 1]``. Disc centres are kept far enough apart that a
    threshold-and-label detector recovers the count.
    """

    size: int = 16
    channels: int = 1
    num_classes: int = 4
    radius: float = 1.6
    seed: int = 0

    def _image(self, count: int, rng: np.random.Generator) -> np.ndarray:
        r = self.radius
        lo, hi = r + 0.5, self.size - 1.5 - r
        min_sep = 2 * r + 2.5
        centres: list[np.ndarray] = []
        tries = 0
        while len(centres) < count:
            if tries == 50:  # early placements can block the rest; start over
                centres, tries = [], 0
            tries += 1
            cand = rng.uniform(lo, hi, size=2)
            if all(np.hypot(*(cand - c)) >= min_sep for c in centres):
                centres.append(cand)
        yy, xx = np.mgrid[0:self.size, 0:self.size].astype(np.float64)
        img = np.zeros((self.size, self.size))
        for cy, cx in centres:
            d = np.hypot(yy - cy, xx - cx)
            img = np.maximum(img, np.clip(r + 0.5 - d, 0.0, 1.0))
        return np.repeat((2 * img - 1)[..., None], self.channels, axis=-1)

    def sample(self, n: int, rng: np.random.Generator, labels: np.ndarray | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
        """``n`` images ``(n, H, W, C)`` and their labels."""
        if labels is None:
            labels = rng.integers(0, self.num_classes, size=n)
        images = np.stack([self._image(int(k) + 1, rng) for k in labels])
        return images, np.asarray(labels, dtype=np.int64)

    def batch(self, n: int, step: int) -> tuple[np.ndarray, np.ndarray]:
        return self.sample(n, rng_stream(self.seed, "data", step))


def count_blobs(img: np.ndarray, threshold: float = 0.0) -> int:
    """Connected bright regions (4-connectivity) above ``threshold``."""
    mask = np.asarray(img).reshape(img.shape[0], img.shape[1], -1).mean(axis=-1) > threshold
    return int(ndimage.label(mask)[1])


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #


@dataclass
class StepResult:
    step: int
    loss: float
    lr: float
    grid: TokenGrid
    timesteps: np.ndarray


def _activation_norms(model: SparseDiT, x: Tensor, t: Tensor, y: Tensor, grid: TokenGrid) -> dict[int, float]:
    norms: dict[int, float] = {}
    with torch.no_grad():
        model(x, t, y, grid, probe=Probe(on_block=lambda i, out: norms.__setitem__(i, out.norm().item())))
    return norms


def train_step(
    model: SparseDiT,
    optimizer: torch.optim.Optimizer,
    x0: Tensor,
    y: Tensor,
    ns: NoiseSchedule,
    schedule: PruneSchedule,
    step: int,
    seed: int = 0,
    worker: int = 0,
    class_dropout: float = 0.1,
) -> StepResult:
    """One epsilon-prediction MSE update on a batch that shares a single grid."""
    n = x0.shape[0]
    ts, grid = sample_timestep_batch(schedule, n, rng_stream(seed, "timesteps", step, worker))
    if any(schedule.grid_at(int(t)) != grid for t in ts):
        raise AssertionError(f"step {step}: batch timesteps map to more than one grid")
    noise_rng = rng_stream(seed, "train-noise", step, worker)
    eps = torch.as_tensor(noise_rng.standard_normal(x0.shape), dtype=x0.dtype)
    drop = noise_rng.random(n) < class_dropout
    y = torch.where(torch.as_tensor(drop), torch.full_like(y, model.null_label), y)
    t = torch.as_tensor(ts, dtype=torch.int64)
    x_t = q_sample(x0, ts, eps, ns)

    pred = model(x_t, t, y, grid)[..., : x0.shape[-1]]
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        norms = _activation_norms(model, x_t, t, y, grid)
        raise TrainingDiverged(f"non-finite loss at step {step} (grid {grid}); block output norms: {norms}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepResult(step, loss.item(), optimizer.param_groups[0]["lr"], grid, ts)


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    class_dropout: float = 0.1
    seed: int = 0


def train(model: SparseDiT, dataset: SyntheticDataset, ns: NoiseSchedule, schedule: PruneSchedule,
          cfg: TrainConfig, on_step: Callable[[StepResult], None] | None = None) -> list[StepResult]:
    """Adam training loop; fully determined by ``cfg.seed`` and ``dataset.seed``."""
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    history = []
    for step in range(cfg.steps):
        images, labels = dataset.batch(cfg.batch_size, step)
        result = train_step(model, optimizer, torch.as_tensor(images, dtype=dtype), torch.as_tensor(labels),
                            ns, schedule, step, seed=cfg.seed, class_dropout=cfg.class_dropout)
        history.append(result)
        if on_step is not None:
            on_step(result)
        if step % 50 == 0:
            log.info("step %d loss %.4f grid %s", step, result.loss, result.grid)
    model.eval()
    return history


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #


def cfg_predict(model: SparseDiT, x_t: Tensor, t: Tensor, y: Tensor, scale: float,
                grid: TokenGrid | None = None) -> Tensor:
    """Classifier-free guided noise prediction ``eps_u + scale * (eps_c - eps_u)``."""
    ch = x_t.shape[-1]
    if scale == 1.0:
        return model(x_t, t, y, grid)[..., :ch]
    eps_u = model(x_t, t, torch.full_like(y, model.null_label), grid)[..., :ch]
    if scale == 0.0:
        return eps_u
    eps_c = model(x_t, t, y, grid)[..., :ch]
    return eps_u + scale * (eps_c - eps_u)


@dataclass
class SampleTrace:
    grids: list[tuple[int, TokenGrid]] = field(default_factory=list)
    model_evals: int = 0


def _initial_noise(n: int, model: SparseDiT, seed: int) -> Tensor:
    h, w = model.cfg.input_size
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(rng_stream(seed, "init-noise").standard_normal((n, h, w, model.cfg.in_channels)),
                           dtype=dtype)


def _step_noise(seed: int, t: int, like: Tensor) -> Tensor:
    return torch.as_tensor(rng_stream(seed, "sample-noise", t).standard_normal(tuple(like.shape)), dtype=like.dtype)


def _check_finite(x: Tensor, t: int) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteSample(f"non-finite sampler state at t={t}")


def _eps(model, x, t, labels, schedule, cfg_scale, trace):
    grid = schedule.grid_at(t)
    if trace is not None:
        trace.grids.append((t, grid))
        trace.model_evals += 1
    tt = torch.full((x.shape[0],), t, dtype=torch.int64)
    return cfg_predict(model, x, tt, labels, cfg_scale, grid)


@torch.no_grad()
def ddpm_sample(model: SparseDiT, labels, ns: NoiseSchedule, schedule: PruneSchedule, seed: int = 0,
                cfg_scale: float = 1.0, trace: SampleTrace | None = None, x_T: Tensor | None = None) -> Tensor:
    """Ancestral sampling from ``t = T-1`` down to 0 with posterior variance
    ``beta_tilde``; each step runs the model at the schedule's grid for ``t``."""
    labels = torch.as_tensor(labels, dtype=torch.int64)
    x = _initial_noise(len(labels), model, seed) if x_T is None else x_T.clone()
    for t in range(ns.T - 1, -1, -1):
        eps = _eps(model, x, t, labels, schedule, cfg_scale, trace)
        beta, alpha, ab = ns.betas[t], ns.alphas[t], ns.alpha_bars[t]
        mean = (x - beta / np.sqrt(1 - ab) * eps) / np.sqrt(alpha)
        if t > 0:
            var = (1 - ns.alpha_bar_prev(t)) / (1 - ab) * beta
            x = mean + np.sqrt(var) * _step_noise(seed, t, x)
        else:
            x = mean
        _check_finite(x, t)
    return x


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly strided subset of ``[0, T)``, descending, always containing 0 and ``T-1``."""
    if steps < 1:
        raise ValueError(f"DDIM needs at least one step, got {steps}")
    if steps > T:
        raise ValueError(f"DDIM steps {steps} exceed T={T}")
    ts = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


@torch.no_grad()
def ddim_sample(model: SparseDiT, labels, ns: NoiseSchedule, schedule: PruneSchedule, steps: int,
                eta: float = 0.0, seed: int = 0, cfg_scale: float = 1.0, trace: SampleTrace | None = None,
                x_T: Tensor | None = None) -> Tensor:
    """DDIM over a strided timestep subset; grids are chosen from the original ``t``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    labels = torch.as_tensor(labels, dtype=torch.int64)
    x = _initial_noise(len(labels), model, seed) if x_T is None else x_T.clone()
    ts = ddim_timesteps(ns.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        eps = _eps(model, x, t, labels, schedule, cfg_scale, trace)
        ab = float(ns.alpha_bars[t])
        ab_prev = 1.0 if t_prev < 0 else float(ns.alpha_bars[t_prev])
        x0 = (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        sigma = eta * np.sqrt((1 - ab_prev) / (1 - ab)) * np.sqrt(1 - ab / ab_prev)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * _step_noise(seed, t, x)
        _check_finite(x, t)
    return x


# --------------------------------------------------------------------------- #
# Evaluation proxy
# --------------------------------------------------------------------------- #


def eval_proxy(samples: np.ndarray, dataset: SyntheticDataset, labels: np.ndarray | None = None,
               reference_size: int = 2048, threshold: float = 0.0) -> dict[str, float]:
    """Cheap sample-quality statistics against the generating distribution.

    ``moment_distance`` is ``|mean_s - mean_d| + |var_s - var_d|`` where each
    side averages the per-pixel mean/variance maps. ``count_accuracy`` is the
    fraction of samples whose detected blob count equals ``label + 1``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 64:
        raise ValueError(f"eval_proxy needs at least 64 samples, got {len(samples)}")
    ref, _ = dataset.sample(reference_size, rng_stream(dataset.seed, "eval-reference"))
    mean_gap = abs(samples.mean(axis=0).mean() - ref.mean(axis=0).mean())
    var_gap = abs(samples.var(axis=0).mean() - ref.var(axis=0).mean())
    stats = {
        "mean_gap": float(mean_gap),
        "var_gap": float(var_gap),
        "moment_distance": float(mean_gap + var_gap),
    }
    if labels is not None:
        counts = np.array([count_blobs(s, threshold) for s in samples])
        stats["count_accuracy"] = float(np.mean(counts == np.asarray(labels) + 1))
    return stats

"""Diffusion transformers with pooled bottom layers and sparse-dense token modules."""

from .checkpoint import (
    CheckpointError,
    export_checkpoint,
    import_dense_checkpoint,
    load_checkpoint,
    read_tensors,
    write_tensors,
)
from .diffusion import NoiseSchedule, SyntheticDataset, ddim_sample, ddpm_sample, train
from .flops import count_model
from .grid import TokenGrid
from .network import ModelConfig, SDTMLayout, SparseDiT, build_model, dit_b, dit_xl, sparse_dit_b, sparse_dit_xl, toy_config
from .schedule import PruneSchedule, sample_timestep_batch

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ModelConfig",
    "NoiseSchedule",
    "PruneSchedule",
    "SDTMLayout",
    "SparseDiT",
    "SyntheticDataset",
    "TokenGrid",
    "build_model",
    "count_model",
    "ddim_sample",
    "ddpm_sample",
    "dit_b",
    "dit_xl",
    "export_checkpoint",
    "import_dense_checkpoint",
    "load_checkpoint",
    "read_tensors",
    "sample_timestep_batch",
    "sparse_dit_b",
    "sparse_dit_xl",
    "toy_config",
    "train",
    "write_tensors",
]

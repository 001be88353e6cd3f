"""Named-tensor checkpoint files and the dense-DiT import mapping.

File layout (all offsets relative to the payload start)::

    SPARSEDIT-CKPT\\n
    <header length in bytes, decimal>\\n
    <header: UTF-8 JSON, sorted keys>
    <payload: raw little-endian tensors, packed back to back in entry order>

The header holds ``format_version``, ``endianness`` ("little"), free-form
``meta`` (model config, dtype, ...) and ``entries``: ``name``, ``shape``,
``dtype`` (``f32``/``f64``/``i64``), ``offset``, ``nbytes``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .network import ModelConfig, SparseDiT

MAGIC = b"SPARSEDIT-CKPT\n"
FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_TORCH_DTYPES = {"f32": torch.float32, "f64": torch.float64, "i64": torch.int64}


class CheckpointError(ValueError):
    def __init__(self, message: str, entry: str | None = None):
        super().__init__(f"{message} (entry {entry!r})" if entry else message)
        self.entry = entry


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset: int
    nbytes: int


@dataclass
class CheckpointManifest:
    entries: list[Entry]
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    endianness: str = "little"

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __getitem__(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def header_bytes(self) -> bytes:
        header = {
            "format_version": self.format_version,
            "endianness": self.endianness,
            "meta": self.meta,
            "entries": [
                {"name": e.name, "shape": list(e.shape), "dtype": e.dtype, "offset": e.offset, "nbytes": e.nbytes}
                for e in self.entries
            ],
        }
        return json.dumps(header, sort_keys=True, indent=1).encode()


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def write_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray], meta: dict | None = None
                  ) -> CheckpointManifest:
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        entries.append(Entry(name, tuple(arr.shape), tag, offset, len(data)))
        chunks.append(data)
        offset += len(data)
    manifest = CheckpointManifest(entries, dict(meta or {}))
    _validate(manifest, offset)
    header = manifest.header_bytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header)}\n".encode())
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    return manifest


def _validate(manifest: CheckpointManifest, payload_len: int) -> None:
    if manifest.format_version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {manifest.format_version}")
    if manifest.endianness != "little":
        raise CheckpointError(f"unsupported endianness {manifest.endianness!r}")
    seen: set[str] = set()
    expected = 0
    for e in manifest.entries:
        if e.name in seen:
            raise CheckpointError("duplicate entry name", e.name)
        seen.add(e.name)
        if e.dtype not in DTYPES:
            raise CheckpointError(f"unknown dtype {e.dtype!r}", e.name)
        if e.nbytes != math.prod(e.shape) * DTYPES[e.dtype].itemsize:
            raise CheckpointError(f"nbytes {e.nbytes} does not match shape {list(e.shape)} of {e.dtype}", e.name)
        if e.offset != expected:
            raise CheckpointError(f"offset {e.offset} breaks packing (expected {expected})", e.name)
        if e.offset + e.nbytes > payload_len:
            raise CheckpointError(f"payload truncated: entry ends at {e.offset + e.nbytes}, payload has {payload_len} bytes",
                                  e.name)
        expected = e.offset + e.nbytes
    if expected != payload_len:
        raise CheckpointError(f"payload has {payload_len - expected} trailing bytes")


def _parse(raw: bytes) -> tuple[CheckpointManifest, memoryview]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a SparseDiT checkpoint (bad magic)")
    rest = raw[len(MAGIC):]
    line, sep, rest = rest.partition(b"\n")
    if not sep or not line.isdigit():
        raise CheckpointError("malformed header length line")
    n = int(line)
    if len(rest) < n:
        raise CheckpointError("file truncated inside header")
    try:
        header = json.loads(rest[:n])
        entries = [Entry(d["name"], tuple(int(s) for s in d["shape"]), d["dtype"], int(d["offset"]), int(d["nbytes"]))
                   for d in header["entries"]]
        manifest = CheckpointManifest(entries, header.get("meta", {}), int(header["format_version"]),
                                      header["endianness"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    payload = memoryview(rest)[n:]
    _validate(manifest, len(payload))
    return manifest, payload


def read_manifest(path: str | Path) -> CheckpointManifest:
    return _parse(Path(path).read_bytes())[0]


def read_tensors(path: str | Path) -> tuple[CheckpointManifest, dict[str, torch.Tensor]]:
    manifest, payload = _parse(Path(path).read_bytes())
    tensors = {}
    for e in manifest.entries:
        arr = np.frombuffer(payload[e.offset:e.offset + e.nbytes], dtype=DTYPES[e.dtype]).reshape(e.shape)
        tensors[e.name] = torch.from_numpy(arr.copy())
    return manifest, tensors


def payload_bytes(path: str | Path) -> bytes:
    return bytes(_parse(Path(path).read_bytes())[1])


def _dtype_name(dtype: torch.dtype) -> str:
    return {torch.float32: "f32", torch.float64: "f64"}[dtype]


def export_checkpoint(model: SparseDiT, path: str | Path) -> CheckpointManifest:
    state = model.state_dict()
    meta = {"kind": "model", "model_config": model.cfg.to_dict(),
            "dtype": _dtype_name(next(iter(state.values())).dtype)}
    return write_tensors(path, state, meta)


def _model_from_state(cfg: ModelConfig, state: Mapping[str, torch.Tensor], dtype: torch.dtype) -> SparseDiT:
    model = SparseDiT(cfg, dtype=dtype)
    expected = model.state_dict()
    missing = set(expected) - set(state)
    extra = set(state) - set(expected)
    if missing or extra:
        name = sorted(missing or extra)[0]
        raise CheckpointError("checkpoint does not match model layout: "
                              f"{len(missing)} missing, {len(extra)} unexpected", name)
    for name, t in expected.items():
        if tuple(state[name].shape) != tuple(t.shape):
            raise CheckpointError(f"shape {list(state[name].shape)} != expected {list(t.shape)}", name)
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    return model


def load_checkpoint(path: str | Path, dtype: torch.dtype | None = None) -> SparseDiT:
    manifest, tensors = read_tensors(path)
    if manifest.meta.get("kind") != "model" or "model_config" not in manifest.meta:
        raise CheckpointError("checkpoint carries no model config")
    cfg = ModelConfig.from_dict(manifest.meta["model_config"])
    dtype = dtype or _TORCH_DTYPES[manifest.meta.get("dtype", "f32")]
    return _model_from_state(cfg, tensors, dtype)


# --------------------------------------------------------------------------- #
# Dense DiT -> SparseDiT
# --------------------------------------------------------------------------- #


def import_plan(cfg: ModelConfig, donor_names: list[str]) -> dict[str, tuple[str, slice | None] | str]:
    """Where every tensor of a ``cfg`` model comes from.

    Values are ``(donor_name, row_slice)`` for copied tensors (``row_slice`` is
    set only for the value slice of a fused qkv), or ``"zeros"``/``"identity"``
    for the merge weights. Block ``i`` of the donor feeds block ``i`` here.
    """
    c = cfg.hidden
    target = SparseDiT(cfg, dtype=torch.float32).state_dict()
    donor = set(donor_names)
    plan: dict[str, tuple[str, slice | None] | str] = {}
    for name in target:
        if name.endswith("merge.w1.weight"):
            plan[name] = "zeros"
        elif name.endswith("merge.w2.weight"):
            plan[name] = "identity"
        elif ".attn.v." in name:
            plan[name] = (name.replace(".attn.v.", ".attn.qkv."), slice(2 * c, 3 * c))
        else:
            plan[name] = (name, None)
    for name, src in plan.items():
        if isinstance(src, tuple) and src[0] not in donor:
            raise CheckpointError("dense checkpoint lacks a tensor required by the sparse layout "
                                  f"(needs {cfg.depth} blocks)", src[0])
    return plan


def import_dense_checkpoint(dense: str | Path, cfg: ModelConfig, dtype: torch.dtype | None = None) -> SparseDiT:
    """Build a SparseDiT from a dense DiT checkpoint.

    Poolingformers keep only the value slice of the donor's fused qkv (queries
    and keys are discarded); generate/recover blocks reuse the donor's q/k/v/o
    for their cross-attention; merges start at ``W1 = 0, W2 = I``; everything
    else is copied verbatim.
    """
    manifest, tensors = read_tensors(dense)
    donor_cfg = manifest.meta.get("model_config")
    if donor_cfg is not None:
        donor_cfg = ModelConfig.from_dict(donor_cfg)
        if donor_cfg.hidden != cfg.hidden:
            raise CheckpointError(f"width mismatch: dense checkpoint has hidden={donor_cfg.hidden}, "
                                  f"config has {cfg.hidden}")
        if donor_cfg.depth > cfg.depth:
            warnings.warn(f"dense checkpoint has {donor_cfg.depth} blocks, only the first {cfg.depth} are used",
                          stacklevel=2)
    dtype = dtype or _TORCH_DTYPES[manifest.meta.get("dtype", "f32")]
    state: dict[str, torch.Tensor] = {}
    for name, src in import_plan(cfg, manifest.names).items():
        if src == "zeros":
            state[name] = torch.zeros(cfg.hidden, cfg.hidden, dtype=dtype)
        elif src == "identity":
            state[name] = torch.eye(cfg.hidden, dtype=dtype)
        else:
            src_name, rows = src
            t = tensors[src_name]
            state[name] = t[rows].clone() if rows is not None else t
    return _model_from_state(cfg, state, dtype)

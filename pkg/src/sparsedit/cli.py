"""``sparsedit`` command line.

Every subcommand reads a YAML run config (``--config``), writes its artefacts
to ``--out`` and prints a one-line ``key=value`` summary. Failures print one
line, ``error: <kind>: <detail>``, to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .analysis import ablate_uniform_attention, attn_variance_profile
from .checkpoint import CheckpointError, export_checkpoint, import_dense_checkpoint, load_checkpoint, write_tensors
from .config import ConfigError, RunConfig, load_config
from .diffusion import SampleTrace, ddim_sample, ddpm_sample, eval_proxy, q_sample, train
from .flops import count_model
from .network import SparseDiT, build_model, merge_modules
from .rng import rng_stream

log = logging.getLogger("sparsedit")

SUBCOMMANDS = ("train", "sample", "flops", "import-ckpt", "attn-profile", "ablate-uniform-attn")
METRICS_HEADER = ["step", "loss", "lr", "grid"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # single-line errors instead of argparse's usage dump
        raise UsageError(message)


def _model(cfg: RunConfig, ckpt: str | None) -> SparseDiT:
    path = ckpt or cfg.checkpoint
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return load_checkpoint(path, cfg.torch_dtype)
    return build_model(cfg.model, cfg.seed, cfg.torch_dtype)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _images(cfg: RunConfig, n: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    images, labels = cfg.dataset().sample(n, rng_stream(seed, "cli-inputs"))
    return torch.as_tensor(images, dtype=cfg.torch_dtype), torch.as_tensor(labels)


def cmd_train(cfg: RunConfig, args) -> str:
    out = _out(args)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    model = _model(cfg, args.ckpt)
    metrics = out / "metrics.csv"
    new_file = not metrics.exists() or metrics.stat().st_size == 0
    with open(metrics, "a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(METRICS_HEADER)
        history = train(model, cfg.dataset(), cfg.noise_schedule(), cfg.prune_schedule(), cfg.train,
                        on_step=lambda r: writer.writerow([r.step, f"{r.loss:.8g}", f"{r.lr:.8g}", str(r.grid)]))
    export_checkpoint(model, out / "model.ckpt")
    cfg.dump(out / "run_config.json")
    losses = [r.loss for r in history]
    if losses:
        plotting.plot_loss([r.step for r in history], losses, out / "loss.svg")
    w = min(20, len(losses))
    first = float(np.mean(losses[:w])) if losses else float("nan")
    last = float(np.mean(losses[-w:])) if losses else float("nan")
    return f"steps={len(losses)} first_mean_loss={first:.6f} last_mean_loss={last:.6f} checkpoint={out / 'model.ckpt'}"


def cmd_sample(cfg: RunConfig, args) -> str:
    out = _out(args)
    sc = cfg.sample
    seed = sc.seed if args.seed is None else args.seed
    model = _model(cfg, args.ckpt)
    model.eval()
    labels = np.asarray(sc.labels if sc.labels is not None else [i % cfg.model.num_classes for i in range(sc.n)])
    ns, schedule = cfg.noise_schedule(), cfg.prune_schedule()
    trace = SampleTrace()
    if sc.sampler == "ddim":
        x = ddim_sample(model, labels, ns, schedule, sc.steps, sc.eta, seed, sc.cfg_scale, trace)
    else:
        x = ddpm_sample(model, labels, ns, schedule, seed, sc.cfg_scale, trace)
    samples = x.numpy()
    write_tensors(out / "samples.ckpt", {"samples": samples, "labels": labels.astype(np.int64)},
                  {"kind": "samples", "sampler": sc.sampler, "seed": seed})
    for i, img in enumerate(samples):
        plotting.write_pgm(img, out / f"sample_{i:03d}.pgm")
    with open(out / "grid_trace.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "t", "grid", "tokens"])
        writer.writerows((i, t, str(g), g.n) for i, (t, g) in enumerate(trace.grids))
    summary = f"samples={len(samples)} sampler={sc.sampler} model_evals={trace.model_evals}"
    if len(samples) >= 64:
        stats = eval_proxy(samples, cfg.dataset(), labels)
        (out / "eval.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        summary += " " + " ".join(f"{k}={v:.4f}" for k, v in stats.items())
    return summary


def cmd_flops(cfg: RunConfig, args) -> str:
    out = _out(args)
    fc = cfg.flops
    schedule = cfg.prune_schedule()
    report = count_model(cfg.model, schedule, convention=fc.convention, cfg_doubling=fc.cfg_doubling)
    dense = count_model(cfg.model.dense_counterpart(), T=schedule.T, convention=fc.convention,
                        cfg_doubling=fc.cfg_doubling)
    report.write_csv(out / "flops_layers.csv")
    plotting.plot_flops(report.per_timestep, out / "flops.svg", dense.schedule_average, report.convention)
    change = report.schedule_average / dense.schedule_average - 1
    return f"{report.summary()} dense_gflops={dense.gflops:.4f} change={change:+.2%}"


def cmd_import(cfg: RunConfig, args) -> str:
    if not Path(args.dense).exists():
        raise FileNotFoundError(f"dense checkpoint not found: {args.dense}")
    model = import_dense_checkpoint(args.dense, cfg.model, cfg.torch_dtype)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = export_checkpoint(model, out)
    merges = merge_modules(model)
    identity = all(torch.equal(m.w1.weight, torch.zeros_like(m.w1.weight))
                   and torch.equal(m.w2.weight, torch.eye(m.w2.weight.shape[0], dtype=m.w2.weight.dtype))
                   for m in merges)
    return f"entries={len(manifest.entries)} merges={len(merges)} merge_identity={'ok' if identity else 'FAILED'} out={out}"


def cmd_profile(cfg: RunConfig, args) -> str:
    out = _out(args)
    pc = cfg.profile
    model = _model(cfg, args.ckpt)
    model.eval()
    x0, labels = _images(cfg, pc.n, pc.seed)
    profile = attn_variance_profile(model, x0, labels, list(pc.timesteps), cfg.noise_schedule(),
                                    cfg.prune_schedule() if cfg.model.sdtm else None, pc.seed)
    profile.write_csv(out / "attn_profile.csv")
    plotting.plot_variance_profile(profile.layers, profile.timesteps, profile.normalized, out / "attn_profile.svg")
    return f"layers={len(profile.layers)} timesteps={len(profile.timesteps)} rows={len(profile.rows())}"


def cmd_ablate(cfg: RunConfig, args) -> str:
    out = _out(args)
    ac = cfg.ablate
    k = ac.k if args.k is None else args.k
    model = _model(cfg, args.ckpt)
    model.eval()
    x0, labels = _images(cfg, ac.n, ac.seed)
    eps = torch.as_tensor(rng_stream(ac.seed, "ablate-noise").standard_normal(tuple(x0.shape)), dtype=x0.dtype)
    x_t = q_sample(x0, ac.t, eps, cfg.noise_schedule())
    grid = cfg.prune_schedule().grid_at(ac.t) if cfg.model.sdtm else None
    t = torch.full((ac.n,), ac.t, dtype=torch.int64)
    report = ablate_uniform_attention(model, k, x_t, t, labels, grid)
    report.write_csv(out / "ablation.csv")
    plotting.plot_ablation(report.layers, report.layer_mse, k, out / "ablation.svg")
    return f"k={k} output_mse={report.final_mse:.6e}"


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsedit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help, out_default="out"):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="YAML run config")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train on the synthetic dataset")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--ckpt", help="start from this checkpoint")
    p = add("sample", cmd_sample, "draw samples (DDPM or DDIM)")
    p.add_argument("--seed", type=int, help="override sample.seed")
    p.add_argument("--ckpt", help="model checkpoint (default: config 'checkpoint', else fresh)")
    add("flops", cmd_flops, "analytic FLOPs report")
    p = add("import-ckpt", cmd_import, "convert a dense DiT checkpoint to the configured SparseDiT", None)
    p.add_argument("--dense", required=True, help="dense checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p = add("attn-profile", cmd_profile, "per-layer attention-map variance")
    p.add_argument("--ckpt")
    p = add("ablate-uniform-attn", cmd_ablate, "force the first k attention maps to uniform")
    p.add_argument("--ckpt")
    p.add_argument("--k", type=int, help="override ablate.k")
    return parser


def _fail(kind: str, detail: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(detail).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    if args.command is None:
        return _fail("usage", f"missing subcommand; choose from {', '.join(SUBCOMMANDS)}", 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)  # bit-reproducible CPU reductions
    try:
        cfg = load_config(args.config)
        print(args.func(cfg, args))
    except ConfigError as exc:
        return _fail("invalid-config", f"field={exc.field} reason={exc.reason}", 2)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc, 2)
    except CheckpointError as exc:
        return _fail("checkpoint", exc, 1)
    except (ValueError, FloatingPointError, AssertionError) as exc:
        return _fail("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())

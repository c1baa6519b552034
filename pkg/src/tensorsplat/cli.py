"""Command-line interface.

Subcommands:
  gen        generate a synthetic dataset directory from a config
  train      fit a factorized store on a dataset; writes checkpoint + report
  eval       print PSNR metrics of a checkpoint on a dataset split
  render     render one identity under one pose to a PPM file
  animate    render a pose sequence to numbered PPM frames
  decompose  run ALS or power-iteration CP on a stored tensor
  info       print checkpoint dims and the parameter-count comparison

Every command is deterministic given its inputs and the config seed.
Malformed files exit nonzero with a single-line diagnostic.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as tsio
from .cp import cp_als, cp_power, param_count, reconstruct_full
from .dataset import generate_dataset, seed_gaussians
from .model import init_store
from .render import render
from .tensor_ops import rel_error
from .train import evaluate, render_identity_frame, train


def _cmd_gen(args) -> int:
    config = tsio.load_config(args.config)
    dataset = generate_dataset(config.dataset_spec(), seed=config.seed)
    prior = seed_gaussians(dataset, seed=config.seed)
    tsio.save_dataset(dataset, args.out, prior)
    n_frames = sum(len(i.train_frames) + len(i.heldout_frames) for i in dataset.identities)
    print(
        f"wrote {args.out}: {config.identities} identities, "
        f"{n_frames} frames at {config.image_size}x{config.image_size}"
    )
    return 0


def _cmd_train(args) -> int:
    config = tsio.load_config(args.config)
    dataset, prior = tsio.load_dataset(args.dataset)
    if dataset.spec.n_identities < config.identities:
        raise tsio.FileFormatError(
            f"dataset has {dataset.spec.n_identities} identities, config wants {config.identities}"
        )
    store, report = init_store(prior, dataset.spec.n_identities, config.rank, seed=config.seed)
    if report.low_rank_warning:
        print(f"warning: init prior spans rank {report.seed_rank} only", file=sys.stderr)
    history = train(store, dataset, config.train_config())
    tsio.save_store(args.out, store)
    report_dir = Path(args.report_dir) if args.report_dir else Path(args.out).parent
    from .report import save_training_report  # matplotlib import deferred to use

    paths = save_training_report(history, report_dir)
    final_psnr = history.psnr[-1] if len(history.psnr) else float("nan")
    print(f"wrote {args.out} (final loss {history.loss_total[-1]:.6g}, frame PSNR {final_psnr:.2f} dB)")
    for p in paths:
        print(f"report: {p}")
    return 0


def _cmd_eval(args) -> int:
    checkpoint = tsio.load_checkpoint(args.checkpoint)
    store = checkpoint.to_store()
    dataset, _ = tsio.load_dataset(args.dataset)
    metrics = evaluate(store, dataset, args.split)
    print(f"split: {args.split}")
    print("identity  frames  mean PSNR (dB)")
    for ident in sorted(metrics.per_identity):
        count = sum(1 for fm in metrics.frames if fm.identity == ident)
        print(f"{ident:8d}  {count:6d}  {metrics.per_identity[ident]:14.3f}")
    print(f"overall mean: {metrics.mean_psnr:.3f} dB over {len(metrics.frames)} frames")
    if args.report_dir:
        from .report import save_eval_report

        for p in save_eval_report(metrics, args.split, args.report_dir):
            print(f"report: {p}")
    return 0


def _load_store_and_dataset(checkpoint_path, dataset_path):
    store = tsio.load_checkpoint(checkpoint_path).to_store()
    dataset, _ = tsio.load_dataset(dataset_path)
    return store, dataset


def _check_identity(store, dataset, identity: int) -> None:
    limit = min(store.n_identities, dataset.spec.n_identities)
    if not 0 <= identity < limit:
        raise tsio.FileFormatError(f"identity {identity} out of range [0, {limit})")


def _cmd_render(args) -> int:
    store, dataset = _load_store_and_dataset(args.checkpoint, args.dataset)
    _check_identity(store, dataset, args.identity)
    n_bones = len(dataset.identities[args.identity].skeleton)
    poses = tsio.load_poses(args.pose_file, n_bones)
    image, _ = render_identity_frame(store, dataset, args.identity, poses[0])
    tsio.write_ppm(args.out, image)
    print(f"wrote {args.out}")
    return 0


def _cmd_animate(args) -> int:
    store, dataset = _load_store_and_dataset(args.checkpoint, args.dataset)
    _check_identity(store, dataset, args.identity)
    n_bones = len(dataset.identities[args.identity].skeleton)
    poses = tsio.load_poses(args.poses, n_bones)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, pose in enumerate(poses):
        image, _ = render_identity_frame(store, dataset, args.identity, pose)
        tsio.write_ppm(out / f"frame_{k:04d}.ppm", image)
    print(f"wrote {len(poses)} frames to {out}")
    return 0


def _cmd_decompose(args) -> int:
    tensor = tsio.load_tensor3(args.tensor)
    if args.method == "als":
        model, history = cp_als(tensor, args.rank, max_sweeps=args.sweeps, seed=args.seed)
        err = history[-1]
    else:
        model = cp_power(tensor, args.rank, iters_per_component=args.iters,
                         restarts=args.restarts, seed=args.seed)
        err = rel_error(tensor, reconstruct_full(model))
    tsio.save_checkpoint(args.out, model)
    print(f"method {args.method}, rank {args.rank}: rel_error {err:.6g}")
    print(f"wrote {args.out}")
    return 0


def _cmd_info(args) -> int:
    checkpoint = tsio.load_checkpoint(args.checkpoint)
    n_i, n_g, m_dims = checkpoint.model.dims
    rank = checkpoint.model.rank
    factorized, dense, ratio = param_count(m_dims, n_i, n_g, rank)
    print(f"dims: M={m_dims} identities={n_i} gaussians={n_g} rank={rank}")
    print(f"layout: {checkpoint.layout_name or 'generic'}")
    print(f"personalization: {'yes' if checkpoint.personalization is not None else 'no'}")
    print(f"parameters: factorized {factorized:,} vs dense {dense:,} (ratio {ratio:.2f}x)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensorsplat",
        description="Multi-identity 2D Gaussian splatting on a CP-factorized parameter tensor",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a factorized store on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--report-dir", default=None, help="metrics CSV + figures (default: beside checkpoint)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "held_out"), default="held_out")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render", help="render one identity under one pose")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset dir providing skeleton + viewport")
    p.add_argument("--identity", type=int, required=True)
    p.add_argument("--pose-file", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("animate", help="render a pose sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--identity", type=int, required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_animate)

    p = sub.add_parser("decompose", help="CP-decompose a stored tensor")
    p.add_argument("--tensor", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--method", choices=("als", "power"), default="als")
    p.add_argument("--sweeps", type=int, default=200)
    p.add_argument("--iters", type=int, default=100, help="power iterations per component")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output factor checkpoint")
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("info", help="print checkpoint dims and parameter counts")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (tsio.FileFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: dataset generation, both training stages,
inference, evaluation, and numerical health checks.

Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
Every run writes a config snapshot (seed included) into its output
directory, sufficient to reproduce the run exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import oracles, pipeline
from .config import Config, load_config, save_config
from .dataset import ManifestError, generate_dataset, load_dataset
from .gradsuite import composite_cases, primitive_cases, run_cases
from .imageio import save_pfm, save_png
from .losses import metrics_report, psnr, ssim


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is 1
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="liftview", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p: _Parser, out_default: str) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output directory")

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"),
           "data")

    p = sub.add_parser("train-recon", help="train the stage-1 reconstructor")
    common(p, "runs/recon")
    p.add_argument("--data", required=True, help="dataset manifest path")

    p = sub.add_parser("precompute-cond",
                       help="render the stage-2 conditioning records")
    common(p, "runs/cond")
    p.add_argument("--data", required=True)
    p.add_argument("--recon", required=True, help="reconstructor checkpoint")

    p = sub.add_parser("train-diff", help="train the stage-2 diffusion model")
    common(p, "runs/diff")
    p.add_argument("--cond", required=True, help="condition records path")

    p = sub.add_parser("infer", help="render a novel view")
    common(p, "runs/infer")
    p.add_argument("--data", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--diff", help="diffusion checkpoint (progressive mode)")
    p.add_argument("--scene", help="scene id (default: first in manifest)")
    p.add_argument("--inputs", default="0", help="comma-separated view indices")
    p.add_argument("--target", type=int, help="target view index (default: last)")
    p.add_argument("--mode", choices=("det", "prog"), default="det")
    p.add_argument("--iters", type=int, help="progressive iterations (default 4)")
    p.add_argument("--guidance", type=float, help="guidance weight (default 2.0)")
    p.add_argument("--steps", type=int, help="DDIM steps (default 200)")

    p = sub.add_parser("eval", help="PSNR/SSIM over a split")
    common(p, "runs/eval")
    p.add_argument("--data", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    common(sub.add_parser("grad-check", help="run the full gradient suite"),
           "runs/grad-check")
    common(sub.add_parser("oracle-check",
                          help="rendering and DDIM inversion oracles"),
           "runs/oracle-check")
    return parser


def _load_cfg(args) -> Config:
    cfg = Config()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _snapshot(out_dir: str, cfg: Config) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "config.txt"), cfg)


def _save_render(render_dir: str, name: str, image) -> None:
    os.makedirs(render_dir, exist_ok=True)
    arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
    save_png(os.path.join(render_dir, name + ".png"), arr)
    save_pfm(os.path.join(render_dir, name + ".pfm"), arr)


def _cmd_gen_data(args, cfg: Config) -> int:
    _snapshot(args.out, cfg)
    manifest = generate_dataset(args.out, cfg.n_scenes, cfg.views_per_scene,
                                cfg.resolution, cfg.seed, cfg.gt_samples)
    print(manifest)
    return 0


def _cmd_train_recon(args, cfg: Config) -> int:
    _snapshot(args.out, cfg)
    scenes = load_dataset(args.data, "train")
    try:
        val = load_dataset(args.data, "val")
    except ManifestError:
        val = None
    ckpt = pipeline.train_reconstructor(scenes, cfg, args.out, val)
    print(ckpt)
    return 0


def _cmd_precompute(args, cfg: Config) -> int:
    _snapshot(args.out, cfg)
    scenes = load_dataset(args.data, "train")
    model = pipeline.load_reconstructor(cfg, args.recon)
    path = pipeline.precompute_conditions(
        scenes, model, cfg, os.path.join(args.out, "conditions.ckpt"))
    print(path)
    return 0


def _cmd_train_diff(args, cfg: Config) -> int:
    _snapshot(args.out, cfg)
    ckpt = pipeline.train_diffusion(args.cond, cfg, args.out)
    print(ckpt)
    return 0


def _select_scene(scenes, scene_id):
    if scene_id is None:
        return scenes[0]
    for s in scenes:
        if s.scene_id == scene_id:
            return s
    raise ValueError(f"scene {scene_id!r} not in dataset")


def _cmd_infer(args, cfg: Config) -> int:
    overrides = {}
    if args.iters is not None:
        overrides["n_iters"] = args.iters
    if args.guidance is not None:
        overrides["guidance"] = args.guidance
    if args.steps is not None:
        overrides["ddim_steps"] = args.steps
    cfg = dataclasses.replace(cfg, **overrides)
    _snapshot(args.out, cfg)
    scene = _select_scene(load_dataset(args.data), args.scene)
    try:
        input_idx = [int(s) for s in args.inputs.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"--inputs must be comma-separated integers, "
                         f"got {args.inputs!r}") from None
    if not input_idx:
        raise ValueError("--inputs selected no views")
    t_idx = scene.view_count - 1 if args.target is None else args.target
    bad = [i for i in input_idx + [t_idx] if not 0 <= i < scene.view_count]
    if bad:
        raise ValueError(f"view indices {bad} outside 0..{scene.view_count - 1}")
    views = [(scene.images[i], scene.poses[i]) for i in input_idx]
    target_pose = scene.poses[t_idx]
    model = pipeline.load_reconstructor(cfg, args.recon)
    render_dir = os.path.join(args.out, "renders")

    if args.mode == "det" or cfg.n_iters == 0:
        out = pipeline.infer_deterministic(views, target_pose, model)
        final = out.image
    else:
        if not args.diff:
            raise ValueError("progressive mode needs --diff CHECKPOINT")
        denoiser, encoder = pipeline.load_diffusion(cfg, args.diff)
        result = pipeline.infer_progressive(views, target_pose, cfg.n_iters,
                                            model, denoiser, encoder,
                                            cfg=cfg, seed=cfg.seed)
        for i, inter in enumerate(result.intermediates):
            _save_render(render_dir, f"intermediate_{i:02d}", inter)
        final = result.final.image
    _save_render(render_dir, "final", final)
    print(f"psnr\t{psnr(final, scene.images[t_idx]):.4f}")
    return 0


def _cmd_eval(args, cfg: Config) -> int:
    _snapshot(args.out, cfg)
    scenes = load_dataset(args.data, args.split)
    model = pipeline.load_reconstructor(cfg, args.recon)
    render_dir = os.path.join(args.out, "renders")
    rows = []
    for scene in scenes:
        n_in = min(2, scene.view_count - 1) or 1
        views = [(scene.images[i], scene.poses[i]) for i in range(n_in)]
        for v in range(n_in, scene.view_count):
            out = pipeline.infer_deterministic(views, scene.poses[v], model)
            rows.append((f"{scene.scene_id}:{v}",
                         psnr(out.image, scene.images[v]),
                         ssim(out.image, scene.images[v])))
            if v == n_in:
                _save_render(render_dir, f"{scene.scene_id}_view{v:03d}",
                             out.image)
    report = metrics_report(rows)
    with open(os.path.join(args.out, "metrics.tsv"), "w") as fh:
        fh.write(report)
    print(report.splitlines()[-1])
    return 0


def _cmd_grad_check(args, cfg: Config) -> int:
    _snapshot(args.out, cfg)
    failures = 0
    lines = []
    for name, seed, res in run_cases(primitive_cases() + composite_cases()):
        status = "pass" if res.passed else "FAIL"
        failures += not res.passed
        lines.append(f"{name}\tseed {seed}\t{status}\tchecked {res.checked}\t"
                     f"excluded {res.excluded}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "grad_check.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    if failures:
        print(f"{failures} gradient case(s) failed", file=sys.stderr)
        return 2
    return 0


def _cmd_oracle_check(args, cfg: Config) -> int:
    _snapshot(args.out, cfg)
    comp = oracles.compositing_error(seed=cfg.seed)
    inv = oracles.ddim_inversion_error(seed=cfg.seed)
    collapse = oracles.guidance_collapse_exact(seed=cfg.seed)
    lines = [f"compositing_error\t{comp:.3e}\t{'pass' if comp < 1e-9 else 'FAIL'}",
             f"ddim_inversion_error\t{inv:.3e}\t{'pass' if inv < 1e-9 else 'FAIL'}",
             f"guidance_w1_bitwise\t-\t{'pass' if collapse else 'FAIL'}"]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "oracle_check.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    if comp < 1e-9 and inv < 1e-9 and collapse:
        return 0
    print("oracle check failed", file=sys.stderr)
    return 2


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-recon": _cmd_train_recon,
    "precompute-cond": _cmd_precompute,
    "train-diff": _cmd_train_diff,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "oracle-check": _cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    try:
        cfg = _load_cfg(args)
        return _COMMANDS[args.command](args, cfg)
    except ArithmeticError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

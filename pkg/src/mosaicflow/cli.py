"""Command-line entry point: simulate, pretrain, train, sample, evaluate, report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import metrics, pipeline, sampler, storage, tensor
from .cfm import conditioning
from .prior import TrainingDiverged

log = logging.getLogger("mosaicflow")


def _config(args) -> pipeline.RunConfig:
    if getattr(args, "config", None):
        return pipeline.RunConfig.load(args.config)
    return pipeline.RunConfig.toy() if getattr(args, "toy", False) else pipeline.RunConfig()


def cmd_simulate(args) -> int:
    spec = pipeline.SceneSpec(args.bands, args.size, args.kind, args.seed, args.input)
    h_gt, obs = pipeline.simulate(spec)
    out = pipeline.output_dir(args.out)
    pipeline.save_scene(out, h_gt, obs)
    if h_gt.shape[0] >= 13:
        storage.save_ppm(out / "gt.ppm", h_gt)
    print(f"wrote scene {h_gt.shape} to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    _, obs = pipeline.load_scene(args.scene)
    out = pipeline.output_dir(args.out)
    cfg.save(out / "config.json")
    s1 = pipeline.run_stage1(cfg, obs, out)
    print(f"L_pre {s1.losses[0]:.6g} -> {s1.losses[-1]:.6g}; wrote {out / 'y.cube'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    _, obs = pipeline.load_scene(args.scene)
    out = pipeline.output_dir(args.out)
    prior_dir = Path(args.prior) if args.prior else out
    y = storage.load_cube(prior_dir / "y.cube")
    logits = storage.load_checkpoint(prior_dir / "prior.ckpt")["srf.logits"]
    cfg.save(out / "config.json")
    s2 = pipeline.run_stage2(cfg, obs, y, logits, out)
    updates = sum(v.updated for v in s2.votes)
    print(f"trained {cfg.flow_epochs} epochs, {len(s2.votes)} votes ({updates} updates); "
          f"wrote {out / 'flow_final.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
    cfg = pipeline.RunConfig.load(cfg_path)
    _, obs = pipeline.load_scene(args.scene)
    net = pipeline.load_flow_net(cfg, obs.bands, ckpt)
    guide = sampler.GuidanceConfig(args.steps, args.gamma_norm, args.seed, cfg.guidance_norm)
    h = sampler.sample(net, conditioning(obs), obs.pan_expanded(), obs, guide)
    storage.save_cube(args.out, h)
    if args.ppm:
        storage.save_ppm(args.ppm, h)
    print(f"wrote {args.out} (steps={guide.steps}, gamma_norm={guide.gamma_norm})")
    return 0


def cmd_evaluate(args) -> int:
    fused = storage.load_cube(args.fused)
    rep = metrics.MetricReport()
    values = {}
    if args.ref:
        values.update(metrics.full_reference(fused, storage.load_cube(args.ref)))
    if args.scene:
        _, obs = pipeline.load_scene(args.scene)
        q = metrics.qnr_suite(fused, obs.mosaic, obs.pan, obs.pattern, preblur=args.preblur)
        values.update(qnr=q.qnr, d_lambda=q.d_lambda, d_s=q.d_s)
    if not values:
        raise ValueError("evaluate needs --ref and/or --scene")
    rep.add(args.name, args.method, values)
    text = rep.to_csv()
    if args.out:
        storage.atomic_write(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    gt, obs = pipeline.load_scene(args.scene)
    rep = metrics.MetricReport(meta={"scene": str(args.scene)})
    candidates = {"interpolated": obs.interpolated()}
    for run in args.runs:
        run = Path(run)
        for name in ("y", "h_final"):
            if (run / f"{name}.cube").exists():
                candidates[f"{run.name}/{name}"] = storage.load_cube(run / f"{name}.cube")
    for method, cube in candidates.items():
        values = metrics.full_reference(cube, gt) if gt is not None else {}
        q = metrics.qnr_suite(cube, obs.mosaic, obs.pan, obs.pattern, preblur=args.preblur)
        values.update(qnr=q.qnr, d_lambda=q.d_lambda, d_s=q.d_s)
        rep.add(Path(args.scene).name, method, values)
    out = pipeline.output_dir(args.out)
    storage.atomic_write(out / "report.csv", rep.to_csv())
    storage.atomic_write(out / "report.json", rep.to_json() + "\n")
    sys.stdout.write(rep.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mosaicflow",
                                description="Mosaic/PAN fusion with flow matching and voting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesise a scene and its observations")
    s.add_argument("--bands", type=int, default=16)
    s.add_argument("--size", type=int, default=64, help="PAN extent (multiple of 8)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", choices=pipeline.SCENE_KINDS, default="smooth")
    s.add_argument("--input", help="cube file for --kind file")
    s.add_argument("--out", help="scene directory")
    s.set_defaults(func=cmd_simulate)

    def add_run_flags(q):
        q.add_argument("--scene", required=True, help="scene directory")
        q.add_argument("--config", help="RunConfig JSON")
        q.add_argument("--toy", action="store_true", help="use the desk-scale defaults")
        q.add_argument("--out", help="run directory")

    s = sub.add_parser("pretrain", help="stage 1: fit the prior and write y.cube")
    add_run_flags(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="stage 2: flow matching with random voting")
    add_run_flags(s)
    s.add_argument("--prior", help="directory holding y.cube and prior.ckpt (default: --out)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="guided sampling from a flow checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="RunConfig JSON (default: config.json beside the checkpoint)")
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--gamma-norm", type=float, default=0.4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output cube")
    s.add_argument("--ppm", help="optional pseudo-colour preview")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", help="metrics for one fused cube as a CSV row")
    s.add_argument("--fused", required=True)
    s.add_argument("--ref", help="ground-truth cube for full-reference metrics")
    s.add_argument("--scene", help="scene directory for no-reference metrics")
    s.add_argument("--preblur", action="store_true")
    s.add_argument("--name", default="scene")
    s.add_argument("--method", default="fused")
    s.add_argument("--out", help="CSV file")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="compare run outputs on one scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--runs", nargs="+", default=[])
    s.add_argument("--preblur", action="store_true")
    s.add_argument("--out", help="report directory")
    s.set_defaults(func=cmd_report)
    return p


CONTRACT_ERRORS = (ValueError, tensor.ShapeError, storage.FormatError, FileNotFoundError,
                   KeyError, TrainingDiverged, sampler.SamplingError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CONTRACT_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mosaicflow {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``lidarocc {simulate,reconstruct,mesh,eval,ablate}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, evalsuite, io, pipeline, simulator
from .trainer import (
    TrainConfig,
    Trainer,
    load_checkpoint,
    propagate_poses,
    save_checkpoint,
)

log = logging.getLogger("lidarocc")

ABLATIONS = {
    "full": {},
    "simple-bce": {"loss_mode": "simple-bce"},
    "no-pose-refine": {"pose_refine": False},
    "depth-render": {"loss_mode": "depth-render"},
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one line on stderr, no usage dump
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


def _resolution(text: str) -> int:
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError(f"resolution must be >= 2, got {v}")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def load_fixture(scene: str) -> simulator.Fixture:
    if scene in simulator.FIXTURES:
        return simulator.FIXTURES[scene]()
    path = Path(scene)
    if not path.is_file():
        raise CliError(f"unknown scene {scene!r}: not a bundled fixture ({', '.join(simulator.FIXTURES)}) or a file")
    try:
        return simulator.fixture_from_dict(io.read_json(path))
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


def build_config(args) -> TrainConfig:
    """Defaults, then ``--config`` file, then explicit flags."""
    d = TrainConfig().to_dict()
    if getattr(args, "config", None):
        d.update(io.read_json(args.config))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        d["iterations"] = args.iterations
    if getattr(args, "loss_mode", None) is not None:
        d["loss_mode"] = args.loss_mode
    if getattr(args, "no_pose_refine", False):
        d["pose_refine"] = False
    return TrainConfig.from_dict(d)


def write_manifest(out_dir: Path, command: str, argv, config, inputs: dict, outputs: dict, timings: dict,
                   seed=None) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timings_s": timings,
    }
    path = out_dir / "manifest.json"
    io.write_json(path, manifest)
    return path


def cmd_simulate(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fixture = load_fixture(args.scene)
    t0 = time.perf_counter()
    sim = pipeline.simulate(fixture, args.frames, args.rays, args.seed, args.range_noise, tuple(args.pose_noise))
    t_scan = time.perf_counter() - t0
    outputs = {"frames": out / "frames", "poses_gt": out / "poses_gt.txt", "scene": out / "scene.json"}
    io.write_frames(sim.frames, outputs["frames"])
    io.write_poses(sim.gt_poses, outputs["poses_gt"])
    io.write_json(outputs["scene"], simulator.fixture_to_dict(fixture))
    if any(args.pose_noise):
        outputs["poses_noisy"] = out / "poses_noisy.txt"
        io.write_poses(sim.initial_poses, outputs["poses_noisy"])
    t0 = time.perf_counter()
    gt_mesh = simulator.ground_truth_mesh(fixture.scene, args.gt_resolution)
    outputs["gt_mesh"] = out / "gt_mesh.ply"
    io.write_mesh_ply(outputs["gt_mesh"], gt_mesh)
    timings = {"scan": t_scan, "gt_mesh": time.perf_counter() - t0}
    config = {"frames": args.frames, "rays": args.rays, "range_noise": args.range_noise,
              "pose_noise": list(args.pose_noise), "gt_resolution": args.gt_resolution}
    write_manifest(out, "simulate", argv, config, {"scene": args.scene}, outputs, timings, args.seed)
    print(f"wrote {len(sim.frames)} frames to {outputs['frames']}")


def cmd_reconstruct(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = io.read_frames(args.frames)
    poses = io.read_poses(args.poses)
    if len(frames) != len(poses):
        raise CliError(f"{len(frames)} frames but {len(poses)} poses")
    if args.resume:
        state = load_checkpoint(args.resume)
        config = state.config
        if args.iterations is not None:
            config.iterations = args.iterations
        trainer = Trainer(frames, poses, config, state=state, diagnostic_path=out / "diverged.ckpt")
    else:
        config = build_config(args)
        trainer = Trainer(frames, poses, config, diagnostic_path=out / "diverged.ckpt")

    def progress(i, loss):
        if args.verbose and (i % 25 == 0 or i == config.iterations):
            print(f"iter {i:4d} loss {loss:.5f}", file=sys.stderr)

    t0 = time.perf_counter()
    state = trainer.run(progress=progress)
    t_train = time.perf_counter() - t0
    refined = propagate_poses(poses, state.keyframes, state.twists)
    outputs = {"checkpoint": out / "checkpoint.ckpt", "poses_refined": out / "poses_refined.txt"}
    save_checkpoint(state, outputs["checkpoint"])
    io.write_poses(refined, outputs["poses_refined"])
    inputs = {"frames": args.frames, "poses": args.poses}
    if args.resume:
        inputs["resume"] = args.resume
    write_manifest(out, "reconstruct", argv, config.to_dict(), inputs, outputs, {"reconstruct": t_train},
                   config.seed)
    final = state.loss_history[-1] if state.loss_history else float("nan")
    print(f"trained {state.iteration} iterations on {len(state.keyframes)} keyframes, final loss {final:.5f}")


def cmd_mesh(args, argv):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    state = load_checkpoint(ckpt)
    frames = poses = None
    if args.frames and args.poses:
        frames = io.read_frames(args.frames)
        poses = io.read_poses(args.poses)
    else:
        log.warning("no --frames/--poses given; mesh is not culled")
    t0 = time.perf_counter()
    mesh = pipeline.mesh_field(state.field, frames, poses, args.resolution,
                               args.cull_radius if frames is not None else None, args.workers)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_mesh_ply(out, mesh)
    config = {"resolution": args.resolution, "cull_radius": args.cull_radius}
    inputs = {"checkpoint": ckpt, "frames": args.frames, "poses": args.poses}
    write_manifest(out.parent, "mesh", argv, config, inputs, {"mesh": out}, {"mesh": elapsed})
    print(f"wrote mesh with {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {out}")


def cmd_eval(args, argv):
    for p in (args.mesh, args.gt_mesh):
        if not Path(p).is_file():
            raise CliError(f"mesh not found: {p}")
    mesh = io.read_mesh_ply(args.mesh)
    gt = io.read_mesh_ply(args.gt_mesh)
    poses = gt_poses = None
    if args.poses or args.gt_poses:
        if not (args.poses and args.gt_poses):
            raise CliError("--poses and --gt-poses must be given together")
        poses, gt_poses = io.read_poses(args.poses), io.read_poses(args.gt_poses)
    t0 = time.perf_counter()
    report = pipeline.evaluate(mesh, gt, poses, gt_poses, args.seed, args.samples)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evalsuite.write_report(out, report)
    inputs = {"mesh": args.mesh, "gt_mesh": args.gt_mesh, "poses": args.poses, "gt_poses": args.gt_poses}
    write_manifest(out.parent, "eval", argv, {"samples": args.samples}, inputs, {"report": out},
                   {"eval": elapsed}, args.seed)
    print(evalsuite.format_table({Path(args.mesh).stem: report}))


def cmd_ablate(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fixture = load_fixture(args.scene)
    base = build_config(args)
    sim = pipeline.simulate(fixture, args.frames, args.rays, args.seed, pose_noise=tuple(args.pose_noise))
    reports, timings, outputs = {}, {}, {}
    for name, overrides in ABLATIONS.items():
        cfg = TrainConfig.from_dict({**base.to_dict(), **overrides})
        res = pipeline.run_pipeline(fixture, cfg, seed=args.seed, resolution=args.resolution,
                                    cull_radius=args.cull_radius, gt_resolution=args.gt_resolution,
                                    n_samples=args.samples, workers=args.workers, sim=sim)
        reports[name] = res.report
        timings[name] = res.timings
        outputs[f"mesh_{name}"] = out / f"mesh_{name}.ply"
        io.write_mesh_ply(outputs[f"mesh_{name}"], res.mesh)
        cd = res.report["chamfer_l1"]
        cd = "n/a" if cd is None else f"{cd:.5f}"
        print(f"{name}: chamfer_l1 {cd} f_score {res.report['f_score']:.4f}", file=sys.stderr)
    outputs["report"] = out / "ablation.json"
    outputs["table"] = out / "ablation.txt"
    evalsuite.write_report(outputs["report"], reports, sort_keys=False)
    table = evalsuite.format_table(reports)
    outputs["table"].write_text(table + "\n")
    config = {"base": base.to_dict(), "variants": ABLATIONS, "frames": args.frames, "rays": args.rays,
              "pose_noise": list(args.pose_noise), "resolution": args.resolution}
    write_manifest(out, "ablate", argv, config, {"scene": args.scene}, outputs, timings, args.seed)
    print(table)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with training config overrides")
    p.add_argument("--iterations", type=int)
    p.add_argument("--loss-mode", choices=["direct", "simple-bce", "depth-render"])
    p.add_argument("--no-pose-refine", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lidarocc", description="Implicit occupancy reconstruction from LiDAR scans.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    workers = os.cpu_count() or 1

    p = sub.add_parser("simulate", help="scan a synthetic scene")
    p.add_argument("--scene", required=True, help=f"fixture name ({', '.join(simulator.FIXTURES)}) or scene JSON")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--rays", type=int, default=15000)
    p.add_argument("--range-noise", type=float, default=0.0)
    p.add_argument("--pose-noise", type=float, nargs=2, default=(0.0, 0.0), metavar=("ROT", "TRANS"))
    p.add_argument("--gt-resolution", type=_resolution, default=pipeline.GT_RESOLUTION)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="train the occupancy field")
    p.add_argument("--frames", required=True, help="directory of frame PLY files")
    p.add_argument("--poses", required=True, help="initial pose file")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="continue from a checkpoint")
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("mesh", help="extract a culled mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames")
    p.add_argument("--poses", help="refined poses used for culling")
    p.add_argument("--resolution", type=_resolution, default=pipeline.DEFAULT_RESOLUTION)
    p.add_argument("--cull-radius", type=_positive, default=pipeline.DEFAULT_CULL_RADIUS)
    p.add_argument("--workers", type=int, default=workers)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="compare a mesh with the ground truth")
    p.add_argument("--mesh", required=True)
    p.add_argument("--gt-mesh", required=True)
    p.add_argument("--poses")
    p.add_argument("--gt-poses")
    p.add_argument("--samples", type=int, default=evalsuite.N_SURFACE_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four loss/pose ablation variants")
    p.add_argument("--scene", default="two-wall")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--rays", type=int, default=15000)
    p.add_argument("--pose-noise", type=float, nargs=2, default=(pipeline.NOISE_ROT, pipeline.NOISE_TRANS),
                   metavar=("ROT", "TRANS"))
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.add_argument("--resolution", type=_resolution, default=pipeline.DEFAULT_RESOLUTION)
    p.add_argument("--cull-radius", type=_positive, default=pipeline.DEFAULT_CULL_RADIUS)
    p.add_argument("--gt-resolution", type=_resolution, default=pipeline.GT_RESOLUTION)
    p.add_argument("--samples", type=int, default=evalsuite.N_SURFACE_SAMPLES)
    p.add_argument("--workers", type=int, default=workers)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    try:
        args.func(args, argv)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"lidarocc {args.command}: error: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

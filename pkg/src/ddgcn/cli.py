"""Command-line entry point: ``ddgcn <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import selftest as st
from .checkpoint import load_checkpoint
from .config import PRESETS, build_run_config, load_config_file
from .data import (
    MotionSequence,
    export_errors,
    make_split,
    parse_skel,
    split_windows,
    stack_windows,
    synthesize_dataset,
    write_skel,
)
from .exceptions import ConfigError, DDGCNError, DimensionError
from .graph import export_subadjacency, grid_to_csv
from .model import DDGCN
from .training import (
    evaluate_horizons,
    fit,
    mpjpe_loss,
    zero_velocity_forecast,
)

logger = logging.getLogger("ddgcn")

STANDARD_HORIZONS_MS = (80, 160, 320, 400, 560, 1000)


class SelftestFailure(DDGCNError):
    pass


def _common(parser):
    parser.add_argument("--config", type=Path, help="JSON config overriding the preset")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    parser.add_argument("--data", type=Path, nargs="+", help="SKEL1 input files")
    parser.add_argument("--out", type=Path, default=Path("ddgcn-out"), help="output directory")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--fps", type=float, help="frame rate (defaults to the data's)")
    parser.add_argument("-v", "--verbose", action="count", default=0)


def _range(text):
    try:
        start, stop = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:STOP, got {text!r}") from None
    return start, stop


def _horizons(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated milliseconds, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="ddgcn", description="Skeleton motion forecasting.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("train", help="fit a model, write checkpoints and the loss history")
    _common(p)

    p = sub.add_parser("predict", help="forecast SKEL1 files with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("eval", help="per-horizon MPJPE table")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--horizons", type=_horizons, help="e.g. 80,160,320,400")
    p.add_argument("--stride", type=int, help="window stride over SKEL1 inputs")

    p = sub.add_parser("gradcheck", help="finite-difference audit of the toy network")
    _common(p)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--max-per-leaf", type=int)
    p.add_argument("--tol", type=float, default=st.GRAD_TOL)

    p = sub.add_parser("selftest", help="oracle-equivalence and invariant checks")
    _common(p)
    p.add_argument("--only", nargs="+", choices=[c[0] for c in st.CHECKS])

    p = sub.add_parser("export-adjacency", help="write a slice of a learned adjacency as CSV")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--layer", default="encoders.0", help="module path of an SLMP layer")
    p.add_argument("--frames", type=_range)
    p.add_argument("--joints", type=_range)
    p.add_argument("--col-frames", type=_range)
    p.add_argument("--col-joints", type=_range)

    p = sub.add_parser("synth", help="write a synthetic dataset as SKEL1 files")
    _common(p)
    return parser


def _check_paths(args):
    paths = [args.config, getattr(args, "checkpoint", None), *(args.data or [])]
    for path in paths:
        if path is not None and not path.exists():
            raise ConfigError(f"path not found: {path}")


def _run_config(args):
    overrides = load_config_file(args.config) if args.config else None
    return build_run_config(overrides, args.preset, args.seed)


def _out_dir(args):
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _read_sequences(paths):
    return [parse_skel(Path(p).read_bytes()) for p in paths]


def _check_sequence_dims(seqs, n_joints, n_dims, paths):
    for seq, path in zip(seqs, paths):
        if seq.n_joints != n_joints:
            raise DimensionError(
                f"joint count M mismatch: model expects M={n_joints}, {path} has M={seq.n_joints}"
            )
        if seq.n_dims != n_dims:
            raise DimensionError(
                f"coordinate count D mismatch: model expects D={n_dims}, {path} has D={seq.n_dims}"
            )


def _dataset(args, run):
    cfg, synth = run.model, run.synth
    if args.data:
        seqs = _read_sequences(args.data)
        _check_sequence_dims(seqs, cfg.n_joints, cfg.n_dims, args.data)
    else:
        seqs = synthesize_dataset(cfg.build_topology(), synth.n_sequences, synth.sequence_frames,
                                  seed=run.train.seed, fps=args.fps or synth.fps,
                                  n_dims=cfg.n_dims, amplitude=synth.amplitude)
    return make_split(seqs, cfg.t_history, cfg.t_future, synth.stride, synth.fractions)


def cmd_train(args):
    run = _run_config(args)
    out = _out_dir(args)
    split = _dataset(args, run)
    if not split.train:
        raise ConfigError("the training split holds no windows")
    train = split.arrays("train")
    val = split.arrays("val") if split.val else None
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    result = fit(run.model, train, val, run.train, out_dir=out)
    summary = {"epochs": len(result.history), "best_epoch": result.best_epoch,
               "final_train_loss": result.history[-1]["train_loss"] if result.history else None}
    if split.test:
        x, y = (torch.from_numpy(a) for a in split.arrays("test"))
        with torch.no_grad():
            pred = result.model(x)[:, run.model.t_history:]
        summary["test_future_mpjpe"] = float(mpjpe_loss(pred, y))
        summary["test_zero_velocity_mpjpe"] = float(
            mpjpe_loss(zero_velocity_forecast(x, run.model.t_future), y))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_predict(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    if not args.data:
        raise ConfigError("predict needs --data")
    seqs = _read_sequences(args.data)
    _check_sequence_dims(seqs, cfg.n_joints, cfg.n_dims, args.data)
    out = _out_dir(args)
    model.eval()
    for seq, path in zip(seqs, args.data):
        if seq.n_frames < cfg.t_history:
            raise DimensionError(
                f"{path} has T={seq.n_frames} frames, the model needs T_h={cfg.t_history}")
        x = torch.from_numpy(seq.frames[-cfg.t_history:][None])
        with torch.no_grad():
            full = model(x)[0].numpy()
        fps = args.fps or seq.fps
        stem = Path(path).stem
        (out / f"{stem}.pred.skel").write_bytes(write_skel(MotionSequence(full, fps, model.topology)))
        sidecar = {"source": str(path), "t_history": cfg.t_history, "t_future": cfg.t_future,
                   "fps": fps, "future_starts_at_frame": cfg.t_history}
        (out / f"{stem}.pred.json").write_text(json.dumps(sidecar, indent=2) + "\n")
        print(out / f"{stem}.pred.skel")


def cmd_eval(args):
    model, _, document = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    if args.data:
        seqs = _read_sequences(args.data)
        _check_sequence_dims(seqs, cfg.n_joints, cfg.n_dims, args.data)
        stride = args.stride or cfg.n_frames
        x, y = stack_windows([w for s in seqs for w in split_windows(s, cfg.t_history, cfg.t_future, stride)])
        fps = args.fps or seqs[0].fps
    else:
        overrides = {k: v for k, v in document["model"].items()}
        if args.config:
            overrides.update(load_config_file(args.config))
        run = build_run_config(overrides, args.preset, args.seed)
        split = _dataset(argparse.Namespace(data=None, fps=args.fps), run)
        part = "test" if split.test else "train"
        x, y = split.arrays(part)
        fps = args.fps or run.synth.fps
    horizons = args.horizons
    if horizons is None:
        limit = cfg.t_future * 1000.0 / fps
        horizons = [h for h in STANDARD_HORIZONS_MS if h <= limit] or [limit]
    rows = evaluate_horizons(model, x, y, horizons, fps)
    zv = evaluate_horizons(None, x, y, horizons, fps,
                           predictions=zero_velocity_forecast(torch.from_numpy(x), cfg.t_future))
    out = _out_dir(args)
    (out / "horizons.csv").write_bytes(export_errors(rows))
    lines = ["horizon_ms,frame_offset,mpjpe,mpjpe_cumulative,zero_velocity_mpjpe"]
    for r, z in zip(rows, zv):
        lines.append(f"{r['horizon_ms']:g},{r['frame_offset']},{r['mpjpe']:.17g},"
                     f"{r['mpjpe_cumulative']:.17g},{z['mpjpe']:.17g}")
    (out / "horizons_detail.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    report = st.gradient_audit(seed, eps=args.eps, max_per_leaf=args.max_per_leaf)
    out = _out_dir(args)
    doc = {"eps": report.eps, "n_checked": report.n_checked, "max_rel_error": report.max_rel_error,
           "max_abs_error": report.max_abs_error, "tolerance": args.tol,
           "passed": report.max_rel_error < args.tol, "per_leaf": report.per_leaf}
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"checked {report.n_checked} entries, max relative error {report.max_rel_error:.3e} "
          f"(worst: {report.worst()})")
    if not doc["passed"]:
        raise SelftestFailure(f"gradient audit failed: max relative error "
                              f"{report.max_rel_error:.3e} >= {args.tol:g} in {report.worst()}")


def cmd_selftest(args):
    failed = []
    for result in st.run_all(args.only):
        print(result.line(), flush=True)
        if not result.passed:
            failed.append(result.name)
    if failed:
        raise SelftestFailure(f"failing property: {', '.join(failed)}")


def cmd_export_adjacency(args):
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = DDGCN(_run_config(args).model)
    try:
        layer = model.get_submodule(args.layer)
    except AttributeError:
        raise ConfigError(f"no layer named {args.layer!r}") from None
    if not hasattr(layer, "adjacency"):
        raise ConfigError(f"layer {args.layer!r} has no adjacency")
    grid = export_subadjacency(layer.adjacency, args.frames, args.joints,
                               args.col_frames, args.col_joints)
    out = _out_dir(args)
    (out / "adjacency.csv").write_text(grid_to_csv(grid))
    print(f"{grid.shape[0]}x{grid.shape[1]} grid written to {out / 'adjacency.csv'}")


def cmd_synth(args):
    run = _run_config(args)
    cfg, synth = run.model, run.synth
    seqs = synthesize_dataset(cfg.build_topology(), synth.n_sequences, synth.sequence_frames,
                              seed=run.train.seed, fps=args.fps or synth.fps,
                              n_dims=cfg.n_dims, amplitude=synth.amplitude)
    out = _out_dir(args)
    width = max(4, len(str(len(seqs) - 1)))
    for k, seq in enumerate(seqs):
        (out / f"seq_{k:0{width}d}.skel").write_bytes(write_skel(seq))
    print(f"{len(seqs)} sequences written to {out}")


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
    "export-adjacency": cmd_export_adjacency,
    "synth": cmd_synth,
}


def _error_line(exc):
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DDGCN_THREADS")
    try:
        if threads:
            try:
                torch.set_num_threads(max(1, int(threads)))
            except ValueError:
                raise ConfigError(f"DDGCN_THREADS must be an integer, got {threads!r}") from None
        _check_paths(args)
        COMMANDS[args.command](args)
    except (DDGCNError, OSError, ValueError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``pyramidreg <subcommand> ...``.

Exit status is 0 on success, 2 when inputs or options fail validation and
1 when a run fails for any other reason.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..grid import Grid3D
from ..loss import grad_penalty
from ..metrics import jacobian_determinant, njd
from ..net import NetConfig, init_params
from . import io
from .synth import synth_pair
from .train import DESK_CONFIG, TrainConfig, deterministic, evaluate, register, resume_state, train

log = logging.getLogger("pyramidreg")

TRE_HELP = ("TRE pushes each fixed landmark p through p + phi(p) (trilinear sampling of the field) "
            "and measures the distance to its moving-image counterpart, in mm.")


class ValidationError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return obj


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise ValidationError(f"missing {what}")
    p = Path(path)
    if not p.exists() and not p.with_suffix(".json").exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _grid(path, what: str) -> Grid3D:
    return io.load_bundle(_require(path, what)).grid()


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    opts = {"dims": (32, 32, 32)}
    opts.update(_load_config(args.config))
    if args.dims:
        opts["dims"] = tuple(args.dims)
    for key in ("deform_sigma", "deform_max"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    known = {"dims", "deform_sigma", "deform_max", "noise", "n_blobs", "dice_range", "max_attempts"}
    unknown = set(opts) - known
    if unknown:
        raise ValidationError(f"unknown synth options: {sorted(unknown)}")
    pair = synth_pair(seed=args.seed, **opts)
    out = _out_dir(args)
    io.save_landmarks(out / "landmarks_fixed.json", pair.landmarks_fixed)
    io.save_landmarks(out / "landmarks_moving.json", pair.landmarks_moving)
    io.save_bundle(out / "fixed", pair.fixed)
    io.save_bundle(out / "moving", pair.moving)
    io.save_bundle(out / "labels_fixed", pair.labels_fixed, landmarks="landmarks_fixed.json")
    io.save_bundle(out / "labels_moving", pair.labels_moving, landmarks="landmarks_moving.json")
    io.save_bundle(out / "phi_true", pair.phi_true)
    summary = {"seed": args.seed, "initial_dice": pair.initial_dice, "attempts": pair.attempts,
               "structures": list(pair.labels_fixed.structures)}
    (out / "synth.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _pairs(args) -> list[tuple[Grid3D, Grid3D]]:
    pairs = []
    for d in args.pair or []:
        d = Path(d)
        pairs.append((_grid(d / "fixed.json", "fixed image"), _grid(d / "moving.json", "moving image")))
    if args.fixed or args.moving:
        pairs.append((_grid(args.fixed, "--fixed"), _grid(args.moving, "--moving")))
    if not pairs:
        raise ValidationError("give at least one --pair DIR or --fixed/--moving")
    return pairs


def cmd_train(args) -> int:
    base = DESK_CONFIG.to_dict() if args.preset == "desk" else TrainConfig().to_dict()
    base.update(_load_config(args.config))
    base["seed"] = args.seed
    if args.epochs is not None:
        base["epochs"] = args.epochs
        base["decay_start_epoch"] = min(base["decay_start_epoch"], args.epochs - 1)
    cfg = TrainConfig.from_dict(base)
    pairs = _pairs(args)
    if args.resume is not None:
        _require(args.resume, "--resume checkpoint")
    result = train(pairs, cfg, _out_dir(args), resume=args.resume)
    last = result.trace[-1] if result.trace else {}
    print(json.dumps({"checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
                      "final_loss": last.get("loss"), "steps": result.state.step}))
    return 0


def cmd_register(args) -> int:
    fixed = _grid(args.fixed, "--fixed")
    moving = _grid(args.moving, "--moving")
    if args.checkpoint is not None:
        params, _, _, meta = resume_state(_require(args.checkpoint, "--checkpoint"))
        cfg = NetConfig.from_dict(meta.get("net_config", {}))
    else:
        cfg = NetConfig.from_dict(_load_config(args.config))
        params = init_params(cfg, args.seed)
    levels = len(cfg.channels)
    if any(n % 2 ** levels for n in fixed.dims):
        raise ValidationError(f"volume dims {fixed.dims} must be divisible by {2 ** levels}")
    reg = register(params, fixed, moving, cfg, _out_dir(args), save_levels=not args.no_levels)
    print(json.dumps({"max_abs_displacement": float(np.abs(reg.phi.data).max()), "njd": njd(reg.phi)}))
    return 0


def cmd_evaluate(args) -> int:
    pair = Path(args.pair) if args.pair else None

    def pick(explicit, name):
        if explicit is not None:
            return explicit
        return pair / name if pair is not None else None

    phi = _grid(args.phi, "--phi")
    lf = io.load_bundle(_require(pick(args.labels_fixed, "labels_fixed.json"), "fixed labels"))
    lm = io.load_bundle(_require(pick(args.labels_moving, "labels_moving.json"), "moving labels"))
    lmf_path = pick(args.landmarks_fixed, "landmarks_fixed.json")
    lmm_path = pick(args.landmarks_moving, "landmarks_moving.json")
    lmf = io.load_landmarks(lmf_path) if lmf_path and Path(lmf_path).exists() else None
    lmm = io.load_landmarks(lmm_path) if lmm_path and Path(lmm_path).exists() else None
    if (lmf is None) != (lmm is None):
        raise ValidationError("TRE needs both fixed and moving landmarks")
    report = evaluate(phi, lf.labelmap(), lm.labelmap(), lmf, lmm,
                      spacing=tuple(args.spacing) if args.spacing else None, out_dir=_out_dir(args))
    print(report.to_json())
    return 0


def field_stats(phi: Grid3D) -> dict:
    det = jacobian_determinant(phi)
    mag = np.sqrt((phi.data.astype(np.float64) ** 2).sum(axis=0))
    return {
        "dims": list(phi.dims),
        "njd": njd(phi),
        "folding_voxels": int((det <= 0).sum()),
        "jacobian_min": float(det.min()) if det.size else None,
        "jacobian_max": float(det.max()) if det.size else None,
        "displacement_max": float(mag.max()),
        "displacement_mean": float(mag.mean()),
        "grad_penalty": float(grad_penalty(phi.data.astype(np.float64))),
    }


def cmd_field_stats(args) -> int:
    stats = field_stats(_grid(args.phi, "--phi"))
    text = json.dumps(stats, indent=2)
    if args.out:
        (_out_dir(args) / "field_stats.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .. import verify
    dtypes = {"float32": (np.float32,), "float64": (np.float64,), "both": (np.float64, np.float32)}[args.dtype]
    names = set(args.only) if args.only else None
    if names:
        missing = names - {c.name for c in verify.CASES}
        if missing:
            raise ValidationError(f"unknown checks: {sorted(missing)}")
    results = verify.run_suite(dtypes, names, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} [{r.dtype}] error={r.error:.3e} tol={r.tol:.0e}")
    if args.out:
        rows = [{"name": r.name, "dtype": r.dtype, "error": r.error, "tol": r.tol, "ok": r.ok} for r in results]
        (_out_dir(args) / "gradcheck.json").write_text(json.dumps(rows, indent=2) + "\n")
    return 0 if all(r.ok for r in results) else 1


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS for bitwise-reproducible runs")
    common.add_argument("--config", help="JSON file of options for this subcommand")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pyramidreg", description="Deformable 3D registration toolkit.",
                                     epilog=TRE_HELP)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic fixed/moving pair")
    p.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"))
    p.add_argument("--deform-sigma", dest="deform_sigma", type=float)
    p.add_argument("--deform-max", dest="deform_max", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="unsupervised training")
    p.add_argument("--pair", action="append", help="directory written by 'synth' (repeatable)")
    p.add_argument("--fixed")
    p.add_argument("--moving")
    p.add_argument("--preset", choices=("default", "desk"), default="default",
                   help="base settings before --config overrides: the standard schedule or the short desk-scale one")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint manifest to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", parents=[common], help="predict a field with one forward pass")
    p.add_argument("--checkpoint", help="checkpoint manifest (default: freshly initialised network)")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--no-levels", action="store_true", help="skip the per-level field bundles")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="metric report for a field", epilog=TRE_HELP)
    p.add_argument("--phi", required=True)
    p.add_argument("--pair", help="synth directory supplying labels and landmarks")
    p.add_argument("--labels-fixed", dest="labels_fixed")
    p.add_argument("--labels-moving", dest="labels_moving")
    p.add_argument("--landmarks-fixed", dest="landmarks_fixed")
    p.add_argument("--landmarks-moving", dest="landmarks_moving")
    p.add_argument("--spacing", type=float, nargs=3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("field-stats", parents=[common], help="folding and magnitude summary of a field")
    p.add_argument("--phi", required=True)
    p.set_defaults(func=cmd_field_stats, out=None)

    p = sub.add_parser("gradcheck", parents=[common], help="run the gradient verification suite")
    p.add_argument("--dtype", choices=("float32", "float64", "both"), default="both")
    p.add_argument("--only", action="append", help="restrict to a named check (repeatable)")
    p.set_defaults(func=cmd_gradcheck, out=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with deterministic(args.deterministic):
            return args.func(args)
    except (ValidationError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Batch command line: infer, eval, gradcheck, overfit, params.

Machine-readable JSON goes to stdout, human prose to stderr. Exit codes:
0 success, 1 a failed check or bad input file, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config

REFERENCE_BAND = 0.25


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=False))


class CheckFailed(Exception):
    """Raised for conditions that map to exit code 1."""


# --------------------------------------------------------------------------
# infer


def pad_to_multiple(vol: np.ndarray, k: int) -> tuple[np.ndarray, tuple]:
    """Zero-pad the far end of each axis up to a multiple of ``k``."""
    pads = [(0, (-n) % k) for n in vol.shape]
    return np.pad(vol, pads), vol.shape


def zscore(vol: np.ndarray) -> np.ndarray:
    v = vol.astype(np.float64)
    sd = v.std()
    return (v - v.mean()) / (sd if sd > 0 else 1.0)


def cmd_infer(args) -> int:
    from .network import NetworkConfig, forward, predict_mask
    from .nifti import NiftiVolume, read_volume, write_volume
    from .tensor import Tensor, no_grad
    from .weights import load_weights

    weights, cfg_dict = load_weights(args.weights, requires_grad=False)
    cfg = NetworkConfig.from_dict(cfg_dict.get("network", cfg_dict)) if cfg_dict else NetworkConfig()
    weights = weights.astype(config.default_dtype())
    vol = read_volume(args.input)
    x, shape = pad_to_multiple(zscore(vol.voxels), cfg.divisor)
    with no_grad():
        out = forward(Tensor(x[None]), weights, cfg)
    h, w, d = shape
    mask = predict_mask(out.logits, args.threshold)[0, :h, :w, :d]
    write_volume(NiftiVolume(vol.header, mask, vol.spacing), args.output, mask=True)
    _say(f"wrote {args.output}: {int(mask.sum())} foreground voxels of {mask.size}")
    _emit({"output": str(args.output), "shape": list(mask.shape), "foreground": int(mask.sum()),
           "threshold": args.threshold})
    return 0


# --------------------------------------------------------------------------
# eval


def _case_pairs(pred: Path, gt: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise CheckFailed("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.name.split(".")[0], pred, gt)]
    pairs = []
    for p in sorted([*pred.glob("*.nii"), *pred.glob("*.json")]):
        g = gt / p.name
        if not g.exists():
            raise CheckFailed(f"no ground truth for {p.name} in {gt}")
        pairs.append((p.name.split(".")[0], p, g))
    if not pairs:
        raise CheckFailed(f"no .nii or .json volumes in {pred}")
    return pairs


def _evaluate_pair(case, use_header_spacing: bool):
    from .metrics import evaluate_case
    from .nifti import read_volume

    cid, p, g = case
    vp, vg = read_volume(p), read_volume(g)
    if vp.voxels.shape != vg.voxels.shape:
        raise CheckFailed(f"{cid}: shape mismatch {vp.voxels.shape} vs {vg.voxels.shape}")
    spacing = vg.spacing if use_header_spacing else (1.0, 1.0, 1.0)
    pred, gt = vp.voxels > 0.5, vg.voxels > 0.5
    return evaluate_case(pred, gt, spacing, case_id=cid)


def cmd_eval(args) -> int:
    from dataclasses import asdict

    from .metrics import reports_to_csv

    cases = _case_pairs(Path(args.pred), Path(args.gt))
    with ThreadPoolExecutor(max_workers=config.workers()) as pool:
        reports = list(pool.map(lambda c: _evaluate_pair(c, args.spacing_from_header), cases))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            reports_to_csv(reports, fh)
    units = "mm" if args.spacing_from_header else "voxels"
    for r in reports:
        hd = "n/a" if r.hd95_mm is None else f"{r.hd95_mm:.3f}"
        _say(f"{r.case_id}: dice {r.dice:.4f}  iou {r.iou:.4f}  hd95 {hd} ({units})")
    _emit({"distance_units": units, "cases": [asdict(r) for r in reports]})
    return 0


# --------------------------------------------------------------------------
# gradcheck, overfit, params


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(instances=args.instances, seed=args.seed, only=args.only, log=sys.stderr)
    ok = all(r.passed for r in results)
    _emit({"pass": ok, "ops": [r.to_dict() for r in results]})
    _say("all gradient checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_overfit(args) -> int:
    from .train import overfit_sphere
    from .weights import save_weights

    log = open(args.log, "w") if args.log else None
    try:
        res = overfit_sphere(steps=args.steps, size=tuple(args.size), seed=args.seed, log=log)
    finally:
        if log:
            log.close()
    weights = res.pop("weights")
    if args.save_weights:
        from .network import NetworkConfig
        save_weights(weights, args.save_weights, {"network": NetworkConfig().to_dict()})
    _say(f"train Dice after {args.steps} steps: {res['train_dice']:.4f} ({res['seconds']:.0f}s)")
    _emit(res)
    return 0


def cmd_params(args) -> int:
    from .network import REFERENCE_PARAMS, NetworkConfig, param_count

    n = param_count(NetworkConfig())
    dev = n / REFERENCE_PARAMS - 1
    within = abs(dev) <= REFERENCE_BAND
    _emit({"params": n, "params_millions": round(n / 1e6, 2), "reference": REFERENCE_PARAMS,
           "reference_millions": "17.22M", "relative_deviation": dev, "within_band": within})
    msg = f"{n / 1e6:.2f}M parameters vs 17.22M reference ({dev:+.1%})"
    _say(msg if within else f"WARNING: {msg}, outside the +-25% band")
    return 0


# --------------------------------------------------------------------------
# Dispatch


def _positive_int(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _probability(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("threshold must be in [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=_positive_int, default=argparse.SUPPRESS,
                        help="worker threads (results do not depend on this)")
    common.add_argument("--precision", choices=sorted(config.DTYPES), default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="srmamba", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", parents=[common], help="segment a NIfTI volume")
    p.add_argument("--weights", required=True, help="weight manifest (.json)")
    p.add_argument("--input", required=True, help=".nii, or .json for a raw volume")
    p.add_argument("--output", required=True, help=".nii, or .json for a raw volume")
    p.add_argument("--threshold", type=_probability, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="seven-metric report for mask pairs")
    p.add_argument("--pred", required=True, help="mask file or directory of masks")
    p.add_argument("--gt", required=True, help="reference mask file or directory")
    p.add_argument("--spacing-from-header", action="store_true",
                   help="use pixdim spacing (mm) for distances; default is unit spacing")
    p.add_argument("--csv", help="also write the per-case table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="*", help="op name prefixes to run")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overfit", parents=[common], help="fit one synthetic sphere volume")
    p.add_argument("--steps", type=_positive_int, default=200)
    p.add_argument("--size", type=_positive_int, nargs=3, default=[32, 32, 16], metavar=("H", "W", "D"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="JSON-lines loss log")
    p.add_argument("--save-weights", help="write the fitted weights as a manifest")
    p.set_defaults(func=cmd_overfit)

    p = sub.add_parser("params", parents=[common], help="parameter count of the default network")
    p.set_defaults(func=cmd_params)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    from .nifti import NiftiError
    from .tensor import ShapeError

    prec = getattr(args, "precision", None) or config.default_dtype_name()
    nw = getattr(args, "workers", None) or config.workers()
    try:
        with config.precision(prec), config.worker_count(nw):
            return args.func(args)
    except (CheckFailed, NiftiError, ShapeError, FileNotFoundError, ValueError) as e:
        _say(f"error: {e}")
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()

"""``lpqsm`` command line: simulate, reconstruct, train, evaluate, rerun.

Every command writes a JSON manifest next to its outputs that holds the
argv, the fully resolved configuration, seeds, input/output hashes and the
package version. ``lpqsm rerun MANIFEST`` re-executes it.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime
import json
import logging
import os
import sys
import time

import numpy as np

from .. import __version__
from ..baselines import CosmosConfig, SoftThresholdProx, TkdConfig, cosmos_lsq, tkd
from ..dipole import dipole_kernel
from ..metrics import CONVENTIONS, evaluate
from ..phantom import (
    AcqSpec,
    AcqTemplate,
    Cylinder,
    PhantomFamily,
    PhantomSpec,
    Sphere,
    TrainPair,
    ellipsoid_mask,
    make_dataset,
    make_phantom,
    simulate_phase,
    standard_phantom_spec,
)
from ..proxnet import LearnedProx, TrainConfig, load_params, save_params, train
from ..proxnet.io import file_sha256
from ..solver import ReconConfig, pgd_reconstruct
from ..volcore import GridSpec
from . import schemas
from .fileio import (
    orientation_from_dict,
    orientation_to_dict,
    read_orientation,
    read_qvol,
    write_orientation,
    write_qvol,
    write_text_atomic,
)

log = logging.getLogger("lpqsm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

RECON_DEFAULTS = {
    "tkd": {"threshold": 0.2},
    "cosmos": {"threshold": 1e-6},
    "pgd-l1": {"alpha": 1.0, "iterations": 50, "tau": 1e-3},
    "lpcnn": {},
}


class UsageError(Exception):
    pass


def _sha(path) -> str:
    return file_sha256(path)


def _write_manifest(path, command, argv, config, inputs, outputs, seeds, started, extra=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {k: {"path": os.fspath(p), "sha256": _sha(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": os.fspath(p), "sha256": _sha(p)} for k, p in outputs.items()},
        "started_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    write_text_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _grid_from(dims, voxel) -> GridSpec:
    return GridSpec(tuple(int(d) for d in dims), tuple(float(v) for v in voxel))


# --- simulate ---------------------------------------------------------------------


def phantom_spec_from_config(cfg: dict) -> PhantomSpec:
    grid = _grid_from(cfg["dims"], cfg.get("voxel_size", (1.0, 1.0, 1.0)))
    if cfg.get("preset") == "standard":
        spec = standard_phantom_spec(grid)
        return PhantomSpec(grid, spec.shapes, cfg.get("background_chi", 0.0), cfg.get("smooth_sigma"))
    shapes = []
    for s in cfg.get("shapes", []):
        if s["type"] == "sphere":
            shapes.append(Sphere(tuple(s["center"]), s["radius"], s["delta_chi"]))
        else:
            shapes.append(Cylinder(tuple(s["point"]), tuple(s["axis"]), s["radius"], s["delta_chi"],
                                   s.get("length")))
    return PhantomSpec(grid, tuple(shapes), cfg.get("background_chi", 0.0), cfg.get("smooth_sigma"))


def cmd_simulate(args, argv):
    started = time.perf_counter()
    pcfg = schemas.load_json(args.phantom, schemas.PHANTOM)
    acfg = schemas.load_json(args.acq, schemas.ACQUISITION)
    spec = phantom_spec_from_config(pcfg)
    grid = spec.grid
    orients = [orientation_from_dict(o) for o in acfg["orientations"]]
    seed = int(acfg.get("seed", 0))
    frac = acfg.get("mask_fraction")
    mask = ellipsoid_mask(grid, frac).astype(float) if frac else None

    x = make_phantom(spec)
    ys = simulate_phase(x, AcqSpec(orients, float(acfg["noise_sigma"]), seed, mask), grid)

    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    outputs = {"gt": os.path.join(out, "gt.qvol")}
    write_qvol(outputs["gt"], x, grid.voxel_size)
    if mask is not None:
        outputs["mask"] = os.path.join(out, "mask.qvol")
        write_qvol(outputs["mask"], mask, grid.voxel_size)
    for i, (y, o) in enumerate(zip(ys, orients)):
        outputs[f"y_{i}"] = os.path.join(out, f"y_{i}.qvol")
        outputs[f"orient_{i}"] = os.path.join(out, f"orient_{i}.json")
        write_qvol(outputs[f"y_{i}"], y, grid.voxel_size)
        write_orientation(outputs[f"orient_{i}"], o)

    resolved = {
        "phantom": pcfg,
        "acquisition": {**acfg, "seed": seed, "mask_fraction": frac,
                        "orientations": [orientation_to_dict(o) for o in orients]},
    }
    _write_manifest(os.path.join(out, "manifest.json"), "simulate", argv, resolved,
                    {"phantom": args.phantom, "acq": args.acq}, outputs, {"noise": seed}, started)
    log.info("simulated %d orientation(s) on %s into %s", len(orients), grid.dims, out)
    return EXIT_OK


# --- reconstruct --------------------------------------------------------------------


def _load_inputs(pairs):
    ys, ops, voxel = [], [], None
    dims = None
    for ypath, opath in pairs:
        y, vox = read_qvol(ypath)
        if dims is None:
            dims, voxel = y.shape, vox
        elif y.shape != dims or vox != voxel:
            raise ValueError(f"grid mismatch: {ypath} has {y.shape} @ {vox}, expected {dims} @ {voxel}")
        grid = _grid_from(dims, voxel)
        ops.append(dipole_kernel(grid, read_orientation(opath)))
        ys.append(y.astype(np.float64))
    return ys, ops, voxel


def resolve_recon_config(method: str, file_cfg: dict, args, weights_meta=None) -> dict:
    cfg = dict(RECON_DEFAULTS[method])
    if method == "lpcnn":
        meta = weights_meta or {}
        cfg["alpha"] = float(meta.get("alpha", 1.0))
        cfg["iterations"] = int(meta.get("unroll_k", 3))
    cfg.update(file_cfg)
    for key in ("threshold", "alpha", "iterations", "tau"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    allowed = {"tkd": {"threshold"}, "cosmos": {"threshold"},
               "pgd-l1": {"alpha", "iterations", "tau"}, "lpcnn": {"alpha", "iterations"}}[method]
    extra = set(cfg) - allowed
    if extra:
        raise UsageError(f"option(s) {sorted(extra)} do not apply to method {method!r}")
    return cfg


def reconstruct_volumes(method: str, ys, ops, cfg: dict, params=None) -> np.ndarray:
    """Library-level reconstruction shared by the CLI and its tests."""
    if method == "tkd":
        if len(ys) != 1:
            raise UsageError("tkd takes exactly one input")
        return tkd(ys[0], ops[0], TkdConfig(cfg["threshold"]))
    if method == "cosmos":
        return cosmos_lsq(ys, ops, CosmosConfig(cfg["threshold"]))
    rc = ReconConfig(alpha=cfg["alpha"], iterations=cfg["iterations"])
    prox = SoftThresholdProx(cfg["tau"]) if method == "pgd-l1" else LearnedProx(params)
    x, _ = pgd_reconstruct(ops, ys, prox, rc)
    return x


def cmd_reconstruct(args, argv):
    started = time.perf_counter()
    if args.method == "lpcnn" and not args.weights:
        raise UsageError("method lpcnn requires --weights")
    if args.method != "lpcnn" and args.weights:
        raise UsageError(f"--weights does not apply to method {args.method!r}")
    file_cfg = schemas.load_json(args.config, schemas.RECONSTRUCT) if args.config else {}
    params = load_params(args.weights) if args.weights else None
    cfg = resolve_recon_config(args.method, file_cfg, args, params.meta if params else None)
    ys, ops, voxel = _load_inputs(args.input)
    x = reconstruct_volumes(args.method, ys, ops, cfg, params)
    write_qvol(args.out, x, voxel)

    inputs = {}
    for i, (yp, op) in enumerate(args.input):
        inputs[f"y_{i}"], inputs[f"orient_{i}"] = yp, op
    if args.config:
        inputs["config"] = args.config
    extra = {}
    if args.weights:
        inputs["weights"] = args.weights
        extra["weights_sha256"] = _sha(args.weights)
    _write_manifest(args.out + ".manifest.json", "reconstruct", argv,
                    {"method": args.method, "n_inputs": len(ys), **cfg}, inputs, {"recon": args.out},
                    {}, started, extra)
    log.info("%s reconstruction from %d input(s) -> %s", args.method, len(ys), args.out)
    return EXIT_OK


# --- train ----------------------------------------------------------------------------


def generator_dataset(gen: dict) -> list:
    grid = _grid_from(gen["dims"], gen.get("voxel_size", (1.0, 1.0, 1.0)))
    fam_keys = ("n_shapes", "radius_mm", "chi_range", "cylinder_fraction", "smooth_sigma")
    fam = PhantomFamily(grid, **{k: (tuple(gen[k]) if isinstance(gen[k], list) else gen[k])
                                 for k in fam_keys if k in gen})
    acq = AcqTemplate(noise_sigma=float(gen["noise_sigma"]),
                      max_tilt_deg=float(gen.get("max_tilt_deg", 45.0)),
                      n_orientations=int(gen.get("n_orientations", 1)))
    return make_dataset(int(gen["n_pairs"]), fam, acq, int(gen["seed"]))


def _simulation_dirs(root):
    if os.path.exists(os.path.join(root, "gt.qvol")):
        return [root]
    subs = sorted(os.path.join(root, d) for d in os.listdir(root))
    found = [d for d in subs if os.path.exists(os.path.join(d, "gt.qvol"))]
    if not found:
        raise ValueError(f"{root}: no simulate outputs (gt.qvol) found")
    return found


def directory_dataset(root) -> tuple[list, dict]:
    """Pairs from ``simulate`` output directories: (gt, y_i, orient_i)."""
    pairs, files = [], {}
    for d in _simulation_dirs(root):
        x, vox = read_qvol(os.path.join(d, "gt.qvol"))
        grid = _grid_from(x.shape, vox)
        files[os.path.join(d, "gt.qvol")] = None
        i = 0
        while os.path.exists(os.path.join(d, f"y_{i}.qvol")):
            yp, op = os.path.join(d, f"y_{i}.qvol"), os.path.join(d, f"orient_{i}.json")
            y, yvox = read_qvol(yp)
            if y.shape != x.shape or yvox != vox:
                raise ValueError(f"grid mismatch between {yp} and its gt")
            pairs.append(TrainPair(y=y.astype(np.float64), op=dipole_kernel(grid, read_orientation(op)),
                                   x_c=x.astype(np.float64), seed=(d, i)))
            files[yp] = files[op] = None
            i += 1
    return pairs, files


def cmd_train(args, argv):
    started = time.perf_counter()
    raw = schemas.load_json(args.config, schemas.TRAIN)
    gen = raw.pop("generator", None)
    if (gen is None) == (args.data is None):
        raise UsageError("give exactly one data source: --data DIR or a 'generator' block in the config")
    cfg = TrainConfig(**raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if gen is not None:
        dataset, data_files = generator_dataset(gen), {}
    else:
        dataset, data_files = directory_dataset(args.data)

    params, history = train(dataset, cfg)
    save_params(params, args.out)
    hist_path = args.out + ".loss.csv"
    write_text_atomic(hist_path, "epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(history)))

    inputs = {"config": args.config}
    inputs.update({f"data_{i}": p for i, p in enumerate(data_files)})
    resolved = cfg.to_dict()
    resolved["generator"] = gen
    resolved["n_pairs"] = len(dataset)
    resolved["input_scaling"] = "none (ppm)"
    seeds = {"train": cfg.seed}
    if gen is not None:
        seeds["data"] = gen["seed"]
    _write_manifest(args.out + ".manifest.json", "train", argv, resolved, inputs,
                    {"weights": args.out, "loss_history": hist_path}, seeds, started,
                    {"weights_sha256": _sha(args.out)})
    log.info("trained %d epoch(s) on %d pair(s) -> %s", cfg.epochs, len(dataset), args.out)
    return EXIT_OK


# --- evaluate -------------------------------------------------------------------------


def cmd_evaluate(args, argv):
    started = time.perf_counter()
    pred, pvox = read_qvol(args.pred)
    gt, gvox = read_qvol(args.gt)
    if pred.shape != gt.shape or pvox != gvox:
        raise ValueError(f"grid mismatch: pred {pred.shape} @ {pvox} vs gt {gt.shape} @ {gvox}")
    mask = None
    inputs = {"pred": args.pred, "gt": args.gt}
    if args.mask:
        m, mvox = read_qvol(args.mask)
        if m.shape != gt.shape:
            raise ValueError(f"grid mismatch: mask {m.shape} vs gt {gt.shape}")
        mask = m != 0
        inputs["mask"] = args.mask
    report = evaluate(pred.astype(np.float64), gt.astype(np.float64), mask)
    write_text_atomic(args.out, report.to_csv())
    _write_manifest(args.out + ".manifest.json", "evaluate", argv, {"mask": bool(args.mask)},
                    inputs, {"metrics": args.out}, {}, started, {"conventions": CONVENTIONS})
    log.info("NRMSE %.3f%%  PSNR %.3f dB  HFEN %.3f%%  SSIM %.4f",
             report.nrmse_percent, report.psnr_db, report.hfen_percent, report.ssim)
    return EXIT_OK


# --- rerun ------------------------------------------------------------------------------


@contextlib.contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_rerun(args, argv):
    with open(args.manifest, encoding="utf-8") as f:
        manifest = json.load(f)
    if "argv" not in manifest or "cwd" not in manifest:
        raise ValueError(f"{args.manifest}: not an lpqsm manifest")
    if manifest.get("version") != __version__:
        log.warning("manifest written by version %s, running %s", manifest.get("version"), __version__)
    with _cwd(manifest["cwd"]):
        return run(manifest["argv"])


# --- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpqsm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="phantom + simulated local phase")
    s.add_argument("--phantom", required=True, help="phantom JSON")
    s.add_argument("--acq", required=True, help="acquisition JSON")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="susceptibility from one or more phase inputs")
    r.add_argument("--method", required=True, choices=sorted(RECON_DEFAULTS))
    r.add_argument("--input", nargs=2, action="append", required=True, metavar=("Y_QVOL", "ORIENT_JSON"),
                   help="phase volume and its orientation; repeat for multiple orientations")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="reconstruction JSON (threshold, alpha, iterations, tau)")
    r.add_argument("--weights", help="LP-CNN weight file (lpcnn only)")
    r.add_argument("--threshold", type=float)
    r.add_argument("--alpha", type=float)
    r.add_argument("--iterations", type=int)
    r.add_argument("--tau", type=float)
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="train the learned proximal network")
    t.add_argument("--config", required=True, help="training JSON (TrainConfig fields, optional generator)")
    t.add_argument("--data", help="directory of simulate outputs")
    t.add_argument("--out", required=True, help="weight file")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="NRMSE, PSNR, HFEN and SSIM as a one-row CSV")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mask")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("rerun", help="re-execute a command from its manifest")
    m.add_argument("manifest")
    m.set_defaults(func=cmd_rerun)
    return p


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"lpqsm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"lpqsm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"lpqsm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None) -> int:
    code = run(sys.argv[1:] if argv is None else list(argv))
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()

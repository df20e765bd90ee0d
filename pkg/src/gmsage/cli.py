"""Command-line pipeline: simulate, estimate, evaluate, export-pdp, run-all.

Exit codes: 0 success, 2 usage or configuration error, 3 malformed input
file, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .channel import SNS_PROFILES, add_noise, apply_sns_profile, path_reference_power, \
    synthesize_channel, trace_scene_paths
from .config import PRESETS, ConfigError, RunConfig, load_config, load_preset
from .evaluation import GroundTruth, build_report, concatenated_pdp, emit_report, write_pdp_csv
from .geometry import GeometryError
from .reference import EmptyChannelError
from .sage import InfeasiblePathError, run_gm_sage
from .serialize import (DocumentError, estimates_from_dict, read_json, state_to_dict,
                        truth_from_dict, truth_to_dict, write_json)
from .tensorio import TensorFormatError, read_tensor, write_tensor

log = logging.getLogger("gmsage")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4

OUT_ENV = "GMSAGE_OUT"
TENSOR_FILE = "channel.gmct"
TRUTH_FILE = "truth.json"
ESTIMATES_FILE = "estimates.json"
REPORT_DIR = "report"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "gmsage-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    cfg = load_config(args.config) if args.config else load_preset(args.preset or "blocked")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    overrides = {}
    for flag, key in (("grid1", "grid1"), ("grid2", "grid2"),
                      ("max_iters", "max_iters"), ("tol", "convergence_tol")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        try:
            cfg.estimator = dataclasses.replace(cfg.estimator, **overrides)
        except ValueError as exc:
            raise ConfigError(f"estimator: {exc}") from None
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    syn = cfg.synthesis
    paths = trace_scene_paths(cfg.scene, include_los=syn.include_los, amplitude=syn.amplitude)
    if syn.sns_profile not in SNS_PROFILES:
        raise ConfigError(f"synthesis.sns_profile must be one of {sorted(SNS_PROFILES)}")
    paths = [apply_sns_profile(p, SNS_PROFILES[syn.sns_profile]) for p in paths]
    if not paths:
        raise ConfigError("scene produces no propagation path (no walls and LOS disabled)")
    tensor = synthesize_channel(paths, cfg.rf)
    if not args.no_noise:
        if cfg.seed is None:
            raise ConfigError("seed is required for a noisy simulation (config 'seed' or --seed)")
        tensor = add_noise(tensor, cfg.rf.snr_db, cfg.seed, path_reference_power(paths))
    write_tensor(out / TENSOR_FILE, tensor)
    truth = GroundTruth.from_paths(paths)
    write_json(out / TRUTH_FILE, truth_to_dict(truth, {
        "noise_variance": tensor.meta.get("noise_variance", 0.0),
        "seed": cfg.seed,
        "snr_db": None if not np.isfinite(tensor.snr_db) else tensor.snr_db,
    }))
    print(f"simulated {len(paths)} paths, tensor {tensor.dims} -> {out / TENSOR_FILE}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    tensor_path = Path(args.tensor) if args.tensor else out / TENSOR_FILE
    m, n = len(cfg.scene.tx.positions), len(cfg.scene.rx.positions)
    tensor = read_tensor(tensor_path, expected_dims=(m, n, cfg.rf.sub_band_count))
    if not np.isclose(tensor.sub_bandwidth, cfg.rf.sub_bandwidth):
        raise TensorFormatError(f"{tensor_path}: sub-bandwidth {tensor.sub_bandwidth:g} Hz "
                                f"does not match config {cfg.rf.sub_bandwidth:g} Hz")
    state = run_gm_sage(tensor.values, cfg.scene, cfg.rf, cfg.estimator)
    write_json(out / ESTIMATES_FILE, state_to_dict(state, {"config": cfg.echo()}))
    status = "converged" if state.converged else "not converged"
    print(f"estimated {len(state.estimates)} paths in {state.iteration} sweeps ({status}) "
          f"-> {out / ESTIMATES_FILE}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    est_path = Path(args.estimates) if args.estimates else out / ESTIMATES_FILE
    truth_path = Path(args.truth) if args.truth else out / TRUTH_FILE
    estimates, doc = estimates_from_dict(read_json(est_path))
    truth = truth_from_dict(read_json(truth_path))
    report = build_report(
        estimates, truth, cfg.rf.delay_bin,
        objective_trace=doc.get("objective_trace", []),
        noise_variance=doc.get("noise_variance", float("nan")),
        iterations=doc.get("iterations", 0),
        converged=doc.get("converged", False),
        runtime=doc.get("runtime_s", 0.0),
        config=cfg.echo(),
        exempt=cfg.exempt,
        floor_db=cfg.floor_db,
    )
    files = emit_report(report, out / REPORT_DIR)
    print(files["table"].read_text(), end="")
    return EXIT_OK


def cmd_export_pdp(args) -> int:
    out = _out_dir(args)
    tensor_path = Path(args.tensor) if args.tensor else out / TENSOR_FILE
    tensor = read_tensor(tensor_path)
    m = tensor.dims[0]
    if not 1 <= args.tx <= m:
        print(f"error: --tx must lie in 1..{m}, got {args.tx}", file=sys.stderr)
        return EXIT_CONFIG
    distances, pdp = concatenated_pdp(tensor.values, args.tx - 1, tensor.sub_bandwidth)
    target = Path(args.csv) if args.csv else out / f"pdp_tx{args.tx}.csv"
    write_pdp_csv(target, distances, pdp)
    print(f"wrote {pdp.shape[0]}x{pdp.shape[1]} PDP -> {target}")
    return EXIT_OK


def cmd_run_all(args) -> int:
    for step in (cmd_simulate, cmd_estimate, cmd_evaluate, cmd_export_pdp):
        code = step(args)
        if code != EXIT_OK:
            return code
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scene/run YAML document")
    common.add_argument("--preset", choices=PRESETS, help="shipped scenario (default: blocked)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./gmsage-out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log estimator progress")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--seed", type=int, help="noise seed (overrides the config)")
    sim.add_argument("--no-noise", action="store_true", help="write the noiseless tensor")

    est = argparse.ArgumentParser(add_help=False)
    est.add_argument("--grid1", type=float, help="one-bounce grid step [m]")
    est.add_argument("--grid2", type=float, help="two-bounce grid step [m]")
    est.add_argument("--max-iters", type=int, help="maximum number of sweeps")
    est.add_argument("--tol", type=float, help="relative objective decrease to stop at")

    tensor = argparse.ArgumentParser(add_help=False)
    tensor.add_argument("--tensor", help=f"channel tensor file (default: <out>/{TENSOR_FILE})")

    pdp = argparse.ArgumentParser(add_help=False)
    pdp.add_argument("--tx", type=int, default=1, help="Tx element, 1-based (default 1)")
    pdp.add_argument("--csv", help="output CSV (default: <out>/pdp_tx<m>.csv)")

    files = argparse.ArgumentParser(add_help=False)
    files.add_argument("--estimates", help=f"estimates file (default: <out>/{ESTIMATES_FILE})")
    files.add_argument("--truth", help=f"truth file (default: <out>/{TRUTH_FILE})")

    parser = argparse.ArgumentParser(
        prog="gmsage",
        description="Simulate partially blocked multi-bounce MIMO channels and localise wall "
                    "scatterers with a dictionary-aided SAGE estimator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common, sim],
                   help="trace the scene and write tensor + truth").set_defaults(func=cmd_simulate)
    sub.add_parser("estimate", parents=[common, est, tensor],
                   help="run the estimator on a tensor file").set_defaults(func=cmd_estimate)
    sub.add_parser("evaluate", parents=[common, files],
                   help="score estimates against truth").set_defaults(func=cmd_evaluate)
    sub.add_parser("export-pdp", parents=[common, tensor, pdp],
                   help="write the concatenated PDP of one Tx element").set_defaults(func=cmd_export_pdp)
    sub.add_parser("run-all", parents=[common, sim, est, tensor, pdp, files],
                   help="simulate, estimate, evaluate and export").set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TensorFormatError, DocumentError, FileNotFoundError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (EmptyChannelError, InfeasiblePathError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Scoring of estimates against traced ground truth, plus report/CSV export.

Estimates are paired with truth paths by reference-channel delay (a unique
assignment), never by list position, so the report does not depend on the
order in which the estimator emitted its paths.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .channel import PropagationPath
from .geometry import SPEED_OF_LIGHT, Scene

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
# estimates farther than this from every truth delay count as spurious
MATCH_GAP_BINS = 3.0
DEFAULT_FLOOR_DB = -40.0


class BounceClassMismatch(ValueError):
    """Estimate and truth carry different numbers of scatterers."""


@dataclass
class TruthPath:
    label: str
    bounce_order: int
    walls: tuple
    scatterers: np.ndarray
    reference_delay: float
    blockage_mask: np.ndarray
    reference_amplitude: complex = 1.0 + 0j

    def __post_init__(self):
        self.walls = tuple(self.walls)
        self.scatterers = np.asarray(self.scatterers, dtype=float).reshape(-1, 2)
        self.blockage_mask = np.asarray(self.blockage_mask, dtype=np.uint8)


@dataclass
class GroundTruth:
    """Reference-channel scatterers of every simulated path."""

    paths: list
    dims: tuple

    @classmethod
    def from_paths(cls, paths: Sequence[PropagationPath]) -> "GroundTruth":
        out = []
        dims = None
        for p in paths:
            dims = p.delays.shape
            out.append(TruthPath(p.label, p.bounce_order, p.walls, p.scatterers_ref,
                                 float(p.delays[0, 0]), p.blockage_mask, p.reference_amplitude))
        return cls(out, tuple(dims) if dims else (0, 0))

    def check_on_walls(self, scene: Scene, tol: float = 1e-9) -> None:
        for p in self.paths:
            for s, label in zip(p.scatterers, p.walls):
                if abs(scene.wall(label).side(s)) > tol:
                    raise ValueError(f"truth scatterer {s.tolist()} of {p.label} is off wall {label}")


def localization_error(est, truth) -> list:
    """Per-scatterer Euclidean distance, matched in bounce order."""
    est = np.asarray(est, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(est) != len(truth):
        raise BounceClassMismatch(f"{len(est)} estimated vs {len(truth)} true scatterers")
    return [float(d) for d in np.linalg.norm(est - truth, axis=1)]


def concatenated_pdp(values: np.ndarray, tx: int, sub_bandwidth: float):
    """Delay profile of Tx element ``tx`` (zero-based) to every Rx element.

    Returns ``(distances, pdp)`` with ``pdp`` of shape ``(N, P)``. The
    IDFT is unitary, so each row sums to the energy of its channel.
    """
    values = np.asarray(values)
    m, _, p = values.shape
    if not 0 <= tx < m:
        raise IndexError(f"tx index {tx} outside 0..{m - 1}")
    h = np.fft.ifft(values[tx], axis=-1) * np.sqrt(p)
    distances = np.arange(p) * SPEED_OF_LIGHT / (p * sub_bandwidth)
    return distances, np.abs(h) ** 2


def sns_amplitude_map(estimates: Sequence, tx: int = 0,
                      floor_db: Optional[float] = DEFAULT_FLOOR_DB) -> np.ndarray:
    """``|alpha_bar|`` in dB for one Tx element, one row per path.

    Values are clipped at ``floor_db`` below the map maximum (``None`` keeps
    the raw values, with exact zeros mapped to ``-inf``).
    """
    if not estimates:
        raise ValueError("amplitude map needs at least one estimate")
    mag = np.array([np.abs(e.equivalent_amplitude[tx]) for e in estimates])
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    if floor_db is not None:
        db = np.maximum(db, np.max(db) + floor_db)
    return db


def blockage_confusion(estimate, truth) -> tuple:
    """``(tp, fp, tn, fn)`` with "visible" (1) as the positive class."""
    est = np.asarray(estimate).astype(bool).ravel()
    tru = np.asarray(truth).astype(bool).ravel()
    if est.shape != tru.shape:
        raise ValueError(f"mask sizes differ: {est.size} vs {tru.size}")
    tp = int(np.sum(est & tru))
    fp = int(np.sum(est & ~tru))
    tn = int(np.sum(~est & ~tru))
    fn = int(np.sum(~est & tru))
    return tp, fp, tn, fn


def match_by_delay(est_delays, truth_delays, delay_bin: float,
                   max_gap_bins: float = MATCH_GAP_BINS):
    """Unique delay-based pairing.

    Returns ``(pairs, spurious, missed)``: ``pairs`` maps estimate index to
    truth index, ``spurious`` lists unpaired estimates and ``missed``
    unpaired truth paths.
    """
    est = np.asarray(est_delays, dtype=float)
    tru = np.asarray(truth_delays, dtype=float)
    pairs = {}
    if len(est) and len(tru):
        cost = np.abs(est[:, None] - tru[None, :]) / delay_bin
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            if cost[r, c] <= max_gap_bins:
                pairs[int(r)] = int(c)
    spurious = [i for i in range(len(est)) if i not in pairs]
    missed = [j for j in range(len(tru)) if j not in pairs.values()]
    return pairs, spurious, missed


@dataclass
class PathRecord:
    label: str
    truth_walls: tuple
    truth_scatterers: list
    estimate_class: str
    estimate_walls: tuple
    estimate_scatterers: list
    errors: Optional[list]
    class_correct: bool
    walls_correct: bool
    confusion: dict
    scored: bool = True
    ambiguity_exempt: bool = False
    delay_gap_bins: float = 0.0


@dataclass
class ReconstructionReport:
    paths: list
    objective_trace: list
    noise_variance: float
    iterations: int
    converged: bool
    config: dict = field(default_factory=dict)
    spurious: list = field(default_factory=list)
    missed: list = field(default_factory=list)
    runtime: float = 0.0
    amplitude_map: Optional[np.ndarray] = field(default=None, repr=False)
    amplitude_labels: list = field(default_factory=list)

    def record(self, label: str) -> PathRecord:
        for r in self.paths:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "paths": [_record_dict(r) for r in self.paths],
            "spurious": self.spurious,
            "missed": self.missed,
            "objective_trace": [float(v) for v in self.objective_trace],
            "noise_variance": float(self.noise_variance),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "config": self.config,
        }


def _record_dict(r: PathRecord) -> dict:
    return {
        "label": r.label,
        "truth_walls": list(r.truth_walls),
        "truth_scatterers": r.truth_scatterers,
        "estimate_class": r.estimate_class,
        "estimate_walls": list(r.estimate_walls),
        "estimate_scatterers": r.estimate_scatterers,
        "errors_m": r.errors,
        "class_correct": r.class_correct,
        "walls_correct": r.walls_correct,
        "confusion": r.confusion,
        "scored": r.scored,
        "ambiguity_exempt": r.ambiguity_exempt,
        "delay_gap_bins": r.delay_gap_bins,
    }


def _rounded(points) -> list:
    return [[round(float(x), 6) for x in p] for p in np.asarray(points).reshape(-1, 2)]


def build_report(estimates: Sequence, truth: GroundTruth, delay_bin: float, *,
                 objective_trace=(), noise_variance: float = float("nan"),
                 iterations: int = 0, converged: bool = False, runtime: float = 0.0,
                 config: Optional[dict] = None, exempt: Sequence[str] = ("left->right",),
                 tx: int = 0, floor_db: Optional[float] = DEFAULT_FLOOR_DB) -> ReconstructionReport:
    """Pair estimates with truth and score them.

    LOS truth paths are kept in the table but not scored. Paths named in
    ``exempt`` are scored but flagged as subject to direction ambiguity.
    """
    est_delays = [e.reference_delay for e in estimates]
    tru_delays = [t.reference_delay for t in truth.paths]
    pairs, spurious, missed = match_by_delay(est_delays, tru_delays, delay_bin)
    by_truth = {j: i for i, j in pairs.items()}
    records = []
    for j, t in enumerate(truth.paths):
        if j not in by_truth:
            continue
        e = estimates[by_truth[j]]
        try:
            errors = localization_error(e.scatterers, t.scatterers)
        except BounceClassMismatch:
            errors = None
        tp, fp, tn, fn = blockage_confusion(e.blockage_estimate, t.blockage_mask)
        records.append(PathRecord(
            label=t.label,
            truth_walls=t.walls,
            truth_scatterers=_rounded(t.scatterers),
            estimate_class=e.bounce_class,
            estimate_walls=tuple(e.walls),
            estimate_scatterers=_rounded(e.scatterers),
            errors=None if errors is None else [round(v, 6) for v in errors],
            class_correct=e.bounce_order == t.bounce_order,
            walls_correct=tuple(e.walls) == t.walls,
            confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
            scored=t.bounce_order > 0,
            ambiguity_exempt=t.label in exempt,
            delay_gap_bins=round(abs(e.reference_delay - t.reference_delay) / delay_bin, 6),
        ))
    ordered = [estimates[by_truth[j]] for j in range(len(truth.paths)) if j in by_truth]
    amp = sns_amplitude_map(ordered, tx, floor_db) if ordered else None
    return ReconstructionReport(
        paths=records,
        objective_trace=list(objective_trace),
        noise_variance=noise_variance,
        iterations=iterations,
        converged=converged,
        config=dict(config or {}),
        spurious=[{"index": i, "reference_delay": float(est_delays[i])} for i in spurious],
        missed=[truth.paths[j].label for j in missed],
        runtime=runtime,
        amplitude_map=amp,
        amplitude_labels=[r.label for r in records],
    )


def _fmt_points(points) -> str:
    return " ".join(f"({x:.2f}, {y:.2f})" for x, y in points) or "-"


def format_table(report: ReconstructionReport) -> str:
    """Text table with truth, estimate and error per path."""
    head = f"{'path':<14} {'truth':<28} {'estimate':<28} {'class':<12} errors [m]"
    lines = [head, "-" * len(head)]
    for r in report.paths:
        if r.errors is None:
            err = "class mismatch"
        else:
            err = " ".join(f"{v:.2f}" for v in r.errors) or "-"
        if not r.scored:
            err += " (not scored)"
        if r.ambiguity_exempt:
            err += " (direction ambiguity)"
        lines.append(f"{r.label:<14} {_fmt_points(r.truth_scatterers):<28} "
                     f"{_fmt_points(r.estimate_scatterers):<28} {r.estimate_class:<12} {err}")
    for s in report.spurious:
        lines.append(f"spurious estimate at {s['reference_delay'] * 1e9:.3f} ns")
    for label in report.missed:
        lines.append(f"missed truth path {label}")
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_pdp_csv(path, distances, pdp) -> None:
    """One row per Rx element, one column per distance bin."""
    header = ["rx_index"] + [f"{d:.6f}m" for d in distances]
    rows = [[n + 1] + [f"{v:.9e}" for v in row] for n, row in enumerate(pdp)]
    _write_csv(Path(path), header, rows)


def emit_report(report: ReconstructionReport, out_dir, pdp=None) -> dict:
    """Write ``report.json``, ``report.txt`` and CSV exports into ``out_dir``.

    ``report.json`` holds no timing data, so repeated runs are byte-identical;
    runtime goes to ``run_info.json``. Returns the written paths by name.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {"report": out / "report.json", "table": out / "report.txt",
                 "trace": out / "objective_trace.csv", "run_info": out / "run_info.json"}
        files["report"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        files["table"].write_text(format_table(report))
        _write_csv(files["trace"], ["sweep", "objective"],
                   [[i, f"{v:.12e}"] for i, v in enumerate(report.objective_trace)])
        files["run_info"].write_text(json.dumps({"runtime_s": report.runtime}, indent=2) + "\n")
        if report.amplitude_map is not None:
            files["amplitude_map"] = out / "amplitude_map.csv"
            n = report.amplitude_map.shape[1]
            _write_csv(files["amplitude_map"], ["path"] + [f"rx{k + 1}_dB" for k in range(n)],
                       [[label] + [f"{v:.6f}" for v in row]
                        for label, row in zip(report.amplitude_labels, report.amplitude_map)])
        if pdp is not None:
            files["pdp"] = out / "pdp.csv"
            write_pdp_csv(files["pdp"], *pdp)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return files

"""JSON documents for ground truth and estimates.

Complex numbers are stored as ``[re, im]`` pairs; per-channel arrays as
nested lists indexed ``[m][n]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .evaluation import GroundTruth, TruthPath
from .sage import PathEstimate

TRUTH_SCHEMA = "gmsage-truth/1"
ESTIMATES_SCHEMA = "gmsage-estimates/1"


class DocumentError(ValueError):
    """A JSON document is missing fields or has the wrong schema."""


def _c2l(values) -> list:
    arr = np.asarray(values, dtype=complex)
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def _l2c(data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


def truth_to_dict(truth: GroundTruth, extra: dict | None = None) -> dict:
    doc = {
        "schema": TRUTH_SCHEMA,
        "dims": list(truth.dims),
        "paths": [{
            "label": p.label,
            "bounce_order": p.bounce_order,
            "walls": list(p.walls),
            "scatterers": p.scatterers.tolist(),
            "reference_delay": p.reference_delay,
            "reference_amplitude": _c2l(p.reference_amplitude),
            "blockage_mask": p.blockage_mask.tolist(),
        } for p in truth.paths],
    }
    doc.update(extra or {})
    return doc


def truth_from_dict(doc: dict) -> GroundTruth:
    _check_schema(doc, TRUTH_SCHEMA)
    try:
        paths = [TruthPath(
            label=p["label"],
            bounce_order=int(p["bounce_order"]),
            walls=tuple(p["walls"]),
            scatterers=np.asarray(p["scatterers"], dtype=float),
            reference_delay=float(p["reference_delay"]),
            blockage_mask=np.asarray(p["blockage_mask"], dtype=np.uint8),
            reference_amplitude=complex(_l2c(p["reference_amplitude"])),
        ) for p in doc["paths"]]
        return GroundTruth(paths, tuple(doc["dims"]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise DocumentError(f"malformed truth document: {exc}") from exc


def estimate_to_dict(e: PathEstimate) -> dict:
    objective = float(e.objective_value)
    return {
        "bounce_class": e.bounce_class,
        "walls": list(e.walls),
        "scatterers": np.asarray(e.scatterers).tolist(),
        "reference_delay": float(e.reference_delay),
        "reference_amplitude": _c2l(e.reference_amplitude),
        "objective_value": objective if np.isfinite(objective) else None,
        "delays": np.asarray(e.delays).tolist(),
        "equivalent_amplitude": _c2l(e.equivalent_amplitude),
        "blockage_estimate": np.asarray(e.blockage_estimate).astype(int).tolist(),
    }


def estimate_from_dict(d: dict) -> PathEstimate:
    objective = d.get("objective_value")
    return PathEstimate(
        bounce_class=d["bounce_class"],
        scatterers=np.asarray(d["scatterers"], dtype=float).reshape(-1, 2),
        walls=tuple(d["walls"]),
        reference_delay=float(d["reference_delay"]),
        delays=np.asarray(d["delays"], dtype=float),
        equivalent_amplitude=_l2c(d["equivalent_amplitude"]),
        blockage_estimate=np.asarray(d["blockage_estimate"], dtype=np.uint8),
        objective_value=float("nan") if objective is None else float(objective),
        reference_amplitude=complex(_l2c(d["reference_amplitude"])),
    )


def state_to_dict(state, extra: dict | None = None) -> dict:
    doc = {
        "schema": ESTIMATES_SCHEMA,
        "iterations": int(state.iteration),
        "converged": bool(state.converged),
        "noise_variance": float(state.noise_variance),
        "beta": np.asarray(state.beta).tolist(),
        "objective_trace": [float(v) for v in state.objective_trace],
        "runtime_s": float(state.runtime),
        "estimates": [estimate_to_dict(e) for e in state.estimates],
    }
    doc.update(extra or {})
    return doc


def estimates_from_dict(doc: dict):
    """Returns ``(estimates, doc)``."""
    _check_schema(doc, ESTIMATES_SCHEMA)
    try:
        return [estimate_from_dict(d) for d in doc["estimates"]], doc
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise DocumentError(f"malformed estimates document: {exc}") from exc


def _check_schema(doc, expected: str) -> None:
    if not isinstance(doc, dict) or doc.get("schema") != expected:
        found = doc.get("schema") if isinstance(doc, dict) else type(doc).__name__
        raise DocumentError(f"expected schema {expected!r}, found {found!r}")


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path}: not valid JSON ({exc})") from exc


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

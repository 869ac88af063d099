"""Verifier report objects and JSON helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

REPORT_SCHEMA_VERSION = "1.0"


@dataclass
class Report:
    """Outcome of a verifier: pass flag, measured quantity and tolerance."""

    name: str
    passed: bool
    value: float
    tolerance: float
    details: dict = field(default_factory=dict)
    applicable: bool = True

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value),
                "tolerance": float(self.tolerance), "applicable": bool(self.applicable),
                "details": jsonable(self.details)}


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, shortest float repr)."""
    return json.dumps(jsonable(obj), sort_keys=True, indent=2) + "\n"

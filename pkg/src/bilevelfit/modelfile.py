"""Declarative model files for custom problems.

A model file is JSON describing the basis fields, the parameter split,
and optional constraints, e.g.

{
  "n_states": 2,
  "n_nonlinear": 1,
  "fields": [
    {"type": "monomial", "weights": [-1, 0], "powers": [1, 0]},
    {"type": "rational", "weights": [0, 1], "powers": [0, 0],
     "num_state": 0, "km_index": 0}
  ],
  "nonnegative_p": true,
  "phi_lower": [0.0],
  "phi_upper": [100.0],
  "delays": [],
  "p_names": ["k1", "k2"],
  "phi_names": ["Km1"]
}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fields import (
    ArrheniusMonomialField,
    DelayedMonomialField,
    InhibitionGateField,
    MonomialField,
    RationalField,
    TransportField,
)
from .problem import ConstraintSet, ModelStructure, ValidationError

__all__ = ["load_model_file"]


def _signal(raw) -> tuple[str, int | str]:
    kind, key = raw
    if kind not in ("state", "exo"):
        raise ValidationError(f"signal kind must be 'state' or 'exo', got {kind!r}")
    return (kind, int(key) if kind == "state" else str(key))


def _build_field(entry: dict, n_states: int):
    kind = entry.get("type")
    weights = np.asarray(entry["weights"], dtype=float)
    if weights.shape != (n_states,):
        raise ValidationError(f"field weights must have length {n_states}")
    if kind == "monomial":
        return MonomialField(weights, np.asarray(entry["powers"], dtype=int))
    if kind == "rational":
        return RationalField(
            weights,
            np.asarray(entry["powers"], dtype=int),
            num_state=int(entry["num_state"]),
            km_index=int(entry["km_index"]),
        )
    if kind == "arrhenius":
        return ArrheniusMonomialField(
            weights,
            np.asarray(entry["powers"], dtype=int),
            e_index=int(entry["e_index"]),
        )
    if kind == "delayed_monomial":
        return DelayedMonomialField(
            weights,
            np.asarray(entry["powers"], dtype=int),
            delay_slot=int(entry["delay_slot"]),
            delayed_state=int(entry["delayed_state"]),
            tau_index=int(entry["tau_index"]),
            delayed_power=int(entry.get("delayed_power", 1)),
        )
    if kind == "inhibition_gate":
        qa, qb, qc, qd = (int(q) for q in entry["q"])
        return InhibitionGateField(weights, _signal(entry["num"]), _signal(entry["den"]), qa, qb, qc, qd)
    if kind == "transport":
        qa, qb = (int(q) for q in entry["q"])
        return TransportField(
            weights,
            int(entry["carrier"]),
            _signal(entry["src"]),
            _signal(entry["dst"]),
            qa,
            qb,
        )
    raise ValidationError(f"unknown field type {kind!r}")


def load_model_file(path: str | Path) -> tuple[ModelStructure, ConstraintSet]:
    path = Path(path)
    spec = json.loads(path.read_text())
    known = {
        "n_states", "n_nonlinear", "fields", "delays", "p_names", "phi_names",
        "nonnegative_p", "phi_lower", "phi_upper", "eq_matrix", "eq_rhs",
        "ineq_matrix", "ineq_rhs",
    }
    unknown = set(spec) - known
    if unknown:
        raise ValidationError(f"unknown model-file keys: {sorted(unknown)}")
    n_states = int(spec["n_states"])
    entries = spec.get("fields", [])
    if not entries:
        raise ValidationError("model file declares no fields")
    basis = tuple(_build_field(e, n_states) for e in entries)
    n_linear = len(basis)
    model = ModelStructure(
        n_states=n_states,
        basis=basis,
        n_linear=n_linear,
        n_nonlinear=int(spec.get("n_nonlinear", 0)),
        delays=tuple(int(d) for d in spec.get("delays", [])),
        p_names=tuple(spec["p_names"]) if "p_names" in spec else None,
        phi_names=tuple(spec["phi_names"]) if "phi_names" in spec else None,
    )
    kwargs = dict(
        phi_lower=np.asarray(spec["phi_lower"], dtype=float) if "phi_lower" in spec else -np.inf,
        phi_upper=np.asarray(spec["phi_upper"], dtype=float) if "phi_upper" in spec else np.inf,
    )
    if spec.get("nonnegative_p"):
        constraints = ConstraintSet.nonnegative_p(n_linear, **kwargs)
    else:
        constraints = ConstraintSet(
            n_linear,
            eq_matrix=np.asarray(spec["eq_matrix"], dtype=float) if "eq_matrix" in spec else None,
            eq_rhs=np.asarray(spec["eq_rhs"], dtype=float) if "eq_rhs" in spec else None,
            ineq_matrix=np.asarray(spec["ineq_matrix"], dtype=float) if "ineq_matrix" in spec else None,
            ineq_rhs=np.asarray(spec["ineq_rhs"], dtype=float) if "ineq_rhs" in spec else None,
            **kwargs,
        )
    return model, constraints

"""Topology loading from YAML and state snapshot export.

Topology keys (all lengths in metres)::

    topology:
      g: 9.81            # optional
      cfl: 0.45          # optional
      dt_max: 60.0       # optional, returned by cfl_dt on all-dry reaches
      outlet: {coefficient: 0.4, stage: 0.0}
      reaches:
        - length: 1000.0
          cells: 20
          width: 10.0
          manning: 0.03
          bed: {type: linear, upstream: 12.0, downstream: 11.0}
      dams:
        - {discharge_coefficient: 0.6, gate_width: 5.0, max_opening: 1.0,
           turbine_efficiency: 0.9, head_reference: 0.0}

``bed.type`` is one of ``constant`` (``value``), ``linear``
(``upstream``/``downstream``), ``sine`` (``mean``, ``amplitude``,
``wavelength``) or ``points`` (``x``/``z`` lists, linearly interpolated).
"""
from __future__ import annotations

import csv

import numpy as np

from .core import Bathymetry, CascadeTopology, ContractError, DamParams, Reach


def _bed(spec, length):
    kind = spec.get("type", "constant")
    if kind == "constant":
        return float(spec.get("value", 0.0))
    if kind == "linear":
        up, down = float(spec["upstream"]), float(spec["downstream"])
        return lambda x: up + (down - up) * x / length
    if kind == "sine":
        mean, amp, wl = float(spec["mean"]), float(spec["amplitude"]), float(spec["wavelength"])
        return lambda x: mean + amp * np.sin(2.0 * np.pi * x / wl)
    if kind == "points":
        xs, zs = np.asarray(spec["x"], float), np.asarray(spec["z"], float)
        return lambda x: np.interp(x, xs, zs)
    raise ContractError(f"unknown bed type {kind!r}")


def topology_from_dict(d, coarsen=1):
    """Build a CascadeTopology; ``coarsen`` divides every cell count."""
    try:
        reaches = []
        for r in d["reaches"]:
            n = int(r["cells"])
            if n % coarsen:
                raise ContractError("cell count not divisible by coarsening factor")
            length = float(r["length"])
            bathy = Bathymetry.uniform(length, n // coarsen, _bed(r.get("bed", {}), length))
            reaches.append(Reach(bathy, float(r.get("manning", 0.03)), float(r.get("width", 1.0))))
        dams = tuple(DamParams(**{k: float(v) for k, v in dm.items()}) for dm in d.get("dams", []))
        outlet = d.get("outlet", {})
        return CascadeTopology(
            tuple(reaches),
            dams,
            outlet_coefficient=float(outlet.get("coefficient", 0.0)),
            outlet_stage=float(outlet.get("stage", 0.0)),
            g=float(d.get("g", 9.81)),
            cfl=float(d.get("cfl", 0.45)),
            dt_max=float(d.get("dt_max", 60.0)),
        )
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed topology: {exc}") from exc


def load_topology(path, coarsen=1):
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return topology_from_dict(doc.get("topology", doc), coarsen)


def export_state_csv(path, topology, states):
    """One row per cell: reach, x, z_b, A, Q (floats written with repr)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reach", "x", "z_b", "A", "Q"])
        for i, (r, s) in enumerate(zip(topology.reaches, states)):
            b = r.bathymetry
            for x, z, a, q in zip(b.cell_centers, b.bed_elevation, s.A, s.Q):
                w.writerow([i, repr(float(x)), repr(float(z)), repr(float(a)), repr(float(q))])

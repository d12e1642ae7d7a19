"""Small ready-made cascades used by the CLI defaults, tests and benchmarks."""
from __future__ import annotations

import numpy as np

from .hydro.core import Bathymetry, CascadeTopology, DamParams, Reach, lake_state


def demo_cascade(n_cells=20, n_reaches=3, length=1000.0, width=20.0, manning=0.03,
                 drop=5.0, slope=5e-4, outlet_coefficient=0.4, dam=None, depth=2.0):
    """Reaches stepping down by ``drop`` metres, each with a gentle bed slope.

    Returns (topology, initial levels); the levels put ``depth`` of water at each
    reach's downstream end and the outlet stage 0.5 m under the last level.
    """
    reaches = []
    levels = []
    for i in range(n_reaches):
        top = 10.0 - drop * i
        bed = lambda x, top=top: top - slope * x
        reaches.append(Reach(Bathymetry.uniform(length, n_cells, bed), manning, width))
        levels.append(top - slope * length + depth)
    dam = dam or DamParams(0.6, 3.0, 1.0, 0.9)
    topo = CascadeTopology(
        tuple(reaches), tuple(dam for _ in range(n_reaches - 1)),
        outlet_coefficient=outlet_coefficient, outlet_stage=levels[-1] - 0.5,
    )
    return topo, levels


def lake_states(topology, levels):
    return [lake_state(r, e) for r, e in zip(topology.reaches, levels)]


def flat_basin(n_cells=100, length=100.0, depth=1.0):
    r = Reach(Bathymetry.uniform(length, n_cells, 0.0), 0.0, 1.0)
    return CascadeTopology((r,)), np.full(1, depth)

"""Best-first branch and bound over switch schedules."""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class BBNode:
    lower: np.ndarray
    upper: np.ndarray
    bound: float
    depth: int
    parent: int
    id: int
    start: np.ndarray = None

    @property
    def fixed(self):
        """{flat index: value} of the entries pinned on this node."""
        idx = np.flatnonzero(self.lower == self.upper)
        return {int(i): float(self.lower[i]) for i in idx}


@dataclass
class BBResult:
    z: np.ndarray
    J: float
    status: str
    nodes: int
    additions: list = field(default_factory=list)
    root_relaxation: np.ndarray = None
    root_bound: float = math.nan


def _most_fractional(z, free):
    frac = np.where(free, np.abs(z - np.round(z)), -1.0)
    return int(np.argmax(frac)), float(frac.max(initial=-1.0))


def bb_solve(problem, node_budget=1000, lower=None, upper=None, int_tol=1e-6):
    """Minimise over binary z with relaxations as bounds.

    Nodes are taken best bound first, deeper first on ties. A node is
    pruned when its bound reaches the incumbent; the comparison carries a
    relative slack of 1e-9 so a bound computed slightly high never cuts
    off a better schedule. Branching fixes the most fractional free entry.
    ``additions`` lists every integer schedule that improved the incumbent.
    Status is ``optimal`` when the tree is exhausted, else ``budget``.
    """
    n = problem.n_binary
    lo = np.zeros(n) if lower is None else np.asarray(lower, float).ravel().copy()
    hi = np.ones(n) if upper is None else np.asarray(upper, float).ravel().copy()
    root = BBNode(lo, hi, -math.inf, 0, -1, 0)
    heap = [(-math.inf, 0, 0, root)]
    next_id = 1
    J_inc, z_inc = math.inf, None
    additions = []
    nodes = 0
    status = "optimal"
    root_z, root_J = None, math.nan

    def prunes(bound):
        return bound - 1e-9 * (1.0 + abs(J_inc)) >= J_inc

    while heap:
        key, _, _, node = heapq.heappop(heap)
        if prunes(key):
            continue
        if nodes >= node_budget:
            status = "budget"
            break
        nodes += 1
        rel = problem.relax(node.lower, node.upper, node.start)
        if node.id == 0:
            root_z, root_J = rel.z.copy(), rel.J
        if not rel.ok:
            log.debug("node %d: relaxation failed (%s)", node.id, rel.status)
            continue
        node.bound = rel.J
        if prunes(rel.J):
            continue
        free = node.lower < node.upper
        i, frac = _most_fractional(rel.z, free)
        if frac <= int_tol:
            zi = np.where(free, np.round(rel.z), node.lower)
            Ji = problem.evaluate_integer(zi)
            if Ji < J_inc:
                J_inc, z_inc = Ji, zi.copy()
                additions.append((zi.reshape(problem.shape).copy(), Ji))
            if Ji <= rel.J + 1e-9 * (1.0 + abs(rel.J)) or not np.any(free):
                continue
        for val in (0.0, 1.0):
            cl, cu = node.lower.copy(), node.upper.copy()
            cl[i] = cu[i] = val
            start = rel.z.copy()
            start[i] = val
            child = BBNode(cl, cu, rel.J, node.depth + 1, node.id, next_id, start)
            heapq.heappush(heap, (rel.J, -child.depth, next_id, child))
            next_id += 1
    if status == "budget":
        log.info("branch and bound stopped at the node budget (%d)", node_budget)
    z_out = None if z_inc is None else z_inc.reshape(problem.shape)
    return BBResult(z_out, J_inc, status, nodes, additions, root_z, root_J)

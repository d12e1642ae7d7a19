"""Persistent catalog of validated schedules and the terminal-value query.

The file is line-delimited JSON. Line one is a header naming the format,
its version and the terminal-state dimension; every further line is one
entry. Writes append and flush under a lock (one writer, many readers).
Loading drops exact duplicates and rewrites the file if any were found.
"""
from __future__ import annotations

import json
import logging
import math
import os
import threading
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ..hydro.core import ContractError
from ..ocp import ControlSchedule

log = logging.getLogger(__name__)

FORMAT = "hydrocascade-catalog"
VERSION = 1
PROVENANCE = ("bb", "greedy", "sur", "hierarchical", "rl", "meso-feedback")


@dataclass
class CatalogEntry:
    initial_summary: list
    grid: list
    v: list
    z: list
    J: float
    J_tail: float
    x_terminal: list
    chi: int
    seed: int
    provenance: str

    def __post_init__(self):
        if self.chi not in (0, 1):
            raise ContractError("chi must be 0 or 1")
        if self.provenance not in PROVENANCE:
            raise ContractError(f"unknown provenance {self.provenance!r}")

    def schedule(self):
        return ControlSchedule(np.array(self.grid), np.array(self.v), np.array(self.z),
                               relaxed=bool(np.any((np.array(self.z) != 0) & (np.array(self.z) != 1))))

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


class CatalogStore:
    """Entries in memory, optionally mirrored to an append-only file.

    ``kappa`` weighs the distance term of the value query, ``scale``
    divides each terminal-state component before distances are taken,
    and ``default_value`` answers queries on an empty store.
    """

    def __init__(self, dim, path=None, kappa=1.0, scale=None, default_value=0.0):
        if dim < 1:
            raise ContractError("terminal-state dimension must be positive")
        if kappa < 0:
            raise ContractError("kappa must be non-negative")
        self.dim = int(dim)
        self.path = path
        self.kappa = float(kappa)
        self.scale = np.ones(self.dim) if scale is None else np.asarray(scale, float)
        if self.scale.shape != (self.dim,) or np.any(self.scale <= 0):
            raise ContractError("scale must be positive with one entry per component")
        self.default_value = float(default_value)
        self.entries = []
        self._X = np.zeros((0, self.dim))
        self._tail = np.zeros(0)
        self._lock = threading.Lock()
        if path is not None and not os.path.exists(path):
            with open(path, "w") as fh:
                fh.write(self._header() + "\n")

    def _header(self):
        return json.dumps({
            "format": FORMAT, "version": VERSION, "dim": self.dim, "kappa": self.kappa,
            "scale": [float(s) for s in self.scale], "default_value": self.default_value,
        }, sort_keys=True, separators=(",", ":"))

    def __len__(self):
        return len(self.entries)

    def _add(self, entry):
        x = np.asarray(entry.x_terminal, float)
        if x.shape != (self.dim,):
            raise ContractError(f"x_terminal must have {self.dim} components")
        self.entries.append(entry)
        self._X = np.vstack((self._X, x))
        self._tail = np.append(self._tail, float(entry.J_tail))

    def insert(self, entry):
        with self._lock:
            self._add(entry)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(entry.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise ContractError(f"{path}: empty catalog file")
        head = json.loads(lines[0])
        if head.get("format") != FORMAT:
            raise ContractError(f"{path}: not a catalog file")
        if head.get("version") != VERSION:
            raise ContractError(f"{path}: unsupported catalog version {head.get('version')}")
        store = cls(head["dim"], None, head["kappa"], head["scale"], head["default_value"])
        seen = set()
        dup = 0
        for ln in lines[1:]:
            if ln in seen:
                dup += 1
                continue
            seen.add(ln)
            store._add(CatalogEntry.from_json(ln))
        store.path = path
        if dup:
            log.info("catalog %s: compacted %d duplicate entries", path, dup)
            tmp = path + ".tmp"
            with open(tmp, "w") as fh:
                fh.write(store._header() + "\n")
                for e in store.entries:
                    fh.write(e.to_json() + "\n")
            os.replace(tmp, path)
        return store

    def distances(self, x):
        x = np.asarray(x, float)
        return np.linalg.norm((self._X - x) / self.scale, axis=1)

    def nearest(self, summary, k=1):
        """Entries whose initial summary is closest to ``summary`` (ties: lower J)."""
        if not self.entries:
            return []
        s = np.asarray(summary, float)
        keyed = []
        for i, e in enumerate(self.entries):
            d = float(np.linalg.norm(np.asarray(e.initial_summary, float) - s))
            keyed.append((d, e.J, i))
        keyed.sort()
        return [self.entries[i] for _, _, i in keyed[:k]]


def catalog_insert(store, entry):
    store.insert(entry)
    return store


def catalog_query_value(store, x):
    """min over entries of J_tail + kappa * |(x - x_terminal) / scale|."""
    if len(store) == 0:
        warnings.warn("empty catalog: returning the default terminal value", RuntimeWarning, stacklevel=2)
        return store.default_value
    return float(np.min(store._tail + store.kappa * store.distances(x)))


def value_function(store):
    return lambda x: catalog_query_value(store, x)

"""Forecast signals, scenario fans and (multilevel) Monte Carlo estimators.

Each signal is a base mean plus sinusoidal seasonal terms plus a stationary
AR(1) residual whose marginal standard deviation is ``noise_std``. The AR
coefficient applies per sample step. Random numbers come from Philox
streams keyed by integer tuples, so any (seed, level, sample) triple maps to
a fixed, independent stream.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .hydro.core import ContractError, DefectError, DryCellError

log = logging.getLogger(__name__)

DAY = 86400.0
WEEK = 7 * DAY


def rng_for(*key):
    """Philox generator for an integer key tuple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def derive_seed(*key):
    """A 32-bit integer seed determined by the key tuple."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


@dataclass(frozen=True)
class Seasonal:
    period: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if self.period <= 0:
            raise ContractError("period must be positive")
        if self.amplitude < 0:
            raise ContractError("amplitude must be non-negative")

    def __call__(self, t):
        return self.amplitude * np.sin(2.0 * np.pi * np.asarray(t) / self.period + self.phase)


@dataclass(frozen=True)
class SignalModel:
    base: float
    seasonal: tuple = ()
    ar_coef: float = 0.8
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "seasonal", tuple(self.seasonal))
        if not 0.0 <= self.ar_coef < 1.0:
            raise ContractError("AR coefficient must lie in [0, 1)")
        if self.noise_std < 0:
            raise ContractError("noise std must be non-negative")

    def mean(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, self.base)
        for s in self.seasonal:
            out = out + s(t)
        return out

    def residuals(self, n, rng, start=None):
        """AR(1) residual path of length n; ``start`` continues a previous value."""
        out = np.empty(n)
        if n == 0:
            return out
        phi, sd = self.ar_coef, self.noise_std
        eps = rng.standard_normal(n)
        innov = sd * np.sqrt(1.0 - phi * phi)
        prev = sd * eps[0] if start is None else phi * start + innov * eps[0]
        out[0] = prev
        for k in range(1, n):
            prev = phi * prev + innov * eps[k]
            out[k] = prev
        return out

    @classmethod
    def from_dict(cls, d):
        seas = tuple(Seasonal(float(s["period"]), float(s["amplitude"]), float(s.get("phase", 0.0)))
                     for s in d.get("seasonal", []))
        return cls(float(d["base"]), seas, float(d.get("ar_coef", 0.8)), float(d.get("noise_std", 0.0)))


@dataclass(frozen=True)
class ForecastModel:
    inflow: SignalModel
    price: SignalModel

    @classmethod
    def from_dict(cls, d):
        return cls(SignalModel.from_dict(d["inflow"]), SignalModel.from_dict(d["price"]))

    @classmethod
    def default(cls, inflow_mean=5.0, price_mean=50.0):
        return cls(
            SignalModel(inflow_mean, (Seasonal(DAY, 0.3 * inflow_mean), Seasonal(WEEK, 0.1 * inflow_mean)), 0.9, 0.1 * inflow_mean),
            SignalModel(price_mean, (Seasonal(DAY, 0.4 * price_mean), Seasonal(WEEK, 0.1 * price_mean)), 0.8, 0.1 * price_mean),
        )

    def deterministic(self):
        return ForecastModel(
            SignalModel(self.inflow.base, self.inflow.seasonal, self.inflow.ar_coef, 0.0),
            SignalModel(self.price.base, self.price.seasonal, self.price.ar_coef, 0.0),
        )


@dataclass
class SamplePath:
    times: np.ndarray
    inflow: np.ndarray
    price: np.ndarray
    seed: int = 0
    # unclamped AR residuals, needed to continue a path consistently
    noise: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return self.times.size

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def prefix(self, k):
        """First k samples (times t_0..t_{k-1})."""
        return SamplePath(self.times[:k].copy(), self.inflow[:k].copy(), self.price[:k].copy(),
                          self.seed, {s: v[:k].copy() for s, v in self.noise.items()})

    def value_at(self, t, signal="inflow"):
        """Piecewise-constant lookup (sample held until the next grid time)."""
        arr = getattr(self, signal)
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(arr[min(max(k, 0), arr.size - 1)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "inflow", "price"])
            for row in zip(self.times, self.inflow, self.price):
                w.writerow([repr(float(v)) for v in row])


def _grid(horizon, dt):
    if horizon <= 0 or dt <= 0:
        raise ContractError("horizon and dt must be positive")
    n = int(round(horizon / dt)) + 1
    return dt * np.arange(n)


def _compose(model, times, noise, seed):
    inflow = np.maximum(model.inflow.mean(times) + noise["inflow"], 0.0)
    price = model.price.mean(times) + noise["price"]
    return SamplePath(times, inflow, price, seed, noise)


def sample_path(model, horizon, dt, seed):
    """Seasonal mean plus AR(1) residuals on t = 0, dt, ..., horizon."""
    times = _grid(horizon, dt)
    rng_in, rng_pr = rng_for(seed, 0), rng_for(seed, 1)
    noise = {
        "inflow": model.inflow.residuals(times.size, rng_in),
        "price": model.price.residuals(times.size, rng_pr),
    }
    return _compose(model, times, noise, seed)


@dataclass
class ScenarioFan:
    scenarios: list
    branch_time: float
    weights: np.ndarray
    prefix_length: int

    @property
    def N(self):
        return len(self.scenarios)


def build_scenario_fan(model, observed_prefix, N, horizon, dt=None, seed=0):
    """N continuations of ``observed_prefix`` up to ``horizon``.

    The first ``len(observed_prefix)`` samples of every scenario are copies
    of the prefix. Continuations resume each AR residual from the prefix's
    last value. An empty prefix (or ``None``) gives independent paths.
    """
    if N < 1:
        raise ContractError("N must be at least 1")
    if observed_prefix is None or len(observed_prefix) == 0:
        if dt is None:
            raise ContractError("dt required without a prefix")
        times = _grid(horizon, dt)
        k = 0
        last = {"inflow": None, "price": None}
        base_noise = {"inflow": np.empty(0), "price": np.empty(0)}
        t_branch = 0.0
    else:
        dt = observed_prefix.dt if dt is None else dt
        if dt <= 0:
            raise ContractError("cannot infer dt from a single-sample prefix")
        t0 = observed_prefix.times[0]
        times = t0 + _grid(horizon, dt)
        k = len(observed_prefix)
        if k > times.size:
            raise ContractError("prefix longer than the horizon")
        if not np.allclose(times[:k], observed_prefix.times, rtol=0, atol=1e-9 * max(1.0, abs(times[-1]))):
            raise ContractError("prefix times not on the fan grid")
        times[:k] = observed_prefix.times
        base_noise = observed_prefix.noise
        last = {s: float(v[-1]) for s, v in base_noise.items()}
        t_branch = float(observed_prefix.times[-1])
    m = times.size - k
    scen = []
    for i in range(N):
        noise = {}
        for j, sig in enumerate(("inflow", "price")):
            cont = getattr(model, sig).residuals(m, rng_for(seed, i, j), last[sig])
            noise[sig] = np.concatenate((base_noise[sig][:k], cont))
        p = _compose(model, times, noise, seed)
        if k:
            # the prefix is the observation, copied bit for bit
            p.inflow[:k] = observed_prefix.inflow
            p.price[:k] = observed_prefix.price
        scen.append(p)
    return ScenarioFan(scen, t_branch, np.full(N, 1.0 / N), k)


# ----------------------------------------------------------------------------
# Monte Carlo


SOLVER_FAILURES = (DefectError, DryCellError, FloatingPointError, ArithmeticError, RuntimeError)
MAX_ATTEMPTS = 20


@dataclass
class MLMCResult:
    estimate: float
    variances: np.ndarray
    level_means: np.ndarray
    samples: np.ndarray
    failures: np.ndarray
    cost: float

    @property
    def standard_error(self):
        return float(np.sqrt(np.sum(self.variances / self.samples)))


def _sample(model, horizon, dt, seed, level, i, attempt):
    return sample_path(model, horizon, dt, int(np.random.SeedSequence([seed, level, i, attempt]).generate_state(1)[0]))


def _level_corrections(level, solvers, M, qoi, model, seed, horizon, dt):
    Y = np.empty(M)
    failures = 0
    for i in range(M):
        for attempt in range(MAX_ATTEMPTS):
            path = _sample(model, horizon, dt, seed, level, i, attempt)
            try:
                fine = qoi(solvers[level][0](path))
                coarse = qoi(solvers[level - 1][0](path)) if level > 0 else 0.0
            except SOLVER_FAILURES as exc:
                failures += 1
                log.warning("level %d sample %d attempt %d failed: %s", level, i, attempt, exc)
                continue
            if not (np.isfinite(fine) and np.isfinite(coarse)):
                failures += 1
                continue
            Y[i] = fine - coarse
            break
        else:
            raise RuntimeError(f"level {level} sample {i}: every resample failed")
    return Y, failures


def mlmc_estimate(level_solvers, M, qoi, model, seed, horizon, dt):
    """Telescoping estimate sum_l mean_i [Q_l - Q_{l-1}] over coupled samples.

    ``level_solvers`` is a coarse-to-fine list of (solver, cost) with
    solver(path) -> solution; both levels of a correction see the same path.
    A failing sample is redrawn with a fresh stream and counted.
    """
    if len(M) != len(level_solvers):
        raise ContractError("one sample count per level required")
    if any(m < 1 for m in M):
        raise ContractError("every level needs at least one sample")
    means, var, fails = [], [], []
    for level, m in enumerate(M):
        Y, f = _level_corrections(level, level_solvers, m, qoi, model, seed, horizon, dt)
        means.append(np.mean(Y))
        var.append(np.var(Y, ddof=1) if m > 1 else 0.0)
        fails.append(f)
    cost = float(sum(m * (c + (level_solvers[l - 1][1] if l else 0.0))
                     for l, (m, (_, c)) in enumerate(zip(M, level_solvers))))
    means = np.asarray(means)
    return MLMCResult(float(np.sum(means)), np.asarray(var), means, np.asarray(M, dtype=float),
                      np.asarray(fails), cost)


def mc_estimate(solver, M, qoi, model, seed, horizon, dt):
    """Plain Monte Carlo; draws the same streams as level 0 of ``mlmc_estimate``."""
    vals = np.empty(M)
    for i in range(M):
        for attempt in range(MAX_ATTEMPTS):
            try:
                v = qoi(solver(_sample(model, horizon, dt, seed, 0, i, attempt)))
            except SOLVER_FAILURES:
                continue
            if np.isfinite(v):
                vals[i] = v
                break
        else:
            raise RuntimeError(f"sample {i}: every resample failed")
    return float(np.mean(vals)), float(np.var(vals, ddof=1)) if M > 1 else 0.0


def cascade_level_solvers(topology, initial_levels, controls, t_end, levels, solver="explicit", dt=None):
    """Solvers on grids coarsened by 2 per level (finest = ``topology``).

    Each solver maps a SamplePath to the final reach states, with the
    inflow taken piecewise constant from the path. Cost is cells x steps.
    """
    from .hydro.core import cascade_cfl_dt, lake_state, run_explicit
    from .plsi import run_semi_implicit

    out = []
    for level in range(levels):
        factor = 2 ** (levels - 1 - level)
        topo = topology.coarsened(factor) if factor > 1 else topology

        def solve(path, topo=topo):
            states = [lake_state(r, e) for r, e in zip(topo.reaches, initial_levels)]
            t = 0.0
            sample_dt = path.dt or t_end
            while t < t_end - 1e-9:
                t_next = min(t_end, (np.floor(t / sample_dt + 1e-9) + 1) * sample_dt)
                q = path.value_at(t)
                if solver == "explicit":
                    states = run_explicit(topo, states, controls, q, t_next)
                else:
                    states = run_semi_implicit(topo, states, controls, q, t_next, dt)
                t = t_next
            return states

        n_cells = sum(r.bathymetry.n_cells for r in topo.reaches)
        out.append((solve, float(n_cells * n_cells)))
    return out

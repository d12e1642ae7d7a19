"""Filter trust-region composite-step SQCQP for small dense NLPs.

    min F(x)  s.t.  c(x) = 0,  s(x) >= 0,  lower <= x <= upper

Each iteration takes a normal step that reduces the linearised constraint
violation inside the trust region, then a tangential step that reduces a
quadratic objective model while each constraint may move by at most
eta times the improvement the normal step bought. Trial points are
accepted by a (F, phi) filter with slanting margins, where

    phi(x) = sum_b |c_b(x)|_2 + |min(s(x), 0)|_2

over the equality blocks b. Derivatives come from user hooks or from
finite differences of a single ``evaluate`` hook.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from .hydro.core import ContractError

log = logging.getLogger(__name__)

GAMMA_F = 1e-4
GAMMA_PHI = 1e-4
STALL_LIMIT = 20


# ----------------------------------------------------------------------------
# filter


@dataclass
class FilterSet:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def acceptable(self, F, phi):
        return filter_acceptable(self, F, phi)

    def insert(self, F, phi):
        self.entries = filter_insert(self, F, phi).entries

    def is_pareto(self):
        e = self.entries
        for i, (f1, p1) in enumerate(e):
            for j, (f2, p2) in enumerate(e):
                if i != j and f2 <= f1 and p2 <= p1 and (f2 < f1 or p2 < p1):
                    return False
        return True


def filter_acceptable(flt, F, phi, gamma_f=GAMMA_F, gamma_phi=GAMMA_PHI):
    """Acceptable iff, against every entry, F or phi improves by its margin."""
    if not math.isfinite(F) or not math.isfinite(phi):
        return False
    for Fj, pj in flt.entries:
        if not (F <= Fj - gamma_f * phi or phi <= (1.0 - gamma_phi) * pj):
            return False
    return True


def filter_insert(flt, F, phi):
    """New filter with (F, phi) added and the entries it dominates removed.

    A pair already weakly dominated by an entry leaves the filter as is.
    """
    if any(Fj <= F and pj <= phi for Fj, pj in flt.entries):
        return FilterSet(list(flt.entries))
    kept = [(Fj, pj) for Fj, pj in flt.entries if not (F <= Fj and phi <= pj)]
    kept.append((float(F), float(phi)))
    return FilterSet(kept)


# ----------------------------------------------------------------------------
# trust region


@dataclass(frozen=True)
class TrustRegionState:
    delta: float = 1.0
    delta_min: float = 1e-8
    delta_max: float = 1e2
    rho_good: float = 0.75
    rho_bad: float = 0.1
    gamma_inc: float = 2.0
    gamma_dec: float = 0.5

    def __post_init__(self):
        if not 0 < self.delta_min <= self.delta <= self.delta_max:
            raise ContractError("need 0 < delta_min <= delta <= delta_max")
        if not 0 < self.rho_bad < self.rho_good < 1:
            raise ContractError("need 0 < rho_bad < rho_good < 1")
        if not 0 < self.gamma_dec < 1 < self.gamma_inc:
            raise ContractError("need 0 < gamma_dec < 1 < gamma_inc")


def tr_update(rho, state):
    if rho >= state.rho_good:
        return replace(state, delta=min(state.gamma_inc * state.delta, state.delta_max))
    if rho < state.rho_bad:
        return replace(state, delta=max(state.gamma_dec * state.delta, state.delta_min))
    return state


# ----------------------------------------------------------------------------
# problem and local models


@dataclass
class NLPProblem:
    """Hooks: ``evaluate(x) -> (F, c, s)``; the derivative hooks are optional.

    ``grad(x)``, ``eq_jac(x)``, ``ineq_jac(x)`` fall back to finite
    differences of ``evaluate``; ``hess(x)`` falls back to damped BFGS.
    ``eq_hess(x)`` may return one Hessian per equality constraint for the
    quadratic windows of the tangential step. ``eq_blocks`` lists slices of
    c whose l2 norms add up in phi.
    """

    n: int
    evaluate: callable
    grad: callable = None
    eq_jac: callable = None
    ineq_jac: callable = None
    hess: callable = None
    eq_hess: callable = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    scale: np.ndarray = None
    eq_blocks: list = None
    fd_mode: str = "central"

    def __post_init__(self):
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        self.scale = np.ones(self.n) if self.scale is None else np.asarray(self.scale, float)
        if np.any(self.lower > self.upper):
            raise ContractError("lower bound above upper bound")
        if np.any(self.scale <= 0):
            raise ContractError("scales must be positive")
        self._cache = {}

    def eval(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is None:
            F, c, s = self.evaluate(np.asarray(x, dtype=float).copy())
            hit = (float(F), np.atleast_1d(np.asarray(c, float)), np.atleast_1d(np.asarray(s, float)))
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def phi_of(self, c, s):
        blocks = self.eq_blocks or [slice(None)]
        val = sum(float(np.linalg.norm(c[b])) for b in blocks) if c.size else 0.0
        return val + float(np.linalg.norm(np.minimum(s, 0.0)))

    def phi(self, x):
        _, c, s = self.eval(x)
        return self.phi_of(c, s)


@dataclass
class LocalModels:
    x: np.ndarray
    F: float
    g: np.ndarray
    H: np.ndarray
    c: np.ndarray
    J: np.ndarray
    s: np.ndarray
    Js: np.ndarray
    c_hess: list = None
    phi: float = 0.0

    def residual(self):
        return np.concatenate((self.c, np.minimum(self.s, 0.0)))

    def residual_jac(self):
        act = (self.s < 0.0)[:, None]
        return np.vstack((self.J, np.where(act, self.Js, 0.0)))


def _fd_derivatives(problem, x, need_g, need_J, need_Js):
    F0, c0, s0 = problem.eval(x)
    n = x.size
    g = np.zeros(n)
    J = np.zeros((c0.size, n))
    Js = np.zeros((s0.size, n))
    for i in range(n):
        h = 1e-6 * (1.0 + abs(x[i]))
        up = x[i] + h <= problem.upper[i]
        dn = x[i] - h >= problem.lower[i]
        plus = minus = None
        if up:
            xp = x.copy()
            xp[i] += h
            plus = problem.eval(xp)
        if dn and (problem.fd_mode == "central" or plus is None or not math.isfinite(plus[0])):
            xm = x.copy()
            xm[i] -= h
            minus = problem.eval(xm)
        pairs = []
        if plus is not None and minus is not None:
            pairs = [(plus, minus, 2 * h)]
        if plus is not None:
            pairs.append((plus, (F0, c0, s0), h))
        if minus is not None:
            pairs.append(((F0, c0, s0), minus, h))
        if need_g:
            for a, b, w in pairs:
                if math.isfinite(a[0]) and math.isfinite(b[0]):
                    g[i] = (a[0] - b[0]) / w
                    break
        if pairs:
            a, b, w = pairs[0]
            if need_J and c0.size:
                J[:, i] = (a[1] - b[1]) / w
            if need_Js and s0.size:
                Js[:, i] = (a[2] - b[2]) / w
    return g, J, Js


def build_models(problem, x, H):
    F, c, s = problem.eval(x)
    need_g = problem.grad is None
    need_J = problem.eq_jac is None and c.size > 0
    need_Js = problem.ineq_jac is None and s.size > 0
    if need_g or need_J or need_Js:
        gf, Jf, Jsf = _fd_derivatives(problem, x, need_g, need_J, need_Js)
    g = np.asarray(problem.grad(x), float) if not need_g else gf
    J = (np.asarray(problem.eq_jac(x), float).reshape(c.size, x.size) if problem.eq_jac else
         (Jf if c.size else np.zeros((0, x.size))))
    Js = (np.asarray(problem.ineq_jac(x), float).reshape(s.size, x.size) if problem.ineq_jac else
          (Jsf if s.size else np.zeros((0, x.size))))
    if problem.hess is not None:
        H = np.asarray(problem.hess(x), float)
    ch = problem.eq_hess(x) if problem.eq_hess is not None else None
    return LocalModels(x.copy(), F, g, H, c, J, s, Js, ch, problem.phi_of(c, s))


# ----------------------------------------------------------------------------
# normal step


@dataclass
class NormalStep:
    n: np.ndarray
    model_decrease: float
    cauchy_decrease: float
    kind: str


def _box_step_limit(p, d, lo, hi):
    """Largest a >= 0 with lo <= p + a d <= hi."""
    a = np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(d > 0, (hi - p) / d, np.inf)
        dn = np.where(d < 0, (lo - p) / d, np.inf)
    a = min(float(np.min(up, initial=np.inf)), float(np.min(dn, initial=np.inf)))
    return max(a, 0.0)


def normal_step(models, delta, lower=None, upper=None, scale=None):
    """Box- and ball-constrained Gauss-Newton dogleg on 0.5 |r + J n|^2.

    The returned step never does worse on the model than the Cauchy point.
    """
    r = models.residual()
    n = models.x.size
    if r.size == 0 or float(np.abs(r).max()) == 0.0:
        return NormalStep(np.zeros(n), 0.0, 0.0, "zero")
    lo = (np.full(n, -np.inf) if lower is None else lower) - models.x
    hi = (np.full(n, np.inf) if upper is None else upper) - models.x
    S = np.ones(n) if scale is None else scale
    Jr = models.residual_jac()
    Jy = Jr * S
    q = lambda step: 0.5 * float(np.sum((r + Jr @ step) ** 2))
    q0 = q(np.zeros(n))

    gy = Jy.T @ r
    # Cauchy point along -g in scaled space, cut by ball and box
    if float(np.linalg.norm(gy)) == 0.0:
        return NormalStep(np.zeros(n), 0.0, 0.0, "stationary")
    dy = -gy
    Jd = Jy @ dy
    curv = float(Jd @ Jd)
    a = float(gy @ gy) / curv if curv > 0 else np.inf
    a = min(a, delta / float(np.linalg.norm(dy)))
    a = min(a, _box_step_limit(np.zeros(n), S * dy, lo, hi))
    n_c = a * S * dy
    cauchy = q0 - q(n_c)

    # Gauss-Newton (minimum-norm least squares) and dogleg
    y_gn = np.linalg.lstsq(Jy, -r, rcond=None)[0]
    if np.linalg.norm(y_gn) <= delta:
        y_d = y_gn
    else:
        yc = (float(gy @ gy) / curv) * dy if curv > 0 else dy
        if np.linalg.norm(yc) >= delta:
            y_d = delta * dy / np.linalg.norm(dy)
        else:
            p = y_gn - yc
            aa, bb, cc = p @ p, 2 * yc @ p, yc @ yc - delta**2
            tau = (-bb + math.sqrt(max(bb * bb - 4 * aa * cc, 0.0))) / (2 * aa)
            y_d = yc + tau * p
    n_d = np.clip(S * y_d, lo, hi)
    cand = [(q(n_d), n_d, "dogleg"), (q(n_c), n_c, "cauchy")]
    # projected Gauss-Newton when the dogleg hits the box
    if not np.allclose(n_d, S * y_d):
        free = (n_d > lo) & (n_d < hi)
        if np.any(free):
            yf = np.linalg.lstsq(Jy[:, free], -(r + Jr @ np.where(free, 0.0, n_d)), rcond=None)[0]
            trial = n_d.copy()
            trial[free] = S[free] * yf
            nrm = np.linalg.norm(trial / S)
            if nrm > delta:
                trial = trial * (delta / nrm)
            trial = np.clip(trial, lo, hi)
            cand.append((q(trial), trial, "projected"))
    val, step, kind = min(cand, key=lambda c: c[0])
    return NormalStep(step, q0 - val, cauchy, kind)


# ----------------------------------------------------------------------------
# tangential step


@dataclass
class TangentialStep:
    t: np.ndarray
    model_decrease: float
    cauchy_decrease: float
    kind: str
    fallback: bool = False


def _model(g, H, t):
    return float(g @ t + 0.5 * t @ H @ t)


@dataclass
class _Windows:
    """Tangential-step constraints: |J t + t'C t/2| <= w and Js t >= ls."""

    J: np.ndarray
    c_hess: list
    w: np.ndarray
    Js: np.ndarray
    ls: np.ndarray

    def eq_values(self, t, quadratic=True):
        v = self.J @ t
        if quadratic and self.c_hess is not None:
            v = v + np.array([0.5 * t @ Hc @ t for Hc in self.c_hess])
        return v

    def feasible(self, t, lo, hi, S, delta, tol=1e-9, quadratic=True):
        if np.any(t < lo - tol) or np.any(t > hi + tol):
            return False
        if np.linalg.norm(t / S) > delta * (1 + 1e-9):
            return False
        if self.J.shape[0]:
            if np.any(np.abs(self.eq_values(t, quadratic)) > self.w + tol * (1.0 + self.w)):
                return False
        if self.Js.shape[0] and np.any(self.Js @ t < self.ls - tol * (1.0 + np.abs(self.ls))):
            return False
        return True

    def step_limit(self, d):
        """Largest a with Js (a d) >= ls (ls <= 0, so a = 0 is feasible)."""
        if not self.Js.shape[0]:
            return np.inf
        jd = self.Js @ d
        neg = jd < 0
        if not np.any(neg):
            return np.inf
        return max(float(np.min(self.ls[neg] / jd[neg])), 0.0)


def _al_solve(g, H, win, lo, hi, S, delta, quadratic=True, max_outer=30):
    """Augmented Lagrangian on windows and ball, L-BFGS-B for the box."""
    n = g.size
    m = win.J.shape[0]
    c_hess = win.c_hess if quadratic else None
    n_con = 2 * m + win.Js.shape[0] + 1
    lam = np.zeros(n_con)
    mu = 10.0
    t = np.zeros(n)

    def cons(t):
        v = win.eq_values(t, quadratic) if m else np.zeros(0)
        ineq = win.Js @ t - win.ls
        ball = delta**2 - float(np.sum((t / S) ** 2))
        return np.concatenate((win.w - v, win.w + v, ineq, [ball]))

    def cons_jac(t):
        Jv = win.J.copy() if m else np.zeros((0, n))
        if c_hess is not None and m:
            Jv = Jv + np.array([Hc @ t for Hc in c_hess])
        return np.vstack((-Jv, Jv, win.Js, [-2.0 * t / S**2]))

    for _ in range(max_outer):
        def fun(t):
            c = cons(t)
            shifted = np.minimum(0.0, c - lam / mu)
            val = _model(g, H, t) + 0.5 * mu * float(shifted @ shifted)
            grad = g + H @ t + mu * cons_jac(t).T @ shifted
            return val, grad

        res = minimize(fun, t, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-12})
        t = res.x
        c = cons(t)
        lam = np.maximum(0.0, lam - mu * c)
        viol = float(np.max(np.maximum(-c, 0.0)))
        if viol <= 1e-10:
            break
        mu *= 10.0
    return t


def _active_set_newton(g, H, win, t):
    """Equality-window Newton step with the inequality windows that ``t``
    breaks held at their limits; adds broken ones until none remain."""
    n = g.size
    if not win.Js.shape[0]:
        return None
    act = np.zeros(win.Js.shape[0], dtype=bool)
    for _ in range(win.Js.shape[0]):
        broken = win.Js @ t < win.ls - 1e-12 * (1.0 + np.abs(win.ls))
        if not np.any(broken & ~act):
            return t
        act |= broken
        E = np.vstack((win.J, win.Js[act]))
        rhs = np.concatenate((np.zeros(win.J.shape[0]), win.ls[act]))
        K = np.block([[H, E.T], [E, np.zeros((E.shape[0], E.shape[0]))]])
        sol = np.linalg.lstsq(K, np.concatenate((-g, rhs)), rcond=None)[0]
        t = sol[:n]
    return t


def tangential_step(models, n_step, delta, eta, models_at_x, lower=None, upper=None, scale=None):
    """Reduce g~'t + t'Ht/2 inside the windows and the trust region.

    ``models`` are evaluated at x + n and ``models_at_x`` at x. Equality
    constraints may move by at most eta times the improvement the normal
    step bought; an inequality may not get worse than its linearised value
    at x + n (or, if already violated, by more than its window). Quadratic
    window terms are dropped, with a log entry, when the inner solver
    cannot satisfy them.
    """
    if not 0 < eta < 1:
        raise ContractError("eta must lie in (0, 1)")
    n = models.x.size
    S = np.ones(n) if scale is None else scale
    lo = (np.full(n, -np.inf) if lower is None else lower) - models.x
    hi = (np.full(n, np.inf) if upper is None else upper) - models.x
    g, H = models.g, models.H
    zero = np.zeros(n)
    if float(np.abs(g).max(initial=0.0)) == 0.0:
        return TangentialStep(zero, 0.0, 0.0, "zero")

    w = eta * np.maximum(np.abs(models_at_x.c) - np.abs(models.c), 0.0)
    s_new = models.s
    viol_x = np.abs(np.minimum(models_at_x.s, 0.0))
    viol_n = np.abs(np.minimum(s_new, 0.0))
    ws = eta * np.maximum(viol_x - viol_n, 0.0)
    ls = np.where(s_new < 0.0, -ws, -s_new)
    c_hess = models.c_hess
    if c_hess is not None:
        c_hess = list(c_hess)
    win = _Windows(models.J, c_hess, w, models.Js, ls)

    # Cauchy point along the projected gradient in the equality null space
    Z = null_space(models.J) if models.J.shape[0] else np.eye(n)
    if Z.shape[1] == 0:
        return TangentialStep(zero, 0.0, 0.0, "no-null-space")
    d = -Z @ (Z.T @ g)
    t_c = zero
    if np.linalg.norm(d) > 0:
        dHd = float(d @ H @ d)
        a = -float(g @ d) / dHd if dHd > 0 else np.inf
        a = min(a, delta / float(np.linalg.norm(d / S)), _box_step_limit(zero, d, lo, hi),
                win.step_limit(d))
        t_c = a * d
        while not win.feasible(t_c, lo, hi, S, delta) and a > 1e-16:
            a *= 0.5
            t_c = a * d
        if not win.feasible(t_c, lo, hi, S, delta):
            t_c = zero
    m_c = _model(g, H, t_c)

    # Newton step restricted to the null space
    Hz = Z.T @ H @ Z
    try:
        ev = np.linalg.eigvalsh(0.5 * (Hz + Hz.T))
        if ev.min() > 1e-12 * max(1.0, abs(ev.max())):
            t_n = -Z @ np.linalg.solve(Hz, Z.T @ g)
            if win.feasible(t_n, lo, hi, S, delta) and _model(g, H, t_n) <= m_c:
                return TangentialStep(t_n, -_model(g, H, t_n), -m_c, "newton")
            t_as = _active_set_newton(g, H, win, t_n)
            if t_as is not None and win.feasible(t_as, lo, hi, S, delta) and _model(g, H, t_as) <= m_c:
                return TangentialStep(t_as, -_model(g, H, t_as), -m_c, "active-set")
    except np.linalg.LinAlgError:
        pass

    quadratic = c_hess is not None
    fallback = False
    t_al = _al_solve(g, H, win, lo, hi, S, delta, quadratic)
    if quadratic and not win.feasible(t_al, lo, hi, S, delta, tol=1e-7):
        log.info("quadratic windows unsatisfied; retrying with linearised windows")
        fallback = True
        quadratic = False
        t_al = _al_solve(g, H, win, lo, hi, S, delta, False)
    # windows of zero width are enforced exactly by projection
    zw = w <= 0.0
    if models.J.shape[0] and np.any(zw):
        Jz = models.J[zw]
        t_al = t_al - np.linalg.pinv(Jz) @ (Jz @ t_al)
    if win.feasible(t_al, lo, hi, S, delta, tol=1e-7, quadratic=quadratic):
        m_al = _model(g, H, t_al)
        if m_al <= m_c:
            return TangentialStep(t_al, -m_al, -m_c, "al", fallback)
    return TangentialStep(t_c, -m_c, -m_c, "cauchy", fallback)


# ----------------------------------------------------------------------------
# driver


@dataclass
class HistoryRow:
    k: int
    F: float
    phi: float
    delta: float
    rho: float
    accepted: bool
    restoration: bool


@dataclass
class SolveResult:
    x: np.ndarray
    status: str
    history: list
    F: float
    phi: float
    filter: FilterSet
    iterations: int
    accepted_points: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "F", "phi", "delta", "rho", "accepted", "restoration_flag"])
            for h in self.history:
                w.writerow([h.k, repr(h.F), repr(h.phi), repr(h.delta), repr(h.rho), int(h.accepted), int(h.restoration)])


def _phi_model(problem, models, d):
    c = models.c + models.J @ d
    s = models.s + models.Js @ d
    return problem.phi_of(c, s)


def stationarity(models, lower, upper, tol_active=1e-8):
    """Projected-gradient norm of the Lagrangian with least-squares multipliers."""
    rows = [models.J]
    if models.s.size:
        act = models.s <= tol_active
        rows.append(models.Js[act])
    A = np.vstack(rows) if rows else np.zeros((0, models.x.size))
    g = models.g
    if A.shape[0]:
        lam = np.linalg.lstsq(A.T, g, rcond=None)[0]
        gl = g - A.T @ lam
    else:
        gl = g
    x = models.x
    return float(np.abs(x - np.clip(x - gl, lower, upper)).max(initial=0.0))


def _bfgs(H, s, y):
    sHs = float(s @ H @ s)
    if sHs <= 1e-300:
        return H
    sy = float(s @ y)
    # Powell damping keeps the update positive definite
    if sy < 0.2 * sHs:
        th = 0.8 * sHs / (sHs - sy)
        y = th * y + (1 - th) * (H @ s)
        sy = float(s @ y)
    Hs = H @ s
    return H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy


def restoration(x, problem, state, flt, H, max_iter=200):
    """Pure normal steps accepted on phi decrease; stops once x' is
    acceptable to the filter. Returns (x', state, status, phis)."""
    x = np.asarray(x, dtype=float).copy()
    phis = [problem.phi(x)]
    if phis[0] == 0.0:
        return x, state, "feasible", phis
    stall = 0
    for _ in range(max_iter):
        m = build_models(problem, x, H)
        ns = normal_step(m, state.delta, problem.lower, problem.upper, problem.scale)
        pred = m.phi - _phi_model(problem, m, ns.n)
        x_t = np.clip(x + ns.n, problem.lower, problem.upper)
        phi_t = problem.phi(x_t)
        act = m.phi - phi_t
        rho = act / pred if pred > 0 else -np.inf
        if act > 0:
            x = x_t
            phis.append(phi_t)
            stall = 0
            F_t = problem.eval(x)[0]
            if filter_acceptable(flt, F_t, phi_t):
                state = tr_update(rho, state)
                return x, state, "restored", phis
        elif state.delta <= state.delta_min:
            stall += 1
            if stall >= STALL_LIMIT:
                return x, state, "infeasible_stall", phis
        state = tr_update(rho, state)
    return x, state, "max_iter", phis


def sqcqp_solve(problem, x0, tol=1e-8, max_iter=100, eta=0.9, tr=None, H0=None, callback=None):
    """Algorithm loop: normal step, tangential step, filter test, radius
    update, restoration when rejected at the minimum radius.

    Status is ``converged``, ``max_iter`` or ``infeasible_stall``.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    x = np.clip(np.asarray(x0, dtype=float).copy(), problem.lower, problem.upper)
    state = tr or TrustRegionState()
    H = np.eye(problem.n) if H0 is None else np.asarray(H0, float).copy()
    F, c, s = problem.eval(x)
    phi = problem.phi_of(c, s)
    flt = FilterSet()
    flt.insert(F, phi)
    history = []
    accepted_pts = [(x.copy(), F, phi)]
    stall = 0
    status = "max_iter"
    m = build_models(problem, x, H)
    k = 0
    for k in range(max_iter):
        if m.phi <= tol and stationarity(m, problem.lower, problem.upper) <= tol:
            status = "converged"
            break
        # (S1) normal step
        ns = normal_step(m, state.delta, problem.lower, problem.upper, problem.scale)
        x_n = np.clip(x + ns.n, problem.lower, problem.upper)
        # (S2) tangential step from models at x + n
        m_n = m if not np.any(ns.n) else build_models(problem, x_n, H)
        ts = tangential_step(m_n, ns.n, state.delta, eta, m,
                             problem.lower, problem.upper, problem.scale)
        d = (x_n - x) + ts.t
        # (S3) trial
        x_t = np.clip(x + d, problem.lower, problem.upper)
        d = x_t - x
        F_t, c_t, s_t = problem.eval(x_t)
        phi_t = problem.phi_of(c_t, s_t)
        pred_F = -_model(m.g, m.H, d)
        pred_phi = m.phi - _phi_model(problem, m, d)
        if pred_F > 0:
            rho = (F - F_t) / pred_F
        elif pred_phi > 0:
            rho = (m.phi - phi_t) / pred_phi
        else:
            rho = -np.inf
        if not math.isfinite(F_t):
            rho = -np.inf
        # (S4) filter
        moved = float(np.linalg.norm(d)) > 1e-14 * (1.0 + float(np.linalg.norm(x)))
        accepted = moved and filter_acceptable(flt, F_t, phi_t)
        # (S5) radius; a rejected step always shrinks it
        state = tr_update(rho if accepted else -np.inf, state)
        history.append(HistoryRow(k, F_t, phi_t, state.delta, rho, accepted, False))
        if accepted:
            flt.insert(F_t, phi_t)
            g_old = m.g
            x, F, phi = x_t, F_t, phi_t
            accepted_pts.append((x.copy(), F, phi))
            m = build_models(problem, x, H)
            if problem.hess is None:
                H = _bfgs(H, d, m.g - g_old)
                m.H = H
            stall = 0
        elif state.delta <= state.delta_min:
            # (S6) restoration
            if phi > tol:
                x_r, state, rstat, _ = restoration(x, problem, state, flt, H)
                if rstat == "restored":
                    F, c, s = problem.eval(x_r)
                    phi = problem.phi_of(c, s)
                    x = x_r
                    flt.insert(F, phi)
                    accepted_pts.append((x.copy(), F, phi))
                    m = build_models(problem, x, H)
                    history.append(HistoryRow(k, F, phi, state.delta, np.nan, True, True))
                    stall = 0
                    continue
                history.append(HistoryRow(k, F, phi, state.delta, np.nan, False, True))
            stall += 1
            if stall >= STALL_LIMIT:
                status = "infeasible_stall" if phi > tol else "small_radius"
                break
        if callback is not None:
            callback(k, x, F, phi, state)
    else:
        k = max_iter
    return SolveResult(x, status, history, F, phi, flt, k, accepted_pts)

"""Desk-scale learners: a logistic feasibility predictor, a bucketed
contextual-bandit policy, and clustering of local-solver end points."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..hydro.core import ContractError

log = logging.getLogger(__name__)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.atleast_2d(np.asarray(X, float))
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, X):
        return (np.asarray(X, float) - self.mean) / self.std


def _sigmoid(t):
    # split by sign so exp never overflows
    t = np.asarray(t, float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class FeasibilityClassifier:
    """p(chi = 1 | x) = sigmoid(w . x + b) on standardised features."""

    weights: np.ndarray
    bias: float = 0.0
    count: int = 0
    rate: float = 0.5

    @classmethod
    def zeros(cls, n_features, rate=0.5):
        return cls(np.zeros(n_features), 0.0, 0, rate)


def classifier_predict(c, features):
    X = np.asarray(features, float)
    p = _sigmoid(np.atleast_2d(X) @ c.weights + c.bias)
    return float(p[0]) if X.ndim == 1 else p


def classifier_loss(c, features, chi):
    X = np.atleast_2d(np.asarray(features, float))
    y = np.atleast_1d(np.asarray(chi, float))
    t = X @ c.weights + c.bias
    # log(1 + e^t) - y t, stable form
    return float(np.mean(np.logaddexp(0.0, t) - y * t))


def classifier_update(c, features, chi):
    """One gradient step of the mean logistic loss over the given batch.

    A single feature vector is a batch of one. Returns a new classifier.
    """
    X = np.atleast_2d(np.asarray(features, float))
    y = np.atleast_1d(np.asarray(chi, float))
    if X.shape[0] != y.size:
        raise ContractError("one label per feature row")
    if np.any((y != 0) & (y != 1)):
        raise ContractError("labels must be 0 or 1")
    r = _sigmoid(X @ c.weights + c.bias) - y
    gw = X.T @ r / y.size
    gb = float(r.mean())
    return FeasibilityClassifier(c.weights - c.rate * gw, c.bias - c.rate * gb, c.count + y.size, c.rate)


def classifier_fit(c, features, chi, epochs=100):
    """Full-batch gradient descent; returns (classifier, loss per epoch).

    The step is capped at 4 / (max row norm^2 + 1), the inverse of a
    Lipschitz bound on the loss gradient, so the loss never goes up.
    """
    X = np.atleast_2d(np.asarray(features, float))
    L = 0.25 * (float((X**2).sum(axis=1).max(initial=0.0)) + 1.0)
    c = FeasibilityClassifier(c.weights.copy(), c.bias, c.count, min(c.rate, 1.0 / L))
    losses = [classifier_loss(c, X, chi)]
    for _ in range(epochs):
        c = classifier_update(c, X, chi)
        losses.append(classifier_loss(c, X, chi))
    return c, losses


# ----------------------------------------------------------------------------
# bucketed policy


@dataclass
class BucketedPolicy:
    """Tabular Q over (state bin, action bucket) with an epsilon-greedy rule.

    ``state_edges`` are interior bin edges per state feature; ``action_centres``
    are the bucket centres per control dimension, and actions are their
    Cartesian product in lexicographic order.
    """

    state_edges: list
    action_centres: list
    epsilon: float = 0.1
    rate: float = 0.1
    Q: np.ndarray = None
    visits: np.ndarray = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractError("epsilon must lie in [0, 1]")
        if not 0.0 < self.rate <= 1.0:
            raise ContractError("learning rate must lie in (0, 1]")
        self.state_edges = [np.asarray(e, float) for e in self.state_edges]
        self.action_centres = [np.asarray(a, float) for a in self.action_centres]
        shape = (self.n_states, self.n_actions)
        if self.Q is None:
            self.Q = np.zeros(shape)
        if self.visits is None:
            self.visits = np.zeros(shape, dtype=int)

    @property
    def n_states(self):
        return int(np.prod([e.size + 1 for e in self.state_edges])) if self.state_edges else 1

    @property
    def n_actions(self):
        return int(np.prod([a.size for a in self.action_centres]))

    def state_bin(self, features):
        features = np.atleast_1d(np.asarray(features, float))
        idx = 0
        for f, e in zip(features, self.state_edges):
            idx = idx * (e.size + 1) + int(np.searchsorted(e, f, side="right"))
        return idx

    def action(self, a):
        """Control vector of action index ``a``."""
        combo = list(itertools.product(*[range(c.size) for c in self.action_centres]))[a]
        return np.array([c[i] for c, i in zip(self.action_centres, combo)])

    def greedy(self, s):
        return int(np.argmax(self.Q[s]))

    def sample(self, s, rng):
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n_actions))
        return self.greedy(s)


def q_update(policy, state, action, reward):
    """Q(s, a) += rate (r - Q(s, a)) in place; returns (policy, applied).

    A non-finite reward marks an infeasible episode and is not applied;
    the caller feeds it to the feasibility classifier instead.
    """
    if not math.isfinite(reward):
        return policy, False
    policy.Q[state, action] += policy.rate * (reward - policy.Q[state, action])
    policy.visits[state, action] += 1
    return policy, True


def rl_episode(policy, classifier, state_features, evaluate, rng, features_of=None):
    """One offline episode: pick a bucket, score it, update Q or the classifier.

    ``evaluate(action_vector) -> J``; the reward is -J. ``features_of``
    maps the action vector to the classifier's features (default: itself).
    """
    s = policy.state_bin(state_features)
    a = policy.sample(s, rng)
    act = policy.action(a)
    J = float(evaluate(act))
    chi = 1.0 if math.isfinite(J) else 0.0
    feats = act if features_of is None else features_of(act)
    classifier = classifier_update(classifier, feats, chi)
    policy, _ = q_update(policy, s, a, -J)
    return policy, classifier, a, J


# ----------------------------------------------------------------------------
# domains of attraction


@dataclass
class Clusters:
    representatives: list
    members: list
    labels: np.ndarray
    unresolved: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def __len__(self):
        return len(self.representatives)


def domains_of_attraction(samples, local_solver, tol=1e-3):
    """Group start points by the minimiser their local descent reaches.

    ``local_solver(x0) -> (x*, J*, ok)``. End points within ``tol``
    (Euclidean) of a representative join its cluster; label -1 marks an
    unresolved sample. Representatives are the first end point of each
    cluster and can serve as bucket centres.
    """
    samples = [np.atleast_1d(np.asarray(s, float)) for s in samples]
    reps, members, values, unresolved = [], [], [], []
    labels = np.full(len(samples), -1, dtype=int)
    for i, x0 in enumerate(samples):
        try:
            x, J, ok = local_solver(x0)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.info("sample %d unresolved: %s", i, exc)
            ok = False
        if not ok:
            unresolved.append(i)
            continue
        x = np.atleast_1d(np.asarray(x, float))
        for c, r in enumerate(reps):
            if np.linalg.norm(x - r) <= tol:
                labels[i] = c
                members[c].append(i)
                break
        else:
            labels[i] = len(reps)
            reps.append(x)
            members.append([i])
            values.append(float(J))
    return Clusters(reps, members, labels, unresolved, values)

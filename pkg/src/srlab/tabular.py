"""Exact successor-representation and occupancy oracles on finite MDPs.

Everything here is brute force on purpose: the SR matrix comes from a dense
linear solve of the Bellman system, occupancies from either that matrix or
plain Monte-Carlo rollouts, and the TD estimator is tabular TD(0). These are
the ground truths the learned reward module is validated against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

Array = np.ndarray

_STOCHASTIC_TOL = 1e-12
_RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP with dense transitions T[s, a, s'] and start distribution."""

    T: Array
    mu0: Array

    def __post_init__(self):
        object.__setattr__(self, "T", np.asarray(self.T, dtype=np.float64))
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=np.float64))
        if self.T.ndim != 3 or self.T.shape[0] != self.T.shape[2]:
            raise ValidationError(f"T must have shape (nS, nA, nS), got {self.T.shape}")
        if self.mu0.shape != (self.T.shape[0],):
            raise ValidationError("mu0 must be a distribution over states")
        if (self.T < 0).any() or (self.mu0 < 0).any():
            raise ValidationError("probabilities must be nonnegative")
        if not np.allclose(self.T.sum(axis=2), 1.0, atol=_STOCHASTIC_TOL):
            raise ValidationError("each T[s, a, :] must sum to 1")
        if abs(self.mu0.sum() - 1.0) > _STOCHASTIC_TOL:
            raise ValidationError("mu0 must sum to 1")

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]

    def to_doc(self) -> dict:
        return {"T": self.T.tolist(), "mu0": self.mu0.tolist()}

    @classmethod
    def from_doc(cls, doc: dict) -> "TabularMDP":
        return cls(T=np.asarray(doc["T"]), mu0=np.asarray(doc["mu0"]))


@dataclass(frozen=True)
class TabularPolicy:
    """Row-stochastic action probabilities pi[s, a]."""

    pi: Array

    def __post_init__(self):
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=np.float64))
        if self.pi.ndim != 2:
            raise ValidationError("pi must be (nS, nA)")
        if (self.pi < 0).any() or not np.allclose(self.pi.sum(axis=1), 1.0, atol=_STOCHASTIC_TOL):
            raise ValidationError("each pi[s, :] must be a distribution")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


def pair_transition_matrix(mdp: TabularMDP, policy: TabularPolicy) -> Array:
    """P[(s,a), (s',a')] = T(s'|s,a) * pi(a'|s'), row-stochastic over pairs."""
    nS, nA = mdp.n_states, mdp.n_actions
    P = np.einsum("san,nb->sanb", mdp.T, policy.pi)
    return P.reshape(nS * nA, nS * nA)


def start_pair_distribution(mdp: TabularMDP, policy: TabularPolicy) -> Array:
    """mu0(s) * pi(a|s) flattened over (s, a)."""
    return (mdp.mu0[:, None] * policy.pi).reshape(-1)


def exact_sr(mdp: TabularMDP, policy: TabularPolicy, gamma: float) -> Array:
    """SR matrix M = (I - gamma P)^-1 over state-action pairs.

    Row sums equal 1/(1-gamma), diagonal entries are >= 1, and the Bellman
    residual is checked below 1e-9 before returning.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValidationError(f"exact SR needs gamma in [0, 1), got {gamma}")
    P = pair_transition_matrix(mdp, policy)
    n = P.shape[0]
    A = np.eye(n) - gamma * P
    M = np.linalg.solve(A, np.eye(n))
    residual = np.abs(A @ M - np.eye(n)).max()
    if residual > _RESIDUAL_TOL:
        raise ValidationError(f"SR linear solve residual {residual:.3e} exceeds {_RESIDUAL_TOL}")
    return M


def exact_successor_features(mdp: TabularMDP, policy: TabularPolicy, gamma: float,
                             features: Array) -> Array:
    """Expected discounted feature occupancy Psi = (I - gamma P)^-1 Phi.

    `features` has one row per (s, a) pair. With identity features this is
    exact_sr; with one-hot state/action concatenations it is the fixed point
    the learned SR head is trained toward.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValidationError(f"gamma must be in [0, 1), got {gamma}")
    P = pair_transition_matrix(mdp, policy)
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != P.shape[0]:
        raise ValidationError("features must have one row per state-action pair")
    return np.linalg.solve(np.eye(P.shape[0]) - gamma * P, features)


def occupancy_from_sr(mdp: TabularMDP, policy: TabularPolicy, M: Array) -> Array:
    """rho(s',a') = sum_{s,a} mu0(s) pi(a|s) M[(s,a),(s',a')]."""
    mu = start_pair_distribution(mdp, policy)
    return mu @ np.asarray(M, dtype=np.float64)


def occupancy_direct(mdp: TabularMDP, policy: TabularPolicy, gamma: float) -> Array:
    """Occupancy by direct linear solve: rho^T = mu^T (I - gamma P)^-1."""
    P = pair_transition_matrix(mdp, policy)
    mu = start_pair_distribution(mdp, policy)
    return np.linalg.solve((np.eye(P.shape[0]) - gamma * P).T, mu)


@dataclass(frozen=True)
class RolloutOccupancy:
    estimate: Array      # mean discounted visitation per (s, a) pair
    standard_error: Array
    n_episodes: int


def occupancy_by_rollout(mdp: TabularMDP, policy: TabularPolicy, gamma: float,
                         horizon: int, n_episodes: int, rng: np.random.Generator,
                         chunk: int = 2000) -> RolloutOccupancy:
    """Monte-Carlo occupancy with per-entry standard errors.

    Episodes are truncated at `horizon`; pick it so gamma**horizon is
    negligible relative to the tolerance you care about.
    """
    if n_episodes < 1 or horizon < 1:
        raise ValidationError("need n_episodes >= 1 and horizon >= 1")
    nS, nA = mdp.n_states, mdp.n_actions
    n_pairs = nS * nA
    cum_pi = np.cumsum(policy.pi, axis=1)
    cum_T = np.cumsum(mdp.T.reshape(n_pairs, nS), axis=1)
    discounts = gamma ** np.arange(horizon)

    total = np.zeros(n_pairs)
    total_sq = np.zeros(n_pairs)
    done = 0
    while done < n_episodes:
        m = min(chunk, n_episodes - done)
        counts = np.zeros((m, n_pairs))
        states = rng.choice(nS, size=m, p=mdp.mu0)
        for t in range(horizon):
            u = rng.random(m)
            actions = (cum_pi[states] < u[:, None]).sum(axis=1)
            pairs = states * nA + actions
            np.add.at(counts, (np.arange(m), pairs), discounts[t])
            u2 = rng.random(m)
            states = (cum_T[pairs] < u2[:, None]).sum(axis=1)
        total += counts.sum(axis=0)
        total_sq += (counts * counts).sum(axis=0)
        done += m
    mean = total / n_episodes
    var = np.maximum(total_sq / n_episodes - mean * mean, 0.0)
    se = np.sqrt(var / n_episodes)
    return RolloutOccupancy(estimate=mean, standard_error=se, n_episodes=n_episodes)


def sample_pair_experience(mdp: TabularMDP, policy: TabularPolicy, n: int,
                           rng: np.random.Generator, segment_length: int = 50
                           ) -> tuple[Array, Array, Array, Array]:
    """n SARSA index tuples (s, a, s', a') from on-policy rollouts.

    Episodes restart from mu0 every `segment_length` steps; transitions never
    span a restart.
    """
    if n < 1:
        raise ValidationError("need n >= 1 transitions")
    nS, nA = mdp.n_states, mdp.n_actions
    cum_pi = np.cumsum(policy.pi, axis=1)
    cum_T = np.cumsum(mdp.T.reshape(nS * nA, nS), axis=1)
    s_out = np.empty(n, dtype=np.int64)
    a_out = np.empty(n, dtype=np.int64)
    s2_out = np.empty(n, dtype=np.int64)
    a2_out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        s = int(rng.choice(nS, p=mdp.mu0))
        a = int((cum_pi[s] < rng.random()).sum())
        for _ in range(segment_length):
            s2 = int((cum_T[s * nA + a] < rng.random()).sum())
            a2 = int((cum_pi[s2] < rng.random()).sum())
            s_out[filled], a_out[filled], s2_out[filled], a2_out[filled] = s, a, s2, a2
            filled += 1
            if filled == n:
                break
            s, a = s2, a2
    return s_out, a_out, s2_out, a2_out


def td_sr(mdp: TabularMDP, policy: TabularPolicy, gamma: float, steps: int,
          lr: float, rng: np.random.Generator, n_chains: int = 64,
          segment_length: int = 50, average_fraction: float = 0.3) -> Array:
    """Tabular TD(0) estimate of the SR matrix from on-policy experience.

    Runs `n_chains` independent trajectories in parallel, restarting from mu0
    every `segment_length` steps so absorbing states do not starve coverage.
    Next states are sampled from experience; the bootstrap takes the exact
    expectation over the next action under the supplied policy (the policy is
    an input anyway), which removes the dominant target-noise term. The
    returned matrix is the average of the iterates over the trailing
    `average_fraction` of steps, suppressing the constant-step-size noise
    floor without biasing the fixed point.
    """
    if not 0.0 < lr <= 1.0:
        raise ValidationError("lr must be in (0, 1]")
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must be in [0, 1)")
    nS, nA = mdp.n_states, mdp.n_actions
    n_pairs = nS * nA
    cum_pi = np.cumsum(policy.pi, axis=1)
    cum_T = np.cumsum(mdp.T.reshape(n_pairs, nS), axis=1)

    M = np.eye(n_pairs)
    M_sum = np.zeros_like(M)
    n_avg = 0
    avg_start = int(steps * (1.0 - average_fraction))

    def draw_actions(states):
        u = rng.random(len(states))
        return (cum_pi[states] < u[:, None]).sum(axis=1)

    states = rng.choice(nS, size=n_chains, p=mdp.mu0)
    actions = draw_actions(states)
    rows = np.arange(n_chains)
    onehot = np.zeros((n_chains, n_pairs))
    step = 0
    ticks = 0
    while step < steps:
        if ticks % segment_length == 0 and ticks > 0:
            states = rng.choice(nS, size=n_chains, p=mdp.mu0)
            actions = draw_actions(states)
        pairs = states * nA + actions
        u = rng.random(n_chains)
        next_states = (cum_T[pairs] < u[:, None]).sum(axis=1)
        next_actions = draw_actions(next_states)
        onehot[...] = 0.0
        onehot[rows, pairs] = 1.0
        # E_{a' ~ pi(.|s')} M[(s', a')]: policy-average rows once, then gather
        avg_M = np.einsum("sa,san->sn", policy.pi, M.reshape(nS, nA, n_pairs))
        delta = onehot + gamma * avg_M[next_states] - onehot @ M
        # scatter-add the per-chain TD errors; duplicates sum, as in add.at
        M += lr * (onehot.T @ delta)
        states, actions = next_states, next_actions
        step += n_chains
        ticks += 1
        if step > avg_start:
            M_sum += M
            n_avg += 1
    return M_sum / n_avg if n_avg > 0 else M

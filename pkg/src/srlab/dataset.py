"""Demonstration storage: trajectories, SARSA transitions, sampling, stats.

Trajectories come from JSONL files (one {"states": ..., "actions": ...} object
per line) or from the environment module's demo generators. Internally every
trajectory is normalized to len(states) == len(actions) + 1 with the final
state terminal, and flattened into next-action (SARSA) transitions so the
reward learner can bootstrap through (s, a, s', a').
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

Array = np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """One demonstration: states (T+1, d_s) and actions (T, d_a)."""

    states: Array
    actions: Array

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.float64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.float64))
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValidationError("states and actions must be 2-d arrays")
        if len(self.states) != len(self.actions) + 1:
            raise ValidationError(
                f"need len(states) == len(actions) + 1, got {len(self.states)} vs {len(self.actions)}")
        if len(self.actions) < 1:
            raise ValidationError("trajectory must contain at least one action")
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            raise ValidationError("non-finite values in trajectory")

    @property
    def length(self) -> int:
        """Number of actions (= number of transitions after SARSA conversion)."""
        return len(self.actions)


@dataclass(frozen=True)
class Transition:
    """One SARSA tuple; terminal transitions carry a zero next action."""

    s: Array
    a: Array
    s_next: Array
    a_next: Array
    terminal: bool


@dataclass
class DemoDataset:
    """Immutable-after-construction set of demonstrations plus flat transitions."""

    trajectories: list[Trajectory]
    d_s: int = field(init=False)
    d_a: int = field(init=False)
    # flat transition arrays, one row per transition
    s: Array = field(init=False, repr=False)
    a: Array = field(init=False, repr=False)
    s_next: Array = field(init=False, repr=False)
    a_next: Array = field(init=False, repr=False)
    terminal: Array = field(init=False, repr=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ValidationError("dataset must contain at least one trajectory")
        dims = {(t.states.shape[1], t.actions.shape[1]) for t in self.trajectories}
        if len(dims) != 1:
            raise ValidationError(f"inconsistent state/action dimensions across trajectories: {sorted(dims)}")
        (self.d_s, self.d_a), = dims
        parts = [to_sarsa_arrays(t) for t in self.trajectories]
        self.s = np.concatenate([p[0] for p in parts])
        self.a = np.concatenate([p[1] for p in parts])
        self.s_next = np.concatenate([p[2] for p in parts])
        self.a_next = np.concatenate([p[3] for p in parts])
        self.terminal = np.concatenate([p[4] for p in parts])

    def __len__(self) -> int:
        return len(self.s)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    def transition(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], self.s_next[i], self.a_next[i], bool(self.terminal[i]))

    def transitions(self) -> list[Transition]:
        return [self.transition(i) for i in range(len(self))]

    def batch_arrays(self, idx: Array) -> tuple[Array, Array, Array, Array, Array]:
        """Row-indexed views (s, a, s_next, a_next, terminal) for a batch."""
        return self.s[idx], self.a[idx], self.s_next[idx], self.a_next[idx], self.terminal[idx]


def normalize_raw_trajectory(states, actions) -> Trajectory:
    """Accept len(states) == len(actions) + 1 or == len(actions).

    In the second layout the last action has no observed outcome, so it is
    dropped; the final state becomes terminal either way.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.ndim != 2 or actions.ndim != 2:
        raise ValidationError("states and actions must be lists of vectors")
    if len(states) == len(actions):
        actions = actions[:-1]
    if len(states) != len(actions) + 1:
        raise ValidationError(
            f"trajectory layout not recognized: {len(states)} states vs {len(actions) if actions.ndim == 2 else '?'} actions")
    return Trajectory(states=states, actions=actions)


def to_sarsa_arrays(traj: Trajectory) -> tuple[Array, Array, Array, Array, Array]:
    T = traj.length
    s = traj.states[:-1]
    a = traj.actions
    s_next = traj.states[1:]
    a_next = np.vstack([traj.actions[1:], np.zeros((1, traj.actions.shape[1]))])
    terminal = np.zeros(T, dtype=bool)
    terminal[-1] = True
    return s, a, s_next, a_next, terminal


def to_sarsa(traj: Trajectory) -> list[Transition]:
    """Next-action transitions; the last one is terminal with a zero a_next."""
    if len(traj.states) < 2:
        raise ValidationError("need at least two states to form a transition")
    s, a, s_next, a_next, terminal = to_sarsa_arrays(traj)
    return [Transition(s[i], a[i], s_next[i], a_next[i], bool(terminal[i])) for i in range(len(s))]


def load_dataset(path) -> DemoDataset:
    """Load a JSONL demonstration file; rejects empty files and mixed dims."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"dataset file not found: {path}")
    trajectories = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e
            if not isinstance(obj, dict) or "states" not in obj or "actions" not in obj:
                raise ParseError("expected object with 'states' and 'actions'", line=lineno)
            try:
                trajectories.append(normalize_raw_trajectory(obj["states"], obj["actions"]))
            except ValidationError as e:
                raise ParseError(str(e), line=lineno) from e
    if not trajectories:
        raise ValidationError(f"no trajectories in {path}")
    return DemoDataset(trajectories)


def save_dataset(ds: DemoDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for traj in ds.trajectories:
            fh.write(json.dumps({
                "states": traj.states.tolist(),
                "actions": traj.actions.tolist(),
            }) + "\n")


def sample_indices(ds: DemoDataset, n: int, rng: np.random.Generator) -> Array:
    if n < 1:
        raise ValidationError("batch size must be >= 1")
    if len(ds) == 0:
        raise ValidationError("cannot sample from an empty dataset")
    return rng.integers(0, len(ds), size=n)


def sample_batch(ds: DemoDataset, n: int, rng: np.random.Generator) -> list[Transition]:
    """Uniform sample with replacement over all flattened transitions."""
    return [ds.transition(i) for i in sample_indices(ds, n, rng)]


def subsample_trajectories(ds: DemoDataset, k: int, rng: np.random.Generator) -> DemoDataset:
    """k distinct trajectories drawn uniformly without replacement."""
    if not 1 <= k <= ds.n_trajectories:
        raise ValidationError(f"k={k} out of range [1, {ds.n_trajectories}]")
    chosen = rng.choice(ds.n_trajectories, size=k, replace=False)
    return DemoDataset([ds.trajectories[i] for i in chosen])


@dataclass(frozen=True)
class DatasetStats:
    """Per-dimension moments over every state and action in the dataset."""

    state_mean: Array
    state_std: Array
    action_mean: Array
    action_std: Array
    median_std: float


def dataset_stats(ds: DemoDataset) -> DatasetStats:
    """Population statistics; median_std spans all d_s + d_a std values."""
    states = np.concatenate([t.states for t in ds.trajectories])
    actions = np.concatenate([t.actions for t in ds.trajectories])
    state_std = states.std(axis=0)
    action_std = actions.std(axis=0)
    return DatasetStats(
        state_mean=states.mean(axis=0),
        state_std=state_std,
        action_mean=actions.mean(axis=0),
        action_std=action_std,
        median_std=float(np.median(np.concatenate([state_std, action_std]))),
    )

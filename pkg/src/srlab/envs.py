"""Desk-scale environments and scripted experts.

The continuous maze is a unit arena with three interior walls carving a
counter-clockwise corridor: demonstrations start near the bottom-right
corner, climb the right edge, cross the top, descend the left edge, and cut
in to the goal at the center. The bottom-center region is never visited by
the expert, which is what makes it useful for out-of-distribution reward
probes. Wall coordinates are frozen constants; the geometry is ours.

The discrete gridworld exists to feed the exact tabular oracles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import DemoDataset, Trajectory
from .errors import ConfigurationError, ValidationError
from .tabular import TabularMDP

Array = np.ndarray

# interior walls: ((x1, y1), (x2, y2)); arena is [0, 1]^2
MAZE_WALLS = (
    ((0.75, 0.00), (0.75, 0.75)),  # seals the start column off from the interior
    ((0.25, 0.75), (0.75, 0.75)),  # underside of the top corridor
    ((0.25, 0.50), (0.25, 0.75)),  # right side of the left corridor, open below y=0.5
)
MAZE_GOAL = (0.5, 0.5)
MAZE_GOAL_RADIUS = 0.06
MAZE_START_LOW = (0.85, 0.075)
MAZE_START_HIGH = (0.925, 0.15)
# corridor centerline the scripted expert follows
MAZE_WAYPOINTS = (
    (0.875, 0.875),
    (0.125, 0.875),
    (0.125, 0.40),
    (0.50, 0.50),
)

_WALL_BACKOFF = 1e-7  # spatial gap kept between an agent and a wall it hit


@dataclass(frozen=True)
class MazeEnv:
    """Continuous 2-d corridor maze with collision-truncated dynamics."""

    walls: tuple = MAZE_WALLS
    goal: tuple = MAZE_GOAL
    goal_radius: float = MAZE_GOAL_RADIUS
    start_low: tuple = MAZE_START_LOW
    start_high: tuple = MAZE_START_HIGH
    max_steps: int = 200
    step_scale: float = 0.05
    expert_speed: float = 0.3
    expert_noise: float = 0.05
    expert_lookahead: float = 0.1
    waypoints: tuple = MAZE_WAYPOINTS

    def __post_init__(self):
        for p in (self.goal, self.start_low, self.start_high):
            if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
                raise ConfigurationError(f"point {p} outside the unit arena")

    @property
    def d_s(self) -> int:
        return 2

    @property
    def d_a(self) -> int:
        return 2


@dataclass(frozen=True)
class EnvStep:
    next_state: Array
    done: bool
    true_reward: float
    goal_reached: bool


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx

def segment_hit_fraction(p: Array, q: Array, c, d) -> float | None:
    """Fraction t in [0,1] where segment p->q first meets segment c->d."""
    rx, ry = q[0] - p[0], q[1] - p[1]
    sx, sy = d[0] - c[0], d[1] - c[1]
    denom = _cross(rx, ry, sx, sy)
    if abs(denom) < 1e-15:
        return None
    t = _cross(c[0] - p[0], c[1] - p[1], sx, sy) / denom
    u = _cross(c[0] - p[0], c[1] - p[1], rx, ry) / denom
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return t
    return None


def maze_reset(env: MazeEnv, rng: np.random.Generator) -> Array:
    lo = np.asarray(env.start_low)
    hi = np.asarray(env.start_high)
    return lo + rng.random(2) * (hi - lo)


def maze_step(env: MazeEnv, s: Array, a: Array, steps_taken: int | None = None) -> EnvStep:
    """Apply one displacement; movement is truncated at the first wall hit.

    `steps_taken` is the count of steps already executed; when provided, the
    budget contributes to `done`.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    proposed = s + env.step_scale * a
    delta = proposed - s
    move_len = float(np.hypot(delta[0], delta[1]))
    t_hit = None
    if move_len > 0.0:
        for wall in env.walls:
            t = segment_hit_fraction(s, proposed, wall[0], wall[1])
            if t is not None and (t_hit is None or t < t_hit):
                t_hit = t
    if t_hit is not None:
        t_eff = max(t_hit - _WALL_BACKOFF / move_len, 0.0)
        nxt = s + t_eff * delta
    else:
        nxt = proposed
    nxt = np.clip(nxt, 0.0, 1.0)
    goal_reached = bool(np.hypot(nxt[0] - env.goal[0], nxt[1] - env.goal[1]) <= env.goal_radius)
    out_of_budget = steps_taken is not None and steps_taken + 1 >= env.max_steps
    reward = 100.0 if goal_reached else -1.0
    return EnvStep(next_state=nxt, done=goal_reached or out_of_budget,
                   true_reward=reward, goal_reached=goal_reached)


def _expert_polyline(env: MazeEnv) -> Array:
    start_center = (np.asarray(env.start_low) + np.asarray(env.start_high)) / 2.0
    return np.vstack([start_center, np.asarray(env.waypoints)])


def _project_arc(poly: Array, s: Array) -> float:
    """Arc-length position along the polyline of the point closest to s."""
    best_d2, best_arc = np.inf, 0.0
    arc = 0.0
    for i in range(len(poly) - 1):
        p, q = poly[i], poly[i + 1]
        seg = q - p
        seg_len2 = float(seg @ seg)
        t = 0.0 if seg_len2 == 0 else float(np.clip((s - p) @ seg / seg_len2, 0.0, 1.0))
        closest = p + t * seg
        d2 = float((s - closest) @ (s - closest))
        if d2 < best_d2 - 1e-15:
            best_d2 = d2
            best_arc = arc + t * np.sqrt(seg_len2)
        arc += np.sqrt(seg_len2)
    return best_arc


def _point_at_arc(poly: Array, arc: float) -> Array:
    remaining = arc
    for i in range(len(poly) - 1):
        seg = poly[i + 1] - poly[i]
        seg_len = float(np.hypot(seg[0], seg[1]))
        if remaining <= seg_len:
            return poly[i] + (remaining / seg_len) * seg
        remaining -= seg_len
    return poly[-1].copy()


def maze_expert_act(env: MazeEnv, s: Array, rng: np.random.Generator | None = None) -> Array:
    """Pure-pursuit waypoint follower; rng=None gives the noise-free action."""
    s = np.asarray(s, dtype=np.float64)
    poly = _expert_polyline(env)
    arc = _project_arc(poly, s)
    target = _point_at_arc(poly, arc + env.expert_lookahead)
    goal = np.asarray(env.goal)
    if np.hypot(*(s - goal)) < env.expert_lookahead + env.goal_radius:
        target = goal
    direction = target - s
    norm = float(np.hypot(direction[0], direction[1]))
    if norm < 1e-12:
        direction, norm = goal - s, float(np.hypot(*(goal - s))) or 1.0
    a = env.expert_speed * direction / norm
    if rng is not None:
        a = a + rng.normal(0.0, env.expert_noise, size=2)
    return np.clip(a, -1.0, 1.0)


def rollout(env: MazeEnv, act_fn, rng: np.random.Generator) -> tuple[Trajectory, bool, float]:
    """Roll one episode; returns (trajectory, goal_reached, true_return)."""
    s = maze_reset(env, rng)
    states, actions = [s], []
    total = 0.0
    reached = False
    for t in range(env.max_steps):
        a = act_fn(s)
        step = maze_step(env, s, a, steps_taken=t)
        states.append(step.next_state)
        actions.append(np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0))
        total += step.true_reward
        s = step.next_state
        if step.done:
            reached = step.goal_reached
            break
    return Trajectory(np.asarray(states), np.asarray(actions)), reached, total


def generate_demos(env: MazeEnv, n: int, rng: np.random.Generator,
                   act_fn=None) -> tuple[DemoDataset, int]:
    """n successful expert episodes; failures are discarded and re-sampled.

    Returns (dataset, discarded_count). Raises if the success rate over 10n
    attempts falls below 50%.
    """
    if n < 1:
        raise ValidationError("need n >= 1 demonstrations")
    if act_fn is None:
        def act_fn(s, _rng=rng):
            return maze_expert_act(env, s, _rng)
    kept: list[Trajectory] = []
    discarded = 0
    attempts = 0
    while len(kept) < n:
        if attempts >= 10 * n and len(kept) < attempts / 2:
            raise ValidationError(
                f"expert success rate below 50% ({len(kept)}/{attempts}); environment misconfigured")
        traj, reached, _ = rollout(env, act_fn, rng)
        attempts += 1
        if reached:
            kept.append(traj)
        else:
            discarded += 1
    return DemoDataset(kept), discarded


# -- discrete gridworld ---------------------------------------------------

GRID_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))  # up, right, down, left
GRID_ACTION_NAMES = ("up", "right", "down", "left")


@dataclass(frozen=True)
class GridWorld:
    """Rectangular grid with obstacles, an absorbing goal, and action slip."""

    width: int
    height: int
    goal: tuple
    obstacles: frozenset = frozenset()
    slip: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", frozenset(tuple(c) for c in self.obstacles))
        object.__setattr__(self, "goal", tuple(self.goal))
        if not (0 <= self.goal[0] < self.width and 0 <= self.goal[1] < self.height):
            raise ConfigurationError("goal outside grid")
        if self.goal in self.obstacles:
            raise ConfigurationError("goal cell is an obstacle")
        if not 0.0 <= self.slip < 1.0:
            raise ConfigurationError("slip must be in [0, 1)")
        if not self._goal_reachable_everywhere():
            raise ConfigurationError("goal not reachable from every free cell")

    def free_cells(self) -> list[tuple]:
        return [(x, y) for y in range(self.height) for x in range(self.width)
                if (x, y) not in self.obstacles]

    def _goal_reachable_everywhere(self) -> bool:
        free = set(self.free_cells())
        seen = {self.goal}
        frontier = [self.goal]
        while frontier:
            cx, cy = frontier.pop()
            for dx, dy in GRID_MOVES:
                nxt = (cx + dx, cy + dy)
                if nxt in free and nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return seen == free


def gridworld_as_tabular(gw: GridWorld, start_cell: tuple | None = None
                         ) -> tuple[TabularMDP, list[tuple]]:
    """Dense MDP over free cells; returns (mdp, cells) with cells[i] = state i.

    Intended moves execute with probability 1-slip; otherwise one of the
    other three directions is taken (slip/3 each). Blocked moves stay put.
    The goal cell is absorbing. mu0 is uniform over free non-goal cells
    unless a start cell is given.
    """
    cells = gw.free_cells()
    index = {c: i for i, c in enumerate(cells)}
    nS, nA = len(cells), len(GRID_MOVES)
    T = np.zeros((nS, nA, nS))
    for (x, y), s in index.items():
        if (x, y) == gw.goal:
            T[s, :, s] = 1.0
            continue
        for a in range(nA):
            for b in range(nA):
                p = (1.0 - gw.slip) if b == a else gw.slip / 3.0
                nx, ny = x + GRID_MOVES[b][0], y + GRID_MOVES[b][1]
                target = (nx, ny) if (nx, ny) in index else (x, y)
                T[s, a, index[target]] += p
    if start_cell is not None:
        if tuple(start_cell) not in index:
            raise ConfigurationError(f"start cell {start_cell} not a free cell")
        mu0 = np.zeros(nS)
        mu0[index[tuple(start_cell)]] = 1.0
    else:
        mu0 = np.array([0.0 if c == gw.goal else 1.0 for c in cells])
        mu0 /= mu0.sum()
    return TabularMDP(T=T, mu0=mu0), cells

"""
Built-in environments.

`WindyGridworld` is a 4x4 grid (row 0 at the top). The agent starts at (2, 0) and is rewarded for
reaching the flag at (2, 3); the whole bottom row is water. The shortest route runs along the
water, longer routes through rows 1 and 0 keep away from it. After every move the wind blows
with probability 0.5, adding one extra step in a uniformly random cardinal direction.

`GridDuel` is a symmetric two-player pushing game on a 1-D arena of 9 cells. Player 0 faces
right, player 1 faces left. Both choose simultaneously between advance, retreat and brace;
each choice slips to a uniformly random action with probability 0.2. Advancing into an adjacent
opponent pushes them back one cell unless they brace; two players advancing into each other
both stay put. Whoever is pushed past the wall behind them loses. A plain retreat stops at the wall.
"""
import csv
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from rpbt.model import Actor, ActionSpace, DomainError, SpaceKind, TabularMDP, TabularPolicy, TransitionMap

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]


class GridAction(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


MOVES: Dict[int, Cell] = {
    GridAction.UP: (-1, 0),
    GridAction.DOWN: (1, 0),
    GridAction.LEFT: (0, -1),
    GridAction.RIGHT: (0, 1),
}


def _bottom_row(width: int = 4, height: int = 4) -> FrozenSet[Cell]:
    return frozenset((height - 1, c) for c in range(width))


def state_encoding(cell: Cell, width: int = 4, height: int = 4) -> np.ndarray:
    """One-hot vector of length width * height for the cell's row-major index."""
    row, col = cell
    if not (0 <= row < height and 0 <= col < width):
        raise DomainError(f"cell {cell} outside a {height}x{width} grid")
    encoding = np.zeros(width * height)
    encoding[row * width + col] = 1.0
    return encoding


@dataclass
class WindyGridworld:
    width: int = 4
    height: int = 4
    start: Cell = (2, 0)
    flag: Cell = (2, 3)
    water: FrozenSet[Cell] = field(default_factory=_bottom_row)
    wind_probability: float = 0.5
    step_cap: int = 25

    position: Cell = field(init=False)
    steps: int = field(init=False, default=0)
    done: bool = field(init=False, default=False)
    started: bool = field(init=False, default=False)

    def __post_init__(self) -> None:
        self.water = frozenset(tuple(c) for c in self.water)  # type: ignore[misc]
        self.start = tuple(self.start)  # type: ignore[assignment]
        self.flag = tuple(self.flag)  # type: ignore[assignment]
        for name, cell in (("start", self.start), ("flag", self.flag), *(("water", c) for c in self.water)):
            if not self.in_bounds(cell):
                raise DomainError(f"{name} cell {cell} outside the grid")
        if self.flag in self.water:
            raise DomainError("the flag cannot be in the water")
        if self.start == self.flag:
            raise DomainError("start and flag must differ")
        if not 0.0 <= self.wind_probability <= 1.0:
            raise DomainError(f"wind probability must lie in [0, 1], got {self.wind_probability!r}")
        if self.step_cap < 1:
            raise DomainError(f"step cap must be positive, got {self.step_cap}")
        self.position = self.start

    @property
    def observation_dim(self) -> int:
        return self.width * self.height

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace(SpaceKind.DISCRETE, len(MOVES))

    @property
    def needs_reset(self) -> bool:
        return self.done or not self.started

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def clamp(self, cell: Cell) -> Cell:
        return (min(max(cell[0], 0), self.height - 1), min(max(cell[1], 0), self.width - 1))

    def cell_index(self, cell: Cell) -> int:
        return cell[0] * self.width + cell[1]

    def index_cell(self, index: int) -> Cell:
        return divmod(int(index), self.width)  # type: ignore[return-value]

    def encode(self, cell: Cell) -> np.ndarray:
        return state_encoding(cell, self.width, self.height)

    def water_adjacent(self) -> FrozenSet[Cell]:
        """Dry cells sharing an edge with a water cell."""
        cells = set()
        for row, col in self.water:
            for dr, dc in MOVES.values():
                neighbour = (row + dr, col + dc)
                if self.in_bounds(neighbour) and neighbour not in self.water:
                    cells.add(neighbour)
        return frozenset(cells)

    def observe(self) -> np.ndarray:
        return self.encode(self.position)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.position = self.start
        self.steps = 0
        self.done = False
        self.started = True
        return self.observe()

    def _move(self, cell: Cell, action: int) -> Cell:
        dr, dc = MOVES[action]
        return self.clamp((cell[0] + dr, cell[1] + dc))

    def reward_for(self, cell: Cell) -> float:
        if cell == self.flag:
            return 1.0
        if cell in self.water:
            return -1.0
        return 0.0

    def step(self, action: int, rng: np.random.Generator) -> Tuple[np.ndarray, float, bool]:
        if self.needs_reset:
            raise DomainError("step called on a finished episode; call reset first")
        action = int(action)
        if action not in MOVES:
            raise DomainError(f"unknown gridworld action {action!r}")
        cell = self._move(self.position, action)
        if rng.random() < self.wind_probability:
            cell = self._move(cell, int(rng.integers(len(MOVES))))
        self.position = cell
        self.steps += 1
        reward = self.reward_for(cell)
        self.done = cell == self.flag or self.steps >= self.step_cap
        return self.observe(), reward, self.done


def gridworld_mdp(env: WindyGridworld) -> TabularMDP:
    """The gridworld as a TabularMDP over cells; the flag is absorbing and the step cap is dropped."""
    n_actions = len(MOVES)
    flag = env.cell_index(env.flag)
    transitions: TransitionMap = {}
    for index in range(env.n_cells):
        cell = env.index_cell(index)
        for action in range(n_actions):
            if index == flag:
                transitions[(index, action)] = ((index, 1.0, 0.0),)
                continue
            intended = env._move(cell, action)
            weights: Dict[Cell, float] = {intended: 1.0 - env.wind_probability}
            for gust in range(n_actions):
                blown = env._move(intended, gust)
                weights[blown] = weights.get(blown, 0.0) + env.wind_probability / n_actions
            transitions[(index, action)] = tuple(
                (env.cell_index(c), p, env.reward_for(c)) for c, p in sorted(weights.items()) if p > 0.0
            )
    terminal = tuple(i == flag for i in range(env.n_cells))
    return TabularMDP(env.n_cells, n_actions, transitions, terminal)


@dataclass(frozen=True)
class TabularActor:
    """Acts on one-hot observations from a per-state action table."""

    policy: TabularPolicy

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        probs = self.policy.probs[int(np.argmax(obs))]
        index = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        return min(index, len(probs) - 1)


@dataclass(frozen=True)
class RandomActor:
    action_space: ActionSpace

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Union[int, np.ndarray]:
        if self.action_space.kind is SpaceKind.DISCRETE:
            return int(rng.integers(self.action_space.dim))
        return rng.uniform(self.action_space.low, self.action_space.high, size=self.action_space.dim)


@dataclass
class VisitationMap:
    """Cell occupancy over a batch of evaluation episodes.

    `frequencies` has the grid's shape and sums to 1: every time step of every episode,
    including the start and the final cell, counts one visit.
    """

    frequencies: np.ndarray
    episodes: int
    successes: int
    success_lengths: List[int]

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes

    @property
    def mean_success_length(self) -> Optional[float]:
        return float(np.mean(self.success_lengths)) if self.success_lengths else None

    def fraction(self, cells: FrozenSet[Cell]) -> float:
        return float(sum(self.frequencies[c] for c in cells))


def visitation_counts(policy: Actor, env: WindyGridworld, episodes: int, rng: np.random.Generator) -> VisitationMap:
    if episodes < 1:
        raise DomainError(f"episodes must be at least 1, got {episodes}")
    counts = np.zeros((env.height, env.width))
    successes = 0
    success_lengths: List[int] = []
    for _ in range(episodes):
        obs = env.reset(rng)
        counts[env.position] += 1
        done = False
        while not done:
            obs, _, done = env.step(policy.act(obs, rng), rng)
            counts[env.position] += 1
        if env.position == env.flag:
            successes += 1
            success_lengths.append(env.steps)
    logger.debug("visitation over %d episodes: %d reached the flag", episodes, successes)
    return VisitationMap(counts / counts.sum(), episodes, successes, success_lengths)


def render_visitation(frequencies: np.ndarray, env: Optional[WindyGridworld] = None) -> str:
    """Text grid of frequencies. With `env`, start/flag/water cells are marked S, F and ~."""
    lines = []
    for row in range(frequencies.shape[0]):
        cells = []
        for col in range(frequencies.shape[1]):
            marker = " "
            if env is not None:
                if (row, col) == env.flag:
                    marker = "F"
                elif (row, col) == env.start:
                    marker = "S"
                elif (row, col) in env.water:
                    marker = "~"
            cells.append(f"{frequencies[row, col]:.3f}{marker}")
        lines.append(" ".join(cells))
    return "\n".join(lines)


def write_visitation_csv(frequencies: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for row in frequencies:
            writer.writerow([repr(float(x)) for x in row])
    return path


def read_visitation_csv(path: Union[str, Path]) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as f:
        return np.array([[float(x) for x in row] for row in csv.reader(f)])


class DuelAction(IntEnum):
    ADVANCE = 0
    RETREAT = 1
    BRACE = 2


@dataclass(frozen=True)
class DuelRecord:
    step: int
    intended: Tuple[int, int]
    executed: Tuple[int, int]
    positions: Tuple[int, int]
    rewards: Tuple[float, float]


@dataclass
class GridDuel:
    length: int = 9
    starts: Tuple[int, int] = (3, 5)
    slip_probability: float = 0.2
    step_cap: int = 50

    positions: List[int] = field(init=False)
    steps: int = field(init=False, default=0)
    done: bool = field(init=False, default=False)
    started: bool = field(init=False, default=False)
    winner: Optional[int] = field(init=False, default=None)
    history: List[DuelRecord] = field(init=False, default_factory=list)

    n_players = 2
    reward_sum = 0.0
    observation_dim = 2

    def __post_init__(self) -> None:
        left, right = self.starts
        if not 0 <= left < right < self.length:
            raise DomainError(f"start cells {self.starts} must be distinct, ordered and inside the arena")
        if not 0.0 <= self.slip_probability <= 1.0:
            raise DomainError(f"slip probability must lie in [0, 1], got {self.slip_probability!r}")
        if self.step_cap < 1:
            raise DomainError(f"step cap must be positive, got {self.step_cap}")
        self.positions = list(self.starts)

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace(SpaceKind.DISCRETE, len(DuelAction))

    @property
    def needs_reset(self) -> bool:
        return self.done or not self.started

    def observe(self) -> List[np.ndarray]:
        """Mirrored views: each player sees (own distance, opponent distance) from its own back wall."""
        edge = self.length - 1
        p0, p1 = self.positions
        return [np.array([p0 / edge, p1 / edge]), np.array([(edge - p1) / edge, (edge - p0) / edge])]

    def reset(self, rng: np.random.Generator) -> List[np.ndarray]:
        self.positions = list(self.starts)
        self.steps = 0
        self.done = False
        self.started = True
        self.winner = None
        self.history = []
        return self.observe()

    def _slip(self, action: int, rng: np.random.Generator) -> int:
        if rng.random() < self.slip_probability:
            return int(rng.integers(len(DuelAction)))
        return action

    def _resolve(self, a0: int, a1: int) -> Tuple[int, int, Optional[int]]:
        """New positions and the index of a player pushed out, if any."""
        edge = self.length - 1
        p0, p1 = self.positions
        forward = (1, -1)
        if p1 - p0 > 1:
            moved = [p0, p1]
            for i, action in enumerate((a0, a1)):
                if action == DuelAction.ADVANCE:
                    moved[i] += forward[i]
                elif action == DuelAction.RETREAT:
                    moved[i] = min(max(moved[i] - forward[i], 0), edge)
            if moved[0] >= moved[1]:
                # both advanced into the same cell: nobody advances
                if a0 == DuelAction.ADVANCE:
                    moved[0] = p0
                if a1 == DuelAction.ADVANCE:
                    moved[1] = p1
            return moved[0], moved[1], None

        positions = [p0, p1]
        actions = (a0, a1)
        pushers = [i for i in (0, 1) if actions[i] == DuelAction.ADVANCE]
        if len(pushers) == 2:
            # equal pushes cancel
            return p0, p1, None
        if pushers:
            i = pushers[0]
            j = 1 - i
            if actions[j] == DuelAction.BRACE:
                return p0, p1, None
            pushed = positions[j] - forward[j]
            if not 0 <= pushed <= edge:
                return p0, p1, j
            moved = [0, 0]
            moved[i] = positions[i] + forward[i]
            moved[j] = pushed
            return moved[0], moved[1], None
        moved = [p0, p1]
        for i, action in enumerate(actions):
            if action == DuelAction.RETREAT:
                moved[i] = min(max(moved[i] - forward[i], 0), edge)
        return moved[0], moved[1], None

    def step(self, actions: Sequence[int], rng: np.random.Generator) -> List[Tuple[np.ndarray, float, bool]]:
        if self.needs_reset:
            raise DomainError("step called on a finished episode; call reset first")
        if len(actions) != self.n_players:
            raise DomainError(f"expected {self.n_players} actions, got {len(actions)}")
        intended = tuple(int(a) for a in actions)
        for a in intended:
            if a not in tuple(DuelAction):
                raise DomainError(f"unknown duel action {a!r}")
        executed = (self._slip(intended[0], rng), self._slip(intended[1], rng))
        p0, p1, ejected = self._resolve(*executed)
        self.positions = [p0, p1]
        self.steps += 1
        rewards = (0.0, 0.0)
        if ejected is not None:
            self.winner = 1 - ejected
            rewards = (1.0, -1.0) if self.winner == 0 else (-1.0, 1.0)
            self.done = True
        elif self.steps >= self.step_cap:
            self.done = True
        self.history.append(DuelRecord(self.steps, intended, executed, (p0, p1), rewards))  # type: ignore[arg-type]
        observations = self.observe()
        return [(observations[i], rewards[i], self.done) for i in range(self.n_players)]


def make_env(kind: str, params: Optional[Mapping[str, Any]] = None) -> Union[WindyGridworld, GridDuel]:
    """Build an environment from a `(kind, params)` pair as produced by the experiment config."""
    params = dict(params or {})
    if kind == "gridworld":
        return WindyGridworld(**params)
    if kind == "duel":
        return GridDuel(**params)
    raise DomainError(f"unknown environment kind {kind!r}")

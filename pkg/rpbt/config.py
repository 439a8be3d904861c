"""
Experiment configuration.

A TOML file with up to five tables; every key is optional and defaults to the constants in
`rpbt.const`:

    [env.gridworld]   wind_probability, step_cap
    [env.duel]        length, slip_probability, step_cap
    [risk]            taus, alpha, gamma, lambda, n_max
    [rppo]            clip_epsilon, update_epochs, entropy_coef, value_coef, learning_rate,
                      horizon, minibatch_size, total_steps, normalize_advantages,
                      hidden_sizes, max_grad_norm
    [population]      size, initial_taus, exploit_threshold, noise_bound, tau_min, tau_max,
                      rounds, steps_per_round, elo_games_per_pair, elo_k, elo_initial,
                      eval_games, static_risk, exploit
    [run]             seed, seeds, output_dir, workers, eval_rollouts

Keys may be spelled with dashes. Unknown keys and out-of-range values raise `ConfigError`
naming the dotted key.
"""
import dataclasses
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union, get_args, get_origin

if sys.version_info >= (3, 11):
    try:
        import tomllib
    except ImportError:
        # Help users on older alphas
        if not TYPE_CHECKING:
            import tomli as tomllib
else:
    import tomli as tomllib

from rpbt.const import (
    CLIP_EPSILON,
    DEFAULT_N_MAX,
    ELO_GAMES_PER_PAIR,
    ELO_INITIAL,
    ELO_K,
    ENTROPY_COEF,
    EVAL_GAMES,
    EVAL_ROLLOUTS,
    EXPLOIT_THRESHOLD,
    HIDDEN_SIZES,
    INITIAL_TAUS,
    MAX_GRAD_NORM,
    MINIBATCH_SIZE,
    NOISE_BOUND,
    POPULATION_SIZE,
    ROUNDS,
    STEPS_PER_ROUND,
    TAU_MAX,
    TAU_MIN,
    TOY_BATCH_SIZE,
    TOY_GAMMA,
    TOY_LAMBDA,
    TOY_LEARNING_RATE,
    TOY_TAUS,
    TOY_TOTAL_STEPS,
    UPDATE_EPOCHS,
    VALUE_COEF,
)
from rpbt.model import DomainError, RiskConfig, RpbtError
from rpbt.population import EnvSpec, PopulationSettings
from rpbt.rppo import RppoConfig


class ConfigError(RpbtError, ValueError):
    """Invalid configuration. `key` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(key, message)


def _in_unit_interval(value: float) -> bool:
    return 0.0 < value < 1.0


@dataclass(frozen=True)
class GridworldSection:
    wind_probability: float = 0.5
    step_cap: int = 25

    def validate(self, prefix: str) -> None:
        _require(0.0 <= self.wind_probability <= 1.0, f"{prefix}.wind_probability", "must lie in [0, 1]")
        _require(self.step_cap >= 1, f"{prefix}.step_cap", "must be positive")


@dataclass(frozen=True)
class DuelSection:
    length: int = 9
    slip_probability: float = 0.2
    step_cap: int = 50

    def validate(self, prefix: str) -> None:
        _require(self.length >= 7, f"{prefix}.length", "the arena needs at least 7 cells")
        _require(0.0 <= self.slip_probability <= 1.0, f"{prefix}.slip_probability", "must lie in [0, 1]")
        _require(self.step_cap >= 1, f"{prefix}.step_cap", "must be positive")


@dataclass(frozen=True)
class EnvSection:
    gridworld: GridworldSection = field(default_factory=GridworldSection)
    duel: DuelSection = field(default_factory=DuelSection)

    def validate(self, prefix: str) -> None:
        self.gridworld.validate(f"{prefix}.gridworld")
        self.duel.validate(f"{prefix}.duel")


@dataclass(frozen=True)
class RiskSection:
    taus: Tuple[float, ...] = TOY_TAUS
    alpha: Optional[float] = None  # None: 1 / (2 max(tau, 1 - tau))
    gamma: float = TOY_GAMMA
    lam: float = TOY_LAMBDA
    n_max: int = DEFAULT_N_MAX

    def validate(self, prefix: str) -> None:
        _require(len(self.taus) > 0, f"{prefix}.taus", "needs at least one risk level")
        for tau in self.taus:
            _require(_in_unit_interval(tau), f"{prefix}.taus", f"{tau} is outside (0, 1)")
        _require(_in_unit_interval(self.gamma), f"{prefix}.gamma", "must lie in (0, 1)")
        _require(0.0 <= self.lam < 1.0, f"{prefix}.lambda", "must lie in [0, 1)")
        _require(self.n_max >= 1, f"{prefix}.n_max", "must be positive")
        for tau in self.taus:
            try:
                RiskConfig(tau, self.alpha, self.gamma, self.lam, self.n_max)
            except DomainError as e:
                raise ConfigError(f"{prefix}.alpha", str(e)) from None


@dataclass(frozen=True)
class RppoSection:
    clip_epsilon: float = CLIP_EPSILON
    update_epochs: int = UPDATE_EPOCHS
    entropy_coef: float = ENTROPY_COEF
    value_coef: float = VALUE_COEF
    learning_rate: float = TOY_LEARNING_RATE
    horizon: int = TOY_BATCH_SIZE
    minibatch_size: int = MINIBATCH_SIZE
    total_steps: int = TOY_TOTAL_STEPS
    normalize_advantages: bool = True
    hidden_sizes: Tuple[int, ...] = HIDDEN_SIZES
    max_grad_norm: Optional[float] = MAX_GRAD_NORM

    def validate(self, prefix: str) -> None:
        _require(self.clip_epsilon > 0.0, f"{prefix}.clip_epsilon", "must be positive")
        _require(self.update_epochs >= 1, f"{prefix}.update_epochs", "must be positive")
        _require(self.entropy_coef >= 0.0, f"{prefix}.entropy_coef", "must be nonnegative")
        _require(self.value_coef >= 0.0, f"{prefix}.value_coef", "must be nonnegative")
        _require(self.learning_rate > 0.0, f"{prefix}.learning_rate", "must be positive")
        _require(self.horizon >= 1, f"{prefix}.horizon", "must be positive")
        _require(self.minibatch_size >= 1, f"{prefix}.minibatch_size", "must be positive")
        _require(self.total_steps >= 1, f"{prefix}.total_steps", "must be positive")
        _require(all(h >= 1 for h in self.hidden_sizes), f"{prefix}.hidden_sizes", "layer sizes must be positive")
        _require(
            self.max_grad_norm is None or self.max_grad_norm > 0.0, f"{prefix}.max_grad_norm", "must be positive"
        )

    def build(self, risk: RiskConfig) -> RppoConfig:
        return RppoConfig(
            risk=risk,
            clip_epsilon=self.clip_epsilon,
            update_epochs=self.update_epochs,
            entropy_coef=self.entropy_coef,
            value_coef=self.value_coef,
            learning_rate=self.learning_rate,
            horizon=self.horizon,
            minibatch_size=self.minibatch_size,
            normalize_advantages=self.normalize_advantages,
            hidden_sizes=self.hidden_sizes,
            max_grad_norm=self.max_grad_norm,
        )


@dataclass(frozen=True)
class PopulationSection:
    size: int = POPULATION_SIZE
    initial_taus: Tuple[float, ...] = INITIAL_TAUS
    exploit_threshold: float = EXPLOIT_THRESHOLD
    noise_bound: float = NOISE_BOUND
    tau_min: float = TAU_MIN
    tau_max: float = TAU_MAX
    rounds: int = ROUNDS
    steps_per_round: int = STEPS_PER_ROUND
    elo_games_per_pair: int = ELO_GAMES_PER_PAIR
    elo_k: float = ELO_K
    elo_initial: float = ELO_INITIAL
    eval_games: int = EVAL_GAMES
    static_risk: bool = False
    exploit: bool = True

    def validate(self, prefix: str) -> None:
        _require(self.size >= 1, f"{prefix}.size", "must be positive")
        _require(
            len(self.initial_taus) == self.size,
            f"{prefix}.initial_taus",
            f"needs one risk level per agent ({self.size}), got {len(self.initial_taus)}",
        )
        _require(0.0 < self.tau_min <= self.tau_max < 1.0, f"{prefix}.tau_min", "need 0 < tau_min <= tau_max < 1")
        for tau in self.initial_taus:
            _require(
                self.tau_min <= tau <= self.tau_max,
                f"{prefix}.initial_taus",
                f"{tau} is outside [{self.tau_min}, {self.tau_max}]",
            )
        _require(self.exploit_threshold >= 0.0, f"{prefix}.exploit_threshold", "must be nonnegative")
        _require(self.noise_bound >= 0.0, f"{prefix}.noise_bound", "must be nonnegative")
        _require(self.rounds >= 0, f"{prefix}.rounds", "must be nonnegative")
        _require(self.steps_per_round >= 1, f"{prefix}.steps_per_round", "must be positive")
        _require(self.elo_games_per_pair >= 0, f"{prefix}.elo_games_per_pair", "must be nonnegative")
        _require(self.eval_games >= 1, f"{prefix}.eval_games", "must be positive")
        _require(self.elo_k > 0.0, f"{prefix}.elo_k", "must be positive")

    def settings(self) -> PopulationSettings:
        return PopulationSettings(
            size=self.size,
            initial_taus=self.initial_taus,
            exploit_threshold=self.exploit_threshold,
            noise_bound=self.noise_bound,
            tau_min=self.tau_min,
            tau_max=self.tau_max,
            elo_k=self.elo_k,
            elo_initial=self.elo_initial,
            elo_games_per_pair=self.elo_games_per_pair,
            steps_per_round=self.steps_per_round,
            static_risk=self.static_risk,
            exploit=self.exploit,
        )


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    seeds: Tuple[int, ...] = ()
    output_dir: str = "runs/latest"
    workers: int = 1
    eval_rollouts: int = EVAL_ROLLOUTS

    def validate(self, prefix: str) -> None:
        _require(self.seed >= 0, f"{prefix}.seed", "must be nonnegative")
        _require(all(s >= 0 for s in self.seeds), f"{prefix}.seeds", "must be nonnegative")
        _require(len(set(self.seeds)) == len(self.seeds), f"{prefix}.seeds", "must be distinct")
        _require(self.workers >= 1, f"{prefix}.workers", "must be positive")
        _require(self.eval_rollouts >= 1, f"{prefix}.eval_rollouts", "must be positive")
        _require(bool(self.output_dir), f"{prefix}.output_dir", "must not be empty")

    @property
    def seed_list(self) -> Tuple[int, ...]:
        return self.seeds or (self.seed,)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    risk: RiskSection = field(default_factory=RiskSection)
    rppo: RppoSection = field(default_factory=RppoSection)
    population: PopulationSection = field(default_factory=PopulationSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self) -> None:
        for section in fields(self):
            getattr(self, section.name).validate(section.name)

    def risk_config(self, tau: float) -> RiskConfig:
        return RiskConfig(tau, self.risk.alpha, self.risk.gamma, self.risk.lam, self.risk.n_max)

    def rppo_config(self, tau: float) -> RppoConfig:
        return self.rppo.build(self.risk_config(tau))

    def gridworld_spec(self) -> EnvSpec:
        return ("gridworld", dataclasses.asdict(self.env.gridworld))

    def duel_spec(self) -> EnvSpec:
        return ("duel", dataclasses.asdict(self.env.duel))

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["risk"]["lambda"] = data["risk"].pop("lam")
        return data

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Apply command-line flags. `None` values are ignored."""
        run = self.run
        risk = self.risk
        rppo = self.rppo
        population = self.population
        for key, value in overrides.items():
            if value is None:
                continue
            if key in ("seed", "seeds", "output_dir", "workers", "eval_rollouts"):
                run = replace(run, **{key: tuple(value) if key == "seeds" else value})
            elif key == "taus":
                risk = replace(risk, taus=tuple(float(t) for t in value))
            elif key in ("rounds", "eval_games", "steps_per_round", "exploit_threshold"):
                population = replace(population, **{key: value})
            elif key == "total_steps":
                rppo = replace(rppo, total_steps=value)
            else:
                raise ConfigError(key, "unknown override")
        return replace(self, run=run, risk=risk, rppo=rppo, population=population)


S = TypeVar("S")

_RENAMES = {"risk": {"lambda": "lam"}}


def _normalize_key(key: str) -> str:
    return key.replace("--", "").replace("-", "_")


def _coerce(value: Any, annotation: Any, key: str) -> Any:
    """Check a TOML value against a section field's annotation."""
    origin = get_origin(annotation)
    if origin is Union:
        if value is None:
            return None
        (inner,) = [arg for arg in get_args(annotation) if arg is not type(None)]
        return _coerce(value, inner, key)
    _require(value is not None, key, "may not be null")
    if origin is tuple:
        _require(isinstance(value, list), key, "expected a list")
        return tuple(_coerce(v, get_args(annotation)[0], key) for v in value)
    if annotation is bool:
        _require(isinstance(value, bool), key, "expected true or false")
    elif annotation is int:
        _require(isinstance(value, int) and not isinstance(value, bool), key, "expected an integer")
    elif annotation is float:
        _require(isinstance(value, (int, float)) and not isinstance(value, bool), key, "expected a number")
        return float(value)
    elif annotation is str:
        _require(isinstance(value, str), key, "expected a string")
    return value


def _section(cls: Type[S], table: Any, prefix: str) -> S:
    _require(isinstance(table, Mapping), prefix, "expected a table")
    renames = _RENAMES.get(prefix, {})
    known = {f.name: f.type for f in fields(cls)}  # type: ignore[arg-type]
    values: Dict[str, Any] = {}
    for raw_key, value in table.items():
        key = _normalize_key(raw_key)
        name = renames.get(key, key)
        if name not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
        annotation = known[name]
        if dataclasses.is_dataclass(annotation):
            values[name] = _section(annotation, value, f"{prefix}.{key}")
        else:
            values[name] = _coerce(value, annotation, f"{prefix}.{key}")
    return cls(**values)


_SECTIONS: Dict[str, type] = {
    "env": EnvSection,
    "risk": RiskSection,
    "rppo": RppoSection,
    "population": PopulationSection,
    "run": RunSection,
}


def parse_config(data: Mapping[str, Any]) -> ExperimentConfig:
    sections: Dict[str, Any] = {}
    for raw_key, table in data.items():
        key = _normalize_key(raw_key)
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown table")
        try:
            sections[key] = _section(_SECTIONS[key], table, key)
        except TypeError as e:
            raise ConfigError(key, str(e)) from None
    return ExperimentConfig(**sections)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Parse a TOML experiment file. Read and syntax errors are reported as `ConfigError`."""
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise ConfigError(str(path), f"cannot read: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(path), f"invalid TOML: {e}") from None
    return parse_config(data)

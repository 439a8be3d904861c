import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, NoReturn, Optional, Tuple, TypeVar

import rich_click as click

from ._rpbt_version import version as __version__
from .config import ConfigError, ExperimentConfig, load_config
from .const import EVAL_GAMES
from .experiments import (
    RPBT_STREAMS,
    TOY_STREAMS,
    cmd_eval,
    cmd_tournament,
    cmd_train_rpbt,
    cmd_train_toy,
    expand_checkpoints,
)
from .model import RpbtError
from .output import out, write_json
from .report import Report
from .rundir import open_run
from .verify import VerifySettings, load_user_mdps, run_verify

logger = logging.getLogger(__name__)

CONFIG_KEY = "rpbt.config"
T = TypeVar("T")


def read_config_file(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[str]:
    """Load the experiment file into `ctx.meta` and inject its `[run]` values as option defaults."""
    if not value:
        ctx.meta[CONFIG_KEY] = ExperimentConfig()
        return None
    try:
        config = load_config(value)
    except ConfigError as e:
        _fail(ctx, config_error=f"{value}: {e}")
    except OSError as e:
        _fail(ctx, config_error=f"cannot read {value}: {e}")
    ctx.meta[CONFIG_KEY] = config

    names = {p.name for p in ctx.command.params}
    defaults = {k: v for k, v in asdict(config.run).items() if k in names and k != "seeds"}
    default_map: Dict[str, Any] = {}
    if ctx.default_map:
        default_map.update(ctx.default_map)
    default_map.update(defaults)
    ctx.default_map = default_map
    return value


def _fail(ctx: click.Context, config_error: str) -> NoReturn:
    report = Report()
    report.config_error(config_error)
    ctx.exit(report.return_code)


def _config(ctx: click.Context, **overrides: Any) -> ExperimentConfig:
    config: ExperimentConfig = ctx.meta.get(CONFIG_KEY) or ExperimentConfig()
    return config.with_overrides(**{k: (v if v != () else None) for k, v in overrides.items()})


def _report(ctx: click.Context) -> Report:
    obj = ctx.find_object(dict) or {}
    return Report(quiet=obj.get("quiet", False), verbose=obj.get("verbose", False))


def _guarded(report: Report, fn: Callable[..., T], *args: Any, **kwargs: Any) -> Optional[T]:
    """Run `fn`, turning library errors into report entries."""
    try:
        return fn(*args, **kwargs)
    except ConfigError as e:
        report.config_error(str(e))
    except (RpbtError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        report.runtime_error(str(e))
    except Exception as e:
        logger.exception("unexpected error")
        report.runtime_error(f"{type(e).__name__}: {e}")
    return None


config_option = click.option(
    "--config",
    type=click.Path(exists=True, file_okay=True, dir_okay=False, readable=True, allow_dash=False, path_type=str),
    is_eager=True,
    callback=read_config_file,
    help="Read the experiment configuration from a TOML file.",
)
seed_option = click.option("--seed", type=int, default=None, help="Root seed of every random stream.")
workers_option = click.option(
    "-W", "--workers", type=click.IntRange(min=1), default=None, help="Number of parallel worker processes."
)
output_dir_option = click.option(
    "-o",
    "--output-dir",
    type=click.Path(file_okay=False, path_type=str),
    default=None,
    help="Run directory for checkpoints and metric streams.",
)
force_option = click.option("--force", is_flag=True, help="Start over in a run directory that already holds a run.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-q", "--quiet", is_flag=True, help="Only emit errors and the final summary.")
@click.option("-v", "--verbose", is_flag=True, help="Emit debug logging and every failure detail.")
@click.version_option(version=__version__, message="%(prog)s, %(version)s")
@click.pass_context
def cli(ctx: click.Context, quiet: bool, verbose: bool) -> None:
    """Risk-sensitive PPO and population-based self-play with tunable risk levels."""
    ctx.ensure_object(dict)
    ctx.obj["quiet"] = quiet
    ctx.obj["verbose"] = verbose
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@seed_option
@workers_option
@output_dir_option
@click.option("--mdps", type=click.IntRange(min=1), default=100, show_default=True, help="Random MDPs per suite.")
@click.option(
    "--mdp",
    "mdp_files",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    multiple=True,
    help="MDP definition file to add to the operator suites; may repeat.",
)
@click.option("--toy", is_flag=True, help="Also train the gridworld agents and check their risk ordering.")
@click.option(
    "--toy-steps", type=click.IntRange(min=1), default=200_000, show_default=True, help="Training steps per agent."
)
@click.option("--inject-fault", is_flag=True, hidden=True, help="Swap in an overshooting backup.")
@click.option(
    "--report",
    "report_path",
    type=click.Path(dir_okay=False, path_type=str),
    default=None,
    help="Report file [default: OUTPUT_DIR/verify-report.txt].",
)
@click.pass_context
def verify(
    ctx: click.Context,
    config: Optional[str],
    seed: Optional[int],
    workers: Optional[int],
    output_dir: Optional[str],
    mdps: int,
    mdp_files: Tuple[Path, ...],
    toy: bool,
    toy_steps: int,
    inject_fault: bool,
    report_path: Optional[str],
) -> None:
    """Check the operator, estimator and gradient properties on randomized inputs."""
    report = _report(ctx)
    experiment = _guarded(report, _config, ctx, seed=seed, workers=workers, output_dir=output_dir)
    user_mdps = _guarded(report, load_user_mdps, mdp_files) if experiment is not None else None
    if experiment is not None and user_mdps is not None:
        settings = VerifySettings(
            seed=experiment.run.seed,
            n_mdps=mdps,
            inject_fault=inject_fault,
            toy=toy,
            toy_steps=toy_steps,
            workers=experiment.run.workers,
            mdps=user_mdps,
        )
        _guarded(report, run_verify, settings, report)
        path = Path(report_path) if report_path else Path(experiment.run.output_dir) / "verify-report.txt"
        written = _guarded(report, report.write, path)
        if written is not None:
            report.progress(f"report written to {written}")
    out(str(report))
    ctx.exit(report.return_code)


@cli.command("train-toy")
@config_option
@seed_option
@workers_option
@output_dir_option
@click.option("--tau", "taus", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), multiple=True,
              help="Risk level to train; repeat for several agents.")
@click.option("--seeds", type=int, multiple=True, help="Training seeds; repeat for several runs per risk level.")
@click.option("--total-steps", type=click.IntRange(min=1), default=None, help="Environment steps per agent.")
@force_option
@click.option("--resume", is_flag=True, help="Continue from the checkpoints in the run directory.")
@click.pass_context
def train_toy(
    ctx: click.Context,
    config: Optional[str],
    seed: Optional[int],
    workers: Optional[int],
    output_dir: Optional[str],
    taus: Tuple[float, ...],
    seeds: Tuple[int, ...],
    total_steps: Optional[int],
    force: bool,
    resume: bool,
) -> None:
    """Train one agent per risk level on the windy gridworld and record where it goes."""
    report = _report(ctx)
    experiment = _guarded(
        report,
        _config,
        ctx,
        seed=seed,
        workers=workers,
        output_dir=output_dir,
        taus=taus,
        seeds=seeds,
        total_steps=total_steps,
    )
    if experiment is not None:
        _guarded(report, _train_toy, experiment, report, force, resume)
    out(str(report))
    ctx.exit(report.return_code)


def _train_toy(experiment: ExperimentConfig, report: Report, force: bool, resume: bool) -> None:
    with open_run(experiment.run.output_dir, force=force, resume=resume, streams=TOY_STREAMS) as run:
        run.write_config(experiment.to_dict())
        run.write_seeds({"seed": experiment.run.seed, "seeds": list(experiment.run.seed_list)})
        cmd_train_toy(experiment, run, report, resume=resume)


@cli.command("train-rpbt")
@config_option
@seed_option
@workers_option
@output_dir_option
@click.option("--rounds", type=click.IntRange(min=1), default=None, help="Training rounds.")
@click.option("--steps-per-round", type=click.IntRange(min=1), default=None, help="Environment steps per agent per round.")
@click.option("--exploit-threshold", type=click.FloatRange(min=0.0), default=None, help="ELO gap that triggers a copy.")
@click.option("--games", "eval_games", type=click.IntRange(min=1), default=None,
              help="Games of the final champion against a random player.")
@force_option
@click.pass_context
def train_rpbt(
    ctx: click.Context,
    config: Optional[str],
    seed: Optional[int],
    workers: Optional[int],
    output_dir: Optional[str],
    rounds: Optional[int],
    steps_per_round: Optional[int],
    exploit_threshold: Optional[float],
    eval_games: Optional[int],
    force: bool,
) -> None:
    """Population self-play on the duel, tuning every agent's risk level as it goes."""
    report = _report(ctx)
    experiment = _guarded(
        report,
        _config,
        ctx,
        seed=seed,
        workers=workers,
        output_dir=output_dir,
        rounds=rounds,
        steps_per_round=steps_per_round,
        exploit_threshold=exploit_threshold,
        eval_games=eval_games,
    )
    if experiment is not None:
        _guarded(report, _train_rpbt, experiment, report, force)
    out(str(report))
    ctx.exit(report.return_code)


def _train_rpbt(experiment: ExperimentConfig, report: Report, force: bool) -> None:
    with open_run(experiment.run.output_dir, force=force, streams=RPBT_STREAMS) as run:
        run.write_config(experiment.to_dict())
        run.write_seeds(
            {
                "seed": experiment.run.seed,
                "derivation": "SeedSequence([seed, round, agent, purpose])",
            }
        )
        cmd_train_rpbt(experiment, run, report)


@cli.command()
@config_option
@seed_option
@workers_option
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True, path_type=str))
@click.option(
    "--include",
    type=str,
    default="*.ckpt",
    show_default=True,
    help="Gitwildmatch pattern selecting checkpoints inside directories.",
)
@click.option("--games", type=click.IntRange(min=1), default=EVAL_GAMES, show_default=True, help="Games per pair.")
@click.option("--output", type=click.Path(dir_okay=False, path_type=str), default=None, help="Write the matrix as JSON.")
@click.pass_context
def tournament(
    ctx: click.Context,
    config: Optional[str],
    seed: Optional[int],
    workers: Optional[int],
    checkpoints: Tuple[str, ...],
    include: str,
    games: int,
    output: Optional[str],
) -> None:
    """Round robin between saved policies; prints the win-rate matrix."""
    report = _report(ctx)
    experiment = _guarded(report, _config, ctx, seed=seed, workers=workers)
    players = _guarded(report, expand_checkpoints, checkpoints, include) if experiment is not None else None
    if players is not None and len(players) < 2:
        report.config_error(f"a tournament needs at least two checkpoints, found {len(players)}")
        players = None
    if experiment is not None and players is not None:
        result = _guarded(report, cmd_tournament, experiment, [str(p) for p in players], games)
        if result is not None:
            report.games_played += sum(match.games for match in result.results.values())
            width = max(len(name) for name in result.names)
            for a, name in enumerate(result.names):
                cells = [" -- " if a == b else f"{result.win_rate[a, b]:.2f}" for b in range(len(result.names))]
                out(f"{name:<{width}}  {'  '.join(cells)}", bold=False)
            if output:
                _guarded(report, write_json, result.to_dict(), output)
    out(str(report))
    ctx.exit(report.return_code)


@cli.command("eval")
@config_option
@seed_option
@click.argument("player_a", type=str)
@click.argument("player_b", type=str)
@click.option("--games", type=click.IntRange(min=1), default=EVAL_GAMES, show_default=True, help="Games to play.")
@click.option("--output", type=click.Path(dir_okay=False, path_type=str), default=None, help="Write the counts as JSON.")
@click.pass_context
def evaluate(
    ctx: click.Context,
    config: Optional[str],
    seed: Optional[int],
    player_a: str,
    player_b: str,
    games: int,
    output: Optional[str],
) -> None:
    """Head-to-head games between two checkpoints; either may be `random`."""
    report = _report(ctx)
    experiment = _guarded(report, _config, ctx, seed=seed)
    if experiment is not None:
        result = _guarded(report, cmd_eval, experiment, player_a, player_b, games)
        if result is not None:
            report.games_played += result.games
            out(
                f"{player_a} vs {player_b}: {result.wins} wins, {result.draws} draws, {result.losses} losses "
                f"(win rate {result.win_rate:.3f})",
                bold=False,
            )
            if output:
                _guarded(report, write_json, {**asdict(result), "win_rate": result.win_rate}, output)
    out(str(report))
    ctx.exit(report.return_code)


def main() -> None:
    cli(prog_name="rpbt")


if __name__ == "__main__":
    main()

import functools
import logging
from pathlib import Path

import click
import numpy as np

from fedminmax.errors import ConfigError, NumericalError, PartitionError, ReportError, SchemaError

log = logging.getLogger(__name__)

EXIT_INVALID = 1
EXIT_FAILED = 2


class _ExitCodeGroup(click.Group):
    """Report usage errors with the validation status instead of click's 2."""

    def main(self, *args, **kwargs):
        kwargs.pop("standalone_mode", None)
        try:
            return super().main(*args, standalone_mode=False, **kwargs)
        except click.UsageError as exc:
            exc.show()
            raise SystemExit(EXIT_INVALID) from exc
        except click.ClickException as exc:
            exc.show()
            raise SystemExit(exc.exit_code) from exc
        except click.Abort as exc:
            click.echo("Aborted!", err=True)
            raise SystemExit(EXIT_INVALID) from exc


@click.group(cls=_ExitCodeGroup)
def main():
    """fedminmax: minimax group fairness for federated learning"""
    pass


def _guarded(fn):
    """Map validation failures to exit 1 and runtime failures to exit 2."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, SchemaError, PartitionError) as exc:
            click.echo(click.style(f"Error: {exc}", fg="red"), err=True)
            raise SystemExit(EXIT_INVALID) from exc
        except (NumericalError, ReportError, ValueError) as exc:
            log.error("%s", exc)
            click.echo(click.style(f"Error: {exc}", fg="red"), err=True)
            raise SystemExit(EXIT_FAILED) from exc

    return wrapper


def _experiment_options(fn):
    options = [
        click.option(
            "--config",
            "config_path",
            default=None,
            type=click.Path(exists=True, dir_okay=False, resolve_path=True),
            help="Path to a TOML experiment file (merged over user defaults).",
        ),
        click.option("--seed", default=None, type=int, help="Run a single seed instead of evaluation.seeds."),
        click.option(
            "--algorithm",
            default=None,
            type=click.Choice(["fedminmax", "centralized_minmax", "local_fedminmax", "afl", "fedavg"]),
            help="Training procedure.",
        ),
        click.option(
            "--setting",
            default=None,
            type=click.Choice(["ESG", "PSG", "SSG"], case_sensitive=False),
            help="Partition setting.",
        ),
        click.option("--clients", default=None, type=int, help="Number of clients."),
        click.option("--rounds", default=None, type=int, help="Communication rounds."),
        click.option(
            "--out",
            default=None,
            type=click.Path(file_okay=False, path_type=Path),
            help="Output directory (default: output_dir, then FEDMINMAX_OUTPUT_DIR, then ./runs).",
        ),
        click.option(
            "--loss", default=None, type=click.Choice(["brier", "cross_entropy"]), help="Training loss."
        ),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load_experiment(config_path, seed, algorithm, setting, clients, rounds, out, loss):
    """Resolve the experiment: CLI flag > config file > env > schema default.

    The log level is the exception: FEDMINMAX_LOG_LEVEL wins over any
    log_level in the config files.
    """
    from fedminmax import config

    raw = config.init(config_path)

    from fedminmax import env
    from fedminmax.utils.log import configure_logging

    configure_logging(env.LOG_LEVEL)

    overrides = {
        "evaluation.seeds": [seed] if seed is not None else None,
        "algorithm.name": algorithm,
        "partition.setting": setting,
        "partition.num_clients": clients,
        "algorithm.rounds": rounds,
        "algorithm.loss": loss,
    }
    if "workers" not in raw.get("algorithm", {}):
        overrides["algorithm.workers"] = env.WORKERS
    cfg = config.parse_config(config.apply_overrides(raw, overrides))
    out_root = out or cfg.output_dir or Path(env.OUTPUT_ROOT)
    return cfg, Path(out_root)


def _fmt(values) -> str:
    return "(" + ", ".join(f"{v:.3f}" for v in values) + ")"


@main.command()
@_experiment_options
@_guarded
def run(config_path, seed, algorithm, setting, clients, rounds, out, loss):
    """Train one algorithm over every configured seed and write reports."""
    from fedminmax.experiment import run_experiment

    cfg, out_root = _load_experiment(config_path, seed, algorithm, setting, clients, rounds, out, loss)
    reports, aggregate = run_experiment(cfg, out_root)

    name = cfg.algorithm.name.value
    click.echo(
        f"  {click.style('Algorithm:', bold=True)} {name}   "
        f"{click.style('Setting:', bold=True)} {cfg.partition.setting.value}   "
        f"{click.style('Clients:', bold=True)} {cfg.partition.num_clients}"
    )
    for report in reports:
        ev = report.evaluation
        click.echo(
            f"  seed {report.seed}: worst {ev['worst_risk']:.4f}  best {ev['best_risk']:.4f}  "
            f"weights {_fmt(report.final_group_weights)}"
        )
    worst, best = aggregate["worst_risk"], aggregate["best_risk"]
    click.echo(
        f"  {click.style('Worst-group risk:', bold=True)} {worst['mean']:.4f} ± {worst['std']:.4f}   "
        f"{click.style('Best-group risk:', bold=True)} {best['mean']:.4f} ± {best['std']:.4f}"
    )
    click.echo(f"  {click.style('Reports:', bold=True)}   {click.style(str(out_root / name), fg='cyan')}")


@main.command()
@_experiment_options
@_guarded
def compare(config_path, seed, algorithm, setting, clients, rounds, out, loss):
    """Run federated and centralized minimax side by side and report their gap."""
    from fedminmax.experiment import compare_experiment

    cfg, out_root = _load_experiment(config_path, seed, algorithm, setting, clients, rounds, out, loss)
    comparison = compare_experiment(cfg, out_root)
    click.echo(f"  {click.style('Rounds:', bold=True)}            {comparison.param_diffs.size}")
    click.echo(f"  {click.style('Max param diff:', bold=True)}    {comparison.max_param_diff:.3e}")
    click.echo(f"  {click.style('Max weight diff:', bold=True)}   {comparison.max_weight_diff:.3e}")


@main.command("analyze-feasibility")
@_experiment_options
@_guarded
def analyze_feasibility(config_path, seed, algorithm, setting, clients, rounds, out, loss):
    """Check whether client weightings can reach the minimax group weights."""
    from fedminmax.experiment import feasibility_experiment

    cfg, out_root = _load_experiment(config_path, seed, algorithm, setting, clients, rounds, out, loss)
    result = feasibility_experiment(cfg, out_root)
    verdict = (
        click.style("feasible", fg="green") if result.report.feasible else click.style("infeasible", fg="yellow")
    )
    click.echo(f"  {click.style('Reachable:', bold=True)}    {verdict}")
    click.echo(f"  {click.style('Residual:', bold=True)}     {result.report.residual:.3e}")
    click.echo(f"  {click.style('mu*:', bold=True)}          {_fmt(result.mu_star.values)}")
    click.echo(f"  {click.style('AFL P_A lambda:', bold=True)} {_fmt(result.afl_group_weights)}")
    click.echo(f"  {click.style('AFL gap (L1):', bold=True)} {result.afl_gap:.4f}")


@main.command("synth-gen")
@click.option(
    "--config",
    "config_path",
    default=None,
    type=click.Path(exists=True, dir_okay=False, resolve_path=True),
    help="Path to a TOML experiment file.",
)
@click.option("--seed", default=0, show_default=True, type=int, help="Generator seed.")
@click.option(
    "--out",
    required=True,
    type=click.Path(dir_okay=False, path_type=Path),
    help="Destination .npz file.",
)
@click.option(
    "--partition",
    "partition_out",
    default=None,
    type=click.Path(dir_okay=False, path_type=Path),
    help="Also partition the training split and store the shards here.",
)
@_guarded
def synth_gen(config_path, seed, out, partition_out):
    """Dump the synthetic dataset (and optionally its partition) as .npz."""
    from fedminmax import config
    from fedminmax.data import generate_synthetic, partition, train_test_split
    from fedminmax.utils.snapshot import save_dataset, save_partition

    cfg = config.parse_config(config.init(config_path))
    dataset = generate_synthetic(cfg.dataset.synthetic.spec(seed))
    save_dataset(dataset, out)
    click.echo(f"  {click.style('Dataset:', bold=True)}   {len(dataset)} samples -> {out}")
    if partition_out is not None:
        train, _ = train_test_split(dataset, cfg.evaluation.test_fraction, seed)
        shards = partition(train, cfg.partition.plan(seed))
        save_partition(shards, partition_out)
        click.echo(f"  {click.style('Partition:', bold=True)} {len(shards)} shards -> {partition_out}")


@main.command(context_settings={"ignore_unknown_options": True})
@click.argument("values", nargs=-1, type=float, required=True)
@click.option("--epsilon", default=0.0, show_default=True, type=float, help="Entry floor.")
@_guarded
def project(values, epsilon):
    """Project VALUES onto the probability simplex (debugging aid)."""
    from fedminmax.optim import project_simplex

    try:
        projected = project_simplex(np.array(values), epsilon)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    click.echo(" ".join(f"{v:.12g}" for v in projected.values))


if __name__ == "__main__":
    main()

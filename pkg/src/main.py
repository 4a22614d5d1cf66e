"""
Description:
This module is the command line entry point of the prompt portfolio simulator.
It trains federated global-local prompt portfolios on the synthetic feature model, runs the
experiment sweeps, executes the verification suites and exposes the closed-form theory
calculators.

Exit codes: 0 success, 1 verification failure, 2 configuration or input error,
3 numerical divergence.
"""

import functools
import json
import logging
import sys
from pathlib import Path

import click

from src.analytics.decomposition import coefficient_orientation, dynamics_diagnostics
from src.analytics.evaluation import (
    remix_theta,
    summarize_run,
    sweep_clients,
    sweep_heterogeneity,
    sweep_shots,
    sweep_theta,
)
from src.analytics.theory import (
    GaussianTestModel,
    advantage_interval,
    analytic_error,
    portfolio_ratio,
    theta_star_details,
    theta_star_order,
)
from src.analytics.verification import SUITES, run_suite
from src.database.artifacts import (
    artifact_name,
    dataset_rows,
    to_jsonable,
    trajectory_rows,
    write_csv_atomic,
    write_json_atomic,
)
from src.database.db_handler import DatabaseHandler
from src.models.errors import ConfigError, DivergenceError, PromptFolioError, VerificationError
from src.models.run_config import CLIENT_MODES, RunConfig
from src.training.trainer import run_promptfolio

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
ROUND_COLUMNS = ["round", "client", "loss", "grad_norm_global", "grad_norm_local",
                 "beta_global", "gamma_global", "beta_local", "gamma_local"]
SWEEPS = {
    "theta": sweep_theta,
    "heterogeneity": sweep_heterogeneity,
    "clients": sweep_clients,
    "shots": sweep_shots,
}


def configure_logging(level="WARNING"):
    """
    Installs one stderr handler for the whole package.
    """
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING), format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


def exit_code_for(error):
    """
    Maps an exception to the process exit code.
    """
    if isinstance(error, (ConfigError, DivergenceError, VerificationError)):
        return error.exit_code
    return 2


def reports_errors(command):
    """
    Turns simulator exceptions into a one-line diagnostic on stderr and the matching exit code.
    """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except PromptFolioError as error:
            click.echo(f"error: {error}", err=True)
            sys.exit(exit_code_for(error))
    return wrapper


def load_run_config(config_path, seed):
    """
    Reads the configuration and applies the --seed override.
    """
    config = RunConfig.from_file(config_path)
    if seed is not None:
        config = config.replace(seed=seed)
    return config


def write_report(path, report):
    """
    Writes a JSON report; non-finite values are listed under 'nan_sentinels' in the report itself.
    """
    sentinels = []
    to_jsonable(report, sentinels)
    report["nan_sentinels"] = sentinels
    write_json_atomic(path, report)
    return sentinels


@click.group()
@click.option("--log-level", default="WARNING", envvar="PROMPTFOLIO_LOG_LEVEL", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              help="Logging level (env PROMPTFOLIO_LOG_LEVEL).")
def cli(log_level):
    """
    Simulator and theory checks for global-local prompt portfolios in federated prompt learning.
    """
    configure_logging(log_level)


config_option = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                             help="JSON run configuration.")
out_option = click.option("--out", "out_dir", default="promptfolio_out", envvar="PROMPTFOLIO_OUT",
                          show_default=True, type=click.Path(file_okay=False),
                          help="Output directory (env PROMPTFOLIO_OUT).")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None,
                           help="Overrides the master seed of the configuration.")
jobs_option = click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
                           help="Worker threads.")


@cli.command()
@config_option
@out_option
@seed_option
@jobs_option
@click.option("--dump-data", is_flag=True, help="Also write the generated train and test samples as CSV.")
@click.option("--remix", is_flag=True, help="Also evaluate the frozen prompts over the theta grid.")
@reports_errors
def run(config_path, out_dir, seed, jobs, dump_data, remix):
    """
    Trains one prompt portfolio and writes its report and coefficient trajectories.
    """
    config = load_run_config(config_path, seed)
    out = Path(out_dir)
    config_hash = config.config_hash()
    result = run_promptfolio(config, jobs=jobs)

    report = {
        "config": config.to_dict(),
        "config_hash": config_hash,
        "mode": result.mode,
        "eta": result.record.eta,
        "eta_tried": result.record.eta_tried,
        "round_losses": result.record.round_losses,
        "summary": summarize_run(result) if config.n_test else None,
    }
    server = result.trajectories["server"]
    if len(server) >= 2:
        orientation = (1.0, 1.0)
        if config.loss_mode == "margin":
            orientation = coefficient_orientation(result.context.W, result.context.class_prompts,
                                                  result.context.assignment.local_features[0])
        diagnostics = dynamics_diagnostics(server, result.context.bank, result.context.assignment,
                                           result.context.sigma_p or None, 0, result.record.round_losses,
                                           orientation)
        report["dynamics"] = vars(diagnostics)
    if remix and config.n_test:
        report["remix"] = remix_theta(result).summary()

    sentinels = write_report(out / artifact_name("report", config_hash, "json"), report)
    write_csv_atomic(out / artifact_name("trajectories", config_hash, "csv"),
                     *trajectory_rows(result.trajectories, config.S, config.L))
    write_csv_atomic(out / artifact_name("rounds", config_hash, "csv"), ROUND_COLUMNS,
                     [[row[column] for column in ROUND_COLUMNS] for row in result.record.rows])
    if dump_data:
        header, rows = dataset_rows(result.context.datasets, "train")
        _, test_rows = dataset_rows(result.context.test_sets, "test")
        write_csv_atomic(out / artifact_name("data", config_hash, "csv"), header, rows + test_rows)
        write_json_atomic(out / artifact_name("bank", config_hash, "json"), result.context.bank.to_dict())

    click.echo(f"Run {config_hash[:12]} finished ({result.mode}, eta={result.record.eta:.6g}).")
    if report["summary"] is not None:
        click.echo(f"Pooled test error: {report['summary']['empirical']:.4f} "
                   f"(analytic {report['summary']['analytic']:.4f}).")
    if sentinels:
        click.echo(f"Warning: {len(sentinels)} non-finite values written as 'nan' sentinels.")
    click.echo(f"Artifacts written to {out}.")


@cli.command()
@config_option
@click.option("--axis", type=click.Choice(sorted(SWEEPS)), default="theta", show_default=True,
              help="Swept quantity.")
@click.option("--clients-mode", type=click.Choice(CLIENT_MODES), default=None,
              help="Client sweep keeps n_k or the total sample count (default from the configuration).")
@out_option
@seed_option
@jobs_option
@reports_errors
def sweep(config_path, axis, clients_mode, out_dir, seed, jobs):
    """
    Runs a sweep; finished points are kept in the run registry and skipped on a rerun.
    """
    config = load_run_config(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    registry = DatabaseHandler(out / "registry.sqlite")
    try:
        if axis == "clients":
            result = sweep_clients(config, mode=clients_mode, registry=registry, jobs=jobs)
        else:
            result = SWEEPS[axis](config, registry=registry, jobs=jobs)
    finally:
        registry.close()

    config_hash = config.config_hash()
    write_csv_atomic(out / artifact_name(f"sweep_{axis}", config_hash, "csv"), result.header(), result.rows())
    for point in result.points:
        if point.inner is not None:
            write_csv_atomic(out / artifact_name(f"sweep_{axis}_{point.axis_value:g}_theta", config_hash, "csv"),
                             point.inner.header(), point.inner.rows())
    summary = result.summary()
    sentinels = write_report(out / artifact_name(f"sweep_{axis}", config_hash, "json"), summary)

    click.echo(f"Sweep over {result.axis}: {len(result.points)} points.")
    if axis == "theta":
        click.echo(f"Empirical argmin theta: {summary['argmin_empirical']:g}; "
                   f"analytic argmin theta: {summary['argmin_analytic']:g}.")
    else:
        for point in result.points:
            click.echo(f"{result.axis}={point.axis_value:g}: optimal theta {point.optimal_theta:g}, "
                       f"error {point.empirical:.4f}")
        click.echo(f"Optimal theta non-increasing: {summary['optimal_theta_non_increasing']}.")
        if "noise_attenuation" in summary:
            attenuation = summary["noise_attenuation"]
            click.echo(f"Server noise ratio {attenuation['ratio']:.3f} (expected {attenuation['expected']:.3f}).")
    if sentinels:
        click.echo(f"Warning: {len(sentinels)} non-finite values written as 'nan' sentinels.")
    click.echo(f"Artifacts written to {out}.")


@cli.command()
@click.argument("suite", type=click.Choice([*SUITES, "all"]))
@out_option
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="Seed of the random cases.")
@reports_errors
def verify(suite, out_dir, seed):
    """
    Runs a verification suite and writes a JSON verdict; exits 1 on the first failing property.
    """
    report = run_suite(suite, seed=seed)
    verdict = report.to_dict()
    write_report(Path(out_dir) / f"verify_{suite}.json", verdict)
    for check in report.checks:
        click.echo(f"[{'PASS' if check.passed else 'FAIL'}] {check.name}: {check.detail}")
    click.echo(f"Suite '{suite}' {verdict['verdict']}ed in {report.seconds:.1f}s.")
    failure = report.first_failure()
    if failure is not None:
        raise VerificationError(f"property '{failure.name}' failed", failure.name)


@cli.group()
def registry():
    """
    Inspects and prunes the sweep run registry of an output directory.
    """


@registry.command("list")
@out_option
@click.option("--axis", default=None, help="Only runs of this sweep axis.")
@reports_errors
def list_command(out_dir, axis):
    """
    Lists the registered sweep points.
    """
    path = Path(out_dir) / "registry.sqlite"
    if not path.exists():
        click.echo(f"No registry in {out_dir}.")
        return
    db = DatabaseHandler(path)
    try:
        runs = db.list_runs(axis)
    finally:
        db.close()
    for run in runs:
        click.echo(f"{run['config_hash'][:12]} {run['axis']}={run['axis_value']:g} "
                   f"seed {run['payload'].get('seed', '?')} error {run['payload'].get('empirical', float('nan')):.4f}")
    click.echo(f"{len(runs)} registered runs.")


@registry.command("delete")
@click.argument("config_hash")
@out_option
@reports_errors
def delete_command(config_hash, out_dir):
    """
    Removes the runs whose configuration hash starts with CONFIG_HASH so the next sweep recomputes them.
    """
    db = DatabaseHandler(Path(out_dir) / "registry.sqlite")
    try:
        matches = [run["config_hash"] for run in db.list_runs() if run["config_hash"].startswith(config_hash)]
        if not matches:
            raise ConfigError(f"no registered run matches '{config_hash}'")
        for match in matches:
            db.delete_run(match)
    finally:
        db.close()
    click.echo(f"Deleted {len(matches)} registered runs.")


@cli.group()
def theory():
    """
    Closed-form calculators; every result is printed as JSON.
    """


def echo_json(payload):
    click.echo(json.dumps(to_jsonable(payload), sort_keys=True))


asset_options = [
    click.option("--a", "a", type=float, required=True, help="Mean ratio local / global."),
    click.option("--b", "b", type=float, required=True, help="Std ratio local / global."),
    click.option("--rho", type=float, required=True, help="Correlation of the two margins."),
]


def with_assets(command):
    for option in reversed(asset_options):
        command = option(command)
    return command


@theory.command()
@with_assets
@click.option("--theta", type=float, required=True, help="Mixing coefficient.")
@reports_errors
def ratio(a, b, rho, theta):
    """
    Mixed mean-to-std ratio in global-normalized units.
    """
    echo_json({"a": a, "b": b, "rho": rho, "theta": theta, "ratio": portfolio_ratio(a, b, rho, theta)})


@theory.command("theta-star")
@with_assets
@reports_errors
def theta_star_command(a, b, rho):
    """
    Optimal mixing coefficient and whether the stationary root is interior.
    """
    theta, root, interior = theta_star_details(a, b, rho)
    echo_json({"a": a, "b": b, "rho": rho, "theta_star": theta, "root": root, "interior": interior})


@theory.command()
@with_assets
@reports_errors
def advantage(a, b, rho):
    """
    Advantage constants and the upper end of the mixing range that beats interpolation.
    """
    echo_json({"a": a, "b": b, "rho": rho, **vars(advantage_interval(a, b, rho))})


@theory.command()
@click.option("--K", "K", type=int, required=True, help="Number of clients.")
@click.option("--chi", type=float, required=True, help="Share count of the client's local feature.")
@click.option("--snr-g", type=float, required=True, help="SNR of the global feature.")
@click.option("--snr-k", type=float, required=True, help="SNR of the client's local feature.")
@reports_errors
def order(K, chi, snr_g, snr_k):
    """
    Order-level optimal mix predictor.
    """
    echo_json({"K": K, "chi": chi, "snr_g": snr_g, "snr_k": snr_k,
               "theta_order": theta_star_order(K, chi, snr_g, snr_k)})


@theory.command()
@click.option("--mu", type=float, required=True, help="Mean of the test margin.")
@click.option("--sigma", type=float, required=True, help="Std of the test margin.")
@reports_errors
def error(mu, sigma):
    """
    Test error Phi(-mu / sigma) of the Gaussian margin model.
    """
    echo_json({"mu": mu, "sigma": sigma, "error": analytic_error(GaussianTestModel(mu, sigma))})


# Entry point for the simulator CLI
if __name__ == "__main__":
    cli()

"""
Module: evaluation.py
Description: Empirical test error of trained prompts and the experiment sweeps over the mixing
coefficient, data heterogeneity, client count and shots per client.

Each sweep point is a full training run at fixed theta (theta enters the gradients), repeated
over the configured seeds. Finished points are stored in the run registry under their config
hash, so an interrupted sweep resumes where it stopped; results are always merged in grid
order whatever order the points finished in.

Classes:
    ErrorReport: Per-client and pooled error rates.
    SweepPoint: Aggregated result of one grid point.
    SweepResult: All points of one sweep.

Functions:
    empirical_error(W, p_G, local_prompts, theta, test_sets, class_prompts): Error rates.
    summarize_run(result): Empirical, analytic and portfolio summary of a finished run.
    sweep_theta(config, theta_grid, seeds, registry, jobs): Mixing coefficient sweep.
    sweep_heterogeneity(config, alpha_grid, ...): Heterogeneity sweep over the Dirichlet level alpha.
    sweep_clients(config, K_grid, mode, ...): Client count sweep.
    sweep_shots(config, shots_grid, ...): Samples-per-client sweep.
    remix_theta(result, theta_grid, test_sets): Re-mixes frozen prompts without retraining.
    optimal_theta_non_increasing(result, tolerance): Trend check of an outer sweep.
    noise_attenuation(result, tolerance): Server noise ratio between the extreme client counts.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from src.analytics.theory import (
    advantage_interval,
    analytic_error,
    estimate_ab_rho,
    gaussian_test_params,
    theta_star,
    theta_star_order,
)
from src.encoders.text_encoder import check_theta, predict
from src.models.errors import DegenerateModelError, EmptyDataError, InvalidParameterError
from src.models.feature_bank import chi, snr
from src.models.run_config import RunConfig
from src.training.trainer import RunResult, run_promptfolio

logger = logging.getLogger(__name__)


@dataclass
class ErrorReport:
    """
    Attributes:
        per_client (np.ndarray): Error rate of every client.
        stderr (np.ndarray): Binomial standard error of every client.
        counts (np.ndarray): Test samples per client.
        pooled (float): Sample-weighted mean error.
        pooled_stderr (float): Binomial standard error of the pooled rate.
    """

    per_client: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    pooled: float
    pooled_stderr: float


def empirical_error(W, p_G, local_prompts, theta: float, test_sets, class_prompts) -> ErrorReport:
    """
    Classifies every test sample by the larger class similarity (ties predict +1) and
    counts the mistakes.

    Args:
        W: Encoder weights.
        p_G: Server prompt, or one global prompt per client.
        local_prompts (list): Local prompt of every client.
        theta (float): Mixing coefficient.
        test_sets (list[ClientDataset]): Test data per client.
        class_prompts (ClassPrompts): Fixed class prompts.

    Returns:
        ErrorReport: Per-client and pooled rates.

    Raises:
        EmptyDataError: If a client has no test samples.
    """
    theta = check_theta(theta)
    test_sets = list(test_sets)
    local_prompts = list(local_prompts)
    if not test_sets:
        raise EmptyDataError("no test sets")
    if len(local_prompts) != len(test_sets):
        raise InvalidParameterError(f"{len(local_prompts)} local prompts for {len(test_sets)} clients")
    global_prompts = list(p_G) if isinstance(p_G, (list, tuple)) else [p_G] * len(test_sets)
    errors, counts = [], []
    for k, data in enumerate(test_sets):
        if data.n_k == 0:
            raise EmptyDataError(f"client {k} has no test samples")
        predicted = predict(data.features, W, global_prompts[k], local_prompts[k], theta, class_prompts)
        errors.append(np.count_nonzero(predicted != data.labels) / data.n_k)
        counts.append(data.n_k)
    errors = np.array(errors)
    counts = np.array(counts)
    pooled = float(np.sum(errors * counts) / np.sum(counts))
    return ErrorReport(
        per_client=errors,
        stderr=np.sqrt(errors * (1.0 - errors) / counts),
        counts=counts,
        pooled=pooled,
        pooled_stderr=float(np.sqrt(pooled * (1.0 - pooled) / np.sum(counts))),
    )


def _analytic(result: RunResult, theta: float, local_prompts=None) -> tuple[list, list]:
    context = result.context
    local_prompts = local_prompts or result.state.client_local
    errors, flags = [], []
    for k, s in enumerate(context.assignment.local_features):
        model = gaussian_test_params(context.W, result.state.server_global, local_prompts[k], theta,
                                     context.class_prompts, context.bank, s, context.sigma_p)
        try:
            errors.append(analytic_error(model))
        except DegenerateModelError:
            errors.append(float("nan"))
            flags.append(f"client {k}: zero test margin")
    return errors, flags


def _nanmean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else float("nan")


def summarize_run(result: RunResult) -> dict:
    """
    Empirical and analytic errors, per-client (a, b, rho) estimates with their optimal mix
    and advantage end, and the noise attenuation of the server prompt.

    Args:
        result (RunResult): A finished run with non-empty test sets.

    Returns:
        dict: JSON-ready summary.
    """
    context, state, config = result.context, result.state, result.config
    report = empirical_error(context.W, state.server_global, state.client_local, state.theta,
                             context.test_sets, context.class_prompts)
    analytic, flags = _analytic(result, state.theta)
    estimates = []
    for k, s in enumerate(context.assignment.local_features):
        estimate = estimate_ab_rho(context.W, state.server_global, state.client_local[k], context.class_prompts,
                                   context.bank, s, context.sigma_p)
        entry = {"a": estimate.a, "b": estimate.b, "rho": estimate.rho,
                 "theta_star": float("nan"), "advantage_upper": float("nan")}
        if not estimate.degenerate and estimate.b > 0:
            try:
                entry["theta_star"] = theta_star(estimate.a, estimate.b, estimate.rho)
                entry["advantage_upper"] = advantage_interval(estimate.a, estimate.b, estimate.rho).certified_upper
            except (DegenerateModelError, InvalidParameterError):
                flags.append(f"client {k}: degenerate portfolio")
        else:
            flags.extend(f"client {k}: {flag}" for flag in estimate.flags)
        estimates.append(entry)

    chis = [chi(context.assignment, context.bank, k) for k in range(config.K)]
    final_server = result.trajectories["server"][-1]
    final_clients = [result.trajectories[f"client{k}_global"][-1] for k in range(config.K)]
    sigma_p = context.sigma_p
    return {
        "config_hash": config.config_hash(),
        "theta": state.theta,
        "seed": config.seed,
        "K": config.K,
        "n_k": config.n_k,
        "alpha": config.alpha,
        "mode": result.mode,
        "eta": result.record.eta,
        "empirical": report.pooled,
        "stderr": report.pooled_stderr,
        "empirical_per_client": report.per_client.tolist(),
        "analytic": _nanmean(analytic),
        "analytic_per_client": analytic,
        "a": _nanmean([e["a"] for e in estimates]),
        "b": _nanmean([e["b"] for e in estimates]),
        "rho": _nanmean([e["rho"] for e in estimates]),
        "theta_star": _nanmean([e["theta_star"] for e in estimates]),
        "advantage_upper": _nanmean([e["advantage_upper"] for e in estimates]),
        "estimates": estimates,
        "chi_mean": float(np.mean(chis)),
        "theta_order": _theta_order(config.K, chis, context, sigma_p),
        "server_noise": float(np.mean(np.abs(final_server.phi))) if config.L else 0.0,
        "client_noise": float(np.mean([np.mean(np.abs(s.phi)) for s in final_clients])) if config.L else 0.0,
        "final_train_loss": result.record.round_losses[-1] if result.record.round_losses else float("nan"),
        "flags": flags,
    }


def _theta_order(K: int, chis, context, sigma_p: float) -> float:
    if K < 2 or not sigma_p > 0:
        return float("nan")
    values = [theta_star_order(K, chi_k, snr(context.bank, sigma_p), snr(context.bank, sigma_p, s))
              for chi_k, s in zip(chis, context.assignment.local_features)]
    return float(np.mean(values))


@dataclass
class SweepPoint:
    """
    Aggregated result of one grid point over the sweep seeds.

    Attributes:
        axis_value (float): Grid value.
        empirical (float): Mean pooled error (at the optimal theta for outer sweeps).
        stderr (float): Standard error of that mean.
        analytic (float): Mean Gaussian-model error.
        a, b, rho, theta_star, advantage_upper (float): Mean portfolio estimates.
        seeds (tuple): Seeds of the runs.
        config_hashes (tuple): Config hashes of the runs.
        optimal_theta (float | None): Measured optimal theta of an inner theta sweep.
        optimal_theta_analytic (float | None): Same by the analytic error.
        extras (dict): Axis-specific values (chi, order-level mix, noise magnitudes).
        inner (SweepResult | None): The inner theta sweep.
    """

    axis_value: float
    empirical: float
    stderr: float
    analytic: float
    a: float = float("nan")
    b: float = float("nan")
    rho: float = float("nan")
    theta_star: float = float("nan")
    advantage_upper: float = float("nan")
    seeds: tuple = ()
    config_hashes: tuple = ()
    optimal_theta: float | None = None
    optimal_theta_analytic: float | None = None
    extras: dict = field(default_factory=dict)
    inner: SweepResult | None = None


@dataclass
class SweepResult:
    """
    Attributes:
        axis (str): 'theta', 'alpha', 'K', 'n_k' or 'remix_theta'.
        grid (tuple): Strictly increasing grid values.
        points (list[SweepPoint]): One point per grid value, in grid order.
        metadata (dict): Base config hash, seeds and mode.
    """

    axis: str
    grid: tuple
    points: list
    metadata: dict = field(default_factory=dict)

    def argmin_empirical(self) -> float:
        return float(self.grid[int(np.nanargmin([p.empirical for p in self.points]))])

    def argmin_analytic(self) -> float:
        values = [p.analytic for p in self.points]
        if not np.any(np.isfinite(values)):
            return float("nan")
        return float(self.grid[int(np.nanargmin(values))])

    def tied_thetas(self) -> list:
        """
        Grid values whose error lies within the combined standard error of the minimum.
        """
        errors = np.array([p.empirical for p in self.points], dtype=np.float64)
        if not np.any(np.isfinite(errors)):
            return []
        best = self.points[int(np.nanargmin(errors))]
        return [value for value, p in zip(self.grid, self.points)
                if np.isfinite(p.empirical)
                and p.empirical - best.empirical <= np.nan_to_num(np.sqrt(p.stderr ** 2 + best.stderr ** 2)) + 1e-15]

    def optimal_theta(self) -> float:
        """Largest theta among the tied minima of a theta sweep."""
        ties = self.tied_thetas()
        return float(max(ties)) if ties else float("nan")

    def optimal_thetas(self) -> list:
        return [p.optimal_theta for p in self.points]

    def interior_gap(self) -> float:
        """
        How far the best interior point lies below the better endpoint, in units of the
        pooled standard error (positive means an interior optimum).
        """
        if len(self.points) < 3:
            return float("nan")
        interior = min(self.points[1:-1], key=lambda p: p.empirical)
        endpoint = min((self.points[0], self.points[-1]), key=lambda p: p.empirical)
        scale = np.sqrt(interior.stderr ** 2 + endpoint.stderr ** 2)
        if scale == 0.0:
            return float("inf") if endpoint.empirical > interior.empirical else 0.0
        return float((endpoint.empirical - interior.empirical) / scale)

    def header(self) -> list:
        return [self.axis, "empirical", "stderr", "analytic", "a", "b", "rho", "theta_star",
                "advantage_upper", "optimal_theta", "optimal_theta_analytic", "seeds", "config_hashes"]

    def rows(self) -> list:
        return [[p.axis_value, p.empirical, p.stderr, p.analytic, p.a, p.b, p.rho, p.theta_star,
                 p.advantage_upper,
                 "" if p.optimal_theta is None else p.optimal_theta,
                 "" if p.optimal_theta_analytic is None else p.optimal_theta_analytic,
                 " ".join(str(s) for s in p.seeds), " ".join(h[:12] for h in p.config_hashes)]
                for p in self.points]

    def summary(self) -> dict:
        summary = {
            "axis": self.axis,
            "grid": list(self.grid),
            "metadata": self.metadata,
            "points": [{key: value for key, value in vars(p).items() if key != "inner"} for p in self.points],
        }
        if self.axis in ("theta", "remix_theta"):
            summary["argmin_empirical"] = self.argmin_empirical()
            summary["argmin_analytic"] = self.argmin_analytic()
            summary["interior_gap"] = self.interior_gap()
        else:
            summary["optimal_theta"] = self.optimal_thetas()
            summary["optimal_theta_non_increasing"] = optimal_theta_non_increasing(self)
            if self.axis == "K":
                summary["noise_attenuation"] = noise_attenuation(self)
        return summary


def _check_grid(name: str, grid, lower=None, upper=None) -> tuple:
    grid = tuple(float(v) for v in grid)
    if not grid:
        raise InvalidParameterError(f"{name} grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidParameterError(f"{name} grid must be strictly increasing")
    if lower is not None and grid[0] < lower or upper is not None and grid[-1] > upper:
        raise InvalidParameterError(f"{name} grid leaves [{lower}, {upper}]")
    return grid


def _run_configs(configs: list, axis: str, axis_values: list, registry=None, jobs: int = 1) -> list[dict]:
    """
    Runs (or looks up) every configuration; returns summaries in input order. New results
    are registered as soon as they finish.
    """
    summaries: list = [None] * len(configs)
    missing = []
    for i, config in enumerate(configs):
        if registry is not None and registry.has_run(config.config_hash()):
            logger.info("registry hit for %s=%s seed %d", axis, axis_values[i], config.seed)
            summaries[i] = registry.get_run(config.config_hash())
        else:
            missing.append(i)

    def finish(i: int, summary: dict):
        summaries[i] = summary
        if registry is not None:
            registry.add_run(configs[i].config_hash(), axis, float(axis_values[i]), summary)
        logger.info("finished %s=%s seed %d: error %.4f", axis, axis_values[i], configs[i].seed, summary["empirical"])

    if jobs <= 1:
        for i in missing:
            finish(i, summarize_run(run_promptfolio(configs[i])))
    else:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            futures = {executor.submit(lambda c: summarize_run(run_promptfolio(c)), configs[i]): i for i in missing}
            for future in as_completed(futures):
                finish(futures[future], future.result())
    return summaries


def _number(value) -> float:
    return float("nan") if value is None else float(value)


def _point(axis_value: float, summaries: list) -> SweepPoint:
    def mean(key):
        return _nanmean([_number(s[key]) for s in summaries])

    stderrs = np.array([_number(s["stderr"]) for s in summaries])
    return SweepPoint(
        axis_value=float(axis_value),
        empirical=mean("empirical"),
        stderr=float(np.sqrt(np.sum(stderrs ** 2)) / len(summaries)),
        analytic=mean("analytic"),
        a=mean("a"), b=mean("b"), rho=mean("rho"),
        theta_star=mean("theta_star"),
        advantage_upper=mean("advantage_upper"),
        seeds=tuple(int(s["seed"]) for s in summaries),
        config_hashes=tuple(s["config_hash"] for s in summaries),
        extras={"chi_mean": mean("chi_mean"), "theta_order": mean("theta_order"),
                "server_noise": mean("server_noise"), "client_noise": mean("client_noise")},
    )


def sweep_theta(config: RunConfig, theta_grid=None, seeds=None, registry=None, jobs: int = 1) -> SweepResult:
    """
    Trains one run per (theta, seed) and aggregates the errors per theta.

    Args:
        config (RunConfig): Base configuration.
        theta_grid (sequence | None): Grid in [0, 1]; config.theta_grid when None.
        seeds (sequence | None): Seeds per point; config.seeds when None.
        registry (DatabaseHandler | None): Run registry for resuming.
        jobs (int): Parallel runs.

    Returns:
        SweepResult: One point per theta; argmin of empirical and analytic error.
    """
    grid = _check_grid("theta", theta_grid if theta_grid is not None else config.theta_grid, 0.0, 1.0)
    seeds = tuple(seeds if seeds is not None else config.seeds)
    configs, values = [], []
    for theta in grid:
        for seed in seeds:
            configs.append(config.replace(theta=theta, seed=seed))
            values.append(theta)
    summaries = _run_configs(configs, "theta", values, registry, jobs)
    points = [_point(theta, summaries[i * len(seeds):(i + 1) * len(seeds)]) for i, theta in enumerate(grid)]
    return SweepResult("theta", grid, points, {"config_hash": config.config_hash(), "seeds": list(seeds)})


def _outer_sweep(axis: str, grid: tuple, configs: list, seeds, registry, jobs) -> SweepResult:
    points = []
    for value, inner_config in zip(grid, configs):
        inner = sweep_theta(inner_config, seeds=seeds, registry=registry, jobs=jobs)
        optimal = inner.optimal_theta()
        best = inner.points[inner.grid.index(optimal)]
        point = SweepPoint(
            axis_value=float(value),
            empirical=best.empirical,
            stderr=best.stderr,
            analytic=best.analytic,
            a=best.a, b=best.b, rho=best.rho,
            theta_star=best.theta_star,
            advantage_upper=best.advantage_upper,
            seeds=best.seeds,
            config_hashes=best.config_hashes,
            optimal_theta=optimal,
            optimal_theta_analytic=inner.argmin_analytic(),
            extras=dict(best.extras),
            inner=inner,
        )
        points.append(point)
        logger.info("%s=%s: optimal theta %.2f", axis, value, point.optimal_theta)
    return SweepResult(axis, grid, points, {"config_hash": configs[0].config_hash() if configs else "",
                                            "seeds": list(seeds if seeds is not None else configs[0].seeds)})


def sweep_heterogeneity(config: RunConfig, alpha_grid=None, seeds=None, registry=None, jobs: int = 1) -> SweepResult:
    """
    For every Dirichlet homogeneity level alpha, runs a full theta sweep and reports the
    measured optimal theta (small alpha gives distinct local features, large alpha shared ones).
    """
    grid = _check_grid("alpha", alpha_grid if alpha_grid is not None else config.alpha_grid)
    if grid[0] <= 0:
        raise InvalidParameterError("alpha values must be > 0")
    configs = [config.replace(policy="dirichlet", alpha=alpha) for alpha in grid]
    return _outer_sweep("alpha", grid, configs, seeds, registry, jobs)


def sweep_clients(config: RunConfig, K_grid=None, mode: str | None = None, seeds=None, registry=None,
                  jobs: int = 1) -> SweepResult:
    """
    For every client count K, runs a full theta sweep. 'fixed_per_client' keeps n_k;
    'fixed_total' keeps K * n_k of the base config and splits it evenly.
    """
    mode = mode or config.clients_mode
    grid = tuple(int(K) for K in _check_grid("K", K_grid if K_grid is not None else config.K_grid))
    if grid[0] < 2:
        raise InvalidParameterError("client sweeps need K >= 2")
    total = config.K * config.n_k
    if mode == "fixed_per_client":
        configs = [config.replace(K=K) for K in grid]
    elif mode == "fixed_total":
        configs = [config.replace(K=K, n_k=max(1, total // K)) for K in grid]
    else:
        raise InvalidParameterError(f"unknown client sweep mode '{mode}'")
    result = _outer_sweep("K", grid, configs, seeds, registry, jobs)
    result.metadata["mode"] = mode
    return result


def sweep_shots(config: RunConfig, shots_grid=None, seeds=None, registry=None, jobs: int = 1) -> SweepResult:
    """For every per-client sample count n_k, runs a full theta sweep."""
    grid = tuple(int(n) for n in _check_grid("n_k", shots_grid if shots_grid is not None else config.shots_grid))
    if grid[0] < 1:
        raise InvalidParameterError("shots must be >= 1")
    configs = [config.replace(n_k=n) for n in grid]
    return _outer_sweep("n_k", grid, configs, seeds, registry, jobs)


def remix_theta(result: RunResult, theta_grid=None, test_sets=None) -> SweepResult:
    """
    Evaluates (1 - theta) h(p_G) + theta h(p_L) of the frozen final prompts over a theta
    grid, without retraining. A diagnostic: the prompts were trained at one theta only.
    """
    context, state = result.context, result.state
    grid = _check_grid("theta", theta_grid if theta_grid is not None else result.config.theta_grid, 0.0, 1.0)
    test_sets = test_sets if test_sets is not None else context.test_sets
    points = []
    for theta in grid:
        report = empirical_error(context.W, state.server_global, state.client_local, theta, test_sets,
                                 context.class_prompts)
        analytic, _ = _analytic(result, theta)
        points.append(SweepPoint(theta, report.pooled, report.pooled_stderr, _nanmean(analytic),
                                 seeds=(result.config.seed,), config_hashes=(result.config.config_hash(),)))
    return SweepResult("remix_theta", grid, points, {"trained_theta": state.theta,
                                                     "config_hash": result.config.config_hash()})


def optimal_theta_non_increasing(result: SweepResult, tolerance: float | None = None) -> bool:
    """
    True when some choice of optimal theta, one from each point's statistically tied set, never
    rises along the outer grid by more than `tolerance` (one theta grid step by default).
    """
    tie_sets = []
    for p in result.points:
        ties = p.inner.tied_thetas() if p.inner is not None else []
        if ties:
            tie_sets.append(ties)
        elif p.optimal_theta is not None:
            tie_sets.append([p.optimal_theta])
    if tolerance is None:
        inner = next((p.inner for p in result.points if p.inner is not None), None)
        steps = np.diff(inner.grid) if inner is not None and len(inner.grid) > 1 else [0.0]
        tolerance = float(np.max(steps)) + 1e-12
    previous = float("inf")
    for ties in tie_sets:
        allowed = [theta for theta in ties if theta <= previous + tolerance]
        if not allowed:
            return False
        previous = max(allowed)
    return True


def _low_theta_noise(point: SweepPoint) -> dict:
    if point.inner is not None and point.inner.points:
        return point.inner.points[0].extras
    return point.extras


def noise_attenuation(result: SweepResult, tolerance: float = 0.5) -> dict:
    """
    Compares the server noise magnitude at the largest and the smallest client count, read at
    the lowest theta of each inner sweep. Averaging K independent client updates scales it by
    about K_first / K_last.

    Args:
        result (SweepResult): A client-count sweep.
        tolerance (float): The ratio must lie in [expected * tolerance, expected / tolerance].

    Returns:
        dict: ratio, expected, within_band and averaged (server noise <= client noise at every K).
    """
    if len(result.points) < 2:
        raise InvalidParameterError("noise attenuation needs at least two client counts")
    first, last = result.points[0], result.points[-1]
    start = _low_theta_noise(first).get("server_noise", float("nan"))
    end = _low_theta_noise(last).get("server_noise", float("nan"))
    ratio = float(end / start) if start else float("nan")
    expected = float(first.axis_value / last.axis_value)
    noise = [_low_theta_noise(p) for p in result.points]
    return {
        "ratio": ratio,
        "expected": expected,
        "within_band": bool(expected * tolerance <= ratio <= expected / tolerance),
        "averaged": all(n.get("server_noise", np.inf) <= n.get("client_noise", -np.inf) for n in noise),
    }
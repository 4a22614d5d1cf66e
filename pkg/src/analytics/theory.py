"""
Module: theory.py
Description: Closed-form calculators for the Gaussian test-margin model and the global-local
prompt portfolio.

The test margin of client k is z = <g, F> with F = h_mixed(p_+) - h_mixed(p_-). Under the
feature model z ~ N(mu, sigma^2) with mu = F[0] + F[s_k] and sigma = sigma_p ||F_noise||,
so the test error is Phi(-mu / sigma). Normalizing the global prompt's mean and std to 1,
the local prompt is an asset with mean ratio a, std ratio b and correlation rho, and
mixing the two with weight theta gives the mean-to-std ratio
    ((1 - theta) + theta a) / sqrt((1 - theta)^2 + 2 rho theta (1 - theta) b + theta^2 b^2).

Classes:
    GaussianTestModel: Mean and std of the test margin.
    AdvantageInterval: Constants and upper ends of the mixing range that beats interpolation.
    AssetEstimate: (a, b, rho) measured from two prompts.
    PortfolioParams: (a, b, rho) with the optimal mix and the advantage interval.

Functions:
    gaussian_test_params(W, p_G, p_L, theta, class_prompts, bank, s, sigma_p): Margin model.
    analytic_error(model): Phi(-mu / sigma).
    mc_error(W, p_G, p_L, theta, class_prompts, bank, s, sigma_p, N, seed): Monte Carlo error.
    portfolio_ratio(a, b, rho, theta): Mixed mean-to-std ratio.
    theta_star(a, b, rho), theta_star_details(a, b, rho): Optimal mixing coefficient.
    advantage_interval(a, b, rho): Advantage constants and upper ends.
    theta_star_order(K, chi_k, snr_g, snr_k): Order-level optimal mix predictor.
    estimate_ab_rho(W, p_G, p_L, class_prompts, bank, s, sigma_p): Measures (a, b, rho).
    portfolio_params(a, b, rho): Bundles the portfolio quantities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from src.encoders.text_encoder import check_theta, class_difference, class_features
from src.models.errors import DegenerateModelError, InvalidParameterError
from src.models.feature_bank import FeatureBank
from src.models.prompt import ClassPrompts
from src.models.seeds import make_rng

logger = logging.getLogger(__name__)

GRID_STEP = 1e-4
MIN_MC_SAMPLES = 1000


@dataclass(frozen=True)
class GaussianTestModel:
    """
    Attributes:
        mu (float): Mean of the test margin.
        sigma (float): Std of the test margin (>= 0).
        provenance (str): 'analytic-from-prompt' or 'fitted-from-MC'.
    """

    mu: float
    sigma: float
    provenance: str = "analytic-from-prompt"

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidParameterError("sigma must be >= 0")

    @classmethod
    def from_margins(cls, margins) -> GaussianTestModel:
        """Fits mean and std to sampled margins."""
        margins = np.asarray(margins, dtype=np.float64)
        return cls(float(margins.mean()), float(margins.std()), "fitted-from-MC")


def normal_tail(x):
    """Phi(-x) = erfc(x / sqrt 2) / 2, accurate in the far tail."""
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def gaussian_test_params(W, p_G, p_L, theta: float, class_prompts: ClassPrompts, bank: FeatureBank,
                         s: int, sigma_p: float) -> GaussianTestModel:
    """
    Builds the test-margin model of a client from its prompts.

    Args:
        W: Encoder weights.
        p_G, p_L: Global and local prompts.
        theta (float): Mixing coefficient.
        class_prompts (ClassPrompts): Fixed class prompts.
        bank (FeatureBank): Feature bank (for the coordinate layout).
        s (int): Local feature index of the client.
        sigma_p (float): Noise std of the test data.

    Returns:
        GaussianTestModel: mu = F[0] + F[s], sigma = sigma_p * ||F_noise||.
    """
    if not sigma_p >= 0:
        raise InvalidParameterError("sigma_p must be >= 0")
    bank.local(s)
    F = class_difference(W, p_G, p_L, theta, class_prompts)
    mu = float(F[0] + F[s])
    sigma = float(sigma_p * np.linalg.norm(F[bank.noise_slice()]))
    return GaussianTestModel(mu, sigma)


def analytic_error(model: GaussianTestModel) -> float:
    """
    Returns Phi(-mu / sigma); with sigma = 0 the error is 0 or 1 by the sign of mu.

    Raises:
        DegenerateModelError: If sigma = 0 and mu = 0.
    """
    if model.sigma == 0.0:
        if model.mu == 0.0:
            raise DegenerateModelError("test margin is identically zero; the error is undefined")
        return 0.0 if model.mu > 0 else 1.0
    return float(normal_tail(model.mu / model.sigma))


def mc_error(W, p_G, p_L, theta: float, class_prompts: ClassPrompts, bank: FeatureBank, s: int,
             sigma_p: float, N: int = 10**6, seed: int = 0, chunk: int = 100_000) -> tuple[float, float]:
    """
    Estimates the test error by classifying N fresh samples of the client's distribution.

    Args:
        W, p_G, p_L, theta, class_prompts, bank, s, sigma_p: As in gaussian_test_params.
        N (int): Sample count (>= 1000).
        seed (int): Master seed; draws use the 'mc' stream.
        chunk (int): Samples drawn per batch.

    Returns:
        tuple[float, float]: Error fraction and its binomial standard error.
    """
    if N < MIN_MC_SAMPLES:
        raise InvalidParameterError(f"Monte Carlo needs at least {MIN_MC_SAMPLES} samples")
    if not sigma_p >= 0:
        raise InvalidParameterError("sigma_p must be >= 0")
    bank.local(s)
    h_plus, h_minus = class_features(W, p_G, p_L, theta, class_prompts)
    rng = make_rng(seed, "mc")
    noise = bank.noise_slice()
    errors = 0
    remaining = N
    while remaining:
        size = min(chunk, remaining)
        labels = rng.choice(np.array([1.0, -1.0]), size=size)
        g = np.zeros((size, bank.m))
        g[:, 0] = labels
        g[:, s] = labels
        g[:, noise] = sigma_p * rng.standard_normal((size, bank.L))
        predicted = np.where(g @ h_plus - g @ h_minus >= 0.0, 1.0, -1.0)
        errors += int(np.count_nonzero(predicted != labels))
        remaining -= size
    estimate = errors / N
    return estimate, float(np.sqrt(estimate * (1.0 - estimate) / N))


def _check_assets(a: float, b: float, rho: float):
    if not np.isfinite(a):
        raise InvalidParameterError("a must be finite")
    if not b > 0 or not np.isfinite(b):
        raise InvalidParameterError("b must be > 0")
    if not -1.0 <= rho <= 1.0:
        raise InvalidParameterError("rho must lie in [-1, 1]")


def ratio_curve(a: float, b: float, rho: float, theta):
    """Vectorized mixed ratio over a theta grid; non-finite where the mixed std vanishes."""
    theta = np.asarray(theta, dtype=np.float64)
    variance = (1.0 - theta) ** 2 + 2.0 * rho * theta * (1.0 - theta) * b + theta ** 2 * b ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return ((1.0 - theta) + theta * a) / np.sqrt(variance)


def portfolio_ratio(a: float, b: float, rho: float, theta: float) -> float:
    """
    Mean-to-std ratio of the mix in global-normalized units; 1 at theta = 0, a / b at 1.

    Raises:
        DegenerateModelError: When the mixed std vanishes (rho = -1 cancellation).
    """
    _check_assets(a, b, rho)
    theta = check_theta(theta)
    variance = (1.0 - theta) ** 2 + 2.0 * rho * theta * (1.0 - theta) * b + theta ** 2 * b ** 2
    if variance <= 0.0:
        raise DegenerateModelError(f"mixed std vanishes at theta={theta}")
    return float(((1.0 - theta) + theta * a) / np.sqrt(variance))


def theta_star_details(a: float, b: float, rho: float) -> tuple[float, float, bool]:
    """
    Returns (theta*, unprojected stationary root, whether the root is interior).

    The stationary root (a - rho b) / ((a + b^2) - rho b (a + 1)) is the maximizer when it
    lies in (0, 1); otherwise the endpoint with the larger ratio is returned.

    Raises:
        DegenerateModelError: If the denominator is zero.
    """
    _check_assets(a, b, rho)
    denominator = (a + b ** 2) - rho * b * (a + 1.0)
    if abs(denominator) <= 1e-15 * max(1.0, abs(a) + b ** 2):
        raise DegenerateModelError("optimal mixing coefficient is undefined: zero denominator")
    root = (a - rho * b) / denominator
    if 0.0 <= root <= 1.0:
        return float(root), float(root), 0.0 < root < 1.0
    endpoint = 1.0 if portfolio_ratio(a, b, rho, 1.0) > portfolio_ratio(a, b, rho, 0.0) else 0.0
    return endpoint, float(root), False


def theta_star(a: float, b: float, rho: float) -> float:
    """Optimal mixing coefficient in [0, 1]."""
    return theta_star_details(a, b, rho)[0]


@dataclass
class AdvantageInterval:
    """
    Attributes:
        Ca, Cb, Cc (float): Closed-form constants; Cc is nan for a negative radicand.
        radicand (float): Radicand of Cc.
        upper (float): Projected closed-form upper end, or the grid value when the closed
            form is unusable.
        certified_upper (float): First root of the exact equality quadratic in (0, 1), or
            the endpoint the quadratic's sign selects.
        degenerate (bool): Ca = 0 (a = b or a vanishing variance factor).
        complex_radicand (bool): Radicand of Cc is negative.
        numerical (bool): upper came from the grid search.
        agrees (bool): upper and certified_upper coincide within 1e-6.
    """

    Ca: float
    Cb: float
    Cc: float
    radicand: float
    upper: float
    certified_upper: float
    degenerate: bool = False
    complex_radicand: bool = False
    numerical: bool = False
    agrees: bool = True


def advantage_quadratic(a: float, b: float, rho: float) -> tuple[float, float, float]:
    """
    Coefficients (c, d, e) of q(theta) = c theta^2 + d theta + e; the mixed ratio beats
    the linear interpolation of the endpoint ratios exactly where q >= 0.
    """
    Cb = (a + b) * (b ** 2 - 1.0) - 4.0 * b * (rho * b - 1.0)
    c = (a - b) ** 2 * (b ** 2 - 2.0 * rho * b + 1.0)
    d = (a - b) * Cb
    e = 2.0 * b * (a * b - rho * b ** 2 - a + b)
    return c, d, e


def certified_upper(a: float, b: float, rho: float) -> float:
    """Upper end of the advantage range from the exact quadratic."""
    c, d, e = advantage_quadratic(a, b, rho)
    if abs(c) > 0.0:
        discriminant = d * d - 4.0 * c * e
        roots = [] if discriminant < 0 else [(-d - np.sqrt(discriminant)) / (2 * c),
                                             (-d + np.sqrt(discriminant)) / (2 * c)]
    elif d != 0.0:
        roots = [-e / d]
    else:
        roots = []
    interior = [r for r in roots if 0.0 < r < 1.0]
    leading = next((value for value in (e, d, c) if value != 0.0), 0.0)
    if leading < 0.0:
        return 0.0
    return float(min(interior)) if interior else 1.0


def _grid_upper(a: float, b: float, rho: float, step: float = GRID_STEP) -> float:
    thetas = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    mixed = ratio_curve(a, b, rho, thetas)
    linear = (1.0 - thetas) + thetas * (a / b)
    holds = np.nan_to_num(mixed, nan=-np.inf) >= linear - 1e-12
    failing = np.flatnonzero(~holds)
    if failing.size == 0:
        return 1.0
    return float(thetas[failing[0] - 1]) if failing[0] > 0 else 0.0


def advantage_interval(a: float, b: float, rho: float) -> AdvantageInterval:
    """
    Computes the closed-form advantage constants and the upper end of the mixing range in
    which the mixed prompt is at least as good as interpolating the endpoints.

    Args:
        a (float): Mean ratio local / global.
        b (float): Std ratio local / global (> 0).
        rho (float): Correlation in [-1, 1].

    Returns:
        AdvantageInterval: Constants, closed-form upper end and the certified upper end.
    """
    _check_assets(a, b, rho)
    Ca = (b - a) * (b ** 2 + 2.0 * rho * b + 1.0)
    Cb = (a + b) * (b ** 2 - 1.0) - 4.0 * b * (rho * b - 1.0)
    radicand = (a + b) ** 2 * (b + 1.0) ** 2 - 8.0 * a * b ** 2 * (rho + 1.0) ** 2
    complex_radicand = radicand < 0.0
    Cc = float("nan") if complex_radicand else (b - 1.0) * np.sqrt(radicand)
    degenerate = Ca == 0.0
    certified = certified_upper(a, b, rho)
    numerical = degenerate or complex_radicand
    if numerical:
        upper = _grid_upper(a, b, rho)
        logger.warning("advantage interval for a=%.4g b=%.4g rho=%.4g determined numerically (%s)",
                       a, b, rho, "Ca = 0" if degenerate else "negative radicand")
    else:
        upper = float(np.clip((Cb - Cc) / (2.0 * Ca), 0.0, 1.0))
    agrees = abs(upper - certified) <= 1e-6 or (numerical and abs(upper - certified) <= GRID_STEP)
    if not agrees:
        logger.info("closed-form advantage end %.6g differs from the certified end %.6g", upper, certified)
    return AdvantageInterval(Ca, Cb, Cc, radicand, upper, certified, degenerate, complex_radicand, numerical, agrees)


def theta_star_order(K: int, chi_k: float, snr_g: float, snr_k: float) -> float:
    """
    Order-level optimal mix (K - chi_k) SNR_k / ((K^2 - 1)(K SNR_G + chi_k SNR_k)), a
    trend predictor without hidden constants.

    Raises:
        DegenerateModelError: If K < 2.
    """
    if K < 2:
        raise DegenerateModelError("the order-level mix needs at least two clients")
    if not 0 < chi_k <= K:
        raise InvalidParameterError(f"chi_k must lie in (0, {K}]")
    if not snr_g > 0 or not snr_k > 0:
        raise InvalidParameterError("SNRs must be > 0")
    return float((K - chi_k) * snr_k / ((K ** 2 - 1) * (K * snr_g + chi_k * snr_k)))


@dataclass
class AssetEstimate:
    """
    Attributes:
        a (float): mu_L / mu_G (nan when mu_G = 0).
        b (float): sigma_L / sigma_G (nan when sigma_G = 0).
        rho (float): Cosine of the two prompts' noise rows (nan when one is zero).
        global_model, local_model (GaussianTestModel): Models of each prompt alone.
        flags (list[str]): Degenerate quantities.
    """

    a: float
    b: float
    rho: float
    global_model: GaussianTestModel
    local_model: GaussianTestModel
    flags: list = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return bool(self.flags)

    def __iter__(self):
        return iter((self.a, self.b, self.rho))


def estimate_ab_rho(W, p_G, p_L, class_prompts: ClassPrompts, bank: FeatureBank, s: int,
                    sigma_p: float) -> AssetEstimate:
    """
    Measures (a, b, rho) from the Gaussian models of the global and the local prompt of one
    client, each used alone.

    Args:
        W: Encoder weights.
        p_G, p_L: Global and local prompts.
        class_prompts (ClassPrompts): Fixed class prompts.
        bank (FeatureBank): Feature bank.
        s (int): Local feature index of the client.
        sigma_p (float): Noise std.

    Returns:
        AssetEstimate: The ratios, the correlation and any degeneracy flags.
    """
    noise = bank.noise_slice()
    F_G = class_difference(W, p_G, p_G, 0.0, class_prompts)
    F_L = class_difference(W, p_L, p_L, 1.0, class_prompts)
    global_model = gaussian_test_params(W, p_G, p_G, 0.0, class_prompts, bank, s, sigma_p)
    local_model = gaussian_test_params(W, p_L, p_L, 1.0, class_prompts, bank, s, sigma_p)
    flags = []
    if global_model.mu == 0.0:
        flags.append("global mean is zero")
        a = float("nan")
    else:
        a = local_model.mu / global_model.mu
    if global_model.sigma == 0.0:
        flags.append("global std is zero")
        b = float("nan")
    else:
        b = local_model.sigma / global_model.sigma
        if b == 0.0:
            flags.append("local std is zero")
    norm_G = np.linalg.norm(F_G[noise])
    norm_L = np.linalg.norm(F_L[noise])
    if norm_G == 0.0 or norm_L == 0.0:
        flags.append("noise rows vanish; correlation undefined")
        rho = float("nan")
    else:
        rho = float(np.clip(F_L[noise] @ F_G[noise] / (norm_L * norm_G), -1.0, 1.0))
    if flags:
        logger.warning("degenerate portfolio estimate: %s", "; ".join(flags))
    return AssetEstimate(float(a), float(b), rho, global_model, local_model, flags)


@dataclass
class PortfolioParams:
    """
    Attributes:
        a, b, rho (float): The two-asset description.
        theta_star (float): Optimal mix.
        theta_root (float): Unprojected stationary root.
        interior (bool): Whether the root is interior.
        advantage (AdvantageInterval): Advantage constants and upper ends.
    """

    a: float
    b: float
    rho: float
    theta_star: float
    theta_root: float
    interior: bool
    advantage: AdvantageInterval

    @property
    def advantage_upper(self) -> float:
        return self.advantage.upper

    @property
    def Ca(self) -> float:
        return self.advantage.Ca

    @property
    def Cb(self) -> float:
        return self.advantage.Cb

    @property
    def Cc(self) -> float:
        return self.advantage.Cc

    def ratio(self, theta: float) -> float:
        """Mixed mean-to-std ratio at theta."""
        return portfolio_ratio(self.a, self.b, self.rho, theta)


def portfolio_params(a: float, b: float, rho: float) -> PortfolioParams:
    """Bundles theta* and the advantage interval of (a, b, rho)."""
    theta, root, interior = theta_star_details(a, b, rho)
    return PortfolioParams(a, b, rho, theta, root, interior, advantage_interval(a, b, rho))

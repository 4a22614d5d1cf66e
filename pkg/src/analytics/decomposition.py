"""
Module: decomposition.py
Description: Signal-noise decomposition of learned prompts on the feature bank, the per-label
split of the noise coefficients, and the trajectory diagnostics built on them.

With orthogonal features a prompt update dp = p - p0 is read through one coefficient per
feature, c_f = <dp, f>, so that sum_f c_f f / ||f||^2 reconstructs the part of dp in the
feature span. Coefficient names follow the feature groups: beta (global), gamma (local),
phi (task-irrelevant).

Classes:
    CoeffSnapshot: Coefficients of one prompt at one round.
    CoeffTrajectory: Ordered snapshots of one tracked prompt.
    NoiseAccumulator: Per-label running split of the noise coefficients.
    DynamicsReport: Sign, growth and boundedness checks of a trajectory.

Functions:
    decompose(p, p0, bank, round_index, accumulator, prompt_id): Projects a prompt update.
    reconstruct(snapshot, bank): Rebuilds the in-span update from coefficients.
    accumulate_psi_phi(accumulator, rows_pos, rows_neg, eta, bank): Adds one step to the split.
    coefficient_orientation(W, class_prompts, s): Growth direction of the global and local rows.
    dynamics_diagnostics(trajectory, bank, assignment, sigma_p, ...): Checks a trajectory.
    growth_ratio(traj_a, traj_b, coefficient, round_index, index): Ratio of coefficient growth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from src.encoders.text_encoder import as_vector
from src.models.errors import DimensionError, EmptyDataError, InvalidParameterError
from src.models.feature_bank import FeatureBank, chi, snr

logger = logging.getLogger(__name__)


class NoiseAccumulator:
    """
    Running split of the noise coefficients by the label of the samples that produced them.

    Attributes:
        psi (np.ndarray): Contribution of the y = +1 samples, one entry per noise feature.
        varphi (np.ndarray): Contribution of the y = -1 samples.
    """

    def __init__(self, L: int, psi=None, varphi=None):
        self.psi = np.zeros(L) if psi is None else np.array(psi, dtype=np.float64)
        self.varphi = np.zeros(L) if varphi is None else np.array(varphi, dtype=np.float64)
        if self.psi.shape != (L,) or self.varphi.shape != (L,):
            raise DimensionError(f"accumulators need {L} entries")

    @property
    def L(self) -> int:
        return self.psi.shape[0]

    def total(self) -> np.ndarray:
        return self.psi + self.varphi

    def copy(self) -> NoiseAccumulator:
        return NoiseAccumulator(self.L, self.psi.copy(), self.varphi.copy())

    @classmethod
    def average(cls, accumulators, weights) -> NoiseAccumulator:
        """
        Weighted average in ascending client order, the same reduction FedAvg applies
        to the prompts themselves.
        """
        accumulators = list(accumulators)
        weights = [float(w) for w in weights]
        total = sum(weights)
        psi = np.zeros(accumulators[0].L)
        varphi = np.zeros(accumulators[0].L)
        for weight, accumulator in zip(weights, accumulators):
            psi = psi + weight * accumulator.psi
            varphi = varphi + weight * accumulator.varphi
        return cls(accumulators[0].L, psi / total, varphi / total)


@dataclass
class CoeffSnapshot:
    """
    Feature coefficients of one prompt at one round.

    Attributes:
        round (int): Round index; 0 is the initialization.
        beta (float): Coefficient of the global feature.
        gamma (np.ndarray): Coefficients of the S local features.
        phi (np.ndarray): Coefficients of the L noise features.
        residual_norm (float): Norm of the part of dp outside the feature span.
        delta_norm (float): Norm of dp.
        psi_acc (np.ndarray | None): y = +1 share of phi, when tracked.
        varphi_acc (np.ndarray | None): y = -1 share of phi, when tracked.
        prompt_id (str): Tracked prompt, e.g. 'server' or 'client3_local'.
    """

    round: int
    beta: float
    gamma: np.ndarray
    phi: np.ndarray
    residual_norm: float
    delta_norm: float = 0.0
    psi_acc: np.ndarray | None = None
    varphi_acc: np.ndarray | None = None
    prompt_id: str = ""

    def coefficients(self) -> np.ndarray:
        """All coefficients in latent order [beta, gamma, phi]."""
        return np.concatenate(([self.beta], self.gamma, self.phi))

    def split_gap(self) -> float:
        """Largest |phi - (psi + varphi)|; 0 when the split is not tracked."""
        if self.psi_acc is None or self.phi.size == 0:
            return 0.0
        return float(np.max(np.abs(self.phi - (self.psi_acc + self.varphi_acc))))

    def to_row(self) -> list:
        """CSV row: round, prompt id, beta, gamma_1..S, phi_1..L, residual."""
        return [self.round, self.prompt_id, self.beta, *self.gamma.tolist(), *self.phi.tolist(), self.residual_norm]


class CoeffTrajectory:
    """
    Snapshots of one tracked prompt in strictly increasing round order.

    Attributes:
        prompt_id (str): Tracked prompt.
        snapshots (list[CoeffSnapshot]): The snapshots.
    """

    def __init__(self, prompt_id: str, snapshots=None):
        self.prompt_id = prompt_id
        self.snapshots: list[CoeffSnapshot] = []
        for snapshot in snapshots or []:
            self.append(snapshot)

    def append(self, snapshot: CoeffSnapshot):
        if self.snapshots and snapshot.round <= self.snapshots[-1].round:
            raise InvalidParameterError(
                f"round {snapshot.round} does not follow round {self.snapshots[-1].round} of {self.prompt_id}")
        self.snapshots.append(snapshot)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, index) -> CoeffSnapshot:
        return self.snapshots[index]

    def rounds(self) -> np.ndarray:
        return np.array([s.round for s in self.snapshots], dtype=int)

    def beta(self) -> np.ndarray:
        return np.array([s.beta for s in self.snapshots])

    def gamma(self, s: int | None = None) -> np.ndarray:
        """Gamma per round; the column of local feature s (1..S) when given."""
        values = np.array([snap.gamma for snap in self.snapshots])
        return values if s is None else values[:, s - 1]

    def phi(self) -> np.ndarray:
        return np.array([s.phi for s in self.snapshots])

    def at_round(self, round_index: int) -> CoeffSnapshot:
        for snapshot in self.snapshots:
            if snapshot.round == round_index:
                return snapshot
        raise InvalidParameterError(f"{self.prompt_id} has no snapshot at round {round_index}")

    def __str__(self) -> str:
        return f"CoeffTrajectory({self.prompt_id}, {len(self)} snapshots)"


def decompose(p, p0, bank: FeatureBank, round_index: int = 0,
              accumulator: NoiseAccumulator | None = None, prompt_id: str = "") -> CoeffSnapshot:
    """
    Decomposes dp = p - p0 on the feature bank.

    Args:
        p (Prompt | np.ndarray): Current prompt.
        p0 (Prompt | np.ndarray): Initial prompt.
        bank (FeatureBank): The feature bank.
        round_index (int): Round the snapshot belongs to.
        accumulator (NoiseAccumulator | None): Per-label split to attach.
        prompt_id (str): Name of the tracked prompt.

    Returns:
        CoeffSnapshot: Coefficients c_f = <dp, f> and the reconstruction residual.
    """
    p = as_vector(p)
    p0 = as_vector(p0)
    if p.shape != p0.shape or p.shape != (bank.m_p,):
        raise DimensionError(f"prompt {p.shape} and initialization {p0.shape} must both have length {bank.m_p}")
    delta = p - p0
    coefficients = bank.rows @ delta
    in_span = (coefficients / bank.squared_norms()) @ bank.rows
    residual = float(np.linalg.norm(delta - in_span))
    S = bank.S
    return CoeffSnapshot(
        round=int(round_index),
        beta=float(coefficients[0]),
        gamma=coefficients[1:1 + S].copy(),
        phi=coefficients[1 + S:].copy(),
        residual_norm=residual,
        delta_norm=float(np.linalg.norm(delta)),
        psi_acc=None if accumulator is None else accumulator.psi.copy(),
        varphi_acc=None if accumulator is None else accumulator.varphi.copy(),
        prompt_id=prompt_id,
    )


def reconstruct(snapshot: CoeffSnapshot, bank: FeatureBank) -> np.ndarray:
    """Returns sum_f c_f f / ||f||^2, the in-span prompt update."""
    coefficients = snapshot.coefficients()
    if coefficients.shape != (bank.m,):
        raise DimensionError("snapshot does not match the bank")
    return (coefficients / bank.squared_norms()) @ bank.rows


def accumulate_psi_phi(accumulator: NoiseAccumulator, rows_pos, rows_neg, eta: float,
                       bank: FeatureBank) -> NoiseAccumulator:
    """
    Adds one descent step to the per-label split.

    A step p <- p - eta W^T r moves the coefficient of noise feature l by
    -eta ||xi_l||^2 r_l, where r is the latent gradient row vector; r is split into the
    part coming from y = +1 samples (to psi) and from y = -1 samples (to varphi).

    Args:
        accumulator (NoiseAccumulator): Current split.
        rows_pos (np.ndarray): Latent gradient rows of the y = +1 samples.
        rows_neg (np.ndarray): Latent gradient rows of the y = -1 samples.
        eta (float): Learning rate of the step.
        bank (FeatureBank): The feature bank.

    Returns:
        NoiseAccumulator: The updated split.
    """
    noise = bank.noise_slice()
    scale = -eta * bank.squared_norms()[noise]
    rows_pos = np.asarray(rows_pos, dtype=np.float64)
    rows_neg = np.asarray(rows_neg, dtype=np.float64)
    return NoiseAccumulator(
        accumulator.L,
        accumulator.psi + scale * rows_pos[noise],
        accumulator.varphi + scale * rows_neg[noise],
    )


@dataclass
class DynamicsReport:
    """
    Empirical counterparts of the coefficient growth statements for one trajectory.

    Attributes:
        prompt_id (str): Diagnosed prompt.
        signs_ok (bool): beta and the own local gamma never drop below -tol.
        early_nondecreasing (bool): Both grow monotonically over the early rounds.
        beta_growth (float): beta at the early round minus beta at the first round.
        gamma_growth (float): Same for the own local coefficient.
        phi_max (float): Largest |phi| over the run.
        phi_bounded (bool): |phi| never exceeds bound_factor times its reference-round size.
        rounds_to_threshold (int | None): First round whose train loss is below the threshold.
        snr_global (float | None): SNR of the global feature.
        snr_local (float | None): SNR of the own local feature.
        chi (float | None): Similarity count of the diagnosed client.
        orientation (tuple[float, float]): Signs applied to beta and gamma before the checks.
        flags (list[str]): Failed checks.
    """

    prompt_id: str
    signs_ok: bool
    early_nondecreasing: bool
    beta_growth: float
    gamma_growth: float
    phi_max: float
    phi_bounded: bool
    rounds_to_threshold: int | None = None
    snr_global: float | None = None
    snr_local: float | None = None
    chi: float | None = None
    orientation: tuple = (1.0, 1.0)
    flags: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flags


def coefficient_orientation(W, class_prompts, s: int) -> tuple[float, float]:
    """
    Direction in which the margin class difference of the global row and of local row s
    grows with the prompt. Row r of h(p, p_+) - h(p, p_-) is monotone in w_r . p with the
    sign of w_r . (p_+ - p_-); rows where both class prompts agree count as +1.

    Args:
        W (EncoderWeights | np.ndarray): Encoder weights.
        class_prompts (ClassPrompts): Fixed class prompts.
        s (int): Local feature index, 1..S.

    Returns:
        tuple[float, float]: Signs for beta and gamma_s.
    """
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    gap = W @ (class_prompts.p_plus - class_prompts.p_minus)
    signs = np.where(gap < 0.0, -1.0, 1.0)
    return float(signs[0]), float(signs[s])


def dynamics_diagnostics(trajectory: CoeffTrajectory, bank: FeatureBank, assignment=None,
                         sigma_p: float | None = None, client: int = 0, losses=None,
                         orientation: tuple = (1.0, 1.0),
                         loss_threshold: float = 0.1, early_rounds: int = 5,
                         reference_round: int = 5, bound_factor: float = 3.0,
                         tol: float = 1e-10) -> DynamicsReport:
    """
    Checks the sign, early growth and noise boundedness of one trajectory.

    The sign and growth checks read beta and gamma along `orientation`. With gaussian
    class prompts a row where w_r . p_- exceeds w_r . p_+ learns a negative coefficient, and
    a row whose two class offsets share a sign is flat near the initialization, so its
    coefficient can stay at zero for the whole run.

    Args:
        trajectory (CoeffTrajectory): At least two snapshots.
        bank (FeatureBank): The feature bank.
        assignment (ClientAssignment | None): Gives the own local feature of `client`.
        sigma_p (float | None): Noise std, for the reported SNRs.
        client (int): Client whose local feature is followed.
        losses (sequence | None): Mean train loss per round, rounds 1..R.
        orientation (tuple[float, float]): Expected signs of beta and gamma, see
            coefficient_orientation.
        loss_threshold (float): Loss level for rounds_to_threshold.
        early_rounds (int): Rounds treated as the early phase.
        reference_round (int): Round whose |phi| is the boundedness reference.
        bound_factor (float): Allowed growth of |phi| past the reference round.
        tol (float): Sign tolerance.

    Returns:
        DynamicsReport: The checks.
    """
    if len(trajectory) < 2:
        raise EmptyDataError(f"{trajectory.prompt_id} needs at least two snapshots, has {len(trajectory)}")
    s = assignment.local_features[client] if assignment is not None else 1
    rounds = trajectory.rounds()
    beta = orientation[0] * trajectory.beta()
    gamma = orientation[1] * trajectory.gamma(s)
    flags = []

    signs_ok = bool(np.all(beta >= -tol) and np.all(gamma >= -tol))
    if not signs_ok:
        flags.append("negative task-relevant coefficient")

    early = rounds <= rounds[0] + early_rounds
    early_nondecreasing = bool(np.all(np.diff(beta[early]) >= -tol) and np.all(np.diff(gamma[early]) >= -tol))
    if not early_nondecreasing:
        flags.append("task-relevant coefficients decrease in the early phase")
    last_early = int(np.flatnonzero(early)[-1])
    beta_growth = float(beta[last_early] - beta[0])
    gamma_growth = float(gamma[last_early] - gamma[0])

    phi = np.abs(trajectory.phi())
    phi_max = float(phi.max()) if phi.size else 0.0
    phi_bounded = True
    if phi.size and np.any(rounds == reference_round):
        reference = float(phi[rounds == reference_round].max())
        later = phi[rounds > reference_round]
        if later.size:
            phi_bounded = bool(later.max() <= bound_factor * reference + tol)
    if not phi_bounded:
        flags.append(f"noise coefficients grow beyond {bound_factor}x their round-{reference_round} size")

    rounds_to_threshold = None
    if losses is not None:
        below = np.flatnonzero(np.asarray(losses) < loss_threshold)
        rounds_to_threshold = int(below[0]) + 1 if below.size else None

    report = DynamicsReport(
        prompt_id=trajectory.prompt_id,
        signs_ok=signs_ok,
        early_nondecreasing=early_nondecreasing,
        beta_growth=beta_growth,
        gamma_growth=gamma_growth,
        phi_max=phi_max,
        phi_bounded=phi_bounded,
        rounds_to_threshold=rounds_to_threshold,
        snr_global=snr(bank, sigma_p) if sigma_p else None,
        snr_local=snr(bank, sigma_p, s) if sigma_p else None,
        chi=chi(assignment, bank, client) if assignment is not None else None,
        orientation=(float(orientation[0]), float(orientation[1])),
        flags=flags,
    )
    if flags:
        logger.warning("dynamics of %s: %s", trajectory.prompt_id, "; ".join(flags))
    return report


def growth_ratio(traj_a: CoeffTrajectory, traj_b: CoeffTrajectory, coefficient: str = "beta",
                 round_index: int = 1, index: int | None = None) -> float:
    """
    Ratio of the growth of one coefficient since the first snapshot, run a over run b,
    at a matched round.

    Args:
        traj_a, traj_b (CoeffTrajectory): Paired trajectories.
        coefficient (str): 'beta', 'gamma' (needs index s) or 'phi' (index l, 1-based; the
            largest magnitude when None).
        round_index (int): Matched round.
        index (int | None): Feature index for gamma or phi.

    Returns:
        float: growth_a / growth_b.
    """
    def growth(trajectory: CoeffTrajectory) -> float:
        first, at = trajectory[0], trajectory.at_round(round_index)
        if coefficient == "beta":
            return at.beta - first.beta
        if coefficient == "gamma":
            if index is None:
                raise InvalidParameterError("gamma growth needs a local feature index")
            return float(at.gamma[index - 1] - first.gamma[index - 1])
        if coefficient == "phi":
            if index is None:
                return float(np.max(np.abs(at.phi - first.phi)))
            return float(at.phi[index - 1] - first.phi[index - 1])
        raise InvalidParameterError(f"unknown coefficient '{coefficient}'")

    denominator = growth(traj_b)
    if denominator == 0.0:
        raise InvalidParameterError(f"{traj_b.prompt_id} shows no {coefficient} growth by round {round_index}")
    return growth(traj_a) / denominator

"""Two-level nested logit for workplace zone choice.

Zone utility: (beta_a + beta_acr * has_car) * A + lambda * log sum_k exp(alpha_k / lambda + log N_jk).
Estimation runs L-BFGS over (alpha_1..alpha_6, log lambda, beta_a, beta_acr).
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from dataset import ChoiceData, ChoiceProbabilities, log_softmax_rows, log_sum_exp, softmax
from errors import DatasetValidationError, LineSearchError, NumericalError
from models import LAMBDA_INDEX, N_OCCUPATIONS, EstimationResult, LbfgsSettings, NlParams, Zone
from optim import hessian_from_gradient, lbfgs_minimize, std_errors_from_hessian

logger = logging.getLogger("workloc.nested_logit")


def _full_alpha(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == N_OCCUPATIONS - 1:
        return np.append(alpha, 0.0)
    if alpha.size == N_OCCUPATIONS:
        return alpha
    raise ValueError(f"alpha needs {N_OCCUPATIONS - 1} or {N_OCCUPATIONS} entries, got {alpha.size}")


def occupation_logsum(alpha, lam: float, job_counts) -> float:
    """lambda * log sum over occupations with jobs of exp(alpha_k / lambda + log N_jk)."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    counts = np.asarray(job_counts, dtype=np.float64)
    if counts.size != N_OCCUPATIONS or np.any(counts < 0):
        raise ValueError("job_counts must hold 7 nonnegative values")
    present = counts > 0
    if not present.any():
        return -math.inf
    return lam * log_sum_exp(_full_alpha(alpha)[present] / lam + np.log(counts[present]))


def zone_logsums(params: NlParams, jobs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Logsum per zone (J,) and within-zone occupation shares (J, 7); empty zones get -inf and zero shares."""
    lam = params.lam
    with np.errstate(divide="ignore"):
        terms = params.full_alpha()[None, :] / lam + np.log(jobs)
        inclusive = logsumexp(terms, axis=1)
    empty = ~np.isfinite(inclusive)
    shares = np.zeros_like(terms)
    ok = ~empty
    shares[ok] = np.exp(terms[ok] - inclusive[ok, None])
    return lam * inclusive, shares


def nl_systematic_utility(params: NlParams, accessibility_value: float, has_car: int, zone: Zone) -> float:
    """Utility of one zone for one individual; -inf when the zone has no jobs."""
    logsum = occupation_logsum(params.alpha, params.lam, zone.jobs)
    if logsum == -math.inf:
        return -math.inf
    return (params.beta_a + params.beta_acr * has_car) * accessibility_value + logsum


def nl_utilities(params: NlParams, data: ChoiceData) -> np.ndarray:
    """(N, J) utility matrix for every individual of the data."""
    logsums, _ = zone_logsums(params, data.jobs)
    slope = params.beta_a + params.beta_acr * data.has_car.astype(np.float64)
    return slope[:, None] * data.accessibility_values + logsums[None, :]


def nl_choice_probabilities(params: NlParams, individual_row: int, data: ChoiceData) -> ChoiceProbabilities:
    logsums, _ = zone_logsums(params, data.jobs)
    row_access = data.accessibility_rows(individual_row)
    has_car = float(data.has_car[individual_row])
    return softmax((params.beta_a + params.beta_acr * has_car) * row_access + logsums)


class NestedLogitProblem:
    """Likelihood and analytic gradient over a fixed dataset, in optimizer coordinates."""

    def __init__(self, data: ChoiceData):
        if not data.has_observed_choices():
            raise DatasetValidationError("nested logit estimation needs an observed work zone for every individual")
        self.jobs = data.jobs
        self.access = data.accessibility_values
        self.car = data.has_car.astype(np.float64)
        self.weights = data.weights
        self.chosen = data.work
        self.person_ids = data.person_ids
        self.rows = np.arange(len(self.chosen))
        self.total_weight = float(self.weights.sum())

    def _log_probabilities(self, params: NlParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        logsums, shares = zone_logsums(params, self.jobs)
        slope = params.beta_a + params.beta_acr * self.car
        utilities = slope[:, None] * self.access + logsums[None, :]
        log_p = log_softmax_rows(utilities)
        chosen_log_p = log_p[self.rows, self.chosen]
        if not np.all(np.isfinite(chosen_log_p)):
            bad = int(np.flatnonzero(~np.isfinite(chosen_log_p))[0])
            raise NumericalError(
                f"person {self.person_ids[bad]} chose zone {self.chosen[bad]} which has probability 0"
            )
        return log_p, logsums, shares

    def log_likelihood(self, params: NlParams) -> float:
        log_p, _, _ = self._log_probabilities(params)
        return float(self.weights @ log_p[self.rows, self.chosen])

    def value_and_gradient(self, params: NlParams) -> Tuple[float, np.ndarray]:
        """Weighted LL and its gradient in (alpha_1..alpha_6, log lambda, beta_a, beta_acr)."""
        log_p, logsums, shares = self._log_probabilities(params)
        w = self.weights
        ll = float(w @ log_p[self.rows, self.chosen])
        probs = np.exp(log_p)

        grad = np.empty(9)
        # alpha_k: dL_j/dalpha_k = q_jk
        expected_shares = probs @ shares
        grad[:6] = w @ (shares[self.chosen, :6] - expected_shares[:, :6])
        # log lambda: lambda * dL_j/dlambda = L_j - sum_k q_jk alpha_k
        dlog_lam = np.where(np.isfinite(logsums), logsums - shares @ params.full_alpha(), 0.0)
        grad[LAMBDA_INDEX] = w @ (dlog_lam[self.chosen] - probs @ dlog_lam)
        access_score = self.access[self.rows, self.chosen] - np.einsum("nj,nj->n", probs, self.access)
        grad[7] = w @ access_score
        grad[8] = w @ (self.car * access_score)
        return ll, grad

    def gradient(self, params: NlParams) -> np.ndarray:
        return self.value_and_gradient(params)[1]


def nl_log_likelihood(params: NlParams, data: ChoiceData) -> float:
    """sum_n w_n ln Pr(work_zone_n | home_zone_n)."""
    return NestedLogitProblem(data).log_likelihood(params)


def nl_gradient(params: NlParams, data: ChoiceData) -> np.ndarray:
    return NestedLogitProblem(data).gradient(params)


def null_log_likelihood(data: ChoiceData) -> float:
    """Equal probability over the zones that hold jobs."""
    n_available = int(data.nonempty.sum())
    if n_available == 0:
        return -math.inf
    return -float(data.weights.sum()) * math.log(n_available)


def nl_std_errors(params: NlParams, data: ChoiceData, problem: Optional[NestedLogitProblem] = None) -> np.ndarray:
    """Standard errors in the natural scale; lambda's via the delta method from log lambda."""
    problem = problem or NestedLogitProblem(data)
    hess = hessian_from_gradient(
        lambda x: problem.gradient(NlParams.from_free_vector(x)), params.to_free_vector(), rel_step=1e-5
    )
    std = std_errors_from_hessian(hess)
    std[LAMBDA_INDEX] *= params.lam
    return std


def estimate_nl(
    data: ChoiceData,
    init: Optional[NlParams] = None,
    settings: Optional[LbfgsSettings] = None,
) -> EstimationResult:
    """Maximum-likelihood estimation; the optimizer sees -LL / sum(w) so tolerances are scale free."""
    settings = settings or LbfgsSettings()
    init = init or NlParams()
    problem = NestedLogitProblem(data)
    scale = problem.total_weight

    def objective(x: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            ll, grad = problem.value_and_gradient(NlParams.from_free_vector(x))
        except (NumericalError, OverflowError, ValueError):
            return math.inf, np.full_like(x, np.nan)
        return -ll / scale, -grad / scale

    ll_start = problem.log_likelihood(init)
    logger.info(f"Estimating nested logit on {len(problem.chosen)} observations (start LL {ll_start:.4f})")
    try:
        x, _, converged, iterations = lbfgs_minimize(objective, init.to_free_vector(), settings)
    except LineSearchError as e:
        logger.warning(f"Line search failed, keeping last iterate: {e}")
        x, converged, iterations = e.x, False, e.iterations

    params = NlParams.from_free_vector(x)
    ll_final = problem.log_likelihood(params)
    ll_null = null_log_likelihood(data)
    if converged:
        logger.info(f"Converged after {iterations} iterations: LL={ll_final:.4f} (null {ll_null:.4f})")
    else:
        logger.warning(f"Nested logit did not converge within {iterations} iterations (LL={ll_final:.4f})")

    std_errors = t_values = t_against_1 = None
    hessian_ok = True
    try:
        std = nl_std_errors(params, data, problem)
        std_errors = std.tolist()
        t_values = (np.asarray(params.values()) / std).tolist()
        t_against_1 = (params.lam - 1.0) / std[LAMBDA_INDEX]
    except NumericalError as e:
        hessian_ok = False
        logger.warning(f"Standard errors unavailable: {e}")

    return EstimationResult(
        params=params,
        std_errors=std_errors,
        t_values=t_values,
        t_against_1=t_against_1,
        ll_final=ll_final,
        ll_null=ll_null,
        ll_start=ll_start,
        rho_squared=1.0 - ll_final / ll_null if ll_null < 0 else 0.0,
        n_obs=len(problem.chosen),
        converged=converged,
        iterations=iterations,
        hessian_ok=hessian_ok,
        settings=settings,
        dataset_fingerprint=data.fingerprint,
    )


class NestedLogitModel:
    """Estimated nested logit exposed through the shared log_probabilities interface."""

    model_kind = "nested_logit"

    def __init__(self, params: NlParams, result: Optional[EstimationResult] = None, name: str = "DCM"):
        self.params = params
        self.result = result
        self.name = name

    @property
    def dataset_fingerprint(self) -> str:
        return self.result.dataset_fingerprint if self.result else ""

    def log_probabilities(self, data: ChoiceData) -> np.ndarray:
        return log_softmax_rows(nl_utilities(self.params, data))

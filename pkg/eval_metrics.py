"""Model comparison metrics: likelihoods, Pearson correlations, KS tests and distance samples."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Sequence

import numpy as np
from scipy import special, stats

from dataset import NO_CHOICE, ChoiceData, draw_from_probabilities, home_distances
from errors import DatasetValidationError, NumericalError
from models import ATTRIBUTE_RANGES, ATTRIBUTES, OCCUPATIONS, AverageLogLikelihood, CorrelationResult, KsResult
from nested_logit import null_log_likelihood

logger = logging.getLogger("workloc.eval_metrics")

DEFAULT_DRAWS = 100


class ChoiceModel(Protocol):
    name: str
    model_kind: str
    dataset_fingerprint: str

    def log_probabilities(self, data: ChoiceData) -> np.ndarray: ...


def pearson(x, y) -> CorrelationResult:
    """Sample correlation with a two-tailed Student-t p-value on n - 2 degrees of freedom."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if n != y.size:
        raise DatasetValidationError(f"pearson needs equal lengths, got {n} and {y.size}")
    if n < 3:
        raise DatasetValidationError(f"pearson needs at least 3 observations, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DatasetValidationError("correlation is undefined for a constant vector")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))
    if abs(r) == 1.0:
        return CorrelationResult(statistic=r, p_value=0.0, n=n)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return CorrelationResult(statistic=r, p_value=min(1.0, max(0.0, p)), n=n)


def zone_choice_counts(work_zones, n_zones: int) -> np.ndarray:
    """Number of times each zone is chosen."""
    zones = np.asarray(work_zones, dtype=np.int64).ravel()
    if zones.size and (zones.min() < 0 or zones.max() >= n_zones):
        raise DatasetValidationError(f"zone id outside 0..{n_zones - 1}")
    return np.bincount(zones, minlength=n_zones)


def attribute_choice_correlations(choice_counts, data: ChoiceData) -> Dict[str, CorrelationResult]:
    """Pearson between per-zone job counts (each occupation and the total) and per-zone choice counts."""
    counts = np.asarray(choice_counts, dtype=np.float64)
    if data.n_zones < 3:
        raise DatasetValidationError("attribute correlations need at least 3 zones")
    jobs = data.jobs
    table = {name: pearson(jobs[:, k], counts) for k, name in enumerate(OCCUPATIONS)}
    table["total"] = pearson(jobs.sum(axis=1), counts)
    return table


def ks_two_sample(sample_a, sample_b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov D with the asymptotic p-value."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(sample_b, dtype=np.float64).ravel())
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise DatasetValidationError("KS test needs two nonempty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / n1
    cdf_b = np.searchsorted(b, pooled, side="right") / n2
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    n_e = n1 * n2 / (n1 + n2)
    root = math.sqrt(n_e)
    lam = (root + 0.12 + 0.11 / root) * d
    p = float(special.kolmogorov(lam))
    return KsResult(statistic=d, p_value=min(1.0, max(0.0, p)), n1=n1, n2=n2)


def sample_choices(model: ChoiceModel, data: ChoiceData, draws_per_individual: int = DEFAULT_DRAWS, seed=0) -> np.ndarray:
    """(N, draws) zone draws, each row from that individual's predicted distribution."""
    if draws_per_individual < 1:
        raise DatasetValidationError("draws_per_individual must be at least 1")
    rng = np.random.default_rng(seed)
    probs = np.exp(model.log_probabilities(data))
    draws = np.empty((data.n_individuals, draws_per_individual), dtype=np.int64)
    for n in range(data.n_individuals):
        draws[n] = draw_from_probabilities(probs[n], rng.random(draws_per_individual))
    return draws


@dataclass(frozen=True)
class DistanceSample:
    """Home-to-work distances with the data row and segment labels of each value."""

    distances: np.ndarray
    rows: np.ndarray
    gender: np.ndarray
    has_car: np.ndarray

    def __len__(self) -> int:
        return self.distances.size

    def segment(self, name: str, value: int) -> np.ndarray:
        return self.distances[getattr(self, name) == value]


SEGMENTS = ("gender", "has_car")


def distance_distribution(choices, data: ChoiceData) -> DistanceSample:
    """Distances for observed choices (N,) or model draws (N, D)."""
    choices = np.asarray(choices, dtype=np.int64)
    if choices.shape[0] != data.n_individuals:
        raise DatasetValidationError(f"{choices.shape[0]} choice rows for {data.n_individuals} individuals")
    if np.any(choices == NO_CHOICE):
        raise DatasetValidationError("distance distribution needs a work zone for every individual")
    distances = home_distances(data, choices)
    per_row = 1 if choices.ndim == 1 else choices.shape[1]
    rows = np.repeat(np.arange(data.n_individuals), per_row)
    return DistanceSample(
        distances=distances.ravel(),
        rows=rows,
        gender=data.gender[rows],
        has_car=data.has_car[rows],
    )


def segmented_ks(model_sample: DistanceSample, data_sample: DistanceSample, segment: str) -> Dict[int, KsResult]:
    """KS test per value of a segment attribute (gender or has_car)."""
    if segment not in SEGMENTS:
        raise DatasetValidationError(f"unknown segment {segment!r}, expected one of {SEGMENTS}")
    lo, hi = ATTRIBUTE_RANGES[segment]
    results = {}
    for value in range(lo, hi + 1):
        a = model_sample.segment(segment, value)
        b = data_sample.segment(segment, value)
        if a.size == 0 or b.size == 0:
            raise DatasetValidationError(f"segment {segment}={value} is empty in one of the samples")
        results[value] = ks_two_sample(a, b)
    return results


def individual_attribute_correlations(
    data: ChoiceData,
    sample: Optional[DistanceSample] = None,
    skip_constant: bool = False,
    who: str = "data",
) -> Dict[str, Optional[CorrelationResult]]:
    """Pearson between each attribute code and commute distance.

    Without a sample the observed home-to-work distances are used. With
    skip_constant a column without variation is logged and reported as None
    instead of raising.
    """
    if sample is None:
        sample = distance_distribution(data.work, data)
    attributes = data.attributes[sample.rows]
    out: Dict[str, Optional[CorrelationResult]] = {}
    for i, name in enumerate(ATTRIBUTES):
        try:
            out[name] = pearson(attributes[:, i], sample.distances)
        except DatasetValidationError as e:
            if not skip_constant:
                raise
            logger.warning(f"{who}: no correlation for {name}: {e}")
            out[name] = None
    return out


def average_loglikelihood(model: ChoiceModel, data: ChoiceData) -> AverageLogLikelihood:
    """Weighted and unweighted mean log-probability of the observed choices."""
    if not data.has_observed_choices():
        raise DatasetValidationError("average log-likelihood needs observed work zones")
    n = data.n_individuals
    if n == 0:
        raise DatasetValidationError("average log-likelihood of an empty dataset")
    chosen_log_p = model.log_probabilities(data)[np.arange(n), data.work]
    if not np.all(np.isfinite(chosen_log_p)):
        bad = int(np.flatnonzero(~np.isfinite(chosen_log_p))[0])
        raise NumericalError(
            f"{model.name}: person {data.person_ids[bad]} chose zone {data.work[bad]} which has probability 0"
        )
    w = data.weights
    total = float(w @ chosen_log_p)
    total_weight = float(w.sum())
    return AverageLogLikelihood(
        weighted=total / total_weight,
        per_observation=float(chosen_log_p.mean()),
        total=total,
        n_obs=n,
        total_weight=total_weight,
    )


def null_loglikelihood(data: ChoiceData) -> float:
    """sum_n w_n ln(1 / J_n) with J_n the number of zones that hold jobs."""
    return null_log_likelihood(data)


class UniformModel:
    """Equal probability over zones with jobs."""

    model_kind = "uniform"
    dataset_fingerprint = ""

    def __init__(self, name: str = "Uniform"):
        self.name = name

    def log_probabilities(self, data: ChoiceData) -> np.ndarray:
        available = data.nonempty
        if not available.any():
            raise NumericalError("no zone holds any jobs")
        row = np.where(available, -math.log(int(available.sum())), -np.inf)
        return np.tile(row, (data.n_individuals, 1))


def closest_to_reference(reference: float, candidates: Sequence[float]) -> int:
    """Index of the candidate nearest the reference; the first listed wins ties."""
    best, best_gap = 0, math.inf
    for i, value in enumerate(candidates):
        gap = abs(value - reference)
        if gap < best_gap:
            best, best_gap = i, gap
    return best

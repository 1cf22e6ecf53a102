"""Synthetic city, population, accessibility and choice simulation.

Every generator takes an explicit seed (an int or a numpy SeedSequence) and
is bit-deterministic for a fixed seed and config.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from dataset import ChoiceData, Dataset, build_dataset, draw_from_probabilities, log_softmax_rows
from errors import DatasetValidationError
from models import (
    ATTRIBUTE_RANGES, ATTRIBUTES, OCCUPATIONS, AccessibilityMatrix, CityConfig, Individual,
    Oracle, PopulationConfig, SimulationConfig, Zone,
)
from nested_logit import nl_utilities

logger = logging.getLogger("workloc.synthgen")

OFFICE = OCCUPATIONS.index("office")


def mix_job_means(means: np.ndarray, mix_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Scale each (zone, occupation) mean by a lognormal factor, then restore every zone's total."""
    if mix_sigma == 0:
        return means
    mixed = means * np.exp(mix_sigma * rng.standard_normal(means.shape))
    totals = means.sum(axis=1, keepdims=True)
    mixed_totals = mixed.sum(axis=1, keepdims=True)
    return np.divide(mixed * totals, mixed_totals, out=np.zeros_like(mixed), where=mixed_totals > 0)


def generate_city(config: CityConfig, seed) -> List[Zone]:
    """Lattice zones with Poisson job counts whose means fall off exponentially from the CBD.

    Each zone's occupation mix is perturbed by mix_sigma, so zones with the
    same total differ in composition.
    """
    rng = np.random.default_rng(seed)
    rows, cols = np.divmod(np.arange(config.n_zones), config.grid_cols)
    x = (cols + 0.5) * config.cell_size_km
    y = (rows + 0.5) * config.cell_size_km
    cbd = config.cbd
    distance = np.hypot(x - x[cbd], y - y[cbd])
    rates = config.distance_decay * np.asarray(config.decay_multipliers)
    share = np.exp(-distance[:, None] * rates[None, :])
    share /= share.sum(axis=0, keepdims=True)
    means = mix_job_means(share * np.asarray(config.job_scale)[None, :], config.mix_sigma, rng)
    jobs = rng.poisson(means)
    logger.debug(f"Generated {config.n_zones} zones with {int(jobs.sum())} jobs")
    return [
        Zone(zone_id=j, centroid_x_km=float(x[j]), centroid_y_km=float(y[j]), jobs=tuple(int(v) for v in jobs[j]))
        for j in range(config.n_zones)
    ]


def generate_population(config: PopulationConfig, zones: Sequence[Zone], seed) -> List[Individual]:
    """Independent attribute draws from the marginals, uniform home zones, lognormal weights."""
    rng = np.random.default_rng(seed)
    n = config.n_individuals
    codes = {}
    for name in ATTRIBUTES:
        lo, _ = ATTRIBUTE_RANGES[name]
        probs = np.asarray(config.marginals[name], dtype=np.float64)
        codes[name] = rng.choice(len(probs), size=n, p=probs / probs.sum()) + lo
    home = rng.integers(0, len(zones), size=n)
    weights = rng.lognormal(config.weight_mu, config.weight_sigma, size=n)
    return [
        Individual(
            person_id=i,
            home_zone=int(home[i]),
            weight=float(weights[i]),
            **{name: int(codes[name][i]) for name in ATTRIBUTES},
        )
        for i in range(n)
    ]


def generate_accessibility(
    zones: Sequence[Zone],
    individuals: Sequence[Individual],
    decay: float,
    noise_sigma: float,
    seed,
    a0: float = 3.0,
) -> AccessibilityMatrix:
    """A[n, j] = a0 - decay * distance(home_n, j) + Normal(0, noise_sigma**2)."""
    if not decay > 0:
        raise DatasetValidationError(f"accessibility decay must be positive, got {decay}")
    if noise_sigma < 0:
        raise DatasetValidationError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    centroids = np.array([(z.centroid_x_km, z.centroid_y_km) for z in zones], dtype=np.float64)
    home = centroids[[p.home_zone for p in individuals]].reshape(-1, 2)
    distance = np.hypot(home[:, None, 0] - centroids[None, :, 0], home[:, None, 1] - centroids[None, :, 1])
    values = a0 - decay * distance
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    return AccessibilityMatrix(values=values)


def oracle_utilities(oracle: Oracle, data: ChoiceData) -> np.ndarray:
    """(N, J) utilities of the generating process; zones without jobs get -inf."""
    utilities = nl_utilities(oracle.nl, data)
    if oracle.kind == "nonlinear":
        office = np.log1p(data.jobs[:, OFFICE])
        car = data.has_car.astype(np.float64)[:, None]
        gender = data.gender.astype(np.float64)[:, None]
        access = data.accessibility_values
        utilities = utilities + oracle.gamma * car * office[None, :] + oracle.delta * gender * access**2
    return utilities


class OracleModel:
    """Ground-truth process exposed through the shared log_probabilities interface."""

    model_kind = "oracle"

    def __init__(self, oracle: Oracle, name: str = "Oracle", dataset_fingerprint: str = ""):
        self.oracle = oracle
        self.name = name
        self.dataset_fingerprint = dataset_fingerprint

    def log_probabilities(self, data: ChoiceData) -> np.ndarray:
        return log_softmax_rows(oracle_utilities(self.oracle, data))


def simulate_choices(oracle: Oracle, dataset: Dataset, seed) -> Dataset:
    """Draw one work zone per individual from the oracle's probabilities."""
    if np.any(dataset.work >= 0):
        raise DatasetValidationError("simulate_choices expects a dataset without work zones")
    rng = np.random.default_rng(seed)
    probs = np.exp(OracleModel(oracle).log_probabilities(dataset))
    uniforms = rng.random(dataset.n_individuals)
    chosen = [int(draw_from_probabilities(p, u)) for p, u in zip(probs, uniforms)]
    individuals = [
        person.model_copy(update={"work_zone": zone}) for person, zone in zip(dataset.individuals, chosen)
    ]
    return build_dataset(dataset.zones, individuals, dataset.accessibility)


def simulate_dataset(config: SimulationConfig, seed: Optional[int] = None) -> Dataset:
    """City, population, accessibility and choices from independent child streams of one seed.

    An explicit seed overrides config.seed; with neither set the seed is 0.
    """
    if seed is None:
        seed = config.seed if config.seed is not None else 0
    city_seed, population_seed, access_seed, choice_seed = np.random.SeedSequence(seed).spawn(4)
    zones = generate_city(config.city, city_seed)
    individuals = generate_population(config.population, zones, population_seed)
    access = config.accessibility
    matrix = generate_accessibility(zones, individuals, access.decay, access.noise_sigma, access_seed, a0=access.a0)
    dataset = simulate_choices(config.oracle, build_dataset(zones, individuals, matrix), choice_seed)
    logger.info(
        f"Simulated {dataset.n_individuals} individuals over {dataset.n_zones} zones "
        f"with the {config.oracle.kind} oracle (seed {seed})"
    )
    return dataset

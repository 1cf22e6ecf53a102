"""Dataset assembly, train/validation views, distances and probability kernels."""

import hashlib
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, NewType, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.special import logsumexp

from errors import DatasetValidationError, NumericalError
from models import ATTRIBUTES, AccessibilityMatrix, Individual, Zone

logger = logging.getLogger("workloc.dataset")

# Probability vector over zones; entries in [0, 1] summing to 1
ChoiceProbabilities = NewType("ChoiceProbabilities", np.ndarray)

NO_CHOICE = -1


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated zones, individuals and their accessibility rows (bound by position)."""

    zones: Tuple[Zone, ...]
    individuals: Tuple[Individual, ...]
    accessibility: AccessibilityMatrix

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def n_individuals(self) -> int:
        return len(self.individuals)

    @cached_property
    def jobs(self) -> np.ndarray:
        return np.array([z.jobs for z in self.zones], dtype=np.float64).reshape(-1, 7)

    @cached_property
    def centroids(self) -> np.ndarray:
        return np.array([(z.centroid_x_km, z.centroid_y_km) for z in self.zones], dtype=np.float64)

    @cached_property
    def nonempty(self) -> np.ndarray:
        """Mask of zones holding at least one job."""
        return self.jobs.sum(axis=1) > 0

    @cached_property
    def person_ids(self) -> np.ndarray:
        return np.array([p.person_id for p in self.individuals], dtype=np.int64)

    @cached_property
    def home(self) -> np.ndarray:
        return np.array([p.home_zone for p in self.individuals], dtype=np.int64)

    @cached_property
    def work(self) -> np.ndarray:
        return np.array(
            [NO_CHOICE if p.work_zone is None else p.work_zone for p in self.individuals], dtype=np.int64
        )

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.individuals], dtype=np.float64)

    @cached_property
    def attributes(self) -> np.ndarray:
        """Attribute codes, columns ordered as models.ATTRIBUTES."""
        return np.array(
            [[getattr(p, a) for a in ATTRIBUTES] for p in self.individuals], dtype=np.int64
        ).reshape(-1, len(ATTRIBUTES))

    def attribute(self, name: str) -> np.ndarray:
        return self.attributes[:, ATTRIBUTES.index(name)]

    @property
    def has_car(self) -> np.ndarray:
        return self.attribute("has_car")

    @property
    def gender(self) -> np.ndarray:
        return self.attribute("gender")

    @property
    def accessibility_values(self) -> np.ndarray:
        return self.accessibility.values

    def accessibility_rows(self, rows) -> np.ndarray:
        """Accessibility of the given rows against every zone."""
        return self.accessibility.values[rows]

    @property
    def dataset(self) -> "Dataset":
        return self

    @property
    def rows(self) -> np.ndarray:
        return np.arange(self.n_individuals)

    @cached_property
    def fingerprint(self) -> str:
        """Content hash over zones, individuals and accessibility."""
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.jobs, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
        for arr in (self.person_ids, self.home, self.work, self.attributes):
            digest.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        digest.update(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(self.accessibility.values, dtype="<f8").tobytes())
        return digest.hexdigest()

    def has_observed_choices(self) -> bool:
        return bool(np.all(self.work != NO_CHOICE))


class DatasetView:
    """Subset of a parent dataset's individuals; accessibility rows are indexed on access."""

    def __init__(self, parent: Dataset, rows: np.ndarray):
        self.parent = parent
        self.rows = np.asarray(rows, dtype=np.int64)
        self.rows.setflags(write=False)

    @property
    def dataset(self) -> Dataset:
        return self.parent

    @property
    def zones(self) -> Tuple[Zone, ...]:
        return self.parent.zones

    @property
    def n_zones(self) -> int:
        return self.parent.n_zones

    @property
    def n_individuals(self) -> int:
        return len(self.rows)

    @property
    def individuals(self) -> List[Individual]:
        return [self.parent.individuals[i] for i in self.rows]

    @property
    def jobs(self) -> np.ndarray:
        return self.parent.jobs

    @property
    def centroids(self) -> np.ndarray:
        return self.parent.centroids

    @property
    def nonempty(self) -> np.ndarray:
        return self.parent.nonempty

    @property
    def person_ids(self) -> np.ndarray:
        return self.parent.person_ids[self.rows]

    @property
    def home(self) -> np.ndarray:
        return self.parent.home[self.rows]

    @property
    def work(self) -> np.ndarray:
        return self.parent.work[self.rows]

    @property
    def weights(self) -> np.ndarray:
        return self.parent.weights[self.rows]

    @property
    def attributes(self) -> np.ndarray:
        return self.parent.attributes[self.rows]

    def attribute(self, name: str) -> np.ndarray:
        return self.parent.attribute(name)[self.rows]

    @property
    def has_car(self) -> np.ndarray:
        return self.attribute("has_car")

    @property
    def gender(self) -> np.ndarray:
        return self.attribute("gender")

    @property
    def accessibility_values(self) -> np.ndarray:
        return self.parent.accessibility.values[self.rows]

    def accessibility_rows(self, rows) -> np.ndarray:
        """Accessibility of the given view rows, read from the parent block."""
        return self.parent.accessibility.values[self.rows[rows]]

    @property
    def fingerprint(self) -> str:
        return self.parent.fingerprint

    def has_observed_choices(self) -> bool:
        return bool(np.all(self.work != NO_CHOICE))


ChoiceData = Union[Dataset, DatasetView]


def build_dataset(zones: Sequence[Zone], individuals: Sequence[Individual], accessibility) -> Dataset:
    """Cross-validate the three inputs and assemble a Dataset; never truncates."""
    if not isinstance(accessibility, AccessibilityMatrix):
        try:
            accessibility = AccessibilityMatrix(values=accessibility)
        except ValidationError as e:
            raise DatasetValidationError(f"invalid accessibility matrix: {e}") from e

    n_zones = len(zones)
    if n_zones == 0:
        raise DatasetValidationError("dataset has no zones")
    ids = [z.zone_id for z in zones]
    if ids != list(range(n_zones)):
        raise DatasetValidationError("zone ids must be unique, contiguous from 0 and in order")

    shape = accessibility.shape
    if shape != (len(individuals), n_zones):
        raise DatasetValidationError(
            f"accessibility shape {shape} does not match {len(individuals)} individuals x {n_zones} zones"
        )

    seen = set()
    for person in individuals:
        if person.person_id in seen:
            raise DatasetValidationError(f"duplicate person_id {person.person_id}")
        seen.add(person.person_id)
        if person.home_zone >= n_zones:
            raise DatasetValidationError(
                f"person {person.person_id}: home_zone {person.home_zone} references a missing zone"
            )
        if person.work_zone is not None and person.work_zone >= n_zones:
            raise DatasetValidationError(
                f"person {person.person_id}: work_zone {person.work_zone} references a missing zone"
            )
        if not (math.isfinite(person.weight) and person.weight > 0):
            raise DatasetValidationError(f"person {person.person_id}: weight must be positive, got {person.weight}")

    return Dataset(zones=tuple(zones), individuals=tuple(individuals), accessibility=accessibility)


def remap_zone_ids(zones: Sequence[Zone], individuals: Sequence[Individual]) -> Tuple[List[Zone], List[Individual]]:
    """Renumber zones densely in input order, keeping the file id as source_id.

    Home and work zones of the individuals are translated through the same map.
    """
    ids = [z.zone_id for z in zones]
    if ids == list(range(len(zones))):
        return list(zones), list(individuals)
    if len(set(ids)) != len(ids):
        raise DatasetValidationError("duplicate zone_id")
    index = {zone_id: i for i, zone_id in enumerate(ids)}

    def lookup(person: Individual, zone_id: int, role: str) -> int:
        if zone_id not in index:
            raise DatasetValidationError(f"person {person.person_id}: {role} {zone_id} references a missing zone")
        return index[zone_id]

    remapped_zones = [z.model_copy(update={"zone_id": i, "source_id": z.zone_id}) for i, z in enumerate(zones)]
    remapped_people = []
    for person in individuals:
        update = {"home_zone": lookup(person, person.home_zone, "home_zone")}
        if person.work_zone is not None:
            update["work_zone"] = lookup(person, person.work_zone, "work_zone")
        remapped_people.append(person.model_copy(update=update))
    logger.info(f"Remapped {len(zones)} zone ids to 0..{len(zones) - 1}")
    return remapped_zones, remapped_people


def zone_file_ids(zones: Sequence[Zone]) -> np.ndarray:
    """Ids to write back to files: source_id where the zone was remapped."""
    return np.array([z.zone_id if z.source_id is None else z.source_id for z in zones], dtype=np.int64)


def split_dataset(dataset: Dataset, train_fraction: float, seed) -> Tuple[DatasetView, DatasetView]:
    """Seeded permutation of individuals cut into (train, validation) views."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetValidationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = dataset.n_individuals
    n_train = int(math.floor(n * train_fraction + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    train_rows = np.sort(perm[:n_train])
    val_rows = np.sort(perm[n_train:])
    logger.debug(f"Split {n} individuals into {len(train_rows)} train / {len(val_rows)} validation")
    return DatasetView(dataset, train_rows), DatasetView(dataset, val_rows)


def zone_distance(zone_a: Zone, zone_b: Zone) -> float:
    """Euclidean distance between zone centroids in km."""
    return math.hypot(zone_a.centroid_x_km - zone_b.centroid_x_km, zone_a.centroid_y_km - zone_b.centroid_y_km)


def home_distances(data: ChoiceData, zones_chosen: np.ndarray) -> np.ndarray:
    """Distance from each individual's home to the given zone(s); zones_chosen is (N,) or (N, D)."""
    zones_chosen = np.asarray(zones_chosen, dtype=np.int64)
    centroids = data.centroids
    home = centroids[data.home]
    if zones_chosen.ndim == 2:
        home = home[:, None, :]
    target = centroids[zones_chosen]
    return np.hypot(target[..., 0] - home[..., 0], target[..., 1] - home[..., 1])


def log_sum_exp(values) -> float:
    """Overflow-safe log(sum(exp(values))); -inf when every entry is -inf."""
    with np.errstate(divide="ignore"):
        return float(logsumexp(np.asarray(values, dtype=np.float64)))


def softmax(utilities) -> ChoiceProbabilities:
    """Choice probabilities from utilities; -inf utilities get probability 0."""
    v = np.asarray(utilities, dtype=np.float64)
    norm = log_sum_exp(v)
    if not math.isfinite(norm):
        raise NumericalError("softmax needs at least one finite utility")
    return ChoiceProbabilities(np.exp(v - norm))


def log_softmax_rows(utilities: np.ndarray) -> np.ndarray:
    """Row-wise log-probabilities of an (N, J) utility matrix."""
    with np.errstate(divide="ignore"):
        norm = logsumexp(utilities, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        bad = int(np.flatnonzero(~np.isfinite(norm[:, 0]))[0])
        raise NumericalError(f"row {bad} has no finite utility")
    return utilities - norm


def draw_from_probabilities(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws from one probability vector; zero-probability zones are never drawn."""
    cdf = np.cumsum(probs)
    total = cdf[-1]
    if not (math.isfinite(total) and total > 0):
        raise NumericalError("degenerate probability vector")
    idx = np.searchsorted(cdf, np.asarray(uniforms) * total, side="right")
    last = len(probs) - 1 - int(np.argmax(probs[::-1] > 0))
    return np.minimum(idx, last)

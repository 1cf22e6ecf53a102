import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Load environment variables
load_dotenv()

OCCUPATIONS: Tuple[str, ...] = (
    "restaurant", "shopping", "office", "education", "health", "business", "recreation"
)
N_OCCUPATIONS = len(OCCUPATIONS)

# Individual attributes in survey order, with inclusive category ranges
ATTRIBUTE_RANGES: Dict[str, Tuple[int, int]] = {
    "household_type": (1, 6),
    "has_kids": (0, 1),
    "has_car": (0, 1),
    "gender": (0, 1),
    "income_class": (1, 11),
    "employment": (1, 4),
}
ATTRIBUTES: Tuple[str, ...] = tuple(ATTRIBUTE_RANGES)

# Free parameters of the nested logit, recreation is the reference occupation
NL_PARAM_NAMES: Tuple[str, ...] = tuple(f"alpha_{k}" for k in OCCUPATIONS[:-1]) + (
    "lambda", "beta_a", "beta_acr"
)
LAMBDA_INDEX = 6

# Travel survey category counts (6,204 respondents) used as default marginals
SURVEY_COUNTS: Dict[str, List[int]] = {
    "household_type": [1072, 2441, 102, 768, 92, 1729],
    "has_kids": [3513, 2691],
    "has_car": [1998, 4206],
    "gender": [2781, 3423],
    "income_class": [12, 28, 43, 115, 319, 557, 954, 2154, 1378, 405, 239],
    "employment": [5350, 818, 29, 7],
}

MAX_SEED = 2**64 - 1

# Inputs the neural zone block knows how to encode
JOB_ENCODINGS: Tuple[str, ...] = tuple(f"log1p_jobs_{k}" for k in OCCUPATIONS)
KNOWN_ENCODINGS: Tuple[str, ...] = JOB_ENCODINGS + ("accessibility",) + ATTRIBUTES + ("same_zone",)


def _survey_marginals() -> Dict[str, List[float]]:
    return {name: [c / sum(counts) for c in counts] for name, counts in SURVEY_COUNTS.items()}


class Zone(BaseModel):
    """Spatial alternative with a centroid and job counts per occupation type."""
    model_config = ConfigDict(frozen=True)

    zone_id: int = Field(ge=0)
    centroid_x_km: float
    centroid_y_km: float
    jobs: Tuple[int, ...]
    source_id: Optional[int] = None  # id used in the input file when it differs from zone_id

    @field_validator("jobs")
    @classmethod
    def _check_jobs(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(value) != N_OCCUPATIONS:
            raise ValueError(f"expected {N_OCCUPATIONS} job counts, got {len(value)}")
        if any(v < 0 for v in value):
            raise ValueError("job counts must be nonnegative")
        return value

    @property
    def total_jobs(self) -> int:
        return sum(self.jobs)


class Individual(BaseModel):
    """Survey respondent: home zone, observed work zone, survey attributes, weight."""
    model_config = ConfigDict(frozen=True)

    person_id: int
    home_zone: int = Field(ge=0)
    work_zone: Optional[int] = Field(default=None, ge=0)
    household_type: int = Field(ge=1, le=6)
    has_kids: int = Field(ge=0, le=1)
    has_car: int = Field(ge=0, le=1)
    gender: int = Field(ge=0, le=1)
    income_class: int = Field(ge=1, le=11)
    employment: int = Field(ge=1, le=4)
    weight: float = 1.0  # positivity is checked by build_dataset


class AccessibilityMatrix(BaseModel):
    """Dense [individuals x zones] spare-time accessibility block."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _as_float_matrix(cls, value) -> np.ndarray:
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"accessibility must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("accessibility contains non-finite entries")
        arr.setflags(write=False)
        return arr

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


class NlParams(BaseModel):
    """Nested-logit parameter vector in its natural scale."""

    alpha: List[float] = Field(default_factory=lambda: [0.0] * (N_OCCUPATIONS - 1))
    lam: float = 1.0
    beta_a: float = 0.0
    beta_acr: float = 0.0

    @field_validator("alpha")
    @classmethod
    def _check_alpha(cls, value: List[float]) -> List[float]:
        if len(value) != N_OCCUPATIONS - 1:
            raise ValueError(f"alpha needs {N_OCCUPATIONS - 1} free constants (recreation is the reference)")
        return value

    @field_validator("lam")
    @classmethod
    def _check_lambda(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("lambda must be positive")
        return value

    def to_free_vector(self) -> np.ndarray:
        """Optimizer coordinates: (alpha_1..alpha_6, log lambda, beta_a, beta_acr)."""
        return np.array([*self.alpha, math.log(self.lam), self.beta_a, self.beta_acr])

    @classmethod
    def from_free_vector(cls, x) -> "NlParams":
        x = [float(v) for v in x]
        return cls(alpha=x[:6], lam=math.exp(x[LAMBDA_INDEX]), beta_a=x[7], beta_acr=x[8])

    def values(self) -> List[float]:
        """Values in the natural scale, ordered as NL_PARAM_NAMES."""
        return [*self.alpha, self.lam, self.beta_a, self.beta_acr]

    def full_alpha(self) -> np.ndarray:
        return np.array([*self.alpha, 0.0])


class LbfgsSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    memory: int = Field(default=10, gt=0)
    tol: float = Field(default=1e-6, gt=0)  # gradient max-norm
    max_iter: int = Field(default=500, gt=0)
    c1: float = Field(default=1e-4, gt=0, lt=1)
    shrink: float = Field(default=0.5, gt=0, lt=1)
    max_line_search: int = Field(default=60, gt=0)


class SplitInfo(BaseModel):
    fraction: float = Field(default=0.75, gt=0, lt=1)
    seed: int = Field(default=0, ge=0, le=MAX_SEED)


class EstimationResult(BaseModel):
    """Nested-logit estimates in the layout of a parameter table."""

    params: NlParams
    param_names: List[str] = Field(default_factory=lambda: list(NL_PARAM_NAMES))
    std_errors: Optional[List[float]] = None  # absent when the Hessian is singular
    t_values: Optional[List[float]] = None
    t_against_1: Optional[float] = None  # (lambda - 1) / std(lambda)
    ll_final: float
    ll_null: float
    ll_start: float
    ll_validation: Optional[float] = None
    rho_squared: float
    n_obs: int
    n_validation: Optional[int] = None
    converged: bool
    iterations: int
    hessian_ok: bool = True
    settings: LbfgsSettings = Field(default_factory=LbfgsSettings)
    split: Optional[SplitInfo] = None
    dataset_fingerprint: str = ""


FeatureMode = Literal["car", "all", "custom"]


class FeatureSpec(BaseModel):
    """Ordered input encodings of the neural zone block."""

    mode: FeatureMode
    encodings: List[str]
    input_dim: int
    version: int = 1

    @model_validator(mode="after")
    def _check_dim(self) -> "FeatureSpec":
        unknown = [e for e in self.encodings if e not in KNOWN_ENCODINGS]
        if unknown:
            raise ValueError(f"unknown feature encodings: {unknown}")
        if self.input_dim != len(self.encodings):
            raise ValueError(f"input_dim {self.input_dim} != {len(self.encodings)} encodings")
        return self

    @classmethod
    def for_mode(cls, mode: str, extra: Tuple[str, ...] = ()) -> "FeatureSpec":
        """Standard layouts: car -> 9 inputs, all -> 14 inputs (plus any extra encodings)."""
        jobs = list(JOB_ENCODINGS)
        if mode == "car":
            encodings = jobs + ["accessibility", "has_car"]
        elif mode == "all":
            encodings = jobs + ["accessibility", *ATTRIBUTES]
        else:
            raise ValueError(f"unknown feature mode {mode!r}")
        encodings += list(extra)
        return cls(mode=mode, encodings=encodings, input_dim=len(encodings))


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_sizes: List[int] = Field(default_factory=lambda: [100, 150])
    learning_rate: float = Field(default=0.01, gt=0)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, gt=0)
    seed: int = Field(default=0, ge=0, le=MAX_SEED)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)  # L2 on layer weights, per unit of observation weight
    output_activation: Literal["identity", "relu"] = "identity"

    @field_validator("hidden_sizes")
    @classmethod
    def _check_layers(cls, value: List[int]) -> List[int]:
        if not value or any(h <= 0 for h in value):
            raise ValueError("hidden_sizes must be a nonempty list of positive integers")
        return value


class TrainHistory(BaseModel):
    train_ll: List[float] = Field(default_factory=list)
    val_ll: List[float] = Field(default_factory=list)
    wall_time_s: float = 0.0
    final_epoch: int = 0


class CityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid_rows: int = Field(default=10, ge=1)
    grid_cols: int = Field(default=10, ge=1)
    cbd_zone: Optional[int] = None  # defaults to the central cell
    job_scale: List[float] = Field(default_factory=lambda: [4000.0, 6000.0, 9000.0, 5000.0, 6000.0, 7000.0, 6000.0])
    distance_decay: float = Field(default=0.25, ge=0)
    # per-occupation multiplier on distance_decay; office and business cluster in the CBD
    decay_multipliers: List[float] = Field(default_factory=lambda: [0.8, 0.6, 1.6, 0.4, 0.7, 1.3, 0.5])
    # log-scale spread of per-zone occupation mix factors; zone totals are kept
    mix_sigma: float = Field(default=2.0, ge=0)
    cell_size_km: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "CityConfig":
        n_zones = self.grid_rows * self.grid_cols
        if n_zones < 2:
            raise ValueError("a city needs at least 2 zones")
        if len(self.job_scale) != N_OCCUPATIONS or any(s < 0 for s in self.job_scale):
            raise ValueError(f"job_scale needs {N_OCCUPATIONS} nonnegative values")
        if len(self.decay_multipliers) != N_OCCUPATIONS or any(m < 0 for m in self.decay_multipliers):
            raise ValueError(f"decay_multipliers needs {N_OCCUPATIONS} nonnegative values")
        if self.cbd_zone is not None and not 0 <= self.cbd_zone < n_zones:
            raise ValueError(f"cbd_zone {self.cbd_zone} outside 0..{n_zones - 1}")
        return self

    @property
    def n_zones(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def cbd(self) -> int:
        if self.cbd_zone is not None:
            return self.cbd_zone
        return (self.grid_rows // 2) * self.grid_cols + self.grid_cols // 2


class PopulationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_individuals: int = Field(default=5000, ge=1)
    marginals: Dict[str, List[float]] = Field(default_factory=_survey_marginals)
    weight_mu: float = 0.0
    weight_sigma: float = Field(default=0.25, ge=0)

    @field_validator("marginals")
    @classmethod
    def _check_marginals(cls, value: Dict[str, List[float]]) -> Dict[str, List[float]]:
        merged = {**_survey_marginals(), **value}
        for name, probs in merged.items():
            if name not in ATTRIBUTE_RANGES:
                raise ValueError(f"unknown attribute {name!r}")
            lo, hi = ATTRIBUTE_RANGES[name]
            if len(probs) != hi - lo + 1:
                raise ValueError(f"{name} needs {hi - lo + 1} category probabilities")
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"{name} marginals must be nonnegative and sum to 1")
        return merged


class AccessibilityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    a0: float = 3.0
    decay: float = Field(default=0.4, gt=0)
    noise_sigma: float = Field(default=1.5, ge=0)


class Oracle(BaseModel):
    """Ground-truth choice process used to simulate observed work zones.

    The nonlinear kind adds gamma * has_car * log(1 + office jobs) and
    delta * gender * accessibility**2 to the nested-logit utility.
    """

    kind: Literal["nl", "nonlinear"] = "nl"
    nl: NlParams = Field(default_factory=lambda: NlParams(alpha=[0.5] * 6, lam=1.2, beta_a=0.6, beta_acr=-0.1))
    gamma: float = 0.0
    delta: float = 0.0

    @classmethod
    def nonlinear_default(cls) -> "Oracle":
        return cls(kind="nonlinear", gamma=0.6, delta=-0.25)


class SimulationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    city: CityConfig = Field(default_factory=CityConfig)
    population: PopulationConfig = Field(default_factory=PopulationConfig)
    accessibility: AccessibilityConfig = Field(default_factory=AccessibilityConfig)
    oracle: Oracle = Field(default_factory=Oracle)
    seed: Optional[int] = Field(default=None, ge=0, le=MAX_SEED)


class CorrelationResult(BaseModel):
    statistic: float = Field(ge=-1.0, le=1.0)
    p_value: float = Field(ge=0.0, le=1.0)
    n: int


class KsResult(BaseModel):
    statistic: float = Field(ge=0.0, le=1.0)
    p_value: float = Field(ge=0.0, le=1.0)
    n1: int
    n2: int


class AverageLogLikelihood(BaseModel):
    weighted: float  # sum w ln P / sum w
    per_observation: float  # unweighted mean of ln P
    total: float  # sum w ln P
    n_obs: int
    total_weight: float


class RunConfig(BaseModel):
    """Resolved options of one CLI invocation."""
    model_config = ConfigDict(extra="forbid")

    command: Literal["simulate", "estimate-nl", "train-dnn", "evaluate", "compare"]
    config_path: Optional[str] = None
    data_dir: Optional[str] = None
    out: Optional[str] = None
    seed: int = Field(default=0, ge=0, le=MAX_SEED)
    split: float = Field(default=0.75, gt=0, lt=1)
    mode: Literal["car", "all"] = "car"
    model_paths: List[str] = Field(default_factory=list)
    draws: int = Field(default=100, ge=1)
    timestamps: bool = False
    train: TrainConfig = Field(default_factory=TrainConfig)
    lbfgs: LbfgsSettings = Field(default_factory=LbfgsSettings)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)


class Report(BaseModel):
    """Manifest of an evaluation run; every listed file exists when it is written."""

    metadata: Dict[str, object] = Field(default_factory=dict)
    tables: Dict[str, str] = Field(default_factory=dict)
    figures: List[str] = Field(default_factory=list)

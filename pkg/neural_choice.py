"""Neural workplace choice model.

One MLP zone block, shared by every zone, maps the zone's job counts, the
individual's accessibility to that zone and individual attributes to a
utility. A per-zone ASC is added and a softmax over zones gives Pr(j | i).
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dataset import ChoiceData, ChoiceProbabilities, NO_CHOICE, log_softmax_rows, softmax
from errors import DatasetValidationError, NumericalError
from models import (
    ATTRIBUTE_RANGES, ATTRIBUTES, JOB_ENCODINGS, FeatureSpec, Individual, SplitInfo,
    TrainConfig, TrainHistory, Zone,
)
from optim import AdamState, adam_step

logger = logging.getLogger("workloc.neural_choice")

PREDICT_CHUNK = 256


def _check_category(name: str, value: int) -> None:
    lo, hi = ATTRIBUTE_RANGES[name]
    if not lo <= value <= hi:
        raise DatasetValidationError(f"{name}={value} outside declared range {lo}..{hi}")


def build_features(individual: Individual, zone: Zone, accessibility_value: float, feature_spec: FeatureSpec) -> np.ndarray:
    """Unscaled input vector of one (individual, zone) pair, in feature_spec order."""
    values = []
    for enc in feature_spec.encodings:
        if enc in JOB_ENCODINGS:
            values.append(math.log1p(zone.jobs[JOB_ENCODINGS.index(enc)]))
        elif enc == "accessibility":
            values.append(float(accessibility_value))
        elif enc == "same_zone":
            values.append(1.0 if individual.home_zone == zone.zone_id else 0.0)
        else:
            code = getattr(individual, enc)
            _check_category(enc, code)
            values.append(float(code))
    return np.array(values)


def feature_tensor(feature_spec: FeatureSpec, data: ChoiceData, rows: np.ndarray) -> np.ndarray:
    """Unscaled inputs for the given data rows against every zone, shape (B, J, input_dim)."""
    rows = np.asarray(rows, dtype=np.int64)
    n_rows, n_zones = len(rows), data.n_zones
    log_jobs = np.log1p(data.jobs)
    attributes = data.attributes[rows]
    out = np.empty((n_rows, n_zones, feature_spec.input_dim))
    for i, enc in enumerate(feature_spec.encodings):
        if enc in JOB_ENCODINGS:
            out[:, :, i] = log_jobs[None, :, JOB_ENCODINGS.index(enc)]
        elif enc == "accessibility":
            out[:, :, i] = data.accessibility_rows(rows)
        elif enc == "same_zone":
            out[:, :, i] = data.home[rows][:, None] == np.arange(n_zones)[None, :]
        else:
            codes = attributes[:, ATTRIBUTES.index(enc)]
            lo, hi = ATTRIBUTE_RANGES[enc]
            if codes.size and (codes.min() < lo or codes.max() > hi):
                raise DatasetValidationError(f"{enc} codes outside declared range {lo}..{hi}")
            out[:, :, i] = codes[:, None]
    return out


@dataclass(frozen=True)
class Scaler:
    """Per-feature z-score statistics fitted on training rows."""

    mean: np.ndarray
    std: np.ndarray


def fit_scaler(training_rows) -> Scaler:
    """Population mean/std per column; constant columns keep std 1."""
    rows = np.asarray(training_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise DatasetValidationError("fit_scaler needs at least 2 training rows")
    std = rows.std(axis=0)
    return Scaler(mean=rows.mean(axis=0), std=np.where(std > 1e-12, std, 1.0))


def apply_scaler(scaler: Scaler, vector) -> np.ndarray:
    return (np.asarray(vector, dtype=np.float64) - scaler.mean) / scaler.std


def fit_feature_scaler(feature_spec: FeatureSpec, data: ChoiceData, chunk: int = PREDICT_CHUNK) -> Scaler:
    """fit_scaler over every (individual, zone) row of the data, accumulated in chunks."""
    n = data.n_individuals
    if n * data.n_zones < 2:
        raise DatasetValidationError("fit_scaler needs at least 2 training rows")
    dim = feature_spec.input_dim
    total = np.zeros(dim)
    count = 0
    for start in range(0, n, chunk):
        block = feature_tensor(feature_spec, data, np.arange(start, min(start + chunk, n))).reshape(-1, dim)
        total += block.sum(axis=0)
        count += block.shape[0]
    mean = total / count
    squares = np.zeros(dim)
    for start in range(0, n, chunk):
        block = feature_tensor(feature_spec, data, np.arange(start, min(start + chunk, n))).reshape(-1, dim)
        squares += ((block - mean) ** 2).sum(axis=0)
    std = np.sqrt(squares / count)
    return Scaler(mean=mean, std=np.where(std > 1e-12, std, 1.0))


@dataclass(frozen=True)
class NeuralModel:
    """Shared zone-block weights, per-zone ASCs and the fitted feature scaler.

    weights[l] has shape (h_l, h_{l-1}); biases exist for hidden layers only,
    the output layer maps to a scalar without bias.
    """

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    asc: np.ndarray
    scaler: Scaler
    feature_spec: FeatureSpec
    hidden_sizes: Tuple[int, ...]
    output_activation: str = "identity"
    name: str = "DNN"
    train_config: Optional[TrainConfig] = None
    dataset_fingerprint: str = ""
    final_ll: Dict[str, float] = field(default_factory=dict)
    split: Optional[SplitInfo] = None

    model_kind = "neural"

    def __post_init__(self):
        dims = [self.feature_spec.input_dim, *self.hidden_sizes, 1]
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(self.hidden_sizes):
            raise DatasetValidationError("layer count does not match hidden_sizes")
        for l, w in enumerate(self.weights):
            if w.shape != (dims[l + 1], dims[l]):
                raise DatasetValidationError(f"layer {l} weight shape {w.shape}, expected {(dims[l + 1], dims[l])}")
        for l, b in enumerate(self.biases):
            if b.shape != (dims[l + 1],):
                raise DatasetValidationError(f"layer {l} bias shape {b.shape}, expected {(dims[l + 1],)}")

    @property
    def n_zones(self) -> int:
        return self.asc.shape[0]

    def parameters(self) -> List[np.ndarray]:
        """Trainable arrays: weights, then hidden biases, then ASCs."""
        return [*self.weights, *self.biases, self.asc]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "NeuralModel":
        n_w = len(self.weights)
        n_b = len(self.biases)
        return replace(
            self,
            weights=tuple(params[:n_w]),
            biases=tuple(params[n_w:n_w + n_b]),
            asc=params[n_w + n_b],
        )

    def log_probabilities(self, data: ChoiceData) -> np.ndarray:
        n = data.n_individuals
        out = np.empty((n, data.n_zones))
        for start in range(0, n, PREDICT_CHUNK):
            rows = np.arange(start, min(start + PREDICT_CHUNK, n))
            out[rows] = log_softmax_rows(_utilities(self, data, rows))
        return out


def forward_zone_block(model: NeuralModel, scaled_input) -> np.ndarray:
    """Zone-block utility for inputs of shape (..., input_dim); returns shape (...)."""
    a = np.asarray(scaled_input, dtype=np.float64)
    if a.shape[-1] != model.feature_spec.input_dim:
        raise DatasetValidationError(f"input has {a.shape[-1]} features, model expects {model.feature_spec.input_dim}")
    for w, b in zip(model.weights[:-1], model.biases):
        a = np.maximum(a @ w.T + b, 0.0)
    out = (a @ model.weights[-1].T)[..., 0]
    if model.output_activation == "relu":
        out = np.maximum(out, 0.0)
    return out


def _check_zones(model: NeuralModel, data: ChoiceData) -> None:
    if model.n_zones != data.n_zones:
        raise DatasetValidationError(f"model has {model.n_zones} ASCs but data has {data.n_zones} zones")


def _utilities(model: NeuralModel, data: ChoiceData, rows: np.ndarray) -> np.ndarray:
    _check_zones(model, data)
    x = apply_scaler(model.scaler, feature_tensor(model.feature_spec, data, rows))
    utilities = forward_zone_block(model, x) + model.asc[None, :]
    utilities[:, ~data.nonempty] = -np.inf
    return utilities


def model_utilities(model: NeuralModel, individual_row: int, dataset: ChoiceData) -> np.ndarray:
    """V_j = zone block(features of zone j) + ASC_j for every zone; zones without jobs get -inf."""
    return _utilities(model, dataset, np.array([individual_row]))[0]


def predict_probabilities(model: NeuralModel, individual_row: int, dataset: ChoiceData) -> ChoiceProbabilities:
    return softmax(model_utilities(model, individual_row, dataset))


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    asc: np.ndarray

    def as_list(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases, self.asc]


def loss_and_gradients(model: NeuralModel, batch, dataset: ChoiceData) -> Tuple[float, Gradients]:
    """-sum_n w_n ln Pr(chosen_n) over the batch rows, with reverse-mode gradients."""
    rows = np.asarray(batch, dtype=np.int64)
    if rows.size == 0:
        raise DatasetValidationError("empty batch")
    _check_zones(model, dataset)
    chosen = dataset.work[rows]
    if np.any(chosen == NO_CHOICE):
        raise DatasetValidationError("batch contains individuals without an observed work zone")
    w = dataset.weights[rows]

    x = apply_scaler(model.scaler, feature_tensor(model.feature_spec, dataset, rows))
    activations = [x]
    pre_activations = []
    a = x
    for wl, bl in zip(model.weights[:-1], model.biases):
        z = a @ wl.T + bl
        pre_activations.append(z)
        a = np.maximum(z, 0.0)
        activations.append(a)
    out_pre = (a @ model.weights[-1].T)[..., 0]
    out = np.maximum(out_pre, 0.0) if model.output_activation == "relu" else out_pre

    utilities = out + model.asc[None, :]
    utilities[:, ~dataset.nonempty] = -np.inf
    log_p = log_softmax_rows(utilities)
    idx = np.arange(len(rows))
    chosen_log_p = log_p[idx, chosen]
    if not np.all(np.isfinite(chosen_log_p)):
        raise NumericalError("observed choice has probability 0 under the model")
    loss = -float(w @ chosen_log_p)

    d_util = w[:, None] * np.exp(log_p)
    d_util[idx, chosen] -= w
    grad_asc = d_util.sum(axis=0)

    d_out = d_util
    if model.output_activation == "relu":
        d_out = d_out * (out_pre > 0)
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    grad_w[-1] = np.einsum("bj,bjh->h", d_out, activations[-1])[None, :]
    delta = d_out[..., None] * model.weights[-1][0]
    for l in range(len(model.biases) - 1, -1, -1):
        delta = delta * (pre_activations[l] > 0)
        grad_w[l] = np.einsum("bjh,bji->hi", delta, activations[l])
        grad_b[l] = delta.sum(axis=(0, 1))
        if l > 0:
            delta = delta @ model.weights[l]
    return loss, Gradients(weights=grad_w, biases=grad_b, asc=grad_asc)


def add_weight_decay(grads: Gradients, model: NeuralModel, coefficient: float, batch_weight: float) -> Gradients:
    """Gradient of coefficient * batch_weight * sum ||W_l||^2; biases and ASCs are not penalized."""
    if coefficient > 0:
        scale = 2.0 * coefficient * batch_weight
        grads.weights = [g + scale * w for g, w in zip(grads.weights, model.weights)]
    return grads


def neural_log_likelihood(model: NeuralModel, data: ChoiceData) -> float:
    log_p = model.log_probabilities(data)
    return float(data.weights @ log_p[np.arange(data.n_individuals), data.work])


def init_model(feature_spec: FeatureSpec, scaler: Scaler, n_zones: int, config: TrainConfig, rng: np.random.Generator) -> NeuralModel:
    """He-uniform weights, zero biases, zero ASCs."""
    dims = [feature_spec.input_dim, *config.hidden_sizes, 1]
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
    biases = [np.zeros(h) for h in config.hidden_sizes]
    return NeuralModel(
        weights=tuple(weights),
        biases=tuple(biases),
        asc=np.zeros(n_zones),
        scaler=scaler,
        feature_spec=feature_spec,
        hidden_sizes=tuple(config.hidden_sizes),
        output_activation=config.output_activation,
        train_config=config,
    )


def train(
    dataset_train: ChoiceData,
    dataset_val: Optional[ChoiceData],
    feature_spec: FeatureSpec,
    config: TrainConfig,
) -> Tuple[NeuralModel, TrainHistory]:
    """Mini-batch Adam on the weighted negative log-likelihood; returns the final-epoch model.

    weight_decay adds an L2 penalty to the updates only; the recorded
    log-likelihoods are unpenalized.
    """
    n = dataset_train.n_individuals
    if n == 0:
        raise DatasetValidationError("training data is empty")
    rng = np.random.default_rng(config.seed)
    scaler = fit_feature_scaler(feature_spec, dataset_train)
    model = init_model(feature_spec, scaler, dataset_train.n_zones, config, rng)
    state = AdamState.zeros_like(
        model.parameters(), learning_rate=config.learning_rate,
        beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon,
    )
    history = TrainHistory()
    started = time.perf_counter()
    logger.info(
        f"Training {feature_spec.mode} model: {n} observations, {dataset_train.n_zones} zones, "
        f"layers {list(config.hidden_sizes)}, lr {config.learning_rate}, {config.epochs} epochs"
    )

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            batch = order[start:start + config.batch_size]
            try:
                loss, grads = loss_and_gradients(model, batch, dataset_train)
                if not math.isfinite(loss):
                    raise NumericalError(f"loss is {loss}")
            except NumericalError as e:
                norms = ", ".join(f"{np.linalg.norm(p):.3e}" for p in model.parameters())
                raise NumericalError(
                    f"training diverged at epoch {epoch}, batch {batch_index} ({e}); parameter norms [{norms}]"
                ) from e
            grads = add_weight_decay(grads, model, config.weight_decay, float(dataset_train.weights[batch].sum()))
            params, state = adam_step(state, model.parameters(), grads.as_list())
            model = model.with_parameters(params)

        train_ll = neural_log_likelihood(model, dataset_train)
        history.train_ll.append(train_ll)
        if dataset_val is not None and dataset_val.n_individuals:
            history.val_ll.append(neural_log_likelihood(model, dataset_val))
            logger.info(f"Epoch {epoch}/{config.epochs}: train LL {train_ll:.4f}, validation LL {history.val_ll[-1]:.4f}")
        else:
            logger.info(f"Epoch {epoch}/{config.epochs}: train LL {train_ll:.4f}")
        history.final_epoch = epoch

    history.wall_time_s = time.perf_counter() - started
    final_ll = {"train": history.train_ll[-1]}
    if history.val_ll:
        final_ll["validation"] = history.val_ll[-1]
    model = replace(model, dataset_fingerprint=dataset_train.fingerprint, final_ll=final_ll)
    return model, history

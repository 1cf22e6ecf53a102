"""Report tables, distance histograms and the evaluation manifest."""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from dataset import ChoiceData
from dataio import FLOAT_FORMAT, write_json
from errors import DatasetValidationError, IncompatibleModelsError
from eval_metrics import (
    DEFAULT_DRAWS, ChoiceModel, DistanceSample, attribute_choice_correlations, average_loglikelihood,
    closest_to_reference, distance_distribution, individual_attribute_correlations, ks_two_sample,
    null_loglikelihood, sample_choices, segmented_ks, zone_choice_counts,
)
from models import (
    ATTRIBUTES, NL_PARAM_NAMES, AverageLogLikelihood, CorrelationResult, EstimationResult,
    KsResult, Report, SplitInfo, TrainConfig, TrainHistory,
)

logger = logging.getLogger("workloc.report")

SEGMENT_LABELS = {
    "gender": {0: "Male", 1: "Female"},
    "has_car": {1: "Car - Yes", 0: "Car - No"},
}
HISTOGRAM_BINS = 50
DATA_LABEL = "Validation"
TABLE_NAMES = ("results", "pearson-coff", "ks-test", "ks-sex", "ks-car", "ind-pearson")


def write_table(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def estimation_table(result: EstimationResult) -> pd.DataFrame:
    """Parameter rows followed by the likelihood footer."""
    values = result.params.values()
    std = result.std_errors or [np.nan] * len(values)
    t = result.t_values or [np.nan] * len(values)
    rows = [
        {"name": name, "value": values[i], "std_error": std[i], "t_value": t[i]}
        for i, name in enumerate(NL_PARAM_NAMES)
    ]
    if result.t_against_1 is not None:
        rows[NL_PARAM_NAMES.index("lambda")]["t_against_1"] = result.t_against_1
    footer = [
        ("LL(start)", result.ll_start),
        ("LL(beta) training", result.ll_final),
        ("LL(beta) validation", result.ll_validation),
        ("LL(0)", result.ll_null),
        ("rho_squared", result.rho_squared),
        ("observations training", result.n_obs),
        ("observations validation", result.n_validation),
        ("iterations", result.iterations),
        ("converged", int(result.converged)),
    ]
    rows += [{"name": name, "value": np.nan if value is None else value} for name, value in footer]
    return pd.DataFrame(rows, columns=["name", "value", "std_error", "t_value", "t_against_1"])


def history_table(history: TrainHistory) -> pd.DataFrame:
    epochs = range(1, len(history.train_ll) + 1)
    frame = pd.DataFrame({"epoch": list(epochs), "train_ll": history.train_ll})
    frame["val_ll"] = history.val_ll if history.val_ll else np.nan
    return frame


def training_summary_table(
    input_dim: int,
    config: TrainConfig,
    history: TrainHistory,
    train_data: ChoiceData,
    val_data: ChoiceData,
) -> pd.DataFrame:
    """Hyper-parameters and split likelihoods of a neural training run."""
    rows = [
        ("inputs", input_dim),
        ("hidden_layers", len(config.hidden_sizes)),
        ("neurons", " ".join(str(h) for h in config.hidden_sizes)),
        ("learning_rate", config.learning_rate),
        ("epochs", config.epochs),
        ("batch_size", config.batch_size),
        ("weight_decay", config.weight_decay),
        ("output_activation", config.output_activation),
        ("LL(beta) training", history.train_ll[-1]),
        ("LL(beta) validation", history.val_ll[-1] if history.val_ll else np.nan),
        ("LL(0) training", null_loglikelihood(train_data)),
        ("LL(0) validation", null_loglikelihood(val_data) if val_data.n_individuals else np.nan),
        ("observations training", train_data.n_individuals),
        ("observations validation", val_data.n_individuals),
    ]
    return pd.DataFrame(rows, columns=["name", "value"])


@dataclass
class ModelEvaluation:
    """Every comparison statistic of one model against the validation data."""

    name: str
    model_kind: str
    train_ll: AverageLogLikelihood
    val_ll: AverageLogLikelihood
    pearson: Dict[str, CorrelationResult]
    ks: KsResult
    ks_all: KsResult  # draws for every individual against all observed distances
    ks_segments: Dict[str, Dict[int, KsResult]]
    ind_pearson: Dict[str, Optional[CorrelationResult]]
    sample: DistanceSample = field(repr=False)


def evaluate_model(
    model: ChoiceModel,
    train_data: ChoiceData,
    val_data: ChoiceData,
    data_sample: DistanceSample,
    draws: int = DEFAULT_DRAWS,
    seed=0,
    all_data_sample: Optional[DistanceSample] = None,
) -> ModelEvaluation:
    """Statistics of one model; draws are made once for the whole dataset and cut to the validation rows."""
    logger.info(f"Evaluating {model.model_kind} model '{model.name}'")
    full = val_data.dataset
    draws_all = sample_choices(model, full, draws, seed)
    draws_val = draws_all[val_data.rows]
    sample = distance_distribution(draws_val, val_data)
    if all_data_sample is None:
        all_data_sample = distance_distribution(full.work, full)
    return ModelEvaluation(
        name=model.name,
        model_kind=model.model_kind,
        train_ll=average_loglikelihood(model, train_data),
        val_ll=average_loglikelihood(model, val_data),
        pearson=attribute_choice_correlations(zone_choice_counts(draws_val, val_data.n_zones), val_data),
        ks=ks_two_sample(sample.distances, data_sample.distances),
        ks_all=ks_two_sample(distance_distribution(draws_all, full).distances, all_data_sample.distances),
        ks_segments={seg: segmented_ks(sample, data_sample, seg) for seg in SEGMENT_LABELS},
        ind_pearson=individual_attribute_correlations(val_data, sample, skip_constant=True, who=model.name),
        sample=sample,
    )


def _closest_name(reference: float, names: Sequence[str], values: Sequence[float]) -> str:
    return names[closest_to_reference(reference, values)]


def results_table(evals: Sequence[ModelEvaluation]) -> pd.DataFrame:
    """Average LL per split; closest marks the highest value, log-likelihoods being at most 0."""
    names = [e.name for e in evals]
    rows = []
    for split, attr in (("training", "train_ll"), ("validation", "val_ll")):
        for measure in ("weighted", "per_observation"):
            values = [getattr(getattr(e, attr), measure) for e in evals]
            row = {"split": split, "measure": measure, **dict(zip(names, values))}
            row["closest"] = _closest_name(0.0, names, values)
            rows.append(row)
    for split, attr in (("training", "train_ll"), ("validation", "val_ll")):
        rows.append({"split": split, "measure": "observations", **{e.name: getattr(e, attr).n_obs for e in evals}, "closest": ""})
    return pd.DataFrame(rows, columns=["split", "measure", *names, "closest"])


def pearson_table(data_corr: Dict[str, CorrelationResult], evals: Sequence[ModelEvaluation]) -> pd.DataFrame:
    """Job-count vs choice-count correlations: validation data next to each model."""
    names = [e.name for e in evals]
    rows = []
    for attribute, reference in data_corr.items():
        row = {"attribute": attribute, f"{DATA_LABEL}_stat": reference.statistic, f"{DATA_LABEL}_p": reference.p_value}
        for e in evals:
            row[f"{e.name}_stat"] = e.pearson[attribute].statistic
            row[f"{e.name}_p"] = e.pearson[attribute].p_value
        row["closest"] = _closest_name(reference.statistic, names, [e.pearson[attribute].statistic for e in evals])
        rows.append(row)
    columns = ["attribute", f"{DATA_LABEL}_stat", f"{DATA_LABEL}_p"]
    columns += [c for n in names for c in (f"{n}_stat", f"{n}_p")] + ["closest"]
    return pd.DataFrame(rows, columns=columns)


def _ks_rows(results: Sequence[KsResult], names: Sequence[str], segment_label: Optional[str] = None) -> List[dict]:
    prefix = {"segment": segment_label} if segment_label is not None else {}
    statistics = [r.statistic for r in results]
    return [
        {**prefix, "measure": "statistic", **dict(zip(names, statistics)), "closest": _closest_name(0.0, names, statistics)},
        {**prefix, "measure": "p_value", **{n: r.p_value for n, r in zip(names, results)}, "closest": ""},
    ]


def ks_table(evals: Sequence[ModelEvaluation]) -> pd.DataFrame:
    """Distance KS on the validation rows, then on every individual of the dataset."""
    names = [e.name for e in evals]
    rows = []
    for population, attr in (("validation", "ks"), ("all", "ks_all")):
        rows += [{"population": population, **row} for row in _ks_rows([getattr(e, attr) for e in evals], names)]
    return pd.DataFrame(rows, columns=["population", "measure", *names, "closest"])


def ks_segment_table(evals: Sequence[ModelEvaluation], segment: str) -> pd.DataFrame:
    names = [e.name for e in evals]
    rows = []
    for value, label in SEGMENT_LABELS[segment].items():
        rows += _ks_rows([e.ks_segments[segment][value] for e in evals], names, label)
    return pd.DataFrame(rows, columns=["segment", "measure", *names, "closest"])


def ind_pearson_table(data_corr: Dict[str, Optional[CorrelationResult]], evals: Sequence[ModelEvaluation]) -> pd.DataFrame:
    """Attribute code vs commute distance: validation data next to each model's draws."""
    names = [e.name for e in evals]
    rows = []
    for attribute in ATTRIBUTES:
        reference = data_corr.get(attribute)
        row = {
            "attribute": attribute,
            f"{DATA_LABEL}_stat": reference.statistic if reference else np.nan,
            f"{DATA_LABEL}_p": reference.p_value if reference else np.nan,
        }
        candidates, candidate_names = [], []
        for e in evals:
            result = e.ind_pearson.get(attribute)
            row[f"{e.name}_stat"] = result.statistic if result else np.nan
            row[f"{e.name}_p"] = result.p_value if result else np.nan
            if result:
                candidates.append(result.statistic)
                candidate_names.append(e.name)
        row["closest"] = _closest_name(reference.statistic, candidate_names, candidates) if reference and candidates else ""
        rows.append(row)
    columns = ["attribute", f"{DATA_LABEL}_stat", f"{DATA_LABEL}_p"]
    columns += [c for n in names for c in (f"{n}_stat", f"{n}_p")] + ["closest"]
    return pd.DataFrame(rows, columns=columns)


def histogram_edges(pooled: np.ndarray, n_bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """n_bins edges from 0 with the Freedman-Diaconis width of the pooled distances."""
    pooled = np.asarray(pooled, dtype=np.float64)
    width = 0.0
    if pooled.size > 1:
        q75, q25 = np.percentile(pooled, [75, 25])
        width = 2.0 * (q75 - q25) / np.cbrt(pooled.size)
    if not width > 0:
        top = float(pooled.max()) if pooled.size else 0.0
        width = top / n_bins if top > 0 else 1.0
    return width * np.arange(n_bins + 1)


def distance_probabilities(distances: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Share of distances per bin; values past the last edge fall in the last bin."""
    if distances.size == 0:
        return np.zeros(len(edges) - 1)
    counts, _ = np.histogram(np.clip(distances, edges[0], edges[-1]), bins=edges)
    return counts / distances.size


def _add_distance_traces(fig: go.Figure, samples: Dict[str, np.ndarray], edges: np.ndarray, row=None, col=None, legend=True):
    centers = 0.5 * (edges[:-1] + edges[1:])
    for name, distances in samples.items():
        trace = go.Scatter(
            x=centers,
            y=distance_probabilities(distances, edges),
            mode="lines",
            name=name,
            legendgroup=name,
            showlegend=legend,
        )
        if row is None:
            fig.add_trace(trace)
        else:
            fig.add_trace(trace, row=row, col=col)


def distance_figure(samples: Dict[str, DistanceSample], edges: np.ndarray) -> go.Figure:
    fig = go.Figure()
    _add_distance_traces(fig, {name: s.distances for name, s in samples.items()}, edges)
    fig.update_layout(
        title="Distance from home to chosen workplace",
        xaxis=dict(title="Distance (km)"),
        yaxis=dict(title="Probability"),
        width=800,
        height=500,
    )
    return fig


def segmented_distance_figure(samples: Dict[str, DistanceSample], edges: np.ndarray, segment: str) -> go.Figure:
    labels = SEGMENT_LABELS[segment]
    fig = make_subplots(rows=1, cols=len(labels), subplot_titles=list(labels.values()), shared_yaxes=True)
    for col, value in enumerate(labels, start=1):
        _add_distance_traces(
            fig, {name: s.segment(segment, value) for name, s in samples.items()}, edges,
            row=1, col=col, legend=col == 1,
        )
        fig.update_xaxes(title_text="Distance (km)", row=1, col=col)
    fig.update_yaxes(title_text="Probability", row=1, col=1)
    fig.update_layout(title=f"Distance from home to chosen workplace by {segment}", width=1100, height=500)
    return fig


def write_figure(fig: go.Figure, path: Path) -> bool:
    """SVG export through kaleido; a failed export is logged and skipped."""
    try:
        fig.write_image(str(path), format="svg")
    except Exception as e:
        logger.warning(f"Could not export {path.name}: {e}")
        if path.exists():
            path.unlink()
        return False
    return True


def check_compatible(models: Sequence[ChoiceModel], data: ChoiceData, split: SplitInfo) -> None:
    """Reject models fitted on other data before anything is written."""
    fingerprint = data.fingerprint
    for model in models:
        if model.dataset_fingerprint and model.dataset_fingerprint != fingerprint:
            raise IncompatibleModelsError(
                f"model '{model.name}' was fitted on dataset {model.dataset_fingerprint[:12]}, "
                f"not {fingerprint[:12]}"
            )
        recorded = _recorded_split(model)
        if recorded is not None and recorded != split:
            logger.warning(
                f"model '{model.name}' was fitted with split {recorded.fraction}/seed {recorded.seed}; "
                f"evaluating with {split.fraction}/seed {split.seed}"
            )
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise IncompatibleModelsError(f"model names must be unique, got {names}")


def _recorded_split(model) -> Optional[SplitInfo]:
    result = getattr(model, "result", None)
    if result is not None:
        return result.split
    return getattr(model, "split", None)


def build_report(
    models: Sequence[ChoiceModel],
    train_data: ChoiceData,
    val_data: ChoiceData,
    out_dir: Path,
    split: SplitInfo,
    draws: int = DEFAULT_DRAWS,
    seed=0,
    model_paths: Sequence[str] = (),
    timestamps: bool = False,
) -> Report:
    """Evaluate every model, write the six tables and the histograms, then the manifest."""
    check_compatible(models, val_data, split)
    if not val_data.n_individuals:
        raise DatasetValidationError("validation split is empty")

    data_sample = distance_distribution(val_data.work, val_data)
    data_pearson = attribute_choice_correlations(zone_choice_counts(val_data.work, val_data.n_zones), val_data)
    data_ind = individual_attribute_correlations(val_data, data_sample, skip_constant=True, who=DATA_LABEL)
    full = val_data.dataset
    all_data_sample = distance_distribution(full.work, full)
    evals = [evaluate_model(m, train_data, val_data, data_sample, draws, seed, all_data_sample) for m in models]

    tables = {
        "results": results_table(evals),
        "pearson-coff": pearson_table(data_pearson, evals),
        "ks-test": ks_table(evals),
        "ks-sex": ks_segment_table(evals, "gender"),
        "ks-car": ks_segment_table(evals, "has_car"),
        "ind-pearson": ind_pearson_table(data_ind, evals),
    }

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = Report()
    for name, frame in tables.items():
        filename = f"{name}.csv"
        write_table(frame, out_dir / filename)
        report.tables[name] = filename

    samples = {DATA_LABEL: data_sample, **{e.name: e.sample for e in evals}}
    edges = histogram_edges(np.concatenate([s.distances for s in samples.values()]))
    figures = {
        "distance.svg": distance_figure(samples, edges),
        "distance-gender.svg": segmented_distance_figure(samples, edges, "gender"),
        "distance-car.svg": segmented_distance_figure(samples, edges, "has_car"),
    }
    for filename, fig in figures.items():
        if write_figure(fig, out_dir / filename):
            report.figures.append(filename)

    report.metadata = {
        "models": [
            {"name": e.name, "model_kind": e.model_kind, "path": str(p) if p else None}
            for e, p in zip(evals, list(model_paths) + [None] * (len(evals) - len(model_paths)))
        ],
        "dataset_fingerprint": val_data.fingerprint,
        "split": split.model_dump(),
        "seed": seed,
        "draws_per_individual": draws,
        "observations": {"training": train_data.n_individuals, "validation": val_data.n_individuals},
    }
    if timestamps:
        report.metadata["created_at"] = datetime.now().isoformat()
    write_json(report.model_dump(), out_dir / "manifest.json")
    logger.info(f"Wrote {len(report.tables)} tables and {len(report.figures)} figures to {out_dir}")
    return report

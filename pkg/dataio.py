"""Dataset file formats and model persistence.

zones.csv and individuals.csv are plain CSV with 17 significant digits; the
accessibility matrix is CSV or the WLAC1 binary layout (magic, u64 N, u64 J,
row-major little-endian float64). Models are JSON documents dispatched on
their top-level model_kind.
"""

import base64
import json
import logging
import struct
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from dataset import Dataset, build_dataset, remap_zone_ids, zone_file_ids
from errors import DatasetValidationError
from models import (
    ATTRIBUTES, OCCUPATIONS, AccessibilityMatrix, EstimationResult, FeatureSpec, Individual,
    NlParams, Oracle, SplitInfo, TrainConfig, Zone,
)
from nested_logit import NestedLogitModel
from neural_choice import NeuralModel, Scaler
from synthgen import OracleModel

logger = logging.getLogger("workloc.dataio")

PathLike = Union[str, Path]

FLOAT_FORMAT = "%.17g"
WLAC_MAGIC = b"WLAC1"
WLAC_HEADER = struct.Struct("<QQ")

JOB_COLUMNS = [f"jobs_{k}" for k in OCCUPATIONS]
ZONE_COLUMNS = ["zone_id", "x_km", "y_km", *JOB_COLUMNS]
INDIVIDUAL_COLUMNS = ["person_id", "home_zone", "work_zone", *ATTRIBUTES, "weight"]

ZONES_FILE = "zones.csv"
INDIVIDUALS_FILE = "individuals.csv"
ACCESSIBILITY_BIN = "accessibility.bin"
ACCESSIBILITY_CSV = "accessibility.csv"


def _read_table(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    if not path.is_file():
        raise DatasetValidationError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (ValueError, pd.errors.ParserError) as e:
        raise DatasetValidationError(f"{path}: {e}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DatasetValidationError(f"{path}: missing columns {missing}")
    return frame


def _parse_rows(path: Path, frame: pd.DataFrame, build: Callable[[Dict[str, str]], Any]) -> list:
    parsed = []
    for index, record in enumerate(frame.to_dict(orient="records")):
        try:
            parsed.append(build(record))
        except (ValidationError, ValueError) as e:
            # header is line 1
            raise DatasetValidationError(f"{path}, line {index + 2}: {e}") from e
    return parsed


def load_zones(path: PathLike) -> List[Zone]:
    path = Path(path)
    frame = _read_table(path, ZONE_COLUMNS)

    def build(record: Dict[str, str]) -> Zone:
        return Zone(
            zone_id=record["zone_id"],
            centroid_x_km=record["x_km"],
            centroid_y_km=record["y_km"],
            jobs=tuple(int(record[c]) for c in JOB_COLUMNS),
        )

    zones = _parse_rows(path, frame, build)
    ids = [z.zone_id for z in zones]
    if len(set(ids)) != len(ids):
        raise DatasetValidationError(f"{path}: duplicate zone_id")
    return zones


def load_individuals(path: PathLike) -> List[Individual]:
    path = Path(path)
    frame = _read_table(path, INDIVIDUAL_COLUMNS)

    def build(record: Dict[str, str]) -> Individual:
        fields = {c: record[c] for c in INDIVIDUAL_COLUMNS}
        if fields["work_zone"].strip() == "":
            fields["work_zone"] = None
        return Individual(**fields)

    individuals = _parse_rows(path, frame, build)
    ids = [p.person_id for p in individuals]
    if len(set(ids)) != len(ids):
        raise DatasetValidationError(f"{path}: duplicate person_id")
    return individuals


def load_accessibility(path: PathLike) -> AccessibilityMatrix:
    """Binary WLAC1 when the file starts with the magic, CSV otherwise."""
    path = Path(path)
    if not path.is_file():
        raise DatasetValidationError(f"{path}: file not found")
    with open(path, "rb") as f:
        head = f.read(len(WLAC_MAGIC))
    if head == WLAC_MAGIC:
        return _load_accessibility_binary(path)
    try:
        frame = pd.read_csv(path, header=None, dtype=np.float64, float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as e:
        raise DatasetValidationError(f"{path}: {e}") from e
    try:
        return AccessibilityMatrix(values=frame.to_numpy())
    except ValidationError as e:
        raise DatasetValidationError(f"{path}: {e}") from e


def _load_accessibility_binary(path: Path) -> AccessibilityMatrix:
    raw = path.read_bytes()
    offset = len(WLAC_MAGIC)
    if len(raw) < offset + WLAC_HEADER.size:
        raise DatasetValidationError(f"{path}: truncated header")
    n, j = WLAC_HEADER.unpack_from(raw, offset)
    offset += WLAC_HEADER.size
    expected = offset + 8 * n * j
    if len(raw) != expected:
        raise DatasetValidationError(f"{path}: {len(raw)} bytes, expected {expected} for {n}x{j}")
    values = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(n, j).astype(np.float64)
    try:
        return AccessibilityMatrix(values=values)
    except ValidationError as e:
        raise DatasetValidationError(f"{path}: {e}") from e


def save_zones(zones: Sequence[Zone], path: PathLike) -> None:
    ids = zone_file_ids(zones)
    rows = [[int(i), z.centroid_x_km, z.centroid_y_km, *z.jobs] for i, z in zip(ids, zones)]
    pd.DataFrame(rows, columns=ZONE_COLUMNS).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def save_individuals(individuals: Sequence[Individual], path: PathLike, zone_ids: Optional[np.ndarray] = None) -> None:
    """zone_ids translates dense home/work indices back to file ids."""
    frame = pd.DataFrame(
        [[getattr(p, c) for c in INDIVIDUAL_COLUMNS] for p in individuals], columns=INDIVIDUAL_COLUMNS
    )
    frame["work_zone"] = frame["work_zone"].astype("Int64")
    if zone_ids is not None:
        frame["home_zone"] = zone_ids[frame["home_zone"].to_numpy(dtype=np.int64)]
        present = frame["work_zone"].notna()
        frame.loc[present, "work_zone"] = zone_ids[frame.loc[present, "work_zone"].to_numpy(dtype=np.int64)]
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def save_accessibility(matrix: AccessibilityMatrix, path: PathLike, binary: bool = True) -> None:
    values = matrix.values
    if binary:
        n, j = values.shape
        with open(path, "wb") as f:
            f.write(WLAC_MAGIC)
            f.write(WLAC_HEADER.pack(n, j))
            f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    else:
        pd.DataFrame(values).to_csv(path, header=False, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def load_dataset(data_dir: PathLike) -> Dataset:
    data_dir = Path(data_dir)
    access_path = data_dir / ACCESSIBILITY_BIN
    if not access_path.is_file():
        access_path = data_dir / ACCESSIBILITY_CSV
    zones, individuals = remap_zone_ids(
        load_zones(data_dir / ZONES_FILE), load_individuals(data_dir / INDIVIDUALS_FILE)
    )
    dataset = build_dataset(zones, individuals, load_accessibility(access_path))
    logger.info(f"Loaded {dataset.n_individuals} individuals and {dataset.n_zones} zones from {data_dir}")
    return dataset


def save_dataset(dataset: Dataset, data_dir: PathLike, binary: bool = True) -> List[Path]:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        data_dir / ZONES_FILE,
        data_dir / INDIVIDUALS_FILE,
        data_dir / (ACCESSIBILITY_BIN if binary else ACCESSIBILITY_CSV),
    ]
    save_zones(dataset.zones, paths[0])
    save_individuals(dataset.individuals, paths[1], zone_file_ids(dataset.zones))
    save_accessibility(dataset.accessibility, paths[2], binary=binary)
    return paths


def encode_array(arr: np.ndarray) -> Dict[str, Any]:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"dtype": "<f8", "shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(obj: Dict[str, Any]) -> np.ndarray:
    if obj.get("dtype") != "<f8":
        raise DatasetValidationError(f"unsupported array dtype {obj.get('dtype')!r}")
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def write_json(payload: Dict[str, Any], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def model_to_dict(model) -> Dict[str, Any]:
    kind = model.model_kind
    payload: Dict[str, Any] = {"model_kind": kind, "name": model.name, "dataset_fingerprint": model.dataset_fingerprint}
    if kind == "nested_logit":
        if model.result is not None:
            payload["result"] = model.result.model_dump(mode="json")
        else:
            payload["params"] = model.params.model_dump(mode="json")
    elif kind == "neural":
        payload.update(
            feature_spec=model.feature_spec.model_dump(mode="json"),
            hidden_sizes=list(model.hidden_sizes),
            output_activation=model.output_activation,
            train_config=model.train_config.model_dump(mode="json") if model.train_config else None,
            final_ll=dict(model.final_ll),
            split=model.split.model_dump(mode="json") if model.split else None,
            scaler={"mean": encode_array(model.scaler.mean), "std": encode_array(model.scaler.std)},
            weights=[encode_array(w) for w in model.weights],
            biases=[encode_array(b) for b in model.biases],
            asc=encode_array(model.asc),
        )
    elif kind == "oracle":
        payload["oracle"] = model.oracle.model_dump(mode="json")
    else:
        raise DatasetValidationError(f"cannot save model of kind {kind!r}")
    return payload


def save_model(model, path: PathLike) -> None:
    write_json(model_to_dict(model), path)
    logger.info(f"Saved {model.model_kind} model '{model.name}' to {path}")


def model_from_dict(payload: Dict[str, Any]):
    kind = payload.get("model_kind")
    name = payload.get("name", "")
    fingerprint = payload.get("dataset_fingerprint", "")
    if kind == "nested_logit":
        if "result" in payload:
            result = EstimationResult.model_validate(payload["result"])
            return NestedLogitModel(result.params, result=result, name=name or "DCM")
        return NestedLogitModel(NlParams.model_validate(payload["params"]), name=name or "DCM")
    if kind == "neural":
        config = payload.get("train_config")
        return NeuralModel(
            weights=tuple(decode_array(w) for w in payload["weights"]),
            biases=tuple(decode_array(b) for b in payload["biases"]),
            asc=decode_array(payload["asc"]),
            scaler=Scaler(mean=decode_array(payload["scaler"]["mean"]), std=decode_array(payload["scaler"]["std"])),
            feature_spec=FeatureSpec.model_validate(payload["feature_spec"]),
            hidden_sizes=tuple(payload["hidden_sizes"]),
            output_activation=payload.get("output_activation", "identity"),
            name=name or "DNN",
            train_config=TrainConfig.model_validate(config) if config else None,
            dataset_fingerprint=fingerprint,
            final_ll=dict(payload.get("final_ll", {})),
            split=SplitInfo.model_validate(payload["split"]) if payload.get("split") else None,
        )
    if kind == "oracle":
        return OracleModel(Oracle.model_validate(payload["oracle"]), name=name or "Oracle", dataset_fingerprint=fingerprint)
    raise DatasetValidationError(f"unknown model_kind {kind!r}")


def load_model(path: PathLike):
    path = Path(path)
    if not path.is_file():
        raise DatasetValidationError(f"{path}: file not found")
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetValidationError(f"{path}, line {e.lineno}: {e.msg}") from e
    try:
        model = model_from_dict(payload)
    except DatasetValidationError:
        raise
    except (ValidationError, KeyError, TypeError, ValueError) as e:
        raise DatasetValidationError(f"{path}: invalid {payload.get('model_kind')} model: {e}") from e
    logger.debug(f"Loaded {model.model_kind} model '{model.name}' from {path}")
    return model

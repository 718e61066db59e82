"""Variable schema, CSV ingestion, [0, 1] calibration and train/val/test splits.

The default schema holds the 18 crash variables: one ordinal severity outcome,
eight coded treatments and nine continuous confounders. Codes start at 0, so
an ordinal code ``c`` with ``K`` categories calibrates to ``c / (K - 1)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError

OUTCOME, TREATMENT, CONFOUNDER = "outcome", "treatment", "confounder"
CONTINUOUS, ORDINAL, BINARY = "continuous", "ordinal", "binary"

RECORD_ID = "record_id"


@dataclass(frozen=True)
class VariableSpec:
    name: str
    role: str
    kind: str
    levels: int | None = None
    bounds: tuple[float, float] | None = None
    alias: str = ""
    # Reference moments of the raw variable, used by the synthetic generator.
    mean: float | None = None
    std: float | None = None

    def __post_init__(self):
        if self.role not in (OUTCOME, TREATMENT, CONFOUNDER):
            raise ContractError(f"{self.name}: unknown role {self.role!r}")
        if self.kind not in (CONTINUOUS, ORDINAL, BINARY):
            raise ContractError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == CONTINUOUS:
            if self.bounds is not None and not self.bounds[0] < self.bounds[1]:
                raise ContractError(f"{self.name}: bounds must satisfy min < max")
        else:
            if self.levels is None or self.levels < 2:
                raise ContractError(f"{self.name}: coded variables need levels >= 2")
            if self.kind == BINARY and self.levels != 2:
                raise ContractError(f"{self.name}: binary variables have exactly 2 levels")
        if self.role == OUTCOME and (self.kind != ORDINAL or self.levels != 4):
            raise ContractError("the outcome must be ordinal with 4 levels")

    @property
    def coded(self) -> bool:
        return self.kind != CONTINUOUS

    @property
    def key(self) -> str:
        return self.alias or self.name


def _t(name, alias, levels, mean, std):
    kind = BINARY if levels == 2 else ORDINAL
    return VariableSpec(name, TREATMENT, kind, levels=levels, alias=alias, mean=mean, std=std)


def _c(name, alias, lo, hi, mean, std):
    return VariableSpec(name, CONFOUNDER, CONTINUOUS, bounds=(lo, hi), alias=alias, mean=mean, std=std)


DEFAULT_SCHEMA: tuple[VariableSpec, ...] = (
    VariableSpec("Crash severity level", OUTCOME, ORDINAL, levels=4, alias="severity", mean=0.56, std=0.78),
    _t("Lighting condition", "lighting", 4, 2.29, 1.10),
    _t("Control device condition", "control_device", 3, 0.49, 0.86),
    _t("Weather condition", "weather", 3, 1.84, 0.44),
    _t("Improper turning involvement", "improper_turning", 2, 0.17, 0.38),
    _t("Alcohol or drug involvement", "alcohol_drug", 2, 0.07, 0.25),
    _t("Pedestrian involvement", "pedestrian", 2, 0.03, 0.18),
    _t("Cyclist involvement", "cyclist", 2, 0.02, 0.13),
    _t("Motorcyclist involvement", "motorcyclist", 2, 0.03, 0.18),
    _c("Population density", "population_density", 0.02, 59709.71, 2573.91, 3272.42),
    _c("Mean household income", "income", 7709.0, 437686.0, 76516.76, 42054.29),
    _c("Minority percentage", "minority", 0.0, 100.0, 44.52, 20.27),
    _c("Service sector job proportion", "service_jobs", 0.0, 100.0, 58.68, 9.64),
    _c("Industrial sector job proportion", "industrial_jobs", 0.0, 92.50, 16.59, 7.15),
    _c("Retail trade job proportion", "retail_jobs", 0.0, 100.0, 14.65, 5.19),
    _c("Transportation/warehousing job proportion", "transport_jobs", 0.0, 30.04, 6.13, 3.95),
    _c("Average road segment length", "segment_length", 51.60, 2913.03, 247.19, 359.15),
    _c("Intersection density", "intersection_density", 0.02, 168.88, 36.00, 23.46),
)

# Accepted as an extra confounder column; not part of the default schema.
WEEKDAY_TYPE = VariableSpec("Weekday Type", CONFOUNDER, ORDINAL, levels=7, alias="weekday")

PERCENT_UNITS = {
    "Minority percentage",
    "Service sector job proportion",
    "Industrial sector job proportion",
    "Retail trade job proportion",
    "Transportation/warehousing job proportion",
}


def validate_schema(schema: Sequence[VariableSpec]) -> None:
    names = [v.name for v in schema]
    if len(set(names)) != len(names):
        raise ContractError("duplicate variable names in schema")
    keys = [v.alias for v in schema if v.alias]
    if len(set(keys)) != len(keys):
        raise ContractError("duplicate variable aliases in schema")
    if sum(v.role == OUTCOME for v in schema) != 1:
        raise ContractError("schema needs exactly one outcome variable")
    if not any(v.role == TREATMENT for v in schema):
        raise ContractError("schema needs at least one treatment variable")
    for v in schema:
        if v.role == TREATMENT and not v.coded:
            raise ContractError(f"treatment {v.name} must be coded (ordinal or binary)")


def find_variable(schema: Sequence[VariableSpec], key: str, role: str | None = None) -> VariableSpec:
    """Look a variable up by exact name or alias."""
    for v in schema:
        if (v.name == key or v.alias == key) and (role is None or v.role == role):
            return v
    what = f"{role} variable" if role else "variable"
    raise ContractError(f"unknown {what} {key!r}")


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationSpec:
    kind: str
    min: float | None = None
    max: float | None = None
    K: int | None = None

    def apply(self, values):
        if self.kind == CONTINUOUS:
            return calibrate_continuous(values, self.min, self.max)
        return calibrate_ordinal(values, self.K)

    def to_dict(self) -> dict:
        if self.kind == CONTINUOUS:
            return {"kind": CONTINUOUS, "min": self.min, "max": self.max}
        return {"kind": ORDINAL, "K": self.K}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationSpec":
        if d["kind"] == CONTINUOUS:
            return cls(CONTINUOUS, min=float(d["min"]), max=float(d["max"]))
        return cls(ORDINAL, K=int(d["K"]))


def calibrate_continuous(x, min: float, max: float):
    """Min-max scale ``x`` into [0, 1]; values outside ``[min, max]`` are clamped."""
    if not min < max:
        raise ContractError(f"degenerate calibration range: min={min!r} >= max={max!r}")
    scaled = (np.asarray(x, dtype=float) - min) / (max - min)
    out = np.clip(scaled, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def calibrate_ordinal(code, K: int):
    """Map codes 0..K-1 onto evenly spaced points of [0, 1]."""
    if K is None or K < 2:
        raise ContractError(f"ordinal calibration needs K >= 2, got {K!r}")
    arr = np.asarray(code)
    if np.any(arr < 0) or np.any(arr > K - 1) or np.any(arr != np.round(arr)):
        raise ContractError(f"ordinal code outside 0..{K - 1}: {code!r}")
    out = arr.astype(float) / (K - 1)
    return float(out) if out.ndim == 0 else out


def fit_calibration(schema: Sequence[VariableSpec], treatments: np.ndarray,
                    confounders: np.ndarray) -> dict[str, CalibrationSpec]:
    calib: dict[str, CalibrationSpec] = {}
    for j, v in enumerate(v for v in schema if v.role == TREATMENT):
        calib[v.name] = CalibrationSpec(ORDINAL, K=v.levels)
    for j, v in enumerate(v for v in schema if v.role == CONFOUNDER):
        if v.coded:
            calib[v.name] = CalibrationSpec(ORDINAL, K=v.levels)
            continue
        col = confounders[:, j]
        lo, hi = float(col.min()), float(col.max())
        if not lo < hi:
            # degenerate sample (e.g. a single record): widen to the schema range
            if v.bounds is not None:
                lo, hi = min(lo, v.bounds[0]), max(hi, v.bounds[1])
            if not lo < hi:
                hi = lo + 1.0
        calib[v.name] = CalibrationSpec(CONTINUOUS, min=lo, max=hi)
    return calib


# --------------------------------------------------------------------------
# records and datasets


@dataclass(frozen=True)
class CrashRecord:
    record_id: int
    outcome: int
    treatments: tuple[int, ...]
    confounders: tuple[float, ...]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: tuple[VariableSpec, ...]
    record_ids: np.ndarray
    outcome: np.ndarray
    treatments: np.ndarray
    confounders: np.ndarray
    calibration: dict[str, CalibrationSpec] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "record_ids", _frozen(np.asarray(self.record_ids, dtype=np.int64)))
        object.__setattr__(self, "outcome", _frozen(np.asarray(self.outcome, dtype=np.int64)))
        t = np.asarray(self.treatments, dtype=np.int64).reshape(len(self.record_ids), -1)
        x = np.asarray(self.confounders, dtype=float).reshape(len(self.record_ids), -1)
        object.__setattr__(self, "treatments", _frozen(t))
        object.__setattr__(self, "confounders", _frozen(x))
        if len(np.unique(self.record_ids)) != len(self.record_ids):
            raise DataError("record ids must be unique")
        if not self.calibration and self.n:
            object.__setattr__(self, "calibration",
                               fit_calibration(self.schema, self.treatments, self.confounders))
        names = {v.name for v in self.schema if v.role != OUTCOME}
        if self.calibration and set(self.calibration) != names:
            raise ContractError("calibration must cover every non-outcome variable exactly once")

    @property
    def n(self) -> int:
        return len(self.record_ids)

    def __len__(self) -> int:
        return self.n

    @property
    def outcome_spec(self) -> VariableSpec:
        return next(v for v in self.schema if v.role == OUTCOME)

    @property
    def treatment_specs(self) -> tuple[VariableSpec, ...]:
        return tuple(v for v in self.schema if v.role == TREATMENT)

    @property
    def confounder_specs(self) -> tuple[VariableSpec, ...]:
        return tuple(v for v in self.schema if v.role == CONFOUNDER)

    @property
    def records(self) -> list[CrashRecord]:
        return [self.record(i) for i in range(self.n)]

    def record(self, i: int) -> CrashRecord:
        return CrashRecord(int(self.record_ids[i]), int(self.outcome[i]),
                           tuple(int(v) for v in self.treatments[i]),
                           tuple(float(v) for v in self.confounders[i]))

    def calibrate_confounders(self, x: np.ndarray | None = None) -> np.ndarray:
        x = self.confounders if x is None else np.asarray(x, dtype=float)
        cols = [self.calibration[v.name].apply(x[..., j]) for j, v in enumerate(self.confounder_specs)]
        return np.stack(cols, axis=-1).astype(float)

    def calibrate_treatments(self, t: np.ndarray | None = None) -> np.ndarray:
        t = self.treatments if t is None else np.asarray(t)
        cols = [self.calibration[v.name].apply(t[..., j]) for j, v in enumerate(self.treatment_specs)]
        return np.stack(cols, axis=-1).astype(float)

    def subset(self, idx, calibration: dict[str, CalibrationSpec] | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.schema, self.record_ids[idx], self.outcome[idx], self.treatments[idx],
                       self.confounders[idx], calibration=dict(calibration or self.calibration))

    def with_calibration(self, calibration: dict[str, CalibrationSpec]) -> "Dataset":
        return replace(self, calibration=dict(calibration))

    def index_of(self, record_ids: Iterable[int]) -> np.ndarray:
        lookup = {int(r): i for i, r in enumerate(self.record_ids)}
        try:
            return np.array([lookup[int(r)] for r in record_ids], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"unknown record id {e.args[0]}") from None


def calibrate_record(record: CrashRecord, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Calibrated (confounder, treatment) vectors of one record, in schema order."""
    x = np.array(record.confounders, dtype=float)
    t = np.array(record.treatments)
    if x.shape != (len(dataset.confounder_specs),) or t.shape != (len(dataset.treatment_specs),):
        raise ContractError("record does not conform to the dataset schema")
    return dataset.calibrate_confounders(x), dataset.calibrate_treatments(t)


# --------------------------------------------------------------------------
# CSV


def _parse_code(cell: str, v: VariableSpec, where: str) -> int:
    try:
        val = float(cell)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {cell!r} in column {v.name!r}") from None
    if not math.isfinite(val) or val != int(val):
        raise DataError(f"{where}: column {v.name!r} needs an integer code, got {cell!r}")
    code = int(val)
    if not 0 <= code <= v.levels - 1:
        raise DataError(f"{where}: {v.name!r} code {code} outside valid range 0-{v.levels - 1}")
    return code


def _parse_real(cell: str, v: VariableSpec, where: str) -> float:
    try:
        val = float(cell)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {cell!r} in column {v.name!r}") from None
    if not math.isfinite(val):
        raise DataError(f"{where}: non-finite value in column {v.name!r}")
    if val < 0:
        raise DataError(f"{where}: {v.name!r} must be non-negative, got {val!r}")
    if v.name in PERCENT_UNITS and val > 100:
        raise DataError(f"{where}: percentage {v.name!r} above 100: {val!r}")
    return val


def read_csv_rows(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Header and data rows of a CSV, skipping leading ``#`` metadata lines.

    Rows are returned with their 1-based line numbers for error messages.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        start += 1
    reader = csv.reader(lines[start:])
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty file (no header row)") from None
    rows = [(start + i + 2, row) for i, row in enumerate(reader) if row]
    return header, rows


def load_dataset(path: str | Path, schema: Sequence[VariableSpec] = DEFAULT_SCHEMA) -> Dataset:
    validate_schema(schema)
    header, rows = read_csv_rows(path)
    missing = [v.name for v in schema if v.name not in header]
    if missing:
        raise DataError(f"{path}: missing column(s): {', '.join(repr(m) for m in missing)}")
    if not rows:
        raise DataError(f"{path}: empty file (no data rows)")
    col = {name: i for i, name in enumerate(header)}
    has_id = RECORD_ID in col
    ids, ys, ts, xs = [], [], [], []
    treat = [v for v in schema if v.role == TREATMENT]
    conf = [v for v in schema if v.role == CONFOUNDER]
    out = next(v for v in schema if v.role == OUTCOME)
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"{path} line {line}: expected {len(header)} cells, got {len(row)}")
        where = f"{path} line {line}"
        if has_id:
            try:
                ids.append(int(row[col[RECORD_ID]]))
            except ValueError:
                raise DataError(f"{where}: bad record_id {row[col[RECORD_ID]]!r}") from None
        else:
            ids.append(len(ids))
        ys.append(_parse_code(row[col[out.name]], out, where))
        ts.append([_parse_code(row[col[v.name]], v, where) for v in treat])
        xs.append([_parse_code(row[col[v.name]], v, where) if v.coded else
                   _parse_real(row[col[v.name]], v, where) for v in conf])
    return Dataset(tuple(schema), ids, ys, ts, xs)


def fmt_float(x: float) -> str:
    return repr(float(x))


def dataset_columns(dataset: Dataset) -> tuple[list[str], list[list[str]]]:
    header = [RECORD_ID] + [v.name for v in dataset.schema]
    treat_idx = {v.name: j for j, v in enumerate(dataset.treatment_specs)}
    conf_idx = {v.name: j for j, v in enumerate(dataset.confounder_specs)}
    rows = []
    for i in range(dataset.n):
        row = [str(int(dataset.record_ids[i]))]
        for v in dataset.schema:
            if v.role == OUTCOME:
                row.append(str(int(dataset.outcome[i])))
            elif v.role == TREATMENT:
                row.append(str(int(dataset.treatments[i, treat_idx[v.name]])))
            else:
                val = dataset.confounders[i, conf_idx[v.name]]
                row.append(str(int(val)) if v.coded else fmt_float(val))
        rows.append(row)
    return header, rows


def write_csv(path: str | Path, header: list[str], rows: Iterable[list[str]],
              comments: Sequence[str] = ()) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_dataset(dataset: Dataset, path: str | Path, comments: Sequence[str] = ()) -> None:
    header, rows = dataset_columns(dataset)
    write_csv(path, header, rows, comments)


# --------------------------------------------------------------------------
# splitting


def split_indices(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[np.ndarray, ...]:
    """Seeded permutation cut into (train, val, test) index arrays.

    Validation and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ContractError(f"ratios must be three positive numbers, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must sum to 1, got {sum(ratios)!r}")
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ContractError(
            f"split of N={n} with ratios {tuple(ratios)} leaves an empty part "
            f"(sizes {n_train}, {n_val}, {n_test})")
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split_dataset(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(dataset.n, ratios, seed)
    train = dataset.subset(tr)
    calib = fit_calibration(dataset.schema, train.treatments, train.confounders)
    return (train.with_calibration(calib), dataset.subset(va, calib), dataset.subset(te, calib))

"""CSV ingestion, validation and dataset emission.

Schemas (header row required, column order fixed):

- outcomes: ``unit,time,value`` (empty ``value`` marks a missing cell)
- unit covariates: ``unit,name,value``; unit-time covariates: ``unit,time,name,value``
- treatment: ``unit,t0`` with ``t0`` the last untreated period
- intensity: ``unit,time,intensity``

Unit identifiers are read as strings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .panel import (
    CovariateSet,
    PanelError,
    PanelMatrix,
    PreprocessConfig,
    TreatmentPlan,
    preprocess_with_report,
)

PathLike = Union[str, Path]

OUTCOME_COLUMNS = ("unit", "time", "value")
COVARIATE_COLUMNS = ("unit", "name", "value")
UNIT_TIME_COVARIATE_COLUMNS = ("unit", "time", "name", "value")
TREATMENT_COLUMNS = ("unit", "t0")
INTENSITY_COLUMNS = ("unit", "time", "intensity")


class SchemaError(PanelError):
    """A CSV file does not match its documented schema."""


@dataclass
class ValidationReport:
    n_units: int = 0
    n_periods: int = 0
    n_treated: int = 0
    dropped_units: list = field(default_factory=list)
    imputed_cells: int = 0
    imputed_by_unit: dict = field(default_factory=dict)
    intensity_zero_filled: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    panel: PanelMatrix
    plan: Optional[TreatmentPlan] = None
    covariates: Optional[CovariateSet] = None
    intensity: Optional[np.ndarray] = None
    report: ValidationReport = field(default_factory=ValidationReport)


def _line(idx: int) -> int:
    # header is line 1
    return int(idx) + 2


def _to_float(text: str) -> float:
    # Python's float() is correctly rounded, so written values read back exactly
    try:
        return float(text)
    except ValueError:
        return np.nan


def read_table(path: PathLike, columns: Sequence[str], numeric: Sequence[str] = (),
               integer: Sequence[str] = (), optional: Sequence[str] = ()) -> pd.DataFrame:
    """Read a CSV, check its header and parse typed columns.

    Errors name the file, the column and the 1-based line number. Columns in
    ``optional`` may hold empty strings, which parse to NaN.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: file is empty") from None
    got = [c.strip() for c in df.columns]
    if got != list(columns):
        for k, want in enumerate(columns):
            if k >= len(got) or got[k] != want:
                have = got[k] if k < len(got) else "<none>"
                raise SchemaError(f"{path}: line 1: expected column {want!r} at position {k + 1}, found {have!r}")
        raise SchemaError(f"{path}: line 1: unexpected extra column {got[len(columns)]!r}")
    df.columns = got
    df = df.apply(lambda c: c.str.strip())
    for col in list(numeric) + list(integer):
        raw = df[col]
        empty = raw == ""
        parsed = raw.map(_to_float)
        bad = parsed.isna() & ~empty
        if col not in optional:
            bad |= empty
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(f"{path}: line {_line(i)}: column {col!r} has invalid value {raw.iloc[i]!r}")
        if col in integer:
            frac = parsed.notna() & (parsed != np.round(parsed))
            if frac.any():
                i = int(np.flatnonzero(frac.to_numpy())[0])
                raise SchemaError(f"{path}: line {_line(i)}: column {col!r} must be an integer, got {raw.iloc[i]!r}")
            parsed = parsed.astype("Int64")
        df[col] = parsed
    return df


def _check_duplicates(df: pd.DataFrame, keys: Sequence[str], path: PathLike) -> None:
    dup = df.duplicated(list(keys))
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        row = tuple(df[k].iloc[i] for k in keys)
        shown = ", ".join(repr(v) if isinstance(v, str) else str(v) for v in row)
        raise SchemaError(f"{path}: line {_line(i)}: duplicate ({', '.join(keys)}) row ({shown})")


def _unknown(units, known, path) -> None:
    known = set(known)
    for i, u in enumerate(units):
        if u not in known:
            raise SchemaError(f"{path}: line {_line(i)}: unknown unit {u!r}")


def read_treatment(path: PathLike, panel: PanelMatrix) -> TreatmentPlan:
    df = read_table(path, TREATMENT_COLUMNS, integer=("t0",))
    _check_duplicates(df, ["unit"], path)
    _unknown(df["unit"].tolist(), panel.unit_ids, path)
    times = set(panel.time_ids)
    for i, t in enumerate(df["t0"]):
        if int(t) not in times:
            raise SchemaError(f"{path}: line {_line(i)}: t0 {int(t)} outside the panel's time range")
    return TreatmentPlan(dict(zip(df["unit"], (int(t) for t in df["t0"]))), panel.unit_ids)


def read_covariates(path: PathLike, panel: PanelMatrix) -> CovariateSet:
    with open(path) as fh:
        header = [c.strip() for c in fh.readline().strip().split(",")]
    unit_time = "time" in header
    cols = UNIT_TIME_COVARIATE_COLUMNS if unit_time else COVARIATE_COLUMNS
    df = read_table(path, cols, numeric=("value",), integer=("time",) if unit_time else ())
    keys = ["unit", "time", "name"] if unit_time else ["unit", "name"]
    _check_duplicates(df, keys, path)
    _unknown(df["unit"].tolist(), panel.unit_ids, path)
    names = list(pd.unique(df["name"]))
    if unit_time:
        idx = pd.MultiIndex.from_product([panel.unit_ids, panel.time_ids, names])
        s = df.set_index(["unit", "time", "name"])["value"]
        s.index = s.index.set_levels(s.index.levels[1].astype(int), level=1)
        cube = s.reindex(idx).to_numpy(dtype=float).reshape(len(panel.unit_ids), len(panel.time_ids), len(names))
        if np.isnan(cube).any():
            i, t, k = np.argwhere(np.isnan(cube))[0]
            raise SchemaError(f"{path}: no value for unit {panel.unit_ids[i]!r}, time {panel.time_ids[t]}, "
                              f"covariate {names[k]!r}")
        return CovariateSet(np.zeros((len(panel.unit_ids), 0)), (), cube, tuple(names))
    wide = df.pivot(index="unit", columns="name", values="value").reindex(index=list(panel.unit_ids), columns=names)
    if wide.isna().any().any():
        i, k = np.argwhere(wide.isna().to_numpy())[0]
        raise SchemaError(f"{path}: no value for unit {panel.unit_ids[i]!r}, covariate {names[k]!r}")
    return CovariateSet.from_raw(wide.to_numpy(dtype=float), names)


def read_intensity(path: PathLike, panel: PanelMatrix) -> tuple[np.ndarray, int]:
    """N x T intensity matrix; absent cells are set to zero and counted."""
    df = read_table(path, INTENSITY_COLUMNS, numeric=("intensity",), integer=("time",))
    _check_duplicates(df, ["unit", "time"], path)
    _unknown(df["unit"].tolist(), panel.unit_ids, path)
    df = df[df["time"].astype(int).isin(panel.time_ids)]
    wide = df.pivot(index="unit", columns="time", values="intensity")
    wide.columns = wide.columns.astype(int)
    mat = wide.reindex(index=list(panel.unit_ids), columns=list(panel.time_ids)).to_numpy(dtype=float)
    absent = np.isnan(mat)
    return np.where(absent, 0.0, mat), int(absent.sum())


def ingest(outcomes: PathLike, covariates: Optional[PathLike] = None, treatment: Optional[PathLike] = None,
           intensity: Optional[PathLike] = None, preprocess: Optional[PreprocessConfig] = None) -> Dataset:
    """Read, validate and preprocess a dataset.

    Missing outcome cells are imputed within regimes (see
    :func:`preprocess_with_report`). When a treatment file is given and
    ``preprocess.split_time`` is unset, regimes split at the earliest
    adoption. Every imputation is counted in the returned report.
    """
    raw = read_table(outcomes, OUTCOME_COLUMNS, numeric=("value",), integer=("time",), optional=("value",))
    _check_duplicates(raw, ["unit", "time"], outcomes)
    raw["time"] = raw["time"].astype(int)
    raw["value"] = raw["value"].astype(float)
    config = preprocess or PreprocessConfig()
    times = sorted(set(raw["time"]))
    full_units = list(pd.unique(raw["unit"]))
    plan_raw = None
    if treatment is not None:
        # validate against the unscreened panel first so unknown units are reported as such
        grid = PanelMatrix(np.zeros((len(full_units), len(times))), full_units, times)
        plan_raw = read_treatment(treatment, grid)
        if config.split_time is None:
            config = PreprocessConfig(config.deflator, config.population, min(plan_raw.adoption_time.values()),
                                      config.log_transform, config.drop_constant_pre)
    panel, prep = preprocess_with_report(raw, config)
    report = ValidationReport(panel.shape[0], panel.shape[1], 0, prep.dropped_units, prep.imputed_cells,
                              prep.imputed_by_unit)
    plan = None
    if plan_raw is not None:
        lost = [u for u in plan_raw.treated_units if u not in panel.unit_ids]
        if lost:
            raise PanelError(f"treated unit {lost[0]!r} was dropped during preprocessing (constant pre-period)")
        plan = TreatmentPlan(plan_raw.adoption_time, panel.unit_ids)
        report.n_treated = plan.treated_count
    covs = read_covariates(covariates, panel) if covariates is not None else None
    inten = None
    if intensity is not None:
        inten, report.intensity_zero_filled = read_intensity(intensity, panel)
    return Dataset(panel, plan, covs, inten, report)


def _float_frame(df: pd.DataFrame, path: Path) -> None:
    # repr-precision floats round-trip exactly through read_csv
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_dataset(directory: PathLike, panel: PanelMatrix, plan: Optional[TreatmentPlan] = None,
                  covariates: Optional[CovariateSet] = None, intensity: Optional[np.ndarray] = None) -> dict:
    """Emit a dataset in the ingest schemas; returns the written paths by role."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"outcomes": out / "outcomes.csv"}
    _float_frame(panel.to_long("value"), paths["outcomes"])
    if plan is not None:
        paths["treatment"] = out / "treatment.csv"
        rows = [(u, plan.adoption_time[u]) for u in plan.treated_units]
        pd.DataFrame(rows, columns=list(TREATMENT_COLUMNS)).to_csv(paths["treatment"], index=False, lineterminator="\n")
    if covariates is not None and covariates.n_covariates:
        paths["covariates"] = out / "covariates.csv"
        x = covariates.unit_covariates
        rows = [(u, name, x[i, k]) for i, u in enumerate(panel.unit_ids) for k, name in enumerate(covariates.names)]
        _float_frame(pd.DataFrame(rows, columns=list(COVARIATE_COLUMNS)), paths["covariates"])
    if intensity is not None:
        paths["intensity"] = out / "intensity.csv"
        long = panel.with_values(np.asarray(intensity, dtype=float)).to_long("intensity")
        _float_frame(long, paths["intensity"])
    return {k: str(v) for k, v in paths.items()}


def write_json(obj, path: PathLike) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=True)
        fh.write("\n")

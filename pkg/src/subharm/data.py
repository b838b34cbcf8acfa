"""Patient-level data model: records, validated datasets, CSV ingestion,
and subgroup/design bookkeeping shared by all estimators.

A `CombinedDataset` stores the randomized-trial (RCT) and external-control
(EC) collections as column arrays; `SubjectRecord` is the row-level view
used at the ingestion boundary. Subgroup labels ingest as arbitrary strings
and are mapped to 1..K by lexicographic order; the mapping is kept on the
dataset and echoed into run manifests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatch,
    EcTreatedPatient,
    EmptySubgroupError,
    MalformedRow,
    UnknownSubgroup,
)

RCT = "RCT"
EC = "EC"

CONTINUOUS = "continuous"
BINARY = "binary"


@dataclass(frozen=True)
class SubjectRecord:
    """One patient row.

    `subgroup` is the 1-based integer label after mapping; `study` is
    "RCT" or "EC". External patients all received control (treatment 0).
    """

    outcome: float
    treatment: int
    subgroup: int
    covariates: tuple[float, ...] = ()
    study: str = RCT
    weight: float = 1.0

    def __post_init__(self):
        if self.study not in (RCT, EC):
            raise MalformedRow(f"unknown study tag {self.study!r}")
        if self.treatment not in (0, 1):
            raise MalformedRow(f"treatment must be 0 or 1, got {self.treatment!r}")
        if self.study == EC and self.treatment != 0:
            raise EcTreatedPatient("external-control record with treatment = 1")
        if self.subgroup < 1:
            raise UnknownSubgroup(f"subgroup labels are 1-based, got {self.subgroup}")
        if not self.weight >= 0:
            raise MalformedRow(f"weight must be non-negative, got {self.weight}")


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for CSV ingestion."""

    outcome: str = "outcome"
    treatment: str = "treatment"
    subgroup: str = "subgroup"
    covariates: tuple[str, ...] = ()
    weight: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "CsvSchema":
        return cls(
            outcome=obj.get("outcome", "outcome"),
            treatment=obj.get("treatment", "treatment"),
            subgroup=obj.get("subgroup", "subgroup"),
            covariates=tuple(obj.get("covariates", ())),
            weight=obj.get("weight"),
        )


class CombinedDataset:
    """Validated RCT + EC collections with subgroup bookkeeping.

    Immutable after construction; safe for concurrent read. Column arrays
    use 0-based subgroup indices internally; `subgroup_labels[k]` gives the
    original label of 1-based subgroup k+1.
    """

    def __init__(
        self,
        rct: Iterable[SubjectRecord],
        ec: Iterable[SubjectRecord],
        k: int,
        d: int,
        outcome_family: str = CONTINUOUS,
        subgroup_labels: Sequence[str] | None = None,
    ):
        rct = list(rct)
        ec = list(ec)
        arrays = {}
        for name, recs in (("r", rct), ("e", ec)):
            lens = {len(rec.covariates) for rec in recs}
            if len(lens - {d}) > 0:
                raise DimensionMismatch(
                    f"covariate lengths {sorted(lens)} do not all equal declared d={d}")
            arrays[name] = dict(
                y=np.array([rec.outcome for rec in recs], dtype=float),
                t=np.array([rec.treatment for rec in recs], dtype=np.int64),
                w=np.array([rec.subgroup - 1 for rec in recs], dtype=np.int64),
                x=np.array([rec.covariates for rec in recs], dtype=float).reshape(len(recs), d),
                wt=np.array([rec.weight for rec in recs], dtype=float),
            )
        self._init_from_arrays(arrays["r"], arrays["e"], k, d, outcome_family, subgroup_labels)

    @classmethod
    def from_arrays(
        cls,
        *,
        y_rct: np.ndarray,
        t_rct: np.ndarray,
        w_rct: np.ndarray,
        y_ec: np.ndarray,
        w_ec: np.ndarray,
        k: int,
        x_rct: np.ndarray | None = None,
        x_ec: np.ndarray | None = None,
        outcome_family: str = CONTINUOUS,
        subgroup_labels: Sequence[str] | None = None,
    ) -> "CombinedDataset":
        """Fast constructor for simulation workers. `w_*` are 0-based."""
        ds = cls.__new__(cls)
        n_r, n_e = len(y_rct), len(y_ec)
        if x_rct is None:
            d = 0
        else:
            x_rct = np.asarray(x_rct, dtype=float)
            d = 1 if x_rct.ndim == 1 else int(x_rct.shape[1])
        rct = dict(
            y=np.asarray(y_rct, dtype=float),
            t=np.asarray(t_rct, dtype=np.int64),
            w=np.asarray(w_rct, dtype=np.int64),
            x=np.zeros((n_r, 0)) if x_rct is None else np.asarray(x_rct, dtype=float).reshape(n_r, d),
            wt=np.ones(n_r),
        )
        ec = dict(
            y=np.asarray(y_ec, dtype=float),
            t=np.zeros(n_e, dtype=np.int64),
            w=np.asarray(w_ec, dtype=np.int64),
            x=np.zeros((n_e, 0)) if x_ec is None else np.asarray(x_ec, dtype=float).reshape(n_e, d),
            wt=np.ones(n_e),
        )
        ds._init_from_arrays(rct, ec, k, d, outcome_family, subgroup_labels)
        return ds

    def _init_from_arrays(self, rct: dict, ec: dict, k: int, d: int,
                          outcome_family: str, subgroup_labels) -> None:
        if outcome_family not in (CONTINUOUS, BINARY):
            raise DataError(f"unknown outcome family {outcome_family!r}")
        if np.any(ec["t"] != 0):
            raise EcTreatedPatient("external-control record with treatment = 1")
        for side in (rct, ec):
            if side["w"].size and (side["w"].min() < 0 or side["w"].max() >= k):
                bad = int(side["w"].min() if side["w"].min() < 0 else side["w"].max())
                raise UnknownSubgroup(f"subgroup index {bad + 1} outside 1..{k}")
            if side["x"].shape[1] != d:
                raise DimensionMismatch(
                    f"covariate dimension {side['x'].shape[1]} != declared {d}")
            if side["wt"].size and side["wt"].min() < 0:
                raise MalformedRow("negative analysis weight")
            if outcome_family == BINARY and side["y"].size and not np.isin(side["y"], (0.0, 1.0)).all():
                raise MalformedRow("binary outcome family requires outcomes in {0, 1}")
        self.k = int(k)
        self.d = int(d)
        self.outcome_family = outcome_family
        self.subgroup_labels = tuple(subgroup_labels) if subgroup_labels is not None \
            else tuple(str(i + 1) for i in range(k))
        if len(self.subgroup_labels) != k:
            raise DataError("subgroup_labels length must equal K")
        self.y_rct, self.t_rct, self.w_rct = rct["y"], rct["t"], rct["w"]
        self.x_rct, self.wt_rct = rct["x"], rct["wt"]
        self.y_ec, self.w_ec = ec["y"], ec["w"]
        self.x_ec, self.wt_ec = ec["x"], ec["wt"]
        for arr in (self.y_rct, self.t_rct, self.w_rct, self.x_rct, self.wt_rct,
                    self.y_ec, self.w_ec, self.x_ec, self.wt_ec):
            arr.setflags(write=False)

    # --- views ---------------------------------------------------------

    @property
    def n_rct(self) -> int:
        return len(self.y_rct)

    @property
    def n_ec(self) -> int:
        return len(self.y_ec)

    @property
    def rct(self) -> list[SubjectRecord]:
        return self._records(RCT)

    @property
    def ec(self) -> list[SubjectRecord]:
        return self._records(EC)

    def _records(self, study: str) -> list[SubjectRecord]:
        if study == RCT:
            y, t, w, x, wt = self.y_rct, self.t_rct, self.w_rct, self.x_rct, self.wt_rct
        else:
            y, t, w, x, wt = self.y_ec, np.zeros(self.n_ec, dtype=np.int64), self.w_ec, self.x_ec, self.wt_ec
        return [
            SubjectRecord(float(y[i]), int(t[i]), int(w[i]) + 1,
                          tuple(float(v) for v in x[i]), study, float(wt[i]))
            for i in range(len(y))
        ]

    def rct_mask(self, subgroup: int | None = None, arm: int | None = None) -> np.ndarray:
        """Boolean mask over RCT rows; `subgroup` is 0-based."""
        m = np.ones(self.n_rct, dtype=bool)
        if subgroup is not None:
            m &= self.w_rct == subgroup
        if arm is not None:
            m &= self.t_rct == arm
        return m


@dataclass(frozen=True)
class DesignCounts:
    """Subgroup/arm/study counts and derived design ratios.

    `counts[k, t, s]` holds the count for 0-based subgroup k, arm t, and
    study s (0 = RCT, 1 = EC). `q_ratio[k]` is the external fraction of
    control patients in subgroup k, `q_bar` its prevalence-weighted mean,
    and `q` the overall external fraction of controls.
    """

    counts: np.ndarray
    pi: np.ndarray
    q_ratio: np.ndarray
    q_bar: float
    q: float
    prevalence_source: str = "rct_empirical"

    def __post_init__(self):
        self.counts.setflags(write=False)
        self.pi.setflags(write=False)
        self.q_ratio.setflags(write=False)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def Pi(self) -> np.ndarray:
        return np.diag(self.pi)

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q_ratio)

    def n(self, subgroup=None, arm=None, study=None) -> int:
        """Marginal count; None sums over that axis. `subgroup` is 0-based,
        study is "RCT", "EC", or None for both."""
        c = self.counts
        if subgroup is not None:
            c = c[subgroup:subgroup + 1]
        if arm is not None:
            c = c[:, arm:arm + 1]
        if study is not None:
            s = 0 if study == RCT else 1
            c = c[..., s:s + 1]
        return int(c.sum())


def compute_design_counts(
    ds: CombinedDataset,
    prevalences: np.ndarray | Sequence[float] | None = None,
) -> DesignCounts:
    """Tally per-cell counts and derive prevalences and control ratios.

    Prevalences default to the empirical RCT subgroup frequencies and are
    normalized to sum to exactly 1; a user-supplied vector overrides them
    (it must be strictly positive on the simplex).
    """
    k = ds.k
    counts = np.zeros((k, 2, 2), dtype=np.int64)
    np.add.at(counts, (ds.w_rct, ds.t_rct, 0), 1)
    np.add.at(counts, (ds.w_ec, np.zeros(ds.n_ec, dtype=np.int64), 1), 1)

    if prevalences is not None:
        pi = np.asarray(prevalences, dtype=float)
        if pi.shape != (k,):
            raise DataError(f"prevalences must have length {k}")
        if np.any(pi <= 0):
            raise DataError("user-supplied prevalences must be strictly positive")
        if abs(pi.sum() - 1.0) > 1e-12:
            raise DataError("user-supplied prevalences must sum to 1 within 1e-12")
        source = "user_supplied"
    else:
        per_sub = counts[:, :, 0].sum(axis=1).astype(float)
        if ds.n_rct == 0:
            raise EmptySubgroupError("no RCT records; cannot derive empirical prevalences")
        if np.any(per_sub == 0):
            raise EmptySubgroupError(
                f"subgroup {int(np.argmax(per_sub == 0)) + 1} has no RCT patients")
        pi = per_sub / per_sub.sum()
        source = "rct_empirical"

    n_ec_sub = counts[:, 0, 1]
    n_ctrl_pooled = counts[:, 0, 0] + n_ec_sub
    if np.any(n_ctrl_pooled == 0):
        raise EmptySubgroupError(
            f"subgroup {int(np.argmax(n_ctrl_pooled == 0)) + 1} has no control "
            "patients in either study; Q is undefined")
    q_ratio = n_ec_sub / n_ctrl_pooled
    q_bar = float(pi @ q_ratio)
    nr0 = int(counts[:, 0, 0].sum())
    ne0 = int(n_ec_sub.sum())
    q = ne0 / (nr0 + ne0) if nr0 + ne0 > 0 else 0.0
    return DesignCounts(counts=counts, pi=pi, q_ratio=q_ratio,
                        q_bar=q_bar, q=q, prevalence_source=source)


# --- CSV ingestion ---------------------------------------------------------

def _parse_cell(raw: str, kind: str, path: str, line: int, column: str):
    raw = raw.strip()
    if raw == "":
        raise MalformedRow(f"{path}:{line}: empty {column!r} cell")
    try:
        if kind == "float":
            return float(raw)
        return int(raw)
    except ValueError:
        raise MalformedRow(
            f"{path}:{line}: cannot parse {column!r} value {raw!r}") from None


def _read_rows(path: str, schema: CsvSchema, study: str):
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MalformedRow(f"{path}: empty file (header row required)")
        needed = [schema.outcome, schema.treatment, schema.subgroup, *schema.covariates]
        if schema.weight:
            needed.append(schema.weight)
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise MalformedRow(f"{path}: missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            outcome = _parse_cell(row[schema.outcome], "float", path, line, schema.outcome)
            treatment = _parse_cell(row[schema.treatment], "int", path, line, schema.treatment)
            if treatment not in (0, 1):
                raise MalformedRow(f"{path}:{line}: treatment must be 0 or 1")
            if study == EC and treatment == 1:
                raise EcTreatedPatient(f"{path}:{line}: external-control row with treatment = 1")
            label = row[schema.subgroup].strip()
            if label == "":
                raise MalformedRow(f"{path}:{line}: empty subgroup cell")
            covs = tuple(
                _parse_cell(row[c], "float", path, line, c) for c in schema.covariates)
            weight = (_parse_cell(row[schema.weight], "float", path, line, schema.weight)
                      if schema.weight else 1.0)
            if weight < 0:
                raise MalformedRow(f"{path}:{line}: negative weight")
            rows.append((outcome, treatment, label, covs, weight))
    return rows


def load_dataset(
    rct_csv: str,
    ec_csv: str,
    schema: CsvSchema,
    outcome_family: str = CONTINUOUS,
    subgroup_levels: Sequence[str] | None = None,
) -> CombinedDataset:
    """Load and validate an RCT + EC dataset pair from CSV files.

    Subgroup labels found in the files are mapped to 1..K in lexicographic
    order unless `subgroup_levels` declares the levels explicitly, in which
    case any label outside that set raises UnknownSubgroup.
    """
    rct_rows = _read_rows(rct_csv, schema, RCT)
    ec_rows = _read_rows(ec_csv, schema, EC)
    if subgroup_levels is not None:
        labels = [str(v) for v in subgroup_levels]
    else:
        labels = sorted({r[2] for r in rct_rows} | {r[2] for r in ec_rows})
    index = {lab: i for i, lab in enumerate(labels)}
    k, d = len(labels), len(schema.covariates)

    def to_records(rows, study):
        recs = []
        for outcome, treatment, label, covs, weight in rows:
            if label not in index:
                raise UnknownSubgroup(
                    f"subgroup label {label!r} not among declared levels {labels}")
            recs.append(SubjectRecord(outcome, treatment, index[label] + 1,
                                      covs, study, weight))
        return recs

    return CombinedDataset(to_records(rct_rows, RCT), to_records(ec_rows, EC),
                           k=k, d=d, outcome_family=outcome_family,
                           subgroup_labels=labels)


def save_dataset(ds: CombinedDataset, rct_csv: str, ec_csv: str,
                 schema: CsvSchema | None = None) -> None:
    """Write the dataset back to a CSV pair (round-trips within 1e-15)."""
    schema = schema or CsvSchema(covariates=tuple(f"x{j + 1}" for j in range(ds.d)))
    header = [schema.outcome, schema.treatment, schema.subgroup, *schema.covariates]
    if schema.weight:
        header.append(schema.weight)

    def write(path, y, t, w, x, wt):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(len(y)):
                row = [format(y[i], ".17g"), int(t[i]), ds.subgroup_labels[int(w[i])]]
                row += [format(v, ".17g") for v in x[i]]
                if schema.weight:
                    row.append(format(wt[i], ".17g"))
                writer.writerow(row)

    write(rct_csv, ds.y_rct, ds.t_rct, ds.w_rct, ds.x_rct, ds.wt_rct)
    write(ec_csv, ds.y_ec, np.zeros(ds.n_ec, dtype=int), ds.w_ec, ds.x_ec, ds.wt_ec)

"""Event-log and patient-record ingestion, cohort filtering, and utilization matrices."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

EVENT_COLUMNS = ("employee_id", "area_id", "patient_id", "action_type", "timestamp")
PATIENT_COLUMNS = ("patient_id", "age", "los_hours", "died", "icd9_codes", "cpt_codes", "insurance")
MAPPING_COLUMNS = ("icd9", "phewas")
CODE_SEP = "|"


class DataError(Exception):
    """Input data that cannot be turned into valid domain objects."""


class SchemaError(DataError):
    def __init__(self, path, column):
        super().__init__(f"{path}: missing required column {column!r}")
        self.path = path
        self.column = column


class RowError(DataError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class AccessEvent:
    employee_id: str
    area_id: str
    patient_id: str
    action_type: str
    timestamp: datetime


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: int
    los_hours: float
    died_in_service: bool = False
    icd9_codes: frozenset = frozenset()
    cpt_codes: frozenset = frozenset()
    insurance: str = ""

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.age < 0:
            raise ValueError(f"age must be >= 0, got {self.age}")
        if not self.los_hours >= 0:
            raise ValueError(f"los_hours must be >= 0, got {self.los_hours}")


@dataclass(frozen=True)
class CodeMapping:
    entries: dict

    def __post_init__(self):
        for k, v in self.entries.items():
            if not v:
                raise ValueError(f"empty PheWAS target for ICD-9 code {k!r}")


@dataclass
class PheWASTally:
    """Per-run count of ICD-9 codes that had no PheWAS translation."""

    unmapped: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return sum(self.unmapped.values())


@dataclass(frozen=True)
class BinaryUtilizationMatrix:
    employees: tuple
    patients: tuple
    cells: sp.csr_matrix


@dataclass(frozen=True)
class AreaUtilizationMatrix:
    areas: tuple
    patients: tuple
    counts: sp.csr_matrix

    @property
    def shape(self):
        return self.counts.shape

    def dense(self) -> np.ndarray:
        return self.counts.toarray()


# ---------------------------------------------------------------------------
# timestamps

def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# ---------------------------------------------------------------------------
# readers

def _open_reader(path, required):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        return fh, None
    for col in required:
        if col not in reader.fieldnames:
            fh.close()
            raise SchemaError(path, col)
    return fh, reader


def load_events(path, window: tuple | None = None) -> list:
    """Read an ``events.csv`` log.

    ``window`` is an optional ``(start, end)`` pair of aware datetimes; events
    outside it are row errors. An empty file yields an empty list.
    """
    path = Path(path)
    fh, reader = _open_reader(path, EVENT_COLUMNS)
    events = []
    with fh:
        if reader is None:
            return events
        for row in reader:
            line = reader.line_num
            for col in ("employee_id", "area_id", "patient_id"):
                if not row[col]:
                    raise RowError(path, line, f"empty {col}")
            try:
                ts = parse_timestamp(row["timestamp"])
            except (ValueError, AttributeError):
                raise RowError(path, line, f"malformed timestamp {row['timestamp']!r}") from None
            if window is not None and not (window[0] <= ts <= window[1]):
                raise RowError(path, line, f"timestamp {row['timestamp']} outside study window")
            events.append(AccessEvent(row["employee_id"], row["area_id"], row["patient_id"],
                                      row["action_type"], ts))
    return events


def _split_codes(text):
    return frozenset(c for c in text.split(CODE_SEP) if c) if text else frozenset()


def load_patients(path) -> list:
    path = Path(path)
    fh, reader = _open_reader(path, PATIENT_COLUMNS)
    patients = []
    with fh:
        if reader is None:
            return patients
        for row in reader:
            line = reader.line_num
            try:
                died = row["died"].strip().lower()
                if died not in ("0", "1", "true", "false"):
                    raise ValueError(f"bad died flag {row['died']!r}")
                patients.append(PatientRecord(
                    patient_id=row["patient_id"],
                    age=int(row["age"]),
                    los_hours=float(row["los_hours"]),
                    died_in_service=died in ("1", "true"),
                    icd9_codes=_split_codes(row["icd9_codes"]),
                    cpt_codes=_split_codes(row["cpt_codes"]),
                    insurance=row["insurance"],
                ))
            except ValueError as exc:
                raise RowError(path, line, str(exc)) from None
    return patients


def load_mapping(path) -> CodeMapping:
    path = Path(path)
    fh, reader = _open_reader(path, MAPPING_COLUMNS)
    entries = {}
    with fh:
        if reader is None:
            return CodeMapping(entries)
        for row in reader:
            if row["icd9"] in entries:
                raise RowError(path, reader.line_num, f"duplicate ICD-9 code {row['icd9']!r}")
            if not row["phewas"]:
                raise RowError(path, reader.line_num, "empty phewas code")
            entries[row["icd9"]] = row["phewas"]
    return CodeMapping(entries)


# ---------------------------------------------------------------------------
# writers

def write_events(events: Iterable[AccessEvent], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for e in events:
        w.writerow((e.employee_id, e.area_id, e.patient_id, e.action_type, format_timestamp(e.timestamp)))


def write_patients(patients: Iterable[PatientRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(PATIENT_COLUMNS)
    for p in patients:
        w.writerow((p.patient_id, p.age, repr(float(p.los_hours)), int(p.died_in_service),
                    CODE_SEP.join(sorted(p.icd9_codes)), CODE_SEP.join(sorted(p.cpt_codes)),
                    p.insurance))


def write_mapping(mapping: CodeMapping, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(MAPPING_COLUMNS)
    for k in sorted(mapping.entries):
        w.writerow((k, mapping.entries[k]))


# ---------------------------------------------------------------------------
# cohort

def apply_cohort_filters(patients: Sequence[PatientRecord], min_age: int = 18,
                         exclude_deaths: bool = True) -> list:
    return [p for p in patients
            if p.age >= min_age and not (exclude_deaths and p.died_in_service)]


def map_phewas(record: PatientRecord, mapping: CodeMapping, tally: PheWASTally | None = None) -> frozenset:
    out = set()
    for code in record.icd9_codes:
        target = mapping.entries.get(code)
        if target is None:
            if tally is not None:
                tally.unmapped[code] += 1
            continue
        out.add(target)
    return frozenset(out)


# ---------------------------------------------------------------------------
# matrices

def _index(values):
    """Sorted distinct ids and the position of every input value."""
    ids = sorted(set(values))
    pos = {v: i for i, v in enumerate(ids)}
    return tuple(ids), np.fromiter((pos[v] for v in values), dtype=np.int64, count=len(values))


def build_binary_matrix(events: Sequence[AccessEvent]) -> BinaryUtilizationMatrix:
    if not events:
        raise DataError("no events")
    employees, rows = _index([e.employee_id for e in events])
    patients, cols = _index([e.patient_id for e in events])
    m = sp.csr_matrix((np.ones(len(events)), (rows, cols)), shape=(len(employees), len(patients)))
    m.sum_duplicates()
    m.data[:] = 1.0
    return BinaryUtilizationMatrix(employees, patients, m)


def aggregate_by_area(events: Sequence[AccessEvent]) -> AreaUtilizationMatrix:
    if not events:
        raise DataError("no events")
    areas, rows = _index([e.area_id for e in events])
    patients, cols = _index([e.patient_id for e in events])
    m = sp.csr_matrix((np.ones(len(events), dtype=np.int64), (rows, cols)),
                      shape=(len(areas), len(patients)))
    m.sum_duplicates()
    return AreaUtilizationMatrix(areas, patients, m)


def area_matrix_from_dense(counts, areas=None, patients=None) -> AreaUtilizationMatrix:
    counts = np.asarray(counts)
    if counts.ndim != 2:
        raise ValueError("counts must be 2-D")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    n_a, n_p = counts.shape
    areas = tuple(areas) if areas is not None else tuple(f"A{i:04d}" for i in range(n_a))
    patients = tuple(patients) if patients is not None else tuple(f"P{j:05d}" for j in range(n_p))
    return AreaUtilizationMatrix(areas, patients, sp.csr_matrix(counts.astype(np.int64)))


def read_area_matrix(path) -> AreaUtilizationMatrix:
    """Read the sparse ``area_id,patient_id,count`` triplet file written by :func:`write_area_matrix`."""
    path = Path(path)
    fh, reader = _open_reader(path, ("area_id", "patient_id", "count"))
    with fh:
        if reader is None:
            raise DataError(f"{path}: empty matrix file")
        triples = [(r["area_id"], r["patient_id"], int(r["count"])) for r in reader]
    if not triples:
        raise DataError(f"{path}: empty matrix file")
    areas, rows = _index([t[0] for t in triples])
    patients, cols = _index([t[1] for t in triples])
    m = sp.csr_matrix((np.array([t[2] for t in triples], dtype=np.int64), (rows, cols)),
                      shape=(len(areas), len(patients)))
    m.sum_duplicates()
    return AreaUtilizationMatrix(areas, patients, m)


def write_area_matrix(aprime: AreaUtilizationMatrix, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("area_id", "patient_id", "count"))
    coo = aprime.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    for i in order:
        if coo.data[i]:
            w.writerow((aprime.areas[coo.row[i]], aprime.patients[coo.col[i]], int(coo.data[i])))

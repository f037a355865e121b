"""Synthetic cohorts with planted co-cluster structure and planted LOS effects."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from math import comb
from pathlib import Path

import numpy as np

from .datamodel import (AccessEvent, CodeMapping, PatientRecord, write_events, write_mapping,
                        write_patients)

STUDY_START = datetime(2013, 1, 1, tzinfo=timezone.utc)
STUDY_END = datetime(2016, 1, 1, tzinfo=timezone.utc)
ACTION_TYPES = ("note", "order", "medication", "result_review", "vitals")
INSURANCE = ("commercial", "medicaid", "medicare_a", "medicare_b", "military", "self_pay",
             "workers_comp", "other")


@dataclass
class ConfounderSpec:
    n_icd9: int = 3612
    n_phewas: int = 1010
    n_cpt: int = 1627
    icd9_per_patient: float = 8.0
    cpt_per_patient: float = 5.0
    code_zipf: float = 1.0           # rank-frequency exponent of code popularity
    insurance_weights: tuple = (0.34, 0.20, 0.18, 0.08, 0.04, 0.08, 0.05, 0.03)
    age_min: int = 18
    age_max: int = 100
    age_mean: float = 47.0
    age_concentration: float = 5.0   # a + b of the scaled Beta age law


@dataclass
class SynthConfig:
    group_sizes: tuple = (428, 1353, 3807)
    area_group_sizes: tuple = (27, 86, 66)
    # block_rates[p][a]: expected events per (area, patient) cell for patient
    # group p and area group a. None: in_rate on the diagonal, out_rate elsewhere.
    block_rates: tuple | None = None
    in_rate: float = 0.4
    out_rate: float = 0.04
    los_means: tuple = (144.0, 158.0, 154.0)
    los_dispersion: float = 0.1
    confounders: ConfounderSpec = field(default_factory=ConfounderSpec)
    # Optional per-group confounder overrides (None: shared spec for every group).
    group_confounders: tuple | None = None
    death_fraction: float = 0.01
    employees_per_area: int = 31
    seed: int = 42

    @property
    def k(self) -> int:
        return len(self.group_sizes)

    def rates(self) -> np.ndarray:
        if self.block_rates is not None:
            return np.asarray(self.block_rates, dtype=np.float64)
        r = np.full((self.k, self.k), float(self.out_rate))
        np.fill_diagonal(r, float(self.in_rate))
        return r

    def validate(self):
        k = self.k
        if k < 1 or len(self.area_group_sizes) != k:
            raise ValueError("group_sizes and area_group_sizes must have the same positive length")
        if any(s < 1 for s in self.group_sizes) or any(s < 1 for s in self.area_group_sizes):
            raise ValueError("group counts must be >= 1")
        rates = self.rates()
        if rates.shape != (k, k):
            raise ValueError(f"block_rates must be {k}x{k}")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise ValueError("block rates must be finite and non-negative")
        if len(self.los_means) != k or any(m <= 0 for m in self.los_means):
            raise ValueError("los_means must give one positive mean per group")
        if not self.los_dispersion > 0:
            raise ValueError("los_dispersion must be positive")
        if not 0 <= self.death_fraction < 1:
            raise ValueError("death_fraction must be in [0, 1)")
        if self.group_confounders is not None and len(self.group_confounders) != k:
            raise ValueError("group_confounders needs one spec per group")


@dataclass(frozen=True)
class SynthCohort:
    events: list
    patients: list
    true_patient_group: dict
    true_area_group: dict
    mapping: CodeMapping
    counts: np.ndarray | None = None   # planted area x patient count matrix


def _zipf_weights(n, s):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _draw_codes(rng, n_patients, vocab, weights, mean):
    # Draws with replacement; repeats collapse, so a patient holds at most
    # Poisson(mean) distinct codes.
    sizes = rng.poisson(mean, n_patients)
    flat = rng.choice(len(vocab), size=int(sizes.sum()), p=weights)
    bounds = np.cumsum(sizes)[:-1]
    return [frozenset(vocab[i] for i in chunk) for chunk in np.split(flat, bounds)]


def make_mapping(spec: ConfounderSpec, rng) -> CodeMapping:
    """Many-to-one ICD-9 -> PheWAS table that hits every PheWAS target."""
    icd = [f"I{i:04d}" for i in range(spec.n_icd9)]
    targets = [f"PW{i:04d}" for i in range(spec.n_phewas)]
    assign = np.concatenate([np.arange(min(spec.n_phewas, spec.n_icd9)),
                             rng.integers(0, spec.n_phewas, max(spec.n_icd9 - spec.n_phewas, 0))])
    rng.shuffle(assign)
    return CodeMapping({c: targets[t] for c, t in zip(icd, assign)})


def _confounders(rng, spec: ConfounderSpec, n):
    icd = [f"I{i:04d}" for i in range(spec.n_icd9)]
    cpt = [f"C{i:04d}" for i in range(spec.n_cpt)]
    # Popularity ranks are shuffled once per spec draw so code ids carry no order.
    icd_w = _zipf_weights(spec.n_icd9, spec.code_zipf)[rng.permutation(spec.n_icd9)]
    cpt_w = _zipf_weights(spec.n_cpt, spec.code_zipf)[rng.permutation(spec.n_cpt)]
    span = spec.age_max - spec.age_min
    m = (spec.age_mean - spec.age_min) / span
    ages = spec.age_min + np.rint(span * rng.beta(m * spec.age_concentration,
                                                  (1 - m) * spec.age_concentration, n)).astype(int)
    ins_w = np.asarray(spec.insurance_weights, dtype=float)
    ins = rng.choice(len(INSURANCE), size=n, p=ins_w / ins_w.sum())
    return (ages, _draw_codes(rng, n, icd, icd_w, spec.icd9_per_patient),
            _draw_codes(rng, n, cpt, cpt_w, spec.cpt_per_patient), [INSURANCE[i] for i in ins])


def _planted_labels(rng, sizes):
    labels = np.repeat(np.arange(1, len(sizes) + 1), sizes)
    rng.shuffle(labels)
    return labels


def generate(config: SynthConfig | None = None, with_events: bool = True) -> SynthCohort:
    """Draw a cohort. Everything is a deterministic function of ``config.seed``."""
    config = config or SynthConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.k
    n_p = sum(config.group_sizes)
    n_a = sum(config.area_group_sizes)
    pid = [f"P{j + 1:05d}" for j in range(n_p)]
    aid = [f"A{i + 1:03d}" for i in range(n_a)]
    pg = _planted_labels(rng, config.group_sizes)
    ag = _planted_labels(rng, config.area_group_sizes)

    # LOS and deaths
    mu = np.asarray(config.los_means, dtype=float)[pg - 1]
    r = 1.0 / config.los_dispersion
    los = rng.negative_binomial(r, r / (r + mu)).astype(float)
    died = np.zeros(n_p, dtype=bool)
    n_dead = int(round(config.death_fraction * n_p))
    if n_dead:
        died[rng.choice(n_p, size=n_dead, replace=False)] = True

    # confounders: one shared population unless overridden per group
    mapping = make_mapping(config.confounders, rng)
    ages = np.zeros(n_p, dtype=int)
    icd = [frozenset()] * n_p
    cpt = [frozenset()] * n_p
    ins = [""] * n_p
    specs = config.group_confounders or (config.confounders,) * k
    if config.group_confounders is None:
        a, i9, c, s = _confounders(rng, config.confounders, n_p)
        ages, icd, cpt, ins = a, i9, c, s
    else:
        for g, spec in enumerate(specs, start=1):
            idx = np.flatnonzero(pg == g)
            a, i9, c, s = _confounders(rng, spec, idx.size)
            ages[idx] = a
            for t, j in enumerate(idx):
                icd[j], cpt[j], ins[j] = i9[t], c[t], s[t]

    patients = [PatientRecord(pid[j], int(ages[j]), float(los[j]), bool(died[j]),
                              icd[j], cpt[j], ins[j]) for j in range(n_p)]

    rates = config.rates()
    counts = rng.poisson(rates[pg[None, :] - 1, ag[:, None] - 1])
    events = _expand_events(rng, counts, aid, pid, los, config) if with_events else []
    return SynthCohort(events, patients,
                       {p: int(g) for p, g in zip(pid, pg)},
                       {a: int(g) for a, g in zip(aid, ag)},
                       mapping, counts)


def _expand_events(rng, counts, aid, pid, los, config):
    window = (STUDY_END - STUDY_START).total_seconds()
    stay = np.maximum(los, 1.0) * 3600.0
    admit = np.floor(rng.uniform(0, 1, len(pid)) * np.maximum(window - stay, 0.0))
    rows, cols = np.nonzero(counts)
    reps = counts[rows, cols]
    er = np.repeat(rows, reps)
    ec = np.repeat(cols, reps)
    n = er.size
    offset = np.floor(rng.uniform(0, 1, n) * stay[ec])
    secs = (admit[ec] + offset).astype(np.int64)
    emp = rng.integers(0, config.employees_per_area, n)
    act = rng.integers(0, len(ACTION_TYPES), n)
    order = np.lexsort((emp, er, ec, secs))
    return [AccessEvent(f"E{er[i] + 1:03d}-{emp[i] + 1:02d}", aid[er[i]], pid[ec[i]],
                        ACTION_TYPES[act[i]], STUDY_START + timedelta(seconds=int(secs[i])))
            for i in order]


def write_cohort(cohort: SynthCohort, out_dir, writer=None) -> dict:
    """Write events.csv, patients.csv, phewas_map.csv and truth.csv; returns the paths.

    ``writer(path, fn)`` may be supplied to control how files reach disk
    (the CLI passes an atomic writer).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def default_writer(path, fn):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fn(fh)

    writer = writer or default_writer
    paths = {name: out / name for name in ("events.csv", "patients.csv", "phewas_map.csv", "truth.csv")}
    writer(paths["events.csv"], lambda fh: write_events(cohort.events, fh))
    writer(paths["patients.csv"], lambda fh: write_patients(cohort.patients, fh))
    writer(paths["phewas_map.csv"], lambda fh: write_mapping(cohort.mapping, fh))
    writer(paths["truth.csv"], lambda fh: write_truth(cohort, fh))
    return paths


def write_truth(cohort: SynthCohort, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("entity_type", "entity_id", "group"))
    for p in sorted(cohort.true_patient_group):
        w.writerow(("patient", p, cohort.true_patient_group[p]))
    for a in sorted(cohort.true_area_group):
        w.writerow(("area", a, cohort.true_area_group[a]))


# ---------------------------------------------------------------------------

def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the pair-counting contingency table."""
    a = list(labels_a)
    b = list(labels_b)
    if len(a) != len(b):
        raise ValueError(f"labelings differ in size: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("ARI needs at least two items")
    _, ia = np.unique(np.asarray(a, dtype=object).astype(str), return_inverse=True)
    _, ib = np.unique(np.asarray(b, dtype=object).astype(str), return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    pairs = lambda x: sum(comb(int(v), 2) for v in np.ravel(x))
    index = pairs(table)
    sa = pairs(table.sum(axis=1))
    sb = pairs(table.sum(axis=0))
    total = comb(n, 2)
    expected = sa * sb / total
    maximum = (sa + sb) / 2
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))

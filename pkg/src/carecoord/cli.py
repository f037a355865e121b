"""Command-line pipeline: synth -> ingest -> cocluster -> network -> stats -> report.

Every stage reads its inputs from, and writes its artifacts to, the output
directory, so ``all`` is exactly the stages run back to back.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datamodel as dm
from . import export as ex
from .cocluster import ConvergenceError, choose_k, cocluster
from .network import build_network, louvain, metrics
from .stats import (FACTORS, DesignConfig, all_pairwise_tests, build_design, fit_nb,
                    similarity_report)
from .synth import SynthConfig, generate, write_cohort

log = logging.getLogger("carecoord")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3
STAGES = ("synth", "ingest", "cocluster", "network", "stats", "report")


class UsageError(Exception):
    pass


class NonConvergence(Exception):
    pass


@dataclass
class PipelineConfig:
    events: str | None = None
    patients: str | None = None
    phewas_map: str | None = None
    out: str = "out"
    k: int = 3
    choose_k: bool = False
    k_min: int = 2
    k_max: int = 6
    seed: int = 42
    tau: float = 0.1
    min_actions: int = 1
    min_age: int = 18
    exclude_deaths: bool = True
    restarts: int = 10
    synthetic: bool = False          # `all`: generate inputs before ingesting
    synth: dict = field(default_factory=dict)   # SynthConfig overrides

    def validate(self):
        if self.k < 2:
            raise UsageError(f"k must be >= 2, got {self.k}")
        if not 0 <= self.tau < 1:
            raise UsageError(f"tau must be in [0, 1), got {self.tau}")
        if self.min_actions < 1:
            raise UsageError("min_actions must be >= 1")
        if self.choose_k and not 2 <= self.k_min <= self.k_max:
            raise UsageError(f"invalid k range [{self.k_min}, {self.k_max}]")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def input_path(self, name):
        """Configured input, falling back to the copy a synth stage left in ``out``."""
        explicit = {"events.csv": self.events, "patients.csv": self.patients,
                    "phewas_map.csv": self.phewas_map}[name]
        return Path(explicit) if explicit else self.out_dir / name


def stage_seed(root: int, stage: str) -> int:
    """Per-stage seed split deterministically from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(path)
    return path


# ---------------------------------------------------------------------------
# stages

def stage_synth(cfg: PipelineConfig) -> None:
    overrides = dict(cfg.synth)
    overrides.setdefault("seed", stage_seed(cfg.seed, "synth"))
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise UsageError(f"unknown synth option(s): {', '.join(sorted(unknown))}")
    for key in ("group_sizes", "area_group_sizes", "los_means", "block_rates"):
        if isinstance(overrides.get(key), list):
            overrides[key] = tuple(tuple(v) if isinstance(v, list) else v for v in overrides[key])
    try:
        sc = SynthConfig(**overrides)
        cohort = generate(sc)
    except ValueError as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    write_cohort(cohort, cfg.out_dir, writer=ex.atomic_write)
    log.info("synth: %d events, %d patients", len(cohort.events), len(cohort.patients))


def stage_ingest(cfg: PipelineConfig) -> None:
    events = dm.load_events(_require(cfg.input_path("events.csv")))
    patients = dm.load_patients(_require(cfg.input_path("patients.csv")))
    map_path = cfg.input_path("phewas_map.csv")
    mapping = dm.load_mapping(map_path) if map_path.exists() else None

    cohort = dm.apply_cohort_filters(patients, cfg.min_age, cfg.exclude_deaths)
    keep = {p.patient_id for p in cohort}
    kept = [e for e in events if e.patient_id in keep]
    aprime = dm.aggregate_by_area(kept)
    binary = dm.build_binary_matrix(kept)
    tally = dm.PheWASTally()
    if mapping is not None:
        for p in cohort:
            dm.map_phewas(p, mapping, tally)
    if tally.total:
        log.warning("ingest: %d ICD-9 code occurrences (%d distinct) had no PheWAS mapping",
                    tally.total, len(tally.unmapped))

    out = cfg.out_dir
    ex.atomic_write(out / "cohort.csv", lambda fh: dm.write_patients(cohort, fh))
    ex.atomic_write(out / "aprime.csv", lambda fh: dm.write_area_matrix(aprime, fh))
    ex.write_json(out / "ingest.json", {
        "events_read": len(events),
        "events_in_cohort": len(kept),
        "patients_read": len(patients),
        "patients_in_cohort": len(cohort),
        "patients_with_events": len(aprime.patients),
        "areas": len(aprime.areas),
        "employees": len(binary.employees),
        "employee_patient_pairs": int(binary.cells.nnz),
        "unmapped_icd9_occurrences": tally.total,
        "unmapped_icd9_distinct": len(tally.unmapped),
        "min_age": cfg.min_age,
        "exclude_deaths": cfg.exclude_deaths,
    })


def stage_cocluster(cfg: PipelineConfig) -> None:
    aprime = dm.read_area_matrix(_require(cfg.out_dir / "aprime.csv"))
    seed = stage_seed(cfg.seed, "cocluster")
    k = cfg.k
    if cfg.choose_k:
        k = choose_k(aprime, cfg.k_min, cfg.k_max, seed=seed, restarts=cfg.restarts)
    try:
        assignment = cocluster(aprime, k, seed=seed, restarts=cfg.restarts)
    except ConvergenceError as exc:
        raise NonConvergence(str(exc)) from None
    ex.atomic_write(cfg.out_dir / "assignments.csv", lambda fh: ex.write_assignments(assignment, fh))
    sizes = {ex.group_name(g): len(assignment.patients_in(g)) for g in range(1, k + 1)}
    area_sizes = {f"O{g}": len(assignment.areas_in(g)) for g in range(1, k + 1)}
    ex.write_json(cfg.out_dir / "cocluster.json", {
        "k": k,
        "inertia": assignment.inertia,
        "singular_values": list(assignment.singular_values),
        "patient_group_sizes": sizes,
        "area_group_sizes": area_sizes,
        "dropped_patients": list(assignment.dropped_patients),
        "dropped_areas": list(assignment.dropped_areas),
    })


def stage_network(cfg: PipelineConfig) -> None:
    aprime = dm.read_area_matrix(_require(cfg.out_dir / "aprime.csv"))
    assignment = ex.read_assignments(_require(cfg.out_dir / "assignments.csv"))
    seed = stage_seed(cfg.seed, "network")
    rows, parts = [], []
    for g in sorted(set(assignment.patient_group.values())):
        net = build_network(aprime, assignment, g, tau=cfg.tau, min_actions=cfg.min_actions)
        m = metrics(net)
        part = louvain(net, seed=seed) if net.n_edges else None
        rows.append((g, m))
        if part is not None:
            parts.append((g, part))
        name = ex.group_name(g)
        ex.write_graphml(cfg.out_dir / f"network_{name}.graphml", net, part)
        ex.write_dot(cfg.out_dir / f"network_{name}.dot", net, part, name=name)
    ex.atomic_write(cfg.out_dir / "metrics.csv", lambda fh: ex.write_metrics(rows, fh))
    ex.atomic_write(cfg.out_dir / "communities.csv", lambda fh: ex.write_communities(parts, fh))
    ex.write_json(cfg.out_dir / "communities.json", {
        ex.group_name(g): {"n_communities": p.n_communities, "modularity": p.modularity,
                           "levels": list(p.levels)} for g, p in parts})


def stage_stats(cfg: PipelineConfig) -> None:
    cohort = dm.load_patients(_require(cfg.out_dir / "cohort.csv"))
    assignment = ex.read_assignments(_require(cfg.out_dir / "assignments.csv"))
    map_path = cfg.input_path("phewas_map.csv")
    mapping = dm.load_mapping(map_path) if map_path.exists() else None

    design = build_design(cohort, assignment, DesignConfig(mapping=mapping))
    fit = fit_nb(design)
    tests = all_pairwise_tests(design, fit)
    sim = similarity_report(cohort, assignment, mapping, FACTORS)

    out = cfg.out_dir
    fit_doc = ex.fit_to_dict(fit)
    fit_doc["reference_group"] = ex.group_name(design.reference_group)
    fit_doc["n"] = design.n
    ex.write_json(out / "fit.json", fit_doc)
    ex.atomic_write(out / "los_tests.csv", lambda fh: ex.write_los_tests(tests, fh))
    ex.atomic_write(out / "similarity.csv", lambda fh: ex.write_similarity(sim, fh))
    if not fit.converged:
        raise NonConvergence(f"negative binomial fit did not converge in {fit.iterations} iterations")


def stage_report(cfg: PipelineConfig) -> None:
    out = cfg.out_dir
    metrics_by_group = {}
    for row in ex.read_csv_rows(_require(out / "metrics.csv")):
        group = row.pop("group")
        metrics_by_group[group] = {k: (int(v) if k == "n_nodes" else float(v)) for k, v in row.items()}
    los = [{"group_a": r["group_a"], "group_b": r["group_b"], "delta_hours": float(r["delta_hours"]),
            "p_value": float(r["p_value"]), "ci95": [float(r["ci_low"]), float(r["ci_high"])]}
           for r in ex.read_csv_rows(_require(out / "los_tests.csv"))]
    sim = [{"pair": r["pair"], "factor": r["factor"], "pcc": float(r["pcc"]),
            "p_value": float(r["p_value"])}
           for r in ex.read_csv_rows(_require(out / "similarity.csv"))]
    report = {
        "network_metrics": metrics_by_group,
        "los_differences": los,
        "confounder_similarity": sim,
        "fit": json.loads(_require(out / "fit.json").read_text()),
    }
    for extra in ("ingest.json", "cocluster.json", "communities.json"):
        if (out / extra).exists():
            report[extra[:-5]] = json.loads((out / extra).read_text())
    ex.write_json(out / "report.json", report)


STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "cocluster": stage_cocluster,
    "network": stage_network,
    "stats": stage_stats,
    "report": stage_report,
}


def run_stage(name: str, cfg: PipelineConfig) -> None:
    cfg.validate()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    if name == "all":
        stages = STAGES if cfg.synthetic else STAGES[1:]
        for s in stages:
            log.info("stage %s", s)
            STAGE_FUNCS[s](cfg)
    else:
        STAGE_FUNCS[name](cfg)


# ---------------------------------------------------------------------------
# argument handling

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carecoord", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=STAGES + ("all",))
    p.add_argument("--config", help="TOML or JSON pipeline configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--choose-k", action="store_true", default=None,
                   help="select k by silhouette over [k_min, k_max] instead of using --k")
    p.add_argument("--tau", type=float)
    p.add_argument("--min-actions", type=int)
    p.add_argument("--min-age", type=int)
    p.add_argument("--keep-deaths", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--events")
    p.add_argument("--patients")
    p.add_argument("--phewas-map")
    p.add_argument("--synthetic", action="store_true", default=None,
                   help="with `all`: generate a synthetic cohort first")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def make_config(args) -> PipelineConfig:
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    flags = {"seed": args.seed, "k": args.k, "choose_k": args.choose_k, "tau": args.tau,
             "min_actions": args.min_actions, "min_age": args.min_age, "out": args.out,
             "events": args.events, "patients": args.patients, "phewas_map": args.phewas_map,
             "synthetic": args.synthetic}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.keep_deaths:
        values["exclude_deaths"] = False
    return PipelineConfig(**values)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        run_stage(args.command, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"data error: file not found: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_DATA
    except (dm.DataError, ValueError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

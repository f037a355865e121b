"""Artifact files: assignments, metrics, tests, graphs. All writes are atomic."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import networkx as nx

from .cocluster import CoClusterAssignment
from .datamodel import DataError
from .network import CommunityPartition, CoordinationNetwork, NetworkMetrics

METRIC_COLUMNS = ("group", "n_nodes", "avg_degree", "avg_weighted_degree", "density",
                  "avg_clustering", "avg_path_length")
LOS_COLUMNS = ("group_a", "group_b", "delta_hours", "p_value", "ci_low", "ci_high")
SIMILARITY_COLUMNS = ("pair", "factor", "pcc", "p_value")


def atomic_write(path, fn, binary=False):
    """Call ``fn(fh)`` on a temp file next to ``path``, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        mode = "wb" if binary else "w"
        kw = {} if binary else {"newline": "", "encoding": "utf-8"}
        with os.fdopen(fd, mode, **kw) as fh:
            fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, lambda fh: fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n"))


def group_name(g) -> str:
    return f"P{g}"


# ---------------------------------------------------------------------------
# assignments

def write_assignments(assignment: CoClusterAssignment, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("entity_type", "entity_id", "group"))
    for p in sorted(assignment.patient_group):
        w.writerow(("patient", p, assignment.patient_group[p]))
    for a in sorted(assignment.area_group):
        w.writerow(("area", a, assignment.area_group[a]))


def read_assignments(path, k: int | None = None, inertia: float = float("nan")) -> CoClusterAssignment:
    path = Path(path)
    patients, areas = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in ("entity_type", "entity_id", "group"):
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise DataError(f"{path}: missing required column {col!r}")
        for row in reader:
            target = {"patient": patients, "area": areas}.get(row["entity_type"])
            if target is None:
                raise DataError(f"{path}:{reader.line_num}: bad entity_type {row['entity_type']!r}")
            target[row["entity_id"]] = int(row["group"])
    groups = set(patients.values()) | set(areas.values())
    return CoClusterAssignment(k or (max(groups) if groups else 0), patients, areas, inertia)


# ---------------------------------------------------------------------------
# tables

def write_metrics(rows: list, fh):
    """``rows`` is a list of (group, NetworkMetrics)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for g, m in rows:
        w.writerow((group_name(g), m.n_nodes, repr(m.avg_degree), repr(m.avg_weighted_degree),
                    repr(m.density), repr(m.avg_clustering), repr(m.avg_path_length)))


def read_metrics(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append((row["group"], NetworkMetrics(int(row["n_nodes"]), float(row["avg_degree"]),
                                                     float(row["avg_weighted_degree"]),
                                                     float(row["density"]),
                                                     float(row["avg_clustering"]),
                                                     float(row["avg_path_length"]))))
    return out


def write_los_tests(tests: list, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LOS_COLUMNS)
    for t in tests:
        w.writerow((group_name(t.group_a), group_name(t.group_b), repr(float(t.delta_hours)),
                    repr(float(t.p_value)), repr(float(t.ci95[0])), repr(float(t.ci95[1]))))


def write_similarity(results: list, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SIMILARITY_COLUMNS)
    for r in results:
        w.writerow((f"{group_name(r.group_a)} v. {group_name(r.group_b)}", r.factor,
                    repr(float(r.pcc)), repr(float(r.p_value))))


def read_csv_rows(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def fit_to_dict(fit) -> dict:
    return {
        "names": list(fit.names),
        "coefficients": [float(c) for c in fit.coefficients],
        "std_errors": [float(s) for s in fit.std_errors],
        "dispersion": float(fit.dispersion),
        "loglik": float(fit.loglik),
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
    }


# ---------------------------------------------------------------------------
# graphs

def to_networkx(net: CoordinationNetwork, partition: CommunityPartition | None = None) -> nx.Graph:
    g = nx.Graph()
    for n in net.nodes:
        attrs = {"area_id": n}
        if partition is not None:
            attrs["community"] = int(partition.community[n])
        g.add_node(n, **attrs)
    for a, b, w in net.edges:
        g.add_edge(a, b, weight=float(w))
    for n, d in g.degree():
        g.nodes[n]["degree"] = int(d)
    return g


def graphml_bytes(net: CoordinationNetwork, partition: CommunityPartition | None = None) -> bytes:
    buf = io.BytesIO()
    nx.write_graphml(to_networkx(net, partition), buf)
    return buf.getvalue()


def write_graphml(path, net, partition=None):
    data = graphml_bytes(net, partition)
    atomic_write(path, lambda fh: fh.write(data), binary=True)


def dot_text(net: CoordinationNetwork, partition: CommunityPartition | None = None,
             name: str = "coordination") -> str:
    """Undirected DOT graph; node ``width`` grows with degree."""
    deg = dict(zip(net.nodes, net.degrees().tolist()))
    top = max(deg.values(), default=0) or 1
    lines = [f'graph "{name}" {{']
    for n in net.nodes:
        attrs = [f'area_id="{n}"', f"degree={deg[n]}", f"width={0.3 + 1.2 * deg[n] / top:.4f}"]
        if partition is not None:
            attrs.append(f"community={partition.community[n]}")
        lines.append(f'  "{n}" [{", ".join(attrs)}];')
    for a, b, w in net.edges:
        lines.append(f'  "{a}" -- "{b}" [weight={w!r}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_dot(path, net, partition=None, name="coordination"):
    text = dot_text(net, partition, name)
    atomic_write(path, lambda fh: fh.write(text))


def write_communities(rows: list, fh):
    """``rows``: (group, CommunityPartition)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("group", "area_id", "community"))
    for g, part in rows:
        for area in sorted(part.community):
            w.writerow((group_name(g), area, part.community[area]))

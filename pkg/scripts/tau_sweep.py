"""Network metrics per patient group as the cosine edge threshold tau varies.

    python scripts/tau_sweep.py --taus 0 0.05 0.1 0.2 0.3
"""

import argparse

from carecoord.cocluster import cocluster
from carecoord.datamodel import aggregate_by_area, apply_cohort_filters
from carecoord.network import build_network, louvain, metrics
from carecoord.synth import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--taus", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2, 0.3])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--min-actions", type=int, default=1)
    args = ap.parse_args()

    cohort = generate(SynthConfig(seed=args.seed))
    keep = {p.patient_id for p in apply_cohort_filters(cohort.patients)}
    aprime = aggregate_by_area([e for e in cohort.events if e.patient_id in keep])
    asg = cocluster(aprime, k=3, seed=args.seed)
    print("tau,group,n_nodes,avg_degree,avg_weighted_degree,density,avg_clustering,avg_path_length,"
          "communities,modularity")
    for tau in args.taus:
        for g in (1, 2, 3):
            net = build_network(aprime, asg, g, tau=tau, min_actions=args.min_actions)
            m = metrics(net)
            part = louvain(net, seed=args.seed) if net.n_edges else None
            print(f"{tau},P{g},{m.n_nodes},{m.avg_degree:.2f},{m.avg_weighted_degree:.2f},{m.density:.3f},"
                  f"{m.avg_clustering:.3f},{m.avg_path_length:.3f},"
                  f"{part.n_communities if part else 0},{part.modularity if part else float('nan'):.3f}")


if __name__ == "__main__":
    main()

"""Care-coordination pattern mining from EMR access logs."""

from .cocluster import CoClusterAssignment, choose_k
from .datamodel import AccessEvent, AreaUtilizationMatrix, CodeMapping, PatientRecord
from .network import CoordinationNetwork, NetworkMetrics, louvain, metrics, modularity
from .stats import fit_nb, pairwise_los_test, pcc, pcc_pvalue, similarity_report
from .synth import SynthConfig, ari, generate

__version__ = "0.1.0"

__all__ = [
    "AccessEvent", "AreaUtilizationMatrix", "CoClusterAssignment", "CodeMapping",
    "CoordinationNetwork", "NetworkMetrics", "PatientRecord", "SynthConfig", "ari", "choose_k",
    "fit_nb", "generate", "louvain", "metrics", "modularity", "pairwise_los_test", "pcc",
    "pcc_pvalue", "similarity_report",
]

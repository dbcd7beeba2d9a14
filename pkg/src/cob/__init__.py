"""Leaderless multidimensional Byzantine agreement: node logic, simulator, adversaries and cost model."""

from .analysis import cob_weight, expected_cob_steps
from .cob_node import NodeState, verify_certificate
from .gossip_sim import RunMetrics, SimConfig, replay, run
from .sortition import SortitionParams, check_assumptions, min_committee_size

__all__ = [
    "NodeState",
    "RunMetrics",
    "SimConfig",
    "SortitionParams",
    "check_assumptions",
    "cob_weight",
    "expected_cob_steps",
    "min_committee_size",
    "replay",
    "run",
    "verify_certificate",
]

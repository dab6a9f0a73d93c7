"""Multi-norm adversarial robustness laboratory.

Submodules: ``geometry`` (lp-ball union and convex-hull radii), ``netcore``
(dense classifier with manual backprop), ``attacks`` (PGD and MSD),
``training`` (single-norm, SAT, AVG, MAX, MSD and E-AT schemes),
``evaluation`` (reports, curves, sweeps) and ``data_io`` (datasets, IDX,
checkpoints, config files).
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, Norm, ThreatSpec, ThreatUnion, msd_attack, pgd_attack, robust_radius
from .evaluation import RobustnessReport, evaluate, robustness_curve
from .geometry import (
    GeometryQuery,
    RegionKind,
    l2_union_upper_bound,
    min_lp_outside_hull,
    min_lp_outside_union,
    nontrivial_range,
)
from .netcore import Network, init_network
from .training import Scheme, TrainConfig, finetune, finetune_config, train

__all__ = [
    "AttackConfig", "GeometryQuery", "Network", "Norm", "RegionKind", "RobustnessReport", "Scheme",
    "ThreatSpec", "ThreatUnion", "TrainConfig", "evaluate", "finetune", "finetune_config", "init_network",
    "l2_union_upper_bound", "min_lp_outside_hull", "min_lp_outside_union", "msd_attack", "nontrivial_range",
    "pgd_attack", "robust_radius", "robustness_curve", "train",
]

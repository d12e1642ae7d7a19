"""Offline layer: searches over switch schedules, learners and the catalog."""
from .bb import BBNode, BBResult, bb_solve
from .build import BuildReport, CatalogBuildConfig, build_catalog, lattice
from .catalog import CatalogEntry, CatalogStore, catalog_insert, catalog_query_value, value_function
from .features import (
    entry_from_evaluation,
    feature_scale,
    initial_summary,
    terminal_dim,
    terminal_state,
)
from .heuristics import (
    GreedyResult,
    HierarchicalResult,
    greedy_improve,
    hierarchical_solve,
    open_fraction,
    prefix_deviation,
    sum_up_rounding,
)
from .learners import (
    BucketedPolicy,
    Clusters,
    FeasibilityClassifier,
    Standardizer,
    classifier_fit,
    classifier_loss,
    classifier_predict,
    classifier_update,
    domains_of_attraction,
    q_update,
    rl_episode,
)
from .problems import OCPSwitchProblem, RelaxResult, SwitchProblem, ToyCascade, enumerate_binary

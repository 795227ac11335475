"""dtrkit: evaluation and learning of sequential decision policies.

The package estimates the value of dynamic treatment regimes / sequential
decision policies from observational data with cross-fitted doubly robust
scores, learns policies by exact tree search, doubly robust action-value or
contrast regression and plain backward induction, and provides influence-curve
based inference (delta-method contrasts, clustered standard errors,
conditional values).
"""

from .data import (
    HistoryTable,
    PolicyData,
    StageRecord,
    Trajectory,
    augment_stages,
    ingest_long,
    ingest_wide,
    partial_stages,
    utility,
)
from .errors import (
    AlignmentError,
    ConfigError,
    DomainError,
    DtrkitError,
    DuplicateKeyError,
    FitError,
    FormatError,
    InvalidValueError,
    PositivityError,
    SchemaError,
    StageRangeError,
    StructureError,
)
from .evaluation import (
    EvalResult,
    ScoreMatrix,
    clustered_variance,
    conditional_value,
    contrast,
    dr_scores,
    merge_results,
    policy_eval,
    value_dr,
    value_ipw,
    value_of_learner,
    value_or,
)
from .formula import DesignMatrix, DesignSpec, build_design, parse_formula
from .glm import fit_logistic, fit_multinomial, fit_ols
from .learning import (
    BlipLearner,
    DRQLearner,
    PolicyObject,
    QLearner,
    TreeSearchLearner,
    WeightedClassificationLearner,
    get_policy,
    get_policy_functions,
)
from .nuisance import FoldAssignment, ModelSpec, fit_g, g_spec, make_folds, q_spec
from .policy import (
    CallableRule,
    LinearThresholdRule,
    Policy,
    RealisticActionSet,
    StaticRule,
    TableRule,
    apply_policy,
    deserialize_policy,
    overrule_unrealistic,
    realistic_set,
    serialize_policy,
    static_policy,
)
from .simulate import (
    SingleStageParams,
    TwoStageParams,
    mc_value_oracle,
    optimal_policy_single,
    optimal_policy_two_stage,
    optimal_value_single,
    sim_single_stage,
    sim_two_stage,
)
from .tree import PolicyTree, exact_tree_search, predict_tree

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

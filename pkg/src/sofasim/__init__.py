"""sofasim: deterministic simulator and analysis toolkit for self-organized
fund allocation, where equal base grants circulate through mandatory
fractional peer donations until funding levels reach a stationary point."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    ConvergenceError,
    EmptyRowError,
    EmptyTargetError,
    InsufficientHistoryError,
    OutputLockError,
    SizeGuardError,
    SofaError,
    UndefinedMetricError,
    ValidationError,
)
from .population import (
    Agent,
    CoauthorEdge,
    Community,
    CommunitySpec,
    generate_community,
    load_community,
    save_community,
)
from .mechanism import (
    AllocationPlan,
    FixedPointResult,
    FundingState,
    TwoPhaseOutcome,
    base_vector,
    closed_form_totals,
    donation_step,
    retained,
    run_fixed_point,
    transfer_amounts,
    two_phase_round,
)
from .policy import (
    PolicyConfig,
    Predicate,
    apply_group_multiplier,
    attach_super_node,
    partition_budgets,
    predicate_plan,
    resolve_fractions,
)
from .integrity import (
    CartelFlag,
    CartelThresholds,
    CoiRules,
    ConflictSet,
    DonationLedger,
    IntegrityReport,
    TransferRecord,
    apply_penalties,
    audit_conflicted_transfers,
    build_integrity_report,
    detect_cartels,
    detect_conflicts,
    mask_plan,
    mask_plan_with_fallback,
)
from .metrics import (
    CostReport,
    MetricsReport,
    build_metrics_report,
    cost_model,
    gini,
    lorenz,
    per_group_shares,
    top_share,
)
from .simulation import (
    PriorView,
    ScenarioConfig,
    ScenarioResult,
    Strategy,
    StrategyAssignment,
    SweepPoint,
    SweepResult,
    propose_plans,
    run_scenario,
    sweep,
)
from .config import config_hash, parse_and_validate_config, parse_config_dict

__all__ = [name for name in dir() if not name.startswith("_")]

from .experiments import (
    AblationCell,
    ExperimentReport,
    ReportRow,
    RobustOutcome,
    ablation_sweep,
    attack_for,
    attack_rows,
    evaluate_robust,
    gradient_concentration,
    robust_outcome,
    run_cell,
    seed_mean,
    robustness_table,
    train_configured,
    write_ablation_csv,
)
from .geometry import AlignmentPhase, MassSplit, alignment_phase, mass_decomposition, mean_abs_ratio
from .trace import (
    RecoveryReport,
    TraceResult,
    TrajectoryRecord,
    median_recovery_ratio,
    recovery_margin,
    trace_attack,
)

__all__ = [
    "AblationCell",
    "AlignmentPhase",
    "ExperimentReport",
    "MassSplit",
    "RecoveryReport",
    "ReportRow",
    "RobustOutcome",
    "TraceResult",
    "TrajectoryRecord",
    "ablation_sweep",
    "alignment_phase",
    "attack_for",
    "attack_rows",
    "evaluate_robust",
    "gradient_concentration",
    "mass_decomposition",
    "mean_abs_ratio",
    "median_recovery_ratio",
    "recovery_margin",
    "robust_outcome",
    "run_cell",
    "seed_mean",
    "robustness_table",
    "trace_attack",
    "train_configured",
    "write_ablation_csv",
]

from .emit import (emit_learning_curves, emit_table, emit_tunability_plot, format_accuracy,
                   format_loss, latex_escape, summary_lines)
from .report import BenchmarkReport, ReportEntry, build_report
from .stats import (BASELINE_OPTIMIZERS, AggregateCurve, AnalysisError, ConvergenceThreshold,
                    DivergedBaselineError, MissingBaselineError, MixedConfigError, aggregate,
                    derive_thresholds, speed, speed_per_seed)
from .store import BaselineStore

__all__ = [
    "AggregateCurve", "AnalysisError", "BASELINE_OPTIMIZERS", "BaselineStore", "BenchmarkReport",
    "ConvergenceThreshold", "DivergedBaselineError", "MissingBaselineError", "MixedConfigError",
    "ReportEntry", "aggregate", "build_report", "derive_thresholds", "emit_learning_curves",
    "emit_table", "emit_tunability_plot", "format_accuracy", "format_loss", "latex_escape",
    "speed", "speed_per_seed", "summary_lines",
]

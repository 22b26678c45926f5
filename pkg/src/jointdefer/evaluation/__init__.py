from .metrics import (MetricsRecord, OutcomeCounts, binary_f1, compute_metrics, evaluate_model,
                      format_table, load_metrics_json, macro_f1, metrics_to_json, outcome_matrix)

__all__ = ["MetricsRecord", "OutcomeCounts", "binary_f1", "compute_metrics", "evaluate_model",
           "format_table", "load_metrics_json", "macro_f1", "metrics_to_json", "outcome_matrix"]

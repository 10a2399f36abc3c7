from .plan import (CellResult, ExperimentPlan, emit_report, generate_attack_pool,
                   parse_config_text, plan_from_config, read_report_csv,
                   run_cell, run_plan, select_attack_pool)

__all__ = [
    "CellResult", "ExperimentPlan", "emit_report", "generate_attack_pool",
    "parse_config_text", "plan_from_config", "read_report_csv", "run_cell",
    "run_plan", "select_attack_pool",
]

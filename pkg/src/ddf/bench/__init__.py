from .datagen import DEFAULT_SCHEMA, generate_partition, generate_table
from .runner import (BenchConfig, BenchError, CalibrationResult, ScalingResult, StageTiming, TimingReport,
                     calibrate, expected_stages, fit_hockney, fit_kappa, predict_vs_measured,
                     run_benchmark, scaling_suite)

__all__ = [
    "DEFAULT_SCHEMA", "generate_partition", "generate_table", "BenchConfig", "BenchError",
    "CalibrationResult", "ScalingResult", "StageTiming", "TimingReport", "calibrate", "expected_stages",
    "fit_hockney", "fit_kappa", "predict_vs_measured", "run_benchmark", "scaling_suite",
]

from .io import (METRICS_HEADER, TrajectoryRecord, dump_trajectories, load_trajectories, read_metrics_csv,
                 write_metrics_csv)
from .runner import RunReport, compare_algorithms, final_success, run_experiment

__all__ = ["METRICS_HEADER", "RunReport", "TrajectoryRecord", "compare_algorithms", "dump_trajectories",
           "final_success", "load_trajectories", "read_metrics_csv", "run_experiment", "write_metrics_csv"]

"""
The TsfLab package simulates backdoor poisoning of multivariate time-series
forecasting data and trains forecasters with a channel-wise reliable-pool defense.

An attacker picks a subset of channels and a set of timestamps in the training
segment, writes a trigger into the history before each timestamp and a target
pattern (cone, up_trend or up_and_down) after it. A forecaster trained on that
data learns to emit the pattern whenever the trigger shows up at test time.

The defense scores every (window, channel) pair by how well it correlates with
its k nearest neighbors, keeps a reliable pool of the best-scoring pairs after a
short warm-up, and retrains while growing the pool from the lowest-loss pairs.

The following names are exposed to be used by the library user:
- TimeSeriesDataset, WindowSpec, SplitSpec, ingest_csv, split, window_arrays:
    data representation and windowing.
- AttackSpec, PoisonRecord, build_attack: the poisoning threat model.
- TrainConfig, Checkpoint: the reference forecasters.
- DefenseConfig, run_timeguard: the two-stage defense.
- MetricsReport, fder, mae_clean, mae_poisoned: evaluation.
- ExperimentConfig, parse_config, run_pipeline: end-to-end experiments.

Experiments are configured with a JSON file, for example:

    {"data": "synthetic", "seed": 1, "defense": {"alpha": 0.2, "k": 20}}

and run with `tsflab run --config experiment.json --out results`. The number of
threads used for the neighbor search is read from the TSFLAB_THREADS
environment variable.
"""

from importlib.metadata import version

from TsfLab.attack_sim import AttackSpec, PoisonRecord, build_attack
from TsfLab.config import ExperimentConfig, parse_config
from TsfLab.defense import DefenseConfig, run_timeguard
from TsfLab.forecaster import Checkpoint, TrainConfig
from TsfLab.metrics import MetricsReport, fder, mae_clean, mae_poisoned
from TsfLab.pipeline import run_pipeline
from TsfLab.series_core import (
    SplitSpec,
    TimeSeriesDataset,
    WindowSpec,
    ingest_csv,
    split,
    window_arrays,
)

try:
    __version__ = version("tsflab")
except Exception:  # pragma: no cover
    pass

__all__ = [
    "AttackSpec",
    "PoisonRecord",
    "build_attack",
    "ExperimentConfig",
    "parse_config",
    "DefenseConfig",
    "run_timeguard",
    "Checkpoint",
    "TrainConfig",
    "MetricsReport",
    "fder",
    "mae_clean",
    "mae_poisoned",
    "run_pipeline",
    "SplitSpec",
    "TimeSeriesDataset",
    "WindowSpec",
    "ingest_csv",
    "split",
    "window_arrays",
]

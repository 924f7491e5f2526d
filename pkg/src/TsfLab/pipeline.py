"""
Experiment workflows: poison a dataset, train the undefended and the defended forecaster
on the same poisoned training segment, evaluate both and write the artifacts.

The attacker scales its trigger with the statistics of the clean training segment;
the forecasters are normalized with the statistics of the poisoned one, which is
all the defender sees.
"""

import json
from contextlib import contextmanager
from dataclasses import dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from TsfLab.attack_sim import PoisonRecord, build_attack, label_windows
from TsfLab.config import ExperimentConfig
from TsfLab.defense import DefenseConfig, DefenseResult, run_timeguard, sweep
from TsfLab.errors import PipelineError, TsfLabError
from TsfLab.forecaster import Checkpoint, Optimizer, init_params, train_epochs, window_losses
from TsfLab.metrics import (
    MetricsReport,
    fder,
    loss_trajectory,
    mae_clean,
    mae_poisoned,
    neighborhood_stats,
    pool_quality,
)
from TsfLab.neighborhood import NeighborCache, build_cache, neighborhood_scores
from TsfLab.series_core import (
    FloatArray,
    IntArray,
    Normalizer,
    TimeSeriesDataset,
    WindowArrays,
    concatenate,
    fit_normalizer,
    ingest_csv,
    split,
    window_arrays,
    write_csv,
)
from TsfLab.synthetic import make_synthetic

logger = getLogger(__name__)

POISONED_CSV = "poisoned.csv"
POISON_RECORD = "poison_record.json"
MODEL_UNDEFENDED = "model_undefended.json"
MODEL_DEFENDED = "model_defended.json"
REPORT = "report.json"
POOL_HISTORY = "pool_history.json"
NEIGHBOR_CACHE = "neighbor_cache.json"
DIAGNOSTICS = "diagnostics"
LOSS_TRAJECTORY_CSV = "loss_trajectory.csv"
NEIGHBORHOOD_STATS_CSV = "neighborhood_stats.csv"
SWEEP_CSV = "sweep.csv"


@contextmanager
def step(module: str) -> Iterator[None]:
    """Re-raise library errors of a pipeline step as PipelineError naming the module."""
    try:
        yield
    except PipelineError:
        raise
    except (TsfLabError, ValueError) as exception:
        raise PipelineError(module, exception) from exception


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays (also nested) into plain Python values."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> None:
    Path(path).write_text(
        json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_dataset(config: ExperimentConfig) -> TimeSeriesDataset:
    source = config.require_data()
    with step("series-core"):
        if config.uses_synthetic_data:
            return make_synthetic(config.synthetic)
        return ingest_csv(source, has_header=config.has_header)


def poison_dataset(
    config: ExperimentConfig, dataset: TimeSeriesDataset
) -> Tuple[TimeSeriesDataset, PoisonRecord]:
    """Poison the training segment; validation and test segments stay clean."""
    with step("series-core"):
        train, val, test = split(dataset, config.split, config.window)
    with step("attack-sim"):
        poisoned_train, record = build_attack(train, config.attack, fit_normalizer(train))
    return concatenate([poisoned_train, val, test]), record


def normalized_windows(
    dataset: TimeSeriesDataset, normalizer: Normalizer, config: ExperimentConfig
) -> WindowArrays:
    return window_arrays(dataset.with_values(normalizer.transform(dataset.values)), config.window)


@dataclass
class TrainingData:
    normalizer: Normalizer
    windows: WindowArrays
    labels: Optional[IntArray] = None


def training_data(
    dataset: TimeSeriesDataset, config: ExperimentConfig, record: Optional[PoisonRecord] = None
) -> TrainingData:
    """Normalized windows of the training segment, labelled when the record is known."""
    with step("series-core"):
        train, _, _ = split(dataset, config.split, config.window)
        normalizer = fit_normalizer(train)
        windows = normalized_windows(train, normalizer, config)
    labels = None
    if record is not None:
        with step("attack-sim"):
            labels = label_windows(record, windows.anchors, windows.n_channels, config.window)
    return TrainingData(normalizer=normalizer, windows=windows, labels=labels)


def holdout_windows(dataset: TimeSeriesDataset, config: ExperimentConfig) -> WindowArrays:
    """Raw (data unit) windows of the test segment."""
    with step("series-core"):
        _, _, test = split(dataset, config.split, config.window)
        return window_arrays(test, config.window)


def train_undefended(
    data: TrainingData, config: ExperimentConfig, record_losses: bool = False
) -> Tuple[Checkpoint, List[FloatArray]]:
    """Plain training on every window; optionally keeps per-epoch N x C losses."""
    windows = data.windows
    trajectory: List[FloatArray] = []

    def record(_: int, model: Any) -> None:
        trajectory.append(window_losses(model, windows.histories, windows.futures))

    with step("forecaster"):
        rng = np.random.default_rng(config.train.seed)
        model = init_params(
            config.model.architecture,
            config.window.l_in,
            config.window.l_out,
            windows.n_channels,
            rng,
            config.model.hidden,
        )
        train_epochs(
            model,
            windows.histories,
            windows.futures,
            np.ones((len(windows), windows.n_channels)),
            config.train,
            config.undefended_epochs,
            rng=rng,
            optimizer=Optimizer(config.train.optimizer, config.train.learning_rate),
            callback=record if record_losses else None,
        )
    logger.info(f"undefended model trained for {config.undefended_epochs} epochs")
    return Checkpoint(model=model, normalizer=data.normalizer), trajectory


def train_defended(
    data: TrainingData,
    config: ExperimentConfig,
    defense: Optional[DefenseConfig] = None,
    cache: Optional[NeighborCache] = None,
) -> Tuple[Checkpoint, DefenseResult]:
    with step("defense"):
        result = run_timeguard(
            data.windows,
            config.model.architecture,
            defense or config.defense,
            config.train,
            hidden=config.model.hidden,
            labels=data.labels,
            cache=cache,
        )
    return Checkpoint(model=result.model, normalizer=data.normalizer), result


def evaluate_checkpoint(
    checkpoint: Checkpoint, windows: WindowArrays, record: Optional[PoisonRecord]
) -> MetricsReport:
    with step("metrics"):
        report = MetricsReport(
            mae_c=mae_clean(checkpoint, windows),
            normalization=checkpoint.normalizer.to_dict(),
        )
        if record is not None:
            report.mae_p = mae_poisoned(
                checkpoint, windows, record.trigger, record.template, record.channels
            )
    return report


def rate_defense(undefended: MetricsReport, defended: MetricsReport) -> float:
    if undefended.mae_p is None or defended.mae_p is None:
        raise PipelineError("metrics", ValueError("FDER needs MAE_P of both models"))
    with step("metrics"):
        return fder(undefended.mae_c, undefended.mae_p, defended.mae_c, defended.mae_p)


def neighborhood_scores_full(cache: NeighborCache, k: int) -> FloatArray:
    """N x C scores with every window in the neighbor pool."""
    everything = np.ones(cache.n_windows, dtype=bool)
    return np.stack(
        [neighborhood_scores(cache, channel, everything, k) for channel in range(cache.n_channels)],
        axis=1,
    )


def analyze_neighbors(
    data: TrainingData, config: ExperimentConfig, k: int, sigma: float
) -> Tuple[NeighborCache, pd.DataFrame]:
    """Neighbor cache of the training windows and per-label score statistics."""
    with step("neighborhood"):
        windows = data.windows
        cache = build_cache(
            [windows.channel_full(channel) for channel in range(windows.n_channels)],
            config.window.l_in,
            max(k, 2 * k if config.defense.k_max is None else config.defense.k_max),
            sigma,
        )
        scores = neighborhood_scores_full(cache, k)
    labels = data.labels
    if labels is None:
        labels = np.zeros(scores.shape, dtype=np.int64)
    with step("metrics"):
        return cache, neighborhood_stats(scores, labels)


def _variant_row(
    name: str, report: MetricsReport, baseline: MetricsReport
) -> Dict[str, Any]:
    return {
        "variant": name,
        "mae_c": report.mae_c,
        "mae_p": report.mae_p,
        "fder": rate_defense(baseline, report),
    }


def run_pipeline(config: ExperimentConfig, dry_run: bool = False) -> Dict[str, Any]:  # pylint: disable=too-many-locals
    """
    Full experiment: poison, train undefended and defended, evaluate, write artifacts.

    Returns the report that is written to report.json. With ``dry_run`` the
    configuration is validated and nothing is written.
    """
    config.require_data()
    provenance = config.provenance()
    report: Dict[str, Any] = {"config": config.to_dict(), **provenance}
    if dry_run:
        logger.info(f"configuration {report['config_hash'][:12]} is valid; dry run")
        return report

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config)
    poisoned, record = poison_dataset(config, dataset)
    write_csv(poisoned, out / POISONED_CSV)
    record.save(out / POISON_RECORD, provenance)

    data = training_data(poisoned, config, record)
    evaluation_windows = holdout_windows(poisoned, config)

    undefended, trajectory = train_undefended(data, config, record_losses=config.diagnostics)
    undefended.save(out / MODEL_UNDEFENDED, provenance)
    undefended_report = evaluate_checkpoint(undefended, evaluation_windows, record)

    defended, result = train_defended(data, config)
    defended.save(out / MODEL_DEFENDED, provenance)
    write_json(result.pool_history(config.defense, provenance), out / POOL_HISTORY)
    defended_report = evaluate_checkpoint(defended, evaluation_windows, record)
    defended_report.fder = rate_defense(undefended_report, defended_report)
    assert data.labels is not None
    with step("metrics"):
        defended_report.with_pool(pool_quality(result.pool.mask, data.labels))

    variants = [_variant_row("timeguard", defended_report, undefended_report)]
    for ablation in config.ablations:
        variant_config = config.defense.with_ablations([ablation])
        variant, _ = train_defended(data, config, variant_config, cache=result.cache)
        variant_report = evaluate_checkpoint(variant, evaluation_windows, record)
        variants.append(_variant_row(ablation, variant_report, undefended_report))

    report.update(
        {
            "attack": {
                "channels": list(record.channels),
                "sites": len(record.timestamps),
                "l_tgr": record.l_tgr,
                "l_ptn": record.l_ptn,
            },
            "undefended": undefended_report.to_dict(),
            "defended": defended_report.to_dict(),
            "fder_inputs": {
                "mae_c_undefended": undefended_report.mae_c,
                "mae_p_undefended": undefended_report.mae_p,
                "mae_c": defended_report.mae_c,
                "mae_p": defended_report.mae_p,
            },
            "variants": variants,
        }
    )
    write_json(report, out / REPORT)

    if config.diagnostics:
        diagnostics = out / DIAGNOSTICS
        diagnostics.mkdir(exist_ok=True)
        with step("metrics"):
            frame = loss_trajectory(trajectory, data.labels)
        frame.to_csv(diagnostics / LOSS_TRAJECTORY_CSV, index=False, lineterminator="\n")
        _, stats = analyze_neighbors(data, config, config.defense.k, config.defense.sigma)
        stats.to_csv(diagnostics / NEIGHBORHOOD_STATS_CSV, index=False, lineterminator="\n")
    logger.info(
        f"FDER {defended_report.fder:.3f}: MAE_C {undefended_report.mae_c:.4f} -> "
        f"{defended_report.mae_c:.4f}, MAE_P {undefended_report.mae_p:.4f} -> "
        f"{defended_report.mae_p:.4f}"
    )
    return report


def run_sweep(
    config: ExperimentConfig, parameter: str, values: Sequence[float]
) -> pd.DataFrame:
    """Sensitivity of the defense to one DefenseConfig field; writes sweep.csv."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config)
    poisoned, record = poison_dataset(config, dataset)
    data = training_data(poisoned, config, record)
    evaluation_windows = holdout_windows(poisoned, config)
    undefended, _ = train_undefended(data, config)
    baseline = evaluate_checkpoint(undefended, evaluation_windows, record)

    def run(defense: DefenseConfig) -> Dict[str, float]:
        checkpoint, _ = train_defended(data, config, defense)
        defended = evaluate_checkpoint(checkpoint, evaluation_windows, record)
        assert defended.mae_p is not None
        return {
            "mae_c": defended.mae_c,
            "mae_p": defended.mae_p,
            "fder": rate_defense(baseline, defended),
        }

    with step("defense"):
        rows = sweep(config.defense, parameter, values, run)
    frame = pd.DataFrame(rows)
    frame.to_csv(out / SWEEP_CSV, index=False, lineterminator="\n")
    return frame


def with_defense(config: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    """Copy of the config with DefenseConfig fields replaced (None values are ignored)."""
    updates = {key: value for key, value in changes.items() if value is not None}
    if not updates:
        return config
    with step("defense"):
        return replace(config, defense=replace(config.defense, **updates))

"""Forecasting errors, the defense effectiveness rating and pool / training diagnostics."""

from dataclasses import asdict, dataclass, field
from logging import getLogger
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from TsfLab.attack_sim import WindowLabel, inject_test, target_for
from TsfLab.errors import WindowError
from TsfLab.forecaster import Checkpoint
from TsfLab.series_core import BoolArray, FloatArray, IntArray, WindowArrays

logger = getLogger(__name__)

HISTOGRAM_BINS = 20
HISTOGRAM_RANGE = (0.0, 2.0)


def mae_clean(checkpoint: Checkpoint, windows: WindowArrays) -> float:
    """Mean absolute forecast error over every test window, channel and horizon step."""
    if len(windows) == 0:
        raise WindowError("cannot compute MAE_C on an empty test set")
    forecasts = checkpoint.forecast(windows.histories)
    return float(np.mean(np.abs(forecasts - windows.futures)))


def trigger_windows(n_windows: int, l_tgr: int) -> IntArray:
    """Indices of the test windows that receive a trigger: every l_tgr-th window."""
    return np.arange(0, n_windows, max(1, l_tgr), dtype=np.int64)


def mae_poisoned(
    checkpoint: Checkpoint,
    windows: WindowArrays,
    trigger: FloatArray,
    template: FloatArray,
    channels: Sequence[int],
) -> float:
    """
    Mean absolute error between forecasts of triggered test histories and the attacker target.

    Only the attacked channels and the first l_ptn horizon steps count; the target
    baseline is read from the history before the trigger is written.
    """
    channels = list(channels)
    if not channels:
        raise ValueError("MAE_P needs at least one attacked channel")
    if len(windows) == 0:
        raise WindowError("cannot compute MAE_P on an empty test set")
    l_tgr, l_ptn = trigger.shape[0], template.shape[0]
    if l_ptn > windows.futures.shape[1]:
        raise WindowError(f"pattern of {l_ptn} steps is longer than the forecast horizon")
    selected = trigger_windows(len(windows), l_tgr)
    originals = windows.histories[selected]
    triggered = np.stack([inject_test(history, trigger, channels) for history in originals])
    targets = np.stack(
        [target_for(history, template, channels, l_tgr) for history in originals]
    )
    forecasts = checkpoint.forecast(triggered)[:, :l_ptn, channels]
    return float(np.mean(np.abs(forecasts - targets)))


def fder(mae_c_undefended: float, mae_p_undefended: float, mae_c: float, mae_p: float) -> float:
    """
    Forecasting defense effectiveness rating in [0, 1]; 0.5 means the defense changed nothing.

    The relative attack gain 1 - MAE_P,und / MAE_P and the relative clean penalty
    1 - MAE_C,und / MAE_C are clamped at zero before they are combined.
    """
    values = (mae_c_undefended, mae_p_undefended, mae_c, mae_p)
    if min(values) <= 0:
        raise ValueError(f"FDER needs positive MAE values, got {values}")
    attack_gain = max(0.0, 1.0 - mae_p_undefended / mae_p)
    clean_penalty = max(0.0, 1.0 - mae_c_undefended / mae_c)
    return (attack_gain - clean_penalty + 1.0) / 2.0


@dataclass(frozen=True)
class PoolQuality:
    precision: float
    recall: float
    poisoned_in_pool: float
    poisoned_base_rate: float


def pool_quality(pool: BoolArray, labels: IntArray) -> PoolQuality:
    """Clean precision and recall of a reliable pool mask (N x C) against window labels."""
    pool = np.asarray(pool, dtype=bool)
    if pool.shape != labels.shape:
        raise ValueError(f"pool shape {pool.shape} does not match labels {labels.shape}")
    pool_size = int(pool.sum())
    if pool_size == 0:
        raise ValueError("the reliable pool is empty")
    clean = labels == WindowLabel.CLEAN
    poisoned = labels == WindowLabel.TRIGGER_POISONED
    n_clean = int(clean.sum())
    return PoolQuality(
        precision=float((clean & pool).sum() / pool_size),
        recall=float((clean & pool).sum() / n_clean) if n_clean else 0.0,
        poisoned_in_pool=float((poisoned & pool).sum() / pool_size),
        poisoned_base_rate=float(poisoned.mean()),
    )


def attacked_columns(labels: IntArray) -> BoolArray:
    """Channels that hold at least one non-clean window."""
    return np.any(labels != WindowLabel.CLEAN, axis=0)


def loss_trajectory(epoch_losses: Sequence[FloatArray], labels: IntArray) -> pd.DataFrame:
    """
    Mean training loss per epoch of clean and of trigger-poisoned channel-windows.

    Statistics are taken on the attacked channels when there are any. The poisoned
    column is NaN when no window is trigger-poisoned.
    """
    columns = attacked_columns(labels)
    if not np.any(columns):
        columns = np.ones(labels.shape[1], dtype=bool)
    scoped = labels[:, columns]
    clean = scoped == WindowLabel.CLEAN
    poisoned = scoped == WindowLabel.TRIGGER_POISONED
    if not np.any(poisoned):
        logger.warning("no trigger-poisoned windows; the poisoned loss series is empty")
    rows = []
    for epoch, all_losses in enumerate(epoch_losses, start=1):
        losses = all_losses[:, columns]
        rows.append(
            {
                "epoch": epoch,
                "clean": float(losses[clean].mean()) if np.any(clean) else np.nan,
                "trigger_poisoned": float(losses[poisoned].mean())
                if np.any(poisoned)
                else np.nan,
            }
        )
    return pd.DataFrame(rows, columns=["epoch", "clean", "trigger_poisoned"])


def neighborhood_stats(scores: FloatArray, labels: IntArray) -> pd.DataFrame:
    """
    Mean, median and a [0, 2] histogram of neighborhood scores per channel group and label.

    Groups are the attacked channels and the clean channels; label groups without
    members are left out.
    """
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} does not match labels {labels.shape}")
    attacked = attacked_columns(labels)
    bin_names = [f"bin_{index:02d}" for index in range(HISTOGRAM_BINS)]
    rows: List[Dict[str, Any]] = []
    for group, columns in (("poisoned_channels", attacked), ("clean_channels", ~attacked)):
        for label in WindowLabel:
            members = scores[:, columns][labels[:, columns] == label]
            if members.shape[0] == 0:
                continue
            counts, _ = np.histogram(members, bins=HISTOGRAM_BINS, range=HISTOGRAM_RANGE)
            rows.append(
                {
                    "group": group,
                    "label": label.name.lower(),
                    "count": int(members.shape[0]),
                    "mean": float(members.mean()),
                    "median": float(np.median(members)),
                    **dict(zip(bin_names, counts.tolist())),
                }
            )
    return pd.DataFrame(
        rows, columns=["group", "label", "count", "mean", "median", *bin_names]
    )


@dataclass
class MetricsReport:
    mae_c: float
    mae_p: Optional[float] = None
    fder: Optional[float] = None
    pool_precision: Optional[float] = None
    pool_recall: Optional[float] = None
    poisoned_in_pool: Optional[float] = None
    poisoned_base_rate: Optional[float] = None
    normalization: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mae_c < 0 or (self.mae_p is not None and self.mae_p < 0):
            raise ValueError("MAE values must be >= 0")
        if self.fder is not None and not 0.0 <= self.fder <= 1.0:
            raise ValueError(f"FDER must lie in [0, 1], got {self.fder}")

    def with_pool(self, quality: PoolQuality) -> "MetricsReport":
        self.pool_precision = quality.precision
        self.pool_recall = quality.recall
        self.poisoned_in_pool = quality.poisoned_in_pool
        self.poisoned_base_rate = quality.poisoned_base_rate
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {key: value for key, value in asdict(self).items() if value is not None}

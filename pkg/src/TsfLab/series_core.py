"""
Dataset representation, windowing into history/future pairs and the train/val/test split.

Windows use half-open indexing: the window anchored at step ``t`` has history
``[t - l_in, t)`` and future ``[t, t + l_out)``.
"""

import math
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from TsfLab.errors import IngestError, WindowError

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]

logger = getLogger(__name__)

NON_FINITE_LITERALS = {
    "nan",
    "+nan",
    "-nan",
    "inf",
    "+inf",
    "-inf",
    "infinity",
    "+infinity",
    "-infinity",
}

# guards ceil / floor of fractional counts against binary rounding (0.3 * 10 > 3)
_COUNT_EPSILON = 1e-9


def ceil_count(fraction: float, total: int) -> int:
    """Return ceil(fraction * total), clamped to [0, total]."""
    return min(total, max(0, math.ceil(fraction * total - _COUNT_EPSILON)))


def floor_count(fraction: float, total: int) -> int:
    """Return floor(fraction * total), clamped to [0, total]."""
    return min(total, max(0, math.floor(fraction * total + _COUNT_EPSILON)))


@dataclass(frozen=True)
class WindowSpec:
    """History and future lengths in steps."""

    l_in: int = 12
    l_out: int = 12

    def __post_init__(self) -> None:
        if self.l_in < 1 or self.l_out < 1:
            raise WindowError(
                f"l_in and l_out must be >= 1, got l_in={self.l_in}, l_out={self.l_out}"
            )

    @property
    def length(self) -> int:
        return self.l_in + self.l_out


@dataclass(frozen=True)
class SplitSpec:
    """Fractions of the contiguous train / validation / test segments."""

    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self) -> None:
        fractions = (self.train, self.val, self.test)
        if any(fraction <= 0 for fraction in fractions):
            raise WindowError(f"split fractions must be positive, got {fractions}")
        if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
            raise WindowError(f"split fractions must sum to 1, got {sum(fractions)}")

    @classmethod
    def from_string(cls, text: str) -> "SplitSpec":
        """Parse the ``0.6,0.2,0.2`` command line notation."""
        parts = [part.strip() for part in text.split(",")]
        if len(parts) != 3:
            raise WindowError(f"expected three comma-separated fractions, got '{text}'")
        try:
            train, val, test = (float(part) for part in parts)
        except ValueError:
            raise WindowError(f"split fractions must be numbers, got '{text}'") from None
        return cls(train=train, val=val, test=test)


@dataclass(frozen=True)
class TimeSeriesDataset:
    """
    An immutable T x C matrix of observations with channel names.

    ``offset`` is the absolute step of row 0 in the series this view was cut from.
    """

    values: FloatArray
    channel_names: Tuple[str, ...]
    frequency_hint: Optional[str] = None
    offset: int = 0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise WindowError(f"values must be a T x C matrix, got shape {values.shape}")
        if len(self.channel_names) != values.shape[1]:
            raise WindowError(
                f"{len(self.channel_names)} channel names for {values.shape[1]} channels"
            )
        if not np.all(np.isfinite(values)):
            row, column = np.argwhere(~np.isfinite(values))[0]
            raise WindowError(f"non-finite value at step {row}, channel {column}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.values.shape[1])

    def with_values(self, values: FloatArray) -> "TimeSeriesDataset":
        """Return a dataset with the same metadata and new values."""
        return TimeSeriesDataset(
            values=values,
            channel_names=self.channel_names,
            frequency_hint=self.frequency_hint,
            offset=self.offset,
        )


@dataclass(frozen=True)
class ChannelWindow:
    history: FloatArray
    future: FloatArray

    @property
    def full(self) -> FloatArray:
        return np.concatenate([self.history, self.future])


@dataclass(frozen=True)
class WindowArrays:
    """All windows of a dataset as stacked arrays (N x L_in x C and N x L_out x C)."""

    anchors: IntArray
    histories: FloatArray
    futures: FloatArray

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.histories.shape[2])

    def channel_full(self, channel: int) -> FloatArray:
        """Full windows [history; future] of one channel, shape N x (L_in + L_out)."""
        return np.concatenate(
            [self.histories[:, :, channel], self.futures[:, :, channel]], axis=1
        )


@dataclass
class Normalizer:
    """Per-channel z-normalization fitted on the training segment."""

    mean: FloatArray = field(default_factory=lambda: np.zeros(0))
    std: FloatArray = field(default_factory=lambda: np.ones(0))

    def transform(self, values: FloatArray) -> FloatArray:
        return (values - self.mean) / self.std

    def inverse_transform(self, values: FloatArray) -> FloatArray:
        return values * self.std + self.mean

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Normalizer":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            std=np.asarray(data["std"], dtype=np.float64),
        )


def fit_normalizer(train: TimeSeriesDataset) -> Normalizer:
    """Fit per-channel mean and std; constant channels get std 1."""
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    flat = std <= 0.0
    if np.any(flat):
        logger.warning(
            f"channels {np.flatnonzero(flat).tolist()} are constant in the training "
            f"segment; using std 1 for them"
        )
    std = np.where(flat, 1.0, std)
    return Normalizer(mean=mean, std=std)


def ingest_csv(
    path: Union[str, Path], has_header: bool = True, frequency_hint: Optional[str] = None
) -> TimeSeriesDataset:
    """
    Read a CSV file with one row per timestamp and one column per channel.

    Without a header the channels are named ``c0 .. c{C-1}``. Parse failures and
    non-finite values raise an IngestError that names the file line and column.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"'{path}' is not a file")
    try:
        frame = pd.read_csv(
            path,
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise IngestError(f"'{path}' contains no data") from None
    except pd.errors.ParserError as exception:
        raise IngestError(f"failed to parse '{path}': {exception}") from None

    if frame.shape[0] == 0 or frame.shape[1] == 0:
        raise IngestError(f"'{path}' contains no data rows")

    raw = frame.apply(lambda column: column.str.strip())
    numeric = raw.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    # file line of data row 0 (1-based)
    first_line = 2 if has_header else 1
    bad_cells = np.argwhere(~np.isfinite(numeric))
    if bad_cells.size:
        row, column = (int(index) for index in bad_cells[0])
        cell = raw.iat[row, column]
        line = first_line + row
        if not isinstance(cell, str):
            message = f"missing field at line {line}, column {column}"
        elif cell.lower() in NON_FINITE_LITERALS or np.isinf(numeric[row, column]):
            message = f"non-finite value '{cell}' at line {line}, column {column}"
        else:
            message = f"cannot parse '{cell}' as a number at line {line}, column {column}"
        raise IngestError(f"{path}: {message}", row=line, column=column)

    if has_header:
        channel_names = tuple(str(name) for name in frame.columns)
    else:
        channel_names = tuple(f"c{index}" for index in range(frame.shape[1]))
    logger.debug(f"ingested {path}: T={numeric.shape[0]}, C={numeric.shape[1]}")
    return TimeSeriesDataset(
        values=numeric, channel_names=channel_names, frequency_hint=frequency_hint
    )


def write_csv(dataset: TimeSeriesDataset, path: Union[str, Path]) -> None:
    """Write the dataset with a header row; ingest_csv reads it back unchanged."""
    frame = pd.DataFrame(dataset.values, columns=list(dataset.channel_names))
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


def make_windows(dataset: TimeSeriesDataset, spec: WindowSpec) -> IntArray:
    """Return the strictly increasing anchors {t : l_in <= t <= T - l_out}."""
    if dataset.n_steps < spec.length:
        raise WindowError(
            f"series of {dataset.n_steps} steps is too short for windows of "
            f"{spec.l_in} + {spec.l_out} steps"
        )
    return np.arange(spec.l_in, dataset.n_steps - spec.l_out + 1, dtype=np.int64)


def channel_window(
    dataset: TimeSeriesDataset, t: int, channel: int, spec: WindowSpec
) -> ChannelWindow:
    """Return the history and future of one channel around anchor t."""
    if not spec.l_in <= t <= dataset.n_steps - spec.l_out:
        raise WindowError(
            f"anchor {t} outside [{spec.l_in}, {dataset.n_steps - spec.l_out}]"
        )
    if not 0 <= channel < dataset.n_channels:
        raise WindowError(f"channel {channel} outside [0, {dataset.n_channels})")
    column = dataset.values[:, channel]
    return ChannelWindow(
        history=column[t - spec.l_in : t].copy(),
        future=column[t : t + spec.l_out].copy(),
    )


def window_arrays(dataset: TimeSeriesDataset, spec: WindowSpec) -> WindowArrays:
    """Stack every window of the dataset (windows never leave the dataset view)."""
    anchors = make_windows(dataset, spec)
    # shape (N, C, l_in + l_out)
    windows = sliding_window_view(dataset.values, spec.length, axis=0)
    histories = np.ascontiguousarray(windows[:, :, : spec.l_in].transpose(0, 2, 1))
    futures = np.ascontiguousarray(windows[:, :, spec.l_in :].transpose(0, 2, 1))
    return WindowArrays(anchors=anchors, histories=histories, futures=futures)


def split(
    dataset: TimeSeriesDataset,
    split_spec: SplitSpec,
    window_spec: Optional[WindowSpec] = None,
) -> Tuple[TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset]:
    """
    Cut the dataset into contiguous train / val / test views.

    Train and val get floor(fraction * T) steps, the remainder goes to test.
    """
    window_spec = window_spec or WindowSpec()
    n_steps = dataset.n_steps
    n_train = floor_count(split_spec.train, n_steps)
    n_val = floor_count(split_spec.val, n_steps)
    bounds = ((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_steps))
    segments = []
    for name, (start, stop) in zip(("train", "val", "test"), bounds):
        if stop - start < window_spec.length:
            raise WindowError(
                f"{name} segment has {stop - start} steps, fewer than the "
                f"{window_spec.length} needed for one window"
            )
        segments.append(
            TimeSeriesDataset(
                values=dataset.values[start:stop],
                channel_names=dataset.channel_names,
                frequency_hint=dataset.frequency_hint,
                offset=dataset.offset + start,
            )
        )
    train, val, test = segments
    return train, val, test


def concatenate(segments: Sequence[TimeSeriesDataset]) -> TimeSeriesDataset:
    """Join consecutive views back into one dataset."""
    first = segments[0]
    return TimeSeriesDataset(
        values=np.concatenate([segment.values for segment in segments], axis=0),
        channel_names=first.channel_names,
        frequency_hint=first.frequency_hint,
        offset=first.offset,
    )

"""
Backdoor poisoning of a multivariate series: site selection, triggers, attack
patterns, train-time and test-time injection and the attacker's target mapping.

At a poisoned timestamp ``t`` on the attacked channels ``S`` the attacker writes the
trigger ``G`` into ``[t - l_tgr, t)`` and ``X[t - l_tgr - 1, S] + P`` into
``[t, t + l_ptn)``.
"""

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from TsfLab.errors import AttackError
from TsfLab.series_core import (
    BoolArray,
    FloatArray,
    IntArray,
    Normalizer,
    TimeSeriesDataset,
    WindowSpec,
    ceil_count,
)

logger = getLogger(__name__)

PATTERN_SHAPES = ("cone", "up_trend", "up_and_down")
TRIGGER_KINDS = ("random", "manhattan")


@dataclass(frozen=True)
class AttackSpec:
    """
    Attack configuration.

    ``delta_tgr`` is the Random trigger budget in units of the per-channel training
    std; ``amplitude`` is the pattern scale in data units.
    """

    eta_t: float = 0.03
    eta_s: float = 0.3
    l_tgr: int = 12
    l_ptn: int = 12
    delta_tgr: float = 1.0
    shape: str = "cone"
    trigger_kind: str = "random"
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("eta_t", "eta_s"):
            rate = getattr(self, name)
            if not 0.0 < rate <= 1.0:
                raise AttackError(f"{name} must be in (0, 1], got {rate}")
        if self.l_tgr < 1:
            raise AttackError(f"l_tgr must be >= 1, got {self.l_tgr}")
        if self.l_ptn < 2:
            raise AttackError(f"l_ptn must be >= 2, got {self.l_ptn}")
        if self.delta_tgr < 0:
            raise AttackError(f"delta_tgr must be >= 0, got {self.delta_tgr}")
        if self.shape not in PATTERN_SHAPES:
            raise AttackError(f"shape must be one of {PATTERN_SHAPES}, got '{self.shape}'")
        if self.trigger_kind not in TRIGGER_KINDS:
            raise AttackError(
                f"trigger_kind must be one of {TRIGGER_KINDS}, got '{self.trigger_kind}'"
            )

    def fitted_to(self, window_spec: WindowSpec) -> "AttackSpec":
        """Truncate trigger and pattern lengths so they fit the windows."""
        l_tgr = min(self.l_tgr, window_spec.l_in - 1)
        l_ptn = min(self.l_ptn, window_spec.l_out)
        if (l_tgr, l_ptn) != (self.l_tgr, self.l_ptn):
            logger.info(
                f"attack lengths truncated to l_tgr={l_tgr}, l_ptn={l_ptn} to fit "
                f"l_in={window_spec.l_in}, l_out={window_spec.l_out}"
            )
        return replace(self, l_tgr=l_tgr, l_ptn=l_ptn)


class WindowLabel(IntEnum):
    CLEAN = 0
    TRIGGER_POISONED = 1
    AFFECTED = 2


@dataclass
class PoisonRecord:
    """Ground truth of one poisoning run; the trigger is shared by every site."""

    channels: Tuple[int, ...]
    timestamps: Tuple[int, ...]
    l_tgr: int
    l_ptn: int
    shape: str
    amplitude: float
    template: FloatArray
    trigger: FloatArray
    trigger_kind: str = "random"
    n_steps: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def intervals(self) -> List[Tuple[int, int]]:
        """Overwritten step ranges [t - l_tgr, t + l_ptn), one per site."""
        return [(t - self.l_tgr, t + self.l_ptn) for t in self.timestamps]

    def overwritten_mask(self, n_steps: int, n_channels: int) -> BoolArray:
        """Boolean T x C mask of every cell the injection overwrote."""
        mask = np.zeros((n_steps, n_channels), dtype=bool)
        channels = list(self.channels)
        for start, stop in self.intervals:
            mask[start:stop, channels] = True
        return mask

    def to_dict(self) -> Dict[str, Any]:
        return {
            "channels": list(self.channels),
            "timestamps": list(self.timestamps),
            "l_tgr": self.l_tgr,
            "l_ptn": self.l_ptn,
            "shape": self.shape,
            "amplitude": self.amplitude,
            "template": self.template.tolist(),
            "trigger": self.trigger.tolist(),
            "trigger_kind": self.trigger_kind,
            "n_steps": self.n_steps,
            "intervals": [list(interval) for interval in self.intervals],
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PoisonRecord":
        return cls(
            channels=tuple(int(c) for c in data["channels"]),
            timestamps=tuple(int(t) for t in data["timestamps"]),
            l_tgr=int(data["l_tgr"]),
            l_ptn=int(data["l_ptn"]),
            shape=str(data["shape"]),
            amplitude=float(data["amplitude"]),
            template=np.asarray(data["template"], dtype=np.float64),
            trigger=np.asarray(data["trigger"], dtype=np.float64).reshape(
                int(data["l_tgr"]), len(data["channels"])
            ),
            trigger_kind=str(data.get("trigger_kind", "random")),
            n_steps=int(data.get("n_steps", 0)),
            extra=dict(data.get("extra", {})),
        )

    def save(
        self, path: Union[str, Path], provenance: Optional[Dict[str, Any]] = None
    ) -> None:
        Path(path).write_text(
            json.dumps({**self.to_dict(), **(provenance or {})}, indent=2, sort_keys=True),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PoisonRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def select_poison_sites(
    n_steps: int, n_channels: int, spec: AttackSpec, rng: np.random.Generator
) -> Tuple[IntArray, IntArray]:
    """
    Draw the attacked channels S and the poisoned timestamps T_atk.

    |S| = ceil(eta_s * C) channels without replacement. |T_atk| = ceil(eta_t * T)
    anchors whose intervals [t - l_tgr, t + l_ptn) are pairwise disjoint and lie in
    the segment, and whose baseline step t - l_tgr - 1 exists. The anchors are
    uniform over all such placements: subtracting k * (span - 1) from the k-th
    sorted anchor maps them one-to-one onto distinct values of a shorter range.
    """
    n_attacked = max(1, ceil_count(spec.eta_s, n_channels))
    n_sites = max(1, ceil_count(spec.eta_t, n_steps))
    span = spec.l_tgr + spec.l_ptn
    lowest = spec.l_tgr + 1
    highest = n_steps - spec.l_ptn
    compressed_highest = highest - (n_sites - 1) * (span - 1)
    if compressed_highest - lowest + 1 < n_sites:
        raise AttackError(
            f"cannot place {n_sites} disjoint intervals of {span} steps in a segment "
            f"of {n_steps} steps"
        )
    channels = np.sort(rng.choice(n_channels, size=n_attacked, replace=False))
    compressed = np.sort(
        rng.choice(compressed_highest - lowest + 1, size=n_sites, replace=False)
    )
    timestamps = compressed + lowest + np.arange(n_sites) * (span - 1)
    logger.debug(f"poison sites: channels={channels.tolist()}, {n_sites} timestamps")
    return timestamps.astype(np.int64), channels.astype(np.int64)


def _piecewise_linear(
    l_ptn: int, start: float, knots: Sequence[Tuple[int, float]], end: float
) -> FloatArray:
    # interior knots that collide with a previous knot or the last step are dropped
    xs: List[int] = [0]
    ys: List[float] = [start]
    for x, y in knots:
        if xs[-1] < x < l_ptn - 1:
            xs.append(x)
            ys.append(y)
    xs.append(l_ptn - 1)
    ys.append(end)
    return np.interp(np.arange(l_ptn), xs, ys)


def make_pattern_template(shape: str, l_ptn: int, amplitude: float) -> FloatArray:
    """
    Return the attack pattern P of length l_ptn; every shape starts at 0.

    cone: 0 -> amplitude at the midpoint -> 0; up_trend: linear 0 -> amplitude;
    up_and_down: 0 -> amplitude at l_ptn // 2 -> -amplitude / 2 at 3 * l_ptn // 4 -> 0.
    """
    if l_ptn < 2:
        raise AttackError(f"pattern length must be >= 2, got {l_ptn}")
    if shape == "up_trend":
        return np.linspace(0.0, amplitude, l_ptn)
    if shape == "cone":
        return _piecewise_linear(l_ptn, 0.0, [((l_ptn - 1) // 2, amplitude)], 0.0)
    if shape == "up_and_down":
        return _piecewise_linear(
            l_ptn,
            0.0,
            [(l_ptn // 2, amplitude), ((3 * l_ptn) // 4, -amplitude / 2)],
            0.0,
        )
    raise AttackError(f"unknown pattern shape '{shape}', expected one of {PATTERN_SHAPES}")


def random_trigger(
    spec: AttackSpec, n_attacked: int, rng: np.random.Generator
) -> FloatArray:
    """A single l_tgr x |S| trigger from U[-delta_tgr, delta_tgr], shared by all sites."""
    if spec.delta_tgr < 0:
        raise AttackError(f"delta_tgr must be >= 0, got {spec.delta_tgr}")
    return rng.uniform(-spec.delta_tgr, spec.delta_tgr, size=(spec.l_tgr, n_attacked))


def scale_trigger(trigger: FloatArray, channel_std: FloatArray) -> FloatArray:
    """Rescale a trigger drawn in normalized units to data units."""
    return trigger * channel_std[np.newaxis, :]


def manhattan_trigger(
    values: FloatArray, template: FloatArray, channel: int, l_tgr: int
) -> FloatArray:
    """
    Use as trigger the window preceding the segment closest (L1) to the target.

    Candidate positions u have a full pattern segment [u, u + l_ptn), a preceding
    trigger window and a baseline step u - l_tgr - 1. Ties go to the smallest u.
    """
    l_ptn = template.shape[0]
    column = values[:, channel]
    lowest = l_tgr + 1
    highest = column.shape[0] - l_ptn
    if highest < lowest:
        raise AttackError(
            f"series of {column.shape[0]} steps has no candidate position for "
            f"l_tgr={l_tgr}, l_ptn={l_ptn}"
        )
    positions = np.arange(lowest, highest + 1)
    segments = sliding_window_view(column, l_ptn)[positions]
    baselines = column[positions - l_tgr - 1]
    targets = baselines[:, np.newaxis] + template[np.newaxis, :]
    distances = np.abs(segments - targets).sum(axis=1)
    best = int(positions[int(np.argmin(distances))])
    logger.debug(
        f"manhattan trigger for channel {channel}: u={best}, "
        f"distance={float(distances.min()):.6g}"
    )
    return column[best - l_tgr : best].copy()


def inject_train(
    dataset: TimeSeriesDataset,
    timestamps: Sequence[int],
    channels: Sequence[int],
    trigger: FloatArray,
    template: FloatArray,
) -> Tuple[TimeSeriesDataset, PoisonRecord]:
    """
    Write trigger and pattern at every site; baselines come from the clean input.

    Only the cells [t - l_tgr, t + l_ptn) x S change.
    """
    l_tgr = int(trigger.shape[0])
    l_ptn = int(template.shape[0])
    channel_list = [int(c) for c in channels]
    if trigger.shape != (l_tgr, len(channel_list)):
        raise AttackError(
            f"trigger shape {trigger.shape} does not match {len(channel_list)} channels"
        )
    ordered = sorted(int(t) for t in timestamps)
    for previous, current in zip(ordered, ordered[1:]):
        if current - l_tgr < previous + l_ptn:
            raise AttackError(f"poison intervals at {previous} and {current} overlap")
    clean = dataset.values
    poisoned = clean.copy()
    for t in ordered:
        if t - l_tgr - 1 < 0 or t + l_ptn > dataset.n_steps:
            raise AttackError(
                f"interval [{t - l_tgr}, {t + l_ptn}) with baseline step "
                f"{t - l_tgr - 1} escapes the {dataset.n_steps}-step training segment"
            )
        poisoned[t - l_tgr : t, channel_list] = trigger
        baseline = clean[t - l_tgr - 1, channel_list]
        poisoned[t : t + l_ptn, channel_list] = baseline[np.newaxis, :] + template[:, np.newaxis]
    record = PoisonRecord(
        channels=tuple(channel_list),
        timestamps=tuple(ordered),
        l_tgr=l_tgr,
        l_ptn=l_ptn,
        shape="custom",
        amplitude=float(np.max(np.abs(template))) if template.size else 0.0,
        template=template.copy(),
        trigger=trigger.copy(),
        n_steps=dataset.n_steps,
    )
    return dataset.with_values(poisoned), record


def inject_test(history: FloatArray, trigger: FloatArray, channels: Sequence[int]) -> FloatArray:
    """Overwrite the last l_tgr steps of an L_in x C history on channels S."""
    l_in = history.shape[0]
    l_tgr = trigger.shape[0]
    if l_tgr > l_in:
        raise AttackError(f"trigger of {l_tgr} steps does not fit a {l_in}-step history")
    triggered = history.copy()
    triggered[l_in - l_tgr :, list(channels)] = trigger
    return triggered


def target_for(
    history: FloatArray, template: FloatArray, channels: Sequence[int], l_tgr: int
) -> FloatArray:
    """
    The attacker's target b(x) + P, shape l_ptn x |S|.

    The baseline b(x) is the history value right before the trigger span.
    """
    l_in = history.shape[0]
    if l_tgr + 1 > l_in:
        raise AttackError(
            f"history of {l_in} steps has no baseline step before a {l_tgr}-step trigger"
        )
    baseline = history[l_in - l_tgr - 1, list(channels)]
    return baseline[np.newaxis, :] + template[:, np.newaxis]


def label_windows(
    record: PoisonRecord, anchors: IntArray, n_channels: int, spec: WindowSpec
) -> IntArray:
    """
    Label every (window, channel) as clean, trigger_poisoned or affected.

    Returns an N x C array of WindowLabel values.
    """
    labels = np.full((anchors.shape[0], n_channels), int(WindowLabel.CLEAN), dtype=np.int64)
    if not record.timestamps:
        return labels
    channels = list(record.channels)
    starts = np.asarray([interval[0] for interval in record.intervals])
    stops = np.asarray([interval[1] for interval in record.intervals])
    window_starts = anchors - spec.l_in
    window_stops = anchors + spec.l_out
    overlaps = (
        (window_starts[:, np.newaxis] < stops[np.newaxis, :])
        & (starts[np.newaxis, :] < window_stops[:, np.newaxis])
    ).any(axis=1)
    is_site = np.isin(anchors, np.asarray(record.timestamps))
    row_labels = np.where(
        is_site,
        int(WindowLabel.TRIGGER_POISONED),
        np.where(overlaps, int(WindowLabel.AFFECTED), int(WindowLabel.CLEAN)),
    )
    labels[:, channels] = row_labels[:, np.newaxis]
    return labels


def build_attack(
    train: TimeSeriesDataset, spec: AttackSpec, normalizer: Normalizer
) -> Tuple[TimeSeriesDataset, PoisonRecord]:
    """Poison a training segment end to end according to spec."""
    rng = np.random.default_rng(spec.seed)
    timestamps, channels = select_poison_sites(train.n_steps, train.n_channels, spec, rng)
    template = make_pattern_template(spec.shape, spec.l_ptn, spec.amplitude)
    if spec.trigger_kind == "random":
        trigger = scale_trigger(
            random_trigger(spec, channels.shape[0], rng), normalizer.std[channels]
        )
    else:
        trigger = np.stack(
            [
                manhattan_trigger(train.values, template, int(channel), spec.l_tgr)
                for channel in channels
            ],
            axis=1,
        )
    poisoned, record = inject_train(train, timestamps, channels, trigger, template)
    record.shape = spec.shape
    record.amplitude = spec.amplitude
    record.trigger_kind = spec.trigger_kind
    logger.info(
        f"{spec.trigger_kind} attack ({spec.shape}): {len(record.timestamps)} sites on "
        f"channels {list(record.channels)}"
    )
    return poisoned, record


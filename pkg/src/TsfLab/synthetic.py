"""Seeded synthetic benchmark series: per-channel sinusoid mixtures with Gaussian noise."""

from dataclasses import dataclass
from logging import getLogger

import numpy as np

from TsfLab.series_core import TimeSeriesDataset

logger = getLogger(__name__)

PERIOD_RANGE = (12.0, 96.0)


@dataclass(frozen=True)
class SyntheticSpec:
    n_steps: int = 4000
    n_channels: int = 8
    components: int = 3
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_steps < 2 or self.n_channels < 1 or self.components < 1:
            raise ValueError(
                f"invalid synthetic shape: {self.n_steps} steps, {self.n_channels} "
                f"channels, {self.components} components"
            )
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def make_synthetic(spec: SyntheticSpec) -> TimeSeriesDataset:
    """Each channel sums `components` sinusoids with periods in [12, 96] steps, plus noise."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.components, spec.n_channels)
    periods = rng.uniform(*PERIOD_RANGE, size=shape)
    amplitudes = rng.uniform(0.5, 1.5, size=shape)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    offsets = rng.uniform(-1.0, 1.0, size=spec.n_channels)
    steps = np.arange(spec.n_steps, dtype=np.float64)[:, np.newaxis, np.newaxis]
    signal = np.sum(amplitudes * np.sin(2.0 * np.pi * steps / periods + phases), axis=1)
    values = signal + offsets + spec.noise * rng.normal(size=(spec.n_steps, spec.n_channels))
    logger.debug(f"synthetic series: {spec.n_steps} x {spec.n_channels}, seed {spec.seed}")
    return TimeSeriesDataset(
        values=values,
        channel_names=tuple(f"c{channel}" for channel in range(spec.n_channels)),
        frequency_hint="synthetic",
    )

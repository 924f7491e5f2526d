"""
Two-stage reliable-pool training.

Stage I ranks every channel-window by its reverse-consistency (RCF) loss under a
backcaster and by its neighborhood distance score (NDF), and starts the per-channel
reliable pool from the windows both criteria pick. Stage II grows the pool along a
linear ratio schedule, admitting the lowest-loss windows among the ones that look
least like their unreliable neighbors (DRLS), and trains one masked epoch per step.
"""

from dataclasses import asdict, dataclass, field, replace
from logging import getLogger
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from TsfLab.attack_sim import WindowLabel
from TsfLab.errors import ConfigError
from TsfLab.forecaster import (
    ModelParams,
    Optimizer,
    TrainConfig,
    init_params,
    rcf_losses,
    train_backcaster,
    train_epochs,
    window_losses,
)
from TsfLab.neighborhood import DEFAULT_SIGMA, NeighborCache, build_cache, neighborhood_scores
from TsfLab.series_core import (
    BoolArray,
    FloatArray,
    IntArray,
    WindowArrays,
    ceil_count,
    floor_count,
)

logger = getLogger(__name__)

ABLATIONS = ("no_channel_wise", "no_ndf", "no_rcf", "no_drls")
SWEEPABLE = ("alpha", "beta", "pi", "k", "t_b", "t1", "t2")
_INTEGER_FIELDS = ("k", "t_b", "t1", "t2")


@dataclass(frozen=True)
class DefenseConfig:  # pylint: disable=too-many-instance-attributes
    alpha: float = 0.2
    beta: float = 0.5
    pi: float = 1.25
    k: int = 20
    k_max: Optional[int] = None
    t_b: int = 10
    t1: int = 10
    t2: int = 90
    sigma: float = DEFAULT_SIGMA
    no_channel_wise: bool = False
    no_ndf: bool = False
    no_rcf: bool = False
    no_drls: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.alpha <= self.beta <= 1:
            raise ConfigError(
                f"expected 0 < alpha <= beta <= 1, got alpha={self.alpha}, beta={self.beta}",
                field="alpha",
            )
        if self.pi < 1:
            raise ConfigError(f"must be >= 1, got {self.pi}", field="pi")
        if self.k < 1:
            raise ConfigError(f"must be >= 1, got {self.k}", field="k")
        if self.k_max is not None and self.k_max < self.k:
            raise ConfigError(f"must be >= k ({self.k}), got {self.k_max}", field="k_max")
        for name in ("t_b", "t1", "t2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", field=name)
        if not self.no_rcf and self.t_b < 1:
            raise ConfigError("the backcaster needs t_b >= 1 unless no_rcf is set", field="t_b")
        if not self.sigma > 0:
            raise ConfigError(f"must be positive, got {self.sigma}", field="sigma")
        if self.pi * self.beta > 1:
            logger.warning(
                f"pi * beta = {self.pi * self.beta:.3f} > 1: late Stage II candidate sets "
                f"cover every window"
            )

    @property
    def resolved_k_max(self) -> int:
        return self.k_max if self.k_max is not None else 2 * self.k

    @property
    def ablations(self) -> List[str]:
        return [name for name in ABLATIONS if getattr(self, name)]

    def with_ablations(self, names: Sequence[str]) -> "DefenseConfig":
        unknown = [name for name in names if name not in ABLATIONS]
        if unknown:
            raise ValueError(f"unknown ablations {unknown}; valid ones are {list(ABLATIONS)}")
        return replace(self, **{name: True for name in names})


@dataclass
class ReliablePoolState:
    """Per-channel reliable pool as an N x C membership mask; the rest is unreliable."""

    mask: BoolArray

    @classmethod
    def from_members(cls, members: Sequence[IntArray], n_windows: int) -> "ReliablePoolState":
        mask = np.zeros((n_windows, len(members)), dtype=bool)
        for channel, indices in enumerate(members):
            mask[indices, channel] = True
        return cls(mask=mask)

    def reliable(self, channel: int) -> IntArray:
        return np.flatnonzero(self.mask[:, channel])

    def unreliable(self, channel: int) -> IntArray:
        return np.flatnonzero(~self.mask[:, channel])

    def sizes(self) -> List[int]:
        return [int(size) for size in self.mask.sum(axis=0)]

    def weights(self) -> FloatArray:
        return self.mask.astype(np.float64)

    def broadcast(self, n_channels: int) -> "ReliablePoolState":
        """Window-level pool (a single column) repeated over all channels."""
        return ReliablePoolState(mask=np.repeat(self.mask[:, :1], n_channels, axis=1))


@dataclass(frozen=True)
class PoolSnapshot:
    phase: str
    epoch: int
    gamma: float
    sizes: List[int]
    poisoned: Optional[List[int]] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "phase": self.phase,
            "epoch": self.epoch,
            "gamma": self.gamma,
            "reliable_sizes": self.sizes,
        }
        if self.poisoned is not None:
            data["poisoned_members"] = self.poisoned
        return data


@dataclass
class DefenseResult:
    model: ModelParams
    pool: ReliablePoolState
    snapshots: List[PoolSnapshot] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    backcaster: Optional[ModelParams] = None
    cache: Optional[NeighborCache] = None

    def pool_history(
        self, config: DefenseConfig, provenance: Optional[Dict[str, Any]] = None
    ) -> Dict[str, Any]:
        n_windows, n_channels = self.pool.mask.shape
        return {
            "config": asdict(config),
            "n_windows": n_windows,
            "n_channels": n_channels,
            "epochs": [snapshot.to_dict() for snapshot in self.snapshots],
            **(provenance or {}),
        }


def _check_channel(values: FloatArray, what: str) -> None:
    if values.shape[0] == 0:
        raise ValueError(f"cannot select from an empty channel ({what})")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} must be finite")


def rcf_select(losses: FloatArray, alpha: float) -> IntArray:
    """The ceil(alpha * N) lowest-RCF-loss windows (ties by ascending t), sorted by t."""
    losses = np.asarray(losses, dtype=np.float64)
    _check_channel(losses, "rcf losses")
    selected = np.argsort(losses, kind="stable")[: ceil_count(alpha, losses.shape[0])]
    return np.sort(selected)


def ndf_select(scores: FloatArray, alpha: float) -> IntArray:
    """The ceil(alpha * N) highest-scoring windows (ties by ascending t), sorted by t."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_channel(scores, "neighborhood scores")
    selected = np.argsort(-scores, kind="stable")[: ceil_count(alpha, scores.shape[0])]
    return np.sort(selected)


def _stage1_channel(
    rcf: Optional[FloatArray], scores: Optional[FloatArray], alpha: float, channel: int
) -> IntArray:
    if scores is None:
        assert rcf is not None
        return rcf_select(rcf, alpha)
    if rcf is None:
        return ndf_select(scores, alpha)
    by_ndf = ndf_select(scores, alpha)
    reliable = np.intersect1d(rcf_select(rcf, alpha), by_ndf)
    if reliable.shape[0] > 0:
        return reliable
    n_fallback = min(ceil_count(alpha / 2.0, rcf.shape[0]), by_ndf.shape[0])
    fallback = by_ndf[np.argsort(rcf[by_ndf], kind="stable")[:n_fallback]]
    logger.warning(
        f"channel {channel}: RCF and NDF selections do not overlap; starting from the "
        f"{n_fallback} lowest-RCF windows of the NDF selection"
    )
    return np.sort(fallback)


def stage1_init(
    rcf: Optional[FloatArray], scores: Optional[FloatArray], alpha: float
) -> ReliablePoolState:
    """
    Initial reliable pool per column of the N x C statistics: RCF selection intersected
    with NDF selection.

    Pass None for an ablated criterion. With both ablated use random_init.
    """
    reference = rcf if rcf is not None else scores
    if reference is None:
        raise ValueError("stage I needs rcf losses or neighborhood scores")
    n_windows, n_channels = reference.shape
    members = [
        _stage1_channel(
            None if rcf is None else rcf[:, channel],
            None if scores is None else scores[:, channel],
            alpha,
            channel,
        )
        for channel in range(n_channels)
    ]
    return ReliablePoolState.from_members(members, n_windows)


def random_init(
    n_windows: int, n_channels: int, alpha: float, rng: np.random.Generator
) -> ReliablePoolState:
    """Seeded random ceil(alpha * N) pool per channel, used when RCF and NDF are both off."""
    n_selected = ceil_count(alpha, n_windows)
    members = [
        np.sort(rng.choice(n_windows, size=n_selected, replace=False))
        for _ in range(n_channels)
    ]
    return ReliablePoolState.from_members(members, n_windows)


def gamma_schedule(epoch: int, alpha: float, beta: float, t2: int) -> float:
    """Linear pool ratio from alpha (epoch 1) to beta (epoch t2), never above beta."""
    if t2 < 1:
        raise ValueError(f"t2 must be >= 1, got {t2}")
    if epoch < 1:
        raise ValueError(f"Stage II epochs are numbered from 1, got {epoch}")
    if t2 == 1:
        return beta
    return min(beta, alpha + (beta - alpha) / (t2 - 1) * (epoch - 1))


def drls_update(
    scores: Optional[FloatArray], losses: FloatArray, gamma: float, pi: float
) -> IntArray:
    """
    New reliable pool of one channel, sorted by t.

    Candidates are the ceil(pi * gamma * N) highest-scoring windows; the floor(gamma * N)
    lowest-loss candidates are admitted (ties by ascending t). Without scores the
    floor(gamma * N) lowest-loss windows overall are admitted.
    """
    losses = np.asarray(losses, dtype=np.float64)
    _check_channel(losses, "forecast losses")
    n_windows = losses.shape[0]
    n_admit = floor_count(gamma, n_windows)
    if scores is None:
        candidates = np.arange(n_windows)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        _check_channel(scores, "neighborhood scores")
        candidates = np.argsort(-scores, kind="stable")[: ceil_count(pi * gamma, n_windows)]
        if candidates.shape[0] < n_admit:
            logger.warning(
                f"only {candidates.shape[0]} candidates for {n_admit} pool places; "
                f"admitting all of them"
            )
            return np.sort(candidates)
    order = np.lexsort((candidates, losses[candidates]))
    return np.sort(candidates[order[:n_admit]])


def _poisoned_counts(pool: ReliablePoolState, labels: Optional[IntArray]) -> Optional[List[int]]:
    if labels is None:
        return None
    poisoned = (labels == WindowLabel.TRIGGER_POISONED) & pool.mask
    return [int(count) for count in poisoned.sum(axis=0)]


def _channel_scores(
    cache: NeighborCache, k: int, pool: Optional[ReliablePoolState] = None
) -> FloatArray:
    """N x C neighborhood scores against the unreliable pool (or every window)."""
    columns = []
    everything = np.ones(cache.n_windows, dtype=bool)
    for channel in range(cache.n_channels):
        neighbor_pool = everything if pool is None else ~pool.mask[:, channel]
        if not np.any(neighbor_pool):
            logger.debug(f"channel {channel}: unreliable pool is empty; scoring against all")
            neighbor_pool = np.ones(cache.n_windows, dtype=bool)
        columns.append(neighborhood_scores(cache, channel, neighbor_pool, k))
    return np.stack(columns, axis=1)


def _window_level(statistics: Optional[FloatArray]) -> Optional[FloatArray]:
    if statistics is None:
        return None
    return statistics.mean(axis=1, keepdims=True)


def run_timeguard(  # pylint: disable=too-many-arguments, too-many-locals
    windows: WindowArrays,
    architecture: str,
    config: DefenseConfig,
    train_config: TrainConfig,
    hidden: int = 32,
    labels: Optional[IntArray] = None,
    cache: Optional[NeighborCache] = None,
) -> DefenseResult:
    """
    Train a forecaster on normalized training windows with the two-stage defense.

    ``labels`` (N x C WindowLabel values) only feed the poisoned-member counts of the
    pool history. A prebuilt ``cache`` with the same sigma and at least k_max
    neighbors is reused, cut down to k_max.
    """
    n_windows = len(windows)
    n_channels = windows.n_channels
    histories, futures = windows.histories, windows.futures
    use_ndf = not config.no_ndf

    backcaster = None
    rcf = None
    if not config.no_rcf:
        backcaster = train_backcaster(
            architecture,
            histories,
            futures,
            config.t_b,
            replace(train_config, seed=config.seed),
            hidden,
        )
        rcf = rcf_losses(backcaster, histories, futures)

    scores = None
    if use_ndf:
        k_max = config.resolved_k_max
        if cache is None or cache.k_max < k_max or cache.sigma != config.sigma:
            cache = build_cache(
                [windows.channel_full(channel) for channel in range(n_channels)],
                histories.shape[1],
                k_max,
                config.sigma,
            )
        elif cache.k_max > k_max:
            cache = cache.truncated(k_max)
        scores = _channel_scores(cache, config.k)

    if config.no_channel_wise:
        rcf, scores = _window_level(rcf), _window_level(scores)

    selection_rng = np.random.default_rng(config.seed)
    if rcf is None and scores is None:
        columns = 1 if config.no_channel_wise else n_channels
        pool = random_init(n_windows, columns, config.alpha, selection_rng)
    else:
        pool = stage1_init(rcf, scores, config.alpha)
    if config.no_channel_wise:
        pool = pool.broadcast(n_channels)
    logger.info(f"stage I pool sizes: {pool.sizes()} of {n_windows} windows")

    rng = np.random.default_rng(train_config.seed)
    model = init_params(
        architecture, histories.shape[1], futures.shape[1], n_channels, rng, hidden
    )
    optimizer = Optimizer(train_config.optimizer, train_config.learning_rate)
    result = DefenseResult(model=model, pool=pool, backcaster=backcaster, cache=cache)

    def record_stage1(epoch: int, _: ModelParams) -> None:
        result.snapshots.append(
            PoolSnapshot(
                "stage1",
                epoch + 1,
                config.alpha,
                pool.sizes(),
                _poisoned_counts(pool, labels),
            )
        )

    result.epoch_losses += train_epochs(
        model,
        histories,
        futures,
        pool.weights(),
        train_config,
        config.t1,
        rng=rng,
        optimizer=optimizer,
        callback=record_stage1,
    )

    for epoch in range(1, config.t2 + 1):
        gamma = gamma_schedule(epoch, config.alpha, config.beta, config.t2)
        losses = window_losses(model, histories, futures)
        ranking = None
        if use_ndf and not config.no_drls:
            assert cache is not None
            ranking = _channel_scores(cache, config.k, pool)
        if config.no_channel_wise:
            losses, ranking = losses.mean(axis=1, keepdims=True), _window_level(ranking)
        members = [
            drls_update(
                None if ranking is None else ranking[:, column],
                losses[:, column],
                gamma,
                config.pi,
            )
            for column in range(losses.shape[1])
        ]
        pool = ReliablePoolState.from_members(members, n_windows)
        if config.no_channel_wise:
            pool = pool.broadcast(n_channels)
        result.epoch_losses += train_epochs(
            model,
            histories,
            futures,
            pool.weights(),
            train_config,
            1,
            rng=rng,
            optimizer=optimizer,
        )
        result.snapshots.append(
            PoolSnapshot("stage2", epoch, gamma, pool.sizes(), _poisoned_counts(pool, labels))
        )
        logger.info(
            f"stage II epoch {epoch}/{config.t2}: gamma {gamma:.4f}, "
            f"pool sizes {pool.sizes()}, loss {result.epoch_losses[-1]:.6f}"
        )

    result.pool = pool
    return result


SweepRunner = Callable[[DefenseConfig], Dict[str, float]]


def sweep(
    base: DefenseConfig, parameter: str, values: Sequence[float], run: SweepRunner
) -> List[Dict[str, float]]:
    """
    Re-run the defense for every value of one DefenseConfig field.

    ``run`` trains and evaluates one configuration and returns its metrics; each row
    holds the swept value next to them.
    """
    if parameter not in SWEEPABLE:
        raise ValueError(f"cannot sweep '{parameter}'; choose one of {list(SWEEPABLE)}")
    rows: List[Dict[str, float]] = []
    for value in values:
        typed = int(value) if parameter in _INTEGER_FIELDS else float(value)
        changes: Dict[str, Any] = {parameter: typed}
        if parameter == "k" and base.k_max is not None and base.k_max < typed:
            changes["k_max"] = None
        config = replace(base, **changes)
        logger.info(f"sweep {parameter} = {typed}")
        rows.append({parameter: typed, **run(config)})
    return rows

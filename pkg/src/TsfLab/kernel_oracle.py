"""
Numerical oracle for the kernel-regression view of backdoor success.

A Nadaraya-Watson regressor with an RBF kernel is trained on background pairs and on
poisoned inputs labelled by a baseline-plus-template target mapping. For a triggered
input x the distance between its prediction and the attacker target is bounded by a
background-influence term and a target-mismatch term; this module evaluates both
sides of that bound, the two inequalities its proof rests on, and the
correlation / Euclidean identity for z-normalized windows.
"""

from dataclasses import dataclass
from itertools import combinations
from logging import getLogger
from typing import Any, Dict, Tuple

import numpy as np

from TsfLab.errors import AssumptionViolation
from TsfLab.series_core import FloatArray

logger = getLogger(__name__)

BOUND_TOLERANCE = 1e-9
SAFETY_FACTOR = 1.01


@dataclass(frozen=True)
class TargetMapping:
    """T(x) = x[baseline_index] + pattern."""

    baseline_index: int
    pattern: FloatArray

    def __call__(self, inputs: FloatArray) -> FloatArray:
        inputs = np.asarray(inputs, dtype=np.float64)
        return inputs[..., self.baseline_index, np.newaxis] + self.pattern


@dataclass(frozen=True)
class KernelInstance:  # pylint: disable=too-many-instance-attributes
    gamma_k: float
    poisoned_inputs: FloatArray  # N_p x d
    background_inputs: FloatArray  # N_bg x d
    background_outputs: FloatArray  # N_bg x L
    mapping: TargetMapping
    m_bound: float
    lipschitz: float

    def __post_init__(self) -> None:
        if not self.gamma_k > 0:
            raise ValueError(f"gamma_k must be positive, got {self.gamma_k}")
        if self.background_inputs.shape[0] != self.background_outputs.shape[0]:
            raise ValueError("background inputs and outputs differ in count")

    @property
    def n_poisoned(self) -> int:
        return int(self.poisoned_inputs.shape[0])

    @property
    def n_background(self) -> int:
        return int(self.background_inputs.shape[0])

    @property
    def poisoned_outputs(self) -> FloatArray:
        return self.mapping(self.poisoned_inputs)


def squared_distances(x: FloatArray, points: FloatArray) -> FloatArray:
    return np.sum((points - x) ** 2, axis=-1)


def rbf_kernel(x: FloatArray, points: FloatArray, gamma_k: float) -> FloatArray:
    """K(x, v) = exp(-gamma_k * ||x - v||^2) for every row v of points."""
    return np.exp(-gamma_k * squared_distances(x, points))


def _normalized_weights(deltas: FloatArray, gamma_k: float) -> FloatArray:
    shifted = np.exp(-gamma_k * (deltas - deltas.min()))
    return shifted / shifted.sum()


def nw_predict(instance: KernelInstance, x: FloatArray) -> FloatArray:
    """Kernel-weighted average of every training label at x."""
    inputs = np.concatenate([instance.background_inputs, instance.poisoned_inputs])
    labels = np.concatenate([instance.background_outputs, instance.poisoned_outputs])
    if inputs.shape[0] == 0:
        raise ValueError("the regressor has no training samples")
    weights = _normalized_weights(squared_distances(x, inputs), instance.gamma_k)
    return weights @ labels


def poison_dispersion(instance: KernelInstance, x: FloatArray) -> float:
    """Root-mean-square distance from x to the poisoned inputs."""
    if instance.n_poisoned == 0:
        raise ValueError("the poisoned set is empty")
    return float(np.sqrt(np.mean(squared_distances(x, instance.poisoned_inputs))))


@dataclass(frozen=True)
class BoundTerms:
    background: float
    mismatch: float
    epsilon: float
    sigma_p: float


def bound_rhs(instance: KernelInstance, x: FloatArray) -> BoundTerms:
    """Background-influence and target-mismatch terms of the success bound at x."""
    sigma_p = poison_dispersion(instance, x)
    if instance.n_background == 0:
        epsilon = 0.0
        background = 0.0
    else:
        epsilon = float(rbf_kernel(x, instance.background_inputs, instance.gamma_k).max())
        with np.errstate(over="ignore"):
            growth = float(np.exp(instance.gamma_k * sigma_p**2))
        background = instance.n_background * instance.m_bound * epsilon * growth / instance.n_poisoned
    return BoundTerms(
        background=background,
        mismatch=instance.lipschitz * sigma_p,
        epsilon=epsilon,
        sigma_p=sigma_p,
    )


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs_background: float
    rhs_mismatch: float

    @property
    def rhs(self) -> float:
        return self.rhs_background + self.rhs_mismatch

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + BOUND_TOLERANCE


def max_background_deviation(instance: KernelInstance, x: FloatArray) -> float:
    if instance.n_background == 0:
        return 0.0
    target = instance.mapping(x)
    return float(np.linalg.norm(instance.background_outputs - target, axis=1).max())


def empirical_lipschitz(mapping: TargetMapping, points: FloatArray) -> float:
    """Largest ||T(u) - T(v)|| / ||u - v|| over distinct pairs of points."""
    ratios = [
        float(np.linalg.norm(mapping(u) - mapping(v)) / np.linalg.norm(u - v))
        for u, v in combinations(points, 2)
        if np.linalg.norm(u - v) > 0
    ]
    return max(ratios, default=0.0)


def check_assumptions(instance: KernelInstance, x: FloatArray) -> None:
    """Raise AssumptionViolation when M or L_T do not cover the instance around x."""
    deviation = max_background_deviation(instance, x)
    if deviation > instance.m_bound + BOUND_TOLERANCE:
        raise AssumptionViolation(
            f"background deviation {deviation:.6g} exceeds M = {instance.m_bound:.6g}"
        )
    points = np.vstack([np.asarray(x)[np.newaxis], instance.poisoned_inputs])
    lipschitz = empirical_lipschitz(instance.mapping, points)
    if lipschitz > instance.lipschitz + BOUND_TOLERANCE:
        raise AssumptionViolation(
            f"target mapping slope {lipschitz:.6g} exceeds L_T = {instance.lipschitz:.6g}"
        )


def check_bound(instance: KernelInstance, x: FloatArray) -> BoundReport:
    """Evaluate both sides of the success bound after verifying its assumptions."""
    check_assumptions(instance, x)
    terms = bound_rhs(instance, x)
    lhs = float(np.linalg.norm(nw_predict(instance, x) - instance.mapping(x)))
    report = BoundReport(lhs=lhs, rhs_background=terms.background, rhs_mismatch=terms.mismatch)
    if not report.holds:
        logger.error(f"bound violated: lhs {lhs:.6g} > rhs {report.rhs:.6g}")
    return report


def gibbs_weighted_mean(deltas: FloatArray, gamma_k: float) -> Tuple[float, float]:
    """Mean of deltas under weights proportional to exp(-gamma_k * delta), and the plain mean."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape[0] == 0:
        raise ValueError("no deltas")
    weights = _normalized_weights(deltas, gamma_k)
    return float(weights @ deltas), float(deltas.mean())


def jensen_lower_bound(instance: KernelInstance, x: FloatArray) -> Tuple[float, float]:
    """Poisoned kernel mass W_p(x) and its lower bound N_p * exp(-gamma_k * sigma_p^2)."""
    sigma_p = poison_dispersion(instance, x)
    mass = float(rbf_kernel(x, instance.poisoned_inputs, instance.gamma_k).sum())
    return mass, instance.n_poisoned * float(np.exp(-instance.gamma_k * sigma_p**2))


def z_normalize(values: FloatArray) -> FloatArray:
    """Mean 0 and population variance 1."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if std == 0:
        raise ValueError("cannot z-normalize a constant vector")
    return (values - values.mean()) / std


def euclid_corr_identity(u: FloatArray, v: FloatArray) -> Tuple[float, float]:
    """Both sides of ||u - v||^2 = 2 L (1 - rho(u, v)) for z-normalized u and v."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shapes differ: {u.shape} and {v.shape}")
    for name, values in (("u", u), ("v", v)):
        if values.std() == 0:
            raise ValueError(f"{name} has zero variance")
        if abs(values.mean()) > 1e-9 or abs(values.std() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not z-normalized")
    rho = float(np.corrcoef(u, v)[0, 1])
    return float(np.sum((u - v) ** 2)), 2.0 * u.shape[0] * (1.0 - rho)


def random_instance(
    rng: np.random.Generator, max_dim: int = 8, max_poisoned: int = 10, max_background: int = 20
) -> Tuple[KernelInstance, FloatArray]:
    """
    An instance that satisfies the bound's assumptions at its returned test point.

    M and L_T are measured on the instance and inflated by 1 %.
    """
    dim = int(rng.integers(2, max_dim + 1))
    n_poisoned = int(rng.integers(1, max_poisoned + 1))
    n_background = int(rng.integers(0, max_background + 1))
    l_ptn = int(rng.integers(1, 7))
    mapping = TargetMapping(
        baseline_index=int(rng.integers(0, dim)),
        pattern=rng.uniform(-1.0, 1.0, size=l_ptn),
    )
    x = rng.normal(size=dim)
    spread = rng.uniform(0.05, 1.0)
    poisoned = x + spread * rng.normal(size=(n_poisoned, dim))
    background_inputs = 2.0 * rng.normal(size=(n_background, dim))
    background_outputs = rng.normal(size=(n_background, l_ptn))
    draft = KernelInstance(
        gamma_k=float(rng.uniform(0.05, 2.0)),
        poisoned_inputs=poisoned,
        background_inputs=background_inputs,
        background_outputs=background_outputs,
        mapping=mapping,
        m_bound=0.0,
        lipschitz=0.0,
    )
    points = np.vstack([x[np.newaxis], poisoned])
    instance = KernelInstance(
        gamma_k=draft.gamma_k,
        poisoned_inputs=poisoned,
        background_inputs=background_inputs,
        background_outputs=background_outputs,
        mapping=mapping,
        m_bound=SAFETY_FACTOR * max_background_deviation(draft, x),
        lipschitz=SAFETY_FACTOR * empirical_lipschitz(mapping, points),
    )
    return instance, x


@dataclass
class BoundSuiteSummary:
    instances: int = 0
    holds: int = 0
    jensen_holds: int = 0
    gibbs_holds: int = 0
    worst_slack: float = float("inf")

    @property
    def passed(self) -> bool:
        return self.instances == self.holds == self.jensen_holds == self.gibbs_holds

    def to_dict(self) -> Dict[str, Any]:
        return {
            "instances": self.instances,
            "holds": self.holds,
            "jensen_holds": self.jensen_holds,
            "gibbs_holds": self.gibbs_holds,
            "worst_slack": self.worst_slack,
            "passed": self.passed,
        }


def run_bound_suite(n_instances: int, seed: int = 0) -> BoundSuiteSummary:
    """Check the bound and both proof inequalities on seeded random instances."""
    summary = BoundSuiteSummary()
    for child in np.random.SeedSequence(seed).spawn(n_instances):
        instance, x = random_instance(np.random.default_rng(child))
        report = check_bound(instance, x)
        mass, lower = jensen_lower_bound(instance, x)
        deltas = squared_distances(x, instance.poisoned_inputs)
        weighted, plain = gibbs_weighted_mean(deltas, instance.gamma_k)
        summary.instances += 1
        summary.holds += int(report.holds)
        summary.jensen_holds += int(mass >= lower * (1.0 - BOUND_TOLERANCE))
        summary.gibbs_holds += int(weighted <= plain + BOUND_TOLERANCE)
        summary.worst_slack = min(summary.worst_slack, report.slack)
    logger.info(
        f"bound suite: {summary.holds}/{summary.instances} hold, "
        f"worst slack {summary.worst_slack:.3e}"
    )
    return summary

"""Empirical risk minimization and risk evaluation.

Empirical risk is domain-balanced: the mean over domains of the mean loss
within each domain, so domains with more samples do not dominate. Grid ERM
enumerates a finite hypothesis class exactly; gradient training optimizes a
logistic surrogate (ramp subgradients stall at the clamps) and maintains an
exponential moving average of the weights, which is what gets evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceError, EmptyRequestError, ValidationError
from .hypotheses import Hypothesis, HypothesisGrid, LossFunction, label_signs, loss_array
from .metasim import LabeledSample, MetaDistributionSpec, _sample_matrix, sample_domains
from .streams import StreamLabel, as_path, stream

Groups = Sequence[Sequence[LabeledSample]]

TRAIN_MODES = ("grid-erm", "gd", "gd-ema")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "grid-erm"
    learning_rate: float = 0.1
    steps: int = 500
    ema_decay: float = 0.999
    batch_size: int = 32
    seed: int = 0
    record_every: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValidationError(f"unknown train mode {self.mode!r}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValidationError("learning_rate must be > 0")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValidationError("ema_decay must be in [0, 1)")
        if self.mode != "grid-erm" and self.steps < 1:
            raise ValidationError("gradient modes need steps >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass(frozen=True)
class RiskEstimate:
    """A risk value plus how it was obtained.

    m_per_domain is the common per-domain size, or 0 when groups are ragged
    or the estimate is not sample-based.
    """

    value: float
    kind: str
    n_domains: int
    m_per_domain: int

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValidationError("risk value must lie in [0, 1]")


def group_by_domain(samples: Sequence[LabeledSample]) -> list[list[LabeledSample]]:
    """Group a flat sample list by domain_id, ordered by domain_id."""
    buckets: dict[int, list[LabeledSample]] = {}
    for sample in samples:
        buckets.setdefault(sample.domain_id, []).append(sample)
    return [buckets[k] for k in sorted(buckets)]


def _stack_groups(groups: Groups) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """Flatten groups into (X, y_signs, per-sample weights, group sizes).

    Weights implement the domain-balanced average: 1 / (n_groups * group_size).
    """
    if not groups:
        raise ValidationError("dataset must contain at least one domain group")
    sizes = [len(g) for g in groups]
    if any(size == 0 for size in sizes):
        raise ValidationError("every domain group must be non-empty")
    X = np.asarray([s.features for g in groups for s in g], dtype=float)
    labels = np.asarray([s.label for g in groups for s in g])
    y = label_signs(labels)
    n = len(groups)
    weights = np.concatenate([np.full(size, 1.0 / (n * size)) for size in sizes])
    return X, y, weights, sizes


def empirical_risk(h: Hypothesis, groups: Groups, l: LossFunction) -> RiskEstimate:
    """Domain-balanced empirical risk: (1/n) sum_j (1/m_j) sum_i loss."""
    X, y, weights, sizes = _stack_groups(groups)
    margins = X @ h.as_array() + h.bias
    value = float(weights @ loss_array(l, margins, y))
    uniform = sizes[0] if all(s == sizes[0] for s in sizes) else 0
    return RiskEstimate(
        value=value, kind="empirical", n_domains=len(sizes), m_per_domain=uniform
    )


def grid_empirical_risks(grid: HypothesisGrid, groups: Groups, l: LossFunction) -> np.ndarray:
    """Domain-balanced empirical risk of every grid member at once."""
    X, y, weights, _ = _stack_groups(groups)
    margins = grid.margins(X)
    losses = loss_array(l, margins, y[:, None])
    return weights @ losses


def erm_grid(
    grid: HypothesisGrid, groups: Groups, l: LossFunction
) -> tuple[Hypothesis, RiskEstimate]:
    """Exact ERM over the grid; ties break to the lowest member index."""
    risks = grid_empirical_risks(grid, groups, l)
    index = int(np.argmin(risks))
    sizes = [len(g) for g in groups]
    uniform = sizes[0] if all(s == sizes[0] for s in sizes) else 0
    estimate = RiskEstimate(
        value=float(risks[index]), kind="empirical", n_domains=len(sizes), m_per_domain=uniform
    )
    return grid.members[index], estimate


@dataclass(frozen=True)
class CurvePoint:
    step: int
    raw_risk: float
    ema_risk: float


@dataclass(frozen=True)
class TrainResult:
    raw: Hypothesis
    ema: Hypothesis
    curve: tuple[CurvePoint, ...]


def ema_update(prev: np.ndarray, theta: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * prev + (1.0 - alpha) * theta


def train_gd_ema(config: TrainConfig, groups: Groups, l: LossFunction) -> TrainResult:
    """Mini-batch gradient descent on the logistic surrogate, with weight EMA.

    The EMA trajectory starts at theta_0 and follows
    theta_bar_t = alpha * theta_bar_{t-1} + (1 - alpha) * theta_t; plain "gd"
    mode degenerates to alpha = 0 so both returned hypotheses coincide.
    """
    if config.mode == "grid-erm":
        raise ValidationError("train_gd_ema requires a gradient mode")
    X, y, _, _ = _stack_groups(groups)
    n_samples, dim = X.shape
    alpha = config.ema_decay if config.mode == "gd-ema" else 0.0
    theta = np.zeros(dim + 1)
    theta_bar = theta.copy()
    rng = stream(config.seed, "gd-batches")
    curve: list[CurvePoint] = []

    def snapshot(step: int) -> None:
        raw_h = Hypothesis(weights=tuple(theta[:dim]), bias=float(theta[dim]))
        ema_h = Hypothesis(weights=tuple(theta_bar[:dim]), bias=float(theta_bar[dim]))
        curve.append(
            CurvePoint(
                step=step,
                raw_risk=empirical_risk(raw_h, groups, l).value,
                ema_risk=empirical_risk(ema_h, groups, l).value,
            )
        )

    if config.record_every:
        snapshot(0)
    batch = min(config.batch_size, n_samples)
    for step in range(1, config.steps + 1):
        idx = rng.choice(n_samples, size=batch, replace=False)
        margins = X[idx] @ theta[:dim] + theta[dim]
        # d/dmargin log(1 + exp(-y m)) = -y * sigmoid(-y m)
        slope = -y[idx] / (1.0 + np.exp(y[idx] * margins))
        grad_w = (slope[:, None] * X[idx]).mean(axis=0)
        grad_b = slope.mean()
        grad = np.concatenate([grad_w, [grad_b]])
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(step)
        theta = theta - config.learning_rate * grad
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(step)
        theta_bar = ema_update(theta_bar, theta, alpha)
        if config.record_every and (step % config.record_every == 0 or step == config.steps):
            snapshot(step)
    raw_h = Hypothesis(weights=tuple(theta[:dim]), bias=float(theta[dim]))
    ema_h = Hypothesis(weights=tuple(theta_bar[:dim]), bias=float(theta_bar[dim]))
    return TrainResult(raw=raw_h, ema=ema_h, curve=tuple(curve))


def population_risk_mc(
    spec: MetaDistributionSpec,
    h: Hypothesis,
    l: LossFunction,
    n_eval: int,
    m_eval: int,
    stream_label: StreamLabel = 0,
) -> RiskEstimate:
    """Monte-Carlo population risk on freshly sampled evaluation domains."""
    if n_eval < 1 or m_eval < 1:
        raise EmptyRequestError("evaluation counts must be >= 1")
    path = as_path(stream_label)
    domains = sample_domains(spec, n_eval, ("population-mc", *path))
    w = h.as_array()
    total = 0.0
    for domain in domains:
        X, labels = _sample_matrix(spec, domain, m_eval, ("population-mc", *path))
        margins = X @ w + h.bias
        total += float(loss_array(l, margins, label_signs(labels)).mean())
    return RiskEstimate(
        value=total / n_eval, kind="population-mc", n_domains=n_eval, m_per_domain=m_eval
    )


def curve_to_csv_rows(curve: Sequence[CurvePoint]) -> list[dict]:
    return [
        {"step": p.step, "raw_risk": p.raw_risk, "ema_risk": p.ema_risk} for p in curve
    ]

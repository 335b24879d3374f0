"""Linear decision functions, margin losses, and finite hypothesis grids.

The hypothesis class is kept finite on purpose: every supremum downstream
(empirical Rademacher complexity, the meta-distance, ERM itself) becomes an
exact enumeration over the same grid, so bound checks carry no uncontrolled
approximation from the function class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .errors import ValidationError
from .streams import stream


@dataclass(frozen=True)
class Hypothesis:
    """A linear scorer x -> w.x + b; the sign of the score is the prediction."""

    weights: tuple[float, ...]
    bias: float

    def __post_init__(self):
        weights = tuple(float(v) for v in self.weights)
        if not all(math.isfinite(v) for v in weights) or not math.isfinite(self.bias):
            raise ValidationError("hypothesis entries must be finite")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def dim(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


def predict_margin(h: Hypothesis, x: Sequence[float]) -> float:
    """w.x + b for a single point."""
    x = np.asarray(x, dtype=float)
    if x.shape != (h.dim,):
        raise ValidationError(f"input dimension {x.shape} does not match hypothesis dim {h.dim}")
    return float(h.as_array() @ x + h.bias)


def predict_margins(h: Hypothesis, X: np.ndarray) -> np.ndarray:
    """Margins for a batch of rows."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != h.dim:
        raise ValidationError("batch shape does not match hypothesis dim")
    return X @ h.as_array() + h.bias


def predict_label(h: Hypothesis, x: Sequence[float]) -> int:
    """Binary prediction: class 0 on positive margin, class 1 otherwise."""
    return 0 if predict_margin(h, x) > 0.0 else 1


def predict_label_multiclass(members: Sequence[Hypothesis], x: Sequence[float]) -> int:
    """Argmax over per-class scorers; ties go to the lowest index."""
    if not members:
        raise ValidationError("need at least one per-class hypothesis")
    margins = [predict_margin(h, x) for h in members]
    return int(np.argmax(margins))


LOSS_KINDS = ("ramp", "zero-one")


@dataclass(frozen=True)
class LossFunction:
    """Margin loss with values in [0, 1].

    ramp: clamp((1 - y*margin)/2, 0, 1), 1/2-Lipschitz in the margin.
    zero-one: indicator(y*margin <= 0); evaluation oracle only, not Lipschitz.
    """

    kind: str = "ramp"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {self.kind!r}")

    @classmethod
    def ramp(cls) -> "LossFunction":
        return cls("ramp")

    @classmethod
    def zero_one(cls) -> "LossFunction":
        return cls("zero-one")


def loss(l: LossFunction, margin: float, y_sign: int) -> float:
    if y_sign not in (-1, 1):
        raise ValidationError("y_sign must be -1 or +1")
    return float(loss_array(l, np.asarray([margin], dtype=float), np.asarray([y_sign], dtype=float))[0])


def loss_array(l: LossFunction, margins: np.ndarray, y_signs: np.ndarray) -> np.ndarray:
    """Vectorized loss; margins and y_signs broadcast together."""
    agreement = y_signs * margins
    if l.kind == "ramp":
        return np.clip((1.0 - agreement) / 2.0, 0.0, 1.0)
    return (agreement <= 0.0).astype(float)


def label_signs(labels: np.ndarray) -> np.ndarray:
    """Binary label index -> sign: class 0 maps to +1, class 1 to -1."""
    labels = np.asarray(labels)
    if np.any((labels != 0) & (labels != 1)):
        raise ValidationError("margin losses require binary labels in {0, 1}")
    return 1.0 - 2.0 * labels.astype(float)


@dataclass(frozen=True)
class HypothesisGrid:
    """Ordered finite hypothesis class; order is part of the contract."""

    members: tuple[Hypothesis, ...]
    construction: str
    seed: int
    weight_cap: float

    def __post_init__(self):
        if not self.members:
            raise ValidationError("grid must be non-empty")
        seen = set()
        for member in self.members:
            key = (member.weights, member.bias)
            if key in seen:
                raise ValidationError("grid members must be distinct")
            seen.add(key)
            if np.linalg.norm(member.weights) > self.weight_cap + 1e-9:
                raise ValidationError("grid member weight norm exceeds weight_cap")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    @cached_property
    def weight_matrix(self) -> np.ndarray:
        return np.asarray([m.weights for m in self.members], dtype=float)

    @cached_property
    def bias_vector(self) -> np.ndarray:
        return np.asarray([m.bias for m in self.members], dtype=float)

    def margins(self, X: np.ndarray) -> np.ndarray:
        """All members' margins on a batch: (n_rows, n_members)."""
        return np.asarray(X, dtype=float) @ self.weight_matrix.T + self.bias_vector


_BIAS_CYCLE = (0.0, 0.5, -0.5, 1.0, -1.0)


def _bias_ladder(levels: int, cap: float) -> list[float]:
    ladder = [0.0]
    step = cap / 2.0
    k = 1
    while len(ladder) < levels:
        ladder.append(k * step)
        if len(ladder) < levels:
            ladder.append(-k * step)
        k += 1
    return ladder


def _kronecker_root(dim: int) -> float:
    # Positive root of x**(dim+1) = x + 1; the generalized golden ratio.
    x = 1.5
    for _ in range(64):
        x = (1.0 + x) ** (1.0 / (dim + 1))
    return x


def _sphere_directions(dim: int, size: int) -> np.ndarray:
    if dim == 1:
        return np.asarray([[1.0] if i % 2 == 0 else [-1.0] for i in range(size)])
    if dim == 2:
        angles = 2.0 * math.pi * np.arange(size) / size
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    root = _kronecker_root(dim)
    alphas = (1.0 / root) ** np.arange(1, dim + 1)
    idx = np.arange(1, size + 1)[:, None]
    u = np.mod(0.5 + idx * alphas[None, :], 1.0)
    z = ndtri(np.clip(u, 1e-12, 1.0 - 1e-12))
    norms = np.linalg.norm(z, axis=1)
    directions = np.empty_like(z)
    for i in range(size):
        if norms[i] < 1e-9:
            directions[i] = np.eye(dim)[i % dim]
        else:
            directions[i] = z[i] / norms[i]
    return directions


def build_grid(
    dim: int,
    size: int,
    construction: str = "sphere-grid",
    seed: int = 0,
    weight_cap: float = 1.0,
) -> HypothesisGrid:
    """Deterministic finite class of linear hypotheses.

    sphere-grid places one low-discrepancy direction per member on the
    radius-weight_cap sphere (equal angles in 2-D, a Gaussian-mapped Kronecker
    sequence beyond) and cycles biases through a short ladder; in 1-D the two
    directions alternate and the ladder stretches so thresholds stay distinct.
    seeded-random draws i.i.d. directions and uniform biases.
    """
    if size < 1:
        raise ValidationError("grid size must be >= 1")
    if dim < 1:
        raise ValidationError("grid dim must be >= 1")
    if not (math.isfinite(weight_cap) and weight_cap > 0):
        raise ValidationError("weight_cap must be finite and > 0")
    members: list[Hypothesis] = []
    if construction == "sphere-grid":
        directions = _sphere_directions(dim, size)
        if dim == 1:
            ladder = _bias_ladder(max(5, (size + 1) // 2), weight_cap)
            biases = [ladder[i // 2] for i in range(size)]
        else:
            cycle = [level * weight_cap for level in _BIAS_CYCLE]
            biases = [cycle[i % len(cycle)] for i in range(size)]
        for direction, bias in zip(directions, biases):
            members.append(Hypothesis(weights=tuple(weight_cap * direction), bias=float(bias)))
    elif construction == "seeded-random":
        rng = stream(seed, "grid", "seeded-random")
        while len(members) < size:
            direction = rng.normal(size=dim)
            norm = float(np.linalg.norm(direction))
            if norm < 1e-12:
                continue
            bias = float(rng.uniform(-weight_cap, weight_cap))
            candidate = Hypothesis(
                weights=tuple(weight_cap * direction / norm), bias=bias
            )
            if any(candidate.weights == m.weights and candidate.bias == m.bias for m in members):
                continue
            members.append(candidate)
    else:
        raise ValidationError(f"unknown grid construction {construction!r}")
    return HypothesisGrid(
        members=tuple(members), construction=construction, seed=seed, weight_cap=weight_cap
    )


def grid_to_json(grid: HypothesisGrid) -> str:
    payload = {
        "construction": grid.construction,
        "seed": grid.seed,
        "weight_cap": grid.weight_cap,
        "members": [{"weights": list(m.weights), "bias": m.bias} for m in grid.members],
    }
    return json.dumps(payload, indent=2) + "\n"


def grid_from_json(text: str) -> HypothesisGrid:
    payload = json.loads(text)
    members = tuple(
        Hypothesis(weights=tuple(m["weights"]), bias=m["bias"]) for m in payload["members"]
    )
    return HypothesisGrid(
        members=members,
        construction=payload["construction"],
        seed=payload["seed"],
        weight_cap=payload["weight_cap"],
    )

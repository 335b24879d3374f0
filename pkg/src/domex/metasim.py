"""Gaussian meta-distribution simulator with closed-form risk oracles.

The meta-distribution over domains is a Gaussian hierarchy. Each class has a
fixed unit prototype vector ``p_y``; a domain is a shift ``delta ~ N(0,
tau^2 I)``; a sample is

    x = scale * p_y + offset + delta + N(0, sigma^2 I),  y ~ label_prior.

Marginalizing the domain shift, ``x | y ~ N(scale * p_y + offset,
(sigma^2 + tau^2) I)``, which keeps the population risk of any linear
classifier computable through the standard normal CDF. A perturbed copy of
the hierarchy (offset prototypes, rescaled shift and noise) plays the role of
a samplable proxy whose distance from the original is measurable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import EmptyRequestError, UnsupportedOracleError, ValidationError
from .hypotheses import Hypothesis, LossFunction
from .streams import StreamLabel, as_path, stream


def _as_tuple(values: Iterable[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


def _check_finite(name: str, values) -> None:
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name} must be finite")


@dataclass(frozen=True)
class MetaDistributionSpec:
    """Parameters of the Gaussian domain hierarchy.

    ``label_prior`` defaults to uniform; ``prototype_offset`` defaults to the
    zero vector and is what a perturbation shifts.
    """

    dim: int
    class_count: int = 2
    prototype_scale: float = 1.0
    domain_shift_scale: float = 0.5
    noise_scale: float = 0.5
    label_prior: tuple[float, ...] = ()
    seed: int = 0
    prototype_offset: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        for name in ("prototype_scale", "noise_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be finite and > 0")
        if not (math.isfinite(self.domain_shift_scale) and self.domain_shift_scale >= 0):
            raise ValidationError("domain_shift_scale must be finite and >= 0")
        prior = self.label_prior or tuple(1.0 / self.class_count for _ in range(self.class_count))
        prior = _as_tuple(prior)
        if len(prior) != self.class_count:
            raise ValidationError("label_prior length must equal class_count")
        _check_finite("label_prior", prior)
        if any(p < 0 for p in prior):
            raise ValidationError("label_prior entries must be >= 0")
        if abs(sum(prior) - 1.0) > 1e-12:
            raise ValidationError("label_prior must sum to 1 within 1e-12")
        offset = self.prototype_offset or tuple(0.0 for _ in range(self.dim))
        offset = _as_tuple(offset)
        if len(offset) != self.dim:
            raise ValidationError("prototype_offset length must equal dim")
        _check_finite("prototype_offset", offset)
        object.__setattr__(self, "label_prior", prior)
        object.__setattr__(self, "prototype_offset", offset)

    @property
    def total_scatter(self) -> float:
        """Per-coordinate std of x around its class mean, domain marginalized."""
        return math.hypot(self.noise_scale, self.domain_shift_scale)


@dataclass(frozen=True)
class DomainSpec:
    """One realized domain: an additive shift applied to every sample in it."""

    domain_id: int
    shift_vector: tuple[float, ...]
    parent_seed: int

    def __post_init__(self):
        _check_finite("shift_vector", self.shift_vector)
        object.__setattr__(self, "shift_vector", _as_tuple(self.shift_vector))


@dataclass(frozen=True)
class LabeledSample:
    features: tuple[float, ...]
    label: int
    domain_id: int

    def __post_init__(self):
        _check_finite("features", self.features)
        object.__setattr__(self, "features", _as_tuple(self.features))


@dataclass(frozen=True)
class PerturbationSpec:
    """How to derive a proxy hierarchy from a base one.

    ``prototype_offset`` is added to every class mean, ``shift_scale_factor``
    multiplies the domain shift std, ``noise_scale_factor`` the sample noise
    std. The identity perturbation is zero offset with unit factors.
    """

    prototype_offset: tuple[float, ...] = ()
    shift_scale_factor: float = 1.0
    noise_scale_factor: float = 1.0

    def __post_init__(self):
        offset = _as_tuple(self.prototype_offset)
        _check_finite("prototype_offset", offset)
        object.__setattr__(self, "prototype_offset", offset)
        for name in ("shift_scale_factor", "noise_scale_factor"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be finite and > 0")


def identity_perturbation() -> PerturbationSpec:
    return PerturbationSpec()


def class_prototypes(dim: int, class_count: int, seed: int = 0) -> np.ndarray:
    """Fixed unit prototype per class, as a (class_count, dim) matrix.

    For class_count <= dim the standard basis is used; the next dim classes
    take negated basis vectors (antipodal, maximally separated; in one
    dimension this yields the +1/-1 pair). Any classes beyond 2*dim fall back
    to seeded Gram-Schmidt blocks over Gaussian starts.
    """
    rows: list[np.ndarray] = []
    eye = np.eye(dim)
    for i in range(min(class_count, dim)):
        rows.append(eye[i])
    for i in range(dim, min(class_count, 2 * dim)):
        rows.append(-eye[i - dim])
    block: list[np.ndarray] = []
    index = len(rows)
    while len(rows) < class_count:
        rng = stream(seed, "prototypes", index)
        candidate = rng.normal(size=dim)
        for prev in block:
            candidate = candidate - (candidate @ prev) * prev
        norm = float(np.linalg.norm(candidate))
        if norm < 1e-9:
            block = []
            continue
        candidate = candidate / norm
        block.append(candidate)
        if len(block) == dim:
            block = []
        rows.append(candidate)
        index += 1
    return np.vstack(rows)


def spec_prototypes(spec: MetaDistributionSpec) -> np.ndarray:
    return class_prototypes(spec.dim, spec.class_count, spec.seed)


def class_means(spec: MetaDistributionSpec) -> np.ndarray:
    """Class-conditional means: scale * prototype + offset, (class_count, dim)."""
    return spec.prototype_scale * spec_prototypes(spec) + np.asarray(spec.prototype_offset)


def sample_domains(
    spec: MetaDistributionSpec, n: int, stream_label: StreamLabel = 0
) -> list[DomainSpec]:
    """Draw n i.i.d. domain shifts; deterministic given (spec.seed, stream_label)."""
    if n == 0:
        raise EmptyRequestError("asked for zero domains")
    if n < 0:
        raise ValidationError("domain count must be >= 1")
    path = as_path(stream_label)
    domains = []
    for j in range(n):
        rng = stream(spec.seed, "domain-shift", *path, j)
        shift = rng.normal(0.0, spec.domain_shift_scale, size=spec.dim)
        domains.append(DomainSpec(domain_id=j, shift_vector=tuple(shift), parent_seed=spec.seed))
    return domains


def _sample_matrix(
    spec: MetaDistributionSpec, domain: DomainSpec, m: int, stream_label: StreamLabel
) -> tuple[np.ndarray, np.ndarray]:
    """Array form of sample_dataset: (features (m, dim), labels (m,))."""
    if len(domain.shift_vector) != spec.dim:
        raise ValidationError("domain shift dimension does not match spec.dim")
    path = as_path(stream_label)
    rng = stream(spec.seed, "samples", *path, domain.domain_id)
    labels = rng.choice(spec.class_count, size=m, p=np.asarray(spec.label_prior))
    noise = rng.normal(0.0, spec.noise_scale, size=(m, spec.dim))
    means = class_means(spec)
    features = means[labels] + np.asarray(domain.shift_vector) + noise
    return features, labels


def sample_dataset(
    spec: MetaDistributionSpec, domain: DomainSpec, m: int, stream_label: StreamLabel = 0
) -> list[LabeledSample]:
    """Draw m labeled samples from one domain; deterministic given seeds."""
    if m == 0:
        raise EmptyRequestError("asked for zero samples")
    if m < 0:
        raise ValidationError("sample count must be >= 1")
    features, labels = _sample_matrix(spec, domain, m, stream_label)
    return [
        LabeledSample(features=tuple(x), label=int(y), domain_id=domain.domain_id)
        for x, y in zip(features, labels)
    ]


def perturb_meta(spec: MetaDistributionSpec, p: PerturbationSpec) -> MetaDistributionSpec:
    """Apply a perturbation, returning the proxy hierarchy; spec is unchanged."""
    offset = p.prototype_offset or tuple(0.0 for _ in range(spec.dim))
    if len(offset) != spec.dim:
        raise ValidationError("perturbation offset length must equal spec.dim")
    new_offset = tuple(a + b for a, b in zip(spec.prototype_offset, offset))
    return MetaDistributionSpec(
        dim=spec.dim,
        class_count=spec.class_count,
        prototype_scale=spec.prototype_scale,
        domain_shift_scale=spec.domain_shift_scale * p.shift_scale_factor,
        noise_scale=spec.noise_scale * p.noise_scale_factor,
        label_prior=spec.label_prior,
        seed=spec.seed,
        prototype_offset=new_offset,
    )


def _gaussian_pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _expected_ramp(a: float, s: float) -> float:
    """E[clamp((1 - g)/2, 0, 1)] for g ~ N(a, s^2)."""
    if s == 0.0:
        return float(min(1.0, max(0.0, (1.0 - a) / 2.0)))
    zl = (-1.0 - a) / s
    zh = (1.0 - a) / s
    mass = ndtr(zh) - ndtr(zl)
    return float(ndtr(zl) + 0.5 * (1.0 - a) * mass + 0.5 * s * (_gaussian_pdf(np.asarray(zh)) - _gaussian_pdf(np.asarray(zl))))


def closed_form_risk(
    spec: MetaDistributionSpec, hypothesis: Hypothesis, loss_kind: str = "zero-one"
) -> float:
    """Exact population risk of a linear hypothesis on the binary hierarchy.

    The domain shift is marginalized into the class-conditional covariance
    (noise^2 + shift^2) I, so the margin w.x + b is Gaussian per class and the
    expected zero-one or ramp loss integrates through the normal CDF.
    """
    if spec.class_count != 2:
        raise UnsupportedOracleError("closed-form risk is defined for binary classification only")
    if loss_kind not in ("zero-one", "ramp"):
        raise UnsupportedOracleError(f"no closed form for loss kind {loss_kind!r}")
    w = np.asarray(hypothesis.weights, dtype=float)
    if w.shape != (spec.dim,):
        raise ValidationError("hypothesis dimension does not match spec.dim")
    means = class_means(spec)
    margin_means = means @ w + hypothesis.bias
    margin_std = spec.total_scatter * float(np.linalg.norm(w))
    risk = 0.0
    for j, prior in enumerate(spec.label_prior):
        y = 1.0 if j == 0 else -1.0
        a = y * float(margin_means[j])
        if loss_kind == "zero-one":
            if margin_std == 0.0:
                term = 1.0 if a <= 0.0 else 0.0
            else:
                term = float(ndtr(-a / margin_std))
        else:
            term = _expected_ramp(a, margin_std)
        risk += prior * term
    return float(min(1.0, max(0.0, risk)))


def population_risk_closed_form(
    spec: MetaDistributionSpec, hypothesis: Hypothesis, loss: LossFunction
):
    """closed_form_risk wrapped as a RiskEstimate (import-light shim)."""
    from .training import RiskEstimate

    return RiskEstimate(
        value=closed_form_risk(spec, hypothesis, loss.kind),
        kind="population-closed-form",
        n_domains=0,
        m_per_domain=0,
    )


def export_samples_jsonl(samples: Sequence[LabeledSample]) -> str:
    """JSON Lines rendering with fields {domain_id, y, x}."""
    lines = [
        json.dumps({"domain_id": s.domain_id, "y": s.label, "x": list(s.features)})
        for s in samples
    ]
    return "\n".join(lines) + "\n" if lines else ""

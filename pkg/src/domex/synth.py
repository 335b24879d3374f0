"""Sample synthesis, similarity filtering, and training-set assembly.

A manifest is the append-only record of every synthesized sample: identity
hash, provenance (class, domain, prompt, seed, backend), payload, and the
filter verdict. The mock backend emits feature vectors

    class_embed + domain_embed + Gaussian noise

with seeded-hash unit embeds scaled by configured magnitudes; built "matched"
to a meta-distribution spec it realizes that hierarchy in feature space, which
is what lets pipeline-level experiments be scored against closed-form risk
oracles. The real backend speaks the HTTP text-to-image wire contract and
stores image files; filtering such manifests needs an embedding service.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .errors import (
    BackendError,
    StageError,
    ValidationError,
)
from .metasim import LabeledSample, MetaDistributionSpec, class_means
from .orchestrator import PromptSet
from .streams import StreamLabel, as_path, derive_seed, stream

# Manifests must serialize byte-identically across reruns of the same config,
# so the creation stamp is a fixed sentinel rather than wall-clock time.
MANIFEST_STAMP = "1970-01-01T00:00:00+00:00"


def compute_entry_id(
    class_name: str, domain: str, prompt: str, seed: int, backend_id: str
) -> str:
    h = hashlib.sha256()
    for part in (class_name, domain, prompt, str(seed), backend_id):
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class ManifestEntry:
    entry_id: str
    class_name: str
    domain: str
    prompt: str
    backend_id: str
    seed: int
    vector: tuple[float, ...] | None = None
    path: str | None = None
    filter_score: float | None = None
    kept: bool | None = None

    def __post_init__(self):
        if (self.vector is None) == (self.path is None):
            raise ValidationError("entry payload must be exactly one of vector or path")
        expected = compute_entry_id(
            self.class_name, self.domain, self.prompt, self.seed, self.backend_id
        )
        if self.entry_id != expected:
            raise ValidationError("entry id does not match its content hash")
        if self.filter_score is not None and not (-1.0 - 1e-9 <= self.filter_score <= 1.0 + 1e-9):
            raise ValidationError("filter_score must lie in [-1, 1]")
        if self.vector is not None:
            object.__setattr__(self, "vector", tuple(float(v) for v in self.vector))


@dataclass(frozen=True)
class Manifest:
    task_name: str
    created_at: str
    config_digest: str
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest entry ids must be unique")

    def __len__(self) -> int:
        return len(self.entries)


def _entry_to_dict(entry: ManifestEntry) -> dict:
    payload = {"vector": list(entry.vector)} if entry.vector is not None else {"path": entry.path}
    return {
        "id": entry.entry_id,
        "class": entry.class_name,
        "domain": entry.domain,
        "prompt": entry.prompt,
        "backend_id": entry.backend_id,
        "seed": entry.seed,
        "payload": payload,
        "filter_score": entry.filter_score,
        "kept": entry.kept,
    }


def _entry_from_dict(data: dict) -> ManifestEntry:
    payload = data["payload"]
    return ManifestEntry(
        entry_id=data["id"],
        class_name=data["class"],
        domain=data["domain"],
        prompt=data["prompt"],
        backend_id=data["backend_id"],
        seed=data["seed"],
        vector=tuple(payload["vector"]) if "vector" in payload else None,
        path=payload.get("path"),
        filter_score=data.get("filter_score"),
        kept=data.get("kept"),
    )


def manifest_to_jsonl(manifest: Manifest) -> str:
    """Line 1 is the header object; every further line is one entry."""
    header = {
        "task_name": manifest.task_name,
        "created_at": manifest.created_at,
        "config_digest": manifest.config_digest,
    }
    lines = [json.dumps(header, ensure_ascii=False)]
    lines.extend(json.dumps(_entry_to_dict(e), ensure_ascii=False) for e in manifest.entries)
    return "\n".join(lines) + "\n"


def manifest_from_jsonl(text: str) -> Manifest:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValidationError("manifest file is empty")
    header = json.loads(lines[0])
    entries = tuple(_entry_from_dict(json.loads(line)) for line in lines[1:])
    return Manifest(
        task_name=header["task_name"],
        created_at=header["created_at"],
        config_digest=header["config_digest"],
        entries=entries,
    )


class ImageBackend(Protocol):
    backend_id: str

    def generate(self, class_name: str, domain: str, prompt: str, seed: int): ...


def _unit_vector(dim: int, seed: int, *path) -> np.ndarray:
    rng = stream(seed, "embed", *path)
    v = rng.normal(size=dim)
    norm = float(np.linalg.norm(v))
    while norm < 1e-12:
        v = rng.normal(size=dim)
        norm = float(np.linalg.norm(v))
    return v / norm


class MockImageBackend:
    """Deterministic feature-vector generator standing in for text-to-image.

    Payload = class embed + domain embed + N(0, noise_scale^2 I). Embeds are
    seeded-hash unit vectors scaled by the configured magnitudes, unless
    explicit class means are supplied (the matched-to-spec mode).
    """

    backend_id = "mock-t2i"

    def __init__(
        self,
        *,
        dim: int = 16,
        class_magnitude: float = 1.0,
        domain_magnitude: float = 0.5,
        noise_scale: float = 0.25,
        seed: int = 0,
        class_means: Mapping[str, np.ndarray] | None = None,
    ):
        if dim < 1:
            raise ValidationError("embedding dim must be >= 1")
        self.dim = dim
        self.class_magnitude = class_magnitude
        self.domain_magnitude = domain_magnitude
        self.noise_scale = noise_scale
        self.seed = seed
        self.class_means = (
            {name: np.asarray(vec, dtype=float) for name, vec in class_means.items()}
            if class_means
            else None
        )

    @classmethod
    def matched(
        cls, spec: MetaDistributionSpec, class_names: Sequence[str], *, seed: int = 0
    ) -> "MockImageBackend":
        """Backend whose output distribution realizes the given hierarchy.

        Class means are the spec's scaled prototypes (plus offset); the domain
        magnitude is shift_scale * sqrt(dim) so that across random domain
        directions the shift covariance matches the spec's Gaussian shifts.
        """
        if len(class_names) != spec.class_count:
            raise ValidationError("class name count must match spec.class_count")
        means = class_means(spec)
        return cls(
            dim=spec.dim,
            class_magnitude=spec.prototype_scale,
            domain_magnitude=spec.domain_shift_scale * math.sqrt(spec.dim),
            noise_scale=spec.noise_scale,
            seed=seed,
            class_means={name: means[i] for i, name in enumerate(class_names)},
        )

    def class_vector(self, class_name: str) -> np.ndarray:
        if self.class_means is not None:
            if class_name not in self.class_means:
                raise ValidationError(f"backend has no class mean for {class_name!r}")
            return self.class_means[class_name]
        return self.class_magnitude * _unit_vector(self.dim, self.seed, "class", class_name)

    def domain_vector(self, domain: str) -> np.ndarray:
        return self.domain_magnitude * _unit_vector(self.dim, self.seed, "domain", domain)

    def generate(self, class_name: str, domain: str, prompt: str, seed: int) -> np.ndarray:
        noise = stream(self.seed, "t2i-noise", seed).normal(0.0, self.noise_scale, size=self.dim)
        return self.class_vector(class_name) + self.domain_vector(domain) + noise


class HttpImageBackend:
    """Text-to-image client over HTTP.

    POSTs {prompt, seed, count, width, height}; the response must carry a
    JSON list of base64 payloads under "images". Batches share the request
    seed; entries are distinguished by their index within the batch.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        token: str | None = None,
        width: int = 512,
        height: int = 512,
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        max_backoff: float = 8.0,
        session: requests.Session | None = None,
    ):
        if not endpoint:
            raise ValidationError("http image backend needs an endpoint")
        self.endpoint = endpoint
        self.token = token
        self.width = width
        self.height = height
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.session = session or requests.Session()
        self.backend_id = f"http-t2i:{endpoint}"

    def generate_batch(self, prompt: str, seed: int, count: int) -> list[bytes]:
        body = {
            "prompt": prompt,
            "seed": seed,
            "count": count,
            "width": self.width,
            "height": self.height,
        }
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        delay = self.backoff
        last_error = "no attempt made"
        for _ in range(self.max_retries + 1):
            try:
                response = self.session.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = str(exc)
            else:
                if response.status_code < 500:
                    if response.status_code != 200:
                        raise BackendError(
                            f"image backend returned {response.status_code}: {response.text[:200]}"
                        )
                    images = response.json().get("images")
                    if not isinstance(images, list) or len(images) != count:
                        raise BackendError("image backend response lacks the requested images")
                    return [base64.b64decode(i) for i in images]
                last_error = f"server error {response.status_code}"
            time.sleep(delay)
            delay = min(delay * 2.0, self.max_backoff)
        raise BackendError(f"image backend failed after retries: {last_error}")


def synthesize(
    prompts: PromptSet,
    images_per_prompt: int,
    backend,
    *,
    seed: int = 0,
    stream_label: StreamLabel = 0,
    task_name: str | None = None,
    config_digest: str = "",
    existing: Manifest | None = None,
    image_dir: Path | None = None,
) -> Manifest:
    """One manifest entry per (prompt, replicate); order fixed by those indices.

    Entries already present in `existing` (matched by id) are reused verbatim,
    so interrupted runs resume without rewriting. On backend failure the
    entries completed so far are preserved inside the raised StageError.
    """
    if images_per_prompt < 1:
        raise ValidationError("images_per_prompt must be >= 1")
    path = as_path(stream_label)
    known = {e.entry_id: e for e in existing.entries} if existing else {}
    entries: list[ManifestEntry] = []
    name = prompts.task_name if task_name is None else task_name

    def fail(exc: Exception, done: list[ManifestEntry]) -> StageError:
        partial = Manifest(
            task_name=name,
            created_at=MANIFEST_STAMP,
            config_digest=config_digest,
            entries=tuple(done),
        )
        error = StageError(
            f"synthesis failed after {len(done)} entries: {exc}",
            stage="synthesize",
            completed=len(done),
        )
        error.partial_manifest = partial
        return error

    http_mode = isinstance(backend, HttpImageBackend)
    if http_mode and image_dir is None:
        raise ValidationError("http image backend requires an image_dir for payload files")
    for item in prompts.items:
        # Replicate seeds are content-keyed, not position-keyed, so shared
        # prompts reproduce the same payloads when a prompt set grows.
        replicate_seeds = [
            derive_seed(seed, "synth", *path, item.class_name, item.domain, item.prompt_text, r)
            for r in range(images_per_prompt)
        ]
        if http_mode:
            ids = [
                compute_entry_id(item.class_name, item.domain, item.prompt_text, s, backend.backend_id)
                for s in replicate_seeds
            ]
            if all(i in known for i in ids):
                entries.extend(known[i] for i in ids)
                continue
            try:
                batch_seed = derive_seed(
                    seed, "synth-batch", *path, item.class_name, item.domain, item.prompt_text
                )
                images = backend.generate_batch(item.prompt_text, batch_seed, images_per_prompt)
            except BackendError as exc:
                raise fail(exc, entries) from exc
            for entry_id, rep_seed, blob in zip(ids, replicate_seeds, images):
                rel = f"images/{entry_id}.png"
                (image_dir / "images").mkdir(parents=True, exist_ok=True)
                (image_dir / rel).write_bytes(blob)
                entries.append(
                    ManifestEntry(
                        entry_id=entry_id,
                        class_name=item.class_name,
                        domain=item.domain,
                        prompt=item.prompt_text,
                        backend_id=backend.backend_id,
                        seed=rep_seed,
                        path=rel,
                    )
                )
            continue
        for rep_seed in replicate_seeds:
            entry_id = compute_entry_id(
                item.class_name, item.domain, item.prompt_text, rep_seed, backend.backend_id
            )
            if entry_id in known:
                entries.append(known[entry_id])
                continue
            try:
                vector = backend.generate(item.class_name, item.domain, item.prompt_text, rep_seed)
            except BackendError as exc:
                raise fail(exc, entries) from exc
            entries.append(
                ManifestEntry(
                    entry_id=entry_id,
                    class_name=item.class_name,
                    domain=item.domain,
                    prompt=item.prompt_text,
                    backend_id=backend.backend_id,
                    seed=rep_seed,
                    vector=tuple(vector),
                )
            )
    return Manifest(
        task_name=name,
        created_at=MANIFEST_STAMP,
        config_digest=config_digest,
        entries=tuple(entries),
    )


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class FilterResult:
    manifest: Manifest
    retention: tuple[dict, ...]  # one row per (class, domain)

    @property
    def retention_rate(self) -> float:
        total = sum(r["total"] for r in self.retention)
        kept = sum(r["kept"] for r in self.retention)
        return kept / total if total else 0.0


Embedder = Callable[[Sequence[str]], Sequence[Sequence[float]]]


def filter_by_similarity(
    manifest: Manifest,
    prototypes: Mapping[str, Sequence[float]],
    threshold: float,
    *,
    embedder: Embedder | None = None,
) -> FilterResult:
    """Score every entry against its class prototype; keep score >= threshold.

    Vector payloads are scored directly; path payloads need an embedding
    callable (see EmbeddingHttpClient). Re-running with the same threshold
    reproduces the same scores and flags.
    """
    vectors: dict[str, np.ndarray] = {}
    path_entries = [e for e in manifest.entries if e.path is not None]
    if path_entries:
        if embedder is None:
            raise ValidationError(
                "manifest holds file payloads; filtering them requires an embedding service"
            )
        embedded = embedder([e.path for e in path_entries])
        if len(embedded) != len(path_entries):
            raise BackendError("embedding service returned the wrong number of vectors")
        for entry, vec in zip(path_entries, embedded):
            vectors[entry.entry_id] = np.asarray(vec, dtype=float)
    protos = {name: np.asarray(vec, dtype=float) for name, vec in prototypes.items()}
    new_entries: list[ManifestEntry] = []
    tallies: dict[tuple[str, str], list[int]] = {}
    for entry in manifest.entries:
        if entry.class_name not in protos:
            raise ValidationError(f"no prototype for class {entry.class_name!r}")
        payload = (
            np.asarray(entry.vector, dtype=float)
            if entry.vector is not None
            else vectors[entry.entry_id]
        )
        score = cosine(payload, protos[entry.class_name])
        kept = score >= threshold
        new_entries.append(replace(entry, filter_score=score, kept=kept))
        bucket = tallies.setdefault((entry.class_name, entry.domain), [0, 0])
        bucket[0] += int(kept)
        bucket[1] += 1
    retention = tuple(
        {
            "class": class_name,
            "domain": domain,
            "kept": kept,
            "total": total,
            "rate": kept / total,
        }
        for (class_name, domain), (kept, total) in sorted(tallies.items())
    )
    filtered = Manifest(
        task_name=manifest.task_name,
        created_at=manifest.created_at,
        config_digest=manifest.config_digest,
        entries=tuple(new_entries),
    )
    return FilterResult(manifest=filtered, retention=retention)


class EmbeddingHttpClient:
    """Embedding service client: POST {inputs: [...]} -> {vectors: [[...]]}."""

    def __init__(
        self,
        endpoint: str,
        *,
        token: str | None = None,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        if not endpoint:
            raise ValidationError("embedding client needs an endpoint")
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, inputs: Sequence[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            response = self.session.post(
                self.endpoint, json={"inputs": list(inputs)}, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendError(f"embedding service unreachable: {exc}") from exc
        if response.status_code != 200:
            raise BackendError(f"embedding service returned {response.status_code}")
        vectors = response.json().get("vectors")
        if not isinstance(vectors, list):
            raise BackendError("embedding service response lacks 'vectors'")
        return vectors


def class_prototypes_from_template(
    backend: MockImageBackend,
    class_names: Sequence[str],
    *,
    samples: int = 32,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Filter prototypes: per class, the mean of class-template generations.

    Stands in for CLIP text embeddings; uses the generic class prompt with the
    template pseudo-domain so prototypes share the backend's geometry.
    """
    prototypes = {}
    for name in class_names:
        prompt = f"An image of {name}"
        vectors = [
            backend.generate(name, "class-template", prompt, derive_seed(seed, "proto", name, i))
            for i in range(samples)
        ]
        prototypes[name] = np.mean(vectors, axis=0)
    return prototypes


GroupedSet = list[tuple[str, list[LabeledSample]]]

PROTOCOLS = ("augment", "single-domain-augment", "data-free")


def assemble_training_set(
    real_groups: GroupedSet | None,
    manifest: Manifest,
    protocol: str,
    *,
    class_names: Sequence[str],
) -> GroupedSet:
    """Build the grouped training set for one evaluation protocol.

    augment: the real domains plus all kept synthetic entries as one extra
    pseudo-domain. single-domain-augment: exactly one real domain plus the
    synthetic pseudo-domain. data-free: synthetic entries only, one group per
    extrapolated domain name. Entries flagged kept=False never appear.
    """
    if protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {protocol!r}")
    if protocol == "data-free" and real_groups:
        raise ValidationError("data-free protocol forbids real data")
    if protocol != "data-free" and not real_groups:
        raise ValidationError(f"protocol {protocol!r} requires real data")
    if protocol == "single-domain-augment" and len(real_groups) != 1:
        raise ValidationError("single-domain-augment requires exactly one real domain")
    label_of = {name: i for i, name in enumerate(class_names)}
    usable = [e for e in manifest.entries if e.kept is not False]
    for entry in usable:
        if entry.class_name not in label_of:
            raise ValidationError(f"manifest class {entry.class_name!r} not in task classes")
        if entry.vector is None:
            raise ValidationError("training assembly requires vector payloads")
    if protocol == "data-free":
        groups: GroupedSet = []
        index: dict[str, int] = {}
        for entry in usable:
            if entry.domain not in index:
                index[entry.domain] = len(groups)
                groups.append((entry.domain, []))
            groups[index[entry.domain]][1].append(
                LabeledSample(
                    features=entry.vector,
                    label=label_of[entry.class_name],
                    domain_id=index[entry.domain],
                )
            )
        return groups
    groups = [(name, list(samples)) for name, samples in real_groups]
    synth_id = len(groups)
    synthetic = [
        LabeledSample(features=e.vector, label=label_of[e.class_name], domain_id=synth_id)
        for e in usable
    ]
    groups.append(("synthetic", synthetic))
    return groups

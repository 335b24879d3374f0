"""Run configuration: a plain-text key-value tree with a strict schema.

Files look like INI: ``[section]`` headers, ``key = value`` lines, ``#``
comments. Unknown sections or keys are rejected outright. The digest is a
stable hash of the fully resolved tree (defaults materialized, CLI overrides
applied), so every report row can be traced to an exact configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ValidationError
from .hypotheses import HypothesisGrid, build_grid
from .metasim import MetaDistributionSpec, PerturbationSpec
from .orchestrator import ClassDef, TaskSpec
from .streams import derive_seed
from .training import TrainConfig


@dataclass(frozen=True)
class _Key:
    kind: str  # int | float | bool | str | choice | floats | ints
    default: str
    choices: tuple[str, ...] = ()


def _choice(default: str, *choices: str) -> _Key:
    return _Key("choice", default, choices)


SCHEMA: dict[str, dict[str, _Key]] = {
    "run": {
        "seed": _Key("int", "0"),
        "out": _Key("str", "out"),
        "backend": _choice("mock", "mock", "http"),
        "threads": _Key("int", "1"),
    },
    "meta": {
        "dim": _Key("int", "4"),
        "class_count": _Key("int", "2"),
        "prototype_scale": _Key("float", "1.0"),
        "domain_shift_scale": _Key("float", "0.7"),
        "noise_scale": _Key("float", "0.5"),
        "label_prior": _Key("floats", ""),
        "prototype_offset": _Key("floats", ""),
        "seed": _Key("int", "-1"),
    },
    "perturb": {
        "prototype_offset": _Key("floats", ""),
        "shift_scale_factor": _Key("float", "1.0"),
        "noise_scale_factor": _Key("float", "1.0"),
    },
    "grid": {
        "size": _Key("int", "64"),
        "construction": _choice("sphere-grid", "sphere-grid", "seeded-random"),
        "weight_cap": _Key("float", "1.0"),
        "seed": _Key("int", "-1"),
    },
    "train": {
        "mode": _choice("grid-erm", "grid-erm", "gd", "gd-ema"),
        "learning_rate": _Key("float", "0.1"),
        "steps": _Key("int", "500"),
        "ema_decay": _Key("float", "0.999"),
        "batch_size": _Key("int", "32"),
        "record_every": _Key("int", "50"),
        "loss": _choice("ramp", "ramp", "zero-one"),
        "source": _choice("filtered", "filtered", "raw"),
        "protocol": _choice("data-free", "data-free", "augment", "single-domain-augment"),
        "seed": _Key("int", "-1"),
    },
    "bound": {
        "n_domains": _Key("int", "10"),
        "m_per_domain": _Key("int", "50"),
        "delta": _Key("float", "0.05"),
        "trials": _Key("int", "200"),
        "sigma_draws": _Key("int", "1024"),
        "variant": _choice("appendix", "appendix", "main-text"),
        "m_eval": _Key("int", "200"),
        "epsilon_assumed": _Key("str", ""),
    },
    "task": {
        "name": _Key("str", "pets"),
        "classes": _Key("str", "dog: a domestic canine; cat: a small domestic feline"),
        "domains_requested": _Key("int", "8"),
        "prompts_per_domain": _Key("int", "8"),
    },
    "orchestrator": {
        "strategy": _choice("class-wise", "class-wise", "dataset-wise"),
        "prompt_mode": _choice("llm", "llm", "template"),
        "temperature": _Key("float", "0.7"),
        "retry_limit": _Key("int", "3"),
        "endpoint": _Key("str", ""),
        "model": _Key("str", ""),
        "response_path": _Key("str", "choices.0.message.content"),
        "stream": _Key("int", "0"),
    },
    "synth": {
        "images_per_prompt": _Key("int", "8"),
        "embed_dim": _Key("int", "16"),
        "class_magnitude": _Key("float", "1.0"),
        "domain_magnitude": _Key("float", "0.5"),
        "noise_scale": _Key("float", "0.25"),
        "match_meta": _Key("bool", "true"),
        "endpoint": _Key("str", ""),
        "width": _Key("int", "512"),
        "height": _Key("int", "512"),
        "stream": _Key("int", "0"),
    },
    "filter": {
        "threshold": _Key("float", "0.2"),
        "prototype_samples": _Key("int", "32"),
        "endpoint": _Key("str", ""),
    },
    "scale": {
        "ladder": _Key("ints", "2,4,8,16,32"),
        "images_per_domain": _Key("int", "64"),
        "seeds": _Key("int", "5"),
    },
    "variance": {
        "repeats": _Key("int", "5"),
        "stages": _Key("str", "extrapolation,synthesis,training"),
    },
    "datafree": {
        "offsets": _Key("floats", "0,0.2,0.4,0.6,0.8"),
        "seeds": _Key("int", "10"),
        "n_domains": _Key("int", "8"),
        "images_per_domain": _Key("int", "64"),
    },
}


def _parse_value(section: str, key: str, raw: str):
    spec = SCHEMA[section][key]
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if spec.kind == "choice":
            if raw not in spec.choices:
                raise ValueError(f"{raw!r} not in {spec.choices}")
            return raw
        if spec.kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip()) if raw else ()
        if spec.kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration tree."""

    values: dict  # section -> key -> raw string

    def get(self, section: str, key: str):
        return _parse_value(section, key, self.values[section][key])

    # -- run-level shortcuts -------------------------------------------------
    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    @property
    def out_dir(self) -> Path:
        return Path(self.get("run", "out"))

    @property
    def backend_kind(self) -> str:
        return self.get("run", "backend")

    @property
    def threads(self) -> int:
        return self.get("run", "threads")

    def stage_seed(self, section: str, stage_name: str) -> int:
        """Explicit per-stage seed, or a stream derived from the global seed."""
        explicit = self.get(section, "seed") if "seed" in SCHEMA[section] else -1
        if explicit >= 0:
            return explicit
        return derive_seed(self.seed, stage_name)

    # -- typed stage views ---------------------------------------------------
    def meta_spec(self) -> MetaDistributionSpec:
        return MetaDistributionSpec(
            dim=self.get("meta", "dim"),
            class_count=self.get("meta", "class_count"),
            prototype_scale=self.get("meta", "prototype_scale"),
            domain_shift_scale=self.get("meta", "domain_shift_scale"),
            noise_scale=self.get("meta", "noise_scale"),
            label_prior=self.get("meta", "label_prior"),
            seed=self.stage_seed("meta", "meta"),
            prototype_offset=self.get("meta", "prototype_offset"),
        )

    def perturbation(self) -> PerturbationSpec:
        return PerturbationSpec(
            prototype_offset=self.get("perturb", "prototype_offset"),
            shift_scale_factor=self.get("perturb", "shift_scale_factor"),
            noise_scale_factor=self.get("perturb", "noise_scale_factor"),
        )

    def grid(self) -> HypothesisGrid:
        return build_grid(
            dim=self.get("meta", "dim"),
            size=self.get("grid", "size"),
            construction=self.get("grid", "construction"),
            seed=self.stage_seed("grid", "grid"),
            weight_cap=self.get("grid", "weight_cap"),
        )

    def task_spec(self) -> TaskSpec:
        classes = []
        for chunk in self.get("task", "classes").split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            name, _, definition = chunk.partition(":")
            classes.append(ClassDef(name=name.strip(), definition=definition.strip()))
        if not classes:
            raise ConfigError("task.classes must name at least one class")
        return TaskSpec(
            task_name=self.get("task", "name"),
            classes=tuple(classes),
            domains_requested=self.get("task", "domains_requested"),
            prompts_per_domain=self.get("task", "prompts_per_domain"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.get("train", "mode"),
            learning_rate=self.get("train", "learning_rate"),
            steps=self.get("train", "steps"),
            ema_decay=self.get("train", "ema_decay"),
            batch_size=self.get("train", "batch_size"),
            seed=self.stage_seed("train", "training"),
            record_every=self.get("train", "record_every"),
        )

    def epsilon_assumed(self) -> float | None:
        raw = self.values["bound"]["epsilon_assumed"].strip()
        if not raw:
            return None
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for bound.epsilon_assumed: {raw!r}") from exc

    # -- canonical form ------------------------------------------------------
    def canonical_text(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key].strip()}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **run_overrides) -> "RunConfig":
        values = {section: dict(keys) for section, keys in self.values.items()}
        for key, value in run_overrides.items():
            if value is None:
                continue
            if key not in SCHEMA["run"]:
                raise ConfigError(f"unknown run override {key!r}")
            values["run"][key] = str(value)
        return RunConfig(values=values)


def parse_config_text(text: str) -> RunConfig:
    """Parse and validate a configuration block; unknown keys are rejected."""
    values: dict[str, dict[str, str]] = {
        section: {key: spec.default for key, spec in keys.items()}
        for section, keys in SCHEMA.items()
    }
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(
                    f"line {lineno}: unknown section [{section}]; known: {sorted(SCHEMA)}"
                )
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(
                f"line {lineno}: unknown key {key!r} in [{section}]; "
                f"known: {sorted(SCHEMA[section])}"
            )
        values[section][key] = value.strip()
    config = RunConfig(values=values)
    # Force-parse everything now so bad values fail at load time.
    for sec, keys in SCHEMA.items():
        for key in keys:
            if not (sec == "bound" and key == "epsilon_assumed"):
                _parse_value(sec, key, config.values[sec][key])
    config.epsilon_assumed()
    return config


def load_config(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        return parse_config_text(text)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def default_config() -> RunConfig:
    return parse_config_text("")

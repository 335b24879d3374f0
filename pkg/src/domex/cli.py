"""Command-line surface.

    domex <subcommand> --config <path> [--seed N] [--out DIR]
          [--backend mock|http] [--force] [--threads N]

Stage subcommands (extrapolate, prompt, synthesize, filter, train, bound)
each read prior artifacts from the output directory and write their own;
experiment subcommands (scale, variance, datafree-eval) run the hermetic
pipeline end to end and emit CSV/JSON reports plus SVG plots. Exit codes:
1 usage, 2 config, 3 missing prerequisite, 4 backend failure, 5 validation.

Reruns with an identical config reproduce identical bytes; outputs whose
content would change are only replaced under --force.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .bounds import bound_experiment
from .config import RunConfig, load_config
from .errors import (
    BackendError,
    ConfigError,
    DomexError,
    MissingArtifactError,
    OverwriteRefusedError,
    StageError,
)
from .experiments import run_datafree, run_scale, run_variance
from .hypotheses import LossFunction, grid_to_json
from .metasim import perturb_meta, sample_dataset, sample_domains
from .orchestrator import (
    HttpChatBackend,
    MockChatBackend,
    build_prompt_set,
    extrapolate_class_wise,
    extrapolate_dataset_wise,
    knowledge_from_json,
    knowledge_to_json,
    prompt_set_from_json,
    prompt_set_to_json,
)
from .reports import render_csv, render_json, render_svg_line_plot
from .streams import derive_seed
from .synth import (
    EmbeddingHttpClient,
    HttpImageBackend,
    MockImageBackend,
    assemble_training_set,
    class_prototypes_from_template,
    filter_by_similarity,
    manifest_from_jsonl,
    manifest_to_jsonl,
    synthesize,
)
from .training import curve_to_csv_rows, empirical_risk, erm_grid, train_gd_ema

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BACKEND = 4
EXIT_VALIDATION = 5

KNOWLEDGE_FILE = "domain_knowledge.json"
PROMPTS_FILE = "prompt_set.json"
MANIFEST_FILE = "manifest.jsonl"
FILTERED_FILE = "manifest_filtered.jsonl"
RETENTION_FILE = "retention_report.json"
HYPOTHESIS_FILE = "hypothesis.json"
GRID_FILE = "grid.json"
CURVE_FILE = "training_curve.csv"
BOUND_CSV = "bound_trials.csv"
BOUND_SUMMARY = "bound_summary.json"
SCALE_CSV = "scale_report.csv"
SCALE_SUMMARY = "scale_summary.json"
SCALE_SVG = "scale_plot.svg"
VARIANCE_CSV = "variance_report.csv"
VARIANCE_SUMMARY = "variance_summary.json"
DATAFREE_CSV = "datafree_report.csv"
DATAFREE_SUMMARY = "datafree_summary.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_artifact(path: Path, data: bytes, force: bool) -> str:
    if path.exists():
        if path.read_bytes() == data:
            return "unchanged"
        if not force:
            raise OverwriteRefusedError(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return "wrote"


def _emit(path: Path, data: bytes, force: bool) -> None:
    print(f"{_write_artifact(path, data, force)} {path}")


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(path)
    return path


def _chat_backend(cfg: RunConfig):
    if cfg.backend_kind == "mock":
        return MockChatBackend(seed=derive_seed(cfg.seed, "extrapolation"))
    endpoint = cfg.get("orchestrator", "endpoint")
    model = cfg.get("orchestrator", "model")
    if not endpoint or not model:
        raise ConfigError("http backend needs orchestrator.endpoint and orchestrator.model")
    return HttpChatBackend(
        endpoint,
        model,
        token=os.environ.get("DOMEX_LLM_TOKEN"),
        response_path=cfg.get("orchestrator", "response_path"),
    )


def _chat_temperature(cfg: RunConfig) -> float | None:
    # Mock runs stay at the backend default (0); http uses the configured value.
    return None if cfg.backend_kind == "mock" else cfg.get("orchestrator", "temperature")


def _image_backend(cfg: RunConfig, class_names):
    seed = derive_seed(cfg.seed, "synthesis")
    if cfg.backend_kind == "http":
        endpoint = cfg.get("synth", "endpoint")
        if not endpoint:
            raise ConfigError("http backend needs synth.endpoint")
        return HttpImageBackend(
            endpoint,
            token=os.environ.get("DOMEX_T2I_TOKEN"),
            width=cfg.get("synth", "width"),
            height=cfg.get("synth", "height"),
        )
    if cfg.get("synth", "match_meta"):
        proxy = perturb_meta(cfg.meta_spec(), cfg.perturbation())
        return MockImageBackend.matched(proxy, class_names, seed=seed)
    return MockImageBackend(
        dim=cfg.get("synth", "embed_dim"),
        class_magnitude=cfg.get("synth", "class_magnitude"),
        domain_magnitude=cfg.get("synth", "domain_magnitude"),
        noise_scale=cfg.get("synth", "noise_scale"),
        seed=seed,
    )


def cmd_extrapolate(cfg: RunConfig, out: Path, force: bool) -> None:
    task = cfg.task_spec()
    backend = _chat_backend(cfg)
    kwargs = dict(
        seed=derive_seed(cfg.seed, "extrapolation"),
        stream_label=cfg.get("orchestrator", "stream"),
        temperature=_chat_temperature(cfg),
        retry_limit=cfg.get("orchestrator", "retry_limit"),
    )
    if cfg.get("orchestrator", "strategy") == "class-wise":
        knowledge = extrapolate_class_wise(task, backend, max_workers=cfg.threads, **kwargs)
    else:
        knowledge = extrapolate_dataset_wise(task, backend, **kwargs)
    text = knowledge_to_json(knowledge, task_name=task.task_name, config_digest=cfg.digest())
    _emit(out / KNOWLEDGE_FILE, text.encode("utf-8"), force)


def cmd_prompt(cfg: RunConfig, out: Path, force: bool) -> None:
    task = cfg.task_spec()
    knowledge = knowledge_from_json(_require(out / KNOWLEDGE_FILE).read_text())
    mode = cfg.get("orchestrator", "prompt_mode")
    backend = _chat_backend(cfg) if mode == "llm" else None
    prompt_set = build_prompt_set(
        task,
        knowledge,
        mode,
        backend,
        seed=derive_seed(cfg.seed, "extrapolation"),
        stream_label=cfg.get("orchestrator", "stream"),
        temperature=_chat_temperature(cfg),
        retry_limit=cfg.get("orchestrator", "retry_limit"),
    )
    text = prompt_set_to_json(prompt_set, config_digest=cfg.digest())
    _emit(out / PROMPTS_FILE, text.encode("utf-8"), force)


def cmd_synthesize(cfg: RunConfig, out: Path, force: bool) -> None:
    task = cfg.task_spec()
    prompt_set = prompt_set_from_json(_require(out / PROMPTS_FILE).read_text())
    backend = _image_backend(cfg, task.class_names)
    manifest_path = out / MANIFEST_FILE
    existing = None
    if manifest_path.exists():
        existing = manifest_from_jsonl(manifest_path.read_text())
    try:
        manifest = synthesize(
            prompt_set,
            cfg.get("synth", "images_per_prompt"),
            backend,
            seed=derive_seed(cfg.seed, "synthesis"),
            stream_label=cfg.get("synth", "stream"),
            config_digest=cfg.digest(),
            existing=existing,
            image_dir=out if cfg.backend_kind == "http" else None,
        )
    except StageError as exc:
        partial = getattr(exc, "partial_manifest", None)
        if partial is not None and len(partial):
            manifest_path.parent.mkdir(parents=True, exist_ok=True)
            manifest_path.write_bytes(manifest_to_jsonl(partial).encode("utf-8"))
            print(f"wrote partial {manifest_path} ({len(partial)} entries)", file=sys.stderr)
        raise
    _emit(manifest_path, manifest_to_jsonl(manifest).encode("utf-8"), force)


def cmd_filter(cfg: RunConfig, out: Path, force: bool) -> None:
    task = cfg.task_spec()
    manifest = manifest_from_jsonl(_require(out / MANIFEST_FILE).read_text())
    threshold = cfg.get("filter", "threshold")
    if cfg.backend_kind == "http":
        endpoint = cfg.get("filter", "endpoint")
        if not endpoint:
            raise ConfigError("http backend needs filter.endpoint for embeddings")
        embedder = EmbeddingHttpClient(endpoint, token=os.environ.get("DOMEX_T2I_TOKEN"))
        vectors = embedder([e.path for e in manifest.entries])
        by_class: dict[str, list] = {}
        for entry, vec in zip(manifest.entries, vectors):
            by_class.setdefault(entry.class_name, []).append(vec)
        # Desk-scale stand-in for CLIP text prototypes: per-class mean embedding.
        prototypes = {name: np.mean(vecs, axis=0) for name, vecs in by_class.items()}
        result = filter_by_similarity(manifest, prototypes, threshold, embedder=embedder)
    else:
        backend = _image_backend(cfg, task.class_names)
        prototypes = class_prototypes_from_template(
            backend,
            task.class_names,
            samples=cfg.get("filter", "prototype_samples"),
            seed=derive_seed(cfg.seed, "synthesis"),
        )
        result = filter_by_similarity(manifest, prototypes, threshold)
    _emit(out / FILTERED_FILE, manifest_to_jsonl(result.manifest).encode("utf-8"), force)
    summary = {
        "config_digest": cfg.digest(),
        "threshold": threshold,
        "retention_rate": result.retention_rate,
        "rows": list(result.retention),
    }
    _emit(out / RETENTION_FILE, render_json(summary), force)


def _real_groups(cfg: RunConfig, protocol: str):
    if protocol == "data-free":
        return None
    spec = cfg.meta_spec()
    count = 1 if protocol == "single-domain-augment" else cfg.get("bound", "n_domains")
    m = cfg.get("bound", "m_per_domain")
    domains = sample_domains(spec, count, "train-real")
    return [
        (f"real-{d.domain_id}", sample_dataset(spec, d, m, "train-real")) for d in domains
    ]


def cmd_train(cfg: RunConfig, out: Path, force: bool) -> None:
    task = cfg.task_spec()
    source = FILTERED_FILE if cfg.get("train", "source") == "filtered" else MANIFEST_FILE
    manifest = manifest_from_jsonl(_require(out / source).read_text())
    protocol = cfg.get("train", "protocol")
    groups_named = assemble_training_set(
        _real_groups(cfg, protocol), manifest, protocol, class_names=task.class_names
    )
    groups = [samples for _, samples in groups_named]
    loss = LossFunction(cfg.get("train", "loss"))
    grid = cfg.grid()
    train_cfg = cfg.train_config()
    curve_rows = []
    if train_cfg.mode == "grid-erm":
        hypothesis, risk = erm_grid(grid, groups, loss)
        mode_out = "grid-erm"
    else:
        result = train_gd_ema(train_cfg, groups, loss)
        hypothesis = result.ema if train_cfg.mode == "gd-ema" else result.raw
        risk = empirical_risk(hypothesis, groups, loss)
        curve_rows = curve_to_csv_rows(result.curve)
        mode_out = train_cfg.mode
    payload = {
        "config_digest": cfg.digest(),
        "mode": mode_out,
        "loss": loss.kind,
        "protocol": protocol,
        "classes": list(task.class_names),
        "weights": list(hypothesis.weights),
        "bias": hypothesis.bias,
        "empirical_risk": risk.value,
        "n_domains": risk.n_domains,
        "m_per_domain": risk.m_per_domain,
    }
    _emit(out / HYPOTHESIS_FILE, render_json(payload), force)
    _emit(out / GRID_FILE, grid_to_json(grid).encode("utf-8"), force)
    if curve_rows:
        _emit(out / CURVE_FILE, render_csv(("step", "raw_risk", "ema_risk"), curve_rows), force)


def cmd_bound(cfg: RunConfig, out: Path, force: bool) -> None:
    spec = cfg.meta_spec()
    result = bound_experiment(
        spec,
        cfg.perturbation(),
        cfg.grid(),
        LossFunction(cfg.get("train", "loss")),
        n=cfg.get("bound", "n_domains"),
        m=cfg.get("bound", "m_per_domain"),
        delta=cfg.get("bound", "delta"),
        trials=cfg.get("bound", "trials"),
        seed=derive_seed(cfg.seed, "bound"),
        sigma_draws=cfg.get("bound", "sigma_draws"),
        m_eval=cfg.get("bound", "m_eval"),
        variant=cfg.get("bound", "variant"),
        epsilon_assumed=cfg.epsilon_assumed(),
    )
    fields = list(result.rows[0].keys())
    _emit(out / BOUND_CSV, render_csv(fields, list(result.rows)), force)
    bounds = sorted(r["bound_value"] for r in result.rows)
    true_risks = sorted(r["true_risk"] for r in result.rows)
    summary = {
        "config_digest": cfg.digest(),
        "violation_rate": result.violation_rate,
        "epsilon_measured": result.epsilon_measured,
        "median_bound": bounds[len(bounds) // 2],
        "median_true_risk": true_risks[len(true_risks) // 2],
        "settings": result.settings,
    }
    _emit(out / BOUND_SUMMARY, render_json(summary), force)


def cmd_scale(cfg: RunConfig, out: Path, force: bool) -> None:
    result = run_scale(cfg)
    fields = list(result.rows[0].keys())
    _emit(out / SCALE_CSV, render_csv(fields, list(result.rows)), force)
    summary = {
        "config_digest": cfg.digest(),
        "rungs": list(result.rungs),
        "median_extrapolated": list(result.median_extrapolated),
        "median_control": list(result.median_control),
        "settings": result.settings,
    }
    _emit(out / SCALE_SUMMARY, render_json(summary), force)
    svg = render_svg_line_plot(
        [
            ("extrapolated", list(result.rungs), list(result.median_extrapolated)),
            ("class-template", list(result.rungs), list(result.median_control)),
        ],
        title="Population risk vs extrapolated domains",
        x_label="extrapolated domains",
        y_label="population risk (0-1)",
    )
    _emit(out / SCALE_SVG, svg, force)


def cmd_variance(cfg: RunConfig, out: Path, force: bool) -> None:
    result = run_variance(cfg)
    fields = list(result.rows[0].keys())
    _emit(out / VARIANCE_CSV, render_csv(fields, list(result.rows)), force)
    summary = {
        "config_digest": cfg.digest(),
        "rows": list(result.rows),
        "runs": list(result.runs),
        "settings": result.settings,
    }
    _emit(out / VARIANCE_SUMMARY, render_json(summary), force)


def cmd_datafree_eval(cfg: RunConfig, out: Path, force: bool) -> None:
    result = run_datafree(cfg)
    fields = list(result.rows[0].keys())
    _emit(out / DATAFREE_CSV, render_csv(fields, list(result.rows)), force)
    summary = {
        "config_digest": cfg.digest(),
        "rungs": list(result.rung_summaries),
        "settings": result.settings,
    }
    _emit(out / DATAFREE_SUMMARY, render_json(summary), force)


_COMMANDS = {
    "extrapolate": cmd_extrapolate,
    "prompt": cmd_prompt,
    "synthesize": cmd_synthesize,
    "filter": cmd_filter,
    "train": cmd_train,
    "bound": cmd_bound,
    "scale": cmd_scale,
    "variance": cmd_variance,
    "datafree-eval": cmd_datafree_eval,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="domex", description=__doc__, add_help=True)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="override run.out output directory")
        p.add_argument("--backend", choices=("mock", "http"), default=None)
        p.add_argument("--force", action="store_true", help="replace outputs whose content changed")
        p.add_argument("--threads", type=int, default=None, help="cap worker counts")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(Path(args.config)).with_overrides(
            seed=args.seed, out=args.out, backend=args.backend, threads=args.threads
        )
        out = cfg.out_dir
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg, out, args.force)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (BackendError, StageError) as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except DomexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

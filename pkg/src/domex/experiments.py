"""Experiment protocols: scaling, variance decomposition, data-free evaluation.

All three drive the hermetic mock pipeline end to end (extrapolate domains,
generate prompts, synthesize matched feature vectors, filter, train) and
score trained hypotheses with closed-form population risk against the
reference hierarchy, so runs are fast and free of evaluation noise.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

import numpy as np

from .bounds import estimate_meta_distance
from .config import RunConfig
from .errors import ConfigError, ValidationError
from .hypotheses import Hypothesis, HypothesisGrid, LossFunction, build_grid
from .metasim import (
    MetaDistributionSpec,
    PerturbationSpec,
    closed_form_risk,
    perturb_meta,
    sample_dataset,
    sample_domains,
    spec_prototypes,
)
from .orchestrator import (
    CLASS_TEMPLATE,
    TEMPLATE_DOMAIN,
    DomainKnowledge,
    MockChatBackend,
    PromptItem,
    PromptSet,
    TaskSpec,
    build_prompt_set,
    extrapolate_class_wise,
    extrapolate_dataset_wise,
)
from .streams import derive_seed
from .synth import (
    FilterResult,
    Manifest,
    MockImageBackend,
    assemble_training_set,
    class_prototypes_from_template,
    filter_by_similarity,
    synthesize,
)
from .training import TrainConfig, erm_grid, train_gd_ema


@dataclass(frozen=True)
class PipelineOutcome:
    knowledge: DomainKnowledge | None
    prompt_set: PromptSet
    manifest: Manifest
    filter_result: FilterResult
    hypothesis: Hypothesis
    kept_count: int
    domain_group_count: int


def train_hypothesis(
    grid: HypothesisGrid,
    groups,
    l: LossFunction,
    train_cfg: TrainConfig | None = None,
    *,
    seed: int | None = None,
) -> Hypothesis:
    """Train per config; grid ERM by default, EMA weights for gd-ema."""
    if train_cfg is None or train_cfg.mode == "grid-erm":
        return erm_grid(grid, groups, l)[0]
    cfg = train_cfg if seed is None else replace(train_cfg, seed=seed)
    result = train_gd_ema(cfg, groups, l)
    return result.ema if cfg.mode == "gd-ema" else result.raw


def run_mock_pipeline(
    task: TaskSpec,
    proxy_spec: MetaDistributionSpec,
    grid: HypothesisGrid,
    l: LossFunction,
    *,
    strategy: str = "dataset-wise",
    prompt_mode: str = "llm",
    images_per_prompt: int = 8,
    threshold: float = 0.2,
    prototype_samples: int = 32,
    extrapolation_seed: int = 0,
    synthesis_seed: int = 0,
    train_cfg: TrainConfig | None = None,
    training_seed: int | None = None,
    retry_limit: int = 3,
    max_workers: int = 1,
) -> PipelineOutcome:
    """Full data-free mock pipeline for one task against one proxy hierarchy."""
    chat = MockChatBackend(seed=extrapolation_seed)
    if strategy == "class-wise":
        knowledge = extrapolate_class_wise(
            task,
            chat,
            seed=extrapolation_seed,
            retry_limit=retry_limit,
            max_workers=max_workers,
        )
    elif strategy == "dataset-wise":
        knowledge = extrapolate_dataset_wise(
            task, chat, seed=extrapolation_seed, retry_limit=retry_limit
        )
    else:
        raise ValidationError(f"unknown strategy {strategy!r}")
    prompt_set = build_prompt_set(
        task,
        knowledge,
        prompt_mode,
        chat,
        seed=extrapolation_seed,
        retry_limit=retry_limit,
    )
    backend = MockImageBackend.matched(proxy_spec, task.class_names, seed=synthesis_seed)
    manifest = synthesize(prompt_set, images_per_prompt, backend, seed=synthesis_seed)
    prototypes = class_prototypes_from_template(
        backend, task.class_names, samples=prototype_samples, seed=synthesis_seed
    )
    filter_result = filter_by_similarity(manifest, prototypes, threshold)
    groups = assemble_training_set(
        None, filter_result.manifest, "data-free", class_names=task.class_names
    )
    hypothesis = train_hypothesis(
        grid, [samples for _, samples in groups], l, train_cfg, seed=training_seed
    )
    kept = sum(1 for e in filter_result.manifest.entries if e.kept)
    return PipelineOutcome(
        knowledge=knowledge,
        prompt_set=prompt_set,
        manifest=manifest,
        filter_result=filter_result,
        hypothesis=hypothesis,
        kept_count=kept,
        domain_group_count=len(groups),
    )


def run_class_template_control(
    task: TaskSpec,
    proxy_spec: MetaDistributionSpec,
    grid: HypothesisGrid,
    l: LossFunction,
    *,
    total_images: int,
    threshold: float = 0.2,
    prototype_samples: int = 32,
    synthesis_seed: int = 0,
    train_cfg: TrainConfig | None = None,
    training_seed: int | None = None,
) -> PipelineOutcome:
    """Matched-budget baseline: one generic pseudo-domain, class-only prompts."""
    per_class = total_images // len(task.classes)
    if per_class < 1 or per_class * len(task.classes) != total_images:
        raise ValidationError("total_images must divide evenly across classes")
    items = tuple(
        PromptItem(
            class_name=c.name,
            domain=TEMPLATE_DOMAIN,
            prompt_text=CLASS_TEMPLATE.format(class_name=c.name),
            mode="class-template",
        )
        for c in task.classes
    )
    prompt_set = PromptSet(
        task_name=task.task_name, mode="class-template", items=items, provenance=()
    )
    backend = MockImageBackend.matched(proxy_spec, task.class_names, seed=synthesis_seed)
    manifest = synthesize(prompt_set, per_class, backend, seed=synthesis_seed)
    prototypes = class_prototypes_from_template(
        backend, task.class_names, samples=prototype_samples, seed=synthesis_seed
    )
    filter_result = filter_by_similarity(manifest, prototypes, threshold)
    groups = assemble_training_set(
        None, filter_result.manifest, "data-free", class_names=task.class_names
    )
    hypothesis = train_hypothesis(
        grid, [samples for _, samples in groups], l, train_cfg, seed=training_seed
    )
    kept = sum(1 for e in filter_result.manifest.entries if e.kept)
    return PipelineOutcome(
        knowledge=None,
        prompt_set=prompt_set,
        manifest=manifest,
        filter_result=filter_result,
        hypothesis=hypothesis,
        kept_count=kept,
        domain_group_count=len(groups),
    )


def _experiment_grid(cfg: RunConfig, label: str, seed_index: int) -> HypothesisGrid:
    """Per-seed grid for seeded-random construction, the fixed grid otherwise."""
    construction = cfg.get("grid", "construction")
    if construction == "seeded-random":
        return build_grid(
            dim=cfg.get("meta", "dim"),
            size=cfg.get("grid", "size"),
            construction=construction,
            seed=derive_seed(cfg.seed, label, "grid", seed_index),
            weight_cap=cfg.get("grid", "weight_cap"),
        )
    return cfg.grid()


def _images_per_prompt(images_per_domain: int, prompts_per_domain: int) -> int:
    if images_per_domain % prompts_per_domain != 0:
        raise ConfigError(
            "images_per_domain must be a multiple of task.prompts_per_domain "
            f"({images_per_domain} vs {prompts_per_domain})"
        )
    return images_per_domain // prompts_per_domain


@dataclass(frozen=True)
class ScaleResult:
    rows: tuple[dict, ...]
    rungs: tuple[int, ...]
    median_extrapolated: tuple[float, ...]
    median_control: tuple[float, ...]
    settings: dict


def run_scale(cfg: RunConfig) -> ScaleResult:
    """Risk versus number of extrapolated domains, with a matched control.

    Extrapolation request seeds are shared across rungs, so a larger rung's
    domain list extends the smaller one and the curve reflects added domains
    rather than resampled ones. The control synthesizes the same total image
    count from class-only prompts in a single generic pseudo-domain.
    """
    spec_mu = cfg.meta_spec()
    if spec_mu.class_count != 2:
        raise ValidationError("scale experiment needs a binary task for the risk oracle")
    proxy = perturb_meta(spec_mu, cfg.perturbation())
    base_task = cfg.task_spec()
    loss = LossFunction(cfg.get("train", "loss"))
    ladder = cfg.get("scale", "ladder")
    images_per_domain = cfg.get("scale", "images_per_domain")
    seeds = cfg.get("scale", "seeds")
    per_prompt = _images_per_prompt(images_per_domain, base_task.prompts_per_domain)
    threshold = cfg.get("filter", "threshold")
    proto_samples = cfg.get("filter", "prototype_samples")
    rows = []
    med_ext, med_ctl = [], []
    for rung in ladder:
        task = replace(base_task, domains_requested=rung)
        ext_risks, ctl_risks = [], []
        for seed_index in range(seeds):
            grid = _experiment_grid(cfg, "scale", seed_index)
            extrap_seed = derive_seed(cfg.seed, "scale", seed_index, "extrapolation")
            synth_seed = derive_seed(cfg.seed, "scale", seed_index, "synthesis")
            outcome = run_mock_pipeline(
                task,
                proxy,
                grid,
                loss,
                strategy="dataset-wise",
                prompt_mode=cfg.get("orchestrator", "prompt_mode"),
                images_per_prompt=per_prompt,
                threshold=threshold,
                prototype_samples=proto_samples,
                extrapolation_seed=extrap_seed,
                synthesis_seed=synth_seed,
            )
            total = rung * images_per_domain
            control = run_class_template_control(
                task,
                proxy,
                grid,
                loss,
                total_images=total,
                threshold=threshold,
                prototype_samples=proto_samples,
                synthesis_seed=derive_seed(cfg.seed, "scale", seed_index, "control"),
            )
            risk_ext = closed_form_risk(spec_mu, outcome.hypothesis, "zero-one")
            risk_ctl = closed_form_risk(spec_mu, control.hypothesis, "zero-one")
            ext_risks.append(risk_ext)
            ctl_risks.append(risk_ctl)
            rows.append(
                {
                    "rung": rung,
                    "seed_index": seed_index,
                    "total_images": total,
                    "risk_extrapolated": risk_ext,
                    "risk_control": risk_ctl,
                    "kept_extrapolated": outcome.kept_count,
                    "kept_control": control.kept_count,
                    "domain_groups": outcome.domain_group_count,
                }
            )
        med_ext.append(statistics.median(ext_risks))
        med_ctl.append(statistics.median(ctl_risks))
    settings = {
        "ladder": list(ladder),
        "images_per_domain": images_per_domain,
        "seeds": seeds,
        "grid_size": cfg.get("grid", "size"),
        "loss": loss.kind,
    }
    return ScaleResult(
        rows=tuple(rows),
        rungs=tuple(ladder),
        median_extrapolated=tuple(med_ext),
        median_control=tuple(med_ctl),
        settings=settings,
    )


VARIANCE_STAGES = ("extrapolation", "synthesis", "training", "all")


@dataclass(frozen=True)
class VarianceResult:
    rows: tuple[dict, ...]
    runs: tuple[dict, ...]
    settings: dict


def run_variance(
    cfg: RunConfig, repeats: int | None = None, stages: tuple[str, ...] | None = None
) -> VarianceResult:
    """Hold all stage seeds fixed except one; report risk mean and std per stage."""
    repeats = cfg.get("variance", "repeats") if repeats is None else repeats
    if repeats < 2:
        raise ValidationError("variance analysis needs repeats >= 2")
    if stages is None:
        stages = tuple(
            s.strip() for s in cfg.get("variance", "stages").split(",") if s.strip()
        )
    for stage in stages:
        if stage not in VARIANCE_STAGES:
            raise ValidationError(f"unknown variance stage {stage!r}")
    spec_mu = cfg.meta_spec()
    if spec_mu.class_count != 2:
        raise ValidationError("variance experiment needs a binary task for the risk oracle")
    proxy = perturb_meta(spec_mu, cfg.perturbation())
    task = cfg.task_spec()
    loss = LossFunction(cfg.get("train", "loss"))
    grid = cfg.grid()
    train_cfg = cfg.train_config()
    per_prompt = cfg.get("synth", "images_per_prompt")
    base = {
        "extrapolation": derive_seed(cfg.seed, "variance", "base", "extrapolation"),
        "synthesis": derive_seed(cfg.seed, "variance", "base", "synthesis"),
        "training": derive_seed(cfg.seed, "variance", "base", "training"),
    }
    rows, runs = [], []
    for stage in stages:
        risks = []
        for rep in range(repeats):
            seeds = dict(base)
            varied = ("extrapolation", "synthesis", "training") if stage == "all" else (stage,)
            for name in varied:
                seeds[name] = derive_seed(cfg.seed, "variance", stage, name, rep)
            outcome = run_mock_pipeline(
                task,
                proxy,
                grid,
                loss,
                strategy=cfg.get("orchestrator", "strategy"),
                prompt_mode=cfg.get("orchestrator", "prompt_mode"),
                images_per_prompt=per_prompt,
                threshold=cfg.get("filter", "threshold"),
                prototype_samples=cfg.get("filter", "prototype_samples"),
                extrapolation_seed=seeds["extrapolation"],
                synthesis_seed=seeds["synthesis"],
                train_cfg=train_cfg,
                training_seed=seeds["training"],
            )
            risk = closed_form_risk(spec_mu, outcome.hypothesis, "zero-one")
            risks.append(risk)
            runs.append({"stage": stage, "rep": rep, "risk": risk})
        rows.append(
            {
                "stage": stage,
                "repeats": repeats,
                "mean_risk": statistics.fmean(risks),
                "std_risk": statistics.pstdev(risks),
            }
        )
    settings = {"repeats": repeats, "stages": list(stages), "train_mode": train_cfg.mode}
    return VarianceResult(rows=tuple(rows), runs=tuple(runs), settings=settings)


@dataclass(frozen=True)
class DatafreeResult:
    rows: tuple[dict, ...]
    rung_summaries: tuple[dict, ...]
    settings: dict


def run_datafree(cfg: RunConfig) -> DatafreeResult:
    """Data-free pipeline training versus a matched supervised baseline.

    For each prototype-offset rung the proxy hierarchy is the reference one
    with class means shifted along the discriminant direction; the pipeline
    trains on synthetic proxy data while the baseline trains on the same
    budget sampled straight from the reference. Both are scored in closed
    form on the reference.
    """
    spec_mu = cfg.meta_spec()
    if spec_mu.class_count != 2:
        raise ValidationError("data-free evaluation needs a binary task for the risk oracle")
    task = cfg.task_spec()
    loss = LossFunction(cfg.get("train", "loss"))
    offsets = cfg.get("datafree", "offsets")
    seeds = cfg.get("datafree", "seeds")
    n_domains = cfg.get("datafree", "n_domains")
    images_per_domain = cfg.get("datafree", "images_per_domain")
    per_prompt = _images_per_prompt(images_per_domain, task.prompts_per_domain)
    threshold = cfg.get("filter", "threshold")
    proto_samples = cfg.get("filter", "prototype_samples")
    protos = spec_prototypes(spec_mu)
    direction = protos[0] - protos[1]
    direction = direction / np.linalg.norm(direction)
    epsilon_grid = cfg.grid()
    rows = []
    summaries = []
    for rung_index, offset in enumerate(offsets):
        perturbation = PerturbationSpec(
            prototype_offset=tuple(float(offset) * direction),
            shift_scale_factor=cfg.get("perturb", "shift_scale_factor"),
            noise_scale_factor=cfg.get("perturb", "noise_scale_factor"),
        )
        proxy = perturb_meta(spec_mu, perturbation)
        epsilon = estimate_meta_distance(
            spec_mu, proxy, epsilon_grid, loss, stream_label=("datafree-epsilon", rung_index)
        ).value
        df_risks, sup_risks, gaps = [], [], []
        for seed_index in range(seeds):
            grid = _experiment_grid(cfg, "datafree", seed_index)
            task_n = replace(task, domains_requested=n_domains)
            outcome = run_mock_pipeline(
                task_n,
                proxy,
                grid,
                loss,
                strategy="dataset-wise",
                prompt_mode=cfg.get("orchestrator", "prompt_mode"),
                images_per_prompt=per_prompt,
                threshold=threshold,
                prototype_samples=proto_samples,
                extrapolation_seed=derive_seed(cfg.seed, "datafree", seed_index, "extrapolation"),
                synthesis_seed=derive_seed(cfg.seed, "datafree", seed_index, "synthesis"),
            )
            m_sup = max(1, round(outcome.kept_count / n_domains))
            domains = sample_domains(spec_mu, n_domains, ("datafree-supervised", seed_index))
            sup_groups = [
                sample_dataset(spec_mu, d, m_sup, ("datafree-supervised", seed_index))
                for d in domains
            ]
            h_sup = train_hypothesis(grid, sup_groups, loss)
            risk_df = closed_form_risk(spec_mu, outcome.hypothesis, "zero-one")
            risk_sup = closed_form_risk(spec_mu, h_sup, "zero-one")
            df_risks.append(risk_df)
            sup_risks.append(risk_sup)
            gaps.append(risk_df - risk_sup)
            rows.append(
                {
                    "offset": float(offset),
                    "rung": rung_index,
                    "seed_index": seed_index,
                    "risk_datafree": risk_df,
                    "risk_supervised": risk_sup,
                    "gap": risk_df - risk_sup,
                    "epsilon": epsilon,
                    "kept": outcome.kept_count,
                    "supervised_m": m_sup,
                }
            )
        summaries.append(
            {
                "offset": float(offset),
                "rung": rung_index,
                "median_risk_datafree": statistics.median(df_risks),
                "median_risk_supervised": statistics.median(sup_risks),
                "median_gap": statistics.median(gaps),
                "epsilon": epsilon,
            }
        )
    settings = {
        "offsets": [float(o) for o in offsets],
        "seeds": seeds,
        "n_domains": n_domains,
        "images_per_domain": images_per_domain,
        "loss": loss.kind,
    }
    return DatafreeResult(rows=tuple(rows), rung_summaries=tuple(summaries), settings=settings)

"""The three-experiment workflow, end to end and in memory.

1. attribute classifier on a stratified split of the cohort;
2. baseline vs biased diagnosis classifiers on curated pairs;
3. regional GradCAM rank vectors, the B/P difference vectors and their
   correlation, plus soft stability of the diagnosis models' attributions.

The CLI persists each stage; this module is what both the CLI and the
acceptance suite call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .attribution import AttributionVolume, StabilitySpec, gradcam3d, stability_curve, to_atlas_space
from .curation import (
    AuditReport, BiasSpec, DatasetPair, Member, SplitSpec, audit_pair, make_pair, stratified_split,
)
from .phantom import VOCAB, Cohort, PhantomSpec, balanced_demographics, generate_cohort
from .rankstats import RankReport, mean_rank_vector, rank_report
from .training import (
    DeltaReport, EvalReport, ModelSpec, TrainConfig, TrainedModel, delta_report, evaluate,
    load_inputs, pooled_cell_accuracy, train_classifier,
)
from .volume import Atlas, SpatialTransform

log = logging.getLogger(__name__)

MODELS = ("baseline", "biased", "attribute")


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_per_cell: int = 100
    ages: tuple[float, ...] = (65.0, 80.0)
    split: SplitSpec = field(default_factory=SplitSpec)
    attribute_split: SplitSpec = field(default_factory=SplitSpec)
    bias: BiasSpec = field(default_factory=BiasSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    stability: StabilitySpec = field(default_factory=StabilitySpec)
    stability_samples: int = 4
    n_permutations: int = 999
    top_k: int = 5
    gradcam_target: str = "predicted"
    null: str = "rank"
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            seed=seed,
            phantom=replace(self.phantom, seed=seed),
            train=replace(self.train, seed=seed),
        )


def build_cohort(cfg: ExperimentConfig) -> Cohort:
    spec = cfg.phantom
    if spec.attribute != cfg.bias.attribute:
        raise ValueError("phantom.attribute and bias.attribute must agree")
    return generate_cohort(spec, balanced_demographics(cfg.n_per_cell, spec.attribute, ages=cfg.ages))


@dataclass
class Curated:
    baseline: DatasetPair
    biased: DatasetPair
    attribute: DatasetPair
    audit: AuditReport


def curate(cohort: Cohort, cfg: ExperimentConfig) -> Curated:
    baseline, biased = make_pair(cohort, cfg.bias, cfg.split, cfg.seed)
    split = stratified_split(cohort, cfg.attribute_split, cfg.seed, attribute=cfg.bias.attribute)
    attr_pair = DatasetPair.from_split("attribute", split, cfg.bias.attribute)
    return Curated(baseline, biased, attr_pair, audit_pair(baseline, biased, cfg.bias))


def train_models(cohort: Cohort, curated: Curated, cfg: ExperimentConfig) -> dict[str, TrainedModel]:
    jobs = {
        "baseline": (curated.baseline, "diagnosis"),
        "biased": (curated.biased, "diagnosis"),
        "attribute": (curated.attribute, "attribute"),
    }
    out = {}
    for name, (pair, target) in jobs.items():
        log.info("training %s model", name)
        out[name] = train_classifier(cfg.model, pair, cohort, target, cfg.train, name=name)
    return out


@dataclass
class Evaluation:
    reports: dict[str, EvalReport]
    delta: DeltaReport
    minority_cells: list[str]

    @property
    def minority_drop(self) -> float | None:
        """Baseline minus biased accuracy over the training-minority cells."""
        a = pooled_cell_accuracy(self.reports["baseline"], self.minority_cells)
        b = pooled_cell_accuracy(self.reports["biased"], self.minority_cells)
        return None if a is None or b is None else a - b

    def to_dict(self) -> dict:
        return {
            "reports": {k: v.to_dict() for k, v in self.reports.items()},
            "delta": self.delta.to_dict(),
            "minority_cells": self.minority_cells,
            "minority_drop": self.minority_drop,
        }


def minority_cells(bias: BiasSpec) -> list[str]:
    names = VOCAB[bias.attribute]
    dx = ("CN", "AD")
    return [f"{names[1 - bias.majority_group(y)]}/{dx[y]}" for y in (0, 1)]


def evaluate_models(cohort: Cohort, curated: Curated, models: dict, cfg: ExperimentConfig) -> Evaluation:
    reports = {
        "baseline": evaluate(models["baseline"], curated.baseline.test, cohort),
        "biased": evaluate(models["biased"], curated.biased.test, cohort),
        "attribute": evaluate(models["attribute"], curated.attribute.test, cohort),
    }
    return Evaluation(reports, delta_report(reports["baseline"], reports["biased"]), minority_cells(cfg.bias))


def analysis_members(curated: Curated) -> list[Member]:
    """One sample per subject from the biased test split."""
    seen, out = set(), []
    for m in curated.biased.test:
        if m.subject_id not in seen:
            seen.add(m.subject_id)
            out.append(m)
    return out


def attribute_models(
    cohort: Cohort,
    members: list[Member],
    models: dict[str, TrainedModel],
    transform: SpatialTransform = SpatialTransform.identity(),
    target: str = "predicted",
) -> dict[str, list[AttributionVolume]]:
    out: dict[str, list[AttributionVolume]] = {}
    for name, model in models.items():
        x = load_inputs(cohort, members, model.config.zscore)
        attrs = []
        for m, xi in zip(members, x):
            if target == "predicted":
                cls = None
            elif model.target == "attribute":
                cls = m.group
            else:
                cls = m.label
            a = gradcam3d(model, xi, cls, sample_id=m.sample_id)
            attrs.append(to_atlas_space(a, transform, cohort.atlas.shape if cohort.atlas else None))
        out[name] = attrs
    return out


def analyze(
    attrs: dict[str, list[AttributionVolume]], atlas: Atlas, cfg: ExperimentConfig
) -> RankReport:
    r = {name: mean_rank_vector(attrs[name], atlas) for name in MODELS}
    rng = np.random.default_rng([cfg.seed, 3])
    return rank_report(
        r["baseline"], r["biased"], r["attribute"], cfg.n_permutations, rng, cfg.top_k, cfg.null,
        region_names=dict(atlas.region_names), n_samples=len(attrs["baseline"]),
    )


def stability(
    cohort: Cohort,
    members: list[Member],
    models: dict[str, TrainedModel],
    cfg: ExperimentConfig,
) -> dict[str, list[tuple[int, float]]]:
    """Soft-stability curves of the diagnosis models.

    Patches are chosen from attributions in model input space, so these are
    recomputed here rather than taken from the atlas-space maps.
    """
    n = min(cfg.stability_samples, len(members))
    mask = cohort.atlas.brain_mask if cohort.atlas is not None else None
    out = {}
    for name in ("baseline", "biased"):
        model = models[name]
        x = load_inputs(cohort, members[:n], model.config.zscore)
        samples = [(xi, gradcam3d(model, xi, sample_id=m.sample_id)) for m, xi in zip(members, x)]
        out[name] = stability_curve(model, samples, cfg.stability, cfg.seed, mask)
    return out


@dataclass
class ExperimentResult:
    cohort: Cohort
    curated: Curated
    models: dict[str, TrainedModel]
    evaluation: Evaluation
    attributions: dict[str, list[AttributionVolume]]
    ranks: RankReport
    stability: dict[str, list[tuple[int, float]]] | None = None


def run_experiment(cfg: ExperimentConfig, with_stability: bool = False) -> ExperimentResult:
    cohort = build_cohort(cfg)
    curated = curate(cohort, cfg)
    models = train_models(cohort, curated, cfg)
    ev = evaluate_models(cohort, curated, models, cfg)
    members = analysis_members(curated)
    attrs = attribute_models(cohort, members, models, target=cfg.gradcam_target)
    ranks = analyze(attrs, cohort.atlas, cfg)
    stab = stability(cohort, members, models, cfg) if with_stability else None
    return ExperimentResult(cohort, curated, models, ev, attrs, ranks, stab)

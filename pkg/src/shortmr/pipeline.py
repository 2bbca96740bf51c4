"""Stage-by-stage persistence of the experiment workflow.

A run directory holds one subdirectory per stage::

    cohort/     cohort.csv, volumes/, atlas.nii, atlas.json, phantom.json
    curate/     baseline.json, biased.json, attribute.json, audit.json
    train/      {baseline,biased,attribute}.pt, evaluation.json
    attribute/  {model}/{sample_id}.nii, attributions.json
    analyze/    rank_report.json, stability.json
    report/     fig_deltas.png, fig_ranks.png, fig_regions.png, fig_stability.png, summary.json

Stage outputs are write-once: a stage refuses to run if its directory
already exists.
"""

from __future__ import annotations

import logging
from pathlib import Path

from . import schemas
from .attribution import AttributionVolume
from .config import ConfigError, RunConfig
from .curation import DatasetPair, audit_pair, composition_table
from .experiment import (
    MODELS, Curated, ExperimentConfig, analysis_members, analyze, attribute_models, build_cohort,
    curate, evaluate_models, stability,
)
from .io import load_cohort, read_json, read_volume, save_cohort, write_json, write_volume
from .phantom import Cohort
from .training import TrainedModel, train_classifier

log = logging.getLogger(__name__)

STAGES = ("generate", "curate", "train", "attribute", "analyze", "report")
STAGE_DIRS = {
    "generate": "cohort",
    "curate": "curate",
    "train": "train",
    "attribute": "attribute",
    "analyze": "analyze",
    "report": "report",
}


class PipelineError(RuntimeError):
    """A stage could not run; ``exit_code`` follows the CLI convention."""

    def __init__(self, message: str, exit_code: int = 2):
        super().__init__(message)
        self.exit_code = exit_code


class MissingArtifact(PipelineError):
    def __init__(self, what: str, command: str):
        super().__init__(f"{what} not found; run {command}", exit_code=1)
        self.command = command


def _emit(payload: dict, path: Path, kind: str) -> Path:
    schemas.validate(payload, kind)
    return write_json(payload, path)


def _cells(records, attribute: str) -> dict:
    """Subject (S) and sample (N) counts per class, split by attribute value."""
    return composition_table({"train": records}, attribute)["train"]


class Run:
    """Artifacts of one run directory, loaded lazily from disk."""

    def __init__(self, cfg: RunConfig, root: str | Path | None = None):
        self.cfg = cfg
        self.exp: ExperimentConfig = cfg.experiment()
        self.root = Path(root if root is not None else cfg["output_dir"])

    def stage_dir(self, cmd: str) -> Path:
        return self.root / STAGE_DIRS[cmd]

    def _fresh(self, cmd: str) -> Path:
        d = self.stage_dir(cmd)
        if d.exists():
            raise PipelineError(
                f"{d} already exists; stage outputs are write-once, use a new --out directory",
                exit_code=1,
            )
        d.mkdir(parents=True)
        return d

    def _need(self, path: Path, what: str, cmd: str) -> Path:
        if not path.exists():
            raise MissingArtifact(what, cmd)
        return path

    # loaders
    def cohort(self) -> Cohort:
        manifest = self._need(self.stage_dir("generate") / "cohort.csv", "cohort manifest", "generate")
        return load_cohort(manifest)

    def curated(self) -> Curated:
        d = self.stage_dir("curate")
        pairs = {}
        for name in ("baseline", "biased", "attribute"):
            pairs[name] = DatasetPair.from_dict(read_json(self._need(d / f"{name}.json", "curated dataset pairs", "curate")))
        audit = audit_pair(pairs["baseline"], pairs["biased"], self.exp.bias)
        return Curated(pairs["baseline"], pairs["biased"], pairs["attribute"], audit)

    def models(self) -> dict[str, TrainedModel]:
        d = self.stage_dir("train")
        return {
            name: TrainedModel.load(self._need(d / f"{name}.pt", "model checkpoints", "train"))
            for name in MODELS
        }

    def attributions(self) -> dict[str, list[AttributionVolume]]:
        d = self.stage_dir("attribute")
        index = read_json(self._need(d / "attributions.json", "attribution volumes", "attribute"))
        out = {}
        for name, rows in index["models"].items():
            out[name] = [
                AttributionVolume(
                    read_volume(d / row["path"]),
                    {k: row[k] for k in ("sample_id", "target_class", "feature_layer")} | {"model": name},
                    row["zero_gradient"],
                )
                for row in rows
            ]
        return out

    # stages
    def generate(self) -> None:
        manifest = self.cfg["cohort.manifest"]
        if manifest:
            path = Path(manifest)
            if not path.is_absolute() and self.cfg.source is not None:
                path = self.cfg.source.parent / path
            if not path.exists():
                raise ConfigError("cohort.manifest", f"manifest not found: {path}")
            cohort = load_cohort(path)
            if cohort.atlas is None:
                raise ConfigError("cohort.manifest", "an atlas.nii next to the manifest is required")
        else:
            cohort = build_cohort(self.exp)
        d = self._fresh("generate")
        save_cohort(cohort, d)
        log.info("wrote %d subjects to %s", len(cohort), d)

    def curate(self) -> bool:
        cohort = self.cohort()
        curated = curate(cohort, self.exp)
        d = self._fresh("curate")
        for name in ("baseline", "biased", "attribute"):
            _emit(getattr(curated, name).to_dict(), d / f"{name}.json", "dataset_pair")
        audit = curated.audit.to_dict()
        # compositions plus unused subjects recompose the cohort totals exactly
        attribute = curated.baseline.attribute
        audit["cohort_totals"] = _cells(cohort.subjects, attribute)
        audit["compositions"] = {}
        audit["unused"] = {}
        for name in ("baseline", "biased"):
            pair = getattr(curated, name)
            used = set().union(*(pair.subjects(s) for s in ("train", "val", "test")))
            audit["compositions"][name] = pair.composition()
            audit["unused"][name] = _cells([r for r in cohort.subjects if r.subject_id not in used], attribute)
        _emit(audit, d / "audit.json", "audit")
        for check in curated.audit.failed():
            log.error("audit check %s failed: %s", check.name, check.detail)
        return curated.audit.passed

    def train(self) -> None:
        cohort = self.cohort()
        curated = self.curated()
        jobs = {
            "baseline": (curated.baseline, "diagnosis"),
            "biased": (curated.biased, "diagnosis"),
            "attribute": (curated.attribute, "attribute"),
        }
        models = {}
        for name, (pair, target) in jobs.items():
            log.info("training %s model", name)
            models[name] = train_classifier(self.exp.model, pair, cohort, target, self.exp.train, name=name)
        ev = evaluate_models(cohort, curated, models, self.exp)
        d = self._fresh("train")
        for name, model in models.items():
            model.save(d / f"{name}.pt")
        payload = ev.to_dict()
        payload["training"] = {
            name: {
                "target": m.target if m.target == "diagnosis" else m.attribute,
                "best_epoch": m.best_epoch,
                "history": m.history,
            }
            for name, m in models.items()
        }
        _emit(payload, d / "evaluation.json", "evaluation")

    def attribute(self) -> None:
        cohort = self.cohort()
        curated = self.curated()
        models = self.models()
        members = analysis_members(curated)
        attrs = attribute_models(cohort, members, models, self.cfg.transform(), self.exp.gradcam_target)
        d = self._fresh("attribute")
        index: dict = {"transform": self.cfg["attribution.transform"], "models": {}}
        for name, vols in attrs.items():
            (d / name).mkdir()
            rows = []
            for a in vols:
                rel = f"{name}/{a.provenance['sample_id']}.nii"
                write_volume(a.volume, d / rel, "float32")
                rows.append({
                    "path": rel,
                    "sample_id": a.provenance["sample_id"],
                    "target_class": a.provenance["target_class"],
                    "feature_layer": a.provenance["feature_layer"],
                    "zero_gradient": a.zero_gradient,
                })
            index["models"][name] = rows
        _emit(index, d / "attributions.json", "attributions")

    def analyze(self) -> None:
        attrs = self.attributions()
        cohort = self.cohort()
        if cohort.atlas is None:
            raise MissingArtifact("atlas", "generate")
        report = analyze(attrs, cohort.atlas, self.exp)
        models = self.models()
        members = analysis_members(self.curated())
        curves = stability(cohort, members, models, self.exp)
        spec = self.exp.stability
        d = self._fresh("analyze")
        _emit(report.to_dict(), d / "rank_report.json", "rank_report")
        _emit(
            {
                "sampling": spec.sampling,
                "patch_size": list(spec.patch_size),
                "top_fraction": spec.top_fraction,
                "trials": spec.trials,
                "n_samples": min(self.exp.stability_samples, len(members)),
                "curves": {
                    name: [{"radius": r, "stability": s} for r, s in curve] for name, curve in curves.items()
                },
            },
            d / "stability.json",
            "stability",
        )

    def report(self) -> None:
        from . import plots

        ev_path = self._need(self.stage_dir("train") / "evaluation.json", "evaluation reports", "train")
        rank_path = self._need(self.stage_dir("analyze") / "rank_report.json", "rank report", "analyze")
        stab_path = self._need(self.stage_dir("analyze") / "stability.json", "stability curves", "analyze")
        evaluation, ranks, stab = read_json(ev_path), read_json(rank_path), read_json(stab_path)
        cohort = self.cohort()
        d = self._fresh("report")
        figures = [
            plots.delta_figure(evaluation["delta"], d / "fig_deltas.png"),
            plots.rank_scatter(ranks, d / "fig_ranks.png"),
            plots.region_overlay(cohort.atlas, ranks["top_regions"], d / "fig_regions.png"),
            plots.stability_figure(stab["curves"], d / "fig_stability.png"),
        ]
        truth = cohort.ground_truth
        summary = {
            "macro_f1": {k: v["macro_f1"] for k, v in evaluation["reports"].items()},
            "minority_drop": evaluation["minority_drop"],
            "rho": ranks["rho"],
            "p_perm": ranks["p_perm"],
            "top_regions": ranks["top_regions"],
            "planted_attr_regions": list(truth.attr_regions) if truth is not None else None,
            "figures": [p.name for p in figures],
        }
        _emit(summary, d / "summary.json", "summary")


def run_pipeline(cmd: str, cfg: RunConfig, root: str | Path | None = None) -> int:
    """Run one stage; returns the CLI exit status for outcomes that are not errors."""
    if cmd not in STAGES:
        raise PipelineError(f"unknown command {cmd!r}; expected one of {list(STAGES)}", exit_code=1)
    run = Run(cfg, root)
    run.root.mkdir(parents=True, exist_ok=True)
    ok = getattr(run, cmd)()
    return 1 if ok is False else 0

"""Flat ``key = value`` run configuration.

Values are parsed as JSON when possible (numbers, booleans, lists) and kept as
plain strings otherwise. Unknown keys are rejected and every error names the
offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .attribution import StabilitySpec
from .curation import BiasSpec, SplitSpec
from .experiment import ExperimentConfig
from .phantom import PhantomSpec
from .training import ModelSpec, TrainConfig
from .volume import SpatialTransform

REQUIRED = object()


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}" if key else message)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _str(v):
    return str(v)


def _ints(n: int | None = None):
    def parse(v):
        if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
            raise ValueError("expected a list of integers")
        if n is not None and len(v) != n:
            raise ValueError(f"expected {n} integers")
        return tuple(v)

    return parse


def _nums(v):
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) for x in v):
        raise ValueError("expected a list of numbers")
    return tuple(float(x) for x in v)


def _bools(v):
    if not isinstance(v, list) or not all(isinstance(x, bool) for x in v):
        raise ValueError("expected a list of booleans")
    return tuple(v)


def _strs(v):
    if isinstance(v, str):
        v = [s.strip() for s in v.split(",") if s.strip()]
    if not isinstance(v, list):
        raise ValueError("expected a list of names")
    return tuple(str(s) for s in v)


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {list(options)}")
        return v

    return parse


_P, _S, _B, _M, _T, _A = PhantomSpec(), SplitSpec(), BiasSpec(), ModelSpec(), TrainConfig(), StabilitySpec()

# key -> (default, parser)
SCHEMA: dict[str, tuple[Any, Callable]] = {
    "seed": (REQUIRED, _int),
    "output_dir": (REQUIRED, _str),
    "cohort.manifest": ("", _str),
    "phantom.shape": (list(_P.shape), _ints(3)),
    "phantom.n_regions": (_P.n_regions, _int),
    "phantom.atlas_scheme": (_P.atlas_scheme, _choice("grid", "voronoi")),
    "phantom.attribute": (_P.attribute, _choice("sex", "race")),
    "phantom.attr_regions": (list(_P.attr_regions), _ints()),
    "phantom.disease_regions": (list(_P.disease_regions), _ints()),
    "phantom.attr_effect": (_P.attr_effect, _num),
    "phantom.disease_effect": (_P.disease_effect, _num),
    "phantom.noise_sigma": (_P.noise_sigma, _num),
    "phantom.anatomy_jitter": (_P.anatomy_jitter, _num),
    "phantom.samples_per_subject": (_P.samples_per_subject, _int),
    "phantom.n_per_cell": (100, _int),
    "phantom.ages": ([65.0, 80.0], _nums),
    "split.train_fraction": (_S.train_fraction, _num),
    "split.val_fraction_of_train": (_S.val_fraction_of_train, _num),
    "split.test_fraction": (_S.test_fraction, _num),
    "split.strata": (list(_S.strata), _strs),
    "attribute_split.val_fraction_of_train": (_S.val_fraction_of_train, _num),
    "bias.p_train": (_B.p_train, _num),
    "bias.p_test": (_B.p_test, _num),
    "bias.majority_pairs": ([list(p) for p in _B.majority_pairs], lambda v: tuple(_ints(2)(p) for p in v)),
    "bias.budget_CN": (0, _int),
    "bias.budget_AD": (0, _int),
    "model.channels": (list(_M.channels), _ints()),
    "model.pool_after": (list(_M.pool_after), _bools),
    "model.norm": (_M.norm, _choice("none", "group", "batch")),
    "train.max_epochs": (_T.max_epochs, _int),
    "train.batch_size": (_T.batch_size, _int),
    "train.accumulation_steps": (_T.accumulation_steps, _int),
    "train.lr": (_T.lr, _num),
    "train.weight_decay": (_T.weight_decay, _num),
    "train.cosine_horizon": (0, _int),
    "train.patience": (_T.patience, _int),
    "train.selection": (_T.selection, _choice("val_f1", "val_loss")),
    "train.zscore": (_T.zscore, _bool),
    "attribution.target": ("predicted", _choice("predicted", "label")),
    "attribution.transform": ("identity", _str),
    "stability.patch_size": (list(_A.patch_size), _ints(3)),
    "stability.top_fraction": (_A.top_fraction, _num),
    "stability.radii": (list(_A.radii), _ints()),
    "stability.trials": (_A.trials, _int),
    "stability.fill_value": (_A.fill_value, _num),
    "stability.mask": (_A.mask, _bool),
    "stability.sampling": (_A.sampling, _choice("ball", "size")),
    "stability.n_samples": (4, _int),
    "analysis.n_permutations": (999, _int),
    "analysis.top_k": (5, _int),
    "analysis.null": ("rank", _choice("rank", "label")),
}


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class RunConfig:
    values: dict[str, Any]
    source: Path | None = None
    explicit: set[str] = field(default_factory=set)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def from_mapping(cls, raw: dict[str, Any], source: Path | None = None) -> "RunConfig":
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(unknown[0], f"unknown key (unknown keys: {unknown})")
        values = {}
        for key, (default, parser) in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parser(raw[key])
                except ValueError as exc:
                    raise ConfigError(key, f"{exc}, got {raw[key]!r}") from None
            elif default is REQUIRED:
                raise ConfigError(key, "required key is missing")
            else:
                values[key] = parser(default)
        cfg = cls(values, source, set(raw))
        cfg.experiment()  # surfaces range errors at load time
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, Any] | None = None) -> "RunConfig":
        path = Path(path)
        raw: dict[str, Any] = {}
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(None, f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in raw:
                raise ConfigError(key, f"{path}:{lineno}: duplicate key")
            raw[key] = parse_value(value)
        raw.update(overrides or {})
        return cls.from_mapping(raw, path)

    def dump(self) -> str:
        lines = [f"{k} = {json.dumps(v if not isinstance(v, tuple) else _listify(v))}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    def _build(self, key_prefix: str, build: Callable[[], Any]) -> Any:
        try:
            return build()
        except (ValueError, TypeError) as exc:
            keys = [k for k in self.explicit if k.startswith(key_prefix)] or [key_prefix + "*"]
            raise ConfigError(sorted(keys)[0], str(exc)) from None

    def experiment(self) -> ExperimentConfig:
        v = self.values
        seed = v["seed"]
        phantom = self._build("phantom.", lambda: PhantomSpec(
            shape=v["phantom.shape"], n_regions=v["phantom.n_regions"],
            attr_regions=v["phantom.attr_regions"], disease_regions=v["phantom.disease_regions"],
            attribute=v["phantom.attribute"], attr_effect=v["phantom.attr_effect"],
            disease_effect=v["phantom.disease_effect"], noise_sigma=v["phantom.noise_sigma"],
            anatomy_jitter=v["phantom.anatomy_jitter"],
            samples_per_subject=v["phantom.samples_per_subject"],
            atlas_scheme=v["phantom.atlas_scheme"], seed=seed,
        ))
        split = self._build("split.", lambda: SplitSpec(
            v["split.train_fraction"], v["split.val_fraction_of_train"], v["split.test_fraction"],
            v["split.strata"],
        ))
        attr_split = self._build("attribute_split.", lambda: replace(
            split, val_fraction_of_train=v["attribute_split.val_fraction_of_train"]
        ))
        budgets = None
        if v["bias.budget_CN"] or v["bias.budget_AD"]:
            budgets = {"CN": v["bias.budget_CN"], "AD": v["bias.budget_AD"]}
        bias = self._build("bias.", lambda: BiasSpec(
            v["phantom.attribute"], v["bias.majority_pairs"], v["bias.p_train"], v["bias.p_test"], budgets
        ))
        model = self._build("model.", lambda: ModelSpec(
            input_shape=v["phantom.shape"], channels=v["model.channels"],
            pool_after=v["model.pool_after"], norm=v["model.norm"],
        ))
        train = self._build("train.", lambda: TrainConfig(
            v["train.max_epochs"], v["train.batch_size"], v["train.accumulation_steps"], v["train.lr"],
            v["train.weight_decay"], v["train.cosine_horizon"] or None, v["train.patience"],
            v["train.selection"], seed, v["train.zscore"],
        ))
        stab = self._build("stability.", lambda: StabilitySpec(
            v["stability.patch_size"], v["stability.top_fraction"], v["stability.radii"],
            v["stability.trials"], v["stability.fill_value"], v["stability.mask"], v["stability.sampling"],
        ))
        for key in ("analysis.n_permutations",):
            if v[key] < 99:
                raise ConfigError(key, "must be at least 99")
        if v["analysis.top_k"] < 1 or v["analysis.top_k"] > v["phantom.n_regions"]:
            raise ConfigError("analysis.top_k", f"must lie in 1..{v['phantom.n_regions']}")
        if v["phantom.n_per_cell"] < 1:
            raise ConfigError("phantom.n_per_cell", "must be >= 1")
        return ExperimentConfig(
            phantom=phantom, n_per_cell=v["phantom.n_per_cell"], ages=v["phantom.ages"],
            split=split, attribute_split=attr_split, bias=bias, model=model, train=train,
            stability=stab, stability_samples=v["stability.n_samples"],
            n_permutations=v["analysis.n_permutations"], top_k=v["analysis.top_k"],
            gradcam_target=v["attribution.target"], null=v["analysis.null"], seed=seed,
        )

    def transform(self) -> SpatialTransform:
        spec = self.values["attribution.transform"]
        if spec == "identity":
            return SpatialTransform.identity()
        path = Path(spec)
        if not path.is_absolute() and self.source is not None:
            path = self.source.parent / path
        if not path.exists():
            raise ConfigError("attribution.transform", f"transform file not found: {path}")
        try:
            arr = np.load(path) if path.suffix == ".npy" else np.loadtxt(path)
            if arr.shape == (4, 4):
                return SpatialTransform.affine(arr)
            return SpatialTransform.displacement(arr)
        except ValueError as exc:
            raise ConfigError("attribution.transform", str(exc)) from None


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(x) for x in v]
    return v

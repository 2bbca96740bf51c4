"""Volumetric classifiers, the training protocol and evaluation metrics."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .curation import SPLITS, DatasetPair, Member
from .phantom import DIAGNOSES, VOCAB, Cohort
from .volume import Shape3, Volume, normalize_zscore

log = logging.getLogger(__name__)

Target = Literal["diagnosis", "attribute"]


class SubjectOverlapError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelSpec:
    input_shape: Shape3 = (32, 32, 32)
    channels: tuple[int, ...] = (8, 16, 32, 32)
    pool_after: tuple[bool, ...] = (True, True, False, False)
    n_classes: int = 2
    norm: Literal["none", "group", "batch"] = "batch"
    architecture: str = "small3dcnn"

    def __post_init__(self):
        if len(self.channels) != len(self.pool_after):
            raise ValueError("channels and pool_after must have the same length")
        if self.n_classes != 2:
            raise ValueError("only binary classifiers are supported")
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "pool_after", tuple(bool(p) for p in self.pool_after))

    @property
    def feature_layer(self) -> str:
        return f"stage{len(self.channels)}"

    def feature_shape(self) -> Shape3:
        shape = self.input_shape
        for pool in self.pool_after:
            if pool:
                shape = tuple(n // 2 for n in shape)
        return shape


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    batch_size: int = 4
    accumulation_steps: int = 1
    lr: float = 1e-3
    weight_decay: float = 1e-2
    cosine_horizon: int | None = None
    patience: int = 20
    selection: Literal["val_f1", "val_loss"] = "val_f1"
    seed: int = 0
    zscore: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.selection not in ("val_f1", "val_loss"):
            raise ValueError(f"unknown selection metric {self.selection!r}")


class SmallCNN3D(nn.Module):
    """Conv stages, global average pooling and a linear head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        in_ch = 1
        for i, (ch, pool) in enumerate(zip(spec.channels, spec.pool_after), start=1):
            layers: list[nn.Module] = [nn.Conv3d(in_ch, ch, kernel_size=3, padding=1)]
            if spec.norm == "group":
                layers.append(nn.GroupNorm(1, ch))
            elif spec.norm == "batch":
                layers.append(nn.BatchNorm3d(ch))
            layers.append(nn.ReLU())
            if pool:
                layers.append(nn.MaxPool3d(2))
            self.add_module(f"stage{i}", nn.Sequential(*layers))
            in_ch = ch
        self.n_stages = len(spec.channels)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.head = nn.Linear(in_ch, spec.n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for i in range(1, self.n_stages + 1):
            x = getattr(self, f"stage{i}")(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.pool(self.features(x)).flatten(1))


def build_model(spec: ModelSpec) -> SmallCNN3D:
    return SmallCNN3D(spec)


@dataclass
class TrainedModel:
    module: nn.Module
    spec: ModelSpec
    config: TrainConfig = field(default_factory=TrainConfig)
    target: str = "diagnosis"
    attribute: str = "sex"
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    name: str = "model"

    @property
    def feature_layer(self) -> str:
        return self.spec.feature_layer

    def layer(self) -> nn.Module:
        return self.module.get_submodule(self.feature_layer)

    def logits(self, batch: np.ndarray, chunk: int = 16) -> np.ndarray:
        """Logits for a ``(N, D, H, W)`` array of model-ready inputs."""
        self.module.eval()
        param = next(self.module.parameters())
        out = []
        with torch.no_grad():
            for i in range(0, len(batch), chunk):
                x = torch.as_tensor(np.asarray(batch[i : i + chunk]), dtype=param.dtype)
                out.append(self.module(x.unsqueeze(1)).cpu().numpy())
        return np.concatenate(out) if out else np.zeros((0, 2))

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.logits(batch).argmax(axis=1)

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "state_dict": self.module.state_dict(),
                "model_spec": asdict(self.spec),
                "train_config": asdict(self.config),
                "target": self.target,
                "attribute": self.attribute,
                "history": self.history,
                "best_epoch": self.best_epoch,
                "name": self.name,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        spec = ModelSpec(**blob["model_spec"])
        module = build_model(spec)
        module.load_state_dict(blob["state_dict"])
        module.eval()
        return cls(
            module, spec, TrainConfig(**blob["train_config"]), blob["target"],
            blob["attribute"], blob["history"], blob["best_epoch"], blob["name"],
        )


def class_weights(labels: Sequence[int]) -> tuple[float, float]:
    """Inverse-probability weights ``N / (2 n_c)``."""
    labels = np.asarray(labels)
    n = len(labels)
    counts = [int(np.sum(labels == c)) for c in (0, 1)]
    if min(counts) == 0:
        raise ValueError(f"both classes must be present, got counts {counts}")
    return tuple(n / (2.0 * c) for c in counts)


def weighted_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, weights: Sequence[float]
) -> torch.Tensor:
    """Class-weighted cross entropy, normalised by the summed sample weights."""
    w = torch.as_tensor(weights, dtype=logits.dtype)
    return F.cross_entropy(logits, labels, weight=w)


def preprocess(v: Volume, zscore: bool = True) -> np.ndarray:
    return (normalize_zscore(v) if zscore else v).data.astype(np.float32)


def member_labels(members: Sequence[Member], target: str) -> np.ndarray:
    if target == "diagnosis":
        return np.array([m.label for m in members], dtype=np.int64)
    if target == "attribute":
        return np.array([m.group for m in members], dtype=np.int64)
    raise ValueError(f"unknown target {target!r}")


def load_inputs(cohort: Cohort, members: Sequence[Member], zscore: bool = True) -> np.ndarray:
    return np.stack([preprocess(cohort.samples[m.sample_id], zscore) for m in members])


def check_no_overlap(data: DatasetPair) -> None:
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1 :]:
            shared = data.subjects(a) & data.subjects(b)
            if shared:
                raise SubjectOverlapError(
                    f"subject overlap between {a} and {b}: {sorted(shared)[:5]}"
                )


def f1_scores(y_true: np.ndarray, y_pred: np.ndarray) -> list[float | None]:
    out: list[float | None] = []
    for c in (0, 1):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        out.append(2 * tp / denom if denom else None)
    return out


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(np.mean([f if f is not None else 0.0 for f in f1_scores(y_true, y_pred)]))


def _selection_key(cfg: TrainConfig, row: dict) -> tuple:
    if cfg.selection == "val_f1":
        return (row["val_f1"], -row["val_loss"])
    return (-row["val_loss"],)


class EarlyStopping:
    """Tracks the best epoch under the selection key and the patience budget."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.best_key: tuple | None = None
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, row: dict) -> bool:
        """Record one epoch; returns True if it is the new best."""
        key = _selection_key(self.cfg, row)
        if self.best_key is None or key > self.best_key:
            self.best_key, self.best_epoch, self.stale = key, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.cfg.patience


def _run_eval(module: nn.Module, x: torch.Tensor, y: torch.Tensor, w, chunk: int = 16):
    module.eval()
    logits = []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            logits.append(module(x[i : i + chunk]))
    logits = torch.cat(logits)
    loss = float(weighted_cross_entropy(logits, y, w))
    pred = logits.argmax(1).numpy()
    return loss, macro_f1(y.numpy(), pred)


def train_classifier(
    spec: ModelSpec,
    data: DatasetPair,
    cohort: Cohort,
    target: Target = "diagnosis",
    cfg: TrainConfig = TrainConfig(),
    name: str | None = None,
) -> TrainedModel:
    """Train with class-weighted cross entropy, AdamW and a cosine schedule.

    The checkpoint with the best validation score (F1, ties broken by loss,
    unless ``cfg.selection == "val_loss"``) is returned; training stops early
    after ``cfg.patience`` epochs without improvement.
    """
    check_no_overlap(data)
    if not data.train or not data.val:
        raise ValueError("train and val splits must be non-empty")
    torch.manual_seed(cfg.seed)
    module = build_model(spec)
    x_train = torch.from_numpy(load_inputs(cohort, data.train, cfg.zscore)).unsqueeze(1)
    y_train = torch.from_numpy(member_labels(data.train, target))
    x_val = torch.from_numpy(load_inputs(cohort, data.val, cfg.zscore)).unsqueeze(1)
    y_val = torch.from_numpy(member_labels(data.val, target))
    weights = class_weights(y_train.numpy())

    opt = torch.optim.AdamW(module.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    horizon = cfg.cosine_horizon or cfg.max_epochs
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=horizon)
    order_rng = np.random.default_rng([cfg.seed, 7])
    stopper = EarlyStopping(cfg)
    history: list[dict] = []
    best_state = copy.deepcopy(module.state_dict())

    for epoch in range(1, cfg.max_epochs + 1):
        module.train()
        order = order_rng.permutation(len(x_train))
        total, n_seen = 0.0, 0
        opt.zero_grad()
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for step, idx in enumerate(batches, start=1):
            idx_t = torch.from_numpy(idx)
            loss = weighted_cross_entropy(module(x_train[idx_t]), y_train[idx_t], weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, loss.item())
            (loss / cfg.accumulation_steps).backward()
            if step % cfg.accumulation_steps == 0 or step == len(batches):
                opt.step()
                opt.zero_grad()
            total += loss.item() * len(idx)
            n_seen += len(idx)
        sched.step()
        val_loss, val_f1 = _run_eval(module, x_val, y_val, weights)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, val_loss)
        row = {
            "epoch": epoch,
            "train_loss": total / n_seen,
            "val_loss": val_loss,
            "val_f1": val_f1,
            "lr": opt.param_groups[0]["lr"],
        }
        history.append(row)
        if stopper.update(epoch, row):
            best_state = copy.deepcopy(module.state_dict())
        log.debug("epoch %d %s", epoch, row)
        if stopper.should_stop:
            break

    module.load_state_dict(best_state)
    module.eval()
    return TrainedModel(
        module, spec, cfg, target, data.attribute, history, stopper.best_epoch,
        name or f"{data.name}:{target}",
    )


@dataclass
class EvalReport:
    n: int
    class_names: tuple[str, str]
    group_names: tuple[str, str]
    confusion: list[list[int]]
    f1: dict[str, float | None]
    macro_f1: float
    accuracy: float
    group_accuracy: dict[str, float | None]
    cell_accuracy: dict[str, float | None]
    group_counts: dict[str, int]
    cell_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "class_names": list(self.class_names),
            "group_names": list(self.group_names),
            "confusion": self.confusion,
            "f1": self.f1,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "group_accuracy": self.group_accuracy,
            "cell_accuracy": self.cell_accuracy,
            "group_counts": self.group_counts,
            "cell_counts": self.cell_counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["n"], tuple(d["class_names"]), tuple(d["group_names"]), d["confusion"], d["f1"],
            d["macro_f1"], d["accuracy"], d["group_accuracy"], d["cell_accuracy"], d["group_counts"],
            d["cell_counts"],
        )


def _acc(mask: np.ndarray, correct: np.ndarray) -> float | None:
    n = int(mask.sum())
    return float(correct[mask].sum() / n) if n else None


def eval_report(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    groups: Sequence[int],
    diagnoses: Sequence[int] | None = None,
    class_names: Sequence[str] = DIAGNOSES,
    group_names: Sequence[str] = VOCAB["sex"],
) -> EvalReport:
    """Metrics from label vectors; empty groups or cells have accuracy ``None``."""
    y_true, y_pred, groups = (np.asarray(a, dtype=int) for a in (y_true, y_pred, groups))
    if len(y_true) == 0:
        raise ValueError("cannot evaluate an empty split")
    diagnoses = y_true if diagnoses is None else np.asarray(diagnoses, dtype=int)
    correct = y_true == y_pred
    cm = [[int(np.sum((y_true == t) & (y_pred == p))) for p in (0, 1)] for t in (0, 1)]
    f1 = f1_scores(y_true, y_pred)
    cell_masks = {
        f"{group_names[a]}/{DIAGNOSES[y]}": (groups == a) & (diagnoses == y)
        for a in (0, 1)
        for y in (0, 1)
    }
    return EvalReport(
        n=len(y_true),
        class_names=tuple(class_names),
        group_names=tuple(group_names),
        confusion=cm,
        f1={class_names[c]: f1[c] for c in (0, 1)},
        macro_f1=float(np.mean([f if f is not None else 0.0 for f in f1])),
        accuracy=float(correct.mean()),
        group_accuracy={group_names[a]: _acc(groups == a, correct) for a in (0, 1)},
        cell_accuracy={k: _acc(m, correct) for k, m in cell_masks.items()},
        group_counts={group_names[a]: int(np.sum(groups == a)) for a in (0, 1)},
        cell_counts={k: int(m.sum()) for k, m in cell_masks.items()},
    )


def evaluate(
    model: TrainedModel, members: Sequence[Member], cohort: Cohort, target: str | None = None
) -> EvalReport:
    if not members:
        raise ValueError("cannot evaluate an empty split")
    target = target or model.target
    x = load_inputs(cohort, members, model.config.zscore)
    pred = model.predict(x)
    class_names = DIAGNOSES if target == "diagnosis" else VOCAB[model.attribute]
    return eval_report(
        member_labels(members, target),
        pred,
        [m.group for m in members],
        [m.label for m in members],
        class_names,
        VOCAB[model.attribute],
    )


@dataclass
class DeltaReport:
    f1: dict[str, float | None]
    macro_f1: float
    group_accuracy: dict[str, float | None]
    cell_accuracy: dict[str, float | None]
    baseline: EvalReport
    biased: EvalReport

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "macro_f1": self.macro_f1,
            "group_accuracy": self.group_accuracy,
            "cell_accuracy": self.cell_accuracy,
            "baseline": self.baseline.to_dict(),
            "biased": self.biased.to_dict(),
        }


def _diff(a: Mapping, b: Mapping, what: str) -> dict:
    if set(a) != set(b):
        raise ValueError(f"mismatched {what} sets: {sorted(a)} vs {sorted(b)}")
    return {k: (None if a[k] is None or b[k] is None else b[k] - a[k]) for k in sorted(a)}


def delta_report(baseline: EvalReport, biased: EvalReport) -> DeltaReport:
    """Biased minus baseline for every class F1 and group/cell accuracy."""
    return DeltaReport(
        _diff(baseline.f1, biased.f1, "class"),
        biased.macro_f1 - baseline.macro_f1,
        _diff(baseline.group_accuracy, biased.group_accuracy, "group"),
        _diff(baseline.cell_accuracy, biased.cell_accuracy, "cell"),
        baseline,
        biased,
    )


def pooled_cell_accuracy(report: EvalReport, cells: Sequence[str]) -> float | None:
    """Accuracy pooled over several (group/diagnosis) cells, weighted by size."""
    correct = total = 0.0
    for key in cells:
        acc, n = report.cell_accuracy[key], report.cell_counts[key]
        if acc is None:
            continue
        correct += acc * n
        total += n
    return correct / total if total else None

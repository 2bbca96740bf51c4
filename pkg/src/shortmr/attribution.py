"""Positive GradCAM attributions and patch-based soft stability."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch

from .volume import SpatialTransform, Volume, apply_transform, resample


@dataclass(frozen=True)
class AttributionVolume:
    volume: Volume
    provenance: dict = field(default_factory=dict)
    zero_gradient: bool = False

    def __post_init__(self):
        if np.any(self.volume.data < 0):
            raise ValueError("attributions must be non-negative")

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    @property
    def shape(self):
        return self.volume.shape


def _as_input(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x)


def layer_activations_and_gradients(
    model, x, target_class: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Activations of the designated layer, d(score)/d(activations), and logits.

    ``model`` is a :class:`~shortmr.training.TrainedModel` (or anything with
    ``module`` and ``layer()``); ``x`` is one model-ready 3D input.
    """
    module = model.module
    module.eval()
    param = next(module.parameters())
    inp = torch.as_tensor(_as_input(x), dtype=param.dtype)[None, None]
    store: dict[str, torch.Tensor] = {}

    def hook(_mod, _inp, out):
        out.retain_grad()
        store["act"] = out

    handle = model.layer().register_forward_hook(hook)
    try:
        module.zero_grad(set_to_none=True)
        logits = module(inp)
        logits[0, target_class].backward()
    finally:
        handle.remove()
    act = store["act"]
    return act.detach()[0], act.grad.detach()[0], logits.detach()[0]


def cam_from(activations: torch.Tensor | np.ndarray, gradients: torch.Tensor | np.ndarray) -> np.ndarray:
    """Raw (unclamped) GradCAM map from ``(C, d, h, w)`` activations and gradients."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    weights = g.mean(axis=(1, 2, 3))
    return np.tensordot(weights, a, axes=(0, 0))


def gradcam3d(
    model,
    x,
    target_class: int | None = None,
    sample_id: str = "",
) -> AttributionVolume:
    """Positive GradCAM at the model's designated layer, upsampled to the input.

    With ``target_class=None`` the predicted class is explained. A map with
    zero gradient everywhere is returned as all zeros with ``zero_gradient``
    set.
    """
    data = _as_input(x)
    if target_class is None:
        with torch.no_grad():
            param = next(model.module.parameters())
            logits = model.module(torch.as_tensor(data, dtype=param.dtype)[None, None])
        target_class = int(logits.argmax(1))
    act, grad, _ = layer_activations_and_gradients(model, data, target_class)
    zero = bool(torch.all(grad == 0))
    raw = cam_from(act.numpy(), grad.numpy())
    cam = np.maximum(raw, 0.0)
    up = resample(Volume(cam), data.shape, mode="trilinear").data
    up = np.maximum(up, 0.0).astype(np.float32)
    spacing = x.spacing if isinstance(x, Volume) else (1.0, 1.0, 1.0)
    prov = {
        "model": getattr(model, "name", "model"),
        "sample_id": sample_id,
        "target_class": int(target_class),
        "feature_layer": getattr(model, "feature_layer", ""),
    }
    return AttributionVolume(Volume(up, spacing), prov, zero)


def to_atlas_space(attr: AttributionVolume, t: SpatialTransform, target_shape=None) -> AttributionVolume:
    out = apply_transform(attr.volume, t, mode="trilinear", target_shape=target_shape)
    data = np.maximum(out.data, 0).astype(np.float32)
    return AttributionVolume(Volume(data, out.spacing), dict(attr.provenance), attr.zero_gradient)


@dataclass(frozen=True)
class StabilitySpec:
    patch_size: tuple[int, int, int] = (4, 4, 4)
    top_fraction: float = 0.125
    radii: tuple[int, ...] = (0, 1, 2, 4, 8, 16)
    trials: int = 100
    fill_value: float = 0.0
    mask: bool = True
    sampling: Literal["ball", "size"] = "ball"

    def __post_init__(self):
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if any(p < 1 for p in self.patch_size) or len(self.patch_size) != 3:
            raise ValueError("patch_size must be three positive ints")
        if any(r < 0 for r in self.radii):
            raise ValueError("radii must be non-negative")
        if self.sampling not in ("ball", "size"):
            raise ValueError(f"unknown sampling scheme {self.sampling!r}")
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "radii", tuple(int(r) for r in self.radii))


def patch_index(shape, patch_size) -> tuple[np.ndarray, int]:
    """Label each voxel with its tile id; the last tile on an axis may be short."""
    grids = [np.arange(n) // p for n, p in zip(shape, patch_size)]
    counts = [int(math.ceil(n / p)) for n, p in zip(shape, patch_size)]
    zz, yy, xx = np.meshgrid(*grids, indexing="ij")
    return (zz * counts[1] + yy) * counts[2] + xx, counts[0] * counts[1] * counts[2]


@dataclass(frozen=True)
class PatchLayout:
    """Which patches are kept as top features and which may be restored."""

    index: np.ndarray
    n_patches: int
    top: np.ndarray
    maskable: np.ndarray

    def masked_input(self, x: np.ndarray, fill: float) -> np.ndarray:
        keep = np.isin(self.index, self.top)
        return np.where(keep, x, fill).astype(x.dtype)

    def restore(self, base: np.ndarray, x: np.ndarray, patches) -> np.ndarray:
        sel = np.isin(self.index, np.asarray(patches, dtype=int))
        return np.where(sel, x, base)


def patch_layout(x, attr, spec: StabilitySpec, brain_mask: np.ndarray | None = None) -> PatchLayout:
    data = _as_input(x)
    a = np.asarray(attr.data if hasattr(attr, "data") else attr, dtype=np.float64)
    if a.shape != data.shape:
        raise ValueError(f"attribution shape {a.shape} does not match input {data.shape}")
    idx, n = patch_index(data.shape, spec.patch_size)
    flat = idx.ravel()
    sizes = np.bincount(flat, minlength=n)
    score = np.bincount(flat, weights=a.ravel(), minlength=n) / np.maximum(sizes, 1)
    n_top = int(math.ceil(spec.top_fraction * n - 1e-9))
    order = np.lexsort((np.arange(n), -score))
    top = np.sort(order[:n_top])
    if spec.mask and brain_mask is not None:
        brain = np.bincount(flat, weights=np.asarray(brain_mask).ravel().astype(float), minlength=n) > 0
    else:
        brain = np.ones(n, dtype=bool)
    candidates = np.flatnonzero(brain)
    maskable = np.setdiff1d(candidates, top)
    return PatchLayout(idx, n, top, maskable)


def subset_size_weights(m: int, radius: int, sampling: str = "ball") -> np.ndarray:
    """Probability of restoring exactly ``s`` patches, for ``s = 0..radius``."""
    if sampling == "size":
        return np.full(radius + 1, 1.0 / (radius + 1))
    logw = np.array([math.lgamma(m + 1) - math.lgamma(s + 1) - math.lgamma(m - s + 1) for s in range(radius + 1)])
    w = np.exp(logw - logw.max())
    return w / w.sum()


def soft_stability(
    model,
    x,
    attr,
    spec: StabilitySpec,
    radius: int,
    rng: np.random.Generator | int | None = None,
    brain_mask: np.ndarray | None = None,
) -> float:
    """Monte-Carlo probability that restoring up to ``radius`` masked patches
    leaves the prediction on the top-patch-only input unchanged.

    ``model`` needs a ``predict(batch)`` method over ``(N, D, H, W)`` arrays.
    With ``sampling="ball"`` each trial is a uniform draw from all subsets of
    at most ``radius`` maskable patches; ``"size"`` first draws the subset
    size uniformly from ``0..radius``.
    """
    data = _as_input(x)
    layout = patch_layout(data, attr, spec, brain_mask)
    m = len(layout.maskable)
    if radius < 0 or radius > m:
        raise ValueError(f"radius {radius} exceeds the {m} maskable brain patches")
    if radius == 0:
        return 1.0
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    base = layout.masked_input(data, spec.fill_value)
    ref = int(model.predict(base[None])[0])
    probs = subset_size_weights(m, radius, spec.sampling)
    sizes = rng.choice(radius + 1, size=spec.trials, p=probs)
    agree = 0
    chunk = 32
    for i in range(0, spec.trials, chunk):
        batch = []
        for s in sizes[i : i + chunk]:
            chosen = layout.maskable[rng.choice(m, size=int(s), replace=False)]
            batch.append(layout.restore(base, data, chosen))
        agree += int(np.sum(np.asarray(model.predict(np.stack(batch))) == ref))
    return agree / spec.trials


def stability_curve(
    model,
    samples: Sequence[tuple],
    spec: StabilitySpec,
    seed: int = 0,
    brain_mask: np.ndarray | None = None,
) -> list[tuple[int, float]]:
    """Soft stability per radius averaged over ``(x, attribution)`` samples.

    Each (sample, radius) pair draws from its own stream derived from ``seed``.
    """
    if not spec.radii:
        raise ValueError("stability curve needs at least one radius")
    if list(spec.radii) != sorted(spec.radii):
        raise ValueError("radii must be sorted")
    curve = []
    for radius in spec.radii:
        vals = []
        for i, (x, attr) in enumerate(samples):
            rng = np.random.default_rng([seed, i, radius])
            vals.append(soft_stability(model, x, attr, spec, radius, rng, brain_mask))
        curve.append((radius, float(np.mean(vals))))
    return curve

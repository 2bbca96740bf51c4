"""Volume and atlas primitives.

Volumes are plain 3D numpy grids with voxel spacing in mm. Interpolation
follows the align-corners-false convention (voxel centres at ``i + 0.5`` in
normalised units), which is what ``torch.nn.functional.interpolate`` does for
``align_corners=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np
from scipy import ndimage

Shape3 = tuple[int, int, int]
Spacing3 = tuple[float, float, float]
InterpMode = Literal["trilinear", "nearest"]


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if len(self.spacing) != 3 or any(float(s) <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> Shape3:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class Atlas:
    """Integer label grid; 0 is background, regions are 1..n_regions."""

    labels: np.ndarray
    n_regions: int
    region_names: Mapping[int, str] = field(default_factory=dict)
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError("atlas labels must be 3D")
        if labels.dtype.kind not in "iu":
            if not np.all(labels == np.round(labels)):
                raise ValueError("atlas labels must be integers")
            labels = labels.astype(np.int32)
        if labels.min() < 0 or labels.max() > self.n_regions:
            raise ValueError(f"atlas labels must lie in 0..{self.n_regions}")
        present = np.bincount(labels.ravel(), minlength=self.n_regions + 1)[1:]
        missing = [j + 1 for j in np.flatnonzero(present == 0)]
        if missing:
            raise ValueError(f"atlas regions without voxels: {missing}")
        names = dict(self.region_names) or {
            j: f"region_{j:02d}" for j in range(1, self.n_regions + 1)
        }
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "region_names", names)

    @property
    def shape(self) -> Shape3:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def region_ids(self) -> list[int]:
        return list(range(1, self.n_regions + 1))

    @property
    def brain_mask(self) -> np.ndarray:
        return self.labels > 0

    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_regions + 1)[1:]


@dataclass(frozen=True)
class SpatialTransform:
    """Mapping from subject space into atlas space.

    ``kind="affine"`` carries a 4x4 matrix acting on mm coordinates
    (``x_atlas = M @ x_subject``). ``kind="displacement"`` carries a
    ``(3, D, H, W)`` field of mm offsets defined on the atlas grid: the atlas
    voxel at ``p`` pulls its value from subject position ``p + u(p)``.
    """

    kind: Literal["identity", "affine", "displacement"] = "identity"
    matrix: np.ndarray | None = None
    field: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "affine":
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.shape != (4, 4):
                raise ValueError("affine transform needs a 4x4 matrix")
            if abs(np.linalg.det(m)) < 1e-12:
                raise ValueError("affine matrix is not invertible")
            object.__setattr__(self, "matrix", m)
        elif self.kind == "displacement":
            f = np.asarray(self.field, dtype=np.float64)
            if f.ndim != 4 or f.shape[0] != 3:
                raise ValueError("displacement field must have shape (3, D, H, W)")
            if not np.all(np.isfinite(f)):
                raise ValueError("displacement field contains non-finite offsets")
            object.__setattr__(self, "field", f)
        elif self.kind != "identity":
            raise ValueError(f"unknown transform kind {self.kind!r}")

    @classmethod
    def identity(cls) -> "SpatialTransform":
        return cls("identity")

    @classmethod
    def affine(cls, matrix) -> "SpatialTransform":
        return cls("affine", matrix=matrix)

    @classmethod
    def displacement(cls, field) -> "SpatialTransform":
        return cls("displacement", field=field)


def normalize_zscore(v: Volume) -> Volume:
    """Zero-mean, unit (population) standard deviation over all voxels."""
    x = v.data.astype(np.float64)
    std = x.std()
    if x.size < 2 or std == 0.0:
        raise ValueError("zero variance: cannot z-score a constant volume")
    out = (x - x.mean()) / std
    return Volume(out.astype(v.data.dtype if v.data.dtype.kind == "f" else np.float64), v.spacing)


def _linear_axis(x: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    shape = [1] * x.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(x, lo, axis=axis) * (1.0 - w) + np.take(x, hi, axis=axis) * w


def _nearest_axis(x: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.take(x, np.minimum(idx, n_in - 1), axis=axis)


def resample(v: Volume, target_shape: Shape3, mode: InterpMode = "trilinear") -> Volume:
    """Resize to ``target_shape``; spacing is rescaled so the field of view is kept."""
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ValueError(f"target shape must be three positive ints, got {target_shape}")
    if mode == "trilinear":
        out = v.data.astype(np.float64)
        for axis, n in enumerate(target_shape):
            out = _linear_axis(out, axis, n)
        if v.data.dtype.kind == "f":
            out = out.astype(v.data.dtype)
    elif mode == "nearest":
        out = v.data
        for axis, n in enumerate(target_shape):
            out = _nearest_axis(out, axis, n)
        out = out.copy()
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(v.spacing, v.shape, target_shape))
    return Volume(out, spacing)


def apply_transform(
    v: Volume,
    t: SpatialTransform,
    mode: InterpMode = "trilinear",
    target_shape: Shape3 | None = None,
) -> Volume:
    """Pull ``v`` into atlas space; voxels sampling outside the source are 0."""
    if t.kind == "identity" and (target_shape is None or tuple(target_shape) == v.shape):
        return Volume(v.data.copy(), v.spacing)
    shape = tuple(target_shape) if target_shape is not None else v.shape
    spacing = np.asarray(v.spacing)
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1)
    mm = grid * spacing[:, None]
    if t.kind == "affine":
        inv = np.linalg.inv(t.matrix)
        src_mm = inv[:3, :3] @ mm + inv[:3, 3:4]
    elif t.kind == "displacement":
        if t.field.shape[1:] != shape:
            raise ValueError(
                f"displacement field shape {t.field.shape[1:]} does not match target {shape}"
            )
        src_mm = mm + t.field.reshape(3, -1)
    else:
        src_mm = mm
    coords = src_mm / spacing[:, None]
    order = 1 if mode == "trilinear" else 0
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if order == 0:
        # round half away from the grid edge consistently
        coords = np.floor(coords + 0.5)
    data = v.data.astype(np.float64) if order == 1 else v.data
    out = ndimage.map_coordinates(data, coords, order=order, mode="constant", cval=0.0)
    out = out.reshape(shape)
    if v.data.dtype.kind == "f":
        out = out.astype(v.data.dtype)
    return Volume(out, v.spacing)

"""Synthetic cohorts with planted, region-localised signals.

Every subject is generated from its own random stream keyed by
``(seed, subject_index)``, so editing one demographic group never perturbs the
volumes of another.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import ndimage

from .volume import Atlas, Shape3, Volume

SEXES = ("female", "male")
RACES = ("Black", "White")
DIAGNOSES = ("CN", "AD")

# index 0 is the A0 / Y0 group, index 1 the A1 / Y1 group
VOCAB = {"sex": SEXES, "race": RACES, "diagnosis": DIAGNOSES}


@dataclass(frozen=True)
class PhantomSpec:
    shape: Shape3 = (32, 32, 32)
    n_regions: int = 16
    attr_regions: tuple[int, ...] = (6,)
    disease_regions: tuple[int, ...] = (11,)
    attribute: Literal["sex", "race"] = "sex"
    attr_effect: float = 1.0
    disease_effect: float = 0.85
    noise_sigma: float = 0.1
    anatomy_jitter: float = 0.05
    jitter_smoothness: float = 3.0
    samples_per_subject: int = 1
    atlas_scheme: Literal["grid", "voronoi"] = "grid"
    seed: int = 0
    allow_overlap: bool = False

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or min(shape) < 8:
            raise ValueError(f"phantom shape must be at least (8, 8, 8), got {shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "attr_regions", tuple(sorted(int(r) for r in self.attr_regions)))
        object.__setattr__(
            self, "disease_regions", tuple(sorted(int(r) for r in self.disease_regions))
        )
        valid = set(range(1, self.n_regions + 1))
        for name in ("attr_regions", "disease_regions"):
            bad = set(getattr(self, name)) - valid
            if bad:
                raise ValueError(f"{name} contains ids outside 1..{self.n_regions}: {sorted(bad)}")
        if not self.allow_overlap and set(self.attr_regions) & set(self.disease_regions):
            raise ValueError("attr_regions and disease_regions overlap")
        if self.attribute not in ("sex", "race"):
            raise ValueError(f"attribute must be 'sex' or 'race', got {self.attribute!r}")
        if self.noise_sigma < 0 or self.anatomy_jitter < 0:
            raise ValueError("noise_sigma and anatomy_jitter must be non-negative")
        if not 0 < self.disease_effect <= 1:
            raise ValueError("disease_effect must lie in (0, 1]")
        if self.samples_per_subject < 1:
            raise ValueError("samples_per_subject must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["attr_regions"] = list(self.attr_regions)
        d["disease_regions"] = list(self.disease_regions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("shape", "attr_regions", "disease_regions"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    sex: str
    race: str
    age: float
    diagnosis: str
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        for key in ("sex", "race", "diagnosis"):
            value = getattr(self, key)
            if value not in VOCAB[key]:
                raise ValueError(f"unknown enum value {value!r} for {key}")
        if not self.sample_ids:
            raise ValueError(f"subject {self.subject_id} has no samples")
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))

    def group(self, attribute: str) -> int:
        """0 for the A0 group, 1 for A1."""
        return VOCAB[attribute].index(getattr(self, attribute))

    @property
    def label(self) -> int:
        return DIAGNOSES.index(self.diagnosis)


@dataclass
class Cohort:
    subjects: list[SubjectRecord]
    samples: dict[str, Volume]
    ground_truth: PhantomSpec | None = None
    atlas: Atlas | None = None
    _by_id: dict[str, SubjectRecord] = field(init=False, repr=False)

    def __post_init__(self):
        seen: dict[str, str] = {}
        ids = set()
        for rec in self.subjects:
            if rec.subject_id in ids:
                raise ValueError(f"duplicate subject_id {rec.subject_id}")
            ids.add(rec.subject_id)
            for sid in rec.sample_ids:
                if sid in seen:
                    raise ValueError(
                        f"sample {sid} referenced by {seen[sid]} and {rec.subject_id}"
                    )
                seen[sid] = rec.subject_id
        missing = [sid for sid in seen if sid not in self.samples]
        if missing:
            raise ValueError(f"samples without volumes: {missing[:5]}")
        orphan = [sid for sid in self.samples if sid not in seen]
        if orphan:
            raise ValueError(f"volumes not referenced by any subject: {orphan[:5]}")
        self._by_id = {rec.subject_id: rec for rec in self.subjects}

    def __len__(self) -> int:
        return len(self.subjects)

    def subject(self, subject_id: str) -> SubjectRecord:
        return self._by_id[subject_id]

    def counts(self, *keys: str) -> dict[tuple, int]:
        out: dict[tuple, int] = {}
        for rec in self.subjects:
            k = tuple(getattr(rec, key) for key in keys)
            out[k] = out.get(k, 0) + 1
        return out


def _brain_mask(shape: Shape3) -> np.ndarray:
    """Ellipsoid inscribed in the grid (voxel centres within the unit ball)."""
    axes = [(np.arange(n) + 0.5 - n / 2) / (n / 2) for n in shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return zz**2 + yy**2 + xx**2 <= 1.0


def _radius(shape: Shape3) -> np.ndarray:
    axes = [(np.arange(n) + 0.5 - n / 2) / (n / 2) for n in shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(zz**2 + yy**2 + xx**2)


def _bisect(coords: np.ndarray, n_parts: int) -> list[np.ndarray]:
    """Recursive coordinate bisection of a voxel set into ``n_parts`` blocks."""
    if n_parts == 1:
        return [np.arange(len(coords))]
    extent = coords.max(axis=0) - coords.min(axis=0)
    axis = int(np.argmax(extent))
    others = [a for a in range(3) if a != axis]
    order = np.lexsort((coords[:, others[1]], coords[:, others[0]], coords[:, axis]))
    left_parts = n_parts // 2
    cut = int(round(len(coords) * left_parts / n_parts))
    cut = min(max(cut, left_parts), len(coords) - (n_parts - left_parts))
    left, right = order[:cut], order[cut:]
    out = [left[i] for i in _bisect(coords[left], left_parts)]
    out += [right[i] for i in _bisect(coords[right], n_parts - left_parts)]
    return out


def synthetic_atlas(
    shape: Shape3 = (32, 32, 32),
    n_regions: int = 16,
    scheme: Literal["grid", "voronoi"] = "grid",
    seed: int = 0,
) -> Atlas:
    """Partition an inscribed ellipsoid into ``n_regions`` labelled regions.

    ``grid`` splits the ellipsoid into contiguous blocks by recursive
    bisection along the longest extent; ``voronoi`` assigns voxels to the
    nearest of ``n_regions`` seeded centres.
    """
    shape = tuple(int(n) for n in shape)
    if n_regions < 2:
        raise ValueError("an atlas needs at least 2 regions")
    mask = _brain_mask(shape)
    coords = np.argwhere(mask)
    if n_regions > len(coords):
        raise ValueError(
            f"{n_regions} regions do not fit in a brain mask of {len(coords)} voxels"
        )
    labels = np.zeros(shape, dtype=np.int32)
    if scheme == "grid":
        for j, idx in enumerate(_bisect(coords, n_regions), start=1):
            labels[tuple(coords[idx].T)] = j
    elif scheme == "voronoi":
        rng = np.random.default_rng(seed)
        centres = coords[rng.choice(len(coords), size=n_regions, replace=False)]
        d2 = ((coords[:, None, :] - centres[None, :, :]) ** 2).sum(axis=-1)
        labels[tuple(coords.T)] = np.argmin(d2, axis=1) + 1
    else:
        raise ValueError(f"unknown atlas scheme {scheme!r}")
    return Atlas(labels, n_regions)


def base_template(shape: Shape3) -> np.ndarray:
    """Smooth radial intensity profile, 1.0 at the centre, 0 outside the brain."""
    r = _radius(shape)
    return np.where(r <= 1.0, 1.0 - 0.5 * r**2, 0.0)


def subject_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_subject(
    spec: PhantomSpec, rec: SubjectRecord, atlas: Atlas, rng: np.random.Generator
) -> Volume:
    """First (or only) sample volume of a subject."""
    return generate_samples(spec, rec, atlas, rng, n_samples=1)[0]


def generate_samples(
    spec: PhantomSpec,
    rec: SubjectRecord,
    atlas: Atlas,
    rng: np.random.Generator,
    n_samples: int | None = None,
) -> list[Volume]:
    """Volumes for one subject, one per requested sample.

    Samples of the same subject share the smooth anatomy field and differ only
    in white noise. The random draws do not depend on the subject's attributes,
    so two subjects fed the same stream differ only by the planted effects.
    """
    if atlas.shape != spec.shape:
        raise ValueError(f"atlas shape {atlas.shape} does not match phantom shape {spec.shape}")
    n_samples = spec.samples_per_subject if n_samples is None else n_samples
    mask = atlas.brain_mask
    img = base_template(spec.shape)
    if rec.group(spec.attribute) == 1 and spec.attr_effect != 0.0:
        img = img + spec.attr_effect * np.isin(atlas.labels, spec.attr_regions)
    if rec.diagnosis == "AD" and spec.disease_effect != 1.0:
        img = np.where(np.isin(atlas.labels, spec.disease_regions), img * spec.disease_effect, img)

    # draw every component regardless of its size so streams stay aligned
    raw = rng.standard_normal(spec.shape)
    smooth = ndimage.gaussian_filter(raw, spec.jitter_smoothness, mode="constant")
    sd = smooth.std()
    if spec.anatomy_jitter > 0 and sd > 0:
        img = img + spec.anatomy_jitter * (smooth / sd) * mask

    vols = []
    for _ in range(n_samples):
        noise = rng.standard_normal(spec.shape)
        out = img + spec.noise_sigma * noise * mask if spec.noise_sigma > 0 else img
        vols.append(Volume(out.astype(np.float32)))
    return vols


def generate_cohort(
    spec: PhantomSpec,
    demographics: Iterable[Sequence],
    atlas: Atlas | None = None,
) -> Cohort:
    """Build a cohort from ``(sex, race, diagnosis, age, n_subjects)`` groups.

    Subjects are numbered in request order; subject ``i`` uses stream
    ``(spec.seed, i)``.
    """
    demographics = list(demographics)
    if not demographics:
        raise ValueError("empty demographics: nothing to generate")
    if atlas is None:
        atlas = synthetic_atlas(spec.shape, spec.n_regions, spec.atlas_scheme, spec.seed)
    subjects: list[SubjectRecord] = []
    samples: dict[str, Volume] = {}
    index = 0
    for group in demographics:
        sex, race, diagnosis, age, n = group
        if n < 0:
            raise ValueError(f"negative subject count in group {group}")
        for _ in range(int(n)):
            sid = f"sub-{index:04d}"
            sample_ids = tuple(f"{sid}_s{k}" for k in range(spec.samples_per_subject))
            rec = SubjectRecord(sid, sex, race, float(age), diagnosis, sample_ids)
            vols = generate_samples(spec, rec, atlas, subject_stream(spec.seed, index))
            samples.update(zip(sample_ids, vols))
            subjects.append(rec)
            index += 1
    return Cohort(subjects, samples, ground_truth=spec, atlas=atlas)


def balanced_demographics(
    n_per_cell: int,
    attribute: str = "sex",
    other: str | None = None,
    ages: Sequence[float] = (65.0, 80.0),
) -> list[tuple]:
    """Equal-sized groups over attribute x diagnosis, split across two ages.

    The non-signal attribute is fixed to ``other`` (default: the A1 value) so
    only the attribute under study varies.
    """
    groups = []
    for group in VOCAB[attribute]:
        for dx in DIAGNOSES:
            per_age = [n_per_cell // len(ages) + (i < n_per_cell % len(ages)) for i in range(len(ages))]
            for age, n in zip(ages, per_age):
                if attribute == "sex":
                    sex, race = group, other or RACES[1]
                else:
                    sex, race = other or SEXES[1], group
                groups.append((sex, race, dx, age, n))
    return groups

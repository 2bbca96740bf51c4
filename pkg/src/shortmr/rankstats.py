"""Regional attribution ranks, difference vectors and their correlation.

Rank 1 is the region with the largest mean attribution. Ties share the
average of the ranks they span, which keeps every rank vector summing to
``n(n + 1) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import stats

from .volume import Atlas, Volume


def _as_array(attr) -> np.ndarray:
    if isinstance(attr, Volume):
        return attr.data
    if hasattr(attr, "volume"):
        return attr.volume.data
    return np.asarray(attr)


def regional_means(attr, atlas: Atlas) -> np.ndarray:
    """Mean attribution inside each atlas region (background excluded)."""
    data = np.asarray(_as_array(attr), dtype=np.float64)
    if data.shape != atlas.shape:
        raise ValueError(f"attribution shape {data.shape} does not match atlas {atlas.shape}")
    labels = atlas.labels.ravel()
    sizes = np.bincount(labels, minlength=atlas.n_regions + 1)[1:]
    empty = [j + 1 for j in np.flatnonzero(sizes == 0)]
    if empty:
        raise ValueError(f"empty atlas region(s): {empty}")
    sums = np.bincount(labels, weights=data.ravel(), minlength=atlas.n_regions + 1)[1:]
    return sums / sizes


def average_ranks(values, descending: bool = False) -> np.ndarray:
    """Average (fractional) ranks along the last axis, 1-based.

    Works row-wise on 2D input, which the permutation test relies on.
    """
    a = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot rank non-finite values")
    squeeze = a.ndim == 1
    a = np.atleast_2d(a)
    if descending:
        a = -a
    n = a.shape[-1]
    order = np.argsort(a, axis=-1, kind="stable")
    s = np.take_along_axis(a, order, axis=-1)
    pos = np.broadcast_to(np.arange(n), s.shape)
    new = np.ones_like(s, dtype=bool)
    new[:, 1:] = s[:, 1:] != s[:, :-1]
    start = np.maximum.accumulate(np.where(new, pos, 0), axis=-1)
    last = np.ones_like(s, dtype=bool)
    last[:, :-1] = s[:, 1:] != s[:, :-1]
    end = np.minimum.accumulate(np.where(last, pos, n - 1)[:, ::-1], axis=-1)[:, ::-1]
    sorted_ranks = (start + end) / 2.0 + 1.0
    ranks = np.empty_like(sorted_ranks)
    np.put_along_axis(ranks, order, sorted_ranks, axis=-1)
    return ranks[0] if squeeze else ranks


def rank_vector(values) -> np.ndarray:
    """Descending ranks: the largest value gets rank 1."""
    return average_ranks(values, descending=True)


def mean_rank_vector(attrs: Sequence, atlas: Atlas) -> np.ndarray:
    """Average over samples of each sample's regional rank vector."""
    if len(attrs) == 0:
        raise ValueError("need at least one attribution volume")
    ranks = np.stack([rank_vector(regional_means(a, atlas)) for a in attrs])
    return ranks.mean(axis=0)


@dataclass(frozen=True)
class Correlation:
    rho: float | None
    p_param: float | None

    @property
    def defined(self) -> bool:
        return self.rho is not None


def _pearson_rows(rx: np.ndarray, ry: np.ndarray) -> np.ndarray:
    dx = rx - rx.mean(axis=-1, keepdims=True)
    dy = ry - ry.mean(axis=-1, keepdims=True)
    den = np.sqrt((dx * dx).sum(axis=-1) * (dy * dy).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (dx * dy).sum(axis=-1) / den
    r = np.where(den > 0, r, np.nan)
    return np.clip(r, -1.0, 1.0)


def spearman(x, y) -> Correlation:
    """Spearman's rho with a t-distribution p-value (n - 2 dof).

    A constant input has no defined correlation; ``rho`` and ``p_param`` are
    then ``None``.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1D vectors of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 observations")
    r = float(_pearson_rows(average_ranks(x)[None], average_ranks(y)[None])[0])
    if math.isnan(r):
        return Correlation(None, None)
    if abs(r) == 1.0:
        return Correlation(r, 0.0)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return Correlation(r, float(2.0 * stats.t.sf(abs(t), n - 2)))


@dataclass(frozen=True)
class PermutationResult:
    p_perm: float
    rho_obs: float | None
    n_permutations: int
    degenerate: bool
    null: Literal["rank", "label"] = "rank"


def permutation_test(
    r_ba,
    r_bi,
    r_pa,
    n_permutations: int = 999,
    rng: np.random.Generator | int | None = None,
    null: Literal["rank", "label"] = "rank",
    chunk: int = 2048,
) -> PermutationResult:
    """Significance of spearman(B, P) where both share the subtrahend ``r_ba``.

    ``null="rank"`` replaces ``r_bi`` and ``r_pa`` by independent uniform
    permutations of ``1..n``; ``null="label"`` permutes the region labels of
    the observed ``r_bi`` and ``r_pa`` instead. ``r_ba`` is held fixed in both.
    """
    if n_permutations < 99:
        raise ValueError("use at least 99 permutations")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    r_ba, r_bi, r_pa = (np.asarray(v, dtype=np.float64) for v in (r_ba, r_bi, r_pa))
    n = len(r_ba)
    obs = spearman(r_bi - r_ba, r_pa - r_ba)
    if not obs.defined:
        return PermutationResult(1.0, None, n_permutations, True, null)
    base_bi = np.arange(1, n + 1, dtype=np.float64) if null == "rank" else r_bi
    base_pa = np.arange(1, n + 1, dtype=np.float64) if null == "rank" else r_pa
    if null not in ("rank", "label"):
        raise ValueError(f"unknown null {null!r}")
    hits = 0
    done = 0
    while done < n_permutations:
        m = min(chunk, n_permutations - done)
        perm_bi = rng.permuted(np.tile(base_bi, (m, 1)), axis=1)
        perm_pa = rng.permuted(np.tile(base_pa, (m, 1)), axis=1)
        b = average_ranks(perm_bi - r_ba)
        p = average_ranks(perm_pa - r_ba)
        rho = np.nan_to_num(_pearson_rows(b, p), nan=0.0)
        hits += int(np.sum(np.abs(rho) >= abs(obs.rho) - 1e-12))
        done += m
    return PermutationResult((1 + hits) / (n_permutations + 1), obs.rho, n_permutations, False, null)


def top_shared_regions(b, p, k: int = 5, region_ids: Sequence[int] | None = None) -> list[int]:
    """Regions with the most negative ``B + P`` (largest joint rank gain)."""
    b, p = np.asarray(b, dtype=np.float64), np.asarray(p, dtype=np.float64)
    ids = np.arange(1, len(b) + 1) if region_ids is None else np.asarray(region_ids)
    if not 0 <= k <= len(b):
        raise ValueError(f"k must lie in 0..{len(b)}")
    order = np.lexsort((ids, b + p))
    return [int(ids[i]) for i in order[:k]]


def most_negative(v, k: int, region_ids: Sequence[int] | None = None) -> list[int]:
    v = np.asarray(v, dtype=np.float64)
    return top_shared_regions(v, np.zeros_like(v), k, region_ids)


@dataclass
class RankReport:
    r_ba: np.ndarray
    r_bi: np.ndarray
    r_pa: np.ndarray
    b: np.ndarray
    p: np.ndarray
    rho: float | None
    p_param: float | None
    p_perm: float
    degenerate: bool
    top_regions: list[int]
    n_permutations: int
    region_names: dict[int, str] = field(default_factory=dict)
    n_samples: int = 0

    @property
    def defined(self) -> bool:
        return self.rho is not None

    def to_dict(self) -> dict:
        def vec(v):
            return [float(x) for x in v]

        return {
            "region_ids": list(range(1, len(self.r_ba) + 1)),
            "region_names": [self.region_names.get(j, f"region_{j:02d}") for j in range(1, len(self.r_ba) + 1)],
            "r_BA": vec(self.r_ba),
            "r_BI": vec(self.r_bi),
            "r_PA": vec(self.r_pa),
            "B": vec(self.b),
            "P": vec(self.p),
            "rho": self.rho,
            "p_param": self.p_param,
            "p_perm": self.p_perm,
            "degenerate": self.degenerate,
            "n_permutations": self.n_permutations,
            "top_regions": list(self.top_regions),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankReport":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        names = dict(zip(d["region_ids"], d["region_names"]))
        return cls(
            arr("r_BA"), arr("r_BI"), arr("r_PA"), arr("B"), arr("P"), d["rho"], d["p_param"],
            d["p_perm"], d["degenerate"], list(d["top_regions"]), d["n_permutations"], names,
            d.get("n_samples", 0),
        )


def rank_report(
    r_ba,
    r_bi,
    r_pa,
    n_permutations: int = 999,
    rng: np.random.Generator | int | None = None,
    k: int = 5,
    null: Literal["rank", "label"] = "rank",
    region_names: dict[int, str] | None = None,
    n_samples: int = 0,
) -> RankReport:
    r_ba, r_bi, r_pa = (np.asarray(v, dtype=np.float64) for v in (r_ba, r_bi, r_pa))
    b = r_bi - r_ba
    p = r_pa - r_ba
    corr = spearman(b, p)
    perm = permutation_test(r_ba, r_bi, r_pa, n_permutations, rng, null)
    return RankReport(
        r_ba, r_bi, r_pa, b, p, corr.rho, corr.p_param, perm.p_perm, perm.degenerate,
        top_shared_regions(b, p, k), n_permutations, dict(region_names or {}), n_samples,
    )

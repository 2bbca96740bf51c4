"""Subject-level stratified splits and baseline/biased dataset pairs.

All allocation is done on subjects; a subject's samples always follow it.
Counts are allocated hierarchically (diagnosis first, then the protected
attribute, then the remaining strata) with largest-remainder rounding, so the
attribute mix inside each diagnostic class is preserved to within one subject.
"""

from __future__ import annotations

import logging

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .phantom import DIAGNOSES, VOCAB, Cohort, SubjectRecord

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
STRATA = ("diagnosis", "sex", "race", "age_bin")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction_of_train: float = 0.1
    test_fraction: float = 0.2
    strata: tuple[str, ...] = STRATA
    merge_small_strata: bool = True
    min_stratum_size: int = 2

    def __post_init__(self):
        for name in ("train_fraction", "val_fraction_of_train", "test_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ValueError("train_fraction + test_fraction must equal 1")
        bad = set(self.strata) - set(STRATA)
        if bad:
            raise ValueError(f"unknown strata {sorted(bad)}; choose from {STRATA}")
        object.__setattr__(self, "strata", tuple(self.strata))


@dataclass(frozen=True)
class BiasSpec:
    """Training-majority cells and how strongly they dominate each split.

    ``p_train`` is the fraction of each class's training subjects drawn from
    that class's majority cell; ``p_test`` is the same fraction in the test
    split, so ``p_test < 0.5`` flips majority and minority.
    """

    attribute: str = "sex"
    majority_pairs: tuple[tuple[int, int], ...] = ((1, 0), (0, 1))
    p_train: float = 0.9
    p_test: float = 0.1
    class_budgets: Mapping[str, int] | None = None

    def __post_init__(self):
        if self.attribute not in ("sex", "race"):
            raise ValueError(f"bias attribute must be 'sex' or 'race', got {self.attribute!r}")
        pairs = tuple(tuple(int(v) for v in p) for p in self.majority_pairs)
        if sorted(y for _, y in pairs) != [0, 1] or any(a not in (0, 1) for a, _ in pairs):
            raise ValueError("majority_pairs must name exactly one (A, Y) cell per diagnostic class")
        object.__setattr__(self, "majority_pairs", pairs)
        if not 0.5 <= self.p_train <= 1.0:
            raise ValueError(f"p_train must lie in [0.5, 1], got {self.p_train}")
        if not 0.0 <= self.p_test <= 0.5:
            raise ValueError(f"p_test must lie in [0, 0.5], got {self.p_test}")

    def majority_group(self, label: int) -> int:
        return next(a for a, y in self.majority_pairs if y == label)


@dataclass(frozen=True)
class Member:
    subject_id: str
    sample_id: str
    group: int
    label: int


class Split(NamedTuple):
    train: list[SubjectRecord]
    val: list[SubjectRecord]
    test: list[SubjectRecord]


def _empty_table() -> dict:
    return {s: {dx: {"S": [0, 0], "N": [0, 0]} for dx in DIAGNOSES} for s in SPLITS}


def composition_table(
    splits: Mapping[str, Iterable[SubjectRecord]], attribute: str
) -> dict:
    """S(A0, A1) subject and N(A0, A1) sample counts per split and class."""
    table = _empty_table()
    for split, recs in splits.items():
        for rec in recs:
            cell = table[split][rec.diagnosis]
            cell["S"][rec.group(attribute)] += 1
            cell["N"][rec.group(attribute)] += len(rec.sample_ids)
    return table


@dataclass
class DatasetPair:
    name: str
    attribute: str
    train: list[Member]
    val: list[Member]
    test: list[Member]
    declared: dict = field(default_factory=_empty_table)

    def split(self, name: str) -> list[Member]:
        return getattr(self, name)

    def subjects(self, split: str) -> set[str]:
        return {m.subject_id for m in self.split(split)}

    def composition(self) -> dict:
        table = _empty_table()
        for split in SPLITS:
            seen = set()
            for m in self.split(split):
                cell = table[split][DIAGNOSES[m.label]]
                cell["N"][m.group] += 1
                if m.subject_id not in seen:
                    seen.add(m.subject_id)
                    cell["S"][m.group] += 1
        return table

    def class_totals(self, split: str) -> dict[str, int]:
        comp = self.composition()[split]
        return {dx: sum(comp[dx]["S"]) for dx in DIAGNOSES}

    def to_dict(self) -> dict:
        def rows(members):
            return [[m.subject_id, m.sample_id, m.group, m.label] for m in members]

        return {
            "name": self.name,
            "attribute": self.attribute,
            "train": rows(self.train),
            "val": rows(self.val),
            "test": rows(self.test),
            "declared": self.declared,
            "composition": self.composition(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetPair":
        def members(rows):
            return [Member(str(s), str(x), int(a), int(y)) for s, x, a, y in rows]

        return cls(
            d["name"], d["attribute"], members(d["train"]), members(d["val"]),
            members(d["test"]), d["declared"],
        )

    @classmethod
    def from_split(cls, name: str, split: Split, attribute: str) -> "DatasetPair":
        parts = dict(zip(SPLITS, split))
        return cls(
            name,
            attribute,
            *(_members(parts[s], attribute) for s in SPLITS),
            declared=composition_table(parts, attribute),
        )


def _members(recs: Iterable[SubjectRecord], attribute: str) -> list[Member]:
    out = [
        Member(rec.subject_id, sid, rec.group(attribute), rec.label)
        for rec in recs
        for sid in rec.sample_ids
    ]
    return sorted(out, key=lambda m: (m.subject_id, m.sample_id))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def age_threshold(subjects: Sequence[SubjectRecord]) -> float:
    """Midpoint of the cohort's absolute age range."""
    ages = [rec.age for rec in subjects]
    return (min(ages) + max(ages)) / 2.0


def _stratum_value(rec: SubjectRecord, key: str, threshold: float) -> str:
    if key == "age_bin":
        return "older" if rec.age >= threshold else "younger"
    return getattr(rec, key)


def largest_remainder(sizes: Mapping, total: int, rng: np.random.Generator) -> dict:
    """Apportion ``total`` over groups proportionally to ``sizes``.

    Every group gets the floor or ceiling of its exact quota; leftover units
    go to the largest fractional remainders, ties broken by a seeded shuffle.
    """
    keys = sorted(sizes)
    n = sum(sizes[k] for k in keys)
    if not 0 <= total <= n:
        raise ValueError(f"cannot allocate {total} of {n}")
    if n == 0:
        return {k: 0 for k in keys}
    quotas = {k: total * sizes[k] / n for k in keys}
    alloc = {k: int(math.floor(quotas[k] + 1e-12)) for k in keys}
    left = total - sum(alloc.values())
    priority = {k: i for i, k in enumerate(keys[j] for j in rng.permutation(len(keys)))}
    order = sorted(keys, key=lambda k: (-(quotas[k] - alloc[k]), priority[k]))
    for k in order[:left]:
        alloc[k] += 1
    return alloc


def _nested_allocation(
    groups: Mapping[tuple, Sequence], total: int, rng: np.random.Generator, depth: int = 0
) -> dict[tuple, int]:
    key_len = len(next(iter(groups)))
    if depth == key_len:
        (key,) = groups
        return {key: total}
    parts: dict[tuple, dict] = defaultdict(dict)
    for key in sorted(groups):
        parts[key[: depth + 1]][key] = groups[key]
    sizes = {p: sum(len(m) for m in sub.values()) for p, sub in parts.items()}
    alloc = largest_remainder(sizes, total, rng)
    out: dict[tuple, int] = {}
    for p in sorted(parts):
        out.update(_nested_allocation(parts[p], alloc[p], rng, depth + 1))
    return out


def _strata_keys(strata: Sequence[str], attribute: str | None) -> tuple[str, ...]:
    keys = ["diagnosis"] if "diagnosis" in strata else []
    if attribute is not None:
        keys.append(attribute)
    keys += [k for k in strata if k not in keys]
    return tuple(keys)


def _group_strata(
    subjects: Sequence[SubjectRecord],
    keys: tuple[str, ...],
    spec: SplitSpec,
    threshold: float,
) -> dict[tuple, list[SubjectRecord]]:
    groups: dict[tuple, list[SubjectRecord]] = defaultdict(list)
    for rec in subjects:
        groups[tuple(_stratum_value(rec, k, threshold) for k in keys)].append(rec)
    if not keys:
        return dict(groups)
    small = sorted(k for k, v in groups.items() if len(v) < spec.min_stratum_size)
    for key in small:
        if key not in groups or len(groups[key]) >= spec.min_stratum_size:
            continue
        if not spec.merge_small_strata:
            raise ValueError(
                f"stratum {dict(zip(keys, key))} has {len(groups[key])} subject(s) "
                "and cannot be merged (merge_small_strata is off)"
            )
        if "age_bin" in keys:
            pos = keys.index("age_bin")
            flipped = "younger" if key[pos] == "older" else "older"
            neighbour = key[:pos] + (flipped,) + key[pos + 1 :]
            if neighbour in groups:
                groups[neighbour].extend(groups.pop(key))
                continue
        # no age-bin neighbour: keep it; largest remainder still gives it 0 or 1 draws
        log.debug("stratum %s kept unmerged with %d subject(s)", key, len(groups[key]))
    return {k: sorted(v, key=lambda r: r.subject_id) for k, v in groups.items()}


def _take(
    subjects: Sequence[SubjectRecord],
    fraction: float,
    keys: tuple[str, ...],
    spec: SplitSpec,
    threshold: float,
    rng: np.random.Generator,
) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
    """Stratified draw of ``round(fraction * n)`` subjects; returns (taken, rest)."""
    if not subjects:
        return [], []
    if not keys:
        groups = {(): sorted(subjects, key=lambda r: r.subject_id)}
    else:
        groups = _group_strata(subjects, keys, spec, threshold)
    total = round_half_up(fraction * len(subjects))
    alloc = _nested_allocation(groups, total, rng) if keys else {(): total}
    taken, rest = [], []
    for key in sorted(groups):
        members = groups[key]
        order = rng.permutation(len(members))
        k = alloc[key]
        taken += [members[i] for i in order[:k]]
        rest += [members[i] for i in order[k:]]
    by_id = lambda r: r.subject_id  # noqa: E731
    return sorted(taken, key=by_id), sorted(rest, key=by_id)


def stratified_split(
    cohort: Cohort | Sequence[SubjectRecord],
    spec: SplitSpec = SplitSpec(),
    seed: int = 0,
    attribute: str | None = None,
) -> Split:
    """Subject-level train/val/test split stratified on ``spec.strata``.

    ``attribute`` (if given) is inserted right after diagnosis in the
    allocation hierarchy so its proportions are tracked most tightly.
    """
    subjects = list(cohort.subjects if isinstance(cohort, Cohort) else cohort)
    if not subjects:
        raise ValueError("cannot split an empty cohort")
    rng = np.random.default_rng(seed)
    threshold = age_threshold(subjects)
    keys = _strata_keys(spec.strata, attribute)
    test, trainval = _take(subjects, spec.test_fraction, keys, spec, threshold, rng)
    val, train = _take(trainval, spec.val_fraction_of_train, keys, spec, threshold, rng)
    return Split(train, val, test)


def _cell_name(attribute: str, group: int, label: int) -> str:
    return f"({VOCAB[attribute][group]}, {DIAGNOSES[label]})"


def _normalise_budgets(budgets: Mapping, attribute: str) -> dict[tuple[int, int], int]:
    out = {}
    for (a, y), n in budgets.items():
        a = VOCAB[attribute].index(a) if isinstance(a, str) else int(a)
        y = DIAGNOSES.index(y) if isinstance(y, str) else int(y)
        out[(a, y)] = int(n)
    return out


def _cells(subjects: Iterable[SubjectRecord], attribute: str) -> dict[tuple[int, int], list]:
    cells: dict[tuple[int, int], list] = {(a, y): [] for a in (0, 1) for y in (0, 1)}
    for rec in subjects:
        cells[(rec.group(attribute), rec.label)].append(rec)
    for recs in cells.values():
        recs.sort(key=lambda r: r.subject_id)
    return cells


def _finish_pair(
    name: str,
    attribute: str,
    trainval: list[SubjectRecord],
    test: list[SubjectRecord],
    spec: SplitSpec,
    threshold: float,
    rng: np.random.Generator,
) -> DatasetPair:
    keys = _strata_keys(STRATA, attribute)
    val, train = _take(trainval, spec.val_fraction_of_train, keys, spec, threshold, rng)
    parts = {"train": train, "val": val, "test": test}
    return DatasetPair(
        name,
        attribute,
        *(_members(parts[s], attribute) for s in SPLITS),
        declared=composition_table(parts, attribute),
    )


def make_baseline(
    cohort: Cohort,
    budgets: Mapping | None = None,
    spec: SplitSpec = SplitSpec(),
    seed: int = 0,
    attribute: str = "sex",
    name: str = "baseline",
) -> DatasetPair:
    """Baseline pair: the attribute mix within each class matches across splits.

    ``budgets`` maps ``(A, Y)`` cells (indices or vocabulary names) to subject
    counts; missing cells take every available subject.
    """
    rng = np.random.default_rng(seed)
    cells = _cells(cohort.subjects, attribute)
    want = _normalise_budgets(budgets or {}, attribute)
    chosen: list[SubjectRecord] = []
    for cell in sorted(cells):
        pool = cells[cell]
        n = want.get(cell, len(pool))
        if n > len(pool):
            raise ValueError(
                f"budget for cell {_cell_name(attribute, *cell)} requests {n} subjects "
                f"but the cohort has {len(pool)}"
            )
        order = rng.permutation(len(pool))
        chosen += [pool[i] for i in order[:n]]
    threshold = age_threshold(cohort.subjects)
    keys = _strata_keys(spec.strata, attribute)
    test, trainval = _take(chosen, spec.test_fraction, keys, spec, threshold, rng)
    return _finish_pair(name, attribute, trainval, test, spec, threshold, rng)


def _class_split_sizes(total: int, spec: SplitSpec) -> tuple[int, int]:
    n_test = round_half_up(total * spec.test_fraction)
    return total - n_test, n_test


def _biased_counts(total: int, bias: BiasSpec, spec: SplitSpec) -> dict[str, int]:
    n_trainval, n_test = _class_split_sizes(total, spec)
    maj_train = round_half_up(bias.p_train * n_trainval)
    maj_test = round_half_up(bias.p_test * n_test)
    return {
        "maj_train": maj_train,
        "min_train": n_trainval - maj_train,
        "maj_test": maj_test,
        "min_test": n_test - maj_test,
    }


def max_class_budgets(cohort: Cohort, bias: BiasSpec, spec: SplitSpec = SplitSpec()) -> dict[str, int]:
    """Largest per-class subject totals the biased design can be built from."""
    cells = _cells(cohort.subjects, bias.attribute)
    out = {}
    for y, dx in enumerate(DIAGNOSES):
        a_maj = bias.majority_group(y)
        n_maj, n_min = len(cells[(a_maj, y)]), len(cells[(1 - a_maj, y)])
        for total in range(n_maj + n_min, -1, -1):
            c = _biased_counts(total, bias, spec)
            if c["maj_train"] + c["maj_test"] <= n_maj and c["min_train"] + c["min_test"] <= n_min:
                out[dx] = total
                break
    return out


def make_biased(
    cohort: Cohort,
    bias: BiasSpec = BiasSpec(),
    spec: SplitSpec = SplitSpec(),
    seed: int = 0,
    name: str = "biased",
) -> DatasetPair:
    """Biased pair: training-majority cells become test minorities.

    Per-class subject totals come from ``bias.class_budgets`` (default: the
    largest satisfiable totals) and are split train/test exactly as
    :func:`make_baseline` would split them.
    """
    rng = np.random.default_rng(seed)
    attribute = bias.attribute
    cells = _cells(cohort.subjects, attribute)
    budgets = dict(bias.class_budgets or max_class_budgets(cohort, bias, spec))
    trainval: list[SubjectRecord] = []
    test: list[SubjectRecord] = []
    for y, dx in enumerate(DIAGNOSES):
        c = _biased_counts(int(budgets[dx]), bias, spec)
        a_maj = bias.majority_group(y)
        for a, n_train, n_test in (
            (a_maj, c["maj_train"], c["maj_test"]),
            (1 - a_maj, c["min_train"], c["min_test"]),
        ):
            pool = cells[(a, y)]
            if n_train + n_test > len(pool):
                raise ValueError(
                    f"biased design needs {n_train + n_test} subjects in cell "
                    f"{_cell_name(attribute, a, y)} but the cohort has {len(pool)}"
                )
            order = rng.permutation(len(pool))
            trainval += [pool[i] for i in order[:n_train]]
            test += [pool[i] for i in order[n_train : n_train + n_test]]
    threshold = age_threshold(cohort.subjects)
    test.sort(key=lambda r: r.subject_id)
    return _finish_pair(name, attribute, trainval, test, spec, threshold, rng)


def make_pair(
    cohort: Cohort,
    bias: BiasSpec = BiasSpec(),
    spec: SplitSpec = SplitSpec(),
    seed: int = 0,
) -> tuple[DatasetPair, DatasetPair]:
    """Baseline and biased pairs with identical per-class subject totals."""
    budgets = dict(bias.class_budgets or max_class_budgets(cohort, bias, spec))
    cells = _cells(cohort.subjects, bias.attribute)
    baseline_budget = {}
    rng = np.random.default_rng([seed, 1])
    for y, dx in enumerate(DIAGNOSES):
        sizes = {a: len(cells[(a, y)]) for a in (0, 1)}
        alloc = largest_remainder(sizes, budgets[dx], rng)
        baseline_budget.update({(a, y): n for a, n in alloc.items()})
    biased_spec = BiasSpec(
        bias.attribute, bias.majority_pairs, bias.p_train, bias.p_test, budgets
    )
    baseline = make_baseline(cohort, baseline_budget, spec, seed, bias.attribute)
    biased = make_biased(cohort, biased_spec, spec, seed)
    return baseline, biased


@dataclass(frozen=True)
class AuditCheck:
    name: str
    passed: bool
    detail: str
    delta: int = 0


@dataclass
class AuditReport:
    checks: list[AuditCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[AuditCheck]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail, "delta": c.delta}
                for c in self.checks
            ],
        }


def _disjointness(pair: DatasetPair) -> list[AuditCheck]:
    out = []
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1 :]:
            shared = pair.subjects(a) & pair.subjects(b)
            out.append(
                AuditCheck(
                    f"disjoint:{pair.name}:{a}/{b}",
                    not shared,
                    f"{len(shared)} shared subject(s)" + (f": {sorted(shared)[:5]}" if shared else ""),
                    len(shared),
                )
            )
    return out


def _bias_checks(pair: DatasetPair, bias: BiasSpec) -> list[AuditCheck]:
    comp = pair.composition()
    out = []
    for split, p in (("train", bias.p_train), ("test", bias.p_test)):
        for y, dx in enumerate(DIAGNOSES):
            s = comp[split][dx]["S"]
            if split == "train":
                # val is carved out of the biased train pool, so judge train+val
                s = [s[0] + comp["val"][dx]["S"][0], s[1] + comp["val"][dx]["S"][1]]
            n = sum(s)
            got = s[bias.majority_group(y)]
            want = p * n
            delta = abs(got - want)
            out.append(
                AuditCheck(
                    f"bias:{split}:{dx}",
                    delta <= 1.0,
                    f"majority cell has {got} of {n} subjects, expected {want:.2f}",
                    int(math.ceil(delta - 1e-9)),
                )
            )
    return out


def audit_pair(
    baseline: DatasetPair, biased: DatasetPair, bias: BiasSpec | None = None
) -> AuditReport:
    """Check a baseline/biased pair; violations are reported, never raised.

    Per-class totals over the whole pair must match exactly; individual splits
    may differ by one subject from rounding.
    """
    checks = _disjointness(baseline) + _disjointness(biased)
    for dx in DIAGNOSES:
        tot_a = sum(baseline.class_totals(s)[dx] for s in SPLITS)
        tot_b = sum(biased.class_totals(s)[dx] for s in SPLITS)
        checks.append(
            AuditCheck(
                f"totals:all:{dx}",
                tot_a == tot_b,
                f"baseline {tot_a} vs biased {tot_b}",
                abs(tot_a - tot_b),
            )
        )
        for split in ("train", "test"):
            a, b = baseline.class_totals(split)[dx], biased.class_totals(split)[dx]
            checks.append(
                AuditCheck(
                    f"totals:{split}:{dx}", abs(a - b) <= 1, f"baseline {a} vs biased {b}", abs(a - b)
                )
            )
    for pair in (baseline, biased):
        realized = pair.composition()
        mismatches = [
            f"{s}/{dx}/{k}"
            for s in SPLITS
            for dx in DIAGNOSES
            for k in ("S", "N")
            if realized[s][dx][k] != pair.declared[s][dx][k]
        ]
        checks.append(
            AuditCheck(
                f"composition:{pair.name}",
                not mismatches,
                "declared and realized tables agree" if not mismatches
                else f"mismatched cells: {mismatches}",
                len(mismatches),
            )
        )
    if bias is not None:
        checks += _bias_checks(biased, bias)
    return AuditReport(checks)

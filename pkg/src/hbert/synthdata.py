"""Synthetic EHR population with latent phenotypes, plus the visit/label pipeline.

Patients belong to any number of phenotypes (sampled independently by
prevalence). Each visit day is driven by one source (a member phenotype or
the background), which emits diagnosis and prescription codes from its
categorical distributions. Raw events are then grouped into visits,
filtered, labelled at the patient level and pushed down to every visit.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .ontology import HierarchyTree, SystemId


class SynthDataError(ValueError):
    pass


class NoPhenotypes(SynthDataError):
    pass


class InvalidSpec(SynthDataError):
    pass


class MissingPatientLabels(SynthDataError, KeyError):
    pass


@dataclass(frozen=True)
class EventRecord:
    patient_id: str
    date: int
    code: str
    system: SystemId

    def __post_init__(self):
        if self.date < 0:
            raise ValueError("event date must be >= 0")


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    date: int
    dx_codes: tuple[str, ...]
    rx_codes: tuple[str, ...]
    labels: tuple[int, ...] = ()

    def to_json(self) -> str:
        """One dataset line; ``labels`` lists the indices of set task bits."""
        obj = {
            "patient_id": self.patient_id,
            "date": self.date,
            "dx": list(self.dx_codes),
            "rx": list(self.rx_codes),
            "labels": [i for i, b in enumerate(self.labels) if b],
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str, n_tasks: int) -> "VisitRecord":
        obj = json.loads(line)
        bits = [0] * n_tasks
        for i in obj["labels"]:
            bits[i] = 1
        return cls(obj["patient_id"], int(obj["date"]), tuple(obj["dx"]), tuple(obj["rx"]), tuple(bits))


@dataclass(frozen=True)
class CohortRule:
    """Inclusion/exclusion logic over a patient's whole record.

    An empty ``inclusive_rx`` means no medication requirement.
    """

    name: str
    inclusive_dx: frozenset[str]
    dx_min_count: int = 1
    inclusive_rx: frozenset[str] = frozenset()
    rx_min_count: int = 1
    exclusive_rx: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.dx_min_count < 1 or self.rx_min_count < 1:
            raise InvalidSpec(f"cohort {self.name}: min counts must be >= 1")
        if self.inclusive_rx & self.exclusive_rx:
            raise InvalidSpec(f"cohort {self.name}: inclusive and exclusive medications overlap")


@dataclass(frozen=True)
class PhenotypeSpec:
    name: str
    prevalence: float
    dx_emission: Mapping[str, float]
    rx_emission: Mapping[str, float]
    visit_rate: float

    def __post_init__(self):
        if not 0.0 < self.prevalence <= 1.0:
            raise InvalidSpec(f"phenotype {self.name}: prevalence must lie in (0, 1]")
        if self.visit_rate < 0:
            raise InvalidSpec(f"phenotype {self.name}: visit_rate must be >= 0")
        for label, dist in (("dx", self.dx_emission), ("rx", self.rx_emission)):
            if not dist or any(p < 0 for p in dist.values()):
                raise InvalidSpec(f"phenotype {self.name}: {label} emission must be a non-empty distribution")
            if abs(math.fsum(dist.values()) - 1.0) > 1e-9:
                raise InvalidSpec(f"phenotype {self.name}: {label} emission sums to {math.fsum(dist.values())}")


@dataclass(frozen=True)
class PopulationSpec:
    phenotypes: tuple[PhenotypeSpec, ...]
    background: PhenotypeSpec
    cohorts: tuple[CohortRule, ...] = ()
    n_patients: int = 2000
    horizon_days: int = 3650
    dx_per_visit: float = 1.5
    rx_per_visit: float = 1.3
    p_no_dx: float = 0.1
    p_no_rx: float = 0.25
    background_mix: float = 0.0


@dataclass
class Population:
    events: list[EventRecord]
    memberships: dict[str, frozenset[str]] = field(default_factory=dict)


def patient_ids(n: int) -> list[str]:
    width = max(5, len(str(n)))
    return [f"P{i:0{width}d}" for i in range(n)]


def _draw(rng: np.random.Generator, dist: Mapping[str, float], k: int) -> list[str]:
    keys = list(dist)
    p = np.fromiter((dist[c] for c in keys), dtype=np.float64, count=len(keys))
    return [keys[i] for i in rng.choice(len(keys), size=k, p=p / p.sum())]


def generate_population(specs: Sequence[PhenotypeSpec], n_patients: int, seed: int,
                        background: PhenotypeSpec | None = None,
                        population: PopulationSpec | None = None) -> Population:
    """Sample memberships and dated events; deterministic per (seed, patient index)."""
    if not specs:
        raise NoPhenotypes("at least one phenotype is required")
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    pop = population or PopulationSpec(tuple(specs), background or specs[0])
    background = background or pop.background

    events: list[EventRecord] = []
    memberships: dict[str, frozenset[str]] = {}
    for idx, pid in enumerate(patient_ids(n_patients)):
        rng = np.random.default_rng([seed, idx])
        members = [s for s in specs if rng.random() < s.prevalence]
        memberships[pid] = frozenset(s.name for s in members)

        sources = [background] + members
        rates = np.array([s.visit_rate for s in sources], dtype=np.float64)
        n_days = min(1 + int(rng.poisson(rates.sum())), pop.horizon_days)
        days = np.sort(rng.choice(pop.horizon_days, size=n_days, replace=False))
        weights = rates / rates.sum() if rates.sum() > 0 else np.full(len(sources), 1 / len(sources))
        for day in days:
            src = sources[int(rng.choice(len(sources), p=weights))]
            n_dx = 0 if rng.random() < pop.p_no_dx else 1 + int(rng.poisson(pop.dx_per_visit - 1))
            n_rx = 0 if rng.random() < pop.p_no_rx else 1 + int(rng.poisson(pop.rx_per_visit - 1))
            for system, dist_name, k in ((SystemId.DIAGNOSIS, "dx_emission", n_dx),
                                         (SystemId.PRESCRIPTION, "rx_emission", n_rx)):
                for _ in range(k):
                    use = background if rng.random() < pop.background_mix else src
                    code = _draw(rng, getattr(use, dist_name), 1)[0]
                    events.append(EventRecord(pid, int(day), code, system))
    return Population(events, memberships)


def group_and_filter_visits(events: Iterable[EventRecord]) -> list[VisitRecord]:
    """One visit per (patient, day); days lacking a diagnosis or a prescription are dropped."""
    days: dict[tuple[str, int], tuple[set, set]] = defaultdict(lambda: (set(), set()))
    for ev in events:
        dx, rx = days[(ev.patient_id, ev.date)]
        (dx if ev.system == SystemId.DIAGNOSIS else rx).add(ev.code)
    return [VisitRecord(pid, date, tuple(sorted(dx)), tuple(sorted(rx)))
            for (pid, date), (dx, rx) in sorted(days.items()) if dx and rx]


def category_tasks(dx_tree: HierarchyTree) -> list[str]:
    """Depth-2 tokens (chapters) of the diagnosis tree, sorted."""
    return dx_tree.tokens_at_depth(2)


def assign_category_labels(visits: Iterable[VisitRecord], dx_tree: HierarchyTree
                           ) -> dict[str, tuple[int, ...]]:
    """Per patient: bit c set iff any visit carries a diagnosis in chapter c."""
    chapters = category_tasks(dx_tree)
    index = {c: i for i, c in enumerate(chapters)}
    chapter_of: dict[str, int] = {}
    out: dict[str, list[int]] = {}
    for v in visits:
        bits = out.setdefault(v.patient_id, [0] * len(chapters))
        for code in v.dx_codes:
            if code not in chapter_of:
                chapter_of[code] = index[dx_tree.ancestor_at_depth(code, 2)]
            bits[chapter_of[code]] = 1
    return {pid: tuple(b) for pid, b in out.items()}


def evaluate_cohort_rule(visits: Iterable[VisitRecord], rule: CohortRule) -> bool:
    """Counts are occurrences accumulated over visits (the same code on two days counts twice)."""
    n_dx = n_rx = 0
    for v in visits:
        n_dx += sum(c in rule.inclusive_dx for c in v.dx_codes)
        n_rx += sum(c in rule.inclusive_rx for c in v.rx_codes)
        if any(c in rule.exclusive_rx for c in v.rx_codes):
            return False
    rx_ok = not rule.inclusive_rx or n_rx >= rule.rx_min_count
    return n_dx >= rule.dx_min_count and rx_ok


def cohort_labels(visits: Sequence[VisitRecord], rules: Sequence[CohortRule]
                  ) -> dict[str, tuple[int, ...]]:
    """Per patient cohort bits, rules sorted by name."""
    rules = sorted(rules, key=lambda r: r.name)
    by_patient: dict[str, list[VisitRecord]] = defaultdict(list)
    for v in visits:
        by_patient[v.patient_id].append(v)
    return {pid: tuple(int(evaluate_cohort_rule(vs, r)) for r in rules)
            for pid, vs in by_patient.items()}


def push_down_labels(patient_bits: Mapping[str, Sequence[int]],
                     visits: Iterable[VisitRecord]) -> list[VisitRecord]:
    out = []
    for v in visits:
        if v.patient_id not in patient_bits:
            raise MissingPatientLabels(v.patient_id)
        out.append(VisitRecord(v.patient_id, v.date, v.dx_codes, v.rx_codes,
                               tuple(int(b) for b in patient_bits[v.patient_id])))
    return out


def split_patients(ids: Iterable[str], seed: int) -> dict[str, list[str]]:
    """70:10:20 partition by patient. Valid and test sizes are floored; train takes the rest."""
    ids = sorted(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be distinct")
    n = len(ids)
    order = np.random.default_rng([seed, 0x5B117]).permutation(n)
    n_valid, n_test = (n * 10) // 100, (n * 20) // 100
    n_train = n - n_valid - n_test
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "valid": sorted(shuffled[n_train:n_train + n_valid]),
        "test": sorted(shuffled[n_train + n_valid:]),
    }


# ---------------------------------------------------------------------------
# declarative spec files


def _expand(weights: Mapping[str, float], tree: HierarchyTree, what: str) -> dict[str, float]:
    """Spread each group weight uniformly over the leaves below that group token."""
    dist: dict[str, float] = defaultdict(float)
    for token, w in weights.items():
        if token not in tree:
            raise InvalidSpec(f"{what}: unknown code {token!r}")
        leaves = [t for t in tree.descendants(token) if not tree.children.get(t)]
        for leaf in leaves:
            dist[leaf] += float(w) / len(leaves)
    total = math.fsum(dist.values())
    if total <= 0:
        raise InvalidSpec(f"{what}: emission weights sum to zero")
    return {k: v / total for k, v in sorted(dist.items())}


def _leaf_set(tokens: Iterable[str], tree: HierarchyTree, what: str) -> frozenset[str]:
    out = set()
    for t in tokens:
        if t not in tree:
            raise InvalidSpec(f"{what}: unknown code {t!r}")
        out.update(tree.descendants(t))
    return frozenset(out)


def _phenotype(raw: Mapping, dx_tree: HierarchyTree, rx_tree: HierarchyTree,
               default_prevalence: float | None = None) -> PhenotypeSpec:
    try:
        name = str(raw["name"])
        return PhenotypeSpec(
            name=name,
            prevalence=float(raw.get("prevalence", default_prevalence)),
            dx_emission=_expand(raw["dx"], dx_tree, f"{name}.dx"),
            rx_emission=_expand(raw["rx"], rx_tree, f"{name}.rx"),
            visit_rate=float(raw.get("visit_rate", 1.0)),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidSpec(f"malformed phenotype entry {raw!r}: {exc}") from exc


def load_population_spec(path_or_text, dx_tree: HierarchyTree, rx_tree: HierarchyTree
                         ) -> PopulationSpec:
    """Read a YAML phenotype spec.

    Emission weights and cohort code sets may name any hierarchy token; a
    group token stands for every code below it.
    """
    text = Path(path_or_text).read_text(encoding="utf-8") if isinstance(path_or_text, Path) else path_or_text
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise InvalidSpec("phenotype spec must be a mapping")
    phenos = raw.get("phenotypes") or []
    if not phenos:
        raise InvalidSpec("spec defines no phenotypes")
    if "background" not in raw:
        raise InvalidSpec("spec defines no background phenotype")
    background = _phenotype({"name": "background", **raw["background"]}, dx_tree, rx_tree, 1.0)
    cohorts = []
    for c in raw.get("cohorts") or []:
        name = str(c["name"])
        cohorts.append(CohortRule(
            name=name,
            inclusive_dx=_leaf_set(c.get("inclusive_dx", []), dx_tree, name),
            dx_min_count=int(c.get("dx_min_count", 1)),
            inclusive_rx=_leaf_set(c.get("inclusive_rx", []), rx_tree, name),
            rx_min_count=int(c.get("rx_min_count", 1)),
            exclusive_rx=_leaf_set(c.get("exclusive_rx", []), rx_tree, name),
        ))
    names = [p["name"] for p in phenos]
    if len(set(names)) != len(names):
        raise InvalidSpec("phenotype names must be unique")
    pop = raw.get("population") or {}
    known = set(PopulationSpec.__dataclass_fields__) - {"phenotypes", "background", "cohorts"}
    if set(pop) - known:
        raise InvalidSpec(f"unknown population keys {sorted(set(pop) - known)}")
    return PopulationSpec(
        phenotypes=tuple(_phenotype(p, dx_tree, rx_tree) for p in phenos),
        background=background,
        cohorts=tuple(sorted(cohorts, key=lambda r: r.name)),
        **pop,
    )


@dataclass
class LabeledDataset:
    visits: list[VisitRecord]
    tasks: list[str]
    splits: dict[str, list[str]]
    memberships: dict[str, frozenset[str]]


def build_dataset(pop: PopulationSpec, dx_tree: HierarchyTree, seed: int,
                  n_patients: int | None = None) -> LabeledDataset:
    """Generate, group, filter, label, push down and split."""
    population = generate_population(pop.phenotypes, n_patients or pop.n_patients, seed,
                                     background=pop.background, population=pop)
    visits = group_and_filter_visits(population.events)
    cat = assign_category_labels(visits, dx_tree)
    coh = cohort_labels(visits, pop.cohorts)
    bits = {pid: cat[pid] + coh[pid] for pid in cat}
    tasks = category_tasks(dx_tree) + [r.name for r in pop.cohorts]
    labelled = push_down_labels(bits, visits)
    splits = split_patients(bits, seed)
    return LabeledDataset(labelled, tasks, splits, population.memberships)


def population_summary(ds: LabeledDataset) -> dict:
    patients = {v.patient_id: v.labels for v in ds.visits}
    per_task = Counter()
    for bits in patients.values():
        for t, b in zip(ds.tasks, bits):
            per_task[t] += b
    return {
        "patients": len(patients),
        "visits": len(ds.visits),
        "split_sizes": {k: len(v) for k, v in ds.splits.items()},
        "patients_per_task": {t: per_task[t] for t in ds.tasks},
    }

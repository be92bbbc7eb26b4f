"""Synthetic multi-site OMOP tables with an exact defect manifest.

Concept ids come from disjoint integer ranges per vocabulary, so membership
is decidable from the id alone. Every (person, table) row has a distinct
start second, which makes the planted duplicates and crosswalk collisions the
only key coincidences in the output.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ingest import write_csv
from .schema import ICU_CONCEPT_IDS, format_date, format_datetime, get_schema

# ------------------------------------------------------------ vocabularies

VOCAB_RANGES = {
    "SNOMED": (4_000_000, 4_999_999),
    "LOINC": (3_000_000, 3_099_999),
    "ICD10PCS": (2_000_000, 2_099_999),
    "CPT4": (2_100_000, 2_199_999),
    "HCPCS": (2_200_000, 2_299_999),
    "ICD10CM": (1_500_000, 1_599_999),
    "ICD9CM": (1_600_000, 1_699_999),
    "RxNorm": (1_100_000, 1_199_999),
}

# SNOMED sub-ranges: concepts used directly in data vs crosswalk targets
SNOMED_DIRECT = 4_000_000
SNOMED_TARGET = 4_500_000

TEMPERATURE = 4_000_001
WEIGHT = 4_000_002
HEIGHT = 4_000_003
UNIT_CONCEPTS = {TEMPERATURE: ("Cel", "[degF]"), WEIGHT: ("kg", "[lb_av]"), HEIGHT: ("cm", "[in_i]")}
UNIT_SOURCE_LABELS = {"[degF]": ("F", "degF", "°F"), "[lb_av]": ("lb", "lbs"), "[in_i]": ("in", "inches")}
UNIT_CONCEPT_IDS = {"Cel": 586323, "kg": 9529, "cm": 8582, "[degF]": 9289, "[lb_av]": 8739, "[in_i]": 9330}
SEPSIS_CONCEPT = 4_000_900

GENDERS = (8507, 8532)
INPATIENT, OUTPATIENT, EMERGENCY = 9201, 9202, 9203
WARD = 8717
EHR_TYPE = 32817
REFERENCE_NOW = datetime(2025, 1, 1)
SPAN_START = datetime(1990, 1, 1)
SPAN_END = datetime(2022, 12, 31)
DEFAULT_BASE = 600_000_071_000_000

VOCAB_SIZES = {
    "MEASUREMENT": {"LOINC": 520, "SNOMED": 120},
    "OBSERVATION": {"LOINC": 200, "SNOMED": 150},
    "PROCEDURE_OCCURRENCE": {"ICD10PCS": 120, "CPT4": 80, "SNOMED": 60, "HCPCS": 40},
    "DEVICE_EXPOSURE": {"HCPCS": 40, "SNOMED": 30},
    "CONDITION_OCCURRENCE": {"SNOMED": 150},
    "DRUG_EXPOSURE": {"RxNorm": 180},
}
DEFAULT_MIXTURES = {
    "MEASUREMENT": {"LOINC": 0.8, "SNOMED": 0.2},
    "OBSERVATION": {"LOINC": 0.5, "SNOMED": 0.5},
    "PROCEDURE_OCCURRENCE": {"ICD10PCS": 0.578, "CPT4": 0.198, "SNOMED": 0.154, "HCPCS": 0.07},
    "DEVICE_EXPOSURE": {"HCPCS": 0.6, "SNOMED": 0.4},
    "CONDITION_OCCURRENCE": {"SNOMED": 1.0},
    "DRUG_EXPOSURE": {"RxNorm": 1.0},
}
MAPPED = ("MEASUREMENT", "OBSERVATION", "PROCEDURE_OCCURRENCE", "DEVICE_EXPOSURE")
DEFECT_TABLES = ("MEASUREMENT", "OBSERVATION", "CONDITION_OCCURRENCE", "DRUG_EXPOSURE",
                 "PROCEDURE_OCCURRENCE", "DEVICE_EXPOSURE")
GENERATED_TABLES = ("PERSON", "OBSERVATION_PERIOD", "VISIT_OCCURRENCE", "VISIT_DETAIL",
                    "CONDITION_OCCURRENCE", "DRUG_EXPOSURE", "PROCEDURE_OCCURRENCE", "DEVICE_EXPOSURE",
                    "MEASUREMENT", "OBSERVATION", "DEATH", "LOCATION", "CARE_SITE", "PROVIDER")


class ProfileError(ValueError):
    pass


def vocabulary_of(concept: int) -> Optional[str]:
    for v, (lo, hi) in VOCAB_RANGES.items():
        if lo <= concept <= hi:
            return v
    return None


@dataclass
class Universe:
    """Concept lists per (table, vocabulary); SNOMED lists are per table and disjoint."""

    concepts: Dict[str, Dict[str, List[int]]]

    @classmethod
    def build(cls, sizes: Dict[str, Dict[str, int]] = None) -> "Universe":
        sizes = sizes or VOCAB_SIZES
        nxt = {v: lo for v, (lo, _) in VOCAB_RANGES.items()}
        nxt["SNOMED"] = SNOMED_DIRECT + 10  # 1..9 reserved for unit concepts
        out: Dict[str, Dict[str, List[int]]] = {}
        for table in sorted(sizes):
            out[table] = {}
            for vocab, n in sorted(sizes[table].items()):
                ids = list(range(nxt[vocab], nxt[vocab] + n))
                nxt[vocab] += n
                if table == "MEASUREMENT" and vocab == "SNOMED":
                    ids = [TEMPERATURE, WEIGHT, HEIGHT] + ids[3:]
                if table == "CONDITION_OCCURRENCE":
                    ids = [SEPSIS_CONCEPT] + ids[1:]
                out[table][vocab] = ids
        return cls(out)

    def sources(self) -> List[Tuple[int, str]]:
        """(concept, vocabulary) of every non-SNOMED concept, in id order."""
        seen = {}
        for t in self.concepts.values():
            for v, ids in t.items():
                if v != "SNOMED":
                    for c in ids:
                        seen[c] = v
        return sorted(seen.items())

    def snomed(self) -> List[int]:
        return sorted({c for t in self.concepts.values() for c in t.get("SNOMED", [])})


@dataclass
class Crosswalk:
    rows: List[Tuple[int, str, int, str]]
    partners: Dict[int, List[int]]  # source -> other sources with the same target

    @property
    def targets(self) -> Dict[int, int]:
        return {s: t for s, _, t, _ in self.rows}

    def reverse(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = defaultdict(list)
        for s, _, t, _ in self.rows:
            out[t].append(s)
        return dict(out)

    def write(self, path) -> Path:
        return write_csv(path, ["source_concept_id", "source_vocabulary", "target_concept_id",
                                "target_vocabulary"], [list(map(str, r)) for r in self.rows])


def generate_crosswalk(universe: Universe, seed: int = 0, collision_fraction: float = 0.1) -> Crosswalk:
    """One SNOMED target per non-SNOMED concept; ``collision_fraction`` of sources share targets.

    Colliding sources are paired within the same (table, vocabulary) list so
    the partner concept occurs in the same table's data.
    """
    if not 0.0 <= collision_fraction <= 1.0:
        raise ProfileError("collision_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    rows = []
    partners: Dict[int, List[int]] = defaultdict(list)
    nxt = SNOMED_TARGET
    done = set()
    for table in sorted(universe.concepts):
        for vocab, ids in sorted(universe.concepts[table].items()):
            if vocab == "SNOMED":
                continue
            ids = [c for c in ids if c not in done]
            n_pairs = min(len(ids) // 2, int(math.ceil(collision_fraction * len(ids) / 2)))
            order = rng.permutation(len(ids))
            paired = [ids[i] for i in order[: 2 * n_pairs]]
            for a, b in zip(paired[0::2], paired[1::2]):
                rows += [(a, vocab, nxt, "SNOMED"), (b, vocab, nxt, "SNOMED")]
                partners[a].append(b)
                partners[b].append(a)
                nxt += 1
            for i in order[2 * n_pairs:]:
                rows.append((ids[i], vocab, nxt, "SNOMED"))
                nxt += 1
            done.update(ids)
    rows.sort()
    return Crosswalk(rows, dict(partners))


def write_concept_dictionary(universe: Universe, crosswalk: Crosswalk, path) -> Path:
    ids = {c: v for t in universe.concepts.values() for v, cs in t.items() for c in cs}
    for _, _, t, _ in crosswalk.rows:
        ids[t] = "SNOMED"
    return write_csv(path, ["concept_id", "vocabulary_id"], [[str(c), v] for c, v in sorted(ids.items())])


# ----------------------------------------------------------------- profiles

@dataclass
class SiteProfile:
    site_id: str
    patients: int
    person_id_base: int = DEFAULT_BASE
    mixtures: Dict[str, Dict[str, float]] = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_MIXTURES)))
    visits_mean: float = 1.5  # extra visits beyond the first (Poisson)
    span_median_years: float = 3.11
    span_sigma: float = 0.9
    icu_probability: float = 0.3
    mortality_probability: float = 0.2209
    second_stay_probability: float = 0.3
    sepsis_probability: float = 0.15
    events_per_visit: Dict[str, float] = field(default_factory=lambda: {
        "MEASUREMENT": 4.0, "OBSERVATION": 1.5, "CONDITION_OCCURRENCE": 1.0, "DRUG_EXPOSURE": 1.5,
        "PROCEDURE_OCCURRENCE": 0.8, "DEVICE_EXPOSURE": 0.3})
    icu_measurements: float = 10.0
    unit_measurement_fraction: float = 0.12

    def validate(self) -> None:
        if self.patients <= 0:
            raise ProfileError("patient count must be positive")
        for name in ("icu_probability", "mortality_probability", "second_stay_probability",
                     "sepsis_probability", "unit_measurement_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ProfileError(f"{name} must be in [0, 1], got {v}")
        for table, mix in self.mixtures.items():
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ProfileError(f"{table} mixture sums to {sum(mix.values())}")
            for vocab in mix:
                if vocab not in VOCAB_SIZES.get(table, {}):
                    raise ProfileError(f"{table}: no synthetic concepts for vocabulary {vocab}")
        if self.icu_probability > 0 and self.visits_mean < 0:
            raise ProfileError("ICU admissions need at least one visit")
        if self.person_id_base <= 0:
            raise ProfileError("person_id_base must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SiteProfile":
        p = cls(**d)
        p.validate()
        return p


@dataclass
class DefectSpec:
    invalid: float = 0.03
    duplicate: float = 0.01
    temporal: float = 0.005
    collision: float = 0.005  # mapped tables only
    outlier: float = 0.002  # MEASUREMENT only
    tables: Tuple[str, ...] = DEFECT_TABLES

    def validate(self) -> None:
        for k in ("invalid", "duplicate", "temporal", "collision", "outlier"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ProfileError(f"defect rate {k} must be in [0, 1]")
        if self.invalid + self.duplicate + self.temporal + self.collision + self.outlier > 1.0:
            raise ProfileError("defect rates sum to more than 1")


# ----------------------------------------------------------------- helpers

def _seconds(dt: datetime) -> int:
    return int((dt - SPAN_START).total_seconds())


def _at(s: int) -> datetime:
    return SPAN_START + timedelta(seconds=int(s))


def _fmt_float(v: float, digits: int = 4) -> str:
    return repr(round(float(v), digits))


class _Table:
    def __init__(self, name: str):
        self.name = name
        self.schema = get_schema(name)
        self.columns = self.schema.column_names
        self.ix = {c: i for i, c in enumerate(self.columns)}
        self.rows: List[List[str]] = []

    def add(self, **values) -> List[str]:
        row = [""] * len(self.columns)
        for k, v in values.items():
            row[self.ix[k]] = "" if v is None else str(v)
        self.rows.append(row)
        return row


class _TimeSet:
    """Per-(person, table) distinct start seconds."""

    def __init__(self):
        self.used: Dict[Tuple[int, str], set] = defaultdict(set)

    def take(self, person: int, table: str, s: int) -> int:
        used = self.used[(person, table)]
        while s in used:
            s += 1
        used.add(s)
        return s


# --------------------------------------------------------------- generation

def _zipf_weights(n: int, a: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


class _ConceptSampler:
    def __init__(self, universe: Universe, mixtures: Dict[str, Dict[str, float]], rng):
        self.rng = rng
        self.tables = {}
        for table, mix in mixtures.items():
            vocabs = sorted(mix)
            self.tables[table] = (vocabs, np.array([mix[v] for v in vocabs]),
                                  {v: (universe.concepts[table][v], _zipf_weights(len(universe.concepts[table][v])))
                                   for v in vocabs})

    def draw(self, table: str, n: int) -> List[Tuple[int, str]]:
        vocabs, p, lists = self.tables[table]
        vs = self.rng.choice(len(vocabs), size=n, p=p)
        out = []
        for vi in vs:
            ids, w = lists[vocabs[vi]]
            out.append((ids[self.rng.choice(len(ids), p=w)], vocabs[vi]))
        return out


def _value_params(universe: Universe) -> Dict[int, Tuple[float, float, str]]:
    """Per numeric concept: (log-mean, log-sd, unit)."""
    rng = np.random.default_rng(12345)
    units = ("mg/dL", "mmol/L", "U/L", "g/L", "10*3/uL", "%", "mm[Hg]", "/min")
    out = {}
    for table in ("MEASUREMENT", "OBSERVATION"):
        for vocab, ids in sorted(universe.concepts[table].items()):
            for c in ids:
                out[c] = (float(rng.uniform(0.0, 5.0)), float(rng.uniform(0.1, 0.5)),
                          units[int(rng.integers(len(units)))])
    return out


def _unit_value(concept: int, rng) -> float:
    if concept == TEMPERATURE:
        return float(np.clip(rng.normal(37.0, 0.6), 34.0, 41.0))
    if concept == WEIGHT:
        return float(np.clip(rng.normal(78.0, 15.0), 35.0, 200.0))
    return float(np.clip(rng.normal(170.0, 10.0), 140.0, 205.0))


def _to_source_unit(concept: int, v: float) -> float:
    if concept == TEMPERATURE:
        return v * 9 / 5 + 32
    if concept == WEIGHT:
        return v / 0.45359237
    return v / 2.54


def generate_site(profile: SiteProfile, seed: int, universe: Optional[Universe] = None,
                  site_index: int = 0) -> Tuple[Dict[str, _Table], dict]:
    """Clean tables for one site plus realized statistics (no defects yet)."""
    profile.validate()
    universe = universe or Universe.build()
    rng = np.random.default_rng(seed)
    sampler = _ConceptSampler(universe, profile.mixtures, rng)
    params = _value_params(universe)
    times = _TimeSet()
    T = {n: _Table(n) for n in GENERATED_TABLES}
    ids = Counter()
    id_base = (site_index + 1) * 10 ** 9

    def nid(table):
        ids[table] += 1
        return id_base + ids[table]

    n_care = 5
    for i in range(n_care):
        loc = id_base + i + 1
        T["LOCATION"].add(location_id=loc, city=f"City{site_index}-{i}", state="ST", zip=f"{10000 + i}",
                          location_source_value=f"L{site_index}-{i}")
        T["CARE_SITE"].add(care_site_id=loc, care_site_name=f"Site {profile.site_id} unit {i}",
                           place_of_service_concept_id=[8717, 32037, 581379, 8756, 8940][i],
                           location_id=loc, care_site_source_value=f"CS{i}")
    for i in range(20):
        T["PROVIDER"].add(provider_id=id_base + i + 1, provider_name=f"Provider {i}",
                          specialty_concept_id=38004450 + i % 5, care_site_id=id_base + 1 + i % n_care,
                          year_of_birth=1950 + i, gender_concept_id=GENDERS[i % 2],
                          provider_source_value=f"P{i}")
    stats = Counter()
    spans = []
    fragments: List[List[int]] = []
    span_total = _seconds(SPAN_END)
    for k in range(profile.patients):
        pid = profile.person_id_base + k
        gender = GENDERS[int(rng.random() < 0.45)]
        birth = datetime(int(rng.integers(1930, 2005)), int(rng.integers(1, 13)), int(rng.integers(1, 29)),
                         int(rng.integers(0, 24)), int(rng.integers(0, 60)))
        span_y = float(np.clip(rng.lognormal(math.log(profile.span_median_years), profile.span_sigma), 0.2, 31.8))
        span_s = int(span_y * 365.25 * 86400)
        lo = max(_seconds(birth) + 86400 * 365, 0)
        hi = span_total - span_s
        if hi <= lo:
            span_s = max(span_total - lo, 86400 * 30)
            hi = lo + 1
        op_start = int(rng.integers(lo, hi))
        op_end = min(op_start + span_s, span_total)
        spans.append((op_end - op_start) / (365.25 * 86400))
        T["PERSON"].add(person_id=pid, gender_concept_id=gender, year_of_birth=birth.year,
                        month_of_birth=birth.month, day_of_birth=birth.day,
                        birth_datetime=format_datetime(birth), race_concept_id=8527, ethnicity_concept_id=38003564,
                        location_id=id_base + 1 + k % n_care, person_source_value=f"S{profile.site_id}-{k}",
                        gender_source_value="M" if gender == 8507 else "F")
        T["OBSERVATION_PERIOD"].add(observation_period_id=nid("OBSERVATION_PERIOD"), person_id=pid,
                                    observation_period_start_date=format_date(_at(op_start)),
                                    observation_period_end_date=format_date(_at(op_end)),
                                    period_type_concept_id=EHR_TYPE)
        icu = rng.random() < profile.icu_probability
        n_visits = 1 + int(rng.poisson(profile.visits_mean))
        visit_starts = sorted(int(rng.integers(op_start, max(op_start + 1, op_end - 86400 * 20)))
                              for _ in range(n_visits))
        visits = []  # (id, start, end, concept)
        for j, vs in enumerate(visit_starts):
            if icu and j == 0:
                concept = INPATIENT
            else:
                concept = [INPATIENT, OUTPATIENT, EMERGENCY][int(rng.choice(3, p=[0.35, 0.5, 0.15]))]
            if concept == INPATIENT:
                length = int(rng.uniform(2, 12) * 86400)
            else:
                length = int(rng.uniform(0.5, 8) * 3600)
            vs = times.take(pid, "VISIT_OCCURRENCE", vs)
            ve = vs + length
            vid = nid("VISIT_OCCURRENCE")
            visits.append((vid, vs, ve, concept))
            T["VISIT_OCCURRENCE"].add(visit_occurrence_id=vid, person_id=pid, visit_concept_id=concept,
                                      visit_start_date=format_date(_at(vs)), visit_start_datetime=format_datetime(_at(vs)),
                                      visit_end_date=format_date(_at(ve)), visit_end_datetime=format_datetime(_at(ve)),
                                      visit_type_concept_id=EHR_TYPE, care_site_id=id_base + 1 + j % n_care)
            stats["visits"] += 1
        # ICU stays, possibly fragmented, inside inpatient visits
        stays = []
        if icu:
            stats["icu_persons"] += 1
            inpatient = [v for v in visits if v[3] == INPATIENT]
            n_stays = 1 + int(len(inpatient) > 1 and rng.random() < profile.second_stay_probability)
            for v in inpatient[:n_stays]:
                vid, vs, ve, _ = v
                s0 = vs + int(rng.uniform(0.05, 0.3) * (ve - vs))
                dur = int(float(np.clip(rng.lognormal(math.log(3.0), 0.7), 0.3, 20.0)) * 86400)
                concept = 581379 if rng.random() < 0.7 else 32037
                n_frag = int(rng.integers(1, 4))
                cuts = sorted(rng.uniform(0, dur, size=n_frag - 1).astype(int).tolist())
                bounds = [0] + cuts + [dur]
                frag_ids = []
                for a, b in zip(bounds[:-1], bounds[1:]):
                    gap = int(rng.uniform(0, 90) * 60) if a > 0 else 0
                    fs = times.take(pid, "VISIT_DETAIL", s0 + a + gap)
                    fe = max(fs + 600, s0 + b)
                    did = nid("VISIT_DETAIL")
                    frag_ids.append(did)
                    T["VISIT_DETAIL"].add(visit_detail_id=did, person_id=pid, visit_detail_concept_id=concept,
                                          visit_detail_start_date=format_date(_at(fs)),
                                          visit_detail_start_datetime=format_datetime(_at(fs)),
                                          visit_detail_end_date=format_date(_at(fe)),
                                          visit_detail_end_datetime=format_datetime(_at(fe)),
                                          visit_detail_type_concept_id=EHR_TYPE, visit_occurrence_id=vid)
                stays.append((s0, s0 + dur, vid, frag_ids))
                stats["icu_stays"] += 1
                if len(frag_ids) > 1:
                    stats["fragmented_stays"] += 1
                    fragments.append(frag_ids)
        for vid, vs, ve, concept in visits:
            if concept == INPATIENT and rng.random() < 0.5:
                ws = times.take(pid, "VISIT_DETAIL", vs)
                we = ws + int(rng.uniform(2, 20) * 3600)
                T["VISIT_DETAIL"].add(visit_detail_id=nid("VISIT_DETAIL"), person_id=pid,
                                      visit_detail_concept_id=WARD,
                                      visit_detail_start_date=format_date(_at(ws)),
                                      visit_detail_start_datetime=format_datetime(_at(ws)),
                                      visit_detail_end_date=format_date(_at(we)),
                                      visit_detail_end_datetime=format_datetime(_at(we)),
                                      visit_detail_type_concept_id=EHR_TYPE, visit_occurrence_id=vid)
        # clinical events
        windows = [(vs, ve, vid, profile.events_per_visit) for vid, vs, ve, _ in visits]
        for s0, s1, vid, _ in stays:
            windows.append((s0, s1, vid, {"MEASUREMENT": profile.icu_measurements}))
        for ws, we, vid, rates in windows:
            for table, lam in rates.items():
                n = int(rng.poisson(lam))
                if not n:
                    continue
                drawn = sampler.draw(table, n)
                for concept, vocab in drawn:
                    t = times.take(pid, table, int(rng.integers(ws, max(ws + 1, we))))
                    _emit_event(T, table, pid, concept, vocab, t, vid, rng, params, profile, nid)
                    stats[f"rows_{table}"] += 1
        # sepsis
        if stays and rng.random() < profile.sepsis_probability:
            t = times.take(pid, "CONDITION_OCCURRENCE", stays[0][0] + int(rng.uniform(-5, 10) * 86400))
            _emit_event(T, "CONDITION_OCCURRENCE", pid, SEPSIS_CONCEPT, "SNOMED", t, stays[0][2], rng, params,
                        profile, nid)
            stats["sepsis_persons"] += 1
        # death
        if rng.random() < profile.mortality_probability:
            if stays and rng.random() < 0.5:
                t = stays[0][0] + int(rng.uniform(0.5, 40) * 86400)
            else:
                last = max(v[2] for v in visits)
                t = last + int(rng.uniform(1, 400) * 86400)
            t = min(t, span_total)
            T["DEATH"].add(person_id=pid, death_date=format_date(_at(t)), death_datetime=format_datetime(_at(t)),
                           death_type_concept_id=EHR_TYPE)
            stats["deceased"] += 1
    realized = {
        "site_id": profile.site_id,
        "patients": profile.patients,
        "deceased_fraction": stats["deceased"] / profile.patients,
        "icu_fraction": stats["icu_persons"] / profile.patients,
        "icu_stays": stats["icu_stays"],
        "fragmented_icu_stays": stats["fragmented_stays"],
        "sepsis_persons": stats["sepsis_persons"],
        "median_observation_years": float(np.median(spans)) if spans else 0.0,
        "max_observation_years": float(np.max(spans)) if spans else 0.0,
        "fragmented_visit_groups": fragments,
    }
    return T, realized


def _emit_event(T, table, pid, concept, vocab, t, vid, rng, params, profile, nid):
    at = _at(t)
    common = dict(person_id=pid, visit_occurrence_id=vid)
    if table == "MEASUREMENT":
        if concept in UNIT_CONCEPTS:
            v = _unit_value(concept, rng)
            unit = UNIT_CONCEPTS[concept][0]
        else:
            mu, sd, unit = params[concept]
            v = float(rng.lognormal(mu, sd))
        T[table].add(measurement_id=nid(table), measurement_concept_id=concept, measurement_date=format_date(at),
                     measurement_datetime=format_datetime(at), measurement_type_concept_id=EHR_TYPE,
                     value_as_number=_fmt_float(v), unit_concept_id=UNIT_CONCEPT_IDS.get(unit, 8840),
                     unit_source_value=unit, measurement_source_value=f"{vocab}:{concept}",
                     measurement_source_concept_id=concept, **common)
    elif table == "OBSERVATION":
        mu, sd, unit = params[concept]
        numeric = rng.random() < 0.6
        T[table].add(observation_id=nid(table), observation_concept_id=concept, observation_date=format_date(at),
                     observation_datetime=format_datetime(at), observation_type_concept_id=EHR_TYPE,
                     value_as_number=_fmt_float(rng.lognormal(mu, sd)) if numeric else "",
                     value_as_string="" if numeric else "present",
                     unit_source_value=unit if numeric else "", observation_source_value=f"{vocab}:{concept}",
                     observation_source_concept_id=concept, **common)
    elif table == "CONDITION_OCCURRENCE":
        end = _at(t + int(rng.uniform(1, 30) * 86400))
        T[table].add(condition_occurrence_id=nid(table), condition_concept_id=concept,
                     condition_start_date=format_date(at), condition_start_datetime=format_datetime(at),
                     condition_end_date=format_date(end), condition_end_datetime=format_datetime(end),
                     condition_type_concept_id=EHR_TYPE, condition_source_value=f"{vocab}:{concept}",
                     condition_source_concept_id=concept, **common)
    elif table == "DRUG_EXPOSURE":
        end = _at(t + int(rng.uniform(0.1, 14) * 86400))
        T[table].add(drug_exposure_id=nid(table), drug_concept_id=concept,
                     drug_exposure_start_date=format_date(at), drug_exposure_start_datetime=format_datetime(at),
                     drug_exposure_end_date=format_date(end), drug_exposure_end_datetime=format_datetime(end),
                     drug_type_concept_id=EHR_TYPE, quantity=int(rng.integers(1, 10)),
                     drug_source_value=f"{vocab}:{concept}", drug_source_concept_id=concept, **common)
    elif table == "PROCEDURE_OCCURRENCE":
        T[table].add(procedure_occurrence_id=nid(table), procedure_concept_id=concept, procedure_date=format_date(at),
                     procedure_datetime=format_datetime(at), procedure_type_concept_id=EHR_TYPE,
                     procedure_source_value=f"{vocab}:{concept}", procedure_source_concept_id=concept, **common)
    elif table == "DEVICE_EXPOSURE":
        end = _at(t + int(rng.uniform(0.1, 5) * 86400))
        T[table].add(device_exposure_id=nid(table), device_concept_id=concept,
                     device_exposure_start_date=format_date(at), device_exposure_start_datetime=format_datetime(at),
                     device_exposure_end_date=format_date(end), device_exposure_end_datetime=format_datetime(end),
                     device_type_concept_id=EHR_TYPE, device_source_value=f"{vocab}:{concept}",
                     device_source_concept_id=concept, **common)


# ------------------------------------------------------------------ defects

def _convert_units(table: _Table, fraction: float, rng) -> List[int]:
    """Express ``fraction`` of unit-concept measurements in their non-target unit; returns base rows."""
    ci, vi, ui, uci = (table.ix[c] for c in ("measurement_concept_id", "value_as_number", "unit_source_value",
                                             "unit_concept_id"))
    cand = [i for i, r in enumerate(table.rows) if int(r[ci]) in UNIT_CONCEPTS]
    n = int(math.floor(fraction * len(cand)))
    chosen = sorted(rng.choice(len(cand), size=n, replace=False).tolist()) if n else []
    out = []
    for j in chosen:
        i = cand[j]
        r = table.rows[i]
        c = int(r[ci])
        src = UNIT_CONCEPTS[c][1]
        r[vi] = repr(_to_source_unit(c, float(r[vi])))
        labels = UNIT_SOURCE_LABELS[src]
        r[ui] = labels[int(rng.integers(len(labels)))]
        r[uci] = str(UNIT_CONCEPT_IDS[src])
        out.append(i)
    return out


def inject_defects(tables: Dict[str, _Table], spec: DefectSpec, seed: int, crosswalk: Optional[Crosswalk] = None,
                   params: Optional[dict] = None, reference_now: datetime = REFERENCE_NOW,
                   unit_fraction: float = 0.3) -> dict:
    """Plant defects in place; returns the manifest keyed by table with final data-row indices."""
    spec.validate()
    rng = np.random.default_rng(seed)
    manifest: Dict[str, dict] = {}
    partners = crosswalk.partners if crosswalk else {}
    for name, table in tables.items():
        rows = table.rows
        n = len(rows)
        schema = table.schema
        if name not in spec.tables or n == 0:
            if name == "MEASUREMENT":
                conv = _convert_units(table, unit_fraction, rng)
                manifest[name] = {"nontarget_unit": conv}
            continue
        ci = table.ix[schema.primary_concept_column]
        idc = table.ix[schema.id_column]
        counts = {k: int(math.floor(getattr(spec, k) * n)) for k in ("invalid", "duplicate", "temporal")}
        counts["collision"] = int(math.floor(spec.collision * n)) if name in MAPPED else 0
        counts["outlier"] = int(math.floor(spec.outlier * n)) if name == "MEASUREMENT" else 0
        free = rng.permutation(n).tolist()
        taken = set()

        def take(k, pred=lambda i: True):
            got = []
            for i in free:
                if len(got) == k:
                    break
                if i not in taken and pred(i):
                    got.append(i)
                    taken.add(i)
            if len(got) < k:
                raise ProfileError(f"{name}: cannot place {k} defects")
            return sorted(got)

        numeric_ok = None
        if name == "MEASUREMENT":
            freq = Counter(r[ci] for r in rows if r[ci] and int(r[ci]) not in UNIT_CONCEPTS)
            # frequent concepts keep the planted value outside the 1% tails; small sites fall back
            # to their most frequent concepts
            ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
            eligible, covered = set(), 0
            for c, f in ranked:
                if f < 300 and covered >= 20 * counts["outlier"]:
                    break
                eligible.add(c)
                covered += f
            numeric_ok = lambda i: rows[i][ci] in eligible
        invalid = take(counts["invalid"])
        temporal = take(counts["temporal"])
        outliers = take(counts["outlier"], numeric_ok) if counts["outlier"] else []
        dup_orig = take(counts["duplicate"])
        coll_orig = take(counts["collision"], lambda i: int(rows[i][ci]) in partners) if counts["collision"] else []
        # unit conversion works on rows not otherwise touched
        conv_rows = []
        if name == "MEASUREMENT":
            conv_rows = [i for i in _convert_units_excluding(table, unit_fraction, rng, taken)]
        for i in invalid:
            rows[i][ci] = "0" if rng.random() < 0.67 else ""
        st, sd, et, ed = (table.ix.get(c) if c else None for c in
                          (schema.start_column, schema.start_date_column, schema.end_column, schema.end_date_column))
        future_base = _seconds(datetime(2090, 1, 1))
        inversions, futures = [], []
        for k, i in enumerate(temporal):
            r = rows[i]
            if et is not None and r[et] and k % 2 == 0:
                s = datetime.fromisoformat(r[st])
                e = s - timedelta(seconds=int(rng.uniform(1, 5) * 86400))
                r[et] = format_datetime(e)
                if ed is not None:
                    r[ed] = format_date(e)
                inversions.append(i)
            else:
                s = _at(future_base + k * 3600 + int(rng.integers(0, 3000)))
                r[st] = format_datetime(s)
                if sd is not None:
                    r[sd] = format_date(s)
                if et is not None and r[et]:
                    e = s + timedelta(days=1)
                    r[et] = format_datetime(e)
                    if ed is not None:
                        r[ed] = format_date(e)
                futures.append(i)
        if outliers:
            params = params or _value_params(Universe.build())
            vi = table.ix["value_as_number"]
            for i in outliers:
                mu, sdv, _ = params[int(rows[i][ci])]
                sign = 1 if rng.random() < 0.5 else -1
                rows[i][vi] = repr(float(math.exp(mu + sign * 7 * sdv)))
        # copies go to random later positions
        next_id = max(int(r[idc]) for r in rows) + 1 if schema.id_column != "person_id" else None
        keyed = [(float(i), 0, i, rows[i]) for i in range(n)]
        extra = []
        for kind, originals in (("duplicate", dup_orig), ("collision", coll_orig)):
            for i in originals:
                copy = list(rows[i])
                if next_id is not None:
                    copy[idc] = str(next_id)
                    next_id += 1
                if kind == "collision":
                    c = int(rows[i][ci])
                    copy[ci] = str(partners[c][0])
                    src = table.ix.get(schema.primary_concept_column.replace("_concept_id", "_source_concept_id"))
                    if src is not None:
                        copy[src] = copy[ci]
                elif name == "MEASUREMENT" and rng.random() < 0.5 and copy[table.ix["value_as_number"]]:
                    copy[table.ix["value_as_number"]] = repr(float(copy[table.ix["value_as_number"]]) + 0.1)
                pos = float(rng.uniform(i + 0.5, n))
                extra.append((pos, 1, i, copy, kind))
        order = keyed + [(p, k, i, r) for p, k, i, r, _ in extra]
        order.sort(key=lambda x: (x[0], x[1]))
        final_index_of_base = {}
        new_rows = []
        copy_kinds = {id(r): kind for _, _, _, r, kind in extra}
        dup_final, coll_final = [], []
        for j, (_, is_copy, i, r) in enumerate(order):
            new_rows.append(r)
            if is_copy:
                (dup_final if copy_kinds[id(r)] == "duplicate" else coll_final).append(j)
            else:
                final_index_of_base[i] = j
        table.rows = new_rows
        fi = final_index_of_base
        manifest[name] = {
            "rows_base": n,
            "rows_final": len(new_rows),
            "clean_invalid": sorted(fi[i] for i in invalid),
            "clean_temporal": sorted(fi[i] for i in temporal),
            "temporal_inversions": sorted(fi[i] for i in inversions),
            "future_dated": sorted(fi[i] for i in futures),
            "clean_duplicate": sorted(dup_final),
            "duplicate_originals": sorted(fi[i] for i in dup_orig),
            "map_duplicate": sorted(coll_final),
            "outlier": sorted(fi[i] for i in outliers),
        }
        if name == "MEASUREMENT":
            manifest[name]["nontarget_unit"] = sorted(fi[i] for i in conv_rows)
        # row ids identify entries after the sites are merged into one stream
        manifest[name]["id_column"] = schema.id_column
        manifest[name]["ids"] = {k: [new_rows[j][idc] for j in v] for k, v in manifest[name].items()
                                 if isinstance(v, list)}
    return manifest


def _convert_units_excluding(table: _Table, fraction: float, rng, taken: set) -> List[int]:
    ci, vi, ui, uci = (table.ix[c] for c in ("measurement_concept_id", "value_as_number", "unit_source_value",
                                             "unit_concept_id"))
    cand = [i for i, r in enumerate(table.rows) if i not in taken and r[ci] and int(r[ci]) in UNIT_CONCEPTS]
    n = int(math.floor(fraction * len(cand)))
    chosen = sorted(rng.choice(len(cand), size=n, replace=False).tolist()) if n else []
    out = []
    for j in chosen:
        i = cand[j]
        r = table.rows[i]
        c = int(r[ci])
        src = UNIT_CONCEPTS[c][1]
        r[vi] = repr(_to_source_unit(c, float(r[vi])))
        labels = UNIT_SOURCE_LABELS[src]
        r[ui] = labels[int(rng.integers(len(labels)))]
        r[uci] = str(UNIT_CONCEPT_IDS[src])
        taken.add(i)
        out.append(i)
    return out


# -------------------------------------------------------------------- corpus

def vocabulary_shares(table: _Table) -> Dict[str, float]:
    ci = table.ix[table.schema.primary_concept_column]
    c = Counter()
    for r in table.rows:
        v = r[ci]
        c[vocabulary_of(int(v)) if v and v != "0" else "invalid"] += 1
    n = sum(c.values()) or 1
    return {k: v / n for k, v in sorted(c.items())}


def _build_site(job) -> dict:
    prof, i, seed, defects, collision_fraction, out = job
    universe = Universe.build()
    cw = generate_crosswalk(universe, seed, collision_fraction)
    params = _value_params(universe)
    tables, realized = generate_site(prof, seed * 1000 + i, universe, i)
    shares = {t: vocabulary_shares(tables[t]) for t in MAPPED}
    doc = inject_defects(tables, defects, seed * 1000 + 500 + i, cw, params)
    doc["VISIT_DETAIL"] = {"fragmented_visit_groups": realized.pop("fragmented_visit_groups")}
    d = Path(out) / prof.site_id
    d.mkdir(parents=True, exist_ok=True)
    for name, t in tables.items():
        write_csv(d / f"{name}.csv", t.columns, t.rows)
    return {"profile": asdict(prof), "realized": realized, "vocabulary_shares": shares,
            "row_counts": {n: len(t.rows) for n, t in tables.items()}, "defects": doc}


def generate_corpus(out_dir, n_sites: int = 2, patients: int = 1000, seed: int = 0,
                    defects: Optional[DefectSpec] = None, collision_fraction: float = 0.1,
                    profiles: Optional[Sequence[SiteProfile]] = None, site_manifest: bool = True,
                    workers: int = 1) -> dict:
    """Write per-site tables, crosswalk, concept dictionary, tasks template and manifest."""
    from .parallel import Pool

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    universe = Universe.build()
    cw = generate_crosswalk(universe, seed, collision_fraction)
    cw.write(out / "crosswalk.csv")
    write_concept_dictionary(universe, cw, out / "concept_dictionary.csv")
    defects = defects or DefectSpec()
    defects.validate()
    profiles = list(profiles) if profiles else [
        SiteProfile(f"site{i:02d}", patients, DEFAULT_BASE + i * 1_000_000) for i in range(n_sites)]
    for prof in profiles:
        prof.validate()
    manifest = {"seed": seed, "reference_now": format_datetime(REFERENCE_NOW), "sites": {},
                "defect_spec": {**asdict(defects), "tables": list(defects.tables)},
                "crosswalk": {"entries": len(cw.rows), "collision_fraction": collision_fraction,
                              "colliding_sources": len(cw.partners)},
                "sepsis_concept_ids": [SEPSIS_CONCEPT],
                "unit_concepts": {str(k): v for k, v in UNIT_CONCEPTS.items()}}
    jobs = [(prof, i, seed, defects, collision_fraction, str(out)) for i, prof in enumerate(profiles)]
    with Pool(max(1, min(workers, len(jobs)))) as pool:
        docs = pool.map(_build_site, jobs)
    sites = []
    for prof, doc in zip(profiles, docs):
        manifest["sites"][prof.site_id] = doc
        # relative to the manifest, so a corpus can be moved as a whole
        sites.append({"site_id": prof.site_id, "path": prof.site_id})
    if site_manifest:
        (out / "sites.json").write_text(json.dumps({"sites": sites}, indent=2) + "\n")
    (out / "tasks.json").write_text(json.dumps({"sepsis_concept_ids": [SEPSIS_CONCEPT], "seed": seed,
                                                "tasks": list(_task_names())}, indent=2) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest) + "\n")
    return manifest


def _task_names():
    from .featurizer import TASK_NAMES

    return TASK_NAMES


# ---------------------------------------------------------------- bulk rows

BULK_COLUMNS = ["measurement_id", "person_id", "measurement_concept_id", "measurement_date",
                "measurement_datetime", "measurement_type_concept_id", "value_as_number", "unit_concept_id",
                "unit_source_value"]


def generate_bulk_measurements(path, n_rows: int, n_persons: int = 100_000, seed: int = 0,
                               batch: int = 1_000_000, duplicate_rate: float = 0.01) -> Path:
    """Large MEASUREMENT file for throughput runs, built with numpy in batches."""
    rng = np.random.default_rng(seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    concepts = np.arange(3_000_000, 3_000_400)
    mus = rng.uniform(0, 5, size=concepts.size)
    lo = _seconds(datetime(1995, 1, 1))
    hi = _seconds(SPAN_END)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(BULK_COLUMNS) + "\n")
        done = 0
        while done < n_rows:
            m = min(batch, n_rows - done)
            pid = DEFAULT_BASE + rng.integers(0, n_persons, size=m)
            ci = rng.integers(0, concepts.size, size=m)
            secs = rng.integers(lo, hi, size=m)
            dup = rng.random(m) < duplicate_rate
            # a duplicate repeats the previous row's key
            idx = np.arange(m)
            src = np.where(dup, np.maximum(idx - 1, 0), idx)
            pid, ci, secs = pid[src], ci[src], secs[src]
            vals = np.round(rng.lognormal(mus[ci], 0.3), 4)
            dts = (np.datetime64("1990-01-01T00:00:00") + secs.astype("timedelta64[s]")).astype(str)
            ids = np.arange(done + 1, done + m + 1)
            lines = [f"{i},{p},{c},{d[:10]},{d},32817,{v!r},8840,mg/dL\n"
                     for i, p, c, d, v in zip(ids.tolist(), pid.tolist(), concepts[ci].tolist(), dts.tolist(),
                                              vals.tolist())]
            fh.write("".join(lines))
            done += m
    return path

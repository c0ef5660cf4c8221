"""Synthetic cohorts, FHIR-line ingestion, task labels, binning, splits.

Real hospital data is credentialed, so cohorts are generated: each
patient carries latent binary health factors that shape both the emitted
concepts and the clinical outcomes, making the prediction tasks learnable
from token evidence alone.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .sequence import SECONDS_PER_DAY, TaskKind

EPOCH = dt.datetime(2015, 1, 1)

MORTALITY_WINDOW_DAYS = 32
READMISSION_WINDOW_DAYS = 30
LOS_THRESHOLD_DAYS = 7
LOS_CONTEXT_HOURS = 24

CONDITION_MARKERS = ("cond_marker_0", "cond_marker_1", "cond_marker_2")
RISK_MARKERS = ("risk_proc_0", "risk_med_0", "risk_lab_0")


@dataclass
class RawEvent:
    concept: str
    type: str  # 'P' | 'M' | 'L'
    timestamp: dt.datetime
    value: float | None = None  # labs only


@dataclass
class Visit:
    start_time: dt.datetime
    end_time: dt.datetime
    events: list


@dataclass
class PatientRecord:
    patient_id: str
    birth_date: dt.datetime
    death_date: dt.datetime | None
    visits: list


@dataclass
class TaskLabels:
    mortality: int | None = None
    los: int | None = None
    readmission: int | None = None
    c0: int | None = None
    c1: int | None = None
    c2: int | None = None
    los_truncation_time: dt.datetime | None = None
    readmission_excluded_visit: int | None = None

    def get(self, task: TaskKind):
        return {
            TaskKind.MOR: self.mortality, TaskKind.LOS: self.los,
            TaskKind.REA: self.readmission, TaskKind.C0: self.c0,
            TaskKind.C1: self.c1, TaskKind.C2: self.c2,
        }[task]


@dataclass
class SplitAssignment:
    pretrain: set
    finetune: set
    test: set
    ratios: tuple = (0.57, 0.28, 0.15)


@dataclass
class GeneratorConfig:
    n_patients: int = 200
    mean_visits: float = 3.0
    mean_events_per_visit: float = 8.0
    n_procedures: int = 30
    n_medications: int = 30
    n_labs: int = 20
    mortality_signal: float = 1.0
    condition_rate: float = 0.4
    risk_rate: float = 0.35
    mean_gap_days: float = 45.0
    seed: int = 0

    def validate(self):
        if self.n_patients < 0:
            raise DataError("n_patients must be non-negative")
        for p in (self.mortality_signal, self.condition_rate, self.risk_rate):
            if not 0.0 <= p <= 1.0:
                raise DataError("probabilities must lie in [0, 1]")
        if min(self.mean_visits, self.mean_events_per_visit, self.mean_gap_days) <= 0:
            raise DataError("distribution means must be positive")


def concept_catalog(cfg: GeneratorConfig):
    """Deterministic (concept, type) catalog for a generator config.

    Lab concepts are listed in binned form, five bins per code.
    """
    cat = [(m, "P" if m.startswith("risk_proc") else "M" if m.startswith("risk_med") else "L")
           for m in RISK_MARKERS]
    cat += [(m, "P") for m in CONDITION_MARKERS]
    cat += [(f"proc_{i}", "P") for i in range(cfg.n_procedures)]
    cat += [(f"med_{i}", "M") for i in range(cfg.n_medications)]
    for i in range(cfg.n_labs):
        cat += [(f"lab_{i}_bin{b}", "L") for b in range(5)]
    # risk_lab_0 is emitted pre-binned as well
    cat = [(c, t) for c, t in cat if c != "risk_lab_0"]
    cat += [(f"risk_lab_0_bin{b}", "L") for b in range(5)]
    return cat


def lab_codes(cfg: GeneratorConfig):
    return [f"lab_{i}" for i in range(cfg.n_labs)] + ["risk_lab_0"]


def generate_cohort(cfg: GeneratorConfig):
    """Deterministic synthetic cohort; per-patient randomness derives from
    (seed, patient index) so serial and parallel generation agree."""
    cfg.validate()
    return [_generate_patient(cfg, i) for i in range(cfg.n_patients)]


def _generate_patient(cfg: GeneratorConfig, idx: int) -> PatientRecord:
    rng = np.random.default_rng([cfg.seed, idx])
    s = cfg.mortality_signal
    risk = rng.random() < cfg.risk_rate
    conditions = rng.random(3) < cfg.condition_rate
    birth = EPOCH - dt.timedelta(days=float(rng.uniform(25, 85)) * 365.25)
    n_visits = 1 + rng.poisson(cfg.mean_visits - 1)
    start = EPOCH + dt.timedelta(days=float(rng.uniform(0, 365)))
    visits = []
    t = start
    for v in range(n_visits):
        duration = float(rng.exponential(2.5)) + 0.25
        n_events = 1 + rng.poisson(cfg.mean_events_per_visit - 1)
        offsets = np.sort(rng.uniform(0, duration * 0.95, size=n_events))
        offsets += np.arange(n_events) * 1e-4  # strictly increasing
        events = []
        for off in offsets:
            ts = t + dt.timedelta(days=float(off))
            events.append(_emit_event(rng, cfg, risk, ts))
        end = t + dt.timedelta(days=duration)
        for j, c in enumerate(conditions):
            if c and rng.random() < (0.6 if v == 0 else 0.25):
                ts = t + dt.timedelta(days=float(rng.uniform(0, duration * 0.95)), seconds=1 + j)
                events.append(RawEvent(CONDITION_MARKERS[j], "P", ts))
        events.sort(key=lambda e: e.timestamp)
        visits.append(Visit(t, end, events))
        t = end + dt.timedelta(days=float(rng.exponential(cfg.mean_gap_days)) + 1.0)
    death = None
    last_event_ts = visits[-1].events[-1].timestamp
    p_death_soon = 0.02 + 0.9 * s * risk
    if rng.random() < p_death_soon:
        death = last_event_ts + dt.timedelta(days=float(rng.uniform(1, 31)))
    elif rng.random() < 0.15:
        death = last_event_ts + dt.timedelta(days=float(rng.uniform(40, 400)))
    return PatientRecord(f"p{idx:06d}", birth, death, visits)


def _emit_event(rng, cfg: GeneratorConfig, risk: bool, ts: dt.datetime) -> RawEvent:
    if risk and rng.random() < 0.30 * cfg.mortality_signal:
        m = RISK_MARKERS[rng.integers(3)]
        if m == "risk_lab_0":
            return RawEvent(m, "L", ts, value=float(rng.normal(2.0, 1.0)))
        return RawEvent(m, m[5].upper(), ts)
    kind = rng.random()
    if kind < 0.35:
        return RawEvent(f"proc_{rng.integers(cfg.n_procedures)}", "P", ts)
    if kind < 0.70:
        return RawEvent(f"med_{rng.integers(cfg.n_medications)}", "M", ts)
    return RawEvent(f"lab_{rng.integers(cfg.n_labs)}", "L", ts, value=float(rng.normal()))


# ---------------------------------------------------------------------------
# lab binning

def bin_lab_value(value: float, edges) -> int:
    """Index of the half-open interval of `value` among 4 ascending edges."""
    if np.isnan(value):
        raise DataError("lab value is NaN")
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise DataError("bin edges must be strictly ascending")
    i = 0
    while i < len(edges) and value >= edges[i]:
        i += 1
    return i


def compute_lab_bin_edges(records):
    """Per-lab-code quintile edges estimated over the given records."""
    values = {}
    for rec in records:
        for visit in rec.visits:
            for ev in visit.events:
                if ev.type == "L" and ev.value is not None:
                    values.setdefault(ev.concept, []).append(ev.value)
    edges = {}
    for code, vals in values.items():
        q = np.quantile(np.array(vals), [0.2, 0.4, 0.6, 0.8])
        # degenerate distributions collapse quantiles; nudge apart
        for i in range(1, 4):
            if q[i] <= q[i - 1]:
                q[i] = q[i - 1] + 1e-9
        edges[code] = tuple(float(x) for x in q)
    return edges


def apply_lab_binning(record: PatientRecord, edges) -> PatientRecord:
    """Rewrite lab event concepts to `<code>_bin<i>`; non-lab events pass through."""
    visits = []
    for visit in record.visits:
        events = []
        for ev in visit.events:
            if ev.type == "L" and ev.value is not None and not ev.concept.endswith(
                ("_bin0", "_bin1", "_bin2", "_bin3", "_bin4")
            ):
                e = edges.get(ev.concept)
                b = bin_lab_value(ev.value, e) if e else 2
                events.append(RawEvent(f"{ev.concept}_bin{b}", "L", ev.timestamp, ev.value))
            else:
                events.append(ev)
        visits.append(Visit(visit.start_time, visit.end_time, events))
    return PatientRecord(record.patient_id, record.birth_date, record.death_date, visits)


# ---------------------------------------------------------------------------
# task labels

def derive_labels(record: PatientRecord) -> TaskLabels:
    """Derive the six binary task labels from calendar arithmetic.

    Mortality: death within 32 days of the last recorded event. Length of
    stay: last visit longer than 7 days, judged from its first 24 hours
    (absent if the visit spans less than 24 hours). Readmission: gap
    between the last visit and its predecessor under 30 days, with the
    last visit excluded from the model input.
    """
    labels = TaskLabels()
    last_visit = record.visits[-1]
    last_event_ts = max(e.timestamp for e in last_visit.events) if last_visit.events else last_visit.end_time
    if record.death_date is None:
        labels.mortality = 0
    else:
        gap = (record.death_date - last_event_ts).total_seconds() / SECONDS_PER_DAY
        labels.mortality = 1 if gap < MORTALITY_WINDOW_DAYS else 0
    span_h = (last_visit.end_time - last_visit.start_time).total_seconds() / 3600.0
    if span_h >= LOS_CONTEXT_HOURS:
        stay_days = (last_visit.end_time - last_visit.start_time).total_seconds() / SECONDS_PER_DAY
        labels.los = 1 if stay_days > LOS_THRESHOLD_DAYS else 0
        labels.los_truncation_time = last_visit.start_time + dt.timedelta(hours=LOS_CONTEXT_HOURS)
    if len(record.visits) >= 2:
        prev = record.visits[-2]
        gap_days = int(
            (last_visit.start_time - prev.end_time).total_seconds() // SECONDS_PER_DAY
        )
        labels.readmission = 1 if gap_days < READMISSION_WINDOW_DAYS else 0
        labels.readmission_excluded_visit = len(record.visits) - 1
    present = set()
    for visit in record.visits:
        for ev in visit.events:
            present.add(ev.concept)
    labels.c0 = int(CONDITION_MARKERS[0] in present)
    labels.c1 = int(CONDITION_MARKERS[1] in present)
    labels.c2 = int(CONDITION_MARKERS[2] in present)
    return labels


def prepare_task_record(record: PatientRecord, task: TaskKind, labels: TaskLabels) -> PatientRecord:
    """Task-specific preprocessing before encoding and task-token substitution."""
    if task == TaskKind.LOS:
        cut = labels.los_truncation_time
        if cut is None:
            raise DataError("length-of-stay label undefined for this record")
        visits = [Visit(v.start_time, v.end_time, list(v.events)) for v in record.visits[:-1]]
        last = record.visits[-1]
        kept = [e for e in last.events if e.timestamp <= cut]
        visits.append(Visit(last.start_time, min(last.end_time, cut), kept))
        return PatientRecord(record.patient_id, record.birth_date, record.death_date, visits)
    if task == TaskKind.REA:
        if len(record.visits) < 2:
            raise DataError("readmission label requires at least two visits")
        return PatientRecord(
            record.patient_id, record.birth_date, record.death_date, list(record.visits[:-1])
        )
    return record


# ---------------------------------------------------------------------------
# splits

def split_cohort(cohort, ratios=(0.57, 0.28, 0.15), seed=0) -> SplitAssignment:
    """Seeded shuffle, then contiguous partition by rounded ratios."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("split ratios must sum to 1")
    n = len(cohort)
    if n < 3:
        raise DataError("cohort too small to split three ways")
    ids = sorted(r.patient_id for r in cohort)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    shuffled = [ids[i] for i in perm]
    n1 = int(round(ratios[0] * n))
    n2 = int(round(ratios[1] * n))
    if n1 == 0 or n2 == 0 or n1 + n2 >= n:
        n1, n2 = n - 2, 1  # degenerate tiny cohorts: 1 per bucket minimum
    return SplitAssignment(
        set(shuffled[:n1]), set(shuffled[n1 : n1 + n2]), set(shuffled[n1 + n2 :]),
        tuple(ratios),
    )


# ---------------------------------------------------------------------------
# FHIR-flavored newline-delimited JSON

def _iso(ts: dt.datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"


def _parse_iso(s: str) -> dt.datetime:
    return dt.datetime.strptime(s.rstrip("Z"), "%Y-%m-%dT%H:%M:%S.%f" if "." in s else "%Y-%m-%dT%H:%M:%S")


def write_fhir_lines(records, path) -> None:
    """Persist a cohort as one FHIR-flavored JSON resource per line."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            patient = {"resourceType": "Patient", "id": rec.patient_id,
                       "birthDate": _iso(rec.birth_date)}
            if rec.death_date is not None:
                patient["deceasedDateTime"] = _iso(rec.death_date)
            f.write(json.dumps(patient) + "\n")
            for i, visit in enumerate(rec.visits):
                enc_id = f"{rec.patient_id}-e{i}"
                f.write(json.dumps({
                    "resourceType": "Encounter", "id": enc_id, "subject": rec.patient_id,
                    "periodStart": _iso(visit.start_time), "periodEnd": _iso(visit.end_time),
                }) + "\n")
                for ev in visit.events:
                    if ev.type == "P":
                        f.write(json.dumps({
                            "resourceType": "Procedure", "subject": rec.patient_id,
                            "encounter": enc_id, "code": ev.concept,
                            "performedDateTime": _iso(ev.timestamp)}) + "\n")
                    elif ev.type == "M":
                        f.write(json.dumps({
                            "resourceType": "MedicationAdministration", "subject": rec.patient_id,
                            "encounter": enc_id, "code": ev.concept,
                            "effectiveDateTime": _iso(ev.timestamp)}) + "\n")
                    else:
                        obs = {"resourceType": "Observation", "subject": rec.patient_id,
                               "encounter": enc_id, "code": ev.concept,
                               "effectiveDateTime": _iso(ev.timestamp)}
                        if ev.value is not None:
                            obs["valueQuantity"] = ev.value
                        f.write(json.dumps(obs) + "\n")


def ingest_fhir_lines(lines):
    """Group FHIR-flavored JSON lines into patient records.

    Returns (records, skipped_count); unknown resource types are skipped.
    """
    patients = {}
    encounters = {}
    pending = []
    skipped = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from e
        rt = obj.get("resourceType")
        if rt == "Patient":
            death = obj.get("deceasedDateTime")
            patients[obj["id"]] = PatientRecord(
                obj["id"], _parse_iso(obj["birthDate"]),
                _parse_iso(death) if death else None, [],
            )
        elif rt == "Encounter":
            encounters[obj["id"]] = (obj["subject"], Visit(
                _parse_iso(obj["periodStart"]), _parse_iso(obj["periodEnd"]), []))
        elif rt == "Procedure":
            pending.append((lineno, obj["encounter"],
                            RawEvent(obj["code"], "P", _parse_iso(obj["performedDateTime"]))))
        elif rt == "MedicationAdministration":
            pending.append((lineno, obj["encounter"],
                            RawEvent(obj["code"], "M", _parse_iso(obj["effectiveDateTime"]))))
        elif rt == "Observation":
            pending.append((lineno, obj["encounter"],
                            RawEvent(obj["code"], "L", _parse_iso(obj["effectiveDateTime"]),
                                     obj.get("valueQuantity"))))
        else:
            skipped += 1
    for lineno, enc_id, ev in pending:
        if enc_id not in encounters:
            raise DataError(f"line {lineno}: event references unknown encounter {enc_id!r}")
        encounters[enc_id][1].events.append(ev)
    for enc_id in sorted(encounters):
        subject, visit = encounters[enc_id]
        if subject not in patients:
            raise DataError(f"encounter {enc_id!r} references unknown patient {subject!r}")
        visit.events.sort(key=lambda e: e.timestamp)
        patients[subject].visits.append(visit)
    records = []
    for pid in sorted(patients):
        rec = patients[pid]
        rec.visits.sort(key=lambda v: v.start_time)
        records.append(rec)
    return records, skipped

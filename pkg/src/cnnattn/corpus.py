"""Cohort construction and outcome labels from MIMIC-III shaped CSV tables.

Tables are read with the MIMIC-III v1.4 column names (upper case). Only the
columns listed in ``REQUIRED_COLUMNS`` are needed; extra columns are ignored.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

OUTCOMES = ("bounceback", "readm30", "mort30", "mort_hosp")
COHORT_SCHEMA = "cnnattn-cohort/1"
MIN_NOTES = 3
MIN_AGE = 18
OBFUSCATED_AGE = 150  # MIMIC shifts DOB of patients over 89 so ages come out near 300
WINDOW = pd.Timedelta(days=30)

TABLE_FILES = {
    "notes": "NOTEEVENTS.csv",
    "stays": "ICUSTAYS.csv",
    "admissions": "ADMISSIONS.csv",
    "patients": "PATIENTS.csv",
    "diagnoses": "DIAGNOSES_ICD.csv",
}
REQUIRED_COLUMNS = {
    "notes": ["SUBJECT_ID", "HADM_ID", "CHARTTIME", "TEXT"],
    "stays": ["SUBJECT_ID", "HADM_ID", "ICUSTAY_ID", "INTIME", "OUTTIME"],
    "admissions": ["SUBJECT_ID", "HADM_ID", "ADMITTIME", "DISCHTIME", "DEATHTIME"],
    "patients": ["SUBJECT_ID", "DOB", "DOD"],
    "diagnoses": ["SUBJECT_ID", "HADM_ID", "ICD9_CODE"],
}
TIME_COLUMNS = {
    "notes": ["CHARTTIME", "CHARTDATE"],
    "stays": ["INTIME", "OUTTIME"],
    "admissions": ["ADMITTIME", "DISCHTIME", "DEATHTIME"],
    "patients": ["DOB", "DOD"],
    "diagnoses": [],
}
ID_COLUMNS = ["SUBJECT_ID", "HADM_ID", "ICUSTAY_ID"]


class SchemaError(ValueError):
    """A table is missing a required column or has unusable rows."""


@dataclass
class Tables:
    notes: pd.DataFrame
    stays: pd.DataFrame
    admissions: pd.DataFrame
    patients: pd.DataFrame
    diagnoses: pd.DataFrame | None = None


@dataclass
class CohortRecord:
    icustay_id: int
    subject_id: int
    hadm_id: int
    narrative_text: str
    labels: dict
    n_notes: int
    icd_codes: list = field(default_factory=list)
    ids: list | None = None

    def to_json(self) -> str:
        d = {
            "icustay_id": self.icustay_id,
            "subject_id": self.subject_id,
            "hadm_id": self.hadm_id,
            "labels": self.labels,
            "n_notes": self.n_notes,
            "icd_codes": self.icd_codes,
            "narrative_text": self.narrative_text,
        }
        if self.ids is not None:
            d["ids"] = " ".join(map(str, self.ids))
        return json.dumps(d, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CohortRecord":
        d = json.loads(line)
        ids = d.get("ids")
        return cls(
            icustay_id=int(d["icustay_id"]),
            subject_id=int(d["subject_id"]),
            hadm_id=int(d["hadm_id"]),
            narrative_text=d["narrative_text"],
            labels={k: int(d["labels"][k]) for k in OUTCOMES},
            n_notes=int(d["n_notes"]),
            icd_codes=list(d.get("icd_codes", [])),
            ids=[int(t) for t in ids.split()] if ids else None,
        )


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def _read_table(path: Path, kind: str) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in REQUIRED_COLUMNS[kind] if c not in df.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing required column {missing[0]}")
    for c in ID_COLUMNS:
        if c in df.columns:
            raw = df[c].str.strip()
            parsed = pd.to_numeric(raw.where(raw != ""), errors="coerce")
            bad = np.nonzero((raw != "").to_numpy() & parsed.isna().to_numpy())[0]
            if bad.size:
                lines = ", ".join(str(i + 2) for i in bad[:5])  # +2: header line, 1-based
                raise SchemaError(f"{path.name}: non-integer {c} on line(s) {lines}")
            df[c] = parsed.astype("Int64")
    if kind == "notes" and "CHARTDATE" not in df.columns:
        df["CHARTDATE"] = ""
    flags = np.zeros(len(df), dtype=bool)
    for c in TIME_COLUMNS[kind]:
        raw = df[c].str.strip()
        parsed = pd.to_datetime(raw.where(raw != ""), errors="coerce", format="ISO8601")
        flags |= (raw != "").to_numpy() & parsed.isna().to_numpy()
        df[c] = parsed
    df["TIME_FLAG"] = flags
    if flags.any():
        bad = (np.nonzero(flags)[0] + 2)[:5].tolist()  # +2: header line, 1-based
        logger.warning("%s: %d rows with unparseable timestamps (lines %s...)", path.name, flags.sum(), bad)
    if kind == "notes":
        # notes without a time of day fall back to the end of their chart date
        fallback = df["CHARTDATE"] + pd.Timedelta(hours=23, minutes=59, seconds=59)
        df["CHART_TS"] = df["CHARTTIME"].fillna(fallback)
    return df


def load_tables(directory) -> Tables:
    """Read NOTEEVENTS, ICUSTAYS, ADMISSIONS, PATIENTS (and DIAGNOSES_ICD if present)."""
    directory = Path(directory)
    frames = {}
    for kind, fname in TABLE_FILES.items():
        path = directory / fname
        if not path.exists() and (directory / (fname + ".gz")).exists():
            path = directory / (fname + ".gz")  # the distributed MIMIC-III layout
        if not path.exists():
            if kind == "diagnoses":
                frames[kind] = None
                continue
            raise FileNotFoundError(path)
        frames[kind] = _read_table(path, kind)
    return Tables(**frames)


# --------------------------------------------------------------------------
# cohort and labels
# --------------------------------------------------------------------------

def age_years(born: pd.Timestamp, at: pd.Timestamp) -> float:
    # calendar arithmetic; shifted MIMIC birth dates overflow timedelta64[ns]
    years = at.year - born.year - ((at.month, at.day) < (born.month, born.day))
    return float(years)


def _death_times(tables: Tables) -> dict[int, pd.Timestamp]:
    """Precise in-hospital DEATHTIME when recorded, else the patient's DOD."""
    deaths = {}
    for sid, dod in zip(tables.patients["SUBJECT_ID"], tables.patients["DOD"]):
        if pd.notna(dod):
            deaths[int(sid)] = dod
    adm = tables.admissions.dropna(subset=["DEATHTIME"])
    for sid, dt in zip(adm["SUBJECT_ID"], adm["DEATHTIME"]):
        sid = int(sid)
        # an exact timestamp beats a date-only DOD
        deaths[sid] = dt
    return deaths


class _Lookups:
    def __init__(self, tables: Tables):
        self.admissions = {int(r.HADM_ID): r for r in tables.admissions.itertuples(index=False)
                           if pd.notna(r.HADM_ID)}
        self.dob = {int(s): d for s, d in zip(tables.patients["SUBJECT_ID"], tables.patients["DOB"])}
        self.death = _death_times(tables)
        self.stays_by_subject: dict[int, list] = {}
        for r in tables.stays.itertuples(index=False):
            self.stays_by_subject.setdefault(int(r.SUBJECT_ID), []).append(r)


def derive_labels(stay, tables: Tables, _lk: _Lookups | None = None) -> dict:
    """Four binary outcomes for one ICU stay.

    Windows are half-open: (out_time, out_time + 30 days] for readmission and
    death, (out_time, hospital discharge] for bounceback.
    """
    lk = _lk or _Lookups(tables)
    hadm = int(stay.HADM_ID)
    adm = lk.admissions.get(hadm)
    if adm is None:
        raise SchemaError(f"ICU stay {stay.ICUSTAY_ID}: admission {hadm} not found")
    out = stay.OUTTIME
    disch = adm.DISCHTIME
    sid = int(stay.SUBJECT_ID)
    bounce = readm = 0
    for other in lk.stays_by_subject.get(sid, []):
        if other.ICUSTAY_ID == stay.ICUSTAY_ID or pd.isna(other.INTIME):
            continue
        t = other.INTIME
        if t > out:
            if pd.notna(disch) and t <= disch:
                bounce = 1
            if t <= out + WINDOW:
                readm = 1
    death = lk.death.get(sid)
    mort30 = int(death is not None and out < death <= out + WINDOW)
    mort_hosp = int(death is not None and pd.notna(disch) and death <= disch)
    return {"bounceback": bounce, "readm30": readm, "mort30": mort30, "mort_hosp": mort_hosp}


FUNNEL_STEPS = ("icu_stays", "minor", "died_in_icu", "missing_times", "too_few_notes", "cohort")


def build_cohort(tables: Tables) -> tuple[list[CohortRecord], dict]:
    """Apply the four exclusion rules in order and attach narratives and labels.

    Returns the records (sorted by icustay id) and a funnel dict with the
    number of stays removed by each rule.
    """
    lk = _Lookups(tables)
    notes = tables.notes.dropna(subset=["HADM_ID", "CHART_TS"])
    notes = notes.sort_values(["HADM_ID", "CHART_TS"], kind="mergesort")
    notes_by_hadm = {int(h): (g["CHART_TS"].to_numpy(), g["TEXT"].tolist())
                     for h, g in notes.groupby("HADM_ID", sort=False)}
    icd_by_hadm: dict[int, list] = {}
    if tables.diagnoses is not None:
        for h, code in zip(tables.diagnoses["HADM_ID"], tables.diagnoses["ICD9_CODE"]):
            if pd.notna(h) and code:
                icd_by_hadm.setdefault(int(h), []).append(code)

    funnel = dict.fromkeys(FUNNEL_STEPS, 0)
    records = []
    stays = tables.stays.sort_values("ICUSTAY_ID", kind="mergesort")
    funnel["icu_stays"] = len(stays)
    for stay in stays.itertuples(index=False):
        sid = int(stay.SUBJECT_ID)
        adm = lk.admissions.get(int(stay.HADM_ID)) if pd.notna(stay.HADM_ID) else None
        dob = lk.dob.get(sid)
        # 1. minors
        if adm is not None and pd.notna(adm.ADMITTIME) and dob is not None and pd.notna(dob):
            age = age_years(dob, adm.ADMITTIME)
            if age < MIN_AGE:
                funnel["minor"] += 1
                continue
        # 2. death inside the ICU window (inclusive)
        death = lk.death.get(sid)
        if death is not None and pd.notna(stay.INTIME) and pd.notna(stay.OUTTIME) \
                and stay.INTIME <= death <= stay.OUTTIME:
            funnel["died_in_icu"] += 1
            continue
        # 3. missing admission/discharge time
        if pd.isna(stay.INTIME) or pd.isna(stay.OUTTIME):
            funnel["missing_times"] += 1
            continue
        # 4. at least three notes charted no later than ICU discharge
        times, texts = notes_by_hadm.get(int(stay.HADM_ID), (np.array([], dtype="datetime64[ns]"), []))
        n_before = int(np.searchsorted(times, np.datetime64(stay.OUTTIME), side="right"))
        if n_before < MIN_NOTES:
            funnel["too_few_notes"] += 1
            continue
        labels = derive_labels(stay, tables, lk)
        records.append(CohortRecord(
            icustay_id=int(stay.ICUSTAY_ID),
            subject_id=sid,
            hadm_id=int(stay.HADM_ID),
            narrative_text="\n".join(texts[:n_before]),
            labels=labels,
            n_notes=n_before,
            icd_codes=sorted(set(icd_by_hadm.get(int(stay.HADM_ID), []))),
        ))
    funnel["cohort"] = len(records)
    return records, funnel


def prevalence(records: list[CohortRecord]) -> dict:
    return {k: sum(r.labels[k] for r in records) for k in OUTCOMES}


# --------------------------------------------------------------------------
# cohort file
# --------------------------------------------------------------------------

def write_cohort(records: list[CohortRecord], path) -> None:
    """Line-delimited JSON; the first line is a schema header."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"schema": COHORT_SCHEMA, "n_records": len(records)}) + "\n")
        for r in records:
            fh.write(r.to_json() + "\n")


def read_cohort(path) -> list[CohortRecord]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline() or "{}")
        if header.get("schema") != COHORT_SCHEMA:
            raise SchemaError(f"{path}: expected schema {COHORT_SCHEMA}, got {header.get('schema')}")
        records = [CohortRecord.from_json(line) for line in fh if line.strip()]
    if len(records) != header.get("n_records", len(records)):
        raise SchemaError(f"{path}: header announces {header['n_records']} records, found {len(records)}")
    return records

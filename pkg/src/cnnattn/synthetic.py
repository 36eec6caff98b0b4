"""Synthetic MIMIC-III shaped tables with planted outcome phrases.

Every subject gets one index hospitalisation whose first ICU stay is the
only stay that can enter the cohort. Outcomes are sampled first and the
timeline (readmissions, discharge, death) is laid out to realise them, so
the labels come back out of the real cohort code rather than being copied.

Witness stays are arranged so they never join the cohort themselves:

* a readmission inside the index hospitalisation is written without an
  OUTTIME (dropped by the missing-times rule),
* a readmission in a later hospitalisation carries only two notes (dropped
  by the note-count rule).

A few subjects are deliberately minors, die in the ICU, lack an ICU
discharge time or have too few notes, so every cohort filter fires.
"""

from __future__ import annotations

import datetime as dt
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .corpus import OUTCOMES, TABLE_FILES

BASE_WORDS = """
patient admitted with acute respiratory distress stable overnight afebrile vitals reviewed
denies chest pain shortness breath cough nausea vomiting diarrhea abdomen soft nontender
lungs clear bilaterally heart regular rhythm murmur noted extremities warm edema trace
plan continue current management monitor labs daily repeat imaging tomorrow morning
neuro alert oriented follow commands moves all extremities pupils equal reactive
cardiac telemetry sinus rhythm rate controlled pressure within goal mean arterial
renal creatinine improving urine output adequate electrolytes repleted potassium magnesium
heme hematocrit stable transfused unit blood platelets normal coags pending
endocrine glucose sliding scale insulin well controlled thyroid function
respiratory weaned oxygen nasal cannula saturation remains above baseline
skin intact dressing dry clean wound healing appropriately pressure ulcer prevention
nutrition tolerating diet advanced regular appetite fair tube feeds held
social lives home spouse daughter involved updated phone call questions answered
pain controlled oral medication ambulating physical therapy evaluated walker
assessment gradually improving expected transfer floor once criteria met
chest xray shows small effusion atelectasis without consolidation unchanged prior
ekg without acute changes troponin negative lactate trending down bicarbonate
antibiotics day three cultures negative final sensitivity wbc normalizing
sedation weaned extubated yesterday tolerated well speech swallow evaluation
""".split()

SIGNAL_PHRASES = {
    "bounceback": ["central line placed", "id consult following", "picc line infection"],
    "readm30": ["multiple previous admissions", "end stage liver", "recurrent hepatic encephalopathy"],
    "mort30": ["metastatic disease progression", "poor prognosis discussed", "hospice referral planned"],
    "mort_hosp": ["made cmo today", "comfort measures only", "withdrawal support requested"],
}

# text only found in notes charted after ICU discharge
POST_DISCHARGE_WORDS = ["transferred", "wardnote", "floorteam", "stepdown"]

GENERIC_ICD = ["4019", "4280", "42731", "5849", "25000", "51881", "5990", "2724", "2859", "486",
               "2762", "2449", "41401", "V5861", "5070"]
OUTCOME_ICD = {"bounceback": "99662", "readm30": "5715", "mort30": "1970", "mort_hosp": "V667"}

TIME_FMT = "%Y-%m-%d %H:%M:%S"
EPOCH = dt.datetime(2100, 1, 1)


@dataclass
class SyntheticSpec:
    n_subjects: int = 500
    signal_strength: float = 0.9
    seed: int = 0
    prevalence: float = 0.25
    base_vocab: list = field(default_factory=lambda: list(BASE_WORDS))
    signal_phrases: dict = field(default_factory=lambda: {k: list(v) for k, v in SIGNAL_PHRASES.items()})
    # fraction of subjects routed to each exclusion rule
    excluded_fraction: float = 0.04

    def __post_init__(self):
        base = set(self.base_vocab)
        for outcome, phrases in self.signal_phrases.items():
            if outcome not in OUTCOMES:
                raise ValueError(f"unknown outcome {outcome!r}")
            for p in phrases:
                clash = base.intersection(p.split())
                if clash:
                    raise ValueError(f"signal phrase {p!r} shares words with the base vocabulary: {sorted(clash)}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _fmt(t: dt.datetime) -> str:
    return t.strftime(TIME_FMT)


def _feasible(b: int, r: int, m30: int, mh: int) -> bool:
    if mh and r and not b:
        return False  # readmission after an in-hospital death
    if b and not r and m30:
        return False  # late bounceback leaves no room for death within 30 days
    return True


class _Writer:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.notes, self.stays, self.adms, self.pats, self.dx = [], [], [], [], []
        self.next_hadm = 100000
        self.next_icu = 200000
        self.next_note = 1

    # text ---------------------------------------------------------------
    def sentence(self) -> str:
        rng = self.rng
        words = list(rng.choice(self.spec.base_vocab, size=int(rng.integers(4, 9))))
        roll = rng.random()
        if roll < 0.15:
            words.insert(int(rng.integers(0, len(words))), f"bp {rng.integers(90, 160)}/{rng.integers(50, 95)}")
        elif roll < 0.25:
            words.insert(int(rng.integers(0, len(words))), f"hr {rng.integers(55, 120)}")
        elif roll < 0.30:
            words.insert(0, f"[**Known lastname {rng.integers(100, 9999)}**]")
        if rng.random() < 0.3:
            k = int(rng.integers(1, len(words)))
            words[k - 1] = words[k - 1] + ","
        return " ".join(words).capitalize() + "."

    def note_text(self, phrases: list[str], extra: list[str] = ()) -> str:
        sents = [self.sentence() for _ in range(int(self.rng.integers(3, 6)))]
        for p in list(phrases) + list(extra):
            sents.insert(int(self.rng.integers(0, len(sents) + 1)), p.capitalize() + ".")
        return " ".join(sents)

    def signal_for(self, outcomes: dict) -> list[str]:
        picked = []
        for o in OUTCOMES:
            if outcomes.get(o) and self.rng.random() < self.spec.signal_strength:
                choices = self.spec.signal_phrases.get(o, [])
                if choices:
                    picked.append(str(self.rng.choice(choices)))
        return picked

    # rows ---------------------------------------------------------------
    def add_note(self, sid, hadm, t: dt.datetime, text: str, category="Nursing/other"):
        self.notes.append({
            "ROW_ID": self.next_note, "SUBJECT_ID": sid, "HADM_ID": hadm,
            "CHARTDATE": t.strftime("%Y-%m-%d"), "CHARTTIME": _fmt(t),
            "STORETIME": "", "CATEGORY": category, "DESCRIPTION": "Report", "CGID": "",
            "ISERROR": "", "TEXT": text,
        })
        self.next_note += 1

    def add_admission(self, sid, admit, disch, death=None) -> int:
        hadm = self.next_hadm
        self.next_hadm += 1
        self.adms.append({
            "ROW_ID": len(self.adms) + 1, "SUBJECT_ID": sid, "HADM_ID": hadm,
            "ADMITTIME": _fmt(admit), "DISCHTIME": _fmt(disch),
            "DEATHTIME": _fmt(death) if death is not None else "",
            "ADMISSION_TYPE": "EMERGENCY", "HOSPITAL_EXPIRE_FLAG": int(death is not None),
        })
        return hadm

    def add_stay(self, sid, hadm, intime, outtime) -> int:
        icu = self.next_icu
        self.next_icu += 1
        self.stays.append({
            "ROW_ID": len(self.stays) + 1, "SUBJECT_ID": sid, "HADM_ID": hadm, "ICUSTAY_ID": icu,
            "DBSOURCE": "metavision", "FIRST_CAREUNIT": "MICU",
            "INTIME": _fmt(intime) if intime is not None else "",
            "OUTTIME": _fmt(outtime) if outtime is not None else "",
        })
        return icu

    def add_codes(self, sid, hadm, outcomes: dict):
        codes = list(self.rng.choice(GENERIC_ICD, size=int(self.rng.integers(2, 5)), replace=False))
        for o, flag in outcomes.items():
            if flag and self.rng.random() < 0.7:
                codes.append(OUTCOME_ICD[o])
        for seq, c in enumerate(codes, 1):
            self.dx.append({"ROW_ID": len(self.dx) + 1, "SUBJECT_ID": sid, "HADM_ID": hadm,
                            "SEQ_NUM": seq, "ICD9_CODE": c})

    def add_patient(self, sid, dob: dt.datetime, dod: dt.datetime | None):
        self.pats.append({
            "ROW_ID": len(self.pats) + 1, "SUBJECT_ID": sid, "GENDER": str(self.rng.choice(["M", "F"])),
            "DOB": _fmt(dob), "DOD": dod.strftime("%Y-%m-%d 00:00:00") if dod is not None else "",
            "EXPIRE_FLAG": int(dod is not None),
        })

    # subjects -----------------------------------------------------------
    def subject(self, sid: int, kind: str):
        rng = self.rng
        days = dt.timedelta(days=1)
        t0 = EPOCH + dt.timedelta(days=int(rng.integers(0, 30000)), minutes=int(rng.integers(0, 1440)))
        if kind == "minor":
            age = int(rng.integers(5, 18))
        elif rng.random() < 0.05:
            age = 300  # shifted DOB for patients over 89
        else:
            age = int(rng.integers(25, 89))
        dob = dt.datetime(t0.year - age, t0.month, min(t0.day, 28)) - dt.timedelta(days=int(rng.integers(1, 300)))
        icu_in = t0 + dt.timedelta(hours=int(rng.integers(2, 24)))
        o = icu_in + dt.timedelta(hours=int(rng.integers(24, 120)))

        outcomes = dict.fromkeys(OUTCOMES, 0)
        if kind == "index":
            while True:
                flags = (rng.random(4) < self.spec.prevalence).astype(int)
                if _feasible(*flags):
                    break
            outcomes = dict(zip(OUTCOMES, map(int, flags)))
        b, r, m30, mh = (outcomes[k] for k in OUTCOMES)

        death = None
        in_hospital_death = False
        witness_same = None
        late_readmit = None
        if b:
            witness_same = o + (1 * days if r else 33 * days)
        if b and r:
            d1 = o + (35 * days if (mh and not m30) else 3 * days)
        elif b:
            d1 = o + 36 * days
        elif mh and not m30:
            d1 = o + 35 * days
        else:
            d1 = o + 2 * days
        if mh:
            death, in_hospital_death = d1, True
        elif m30:
            death = o + (20 * days if (r or b) else 10 * days)
        if r and not b:
            late_readmit = o + 5 * days
        elif not (r or b or mh or m30) and kind == "index" and rng.random() < 0.1:
            late_readmit = o + 31 * days  # just outside the 30-day window

        if kind == "icu_death":
            death = icu_in + (o - icu_in) / 2
            in_hospital_death = True
            d1 = death
        hadm = self.add_admission(sid, t0, d1, death if in_hospital_death else None)
        self.add_stay(sid, hadm, icu_in, None if kind == "missing_times" else o)
        self.add_codes(sid, hadm, outcomes)

        n_pre = 2 if kind == "few_notes" else int(rng.integers(3, 7))
        span = (o - t0).total_seconds()
        offsets = np.sort(rng.uniform(0.05, 0.99, size=n_pre)) * span
        times = [t0 + dt.timedelta(seconds=int(s)) for s in offsets]
        if kind == "index" and rng.random() < 0.1:
            times[-1] = o  # charted exactly at ICU discharge: still counts
        for t in times:
            self.add_note(sid, hadm, t, self.note_text(self.signal_for(outcomes)))
        # notes after ICU discharge never reach the narrative
        last = min(d1, witness_same) if witness_same is not None else d1
        for j in range(int(rng.integers(1, 3)) + (3 if kind == "few_notes" else 0)):
            t = o + (last - o) * (0.2 + 0.15 * j) if last > o else o + dt.timedelta(minutes=30 * (j + 1))
            self.add_note(sid, hadm, t, self.note_text([], [str(rng.choice(POST_DISCHARGE_WORDS))]))
        if witness_same is not None:
            self.add_stay(sid, hadm, witness_same, None)
        if late_readmit is not None:
            a_in = late_readmit
            s_in = a_in + dt.timedelta(hours=6)
            s_out = s_in + 2 * days
            hadm2 = self.add_admission(sid, a_in, s_out + 2 * days)
            self.add_stay(sid, hadm2, s_in, s_out)
            self.add_codes(sid, hadm2, {})
            for k in range(2):
                self.add_note(sid, hadm2, s_in + dt.timedelta(hours=3 + 10 * k), self.note_text([]))
        self.add_patient(sid, dob, death)
        return outcomes

    def frames(self) -> dict[str, pd.DataFrame]:
        return {
            "notes": pd.DataFrame(self.notes),
            "stays": pd.DataFrame(self.stays),
            "admissions": pd.DataFrame(self.adms),
            "patients": pd.DataFrame(self.pats),
            "diagnoses": pd.DataFrame(self.dx),
        }


EXCLUSION_KINDS = ("minor", "icu_death", "missing_times", "few_notes")


def generate_synthetic(spec: SyntheticSpec) -> tuple[dict[str, pd.DataFrame], dict[int, dict]]:
    """Build the five tables plus the intended labels of each index subject."""
    rng = np.random.default_rng(spec.seed)
    w = _Writer(spec, rng)
    n_excluded = int(round(spec.excluded_fraction * spec.n_subjects))
    kinds = ["index"] * (spec.n_subjects - n_excluded) + \
        [EXCLUSION_KINDS[i % len(EXCLUSION_KINDS)] for i in range(n_excluded)]
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    intended = {}
    for i, kind in enumerate(kinds):
        sid = 1000 + i
        outcomes = w.subject(sid, kind)
        if kind == "index":
            intended[sid] = outcomes
    return w.frames(), intended


def tables_to_csv(frames: dict[str, pd.DataFrame]) -> dict[str, str]:
    out = {}
    for kind, df in frames.items():
        buf = io.StringIO()
        df.to_csv(buf, index=False, lineterminator="\n")
        out[TABLE_FILES[kind]] = buf.getvalue()
    return out


def write_synthetic(spec: SyntheticSpec, directory) -> dict[int, dict]:
    """Write MIMIC-named CSV files into ``directory``; returns intended labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames, intended = generate_synthetic(spec)
    for name, text in tables_to_csv(frames).items():
        (directory / name).write_text(text, encoding="utf-8")
    return intended

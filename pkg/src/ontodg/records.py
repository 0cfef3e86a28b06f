"""Patient visit sequences, task labels, multi-hot encodings and temporal splits.

Dataset files are JSON lines, one patient per line::

    {"id": "p00017",
     "visits": [{"day": 120, "codes": {"conditions": ["c3"], "drugs": ["d1", "d4"]}}, ...],
     "label": [0, 5]}

``label`` lists the indices of positive labels (``[]`` or ``[0]`` for binary
tasks).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng

logger = logging.getLogger(__name__)

CONDITIONS = "conditions"
TASK_KINDS = ("mortality", "readmission", "diagnosis", "drug")


class SchemaError(ValueError):
    pass


class EmptySplitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "mortality"
    d: int = 1
    readmission_window_days: int = 30

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind in ("mortality", "readmission") and self.d != 1:
            raise ValueError(f"{self.kind} is a binary task, d must be 1 (got {self.d})")
        if self.kind in ("diagnosis", "drug") and self.d <= 1:
            raise ValueError(f"{self.kind} is multi-label, d must exceed 1 (got {self.d})")

    @property
    def binary(self) -> bool:
        return self.d == 1


@dataclass(frozen=True)
class Visit:
    day: int
    codes: dict  # feature key -> tuple of code strings

    def key_codes(self, key: str) -> tuple:
        return self.codes.get(key, ())


@dataclass(frozen=True)
class PatientRecord:
    id: str
    visits: tuple
    label: tuple  # binary vector of length d

    @property
    def T(self) -> int:
        return len(self.visits)

    @property
    def last_day(self) -> int:
        return self.visits[-1].day

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "visits": [{"day": v.day, "codes": {k: list(c) for k, c in v.codes.items()}} for v in self.visits],
            "label": [i for i, y in enumerate(self.label) if y],
        }


def make_record(pid: str, visits: Iterable[tuple[int, dict]], positives: Iterable[int], d: int) -> PatientRecord:
    vs = tuple(Visit(int(day), {k: tuple(c) for k, c in codes.items()}) for day, codes in visits)
    label = [0] * d
    for i in positives:
        label[i] = 1
    return PatientRecord(pid, vs, tuple(label))


def _parse_record(obj: dict, task: TaskSpec) -> PatientRecord:
    pid = obj.get("id")
    if not isinstance(pid, str) or not pid:
        raise SchemaError(f"record without a string id: {str(obj)[:60]}")
    try:
        raw_visits = obj["visits"]
        raw_label = obj["label"]
    except KeyError as e:
        raise SchemaError(f"record {pid}: missing field {e.args[0]!r}") from None
    visits = []
    for v in raw_visits:
        if not isinstance(v, dict) or "day" not in v or "codes" not in v:
            raise SchemaError(f"record {pid}: visit needs 'day' and 'codes'")
        codes = {str(k): tuple(str(c) for c in cs) for k, cs in v["codes"].items()}
        if not any(codes.values()):
            raise SchemaError(f"record {pid}: visit on day {v['day']} has no codes")
        visits.append(Visit(int(v["day"]), codes))
    if len(visits) < 2:
        raise SchemaError(f"record {pid}: needs at least 2 visits, has {len(visits)}")
    visits.sort(key=lambda v: v.day)
    if isinstance(raw_label, (int, bool)) and task.binary:
        positives = [0] if raw_label else []
    else:
        positives = list(raw_label)
    label = [0] * task.d
    for i in positives:
        if not isinstance(i, int) or not 0 <= i < task.d:
            raise SchemaError(f"record {pid}: label index {i!r} outside [0, {task.d})")
        label[i] = 1
    return PatientRecord(pid, tuple(visits), tuple(label))


def load_dataset(path: str | Path, task: TaskSpec) -> list[PatientRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"line {lineno}: {e}") from None
            out.append(_parse_record(obj, task))
    ids = [p.id for p in out]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate patient ids")
    return out


def save_dataset(records: Sequence[PatientRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in records:
            fh.write(json.dumps(p.to_json(), separators=(",", ":"), sort_keys=True) + "\n")


def feature_keys(records: Sequence[PatientRecord]) -> list[str]:
    """Feature keys in first-seen order, conditions first."""
    keys: list[str] = [CONDITIONS]
    for p in records:
        for v in p.visits:
            for k in v.codes:
                if k not in keys:
                    keys.append(k)
    return keys


def build_vocab(records: Sequence[PatientRecord], keys: Sequence[str]) -> dict[str, list[str]]:
    vocab = {}
    for k in keys:
        codes = {c for p in records for v in p.visits for c in v.key_codes(k)}
        vocab[k] = sorted(codes)
    return vocab


def aggregate_history(p: PatientRecord, upto: int, vocab: Sequence[str] | dict, key: str = CONDITIONS) -> np.ndarray:
    """OR of the multi-hot vectors of visits ``1..upto`` over ``vocab``."""
    if not 1 <= upto <= p.T:
        raise IndexError(f"upto={upto} outside [1, {p.T}] for patient {p.id}")
    index = vocab if isinstance(vocab, dict) else {c: i for i, c in enumerate(vocab)}
    x = np.zeros(len(index), dtype=np.uint8)
    for v in p.visits[:upto]:
        for c in v.key_codes(key):
            x[index[c]] = 1
    return x


def temporal_split(
    data: Sequence[PatientRecord],
    cutoff: int,
    ratios: tuple[float, float, float] = (0.75, 0.10, 0.15),
    seed: int = 0,
    strict: bool = False,
) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Patients whose last visit is after ``cutoff`` form the test split.

    The rest is shuffled with a seeded stream and divided train:val in the
    proportion ``ratios[0]:ratios[1]``. ``strict`` turns the empty-split
    warning into an error.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    test = [p for p in data if p.last_day > cutoff]
    source = [p for p in data if p.last_day <= cutoff]
    order = rng.stream(seed, "temporal_split").permutation(len(source))
    n_val = int(round(len(source) * ratios[1] / (ratios[0] + ratios[1])))
    val = [source[i] for i in sorted(order[:n_val])]
    train = [source[i] for i in sorted(order[n_val:])]
    for name, part in (("train", train), ("val", val), ("test", test)):
        if not part:
            msg = f"temporal_split produced an empty {name} split (cutoff={cutoff})"
            if strict:
                raise ValueError(msg)
            warnings.warn(msg, EmptySplitWarning, stacklevel=2)
    return train, val, test

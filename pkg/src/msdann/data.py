"""Encounter records, P/N/M concept encoding, file I/O, temporal splits and domain labels."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError, SchemaError, SplitError

FIXED_COLUMNS = ("encounter_id", "er_id", "date", "label")


class CuiStatus(enum.IntEnum):
    PRESENT = 0
    NEGATED = 1
    MISSING = 2

    @property
    def token(self) -> str:
        return "PNM"[self]

    @classmethod
    def from_token(cls, token: str) -> "CuiStatus":
        if token not in _TOKEN_CODE:
            raise ValueError(f"unknown status token {token!r}")
        return cls(_TOKEN_CODE[token])


_TOKEN_CODE = {"P": 0, "N": 1, "M": 2}


@dataclass(frozen=True, eq=False)
class EncounterRecord:
    encounter_id: str
    er_id: str
    encounter_date: dt.date
    statuses: np.ndarray  # uint8 codes, see CuiStatus
    label: int

    def __post_init__(self):
        codes = np.asarray(self.statuses, dtype=np.uint8)
        if codes.ndim != 1 or np.any(codes > 2):
            raise SchemaError(f"{self.encounter_id}: statuses must be a vector of P/N/M codes")
        codes.flags.writeable = False
        object.__setattr__(self, "statuses", codes)
        if self.label not in (0, 1):
            raise SchemaError(f"{self.encounter_id}: label must be 0 or 1, got {self.label!r}")

    def status_list(self) -> list[CuiStatus]:
        return [CuiStatus(int(c)) for c in self.statuses]

    def __eq__(self, other):
        if not isinstance(other, EncounterRecord):
            return NotImplemented
        return (
            self.encounter_id == other.encounter_id
            and self.er_id == other.er_id
            and self.encounter_date == other.encounter_date
            and self.label == other.label
            and np.array_equal(self.statuses, other.statuses)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Dataset:
    vocabulary: tuple[str, ...]
    records: tuple[EncounterRecord, ...]
    site_registry: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        object.__setattr__(self, "records", tuple(self.records))
        if not self.site_registry:
            object.__setattr__(self, "site_registry", tuple(dict.fromkeys(r.er_id for r in self.records)))
        else:
            object.__setattr__(self, "site_registry", tuple(self.site_registry))
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise SchemaError("vocabulary entries must be unique")
        if len(set(self.site_registry)) != len(self.site_registry):
            raise SchemaError("site registry entries must be unique")
        sites = set(self.site_registry)
        V = len(self.vocabulary)
        for r in self.records:
            if r.er_id not in sites:
                raise SchemaError(f"{r.encounter_id}: site {r.er_id!r} not in registry")
            if len(r.statuses) != V:
                raise SchemaError(f"{r.encounter_id}: {len(r.statuses)} statuses for a vocabulary of {V}")

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.vocabulary == other.vocabulary
            and self.site_registry == other.site_registry
            and self.records == other.records
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def status_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.vocab_size), dtype=np.uint8)
        return np.stack([r.statuses for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def er_ids(self) -> np.ndarray:
        return np.array([r.er_id for r in self.records], dtype=object)

    def encounter_ids(self) -> list[str]:
        return [r.encounter_id for r in self.records]

    def site_records(self, er_id: str) -> list[EncounterRecord]:
        return [r for r in self.records if r.er_id == er_id]

    def subset(self, records: Iterable[EncounterRecord]) -> "Dataset":
        """New dataset over ``records`` with the same vocabulary and registry."""
        return Dataset(self.vocabulary, tuple(records), self.site_registry)


@dataclass
class EncodedBatch:
    x: np.ndarray  # (n, 3V) in {0, 1}
    y: np.ndarray  # (n,)
    d: np.ndarray | None = None  # (n, M + 1) one-hot
    row_meta: list[str] = field(default_factory=list)  # encounter ids
    sites: np.ndarray | None = None  # er_id per row

    def __len__(self):
        return len(self.y)

    @property
    def n_domains(self) -> int:
        return 0 if self.d is None else self.d.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    split_axis: str = "encounter_date"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.split_axis != "encounter_date":
            raise ConfigurationError("only splitting on encounter_date is supported")


# -- encoding -----------------------------------------------------------------

def encode_statuses(codes: np.ndarray) -> np.ndarray:
    """One-hot encode an (n, V) matrix of status codes into (n, 3V) floats."""
    codes = np.asarray(codes)
    n, V = codes.shape
    x = np.zeros((n, 3 * V), dtype=np.float64)
    cols = 3 * np.arange(V)[None, :] + codes
    x[np.arange(n)[:, None], cols] = 1.0
    return x


def encode(records: Sequence[EncounterRecord], vocabulary: Sequence[str]) -> EncodedBatch:
    """Present -> [1,0,0], Negated -> [0,1,0], Missing -> [0,0,1] per concept."""
    V = len(vocabulary)
    for r in records:
        if len(r.statuses) != V:
            raise SchemaError(f"{r.encounter_id}: {len(r.statuses)} statuses for a vocabulary of {V}")
    codes = np.stack([r.statuses for r in records]) if records else np.zeros((0, V), dtype=np.uint8)
    return EncodedBatch(
        x=encode_statuses(codes),
        y=np.array([r.label for r in records], dtype=np.float64),
        row_meta=[r.encounter_id for r in records],
        sites=np.array([r.er_id for r in records], dtype=object),
    )


def decode(x: np.ndarray) -> np.ndarray:
    """Invert :func:`encode_statuses`; raises if any triple is not one-hot."""
    x = np.asarray(x)
    n = x.shape[0]
    triples = x.reshape(n, -1, 3)
    if not np.all(triples.sum(axis=2) == 1):
        raise SchemaError("feature row is not a valid P/N/M one-hot encoding")
    return triples.argmax(axis=2).astype(np.uint8)


# -- file I/O -------------------------------------------------------------------

def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "jsonl" if path.suffix.lower() in (".jsonl", ".ndjson") else "csv"
    if fmt not in ("csv", "jsonl"):
        raise ConfigurationError(f"unknown dataset format {fmt!r}")
    return fmt


def _parse_record(row: dict, vocabulary, lineno: int) -> EncounterRecord:
    for col in FIXED_COLUMNS:
        if col not in row or row[col] is None:
            raise IngestionError(f"missing column {col!r}", lineno)
    try:
        date = dt.date.fromisoformat(str(row["date"]))
    except ValueError:
        raise IngestionError(f"bad ISO-8601 date {row['date']!r}", lineno) from None
    label = str(row["label"]).strip()
    if label not in ("0", "1"):
        raise IngestionError(f"label must be 0 or 1, got {row['label']!r}", lineno)
    codes = np.empty(len(vocabulary), dtype=np.uint8)
    for j, cui in enumerate(vocabulary):
        tok = row.get(cui)
        if tok is None:
            raise IngestionError(f"missing column {cui!r}", lineno)
        code = _TOKEN_CODE.get(str(tok).strip())
        if code is None:
            raise IngestionError(f"unknown status token {tok!r} for {cui!r}", lineno)
        codes[j] = code
    return EncounterRecord(str(row["encounter_id"]), str(row["er_id"]), date, codes, int(label))


def load_dataset(path, fmt: str | None = None) -> Dataset:
    """Read a CSV or JSONL dataset file.

    CSV: header ``encounter_id,er_id,date,label,<cui_1>,...,<cui_V>``, one
    encounter per row, statuses as ``P``/``N``/``M``. JSONL: the first line is
    ``{"vocabulary": [...]}``, every later line an object with the same keys
    as a CSV row. Record order follows the file.
    """
    path = Path(path)
    fmt = _detect_format(path, fmt)
    records: list[EncounterRecord] = []
    seen: set[str] = set()

    def add(rec: EncounterRecord, lineno: int):
        if rec.encounter_id in seen:
            raise IngestionError(f"duplicate encounter_id {rec.encounter_id!r}", lineno)
        seen.add(rec.encounter_id)
        records.append(rec)

    with path.open(newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise IngestionError("empty file without header")
            if tuple(header[:4]) != FIXED_COLUMNS:
                raise IngestionError(f"header must start with {','.join(FIXED_COLUMNS)}", 0)
            vocabulary = header[4:]
            for lineno, values in enumerate(reader, start=1):
                if len(values) != len(header):
                    raise IngestionError(f"expected {len(header)} fields, got {len(values)}", lineno)
                add(_parse_record(dict(zip(header, values)), vocabulary, lineno), lineno)
        else:
            first = fh.readline()
            if not first.strip():
                raise IngestionError("empty file without vocabulary header line")
            try:
                vocabulary = json.loads(first)["vocabulary"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise IngestionError("first line must be a {\"vocabulary\": [...]} object", 0) from None
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestionError(f"invalid JSON: {exc.msg}", lineno) from None
                add(_parse_record(row, vocabulary, lineno), lineno)
    try:
        return Dataset(tuple(vocabulary), tuple(records))
    except SchemaError as exc:
        raise IngestionError(str(exc)) from None


def save_dataset(ds: Dataset, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = _detect_format(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([*FIXED_COLUMNS, *ds.vocabulary])
            for r in ds.records:
                writer.writerow(
                    [r.encounter_id, r.er_id, r.encounter_date.isoformat(), r.label]
                    + ["PNM"[c] for c in r.statuses]
                )
        else:
            fh.write(json.dumps({"vocabulary": list(ds.vocabulary)}) + "\n")
            for r in ds.records:
                row = {
                    "encounter_id": r.encounter_id,
                    "er_id": r.er_id,
                    "date": r.encounter_date.isoformat(),
                    "label": r.label,
                }
                row.update({cui: "PNM"[c] for cui, c in zip(ds.vocabulary, r.statuses)})
                fh.write(json.dumps(row) + "\n")
    return path


# -- temporal split ---------------------------------------------------------------

def split_site(records: Sequence[EncounterRecord], train_fraction: float) -> tuple[list, list]:
    """Split one site's encounters by date.

    Records are ordered by (date, encounter_id). With ``k = floor(fraction * n)``
    the date of the k-th record is the cutoff: everything dated strictly
    earlier is training data, the cutoff day and later are test data. Same-day
    encounters therefore never straddle the boundary. If nothing is dated
    before the cutoff, the cutoff day itself goes to training instead, as long
    as a later day remains for testing.
    """
    n = len(records)
    ordered = sorted(records, key=lambda r: (r.encounter_date, r.encounter_id))
    k = math.floor(train_fraction * n)
    if k < 1:
        raise SplitError(f"site has too few records ({n}) for a train fraction of {train_fraction}")
    cutoff = ordered[k - 1].encounter_date
    n_train = sum(1 for r in ordered if r.encounter_date < cutoff)
    if n_train == 0:
        n_train = sum(1 for r in ordered if r.encounter_date <= cutoff)
        if n_train == n:
            n_train = 0
    return ordered[:n_train], ordered[n_train:]


def temporal_split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Per-site date split; train and test keep the original file order."""
    train_ids: set[str] = set()
    for site in ds.site_registry:
        recs = ds.site_records(site)
        if len(recs) < 2:
            raise SplitError(f"site {site!r} has {len(recs)} record(s); at least 2 are needed")
        train, test = split_site(recs, spec.train_fraction)
        if not train:
            raise SplitError(
                f"site {site!r}: all encounters up to the cutoff share one date; no training block"
            )
        train_ids.update(r.encounter_id for r in train)
    train = [r for r in ds.records if r.encounter_id in train_ids]
    test = [r for r in ds.records if r.encounter_id not in train_ids]
    return ds.subset(train), ds.subset(test)


def split_manifest(train: Dataset, test: Dataset) -> dict:
    return {
        "train": train.encounter_ids(),
        "test": test.encounter_ids(),
        "train_sha256": manifest_hash(train.encounter_ids()),
        "test_sha256": manifest_hash(test.encounter_ids()),
    }


def manifest_hash(encounter_ids: Iterable[str]) -> str:
    h = hashlib.sha256()
    for eid in encounter_ids:
        h.update(eid.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# -- domain labels ----------------------------------------------------------------

def assign_domains(train: Dataset, target_er: str, mode: str = "multi") -> tuple[np.ndarray | None, int]:
    """Domain index per record and the number of domain classes.

    ``multi``: each source site gets its own index in registry order and the
    target gets the last index. ``single``: every source is 0, the target 1.
    ``none``: ``(None, 0)``.
    """
    if target_er not in train.site_registry:
        raise ConfigurationError(f"unknown target site {target_er!r}")
    if mode == "none":
        return None, 0
    sites = train.er_ids()
    if mode == "multi":
        sources = [s for s in train.site_registry if s != target_er]
        lookup = {s: i for i, s in enumerate(sources)}
        lookup[target_er] = len(sources)
        n_domains = len(sources) + 1
    elif mode == "single":
        lookup = {s: 0 for s in train.site_registry}
        lookup[target_er] = 1
        n_domains = 2
    else:
        raise ConfigurationError(f"unknown domain mode {mode!r}")
    idx = np.array([lookup[s] for s in sites], dtype=np.int64)
    return idx, n_domains


def one_hot(indices: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(indices), n_classes), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out

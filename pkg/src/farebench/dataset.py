"""Trip records, columnar tables, chunked CSV ingestion and the 80/20 split."""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateSplitError, EmptyDatasetError, SchemaError, UnknownColumnError

# Fixed column order of the ingested table. pickup_datetime is stored as
# UTC epoch seconds.
SCHEMA: tuple[str, ...] = (
    "pickup_datetime",
    "pickup_longitude",
    "pickup_latitude",
    "dropoff_longitude",
    "dropoff_latitude",
    "passenger_count",
    "fare_amount",
)

DEFAULT_CHUNK_ROWS = 100_000
MISSING_TOKENS = frozenset({"", "NA"})

_TS_RE = re.compile(r"^(\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2})(?: ?UTC)?$")


@dataclass(frozen=True)
class TripRecord:
    """One taxi trip. ``None`` marks a missing field."""

    pickup_datetime: datetime | None
    pickup_longitude: float | None
    pickup_latitude: float | None
    dropoff_longitude: float | None
    dropoff_latitude: float | None
    passenger_count: int | None
    fare_amount: float | None

    def __post_init__(self):
        for name in ("pickup_latitude", "dropoff_latitude"):
            v = getattr(self, name)
            if v is not None and not -90.0 <= v <= 90.0:
                raise DataError(f"{name}={v} outside [-90, 90]")
        for name in ("pickup_longitude", "dropoff_longitude"):
            v = getattr(self, name)
            if v is not None and not -180.0 <= v <= 180.0:
                raise DataError(f"{name}={v} outside [-180, 180]")
        if self.fare_amount is not None and not math.isfinite(self.fare_amount):
            raise DataError("fare_amount must be finite")
        if self.passenger_count is not None and self.passenger_count < 0:
            raise DataError("passenger_count must be non-negative")


@dataclass
class ColumnTable:
    """Columnar numeric table.

    Missing entries hold NaN in ``columns`` but the boolean ``missing_masks``
    are authoritative. ``norm_stats`` maps column name to ``(mean, std)`` when
    the table has been normalized.
    """

    column_names: tuple[str, ...]
    columns: dict[str, np.ndarray]
    missing_masks: dict[str, np.ndarray]
    norm_stats: dict[str, tuple[float, float]] | None = None

    def __post_init__(self):
        self.column_names = tuple(self.column_names)
        lengths = {len(self.columns[c]) for c in self.column_names}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths {sorted(lengths)}")
        for c in self.column_names:
            if self.missing_masks[c].shape != self.columns[c].shape:
                raise DataError(f"missing mask of {c} misaligned with its column")

    @classmethod
    def from_arrays(cls, data: dict[str, Sequence[float]], masks: dict[str, np.ndarray] | None = None) -> "ColumnTable":
        names = tuple(data)
        cols = {k: np.asarray(v, dtype=np.float64).copy() for k, v in data.items()}
        if masks is None:
            masks = {k: np.isnan(v) for k, v in cols.items()}
        else:
            masks = {k: np.asarray(masks.get(k, np.isnan(cols[k])), dtype=bool).copy() for k in names}
        return cls(names, cols, masks)

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.column_names[0]]) if self.column_names else 0

    def __len__(self) -> int:
        return self.n_rows

    def _check(self, name: str) -> None:
        if name not in self.columns:
            raise UnknownColumnError(f"unknown column '{name}'; table has {list(self.column_names)}")

    def column(self, name: str) -> np.ndarray:
        self._check(name)
        return self.columns[name]

    def mask(self, name: str) -> np.ndarray:
        self._check(name)
        return self.missing_masks[name]

    def matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.column_names if names is None else names
        return np.column_stack([self.column(n) for n in names]) if names else np.empty((self.n_rows, 0))

    def with_column(self, name: str, values: np.ndarray, mask: np.ndarray | None = None) -> "ColumnTable":
        values = np.asarray(values, dtype=np.float64)
        if len(values) != self.n_rows:
            raise DataError(f"column {name} has {len(values)} rows, table has {self.n_rows}")
        cols = dict(self.columns)
        masks = dict(self.missing_masks)
        cols[name] = values
        masks[name] = np.zeros(len(values), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        names = self.column_names if name in self.columns else self.column_names + (name,)
        return ColumnTable(names, cols, masks, self.norm_stats)

    def select(self, names: Sequence[str]) -> "ColumnTable":
        for n in names:
            self._check(n)
        stats = None if self.norm_stats is None else {k: v for k, v in self.norm_stats.items() if k in names}
        return ColumnTable(tuple(names), {n: self.columns[n] for n in names}, {n: self.missing_masks[n] for n in names}, stats)

    def take(self, rows: Sequence[int] | np.ndarray) -> "ColumnTable":
        rows = np.asarray(rows)
        return ColumnTable(
            self.column_names,
            {n: self.columns[n][rows] for n in self.column_names},
            {n: self.missing_masks[n][rows] for n in self.column_names},
            self.norm_stats,
        )

    def copy(self) -> "ColumnTable":
        return ColumnTable(
            self.column_names,
            {n: v.copy() for n, v in self.columns.items()},
            {n: m.copy() for n, m in self.missing_masks.items()},
            None if self.norm_stats is None else dict(self.norm_stats),
        )

    def equals(self, other: "ColumnTable") -> bool:
        if self.column_names != other.column_names:
            return False
        return all(
            np.array_equal(self.missing_masks[c], other.missing_masks[c])
            and np.array_equal(self.columns[c], other.columns[c], equal_nan=True)
            for c in self.column_names
        )

    @staticmethod
    def concat(tables: Sequence["ColumnTable"]) -> "ColumnTable":
        if not tables:
            raise EmptyDatasetError("nothing to concatenate")
        names = tables[0].column_names
        return ColumnTable(
            names,
            {n: np.concatenate([t.columns[n] for t in tables]) for n in names},
            {n: np.concatenate([t.missing_masks[n] for t in tables]) for n in names},
        )


@dataclass(frozen=True)
class SplitIndex:
    train_rows: np.ndarray
    test_rows: np.ndarray
    seed: int


@dataclass
class IngestSummary:
    rows_read: int = 0
    rows_rejected: int = 0
    rejects_by_reason: Counter = field(default_factory=Counter)

    def to_json(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_rejected": self.rows_rejected,
            "rejects_by_reason": dict(sorted(self.rejects_by_reason.items())),
        }


class RowRejected(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def parse_timestamp(text: str) -> datetime:
    m = _TS_RE.match(text.strip())
    if m is None:
        raise RowRejected("invalid timestamp")
    try:
        dt = datetime.strptime(m.group(1), "%Y-%m-%d %H:%M:%S")
    except ValueError:
        raise RowRejected("invalid timestamp") from None
    return dt.replace(tzinfo=timezone.utc)


def _number(text: str) -> float | None:
    text = text.strip()
    if text in MISSING_TOKENS:
        return None
    try:
        v = float(text)
    except ValueError:
        raise RowRejected("unparseable number") from None
    if not math.isfinite(v):
        raise RowRejected("non-finite value")
    return v


def parse_row(fields: dict[str, str]) -> TripRecord:
    """Validate one CSV row; raises ``RowRejected`` with a reason."""
    ts_text = fields["pickup_datetime"].strip()
    ts = None if ts_text in MISSING_TOKENS else parse_timestamp(ts_text)

    vals = {k: _number(fields[k]) for k in SCHEMA[1:]}
    for k in ("pickup_latitude", "dropoff_latitude"):
        if vals[k] is not None and not -90.0 <= vals[k] <= 90.0:
            raise RowRejected("latitude out of range")
    for k in ("pickup_longitude", "dropoff_longitude"):
        if vals[k] is not None and not -180.0 <= vals[k] <= 180.0:
            raise RowRejected("longitude out of range")
    # (0, 0) is unrecorded GPS in TLC exports
    for end in ("pickup", "dropoff"):
        lon, lat = vals[f"{end}_longitude"], vals[f"{end}_latitude"]
        if lon == 0.0 and lat == 0.0:
            vals[f"{end}_longitude"] = vals[f"{end}_latitude"] = None

    pc = vals["passenger_count"]
    if pc is not None:
        if pc < 0:
            raise RowRejected("negative passenger count")
        if pc != int(pc):
            raise RowRejected("non-integer passenger count")
        pc = int(pc)

    return TripRecord(
        pickup_datetime=ts,
        pickup_longitude=vals["pickup_longitude"],
        pickup_latitude=vals["pickup_latitude"],
        dropoff_longitude=vals["dropoff_longitude"],
        dropoff_latitude=vals["dropoff_latitude"],
        passenger_count=pc,
        fare_amount=vals["fare_amount"],
    )


def _check_header(header: list[str]) -> dict[str, int]:
    lowered = [h.strip().lower() for h in header]
    missing = [c for c in SCHEMA if c not in lowered]
    unknown = [h for h in lowered if h not in SCHEMA]
    if missing or unknown:
        raise SchemaError(missing, unknown)
    return {name: lowered.index(name) for name in SCHEMA}


def parse_csv_chunked(
    path: str | Path,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
    on_chunk: Callable[[list[TripRecord]], None] | None = None,
) -> IngestSummary:
    """Stream ``path`` in chunks of at most ``chunk_rows`` data rows.

    ``on_chunk`` receives the accepted records of each chunk, serially and in
    file order. Rejected rows are counted by reason. Blank lines are not data
    rows and are ignored.
    """
    if chunk_rows < 1:
        raise ValueError("chunk_rows must be >= 1")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")

    summary = IngestSummary()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(list(SCHEMA), []) from None
        index = _check_header(header)
        width = len(header)

        batch: list[TripRecord] = []
        in_chunk = 0
        for raw in reader:
            if not raw:
                continue
            summary.rows_read += 1
            in_chunk += 1
            try:
                if len(raw) != width:
                    raise RowRejected("wrong field count")
                batch.append(parse_row({k: raw[i] for k, i in index.items()}))
            except RowRejected as rej:
                summary.rows_rejected += 1
                summary.rejects_by_reason[rej.reason] += 1
            if in_chunk == chunk_rows:
                if on_chunk is not None:
                    on_chunk(batch)
                batch, in_chunk = [], 0
        if in_chunk and on_chunk is not None:
            on_chunk(batch)
    return summary


def read_trips(path: str | Path, chunk_rows: int = DEFAULT_CHUNK_ROWS) -> tuple[ColumnTable, IngestSummary]:
    """Ingest a whole CSV into a ColumnTable, converting chunk by chunk."""
    parts: list[ColumnTable] = []

    def consume(records: list[TripRecord]) -> None:
        if records:
            parts.append(to_column_table(records))

    summary = parse_csv_chunked(path, chunk_rows, consume)
    if not parts:
        raise EmptyDatasetError(f"no valid rows in {path}")
    return ColumnTable.concat(parts), summary


def to_column_table(records: Iterable[TripRecord]) -> ColumnTable:
    records = list(records)
    if not records:
        raise EmptyDatasetError("cannot build a table from zero records")
    data: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for name in SCHEMA:
        raw = [getattr(r, name) for r in records]
        mask = np.array([v is None for v in raw], dtype=bool)
        if name == "pickup_datetime":
            vals = [np.nan if v is None else float(v.timestamp()) for v in raw]
        else:
            vals = [np.nan if v is None else float(v) for v in raw]
        data[name] = np.array(vals, dtype=np.float64)
        masks[name] = mask
    return ColumnTable(SCHEMA, data, masks)


def table_to_records(table: ColumnTable) -> list[TripRecord]:
    out = []
    for i in range(table.n_rows):
        vals = {}
        for name in SCHEMA:
            if table.mask(name)[i]:
                vals[name] = None
                continue
            v = float(table.column(name)[i])
            if name == "pickup_datetime":
                vals[name] = datetime.fromtimestamp(v, tz=timezone.utc)
            elif name == "passenger_count":
                vals[name] = int(v)
            else:
                vals[name] = v
        out.append(TripRecord(**vals))
    return out


def write_table_csv(table: ColumnTable, path: str | Path, names: Sequence[str] | None = None) -> None:
    """Write a table as CSV; timestamps in the ingest format, missing as empty."""
    names = list(table.column_names if names is None else names)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        cols = [table.column(n) for n in names]
        masks = [table.mask(n) for n in names]
        for i in range(table.n_rows):
            row = []
            for n, c, m in zip(names, cols, masks):
                if m[i]:
                    row.append("")
                elif n == "pickup_datetime":
                    row.append(datetime.fromtimestamp(float(c[i]), tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC"))
                else:
                    row.append(repr(float(c[i])))
            w.writerow(row)


def split_80_20(n_rows: int, seed: int) -> SplitIndex:
    """Seeded uniform shuffle; the first 80% (rounded down) are train rows."""
    if n_rows < 5:
        raise DegenerateSplitError(f"need at least 5 rows to split, got {n_rows}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_train = (n_rows * 8) // 10
    return SplitIndex(train_rows=perm[:n_train], test_rows=perm[n_train:], seed=seed)


def replace_norm_stats(table: ColumnTable, stats: dict[str, tuple[float, float]] | None) -> ColumnTable:
    return replace(table, norm_stats=stats)

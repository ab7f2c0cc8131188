"""Count-matrix layout, masking protocols, CSV ingestion and synthesis.

A sample is one year of data flattened day-major: cell ``(day t, location
j)`` lives at flat index ``t * n_locations + j``. The canonical layout is
357 days (51 weeks counted from the year's first Sunday) by 77 locations,
but every operation works for generic ``(n_days, n_locations)``.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "DataError",
    "CountMatrix",
    "MaskSpec",
    "CsvSchema",
    "RejectsReport",
    "SynthSpec",
    "ingest_csv",
    "ingest_csv_with_report",
    "apply_mask",
    "synth_generate",
    "split_loyo",
    "concat_samples",
    "save_counts",
    "load_counts",
]

logger = logging.getLogger(__name__)

_CONTAINER_MAGIC = b"CDEFCNT\x00"
_CONTAINER_VERSION = 1

_SCHEMES = {"alternate_weeks": 7, "alternate_3week_blocks": 21}


class DataError(ValueError):
    """Malformed input data or an operation that the layout cannot support."""


@dataclass
class CountMatrix:
    """N samples by V observed counts with a visibility mask.

    ``mask`` is True where a cell is visible; hidden cells are excluded
    from conditioning and are the evaluation targets.
    """

    counts: np.ndarray
    mask: np.ndarray
    n_days: int
    n_locations: int
    sample_labels: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.counts.ndim != 2:
            raise DataError(f"counts must be 2-D, got shape {self.counts.shape}")
        if self.mask.shape != self.counts.shape:
            raise DataError("mask shape must match counts shape")
        if np.any(self.counts < 0):
            raise DataError("counts must be non-negative")
        if self.n_days * self.n_locations != self.counts.shape[1]:
            raise DataError(
                f"layout ({self.n_days} x {self.n_locations}) does not match "
                f"dim {self.counts.shape[1]}"
            )
        if not self.sample_labels:
            self.sample_labels = list(range(self.counts.shape[0]))
        if len(self.sample_labels) != self.counts.shape[0]:
            raise DataError("one sample label per row is required")

    @property
    def n_samples(self) -> int:
        return self.counts.shape[0]

    @property
    def dim(self) -> int:
        return self.counts.shape[1]

    def flat_index(self, day: int, location: int) -> int:
        return day * self.n_locations + location

    def hidden_count(self) -> int:
        return int((~self.mask).sum())

    def copy(self) -> "CountMatrix":
        return CountMatrix(
            counts=self.counts.copy(),
            mask=self.mask.copy(),
            n_days=self.n_days,
            n_locations=self.n_locations,
            sample_labels=list(self.sample_labels),
        )


@dataclass(frozen=True)
class MaskSpec:
    """Block-alternation masking with optional random reveals.

    ``alternate_weeks`` hides weeks 2, 4, ..., counted 1-based;
    ``alternate_3week_blocks`` hides 21-day blocks 2, 4, .... Inside each
    hidden block, ``reveal_count`` cells are made visible again, drawn
    without replacement from one seeded stream per block index so that
    larger reveal counts nest the smaller ones.
    """

    scheme: str
    reveal_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise DataError(
                f"unknown mask scheme {self.scheme!r}; choose from {sorted(_SCHEMES)}"
            )
        if self.reveal_count < 0:
            raise DataError("reveal_count must be non-negative")

    @property
    def block_days(self) -> int:
        return _SCHEMES[self.scheme]


def apply_mask(data: CountMatrix, ms: MaskSpec) -> CountMatrix:
    """Hide alternating blocks of days, then reveal seeded random cells.

    The same pattern applies to every sample. Composes with an existing
    mask by intersection, so applying the same spec twice is a no-op.
    """
    block = ms.block_days
    if data.n_days % block != 0:
        raise DataError(
            f"{data.n_days} days do not divide into {block}-day blocks"
        )
    n_blocks = data.n_days // block
    block_cells = block * data.n_locations
    if ms.reveal_count > block_cells:
        raise DataError(
            f"reveal_count {ms.reveal_count} exceeds block size {block_cells}"
        )

    visible = np.ones(data.dim, dtype=bool)
    for b in range(n_blocks):
        if b % 2 == 0:  # hidden blocks are 2, 4, ... 1-based
            continue
        lo = b * block_cells
        visible[lo : lo + block_cells] = False
        if ms.reveal_count:
            rng = np.random.default_rng(np.random.SeedSequence([ms.seed, b]))
            order = rng.permutation(block_cells)
            visible[lo + order[: ms.reveal_count]] = True

    out = data.copy()
    out.mask &= visible[None, :]
    return out


# ---------------------------------------------------------------------------
# Synthetic data.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings for planted spatio-temporal count data.

    The rate of cell ``(day t, location j)`` is ``base_rates[j] *
    week_profile[t mod 7] * block_level[sample, t div 21]`` with the block
    levels drawn log-normally per sample, so years differ in ways a pooled
    per-location rate cannot track.
    """

    n_locations: int = 7
    n_weeks: int = 51
    n_samples: int = 14
    week_profile: tuple[float, ...] = (0.6, 0.8, 1.0, 1.0, 1.1, 1.5, 1.8)
    base_rates: tuple[float, ...] | None = None
    block_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_locations < 1 or self.n_weeks < 1 or self.n_samples < 1:
            raise DataError("synthetic dimensions must be positive")
        if len(self.week_profile) != 7:
            raise DataError("week_profile needs 7 amplitudes")
        if any(a < 0 for a in self.week_profile):
            raise DataError("week_profile amplitudes must be non-negative")

    @property
    def n_days(self) -> int:
        return 7 * self.n_weeks


def synth_generate(gspec: SynthSpec) -> tuple[CountMatrix, np.ndarray]:
    """Draw a planted dataset; returns the matrix and the true rate table."""
    rng = np.random.default_rng(np.random.SeedSequence([gspec.seed]))
    d, p, n = gspec.n_days, gspec.n_locations, gspec.n_samples
    if gspec.base_rates is None:
        base = rng.uniform(2.0, 8.0, size=p)
    else:
        base = np.asarray(gspec.base_rates, dtype=np.float64)
        if base.shape != (p,):
            raise DataError(f"base_rates needs {p} entries")

    profile = np.asarray(gspec.week_profile, dtype=np.float64)
    n_blocks = -(-d // 21)
    if gspec.block_sigma > 0:
        levels = np.exp(rng.normal(0.0, gspec.block_sigma, size=(n, n_blocks)))
    else:
        levels = np.ones((n, n_blocks))

    days = np.arange(d)
    day_prof = profile[days % 7]  # (d,)
    cell = day_prof[:, None] * base[None, :]  # (d, p)
    rates = levels[:, days // 21][:, :, None] * cell[None, :, :]  # (n, d, p)
    rates = rates.reshape(n, d * p)
    # zero-rate cells (zero profile amplitude) stay legal for Poisson draws
    counts = rng.poisson(rates)
    cm = CountMatrix(
        counts=counts,
        mask=np.ones_like(counts, dtype=bool),
        n_days=d,
        n_locations=p,
    )
    return cm, rates


def split_loyo(data: CountMatrix, test_index: int) -> tuple[CountMatrix, CountMatrix]:
    """Leave-one-sample-out split; train gets the other N - 1 samples."""
    if not 0 <= test_index < data.n_samples:
        raise IndexError(
            f"test index {test_index} out of range for {data.n_samples} samples"
        )
    keep = np.arange(data.n_samples) != test_index
    train = CountMatrix(
        counts=data.counts[keep],
        mask=data.mask[keep],
        n_days=data.n_days,
        n_locations=data.n_locations,
        sample_labels=[l for i, l in enumerate(data.sample_labels) if keep[i]],
    )
    test = CountMatrix(
        counts=data.counts[~keep],
        mask=data.mask[~keep],
        n_days=data.n_days,
        n_locations=data.n_locations,
        sample_labels=[data.sample_labels[test_index]],
    )
    return train, test


def concat_samples(*parts: CountMatrix) -> CountMatrix:
    """Stack matrices with identical layout along the sample axis."""
    first = parts[0]
    for part in parts[1:]:
        if (part.n_days, part.n_locations) != (first.n_days, first.n_locations):
            raise DataError("cannot concatenate matrices with different layouts")
    return CountMatrix(
        counts=np.concatenate([p.counts for p in parts]),
        mask=np.concatenate([p.mask for p in parts]),
        n_days=first.n_days,
        n_locations=first.n_locations,
        sample_labels=[l for p in parts for l in p.sample_labels],
    )


# ---------------------------------------------------------------------------
# CSV ingestion.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column names and the event-type filter for the input export."""

    date_column: str = "Date"
    location_column: str = "Community Area"
    type_column: str = "Primary Type"
    type_filter: str | None = "THEFT"
    n_locations: int = 77
    n_days: int = 357


@dataclass
class RejectsReport:
    total_rows: int = 0
    accepted: int = 0
    rejected: int = 0
    truncated: int = 0
    examples: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "total_rows": self.total_rows,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "truncated": self.truncated,
            "examples": self.examples,
        }


def _first_sunday(year: int) -> "np.datetime64":
    # numpy day-of-week: 1970-01-01 was a Thursday
    jan1 = np.datetime64(f"{year}-01-01")
    dow = (jan1.astype("datetime64[D]").astype(int) + 4) % 7  # 0 = Sunday
    return jan1 + np.timedelta64((7 - dow) % 7, "D")


def ingest_csv_with_report(path, schema: CsvSchema = CsvSchema()) -> tuple[CountMatrix, RejectsReport]:
    """Aggregate a CSV export into one sample per calendar year.

    Each year is truncated to its first ``n_days`` days counted from the
    year's first Sunday; rows outside the type filter are dropped silently,
    unparseable rows go to the rejects report and abort above a 1% share.
    """
    import pandas as pd

    df = pd.read_csv(path, dtype=str)
    if df.empty:
        raise DataError("no rows")
    for col in (schema.date_column, schema.location_column):
        if col not in df.columns:
            raise DataError(f"missing column {col!r}")

    report = RejectsReport(total_rows=len(df))
    if schema.type_filter is not None:
        if schema.type_column not in df.columns:
            raise DataError(f"missing column {schema.type_column!r}")
        df = df[df[schema.type_column] == schema.type_filter]
    if df.empty:
        raise DataError("no rows after type filter")

    raw_dates = df[schema.date_column]
    dates = pd.to_datetime(raw_dates, format="%Y-%m-%d", errors="coerce")
    retry = dates.isna()
    if retry.any():
        dates[retry] = pd.to_datetime(
            raw_dates[retry], format="%m/%d/%Y %I:%M:%S %p", errors="coerce"
        )
    locs = pd.to_numeric(df[schema.location_column], errors="coerce")

    bad = dates.isna() | locs.isna()
    locs_int = locs.fillna(0).astype(np.int64)
    bad |= (locs_int < 1) | (locs_int > schema.n_locations) | (locs != locs_int)
    n_bad = int(bad.sum())
    if n_bad:
        report.rejected = n_bad
        report.examples = [str(v) for v in raw_dates[bad].head(5)]
        if n_bad > 0.01 * len(df):
            raise DataError(
                f"{n_bad} of {len(df)} rows unparseable, above the 1% threshold"
            )
        logger.warning("rejected %d unparseable rows", n_bad)
        df = df[~bad]
        dates = dates[~bad]
        locs_int = locs_int[~bad]

    years = dates.dt.year.to_numpy()
    dates64 = dates.to_numpy().astype("datetime64[D]")
    uniq_years = np.unique(years)
    anchors = {int(y): _first_sunday(int(y)) for y in uniq_years}
    day_idx = np.empty(len(df), dtype=np.int64)
    for y in uniq_years:
        sel = years == y
        day_idx[sel] = (dates64[sel] - anchors[int(y)]).astype(int)

    inside = (day_idx >= 0) & (day_idx < schema.n_days)
    report.truncated = int((~inside).sum())
    report.accepted = int(inside.sum())
    if report.accepted == 0:
        raise DataError("no rows inside the truncation window")

    V = schema.n_days * schema.n_locations
    counts = np.zeros((len(uniq_years), V), dtype=np.int64)
    year_pos = {int(y): i for i, y in enumerate(uniq_years)}
    rows = np.fromiter((year_pos[int(y)] for y in years[inside]), dtype=np.int64)
    flat = day_idx[inside] * schema.n_locations + (locs_int.to_numpy()[inside] - 1)
    np.add.at(counts, (rows, flat), 1)

    cm = CountMatrix(
        counts=counts,
        mask=np.ones_like(counts, dtype=bool),
        n_days=schema.n_days,
        n_locations=schema.n_locations,
        sample_labels=[int(y) for y in uniq_years],
    )
    return cm, report


def ingest_csv(path, schema: CsvSchema = CsvSchema()) -> CountMatrix:
    cm, report = ingest_csv_with_report(path, schema)
    if report.rejected:
        logger.info("ingest rejects: %s", report.as_dict())
    return cm


# ---------------------------------------------------------------------------
# Cached on-disk container.
# ---------------------------------------------------------------------------


def save_counts(path, data: CountMatrix):
    """Write the binary container: magic, version, dims, counts, mask, labels."""
    labels = json.dumps(data.sample_labels).encode()
    with open(path, "wb") as fh:
        fh.write(_CONTAINER_MAGIC)
        fh.write(
            struct.pack(
                "<IQQQQ",
                _CONTAINER_VERSION,
                data.n_samples,
                data.dim,
                data.n_days,
                data.n_locations,
            )
        )
        fh.write(data.counts.astype("<i8").tobytes())
        fh.write(np.packbits(data.mask).tobytes())
        fh.write(struct.pack("<I", len(labels)))
        fh.write(labels)


def load_counts(path) -> CountMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CONTAINER_MAGIC:
            raise DataError(f"not a count container: bad magic {magic!r}")
        version, n, v, d, p = struct.unpack("<IQQQQ", fh.read(4 + 8 * 4))
        if version != _CONTAINER_VERSION:
            raise DataError(f"unsupported container version {version}")
        counts = np.frombuffer(fh.read(8 * n * v), dtype="<i8").reshape(n, v)
        n_mask_bytes = -(-(n * v) // 8)
        mask = np.unpackbits(
            np.frombuffer(fh.read(n_mask_bytes), dtype=np.uint8), count=n * v
        ).astype(bool).reshape(n, v)
        (label_len,) = struct.unpack("<I", fh.read(4))
        labels = json.loads(fh.read(label_len).decode())
    return CountMatrix(
        counts=counts.copy(),
        mask=mask,
        n_days=int(d),
        n_locations=int(p),
        sample_labels=labels,
    )

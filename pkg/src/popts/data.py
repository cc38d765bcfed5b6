"""Windowed, min-max normalized multivariate time-series datasets.

Samples are stored as ``[N, L, F]`` arrays normalized per dimension to
``[-1, 1]`` with a scaler fit on the whole source table.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Raised for malformed inputs or incompatible shapes."""


@dataclass(frozen=True)
class RawTable:
    values: np.ndarray
    column_names: list[str]


@dataclass(frozen=True)
class Scaler:
    """Per-dimension min/max pairs; ``constant[k]`` marks a zero-range dimension."""

    data_min: np.ndarray
    data_max: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Scaler":
        values = np.asarray(values, dtype=np.float64)
        flat = values.reshape(-1, values.shape[-1])
        lo = flat.min(axis=0)
        hi = flat.max(axis=0)
        return cls(lo, hi, lo == hi)

    def __len__(self) -> int:
        return len(self.data_min)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        span = np.where(self.constant, 1.0, self.data_max - self.data_min)
        out = 2.0 * (x - self.data_min) / span - 1.0
        return np.where(self.constant, 0.0, out)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        span = self.data_max - self.data_min
        return (x + 1.0) / 2.0 * span + self.data_min

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-1] != len(self):
            raise DataError(
                f"scaler mismatch: batch has {x.shape[-1]} features, scaler has {len(self)}"
            )

    def to_dict(self) -> dict:
        return {
            "min": self.data_min.tolist(),
            "max": self.data_max.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(
            np.asarray(d["min"], dtype=np.float64),
            np.asarray(d["max"], dtype=np.float64),
            np.asarray(d["constant"], dtype=bool),
        )


@dataclass
class Dataset:
    samples: np.ndarray
    scaler: Scaler
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise DataError(f"dataset needs shape [N, L, F] with N >= 1, got {self.samples.shape}")

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def features(self) -> int:
        return self.samples.shape[2]

    def __len__(self) -> int:
        return self.samples.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.samples[idx], self.scaler, dict(self.meta))


def make_sines(n: int, length: int, features: int, seed: int, frequency: float | None = None) -> Dataset:
    """Random sinusoids ``sin(2*pi*eta*l + theta)`` per (sample, dimension).

    ``eta ~ U[0, 1)`` and ``theta ~ U[-pi, pi)``. Passing ``frequency`` pins
    ``eta`` for every series (phases stay random).
    """
    if min(n, length, features) < 1:
        raise DataError("n, length and features must all be >= 1")
    rng = np.random.default_rng(seed)
    eta = rng.uniform(0.0, 1.0, size=(n, 1, features))
    theta = rng.uniform(-np.pi, np.pi, size=(n, 1, features))
    if frequency is not None:
        eta = np.full_like(eta, float(frequency))
    steps = np.arange(length, dtype=np.float64).reshape(1, length, 1)
    raw = np.sin(2.0 * np.pi * eta * steps + theta)
    scaler = Scaler.fit(raw)
    meta = {"source": "sines", "seed": int(seed)}
    return Dataset(scaler.transform(raw), scaler, meta)


def load_table(path: str | os.PathLike, delimiter: str = ",") -> RawTable:
    """Read a header + numeric-rows delimited file.

    Locations in error messages are 1-based ``(data row, column)``; the
    header is not counted as a data row.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter=delimiter))
    except FileNotFoundError:
        raise
    except (OSError, csv.Error, UnicodeDecodeError) as exc:
        raise DataError(f"malformed table: {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise DataError(f"malformed table: {path} has no header or no data rows")
    header = [h.strip() for h in rows[0]]
    width = len(header)
    values = np.empty((len(rows) - 1, width), dtype=np.float64)
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != width:
            raise DataError(f"malformed table: row {i} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"malformed table: non-numeric cell at ({i},{j + 1}): {cell!r}") from None
            if not np.isfinite(v):
                raise DataError(f"malformed table: non-finite cell at ({i},{j + 1})")
            values[i - 1, j] = v
    return RawTable(values, header)


def window(table: RawTable, length: int, stride: int = 1) -> Dataset:
    values = np.asarray(table.values, dtype=np.float64)
    rows = values.shape[0]
    if stride < 1:
        raise DataError("stride must be >= 1")
    if rows < length:
        raise DataError(f"insufficient rows: {rows} < window length {length}")
    scaler = Scaler.fit(values)
    normed = scaler.transform(values)
    count = (rows - length) // stride + 1
    starts = np.arange(count) * stride
    samples = normed[starts[:, None] + np.arange(length)[None, :]]
    meta = {"columns": list(table.column_names), "stride": int(stride)}
    return Dataset(samples, scaler, meta)


def denormalize(batch: np.ndarray, scaler: Scaler) -> np.ndarray:
    return scaler.inverse(batch)


def train_holdout_split(n: int, rng: np.random.Generator, train_frac: float = 0.8):
    """Seeded shuffled split; returns (train_idx, holdout_idx)."""
    perm = rng.permutation(n)
    cut = int(round(train_frac * n))
    return perm[:cut], perm[cut:]


_META = "metadata.json"
_BLOB = "data.bin"
_DENORM_BLOB = "denormalized.bin"


def save_dataset(ds: Dataset, outdir: str | os.PathLike, denormalized: bool = False) -> None:
    """Write ``metadata.json`` plus a little-endian float64 blob in [N][L][F] order."""
    os.makedirs(outdir, exist_ok=True)
    meta = dict(ds.meta)
    meta.update(
        shape=list(ds.samples.shape),
        dtype="<f8",
        order="sample,time,feature",
        scaler=ds.scaler.to_dict(),
    )
    with open(os.path.join(outdir, _BLOB), "wb") as fh:
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f8").tobytes())
    if denormalized:
        with open(os.path.join(outdir, _DENORM_BLOB), "wb") as fh:
            fh.write(np.ascontiguousarray(ds.scaler.inverse(ds.samples), dtype="<f8").tobytes())
        meta["denormalized"] = _DENORM_BLOB
    with open(os.path.join(outdir, _META), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str | os.PathLike) -> Dataset:
    meta_path = os.path.join(path, _META)
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
        shape = tuple(int(s) for s in meta["shape"])
        samples = np.fromfile(os.path.join(path, _BLOB), dtype="<f8")
        scaler = Scaler.from_dict(meta["scaler"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset at {path}: {exc}") from exc
    if samples.size != int(np.prod(shape)):
        raise DataError(f"dataset blob at {path} has {samples.size} values, metadata says {shape}")
    extra = {k: v for k, v in meta.items() if k not in ("shape", "dtype", "order", "scaler")}
    return Dataset(samples.reshape(shape).astype(np.float64), scaler, extra)

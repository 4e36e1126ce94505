"""Recordings, sliding windows, normalization and the synthetic HAR generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, ParseError, SchemaError

SIGMA_FLOOR = 1e-8

# timesteps per window, overlap, classes, channels (all streams at 33 Hz)
TABLE1 = {
    "OH": dict(window=256, overlap=128, classes=5, channels=240),
    "OM": dict(window=32, overlap=16, classes=18, channels=133),
    "OL": dict(window=32, overlap=16, classes=4, channels=133),
    "P": dict(window=32, overlap=16, classes=12, channels=52),
    "S": dict(window=32, overlap=16, classes=10, channels=60),
    "UH": dict(window=32, overlap=16, classes=12, channels=6),
}


@dataclass(frozen=True)
class Recording:
    channels: tuple[str, ...]
    data: np.ndarray  # (N, C)
    labels: np.ndarray  # (N,)
    subject_id: str = ""
    sample_rate_hz: float = 33.0

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != len(self.channels):
            raise SchemaError(f"data shape {self.data.shape} does not match {len(self.channels)} channels")
        if self.labels.shape != (self.data.shape[0],):
            raise SchemaError("labels and channels differ in length")
        if self.sample_rate_hz <= 0:
            raise SchemaError("sample rate must be positive")

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class CsvSchema:
    label_column: str = "label"
    channels: tuple[str, ...] | None = None  # None: every column except label/subject
    subject_column: str | None = None
    sample_rate_hz: float = 33.0


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Recording:
    """Read one recording; one row per timestep, header in the first row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(path, 1, "missing header row") from None
        if schema.label_column not in header:
            raise SchemaError(f"{path}: label column {schema.label_column!r} not found")
        skip = {schema.label_column, schema.subject_column}
        channels = tuple(schema.channels) if schema.channels is not None else tuple(h for h in header if h not in skip)
        missing = [c for c in channels if c not in header]
        if schema.subject_column and schema.subject_column not in header:
            missing.append(schema.subject_column)
        if missing:
            raise SchemaError(f"{path}: column(s) {missing} not found")
        ch_idx = [header.index(c) for c in channels]
        lab_idx = header.index(schema.label_column)
        subj_idx = header.index(schema.subject_column) if schema.subject_column else None
        rows, labels, subjects = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, found {len(row)}")
            try:
                rows.append([float(row[i]) for i in ch_idx])
                label = float(row[lab_idx])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if not label.is_integer() or label < 0:
                raise ParseError(path, lineno, f"label {row[lab_idx]!r} is not a class id")
            if not np.all(np.isfinite(rows[-1])):
                raise ParseError(path, lineno, "non-finite sensor value")
            labels.append(int(label))
            if subj_idx is not None:
                subjects.add(row[subj_idx])
    if len(subjects) > 1:
        raise SchemaError(f"{path}: more than one subject in a single recording")
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(channels))
    return Recording(
        channels=channels,
        data=data,
        labels=np.array(labels, dtype=np.int64),
        subject_id=subjects.pop() if subjects else path.stem,
        sample_rate_hz=schema.sample_rate_hz,
    )


def write_csv(path, rec: Recording, label_column: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*rec.channels, label_column])
        for row, label in zip(rec.data, rec.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass(frozen=True)
class WindowSet:
    X: np.ndarray  # (n, T, C)
    y: np.ndarray  # (n,)
    num_classes: int
    window_length: int
    overlap: int = 0

    def __post_init__(self):
        if not 0 <= self.overlap < self.window_length:
            raise ValueError("overlap must satisfy 0 <= overlap < window length")
        if self.X.ndim != 3 or self.X.shape[1] != self.window_length or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"windows {self.X.shape} inconsistent with labels {self.y.shape}")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_channels(self) -> int:
        return self.X.shape[2]

    @property
    def class_freq(self) -> np.ndarray:
        counts = np.bincount(self.y, minlength=self.num_classes).astype(np.float64)
        return counts / counts.sum() if len(self) else counts

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.X[idx], self.y[idx], self.num_classes, self.window_length, self.overlap)


def concat(sets: Sequence[WindowSet]) -> WindowSet:
    first = sets[0]
    return WindowSet(
        np.concatenate([s.X for s in sets]),
        np.concatenate([s.y for s in sets]),
        max(s.num_classes for s in sets),
        first.window_length,
        first.overlap,
    )


def window_count(n: int, T: int, overlap: int) -> int:
    return (n - T) // (T - overlap) + 1


def make_windows(rec: Recording, T: int, overlap: int, num_classes: int | None = None) -> WindowSet:
    """Cut ``rec`` into windows of ``T`` steps with stride ``T - overlap``.

    Each window takes the majority per-timestep label; ties go to the lowest id.
    """
    if T < 1 or not 0 <= overlap < T:
        raise ValueError(f"invalid window configuration T={T}, overlap={overlap}")
    n = len(rec)
    if n < T:
        raise InsufficientDataError(f"recording of {n} steps is shorter than the window length {T}")
    stride = T - overlap
    count = window_count(n, T, overlap)
    starts = np.arange(count) * stride
    X = np.lib.stride_tricks.sliding_window_view(rec.data, T, axis=0)[starts].transpose(0, 2, 1).copy()
    k = num_classes if num_classes is not None else int(rec.labels.max()) + 1
    lab = np.lib.stride_tricks.sliding_window_view(rec.labels, T)[starts]
    votes = np.zeros((count, k), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(count), T), lab.ravel()), 1)
    return WindowSet(X, votes.argmax(axis=1), k, T, overlap)


def split_chronological(ws: WindowSet, fractions=(0.7, 0.15, 0.15)) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Contiguous train/val/test blocks; overlap between blocks is limited to their borders."""
    n = len(ws)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    cut = [0, n_train, n_train + n_val, n]
    return tuple(ws.subset(np.arange(cut[i], cut[i + 1])) for i in range(3))


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ws: WindowSet) -> WindowSet:
        X = (ws.X - self.mean) / self.std
        return WindowSet(X, ws.y, ws.num_classes, ws.window_length, ws.overlap)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_normalizer(train: WindowSet) -> Normalizer:
    """Per-channel mean and population std over every timestep of ``train``."""
    if len(train) == 0:
        raise InsufficientDataError("cannot fit a normalizer on an empty training set")
    flat = train.X.reshape(-1, train.n_channels)
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    return Normalizer(mu, np.maximum(sigma, SIGMA_FLOOR))


def apply(norm: Normalizer, ws: WindowSet) -> WindowSet:
    return norm.apply(ws)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthParams:
    n_classes: int = 8
    n_channels: int = 6
    n_windows_per_class: int = 60
    window_length: int = 32
    overlap: int | None = None  # default: half the window
    noise: float = 0.5

    @property
    def resolved_overlap(self) -> int:
        return self.window_length // 2 if self.overlap is None else self.overlap


def synth_recordings(seed: int, params: SynthParams) -> list[Recording]:
    """One continuous recording per class, long enough for the requested windows.

    Class ``c`` on channel ``k`` is ``offset + amp * sin(2 pi f t / T + phase)``
    plus white noise, with per-(class, channel) offset, amplitude, frequency
    and phase drawn once from the seed.
    """
    p = params
    if min(p.n_classes, p.n_channels, p.n_windows_per_class, p.window_length) < 1:
        raise ValueError("all synthetic counts must be >= 1")
    T, overlap = p.window_length, p.resolved_overlap
    rng = np.random.default_rng(seed)
    shape = (p.n_classes, p.n_channels)
    offset = rng.normal(0.0, 0.5, shape)
    amp = rng.uniform(0.5, 1.5, shape)
    freq = rng.uniform(0.5, 4.0, shape)
    phase = rng.uniform(0.0, 2 * np.pi, shape)
    n_steps = T + (p.n_windows_per_class - 1) * (T - overlap)
    t = np.arange(n_steps)[:, None]
    recs = []
    for c in range(p.n_classes):
        signal = offset[c] + amp[c] * np.sin(2 * np.pi * freq[c] * t / T + phase[c])
        signal = signal + p.noise * rng.standard_normal((n_steps, p.n_channels))
        recs.append(
            Recording(
                channels=tuple(f"ch{k}" for k in range(p.n_channels)),
                data=signal,
                labels=np.full(n_steps, c, dtype=np.int64),
                subject_id=f"class{c}",
            )
        )
    return recs


def windows_and_split(recs: Sequence[Recording], T: int, overlap: int, num_classes: int, fractions=(0.7, 0.15, 0.15)):
    parts = [split_chronological(make_windows(r, T, overlap, num_classes), fractions) for r in recs]
    return tuple(concat([p[i] for p in parts]) for i in range(3))


def synth_har(
    seed: int,
    n_classes: int = 8,
    n_channels: int = 6,
    n_windows_per_class: int = 60,
    T: int = 32,
    overlap: int | None = None,
    noise: float = 0.5,
) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Deterministic train/val/test windows, split 70/15/15 within every class."""
    params = SynthParams(n_classes, n_channels, n_windows_per_class, T, overlap, noise)
    recs = synth_recordings(seed, params)
    return windows_and_split(recs, T, params.resolved_overlap, n_classes)

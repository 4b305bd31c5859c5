"""Traffic series ingestion, synthetic generation, splitting and windowing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .model import SECONDS_PER_DAY, WindowBatch, time_indices

# 2018-01-01T00:00:00Z, a Monday
DEFAULT_START = 1514764800
WEEKDAY_FACTOR = np.array([1.0, 1.0, 1.0, 1.0, 0.95, 0.7, 0.6])


class DataError(ValueError):
    pass


@dataclass
class SeriesFrame:
    values: np.ndarray      # (T, N)
    node_ids: np.ndarray    # (N,)
    start_epoch_s: int
    interval_s: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.node_ids):
            raise DataError(f"values {self.values.shape} do not match {len(self.node_ids)} node ids")
        if self.interval_s <= 0 or SECONDS_PER_DAY % self.interval_s:
            raise DataError(f"interval {self.interval_s}s does not divide a day")

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def rows(self, start: int, stop: int) -> "SeriesFrame":
        return SeriesFrame(self.values[start:stop], self.node_ids,
                           self.start_epoch_s + start * self.interval_s, self.interval_s)

    def select(self, node_ids: Sequence[int]) -> "SeriesFrame":
        pos = {int(n): i for i, n in enumerate(self.node_ids)}
        try:
            cols = [pos[int(n)] for n in node_ids]
        except KeyError as e:
            raise DataError(f"node {e.args[0]} not present in frame") from None
        return SeriesFrame(self.values[:, cols], np.asarray(node_ids), self.start_epoch_s, self.interval_s)


# ---------------------------------------------------------------------------
# on-disk format


def meta_path_for(path) -> Path:
    path = Path(path)
    name = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(name + ".meta.json")


def _fill_missing(values: np.ndarray) -> np.ndarray:
    present = ~np.isnan(values)
    idx = np.where(present, np.arange(values.shape[0])[:, None], 0)
    np.maximum.accumulate(idx, axis=0, out=idx)
    out = values[idx, np.arange(values.shape[1])]
    return np.nan_to_num(out, nan=0.0)


def load_csv(path, meta: Optional[dict] = None) -> SeriesFrame:
    """Read ``node_<id>`` columns plus the ``.meta.json`` sidecar.

    Empty cells are forward-filled per node; leading gaps become zero.
    """
    path = Path(path)
    if meta is None:
        mp = meta_path_for(path)
        if not mp.exists():
            raise DataError(f"missing metadata sidecar {mp}")
        meta = json.loads(mp.read_text())
    for key in ("start_epoch_s", "interval_s"):
        if key not in meta:
            raise DataError(f"metadata lacks {key!r}")

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        node_ids = []
        for col in header:
            col = col.strip()
            if not col.startswith("node_"):
                raise DataError(f"bad column name {col!r}, expected node_<id>")
            node_ids.append(int(col[5:]))
        if "n_nodes" in meta and int(meta["n_nodes"]) != len(node_ids):
            raise DataError(f"header has {len(node_ids)} nodes, metadata says {meta['n_nodes']}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(node_ids):
                raise DataError(f"{path}:{lineno}: {len(row)} fields, expected {len(node_ids)}")
            try:
                rows.append([float(c) if c.strip() else math.nan for c in row])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise DataError(f"{path} has no data rows")
    values = _fill_missing(np.asarray(rows, dtype=np.float64))
    return SeriesFrame(values, node_ids, int(meta["start_epoch_s"]), int(meta["interval_s"]))


def save_csv(frame: SeriesFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"node_{int(n)}" for n in frame.node_ids])
        for row in frame.values:
            w.writerow([repr(float(v)) for v in row])
    meta = {"start_epoch_s": int(frame.start_epoch_s), "interval_s": int(frame.interval_s),
            "n_nodes": frame.n_nodes}
    meta_path_for(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic traffic


def gen_synthetic(nodes: int, days: int, interval_s: int = 300, seed: int = 0,
                  noise: float = 0.1, start_epoch_s: int = DEFAULT_START) -> SeriesFrame:
    """Daily sinusoid scaled by a weekday profile, plus Gaussian noise.

    ``value = a_n sin(2 pi tod_frac + phi_n) + c_n weekday(dow) + eps`` with
    ``eps ~ N(0, (noise a_n)^2)``. All per-node constants come from ``seed``.
    """
    if days < 1:
        raise DataError("days must be >= 1")
    if nodes < 1:
        raise DataError("nodes must be >= 1")
    rng = np.random.default_rng(seed)
    amp = rng.uniform(20.0, 60.0, nodes)
    phase = rng.uniform(0.0, 2 * np.pi, nodes)
    level = rng.uniform(100.0, 200.0, nodes)
    steps = days * (SECONDS_PER_DAY // interval_s)
    tod, dow = time_indices(start_epoch_s, interval_s, np.arange(steps))
    frac = tod * interval_s / SECONDS_PER_DAY
    values = amp * np.sin(2 * np.pi * frac[:, None] + phase) + level * WEEKDAY_FACTOR[dow][:, None]
    values = values + rng.normal(0.0, 1.0, (steps, nodes)) * (noise * amp)
    return SeriesFrame(values, np.arange(nodes), start_epoch_s, interval_s)


# ---------------------------------------------------------------------------
# splitting / normalization / windows


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if any(p <= 0 for p in parts):
            raise DataError("split fractions must be positive")
        if abs(sum(parts) - 1.0) > 1e-9:
            raise DataError(f"split fractions sum to {sum(parts)}, not 1")


def split(frame: SeriesFrame, spec: SplitSpec = SplitSpec(), min_len: int = 1):
    """Contiguous train/val/test frames; boundaries at ``floor(fraction * T)``."""
    T = len(frame)
    b1 = int(math.floor(spec.train * T))
    b2 = int(math.floor((spec.train + spec.val) * T))
    parts = (frame.rows(0, b1), frame.rows(b1, b2), frame.rows(b2, T))
    for label, part in zip(("train", "val", "test"), parts):
        if len(part) < min_len:
            raise DataError(f"{label} split has {len(part)} rows, need at least {min_len}")
    return parts


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frame: SeriesFrame) -> "Normalizer":
        std = np.maximum(frame.values.std(axis=0), 1e-6)
        return cls(frame.values.mean(axis=0), std)

    def transform(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean


@dataclass
class WindowSet:
    """All stride-1 windows of one frame, held as arrays."""

    x: np.ndarray      # (W, T_in, N, 1)
    y: np.ndarray      # (W, T_out, N)
    tod: np.ndarray    # (W, T_in)
    dow: np.ndarray    # (W, T_in)
    normalizer: Normalizer

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.x.shape[2]

    def batch(self, idx) -> WindowBatch:
        return WindowBatch(self.x[idx], self.tod[idx], self.dow[idx],
                           np.arange(self.n_nodes), self.y[idx])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[WindowBatch]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for s in range(0, len(self), batch_size):
            yield self.batch(order[s:s + batch_size])


def make_windows(frame: SeriesFrame, t_in: int, t_out: int, normalizer: Normalizer,
                 dtype=np.float32) -> WindowSet:
    T = len(frame)
    if T < t_in + t_out:
        raise DataError(f"frame of {T} rows is shorter than t_in + t_out = {t_in + t_out}")
    count = T - t_in - t_out + 1
    z = normalizer.transform(frame.values)
    starts = np.arange(count)[:, None]
    xi = starts + np.arange(t_in)
    yi = starts + t_in + np.arange(t_out)
    tod, dow = time_indices(frame.start_epoch_s, frame.interval_s, xi)
    return WindowSet(x=z[xi][..., None].astype(dtype), y=z[yi].astype(dtype),
                     tod=tod, dow=dow, normalizer=normalizer)


# ---------------------------------------------------------------------------
# partitioning


def partition_nodes(node_ids: Sequence[int], clients: int, strategy: str = "contiguous",
                    seed: int = 0) -> Dict[int, List[int]]:
    """Disjoint, near-equal chunks of ``node_ids`` keyed by client id."""
    node_ids = [int(n) for n in node_ids]
    if clients < 1:
        raise DataError("need at least one client")
    if clients > len(node_ids):
        raise DataError(f"{clients} clients but only {len(node_ids)} nodes")
    if strategy == "shuffled":
        node_ids = [node_ids[i] for i in np.random.default_rng(seed).permutation(len(node_ids))]
    elif strategy != "contiguous":
        raise DataError(f"unknown partition strategy {strategy!r}")
    chunks = np.array_split(np.arange(len(node_ids)), clients)
    return {cid: [node_ids[i] for i in chunk] for cid, chunk in enumerate(chunks)}


def check_partition(partition: Dict[int, List[int]], node_ids: Sequence[int]) -> None:
    seen = set()
    for cid, nodes in partition.items():
        dup = seen.intersection(nodes)
        if dup or len(set(nodes)) != len(nodes):
            raise DataError(f"client {cid} shares nodes with another client")
        seen.update(nodes)
    if seen != {int(n) for n in node_ids}:
        raise DataError("partition does not cover exactly the frame's nodes")


def save_partition(partition: Dict[int, List[int]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({str(k): list(map(int, v)) for k, v in sorted(partition.items())}, indent=2) + "\n")
    return path


def load_partition(path) -> Dict[int, List[int]]:
    raw = json.loads(Path(path).read_text())
    return {int(k): [int(n) for n in v] for k, v in raw.items()}


@dataclass
class ClientData:
    """A client's private view: its nodes' train/val/test windows."""

    node_ids: List[int]
    train: WindowSet
    val: WindowSet
    test: WindowSet


def client_data(frame: SeriesFrame, node_ids: Sequence[int], t_in: int, t_out: int,
                spec: SplitSpec = SplitSpec(), dtype=np.float32) -> ClientData:
    local = frame.select(node_ids)
    tr, va, te = split(local, spec, min_len=t_in + t_out)
    norm = Normalizer.fit(tr)
    return ClientData(list(map(int, node_ids)), make_windows(tr, t_in, t_out, norm, dtype),
                      make_windows(va, t_in, t_out, norm, dtype), make_windows(te, t_in, t_out, norm, dtype))

"""Temporal edge lists, snapshot sequences and sliding-window samples."""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence, TextIO, Union

import numpy as np

Source = Union[str, Path, bytes, BinaryIO, TextIO]

SECONDS_PER_DAY = 86400.0


class EdgeListParseError(ValueError):
    def __init__(self, line_no: int, line: str, reason: str):
        super().__init__(f"line {line_no}: {reason}: {line.strip()!r}")
        self.line_no = line_no


class EmptyInputError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class DegenerateSnapshotWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TemporalEdgeList:
    """Directed timestamped events over dense node ids ``0..node_count-1``.

    ``events`` is an ``(E, 3)`` array of ``(src, dst, ts)`` rows sorted by
    timestamp (stable, so ties keep file order). ``node_labels[i]`` is the
    original identifier of dense node ``i``.
    """

    events: np.ndarray
    node_count: int
    node_labels: tuple[str, ...] = ()
    dropped_self_loops: int = 0

    @property
    def src(self) -> np.ndarray:
        return self.events[:, 0].astype(np.int64)

    @property
    def dst(self) -> np.ndarray:
        return self.events[:, 1].astype(np.int64)

    @property
    def ts(self) -> np.ndarray:
        return self.events[:, 2]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class SnapshotSequence:
    """Binary adjacency snapshots ``snapshots[k, i, j]`` of a fixed node set."""

    n_nodes: int
    snapshots: np.ndarray  # (K, N, N) uint8
    span_per_snapshot: float
    start_ts: float = 0.0

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.snapshots[k]


@dataclass(frozen=True)
class Sample:
    """A length-T history ``window`` and the snapshot ``label`` that follows it."""

    window: np.ndarray  # (T, N, N)
    label: np.ndarray  # (N, N)
    t_index: int

    @property
    def T(self) -> int:
        return self.window.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.label.shape[0]


@dataclass(frozen=True)
class DatasetStats:
    nodes: int
    edges: int
    average_degree: float
    timespan_days: float
    degree_convention: str = field(default="total (in + out) degree: 2 * edges / nodes")


def _read_text(source: Source) -> str:
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes().decode("utf-8")
    if isinstance(source, bytes):
        return source.decode("utf-8")
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_edge_list(source: Source, ts_column: int = 2) -> TemporalEdgeList:
    """Parse ``src dst ts [weight ...]`` lines into a :class:`TemporalEdgeList`.

    ``ts_column`` is the zero-based column holding the timestamp; KONECT
    dumps (``src dst weight ts``) need ``ts_column=3``. Other columns after
    the first two are ignored.

    ``source`` is a path, raw bytes, or an open (text or binary) file. Lines starting
    with ``%`` or ``#`` and blank lines are skipped. Node identifiers are
    remapped to dense ids in sorted order of the original labels (numeric
    labels sort numerically). Self-loops are dropped.
    """
    if ts_column < 2:
        raise ValueError("ts_column must be >= 2")
    text = _read_text(source)
    rows: list[tuple[str, str, float]] = []
    loops = 0
    for line_no, line in enumerate(io.StringIO(text), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "%#":
            continue
        parts = stripped.split()
        if len(parts) <= ts_column:
            raise EdgeListParseError(line_no, line, f"expected a timestamp in column {ts_column + 1}")
        try:
            ts = float(parts[ts_column])
        except ValueError:
            raise EdgeListParseError(line_no, line, "timestamp is not numeric") from None
        if not math.isfinite(ts):
            raise EdgeListParseError(line_no, line, "timestamp is not finite")
        if parts[0] == parts[1]:
            loops += 1
            continue
        rows.append((parts[0], parts[1], ts))
    if not rows:
        raise EmptyInputError("edge list contains no events")

    labels = sorted({r[0] for r in rows} | {r[1] for r in rows}, key=_label_key)
    index = {lab: i for i, lab in enumerate(labels)}
    events = np.array([(index[s], index[d], t) for s, d, t in rows], dtype=np.float64)
    events = events[np.argsort(events[:, 2], kind="stable")]
    return TemporalEdgeList(events=events, node_count=len(labels), node_labels=tuple(labels),
                            dropped_self_loops=loops)


def _label_key(label: str):
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def edge_list_from_arrays(src: Iterable[int], dst: Iterable[int], ts: Iterable[float],
                          node_count: int | None = None) -> TemporalEdgeList:
    """Build an edge list from already-dense ids (used by the synthetic corpora)."""
    src = np.asarray(list(src), dtype=np.int64)
    dst = np.asarray(list(dst), dtype=np.int64)
    ts = np.asarray(list(ts), dtype=np.float64)
    keep = src != dst
    events = np.column_stack([src[keep], dst[keep], ts[keep]]).astype(np.float64)
    if len(events) == 0:
        raise EmptyInputError("edge list contains no events")
    events = events[np.argsort(events[:, 2], kind="stable")]
    n = int(node_count if node_count is not None else max(src.max(), dst.max()) + 1)
    return TemporalEdgeList(events=events, node_count=n, node_labels=tuple(str(i) for i in range(n)),
                            dropped_self_loops=int((~keep).sum()))


def write_edge_list(edges: TemporalEdgeList, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("% src dst ts\n")
        for s, d, t in edges.events:
            fh.write(f"{int(s)} {int(d)} {t:.17g}\n")


def build_snapshots(edges: TemporalEdgeList, n_snapshots: int) -> SnapshotSequence:
    """Partition the covered time span into ``n_snapshots`` equal intervals.

    ``A_k[i, j] = 1`` iff at least one event ``i -> j`` falls in interval ``k``;
    an event exactly on the final boundary belongs to the last interval.
    """
    if n_snapshots < 2:
        raise ValueError(f"n_snapshots must be >= 2, got {n_snapshots}")
    if len(edges) == 0:
        raise EmptyInputError("cannot build snapshots from an empty edge list")
    if n_snapshots > len(edges):
        warnings.warn(
            f"{n_snapshots} snapshots requested for {len(edges)} events; some snapshots will be empty",
            DegenerateSnapshotWarning,
            stacklevel=2,
        )
    ts = edges.ts
    t0 = float(ts.min())
    span = (float(ts.max()) - t0) / n_snapshots
    k = snapshot_index(edges, n_snapshots)
    n = edges.node_count
    A = np.zeros((n_snapshots, n, n), dtype=np.uint8)
    A[k, edges.src, edges.dst] = 1
    return SnapshotSequence(n_nodes=n, snapshots=A, span_per_snapshot=span, start_ts=t0)


def snapshot_index(edges: TemporalEdgeList, n_snapshots: int) -> np.ndarray:
    """Interval index of every event, as assigned by :func:`build_snapshots`."""
    ts = edges.ts
    t0, t1 = float(ts.min()), float(ts.max())
    span = (t1 - t0) / n_snapshots
    if span <= 0:
        return np.zeros(len(ts), dtype=np.int64)
    return np.clip(np.floor((ts - t0) / span).astype(np.int64), 0, n_snapshots - 1)


def make_samples(seq: SnapshotSequence, T: int) -> list[Sample]:
    """Sliding windows: sample ``i`` is ``A_i .. A_{i+T-1}`` labelled by ``A_{i+T}``."""
    if T < 1:
        raise ValueError(f"window length must be >= 1, got {T}")
    K = len(seq)
    if K < T + 1:
        raise InsufficientDataError(f"{K} snapshots cannot supply a window of {T} plus a label")
    A = seq.snapshots
    return [Sample(window=A[i:i + T], label=A[i + T], t_index=i + T) for i in range(K - T)]


def split_train_test(samples: Sequence[Sample], train_fraction: float = 0.8) -> tuple[list[Sample], list[Sample]]:
    """Chronological split: the first ``ceil(fraction * count)`` samples train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.ceil(train_fraction * len(samples))
    train, test = list(samples[:n_train]), list(samples[n_train:])
    if not train or not test:
        raise InsufficientDataError(
            f"split of {len(samples)} samples at {train_fraction} leaves an empty side"
        )
    return train, test


def stats(edges: TemporalEdgeList) -> DatasetStats:
    if len(edges) == 0:
        raise EmptyInputError("no events")
    ts = edges.ts
    return DatasetStats(
        nodes=edges.node_count,
        edges=len(edges),
        average_degree=2.0 * len(edges) / edges.node_count,
        timespan_days=float(ts.max() - ts.min()) / SECONDS_PER_DAY,
    )


# -------------------------------------------------------------- snapshot caching


def save_snapshots(seq: SnapshotSequence, path: str | Path) -> None:
    """CSV of ``k,i,j`` triples for every nonzero entry, with a ``#`` header."""
    K, N, _ = seq.snapshots.shape
    ks, is_, js = np.nonzero(seq.snapshots)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# n_nodes={N} n_snapshots={K} span={seq.span_per_snapshot!r} start={seq.start_ts!r}\n")
        fh.write("k,i,j\n")
        for k, i, j in zip(ks, is_, js):
            fh.write(f"{k},{i},{j}\n")


def load_snapshots(path: str | Path) -> SnapshotSequence:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing snapshot header")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        fh.readline()
        body = fh.read()
    N, K = int(meta["n_nodes"]), int(meta["n_snapshots"])
    A = np.zeros((K, N, N), dtype=np.uint8)
    if body.strip():
        trip = np.loadtxt(io.StringIO(body), delimiter=",", dtype=np.int64, ndmin=2)
        A[trip[:, 0], trip[:, 1], trip[:, 2]] = 1
    return SnapshotSequence(n_nodes=N, snapshots=A, span_per_snapshot=float(meta["span"]),
                            start_ts=float(meta["start"]))

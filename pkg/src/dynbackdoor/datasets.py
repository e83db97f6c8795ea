"""Deterministic synthetic temporal corpora for tests, demos and desk-scale runs.

The generators emit :class:`~dynbackdoor.graph.TemporalEdgeList` objects so the
regular ingestion path (snapshots, windows, splits) is exercised end to end.
Events of generation interval ``k`` are stamped ``k * interval + interval / 2``,
which makes :func:`~dynbackdoor.graph.build_snapshots` with the same snapshot
count recover the generated adjacency exactly.
"""

from __future__ import annotations

import numpy as np

from .graph import TemporalEdgeList, edge_list_from_arrays


def _events_from_adjacency(A: np.ndarray, interval: float, repeats: np.ndarray | None = None) -> TemporalEdgeList:
    ks, src, dst = np.nonzero(A)
    ts = ks * interval + interval / 2.0
    if repeats is not None:
        reps = repeats[ks, src, dst]
        src, dst, ts = np.repeat(src, reps), np.repeat(dst, reps), np.repeat(ts, reps)
    return edge_list_from_arrays(src, dst, ts, node_count=A.shape[1])


def _ensure_nonempty_ends(A: np.ndarray, rng: np.random.Generator) -> None:
    # the first and last intervals must hold events or the time span shrinks
    n = A.shape[1]
    for k in (0, len(A) - 1):
        if not A[k].any():
            i, j = rng.choice(n, 2, replace=False)
            A[k, i, j] = 1


def periodic_adjacency(n_nodes: int = 10, n_snapshots: int = 40, period: int = 4, density: float = 0.25,
                       seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    off = ~np.eye(n_nodes, dtype=bool)
    bases = []
    for _ in range(period):
        B = (rng.random((n_nodes, n_nodes)) < density) & off
        if not B.any():
            B[0, 1] = True
        bases.append(B)
    return np.stack([bases[k % period] for k in range(n_snapshots)]).astype(np.uint8)


def periodic_toy(n_nodes: int = 10, n_snapshots: int = 40, period: int = 4, density: float = 0.25,
                 seed: int = 0, interval: float = 100.0) -> TemporalEdgeList:
    """A sequence cycling through ``period`` fixed random digraphs."""
    return _events_from_adjacency(periodic_adjacency(n_nodes, n_snapshots, period, density, seed), interval)


def community_adjacency(n_nodes: int = 20, n_snapshots: int = 60, seed: int = 0, n_communities: int = 4,
                        p_persist: float = 0.92, p_within: float = 0.10, p_noise: float = 0.01,
                        persistent_per_node: float = 1.5) -> np.ndarray:
    """Persistent pairs plus bursty within-community traffic plus background noise."""
    rng = np.random.default_rng(seed)
    n = n_nodes
    off = ~np.eye(n, dtype=bool)
    comm = np.arange(n) % n_communities
    same = (comm[:, None] == comm[None, :]) & off
    n_persist = max(1, int(round(persistent_per_node * n)))
    cand = np.argwhere(same)
    pick = cand[rng.choice(len(cand), size=min(n_persist, len(cand)), replace=False)]
    persist = np.zeros((n, n), dtype=bool)
    persist[pick[:, 0], pick[:, 1]] = True
    A = np.zeros((n_snapshots, n, n), dtype=np.uint8)
    for k in range(n_snapshots):
        r = rng.random((n, n))
        active = persist & (r < p_persist)
        active |= same & ~persist & (rng.random((n, n)) < p_within)
        active |= off & (rng.random((n, n)) < p_noise)
        A[k] = active
    _ensure_nonempty_ends(A, rng)
    return A


def community_toy(n_nodes: int = 20, n_snapshots: int = 60, seed: int = 0, interval: float = 100.0,
                  **kwargs) -> TemporalEdgeList:
    A = community_adjacency(n_nodes, n_snapshots, seed, **kwargs)
    reps = np.random.default_rng(seed + 1).integers(1, 3, size=A.shape)
    return _events_from_adjacency(A, interval, reps)


def email_like(n_nodes: int = 167, n_events: int = 82_900, days: float = 271.2, seed: int = 0,
               partners: int = 6) -> TemporalEdgeList:
    """Heavy-tailed email-style traffic with stable correspondent pairs.

    Each sender has a Pareto activity level and a small set of preferred
    recipients receiving most of its mail, so frequent pairs recur in almost
    every snapshot while most pairs stay silent. Timestamps are continuous
    (not interval-aligned) over ``days`` days.
    """
    rng = np.random.default_rng(seed)
    n = n_nodes
    activity = rng.pareto(1.5, n) + 0.2
    weights = np.full((n, n), 0.02)
    for i in range(n):
        fav = rng.choice(np.delete(np.arange(n), i), size=min(partners, n - 1), replace=False)
        weights[i, fav] += rng.pareto(1.2, len(fav)) + 1.0
    np.fill_diagonal(weights, 0.0)
    weights *= activity[:, None]
    p = (weights / weights.sum()).ravel()
    pairs = rng.choice(n * n, size=n_events, p=p)
    src, dst = np.divmod(pairs, n)
    span = days * 86400.0
    ts = np.sort(rng.uniform(0.0, span, n_events))
    ts[0], ts[-1] = 0.0, span
    ts = np.round(ts)
    return edge_list_from_arrays(src, dst, ts, node_count=n)

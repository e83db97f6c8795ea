"""Trigger generation, selection, mixing and poisoning for backdoor attacks on DLP models.

A trigger lives in the coordinates of its target link ``(u, v)``. Candidate
trigger links are the directed pairs over a small node set around the target,
and the generator emits one score per ``(timestep, candidate link)``; that
``T x C`` grid is the *layout* shared by initial triggers and link-gradient
matrices. Flat layout index ``k * C + c`` orders positions by ``(k, u, v)``
because candidate links are kept sorted.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, LSTMParams, Tape, Tensor
from .graph import Sample
from .models import DLPModel, make_optimizer, stack_samples, train_epochs, windows_to_rows

log = logging.getLogger(__name__)

SCENARIOS = {"I": 0, "II": 1}


class BudgetError(ValueError):
    pass


class TriggerError(ValueError):
    pass


def _ceil(x: float) -> int:
    # 0.07 * 20 * 10 is 14.000000000000002 in floating point and must give 14
    return math.ceil(round(x, 9))


@dataclass(frozen=True)
class AttackBudget:
    t: float = 0.05
    p: float = 0.05
    n: float = 0.05
    beta: float = 0.5
    Q: int = 100
    k_gen: int = 20
    reopt_interval: float = 20

    def __post_init__(self):
        for name in ("t", "p", "n"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                raise BudgetError(f"{name} must lie in (0, 1], got {val}")
        if self.beta < 0:
            raise BudgetError(f"beta must be non-negative, got {self.beta}")
        if self.Q < 0 or self.k_gen < 1:
            raise BudgetError("Q must be >= 0 and k_gen >= 1")
        if not self.reopt_interval >= 1:
            raise BudgetError("reopt_interval must be >= 1 (inf disables re-optimization)")

    def max_links(self, n_nodes: int, T: int) -> int:
        """Trigger budget ``m = ceil(t * N * T)``."""
        return max(1, _ceil(self.t * n_nodes * T))

    def node_set_size(self, n_nodes: int) -> int:
        return _ceil(self.n * n_nodes)


@dataclass(frozen=True)
class TargetLink:
    u: int
    v: int
    scenario: str = "I"
    clean_score: float | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be 'I' or 'II', got {self.scenario!r}")
        if self.u == self.v:
            raise ValueError("target link cannot be a self-loop")

    @property
    def desired(self) -> int:
        """Attacker-chosen state: scenario I hides a link, scenario II forges one."""
        return SCENARIOS[self.scenario]

    @property
    def pair(self) -> tuple[int, int]:
        return (self.u, self.v)


@dataclass(frozen=True)
class CandidateSet:
    target: TargetLink
    nodes: tuple[int, ...]
    links: tuple[tuple[int, int], ...]
    surrogates: tuple[tuple[int, int], ...]

    @property
    def width(self) -> int:
        return len(self.links)

    def index(self) -> dict[tuple[int, int], int]:
        return {link: c for c, link in enumerate(self.links)}


@dataclass(frozen=True)
class TriggerSequence:
    """Sparse trigger entries ``(k, u, v, value)`` in target-link coordinates.

    ``mode="set"`` overwrites window entries with ``value``; ``mode="flip"``
    (random baseline) inverts whatever the window holds at mix time.
    """

    entries: tuple[tuple[int, int, int, int], ...]
    budget: int
    n_nodes: int
    T: int
    target: TargetLink
    t_ratio: float | None = None
    mode: str = "set"

    def __post_init__(self):
        if len(self.entries) > self.budget:
            raise BudgetError(f"trigger has {len(self.entries)} entries, budget is {self.budget}")
        keys = [(k, u, v) for k, u, v, _ in self.entries]
        if len(set(keys)) != len(keys):
            raise TriggerError("duplicate trigger positions")
        if self.mode not in ("set", "flip"):
            raise TriggerError(f"unknown trigger mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(
            f"# N={self.n_nodes} T={self.T} m={self.budget} t={self.t_ratio} "
            f"target={self.target.u},{self.target.v} scenario={self.target.scenario} mode={self.mode}\n"
        )
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "u", "v", "value"])
        w.writerows(self.entries)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "TriggerSequence":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise TriggerError("trigger CSV is missing its header line")
        meta = dict(item.split("=", 1) for item in lines[0][1:].split())
        u, v = (int(x) for x in meta["target"].split(","))
        rows = list(csv.reader(lines[2:]))
        entries = tuple(tuple(int(x) for x in r) for r in rows if r)
        t_ratio = None if meta["t"] == "None" else float(meta["t"])
        return cls(entries=entries, budget=int(meta["m"]), n_nodes=int(meta["N"]), T=int(meta["T"]),
                   target=TargetLink(u, v, meta["scenario"]), t_ratio=t_ratio, mode=meta.get("mode", "set"))

    @classmethod
    def load(cls, path: str | Path) -> "TriggerSequence":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


@dataclass
class TriggerRecord:
    trigger: TriggerSequence
    loss_all: float
    loss_atk: float
    loss_r: float
    iteration: int


# ----------------------------------------------------------------- candidates


def neighbour_similarity(snapshots: np.ndarray, nodes: Sequence[int]) -> np.ndarray:
    """Common-neighbour count of every node with each of ``nodes``, summed.

    Neighbourhoods are taken on the undirected union of all given snapshots.
    """
    A = np.asarray(snapshots).astype(bool).any(axis=0)
    und = A | A.T
    np.fill_diagonal(und, False)
    und = und.astype(np.int64)
    common = und @ und.T
    return sum(common[:, x] for x in nodes)


def candidate_links(target: TargetLink, snapshots: np.ndarray, n: float) -> CandidateSet:
    """Trigger node set around ``target`` and its directed candidate links.

    The node set has ``max(2, ceil(n * N))`` nodes: ``u``, ``v`` and the nodes
    most similar to them (ties by node id). Surrogate pairs ``(w, v)`` use the
    remaining nodes in rank order.
    """
    snapshots = np.asarray(snapshots)
    N = snapshots.shape[-1]
    if N < 2:
        raise BudgetError("need at least two nodes")
    size = _ceil(n * N)
    if size < 2:
        warnings.warn(f"node ratio {n} gives {size} trigger node(s) for N={N}; using the target pair only",
                      RuntimeWarning, stacklevel=2)
        size = 2
    size = min(size, N)
    u, v = target.u, target.v
    sim = neighbour_similarity(snapshots, (u, v))
    others = [w for w in range(N) if w not in (u, v)]
    others.sort(key=lambda w: (-sim[w], w))
    chosen = others[: size - 2]
    nodes = tuple(sorted((u, v, *chosen)))
    links = tuple((a, b) for a in nodes for b in nodes if a != b)
    surrogates = tuple((w, v) for w in chosen)
    return CandidateSet(target=target, nodes=nodes, links=links, surrogates=surrogates)


# ------------------------------------------------------------------ generator


class TriggerGenerator:
    """Dense encoder, LSTM and sigmoid decoder emitting ``T x width`` scores."""

    def __init__(self, T: int, width: int, encoder_units: int = 256, lstm_units: int = 256, seed: int = 0,
                 lr: float = 0.01, weight_decay: float = 0.0005):
        if T < 1 or width < 1:
            raise ValueError("generator needs positive T and width")
        self.T, self.width = T, width
        rng = np.random.default_rng(seed)
        H = lstm_units
        self.params = {
            "enc.W": ad.init_uniform(rng, width, (width, encoder_units), "enc.W"),
            "enc.b": ad.init_uniform(rng, width, (encoder_units,), "enc.b"),
            "lstm.Wx": ad.init_uniform(rng, encoder_units + H, (encoder_units, 4 * H), "lstm.Wx"),
            "lstm.Wh": ad.init_uniform(rng, encoder_units + H, (H, 4 * H), "lstm.Wh"),
            "lstm.b": ad.init_uniform(rng, encoder_units + H, (4 * H,), "lstm.b"),
            "dec.W": ad.init_uniform(rng, H, (H, width), "dec.W"),
            "dec.b": ad.init_uniform(rng, H, (width,), "dec.b"),
        }
        self.optimizer = Adam(self.params, lr=lr, weight_decay=weight_decay)

    def forward(self, z: np.ndarray | None = None) -> Tensor:
        z = np.zeros((self.T, self.width)) if z is None else np.asarray(z, dtype=np.float64)
        if z.shape != (self.T, self.width):
            raise ad.DimensionError(f"noise must have shape {(self.T, self.width)}, got {z.shape}")
        p = self.params
        e = ad.linear_forward(p["enc.W"], p["enc.b"], Tensor(z), "relu")
        h = ad.lstm_forward(LSTMParams(p["lstm.Wx"], p["lstm.Wh"], p["lstm.b"]),
                            ad.reshape(e, (self.T, 1, e.shape[1])))
        h = ad.reshape(h, (self.T, h.shape[2]))
        return ad.linear_forward(p["dec.W"], p["dec.b"], h, "sigmoid")

    def checksum(self) -> str:
        return ad.parameter_checksum(self.params)


def generate_initial_trigger(gen: TriggerGenerator, z: np.ndarray | None = None) -> np.ndarray:
    """Initial-trigger scores ``g_o`` in ``[0, 1]^{T x width}``; ``z`` defaults to zeros."""
    return gen.forward(z).data


# ------------------------------------------------------------ injection plans


def anchor_translation(target: TargetLink | tuple[int, int], anchor: tuple[int, int], n_nodes: int) -> np.ndarray:
    """Node permutation ``sigma`` with ``sigma(u) = a`` and ``sigma(v) = b``."""
    u, v = target.pair if isinstance(target, TargetLink) else target
    a, b = anchor
    if a == b:
        raise TriggerError("anchor cannot be a self-loop")
    for x in (u, v, a, b):
        if not 0 <= x < n_nodes:
            raise TriggerError(f"node {x} outside [0, {n_nodes})")
    perm = np.arange(n_nodes)

    def swap(i, j):
        # compose a transposition of the *images* i and j after perm
        pi, pj = perm == i, perm == j
        perm[pi], perm[pj] = j, i

    swap(u, a)
    swap(int(perm[v]), b)
    return perm


def _injection_index(positions: np.ndarray, sigma: np.ndarray, n_samples: int, n_nodes: int):
    """Row-layout index arrays for placing ``(k, a, b)`` positions in every sample."""
    k = np.repeat(positions[:, 0][None, :], n_samples, axis=0).ravel()
    a = sigma[positions[:, 1]]
    b = sigma[positions[:, 2]]
    offs = (np.arange(n_samples) * n_nodes)[:, None]
    rows = (offs + a[None, :]).ravel()
    cols = np.repeat(b[None, :], n_samples, axis=0).ravel()
    return k, rows, cols


def layout_positions(candidates: CandidateSet, T: int) -> np.ndarray:
    """All ``(k, u, v)`` layout positions in flat-index order."""
    links = np.array(candidates.links, dtype=np.int64)
    C = len(links)
    ks = np.repeat(np.arange(T), C)
    return np.column_stack([ks, np.tile(links[:, 0], T), np.tile(links[:, 1], T)])


def trigger_positions(trigger: TriggerSequence, candidates: CandidateSet) -> np.ndarray:
    """Flat layout index of every trigger entry."""
    idx = candidates.index()
    C = candidates.width
    try:
        return np.array([k * C + idx[(u, v)] for k, u, v, _ in trigger.entries], dtype=np.int64)
    except KeyError as exc:
        raise TriggerError(f"trigger entry {exc} is not a candidate link") from None


@dataclass
class _Batch:
    rows: np.ndarray  # (T, D*N, N) clean input rows
    labels: np.ndarray  # (D*N, N) backdoored labels
    D: int
    N: int
    target_rows: np.ndarray
    target_col: int


def _prepare_batch(samples: Sequence[Sample], target: TargetLink, desired: int,
                   anchor: tuple[int, int] | None = None) -> _Batch:
    windows, labels = stack_samples(samples)
    D, _, N, _ = windows.shape
    a, b = anchor if anchor is not None else target.pair
    labels[:, a, b] = desired
    return _Batch(rows=windows_to_rows(windows), labels=labels.reshape(D * N, N), D=D, N=N,
                  target_rows=np.arange(D) * N + a, target_col=b)


def _objective(disc: DLPModel, X: Tensor, batch: _Batch, desired: int, beta: float, objective: str = "all"):
    pred = disc.forward(X)
    scores = ad.gather(pred, (batch.target_rows, np.full(batch.D, batch.target_col)))
    l_atk = ad.mean_all(ad.mul(ad.sub(scores, float(desired)), ad.sub(scores, float(desired))))
    l_r = ad.mse_loss(pred, batch.labels)
    if objective == "atk":
        total = l_atk
    elif objective == "all":
        total = total_loss(l_atk, l_r, beta)
    else:
        raise ValueError(f"objective must be 'all' or 'atk', got {objective!r}")
    return total, l_atk, l_r


# ---------------------------------------------------------------------- losses


def attack_loss(disc: DLPModel, batch: Sequence[Sample], target: TargetLink, desired: int | None = None) -> float:
    """Mean squared gap between the target-link score and the desired state over a batch."""
    if not batch:
        raise ValueError("empty batch")
    desired = target.desired if desired is None else desired
    windows = np.stack([s.window for s in batch])
    scores = disc.predict_batch(windows)[:, target.u, target.v]
    return float(np.mean((scores - desired) ** 2))


def global_loss(disc: DLPModel, batch: Sequence[Sample]) -> float:
    """Mean over samples of the full-snapshot MSE against each (backdoored) label."""
    if not batch:
        raise ValueError("empty batch")
    windows, labels = stack_samples(batch)
    pred = disc.predict_batch(windows)
    if pred.shape != labels.shape:
        raise ad.DimensionError(f"prediction {pred.shape} vs labels {labels.shape}")
    return float(np.mean(((pred - labels) ** 2).reshape(len(batch), -1).mean(axis=1)))


def total_loss(l_atk, l_r, beta: float = 0.5):
    """``L_atk + beta * L_r``; accepts floats or tensors."""
    if beta < 0:
        raise BudgetError(f"beta must be non-negative, got {beta}")
    if isinstance(l_atk, Tensor) or isinstance(l_r, Tensor):
        return ad.add(l_atk, ad.mul(l_r, beta))
    return l_atk + beta * l_r


# ----------------------------------------------------------- link gradients


def link_gradient_matrix(disc: DLPModel, batch: Sequence[Sample], candidates: CandidateSet, beta: float = 0.5,
                         values: np.ndarray | None = None, objective: str = "all") -> np.ndarray:
    """``d L / d (injected score)`` for every ``(timestep, candidate link)``.

    With ``values`` (a ``T x C`` initial trigger) those scores are written into
    every window of the batch; with ``values=None`` the windows keep their own
    entries and the gradient is taken with respect to them. Either way the
    per-position gradient is summed over the batch. Labels carry the forced
    target state, as in poisoned training data.
    """
    target = candidates.target
    desired = target.desired
    b = _prepare_batch(batch, target, desired)
    T = b.rows.shape[0]
    pos = layout_positions(candidates, T)
    sigma = np.arange(b.N)
    index = _injection_index(pos, sigma, b.D, b.N)
    P = len(pos)
    if values is None:
        vals = b.rows[index].reshape(b.D, P)
    else:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (T, candidates.width):
            raise ad.DimensionError(f"values must have layout shape {(T, candidates.width)}, got {values.shape}")
        vals = np.broadcast_to(values.reshape(1, P), (b.D, P))
    v = Tensor(np.ascontiguousarray(vals), requires_grad=True)
    with Tape() as tape:
        X = ad.inject(b.rows, index, v, np.arange(b.D * P))
        loss, _, _ = _objective(disc, X, b, desired, beta, objective)
    grad = tape.backward(loss)[v]
    out = grad.sum(axis=0).reshape(T, candidates.width)
    if not np.isfinite(out).all():
        raise ad.NonFiniteError("non-finite link gradient")
    return out


def gradient_select(grad: np.ndarray, g_o: np.ndarray, m: int, candidates: CandidateSet,
                    n_nodes: int | None = None, t_ratio: float | None = None, add_only: bool = False
                    ) -> TriggerSequence:
    """Keep the ``m`` layout positions with the largest ``|grad|``.

    Ties go to the lexicographically smaller ``(k, u, v)``. A selected entry
    is set to 1 where the loss decreases as the score grows (negative
    gradient), to 0 where it increases, and to ``round(g_o)`` at zero
    gradient. ``add_only`` restricts the choice to entries of value 1.
    """
    grad = np.asarray(grad, dtype=np.float64)
    g_o = np.asarray(g_o, dtype=np.float64)
    if grad.size == 0:
        raise TriggerError("empty gradient")
    if grad.shape != g_o.shape or grad.shape[1] != candidates.width:
        raise ad.DimensionError(f"gradient {grad.shape} and initial trigger {g_o.shape} must share the layout")
    if m < 1:
        raise BudgetError("m must be >= 1")
    T = grad.shape[0]
    flat = grad.ravel()
    value = np.where(flat < 0, 1, np.where(flat > 0, 0, (g_o.ravel() >= 0.5).astype(int)))
    order = np.argsort(-np.abs(flat), kind="stable")
    if add_only:
        order = order[value[order] == 1]
    chosen = np.sort(order[:m])
    pos = layout_positions(candidates, T)[chosen]
    entries = tuple((int(k), int(u), int(v), int(val)) for (k, u, v), val in zip(pos, value[chosen]))
    N = n_nodes if n_nodes is not None else max(max(candidates.nodes) + 1, 2)
    return TriggerSequence(entries=entries, budget=m, n_nodes=N, T=T, target=candidates.target, t_ratio=t_ratio)


# ---------------------------------------------------------------------- mixing


def mix(sample: Sample, trigger: TriggerSequence, anchor: tuple[int, int] | None = None,
        forced_label: int | None = None) -> Sample:
    """Overwrite window entries with the trigger, translated onto ``anchor``.

    ``anchor`` defaults to the trigger's own target. With ``forced_label``
    the label entry at the anchor pair is set to that state.
    """
    N = sample.n_nodes
    if sample.T != trigger.T:
        raise TriggerError(f"trigger has T={trigger.T}, sample window has {sample.T}")
    anchor = anchor if anchor is not None else trigger.target.pair
    sigma = anchor_translation(trigger.target, anchor, N)
    window = np.array(sample.window, copy=True)
    for k, a, b, val in trigger.entries:
        if not (0 <= a < N and 0 <= b < N) or not 0 <= k < sample.T:
            raise TriggerError(f"trigger entry {(k, a, b)} outside the sample")
        ta, tb = sigma[a], sigma[b]
        window[k, ta, tb] = 1 - window[k, ta, tb] if trigger.mode == "flip" else val
    label = sample.label
    if forced_label is not None:
        label = np.array(label, copy=True)
        label[anchor] = forced_label
    return Sample(window=window, label=label, t_index=sample.t_index)


# ------------------------------------------------------------------- optimize


def sample_batch(samples: Sequence[Sample], batch_size: int, seed: int) -> list[Sample]:
    """Seeded subset of ``min(batch_size, len(samples))`` samples in chronological order."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False))
    return [samples[i] for i in pick]


def optimize_generator(gen: TriggerGenerator, disc: DLPModel, train_samples: Sequence[Sample],
                       candidates: CandidateSet, budget: AttackBudget, seed: int = 0, k_gen: int | None = None,
                       batch_size: int = 16, objective: str = "all", add_only: bool = False
                       ) -> list[TriggerRecord]:
    """Alternate trigger selection and generator updates against a frozen model.

    Each iteration draws ``g_o`` from the generator, ranks layout positions by
    the link gradient at ``g_o``, keeps the top ``m`` as a discrete trigger,
    scores it with ``L_all`` on a fixed batch of training windows and updates
    the generator with Adam. Gradients cross the discrete selection
    straight-through: the forward pass uses the rounded values, the backward
    pass routes their gradient to the underlying scores. ``disc`` is never
    modified.
    """
    if not train_samples:
        raise ValueError("no training samples for trigger optimization")
    k_gen = budget.k_gen if k_gen is None else k_gen
    if k_gen < 1:
        raise BudgetError("k_gen must be >= 1")
    target = candidates.target
    desired = target.desired
    T, N = disc.window, disc.n_nodes
    if (gen.T, gen.width) != (T, candidates.width):
        raise ad.DimensionError("generator layout does not match the candidate layout")
    m = budget.max_links(N, T)
    batch = sample_batch(train_samples, batch_size, seed)
    b = _prepare_batch(batch, target, desired)
    all_pos = layout_positions(candidates, T)
    sigma = np.arange(N)

    records: list[TriggerRecord] = []
    for it in range(k_gen):
        try:
            g_o = generate_initial_trigger(gen)
            grad = link_gradient_matrix(disc, batch, candidates, budget.beta, values=g_o, objective=objective)
            trig = gradient_select(grad, g_o, m, candidates, n_nodes=N, t_ratio=budget.t, add_only=add_only)
            flat_pos = trigger_positions(trig, candidates)
            sel_vals = np.array([e[3] for e in trig.entries], dtype=np.float64)
            index = _injection_index(all_pos[flat_pos], sigma, b.D, N)
            with Tape() as tape:
                g_t = gen.forward()
                chosen = ad.gather(ad.reshape(g_t, (T * candidates.width,)), (flat_pos,))
                st = ad.add(chosen, sel_vals - chosen.data)
                X = ad.inject(b.rows, index, st, np.tile(np.arange(len(flat_pos)), b.D))
                l_all, l_atk, l_r = _objective(disc, X, b, desired, budget.beta)
            grads = tape.backward(l_all)
            records.append(TriggerRecord(trig, float(l_all.data), float(l_atk.data), float(l_r.data), it))
            gen.optimizer.step({k: grads[p] for k, p in gen.params.items()})
        except ad.NonFiniteError as exc:
            log.warning("trigger optimization diverged at iteration %d: %s", it, exc)
            break
    return records


def filter_best(records: Sequence[TriggerRecord]) -> TriggerRecord:
    """Record with the lowest ``L_all``; the earliest wins ties."""
    if not records:
        raise TriggerError("trigger set is empty")
    best = records[0]
    for r in records[1:]:
        if r.loss_all < best.loss_all:
            best = r
    return best


# -------------------------------------------------------------------- poisoning


@dataclass(frozen=True)
class PoisonPlan:
    """Which samples are poisoned and at which anchor pairs.

    ``anchors[j]`` lists the anchor pairs mixed into sample ``indices[j]``.
    """

    indices: tuple[int, ...]
    anchors: tuple[tuple[tuple[int, int], ...], ...]
    desired: int
    n_samples: int

    def flags(self) -> np.ndarray:
        f = np.zeros(self.n_samples, dtype=bool)
        f[list(self.indices)] = True
        return f

    def manifest_csv(self) -> str:
        lines = ["index,anchor_u,anchor_v,forced_label"]
        for i, group in zip(self.indices, self.anchors):
            lines += [f"{i},{a},{b},{self.desired}" for a, b in group]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest_csv(cls, text: str, n_samples: int) -> "PoisonPlan":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise TriggerError("poison manifest has no rows")
        groups: dict[int, list[tuple[int, int]]] = {}
        for r in rows:
            groups.setdefault(int(r["index"]), []).append((int(r["anchor_u"]), int(r["anchor_v"])))
        desired = {int(r["forced_label"]) for r in rows}
        if len(desired) != 1:
            raise TriggerError("poison manifest mixes forced labels")
        idx = tuple(groups)
        return cls(indices=idx, anchors=tuple(tuple(groups[i]) for i in idx), desired=desired.pop(),
                   n_samples=n_samples)


def plan_poison(n_samples: int, target: TargetLink, p: float, surrogates: Sequence[tuple[int, int]] = (),
                seed: int = 0, anchor_mode: str = "all") -> PoisonPlan:
    """Choose ``ceil(p * n_samples)`` samples to poison.

    ``anchor_mode="all"`` mixes the trigger at the target pair and every
    surrogate pair of each chosen sample; ``"cycle"`` gives each chosen sample
    a single anchor, cycling through target and surrogates.
    """
    if not 0.0 < p <= 1.0:
        raise BudgetError(f"poison ratio must lie in (0, 1], got {p}")
    count = _ceil(p * n_samples)
    if count < 1 or p * n_samples < 1:
        warnings.warn(f"poison ratio {p} covers {p * n_samples:.2f} samples; poisoning one", RuntimeWarning,
                      stacklevel=2)
        count = max(count, 1)
    count = min(count, n_samples)
    rng = np.random.default_rng(seed)
    indices = tuple(int(i) for i in np.sort(rng.choice(n_samples, size=count, replace=False)))
    pool = (target.pair, *surrogates)
    if anchor_mode == "all":
        anchors = tuple(pool for _ in range(count))
    elif anchor_mode == "cycle":
        anchors = tuple((pool[j % len(pool)],) for j in range(count))
    else:
        raise ValueError(f"anchor_mode must be 'all' or 'cycle', got {anchor_mode!r}")
    return PoisonPlan(indices=indices, anchors=anchors, desired=target.desired, n_samples=n_samples)


def apply_poison(samples: Sequence[Sample], plan: PoisonPlan, trigger: TriggerSequence) -> list[Sample]:
    out = list(samples)
    for i, group in zip(plan.indices, plan.anchors):
        s = samples[i]
        for anchor in group:
            s = mix(s, trigger, anchor=anchor, forced_label=plan.desired)
        out[i] = s
    return out


def poison_dataset(train_samples: Sequence[Sample], trigger: TriggerSequence, target: TargetLink, p: float,
                   surrogates: Sequence[tuple[int, int]] = (), seed: int = 0, anchor_mode: str = "all"
                   ) -> tuple[list[Sample], PoisonPlan]:
    """Mix the trigger into ``ceil(p * count)`` seeded samples, forcing the target state.

    See :func:`plan_poison` for how anchors are assigned.
    """
    plan = plan_poison(len(train_samples), target, p, surrogates, seed, anchor_mode)
    return apply_poison(train_samples, plan, trigger), plan


@dataclass
class BackdoorTraining:
    model: DLPModel
    trigger: TriggerSequence
    history: list[float]
    trigger_history: list[tuple[int, TriggerSequence, float | None]] = field(default_factory=list)


def train_backdoored(model: DLPModel, train_samples: Sequence[Sample], plan: PoisonPlan, trigger: TriggerSequence,
                     Q: int, reopt_interval: float = math.inf,
                     reoptimize: Callable[[DLPModel], TriggerRecord] | None = None,
                     batch_size: int | None = None, seed: int = 0) -> BackdoorTraining:
    """Train ``model`` in place for ``Q`` iterations on poisoned data.

    Every ``reopt_interval`` iterations ``reoptimize(model)`` produces a fresh
    trigger against the current model and the poisoned samples are re-mixed
    from their clean originals. ``reopt_interval = inf`` keeps the first
    trigger throughout.
    """
    if Q < 0:
        raise BudgetError("Q must be non-negative")
    state = {"trigger": trigger}
    hist: list[tuple[int, TriggerSequence, float | None]] = [(0, trigger, None)]

    def arrays():
        return stack_samples(apply_poison(train_samples, plan, state["trigger"]))

    def callback(epoch: int):
        if (reoptimize is None or not math.isfinite(reopt_interval) or epoch == 0
                or epoch % int(reopt_interval) != 0):
            return None
        rec = reoptimize(model)
        state["trigger"] = rec.trigger
        hist.append((epoch, rec.trigger, rec.loss_all))
        return arrays()

    windows, labels = arrays()
    history = train_epochs(model, windows, labels, Q, np.random.default_rng(seed), batch_size,
                           opt=make_optimizer(model), callback=callback)
    return BackdoorTraining(model=model, trigger=state["trigger"], history=history, trigger_history=hist)


# -------------------------------------------------------------------- baselines


def baseline_rb(m: int, candidates: CandidateSet, T: int, n_nodes: int, seed: int = 0,
                t_ratio: float | None = None) -> TriggerSequence:
    """``m`` distinct random layout positions whose state is flipped at mix time."""
    total = T * candidates.width
    m_eff = min(m, total)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=m_eff, replace=False))
    pos = layout_positions(candidates, T)[chosen]
    entries = tuple((int(k), int(u), int(v), 1) for k, u, v in pos)
    return TriggerSequence(entries=entries, budget=m, n_nodes=n_nodes, T=T, target=candidates.target,
                           t_ratio=t_ratio, mode="flip")


def baseline_gb(disc: DLPModel, batch: Sequence[Sample], candidates: CandidateSet, m: int, beta: float = 0.5,
                t_ratio: float | None = None, objective: str = "all") -> TriggerSequence:
    """One link-gradient pass on clean windows followed by top-``m`` selection."""
    grad = link_gradient_matrix(disc, batch, candidates, beta, values=None, objective=objective)
    # zero-gradient entries fall back to the current state; the clean batch mean stands in for it
    current = np.mean([s.window for s in batch], axis=0)
    pos = layout_positions(candidates, disc.window)
    g_o = current[pos[:, 0], pos[:, 1], pos[:, 2]].reshape(grad.shape)
    return gradient_select(grad, g_o, m, candidates, n_nodes=disc.n_nodes, t_ratio=t_ratio)


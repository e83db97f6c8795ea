"""Dynamic link prediction models built on :mod:`dynbackdoor.autodiff`.

Every family maps a window of ``T`` adjacency matrices to scores for the next
adjacency matrix. Node rows are processed as a batch with shared weights, so
the prediction for row ``u`` only sees the history of row ``u``:

* ``dynae``    concatenate the ``T`` rows, dense encoder, dense decoder.
* ``dynrnn``   stacked LSTM directly over adjacency rows, dense decoder.
* ``dynaernn`` per-timestep dense encoder, LSTM, dense decoder.
* ``elstmd``   same composition as ``dynaernn`` with its own unit counts.
* ``ddne``     forward and reversed LSTM encoders over the rows, concatenated,
               then a dense decoder.

Decoder hidden layers use ReLU and the output layer a sigmoid.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, LSTMParams, Tape, Tensor
from .graph import Sample
from .metrics import pairwise_auc

log = logging.getLogger(__name__)

FAMILIES = ("ddne", "dynae", "dynrnn", "dynaernn", "elstmd")


class ArchSpecError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    family: str
    encoder_units: tuple[int, ...]
    recurrent_units: tuple[int, ...]
    decoder_units: tuple[int, ...]
    lr: float = 0.01
    weight_decay: float = 0.0005

    @classmethod
    def default(cls, family: str, n_nodes: int, large: bool = False, hidden: int | None = None) -> "ArchSpec":
        """Unit counts for a family.

        ``large=False`` gives the Radoslaw/Contact sizes, ``large=True`` the
        Fb-forum/DNC sizes. ``hidden`` overrides every hidden width, which is
        how the tests and toy runs get small models.
        """
        h = hidden if hidden is not None else (256 if large else 128)
        lstm = hidden if hidden is not None else (256 if large else 128)
        lr = 0.001 if large else 0.01
        if family == "ddne":
            return cls(family, (h,), (), (h, n_nodes), lr)
        if family == "dynae":
            return cls(family, (h,), (), (n_nodes,), lr)
        if family == "dynrnn":
            return cls(family, (), (h,), (n_nodes,), lr)
        if family == "dynaernn":
            rec = hidden if hidden is not None else 128
            return cls(family, (h,), (rec,), (n_nodes,), lr)
        if family == "elstmd":
            return cls(family, (h,), (lstm,), (n_nodes,), lr)
        raise ArchSpecError(f"unknown model family {family!r}; expected one of {FAMILIES}")

    def validate(self, n_nodes: int) -> None:
        if self.family not in FAMILIES:
            raise ArchSpecError(f"unknown model family {self.family!r}")
        if not self.decoder_units or self.decoder_units[-1] != n_nodes:
            raise ArchSpecError(
                f"decoder output must equal the node count {n_nodes}, got {self.decoder_units}"
            )
        need_enc = self.family in ("ddne", "dynae", "dynaernn", "elstmd")
        need_rec = self.family in ("dynrnn", "dynaernn", "elstmd")
        if need_enc != bool(self.encoder_units):
            raise ArchSpecError(f"{self.family}: encoder_units must be {'non-empty' if need_enc else 'empty'}")
        if need_rec != bool(self.recurrent_units):
            raise ArchSpecError(f"{self.family}: recurrent_units must be {'non-empty' if need_rec else 'empty'}")
        if any(u < 1 for u in (*self.encoder_units, *self.recurrent_units, *self.decoder_units)):
            raise ArchSpecError("unit counts must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ArchSpecError("lr must be positive and weight_decay non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            family=d["family"],
            encoder_units=tuple(int(x) for x in d["encoder_units"]),
            recurrent_units=tuple(int(x) for x in d["recurrent_units"]),
            decoder_units=tuple(int(x) for x in d["decoder_units"]),
            lr=float(d["lr"]),
            weight_decay=float(d["weight_decay"]),
        )


@dataclass
class DLPModel:
    spec: ArchSpec
    n_nodes: int
    window: int
    seed: int
    params: dict[str, Tensor]
    trained_epochs: int = 0
    history: list[float] = field(default_factory=list)

    # -- wiring ----------------------------------------------------------------

    def _dense(self, x: Tensor, prefix: str, n_layers: int, last_act: str) -> Tensor:
        for i in range(n_layers):
            act = last_act if i == n_layers - 1 else "relu"
            x = ad.linear_forward(self.params[f"{prefix}{i}.W"], self.params[f"{prefix}{i}.b"], x, act)
        return x

    def _lstm_stack(self, x: Tensor, prefix: str, n_layers: int) -> Tensor:
        for i in range(n_layers):
            cell = LSTMParams(self.params[f"{prefix}{i}.Wx"], self.params[f"{prefix}{i}.Wh"],
                              self.params[f"{prefix}{i}.b"])
            x = ad.lstm_forward(cell, x)
        return x

    def forward(self, x: Tensor) -> Tensor:
        """Map a ``(T, B, N)`` stack of adjacency rows to ``(B, N)`` scores."""
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.n_nodes:
            raise ad.DimensionError(f"expected (T, B, {self.n_nodes}) input, got {x.shape}")
        if x.shape[0] != self.window:
            raise ad.DimensionError(f"model was built for windows of {self.window}, got {x.shape[0]}")
        T, B, N = x.shape
        s = self.spec
        fam = s.family
        n_dec = len(s.decoder_units)
        if fam == "dynae":
            flat = ad.reshape(ad.transpose(x, (1, 0, 2)), (B, T * N))
            h = self._dense(flat, "enc", len(s.encoder_units), "relu")
        elif fam == "dynrnn":
            h = ad.getitem(self._lstm_stack(x, "rnn", len(s.recurrent_units)), -1)
        elif fam in ("dynaernn", "elstmd"):
            e = self._dense(ad.reshape(x, (T * B, N)), "enc", len(s.encoder_units), "relu")
            e = ad.reshape(e, (T, B, s.encoder_units[-1]))
            h = ad.getitem(self._lstm_stack(e, "rnn", len(s.recurrent_units)), -1)
        elif fam == "ddne":
            hf = ad.getitem(self._lstm_stack(x, "fwd", len(s.encoder_units)), -1)
            hb = ad.getitem(self._lstm_stack(ad.getitem(x, slice(None, None, -1)), "bwd",
                                             len(s.encoder_units)), -1)
            h = ad.concat([hf, hb], axis=1)
        else:  # pragma: no cover - guarded by validate
            raise ArchSpecError(fam)
        return self._dense(h, "dec", n_dec, "sigmoid")

    def forward_windows(self, windows) -> Tensor:
        """Scores for a batch of windows ``(D, T, N, N)`` as a ``(D * N, N)`` tensor."""
        if isinstance(windows, Tensor):
            x = windows
        else:
            x = Tensor(windows_to_rows(np.asarray(windows)))
        return self.forward(x)

    # -- inference -------------------------------------------------------------

    def predict_batch(self, windows: np.ndarray, chunk: int = 32) -> np.ndarray:
        windows = np.asarray(windows)
        if windows.ndim != 4 or windows.shape[2:] != (self.n_nodes, self.n_nodes):
            raise ad.DimensionError(f"expected (D, T, {self.n_nodes}, {self.n_nodes}) windows, got {windows.shape}")
        out = []
        for start in range(0, len(windows), chunk):
            part = windows[start:start + chunk]
            out.append(self.forward_windows(part).data.reshape(len(part), self.n_nodes, self.n_nodes))
        return np.concatenate(out, axis=0)

    def predict(self, sample: Sample | np.ndarray) -> np.ndarray:
        """Predicted next-snapshot scores in ``[0, 1]^{N x N}``."""
        window = sample.window if isinstance(sample, Sample) else np.asarray(sample)
        if window.shape[1:] != (self.n_nodes, self.n_nodes):
            raise ad.DimensionError(f"sample has {window.shape[1]} nodes, model expects {self.n_nodes}")
        return self.predict_batch(window[None])[0]

    def predict_binary(self, sample: Sample | np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return (self.predict(sample) >= threshold).astype(np.uint8)

    def link_score(self, sample: Sample | np.ndarray, link: tuple[int, int]) -> float:
        u, v = link
        if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
            raise IndexError(f"link {link} outside node range [0, {self.n_nodes})")
        return float(self.predict(sample)[u, v])

    # -- bookkeeping -----------------------------------------------------------

    def copy(self) -> "DLPModel":
        params = {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        return DLPModel(self.spec, self.n_nodes, self.window, self.seed, params, self.trained_epochs,
                        list(self.history))

    def checksum(self) -> str:
        return ad.parameter_checksum(self.params)

    def header(self) -> dict:
        return {
            "family": self.spec.family,
            "spec": self.spec.to_dict(),
            "n_nodes": self.n_nodes,
            "window": self.window,
            "seed": self.seed,
            "trained_epochs": self.trained_epochs,
        }

    def save(self, path: str | Path) -> None:
        ad.save_checkpoint(path, self.params, self.header())

    @classmethod
    def load(cls, path: str | Path) -> "DLPModel":
        arrays, head = ad.load_checkpoint(path)
        spec = ArchSpec.from_dict(head["spec"])
        model = build_model(spec, head["n_nodes"], head["window"], head["seed"])
        for k, arr in arrays.items():
            if model.params[k].shape != arr.shape:
                raise ArchSpecError(f"checkpoint parameter {k} has shape {arr.shape}")
            model.params[k].data = arr
        model.trained_epochs = int(head.get("trained_epochs", 0))
        return model


def windows_to_rows(windows: np.ndarray) -> np.ndarray:
    """``(D, T, N, N)`` windows to the ``(T, D * N, N)`` row layout models consume."""
    D, T, N, _ = windows.shape
    return np.ascontiguousarray(windows.transpose(1, 0, 2, 3).reshape(T, D * N, N), dtype=np.float64)


def build_model(spec: ArchSpec, n_nodes: int, window: int, seed: int) -> DLPModel:
    spec.validate(n_nodes)
    if window < 1:
        raise ArchSpecError("window length must be positive")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def dense(prefix: str, units: Sequence[int], d_in: int) -> int:
        for i, u in enumerate(units):
            params[f"{prefix}{i}.W"] = ad.init_uniform(rng, d_in, (d_in, u), f"{prefix}{i}.W")
            params[f"{prefix}{i}.b"] = ad.init_uniform(rng, d_in, (u,), f"{prefix}{i}.b")
            d_in = u
        return d_in

    def lstm(prefix: str, units: Sequence[int], d_in: int) -> int:
        for i, h in enumerate(units):
            fan = d_in + h
            params[f"{prefix}{i}.Wx"] = ad.init_uniform(rng, fan, (d_in, 4 * h), f"{prefix}{i}.Wx")
            params[f"{prefix}{i}.Wh"] = ad.init_uniform(rng, fan, (h, 4 * h), f"{prefix}{i}.Wh")
            params[f"{prefix}{i}.b"] = ad.init_uniform(rng, fan, (4 * h,), f"{prefix}{i}.b")
            d_in = h
        return d_in

    N = n_nodes
    fam = spec.family
    if fam == "dynae":
        d = dense("enc", spec.encoder_units, window * N)
    elif fam == "dynrnn":
        d = lstm("rnn", spec.recurrent_units, N)
    elif fam in ("dynaernn", "elstmd"):
        d = dense("enc", spec.encoder_units, N)
        d = lstm("rnn", spec.recurrent_units, d)
    else:
        d = lstm("fwd", spec.encoder_units, N)
        d = 2 * lstm("bwd", spec.encoder_units, N)
    dense("dec", spec.decoder_units, d)
    return DLPModel(spec=spec, n_nodes=N, window=window, seed=seed, params=params)


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    windows = np.stack([s.window for s in samples]).astype(np.float64)
    labels = np.stack([s.label for s in samples]).astype(np.float64)
    return windows, labels


def make_optimizer(model: DLPModel) -> Adam:
    return Adam(model.params, lr=model.spec.lr, weight_decay=model.spec.weight_decay)


MAX_ROWS_PER_CHUNK = 2048


def train_step(model: DLPModel, opt: Adam, windows: np.ndarray, labels: np.ndarray,
               max_rows: int = MAX_ROWS_PER_CHUNK) -> float:
    """One Adam step on the mean squared error over whole predicted snapshots.

    Large batches are evaluated in chunks of at most ``max_rows`` node rows with
    gradients summed, weighted by chunk size, so the step equals the full-batch
    step while the tape only ever holds one chunk.
    """
    D, _, N, _ = windows.shape
    per = max(1, max_rows // N)
    total = 0.0
    acc: dict[str, np.ndarray] = {}
    for start in range(0, D, per):
        w = (min(D, start + per) - start) / D
        with Tape() as tape:
            pred = model.forward_windows(windows[start:start + per])
            part = ad.mse_loss(pred, labels[start:start + per].reshape(-1, N))
        grads = tape.backward(part)
        for k, p in model.params.items():
            g = w * grads[p]
            acc[k] = g if k not in acc else acc[k] + g
        total += w * float(part.data)
    try:
        opt.step(acc)
    except ad.NonFiniteError as exc:
        raise TrainingDiverged(f"{model.spec.family}: {exc}") from exc
    return total


def train_epochs(model: DLPModel, windows: np.ndarray, labels: np.ndarray, epochs: int,
                 rng: np.random.Generator, batch_size: int | None = None, opt: Adam | None = None,
                 callback=None) -> list[float]:
    """Run ``epochs`` passes; ``callback(epoch)`` may replace data between epochs.

    The callback returns ``None`` or a new ``(windows, labels)`` pair.
    """
    opt = opt if opt is not None else make_optimizer(model)
    history = []
    n = len(windows)
    for epoch in range(epochs):
        if callback is not None:
            new = callback(epoch)
            if new is not None:
                windows, labels = new
        if batch_size is None or batch_size >= n:
            losses = [train_step(model, opt, windows, labels)]
            weights = [n]
        else:
            order = rng.permutation(n)
            losses, weights = [], []
            for start in range(0, n, batch_size):
                idx = np.sort(order[start:start + batch_size])
                losses.append(train_step(model, opt, windows[idx], labels[idx]))
                weights.append(len(idx))
        epoch_loss = float(np.average(losses, weights=weights))
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(f"loss became {epoch_loss} at epoch {epoch}")
        history.append(epoch_loss)
        model.trained_epochs += 1
    model.history.extend(history)
    return history


def train_clean(model: DLPModel, train_samples: Sequence[Sample], epochs: int = 100, seed: int = 0,
                batch_size: int | None = None) -> tuple[DLPModel, list[float]]:
    """Fit ``model`` in place on clean samples; returns the model and per-epoch losses."""
    if not train_samples:
        raise ValueError("training set is empty")
    windows, labels = stack_samples(train_samples)
    if windows.shape[1] != model.window:
        raise ad.DimensionError(f"samples have windows of {windows.shape[1]}, model expects {model.window}")
    history = train_epochs(model, windows, labels, epochs, np.random.default_rng(seed), batch_size)
    if history:
        log.info("%s: trained %d epochs, final loss %.5f", model.spec.family, epochs, history[-1])
    return model, history


def evaluate_auc(model: DLPModel, test_samples: Sequence[Sample], n_pairs: int | None = None,
                 seed: int = 0) -> float:
    """Mean per-snapshot AUC of the predicted scores against the label snapshots.

    Diagonal entries are ignored. Label snapshots that are all-present or
    all-absent are skipped with a warning.
    """
    if not test_samples:
        raise ValueError("test set is empty")
    windows = np.stack([s.window for s in test_samples])
    scores = model.predict_batch(windows)
    rng = np.random.default_rng(seed)
    off = ~np.eye(model.n_nodes, dtype=bool)
    aucs = []
    for s, sc in zip(test_samples, scores):
        lab = s.label.astype(bool)
        pos, neg = sc[lab & off], sc[~lab & off]
        if pos.size == 0 or neg.size == 0:
            warnings.warn(f"label snapshot {s.t_index} is degenerate; skipped in AUC", RuntimeWarning,
                          stacklevel=2)
            continue
        aucs.append(pairwise_auc(pos, neg, n_pairs=n_pairs, rng=rng))
    if not aucs:
        raise ValueError("every test label snapshot is degenerate")
    return float(np.mean(aucs))

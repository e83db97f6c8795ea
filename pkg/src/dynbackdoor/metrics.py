"""Score-level metrics shared by model evaluation and attack reporting."""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def pairwise_auc(pos_scores, neg_scores, n_pairs: int | None = None,
                 rng: np.random.Generator | None = None) -> float:
    """AUC as ``(n' + 0.5 n'') / n`` over (existing, non-existing) score pairs.

    With ``n_pairs=None`` every pair is compared; otherwise ``n_pairs``
    independent pairs are drawn with replacement from ``rng``.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one existing and one non-existing link")
    if n_pairs is None:
        neg_sorted = np.sort(neg)
        lo = np.searchsorted(neg_sorted, pos, side="left")
        hi = np.searchsorted(neg_sorted, pos, side="right")
        higher = lo.sum(dtype=np.float64)
        ties = (hi - lo).sum(dtype=np.float64)
        return float((higher + 0.5 * ties) / (pos.size * neg.size))
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    p = pos[rng.integers(0, pos.size, n_pairs)]
    q = neg[rng.integers(0, neg.size, n_pairs)]
    return auc_from_counts(int((p > q).sum()), int((p == q).sum()), n_pairs)


def auc_from_counts(n_higher: int, n_tied: int, n: int) -> float:
    return (n_higher + 0.5 * n_tied) / n


def attack_timestamp_rate(clean_scores, true_labels, attacked_scores, desired_state: int,
                          threshold: float = 0.5) -> tuple[float | None, np.ndarray, np.ndarray]:
    """ATR for one target link over aligned per-timestamp arrays.

    Returns ``(atr, attack_mask, success_mask)``. Attack timestamps are those
    where the clean score sits on the true label's side of ``threshold``;
    success means the attacked score sits on ``desired_state``'s side.
    ``atr`` is ``None`` when there are no attack timestamps.
    """
    clean = np.asarray(clean_scores, dtype=np.float64)
    truth = np.asarray(true_labels).astype(bool)
    attacked = np.asarray(attacked_scores, dtype=np.float64)
    attack_mask = (clean >= threshold) == truth
    success = attack_mask & ((attacked >= threshold) == bool(desired_state))
    n = int(attack_mask.sum())
    atr = None if n == 0 else int(success.sum()) / n
    return atr, attack_mask, success


def _mean(vals) -> float:
    # exact rational mean rounded once, so the result does not depend on summation order
    return float(sum(map(Fraction, vals), Fraction(0)) / len(vals))


def attack_success_rate(atrs) -> float:
    vals = [float(a) for a in atrs]
    if not vals:
        raise ValueError("ASR needs at least one ATR")
    return _mean(vals)


def average_misclassification_confidence(success_scores) -> float | None:
    """Mean score over successful attack events, or ``None`` if there are none."""
    vals = [float(x) for x in success_scores]
    return _mean(vals) if vals else None

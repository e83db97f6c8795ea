"""Attack runs and their metrics: ATR/ASR/AMC, stealth AUC, transfer tables and sweeps.

One attack on one target link trains its own backdoored model, so an
:class:`AttackReport` holds one :class:`TargetOutcome` per target link. The
backdoored model always starts from the clean model's initialization seed and
reuses its shuffling seed; only the poisoned data differ.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import attack as atk
from .attack import AttackBudget, CandidateSet, PoisonPlan, TargetLink, TriggerSequence
from .graph import Sample, SnapshotSequence, make_samples, split_train_test
from .metrics import attack_success_rate, attack_timestamp_rate, average_misclassification_confidence
from .models import ArchSpec, DLPModel, build_model, evaluate_auc, train_clean
from .seeding import derive_seed

log = logging.getLogger(__name__)

METHODS = ("dyn-backdoor", "dyn-one", "gb", "rb")
SWEEP_PARAMS = ("t", "p", "n")


class NoTargetsError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSettings:
    """Everything about an attack except the data and the target links."""

    method: str = "dyn-backdoor"
    budget: AttackBudget = field(default_factory=AttackBudget)
    generator_units: int = 256
    generator_batch: int = 16
    objective: str = "all"
    add_only: bool = False
    anchor_mode: str = "all"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if self.generator_units < 1 or self.generator_batch < 1:
            raise ValueError("generator_units and generator_batch must be positive")


@dataclass
class CleanStage:
    """A pre-trained clean model with the data it was trained and tested on."""

    clean: DLPModel
    train: list[Sample]
    test: list[Sample]
    auc_clean: float
    train_seed: int
    batch_size: int | None = None
    history: list[float] = field(default_factory=list)

    def training_snapshots(self) -> np.ndarray:
        """Every snapshot visible to the training split, in order."""
        first = self.train[0].window
        return np.concatenate([first, np.stack([s.label for s in self.train])], axis=0)


def prepare_clean(seq: SnapshotSequence, spec: ArchSpec, T: int = 10, train_fraction: float = 0.8,
                  epochs: int = 100, seed: int = 0, batch_size: int | None = None,
                  n_pairs: int | None = None) -> CleanStage:
    """Window, split, build and pre-train a clean model with seeds derived from ``seed``."""
    train, test = split_train_test(make_samples(seq, T), train_fraction)
    clean = build_model(spec, seq.n_nodes, T, derive_seed(seed, "model-init"))
    train_seed = derive_seed(seed, "clean-train")
    _, history = train_clean(clean, train, epochs, train_seed, batch_size)
    auc = evaluate_auc(clean, test, n_pairs, seed=derive_seed(seed, "auc"))
    return CleanStage(clean=clean, train=train, test=test, auc_clean=auc, train_seed=train_seed,
                      batch_size=batch_size, history=history)


def select_targets(clean: DLPModel, test: Sequence[Sample], scenario: str, count: int, seed: int = 0,
                   high: float = 0.9, low: float = 0.1) -> list[TargetLink]:
    """Sample target links from the clean model's mean test-set scores.

    Scenario I draws from pairs scoring above ``high``, scenario II from pairs
    scoring at most ``low``. Targets come back sorted by ``(u, v)``.
    """
    if scenario not in atk.SCENARIOS:
        raise ValueError(f"scenario must be 'I' or 'II', got {scenario!r}")
    if count < 1:
        raise ValueError("count must be positive")
    scores = clean.predict_batch(np.stack([s.window for s in test])).mean(axis=0)
    np.fill_diagonal(scores, np.nan)
    with np.errstate(invalid="ignore"):
        mask = scores > high if scenario == "I" else scores <= low
    pool = np.argwhere(mask)
    if len(pool) == 0:
        raise NoTargetsError(f"no scenario-{scenario} target links under the clean model")
    if len(pool) < count:
        warnings.warn(f"only {len(pool)} scenario-{scenario} candidates for {count} targets", RuntimeWarning,
                      stacklevel=2)
    rng = np.random.default_rng(derive_seed(seed, "targets", atk.SCENARIOS[scenario]))
    pick = np.sort(rng.choice(len(pool), size=min(count, len(pool)), replace=False))
    return [TargetLink(int(u), int(v), scenario, float(scores[u, v])) for u, v in pool[pick]]


# ----------------------------------------------------------------------- metrics


@dataclass
class ATRResult:
    atr: float | None
    attack_mask: np.ndarray
    success_mask: np.ndarray
    clean_scores: np.ndarray
    attacked_scores: np.ndarray
    truth: np.ndarray
    t_index: np.ndarray

    @property
    def success_scores(self) -> np.ndarray:
        return self.attacked_scores[self.success_mask]


def atr(clean: DLPModel, backdoored: DLPModel, trigger: TriggerSequence, target: TargetLink,
        test: Sequence[Sample]) -> ATRResult:
    """Fraction of clean-correct test timestamps that the trigger flips to the desired state."""
    if not test:
        raise ValueError("test set is empty")
    u, v = target.pair
    clean_scores = clean.predict_batch(np.stack([s.window for s in test]))[:, u, v]
    mixed = np.stack([atk.mix(s, trigger).window for s in test])
    attacked = backdoored.predict_batch(mixed)[:, u, v]
    truth = np.array([s.label[u, v] for s in test], dtype=np.uint8)
    rate, attack_mask, success = attack_timestamp_rate(clean_scores, truth, attacked, target.desired)
    if rate is None:
        warnings.warn(f"target {target.pair}: clean model is never correct on the test set; excluded",
                      RuntimeWarning, stacklevel=2)
    return ATRResult(rate, attack_mask, success, clean_scores, attacked, truth,
                     np.array([s.t_index for s in test]))


def asr(atrs: Iterable[float]) -> float:
    return attack_success_rate(list(atrs))


def amc(success_scores: Iterable[float], scenario: str = "I") -> float | None:
    """Mean attacked score over successful events; lower is better in scenario I, higher in II."""
    if scenario not in atk.SCENARIOS:
        raise ValueError(f"scenario must be 'I' or 'II', got {scenario!r}")
    return average_misclassification_confidence(success_scores)


@dataclass(frozen=True)
class StealthResult:
    auc_clean: float
    auc_backdoored: float

    @property
    def delta(self) -> float:
        return self.auc_backdoored - self.auc_clean


def stealth_auc(clean: DLPModel, backdoored: DLPModel, test: Sequence[Sample], n_pairs: int | None = None,
                seed: int = 0) -> StealthResult:
    return StealthResult(evaluate_auc(clean, test, n_pairs, seed), evaluate_auc(backdoored, test, n_pairs, seed))


# ------------------------------------------------------------------ attack runs


@dataclass
class TargetOutcome:
    target: TargetLink
    candidates: CandidateSet
    trigger: TriggerSequence
    plan: PoisonPlan
    model: DLPModel
    result: ATRResult
    auc_backdoored: float
    trigger_history: list = field(default_factory=list)
    loss_all: float | None = None

    @property
    def amc(self) -> float | None:
        return amc(self.result.success_scores, self.target.scenario)


def attack_target(stage: CleanStage, target: TargetLink, settings: AttackSettings, seed: int = 0,
                  fixed_trigger: TriggerSequence | None = None, n_pairs: int | None = None) -> TargetOutcome:
    """Craft a trigger for one target link, poison, retrain from scratch and evaluate.

    With ``fixed_trigger`` no trigger is crafted: the given one is poisoned in
    unchanged and never re-optimized (transfer runs).
    """
    clean = stage.clean
    N, T = clean.n_nodes, clean.window
    b = settings.budget
    u, v = target.pair
    cs = atk.candidate_links(target, stage.training_snapshots(), b.n)
    m = b.max_links(N, T)
    batch_seed = derive_seed(seed, "generator-batch", u, v)
    reoptimize = None
    loss_all = None
    method = settings.method

    if fixed_trigger is not None:
        trigger = fixed_trigger
        method = "fixed"
    elif method in ("dyn-backdoor", "dyn-one"):
        gen = atk.TriggerGenerator(T, cs.width, settings.generator_units, settings.generator_units,
                                   seed=derive_seed(seed, "generator-init", u, v))

        def optimize(model: DLPModel) -> atk.TriggerRecord:
            records = atk.optimize_generator(gen, model, stage.train, cs, b, seed=batch_seed,
                                             batch_size=settings.generator_batch, objective=settings.objective,
                                             add_only=settings.add_only)
            return atk.filter_best(records)

        best = optimize(clean)
        trigger, loss_all = best.trigger, best.loss_all
        if method == "dyn-backdoor":
            reoptimize = optimize
    elif method == "gb":
        batch = atk.sample_batch(stage.train, settings.generator_batch, batch_seed)
        trigger = atk.baseline_gb(clean, batch, cs, m, b.beta, t_ratio=b.t, objective=settings.objective)
    else:
        trigger = atk.baseline_rb(m, cs, T, N, seed=derive_seed(seed, "rb", u, v), t_ratio=b.t)

    plan = atk.plan_poison(len(stage.train), target, b.p, cs.surrogates, seed=derive_seed(seed, "poison", u, v),
                           anchor_mode=settings.anchor_mode)
    model = build_model(clean.spec, N, T, clean.seed)
    interval = b.reopt_interval if reoptimize is not None else math.inf
    res = atk.train_backdoored(model, stage.train, plan, trigger, b.Q, interval, reoptimize,
                               batch_size=stage.batch_size, seed=stage.train_seed)
    result = atr(clean, model, res.trigger, target, stage.test)
    auc_bd = evaluate_auc(model, stage.test, n_pairs, seed=derive_seed(seed, "auc"))
    log.info("%s %s target %s: ATR %s, AUC %.4f", method, target.scenario, target.pair, result.atr, auc_bd)
    return TargetOutcome(target, cs, res.trigger, plan, model, result, auc_bd, res.trigger_history, loss_all)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    return str(x)


def rows_to_csv(rows: Sequence[Mapping], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in fields])
    return buf.getvalue()


TARGET_FIELDS = ("method", "family", "scenario", "u", "v", "clean_score", "atr", "amc_pct", "n_attack",
                 "n_success", "trigger_size", "poisoned", "auc_clean", "auc_backdoored", "delta_auc")
SUMMARY_FIELDS = ("method", "family", "scenario", "n_targets", "n_evaluated", "asr", "amc_pct", "auc_clean",
                  "auc_backdoored", "max_abs_delta_auc")
TIMESTAMP_FIELDS = ("u", "v", "t_index", "true_label", "clean_score", "attacked_score", "attack", "success")


@dataclass
class AttackReport:
    method: str
    family: str
    scenario: str
    auc_clean: float
    outcomes: list[TargetOutcome]

    @property
    def atrs(self) -> list[float]:
        return [o.result.atr for o in self.outcomes if o.result.atr is not None]

    @property
    def asr(self) -> float | None:
        vals = self.atrs
        return asr(vals) if vals else None

    @property
    def amc(self) -> float | None:
        """Pooled over every successful (target, timestamp) event."""
        scores = [x for o in self.outcomes for x in o.result.success_scores]
        return amc(scores, self.scenario)

    @property
    def auc_backdoored(self) -> float | None:
        return float(np.mean([o.auc_backdoored for o in self.outcomes])) if self.outcomes else None

    @property
    def max_abs_delta(self) -> float | None:
        if not self.outcomes:
            return None
        return float(max(abs(o.auc_backdoored - self.auc_clean) for o in self.outcomes))

    def target_rows(self) -> list[dict]:
        rows = []
        for o in self.outcomes:
            r = o.result
            a = o.amc
            rows.append({
                "method": self.method, "family": self.family, "scenario": self.scenario,
                "u": o.target.u, "v": o.target.v, "clean_score": o.target.clean_score, "atr": r.atr,
                "amc_pct": None if a is None else 100.0 * a, "n_attack": int(r.attack_mask.sum()),
                "n_success": int(r.success_mask.sum()), "trigger_size": len(o.trigger),
                "poisoned": len(o.plan.indices), "auc_clean": self.auc_clean, "auc_backdoored": o.auc_backdoored,
                "delta_auc": o.auc_backdoored - self.auc_clean,
            })
        return rows

    def summary_row(self) -> dict:
        a = self.amc
        return {
            "method": self.method, "family": self.family, "scenario": self.scenario,
            "n_targets": len(self.outcomes), "n_evaluated": len(self.atrs), "asr": self.asr,
            "amc_pct": None if a is None else 100.0 * a, "auc_clean": self.auc_clean,
            "auc_backdoored": self.auc_backdoored, "max_abs_delta_auc": self.max_abs_delta,
        }

    def timestamp_rows(self) -> list[dict]:
        rows = []
        for o in self.outcomes:
            r = o.result
            for i in range(len(r.t_index)):
                rows.append({
                    "u": o.target.u, "v": o.target.v, "t_index": int(r.t_index[i]),
                    "true_label": int(r.truth[i]), "clean_score": float(r.clean_scores[i]),
                    "attacked_score": float(r.attacked_scores[i]), "attack": int(r.attack_mask[i]),
                    "success": int(r.success_mask[i]),
                })
        return rows


def run_attack(stage: CleanStage, targets: Sequence[TargetLink], settings: AttackSettings, seed: int = 0,
               fixed_triggers: Mapping[tuple[int, int], TriggerSequence] | None = None,
               n_pairs: int | None = None, on_outcome: Callable[[TargetOutcome], None] | None = None
               ) -> AttackReport:
    """Attack every target link independently and collect the report."""
    if not targets:
        raise NoTargetsError("no target links to attack")
    scen = {t.scenario for t in targets}
    if len(scen) != 1:
        raise ValueError("all targets in one report must share a scenario")
    outcomes = []
    for t in targets:
        fixed = None if fixed_triggers is None else fixed_triggers[t.pair]
        o = attack_target(stage, t, settings, seed, fixed, n_pairs)
        outcomes.append(o)
        if on_outcome is not None:
            on_outcome(o)
    method = settings.method if fixed_triggers is None else f"{settings.method}-transfer"
    return AttackReport(method, stage.clean.spec.family, scen.pop(), stage.auc_clean, outcomes)


# -------------------------------------------------------------------- transfer


@dataclass(frozen=True)
class TransferCell:
    disc_family: str
    target_family: str
    asr_I: float | None = None
    amc_I: float | None = None
    asr_II: float | None = None
    amc_II: float | None = None
    error: str | None = None

    @property
    def diagonal(self) -> bool:
        return self.disc_family == self.target_family

    def row(self) -> dict:
        pct = lambda x: None if x is None else 100.0 * x  # noqa: E731
        return {"disc_family": self.disc_family, "target_family": self.target_family,
                "asr_I": self.asr_I, "amc_I_pct": pct(self.amc_I), "asr_II": self.asr_II,
                "amc_II_pct": pct(self.amc_II), "reference": int(self.diagonal), "error": self.error or ""}


TRANSFER_FIELDS = ("disc_family", "target_family", "asr_I", "amc_I_pct", "asr_II", "amc_II_pct", "reference",
                   "error")


@dataclass
class TransferResult:
    cells: list[TransferCell]
    reports: dict[tuple[str, str], AttackReport]

    def csv(self) -> str:
        return rows_to_csv([c.row() for c in self.cells], TRANSFER_FIELDS)


def transfer_experiment(disc_family: str, target_families: Sequence[str], stages: Callable[[str], CleanStage],
                        settings: Mapping[str, AttackSettings], n_targets: int, seed: int = 0,
                        n_pairs: int | None = None) -> TransferResult:
    """Poison each target family with triggers crafted against ``disc_family`` only.

    ``stages(family)`` returns the pre-trained clean stage of a family and
    ``settings`` maps each scenario to its attack settings. The diagonal cell is
    the standalone attack on the discriminator family itself; off-diagonal
    families reuse its final triggers without re-optimization. A failing cell
    is recorded with its error and the table is still produced.
    """
    disc_stage = stages(disc_family)
    values: dict[str, dict[str, float | None]] = {f: {} for f in target_families}
    errors: dict[str, list[str]] = {f: [] for f in target_families}
    reports: dict[tuple[str, str], AttackReport] = {}
    for scen in sorted(settings):
        try:
            targets = select_targets(disc_stage.clean, disc_stage.test, scen, n_targets, seed)
            own = run_attack(disc_stage, targets, settings[scen], seed, n_pairs=n_pairs)
        except Exception as exc:  # a failed reference leaves the whole scenario empty
            log.exception("transfer reference %s/%s failed", disc_family, scen)
            for f in target_families:
                errors[f].append(f"{scen}: reference failed: {exc}")
            continue
        reports[(disc_family, scen)] = own
        triggers = {o.target.pair: o.trigger for o in own.outcomes}
        for fam in target_families:
            try:
                rep = own if fam == disc_family else run_attack(stages(fam), targets, settings[scen], seed,
                                                                fixed_triggers=triggers, n_pairs=n_pairs)
            except Exception as exc:
                log.exception("transfer cell %s -> %s (%s) failed", disc_family, fam, scen)
                errors[fam].append(f"{scen}: {exc}")
                continue
            reports[(fam, scen)] = rep
            values[fam][f"asr_{scen}"] = rep.asr
            values[fam][f"amc_{scen}"] = rep.amc
    cells = [TransferCell(disc_family, f, error="; ".join(errors[f]) or None, **values[f]) for f in target_families]
    return TransferResult(cells, reports)


# ----------------------------------------------------------------- sensitivity


SWEEP_FIELDS = ("param", "value", "seed", "asr", "amc_pct", "auc_clean", "auc_backdoored", "error")
CURVE_FIELDS = ("param", "value", "n_seeds", "asr", "amc_pct", "auc_backdoored")


@dataclass
class SweepResult:
    param: str
    rows: list[dict]

    def curve(self) -> list[dict]:
        """Rows averaged over seeds, one per grid value, in grid order."""
        out = []
        values = list(dict.fromkeys(r["value"] for r in self.rows))
        for val in values:
            ok = [r for r in self.rows if r["value"] == val and not r["error"]]
            mean = lambda key: (float(np.mean([r[key] for r in ok if r[key] is not None]))  # noqa: E731
                                if any(r[key] is not None for r in ok) else None)
            out.append({"param": self.param, "value": val, "n_seeds": len(ok), "asr": mean("asr"),
                        "amc_pct": mean("amc_pct"), "auc_backdoored": mean("auc_backdoored")})
        return out

    def rows_csv(self) -> str:
        return rows_to_csv(self.rows, SWEEP_FIELDS)

    def curve_csv(self) -> str:
        return rows_to_csv(self.curve(), CURVE_FIELDS)


def sensitivity_sweep(param: str, grid: Sequence[float], stage_for_seed: Callable[[int], CleanStage],
                      settings: AttackSettings, n_targets: int, seeds: Sequence[int], fixed: float = 0.03,
                      n_pairs: int | None = None) -> SweepResult:
    """Scenario-I ASR/AMC/AUC as one budget ratio varies and the other two stay at ``fixed``.

    ``stage_for_seed(seed)`` supplies the pre-trained clean stage for a seed;
    targets are drawn once per seed and shared by all grid points. A failing
    point is recorded and the sweep continues.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if not grid:
        raise ValueError("empty grid")
    for val in grid:
        if not 0.0 < val <= 1.0:
            raise ValueError(f"grid value {val} outside (0, 1]")
    rows = []
    for seed in seeds:
        try:
            stage = stage_for_seed(seed)
            targets = select_targets(stage.clean, stage.test, "I", n_targets, seed)
        except Exception as exc:
            log.exception("sweep seed %s failed before the attack", seed)
            rows += [{"param": param, "value": float(val), "seed": seed, "asr": None, "amc_pct": None,
                      "auc_clean": None, "auc_backdoored": None, "error": str(exc)} for val in grid]
            continue
        for val in grid:
            ratios = {"t": fixed, "p": fixed, "n": fixed, param: float(val)}
            row = {"param": param, "value": float(val), "seed": seed, "auc_clean": stage.auc_clean, "error": ""}
            try:
                s = replace(settings, budget=replace(settings.budget, **ratios))
                rep = run_attack(stage, targets, s, seed, n_pairs=n_pairs)
                a = rep.amc
                row.update(asr=rep.asr, amc_pct=None if a is None else 100.0 * a, auc_backdoored=rep.auc_backdoored)
            except Exception as exc:
                log.exception("sweep point %s=%s seed %s failed", param, val, seed)
                row.update(asr=None, amc_pct=None, auc_backdoored=None, error=str(exc))
            rows.append(row)
    return SweepResult(param, rows)

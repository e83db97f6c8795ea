"""Run orchestration: stage checkpoints, run directories and manifests.

A run directory looks like::

    <root>/<name>-<YYYYmmdd-HHMMSS>-s<seed>/
        config.ini
        data/snapshots.csv, data/stats.json
        models/clean-<family>-s<seed>.ckpt, models/clean-<family>-s<seed>.json
        attack/<scenario>-<u>-<v>/trigger.csv, poison.csv, reopt.csv, backdoored.ckpt
        metrics/*.csv
        plots/*.png
        manifest.json

Every stage checks for its outputs before computing, so passing an existing
run directory as ``resume`` continues where the previous process stopped.
Metric CSVs depend only on the configuration, never on wall-clock time.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import time
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import __version__
from . import attack as atk
from . import datasets
from .attack import PoisonPlan, TargetLink, TriggerSequence
from .config import ExperimentConfig, validate
from .evaluation import (SUMMARY_FIELDS, TARGET_FIELDS, TIMESTAMP_FIELDS, AttackReport, AttackSettings, CleanStage,
                         TargetOutcome, atr, attack_target, rows_to_csv, select_targets, sensitivity_sweep,
                         transfer_experiment)
from .graph import (SnapshotSequence, TemporalEdgeList, build_snapshots, load_snapshots, make_samples,
                    parse_edge_list, save_snapshots, split_train_test, stats)
from .models import DLPModel, build_model, evaluate_auc, train_clean
from .seeding import derive_seed

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class RunError(RuntimeError):
    pass


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class StageRecord:
    name: str
    status: str = "running"
    seconds: float = 0.0
    resumed: bool = False
    error: str | None = None


@dataclass
class Run:
    """A run directory plus the manifest being accumulated for it."""

    path: Path
    config: ExperimentConfig
    command: str
    stages: list[StageRecord] = field(default_factory=list)
    metric_files: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ExperimentConfig, command: str, resume: str | Path | None = None) -> "Run":
        if resume is not None:
            path = Path(resume)
            stored = path / "config.ini"
            if not stored.is_file():
                raise RunError(f"{path} is not a run directory (no config.ini)")
            if validate(stored.read_text(encoding="utf-8"), check_files=False).emit() != config.emit():
                raise RunError(f"configuration differs from the one stored in {stored}")
        else:
            name = config.name or f"{command}-{config.method}-{config.family}-{config.scenario}"
            stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
            root = config.output_root_path()
            path = root / f"{name}-{stamp}-s{config.seed}"
            k = 1
            while path.exists():
                path = root / f"{name}-{stamp}-s{config.seed}-{k}"
                k += 1
            path.mkdir(parents=True)
            _atomic_write(path / "config.ini", config.emit())
        return cls(path=path, config=config, command=command)

    def file(self, rel: str) -> Path:
        return self.path / rel

    def write(self, rel: str, text: str, metric: bool = False) -> Path:
        p = self.file(rel)
        _atomic_write(p, text)
        if metric and rel not in self.metric_files:
            self.metric_files.append(rel)
        return p

    @contextmanager
    def stage(self, name: str, resumed: bool = False) -> Iterator[StageRecord]:
        rec = StageRecord(name, resumed=resumed)
        self.stages.append(rec)
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            rec.status = "failed"
            rec.error = f"{type(exc).__name__}: {exc}"
            raise
        else:
            rec.status = "done"
        finally:
            rec.seconds = round(time.perf_counter() - t0, 3)

    @property
    def ok(self) -> bool:
        return all(s.status == "done" for s in self.stages)

    def write_manifest(self) -> dict:
        files = sorted(str(p.relative_to(self.path)) for p in self.path.rglob("*")
                       if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp"))
        failed = [s for s in self.stages if s.status != "done"]
        manifest = {
            "command": self.command,
            "status": "complete" if not failed else "failed",
            "failed_stage": failed[0].name if failed else None,
            "code_version": _code_version(),
            "config": self.config.emit(),
            "stages": [vars(s) for s in self.stages],
            "metric_files": sorted(self.metric_files),
            "files": files,
            **self.extra,
        }
        _atomic_write(self.path / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


# ------------------------------------------------------------------------ data


def dataset_label(cfg: ExperimentConfig) -> str:
    if cfg.synthetic:
        return f"synthetic-{cfg.synthetic}"
    return Path(cfg.path).stem


def load_edges(cfg: ExperimentConfig) -> TemporalEdgeList:
    if cfg.path:
        return parse_edge_list(Path(cfg.path), ts_column=cfg.ts_column)
    if cfg.synthetic == "community":
        return datasets.community_toy(cfg.synthetic_nodes, cfg.n_snapshots, seed=cfg.synthetic_seed)
    if cfg.synthetic == "periodic":
        return datasets.periodic_toy(cfg.synthetic_nodes, cfg.n_snapshots, seed=cfg.synthetic_seed)
    return datasets.email_like(cfg.synthetic_nodes, seed=cfg.synthetic_seed)


def stage_ingest(run: Run) -> SnapshotSequence:
    cfg = run.config
    snap = run.file("data/snapshots.csv")
    if snap.is_file() and run.file("data/stats.json").is_file():
        with run.stage("ingest", resumed=True):
            return load_snapshots(snap)
    with run.stage("ingest"):
        edges = load_edges(cfg)
        seq = build_snapshots(edges, cfg.n_snapshots)
        st = stats(edges)
        info = {"dataset": dataset_label(cfg), "nodes": st.nodes, "edges": st.edges,
                "average_degree": st.average_degree, "timespan_days": st.timespan_days,
                "degree_convention": st.degree_convention, "dropped_self_loops": edges.dropped_self_loops,
                "n_snapshots": len(seq), "span_per_snapshot": seq.span_per_snapshot}
        tmp = snap.with_name(f".{snap.name}.{os.getpid()}.tmp")
        snap.parent.mkdir(parents=True, exist_ok=True)
        save_snapshots(seq, tmp)
        os.replace(tmp, snap)
        run.write("data/stats.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
        # reload so a fresh and a resumed run see identical floats
        return load_snapshots(snap)


def stage_clean(run: Run, seq: SnapshotSequence, family: str | None = None, seed: int | None = None
                ) -> CleanStage:
    """Pre-train (or reload) the clean model for ``family`` under ``seed``."""
    cfg = run.config
    family = family or cfg.family
    seed = cfg.seed if seed is None else seed
    tag = f"clean-{family}-s{seed}"
    ckpt, meta = run.file(f"models/{tag}.ckpt"), run.file(f"models/{tag}.json")
    train, test = split_train_test(make_samples(seq, cfg.window), cfg.train_fraction)

    def loss_csv(history):
        run.write(f"metrics/{tag}-loss.csv",
                  rows_to_csv([{"epoch": i, "loss": x} for i, x in enumerate(history)], ("epoch", "loss")),
                  metric=True)

    if ckpt.is_file() and meta.is_file():
        with run.stage(f"train:{tag}", resumed=True):
            info = json.loads(meta.read_text(encoding="utf-8"))
            model = DLPModel.load(ckpt)
            loss_csv(info["history"])
            return CleanStage(model, train, test, info["auc_clean"], info["train_seed"], cfg.batch,
                              info["history"])
    with run.stage(f"train:{tag}"):
        spec = cfg.arch_spec(seq.n_nodes, family)
        model = build_model(spec, seq.n_nodes, cfg.window, derive_seed(seed, "model-init"))
        train_seed = derive_seed(seed, "clean-train")
        _, history = train_clean(model, train, cfg.epochs, train_seed, cfg.batch)
        auc = evaluate_auc(model, test, cfg.n_pairs, seed=derive_seed(seed, "auc"))
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        model.save(ckpt)
        info = {"family": family, "seed": seed, "auc_clean": auc, "train_seed": train_seed, "history": history,
                "n_train": len(train), "n_test": len(test)}
        run.write(f"models/{tag}.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
        loss_csv(history)
        return CleanStage(model, train, test, auc, train_seed, cfg.batch, history)


# ---------------------------------------------------------------------- attack


def _target_dir(target: TargetLink) -> str:
    return f"attack/{target.scenario}-{target.u}-{target.v}"


def _save_outcome(run: Run, o: TargetOutcome) -> None:
    d = _target_dir(o.target)
    run.write(f"{d}/trigger.csv", o.trigger.to_csv())
    run.write(f"{d}/poison.csv", o.plan.manifest_csv())
    reopt = [{"epoch": e, "loss_all": loss, "entries": len(t)} for e, t, loss in o.trigger_history]
    run.write(f"{d}/reopt.csv", rows_to_csv(reopt, ("epoch", "loss_all", "entries")))
    run.write(f"{d}/outcome.json", json.dumps({"loss_all": o.loss_all, "auc_backdoored": o.auc_backdoored,
                                               "candidates": len(o.candidates.links)}, sort_keys=True) + "\n")
    o.model.save(run.file(f"{d}/backdoored.ckpt"))


def _load_outcome(run: Run, stage: CleanStage, target: TargetLink, settings: AttackSettings) -> TargetOutcome | None:
    d = _target_dir(target)
    files = [run.file(f"{d}/{n}") for n in ("trigger.csv", "poison.csv", "backdoored.ckpt", "outcome.json")]
    if not all(f.is_file() for f in files):
        return None
    trigger = TriggerSequence.load(files[0])
    plan = PoisonPlan.from_manifest_csv(files[1].read_text(encoding="utf-8"), len(stage.train))
    model = DLPModel.load(files[2])
    info = json.loads(files[3].read_text(encoding="utf-8"))
    cs = atk.candidate_links(target, stage.training_snapshots(), settings.budget.n)
    result = atr(stage.clean, model, trigger, target, stage.test)
    return TargetOutcome(target, cs, trigger, plan, model, result, info["auc_backdoored"], [], info["loss_all"])


def _targets_csv(targets: Sequence[TargetLink]) -> str:
    return rows_to_csv([{"u": t.u, "v": t.v, "scenario": t.scenario, "clean_score": t.clean_score}
                        for t in targets], ("u", "v", "scenario", "clean_score"))


def _read_targets(text: str) -> list[TargetLink]:
    import csv as _csv
    import io as _io
    return [TargetLink(int(r["u"]), int(r["v"]), r["scenario"], float(r["clean_score"]))
            for r in _csv.DictReader(_io.StringIO(text))]


def stage_attack(run: Run, stage: CleanStage, scenario: str, settings: AttackSettings, seed: int) -> AttackReport:
    cfg = run.config
    tfile = run.file(f"targets-{scenario}.csv")
    if tfile.is_file():
        targets = _read_targets(tfile.read_text(encoding="utf-8"))
    else:
        with run.stage(f"targets:{scenario}"):
            targets = select_targets(stage.clean, stage.test, scenario, cfg.targets, seed)
            run.write(f"targets-{scenario}.csv", _targets_csv(targets))
    outcomes = []
    for t in targets:
        done = _load_outcome(run, stage, t, settings)
        with run.stage(f"attack:{scenario}:{t.u}-{t.v}", resumed=done is not None):
            if done is None:
                done = attack_target(stage, t, settings, seed, n_pairs=cfg.n_pairs)
                _save_outcome(run, done)
            outcomes.append(done)
    return AttackReport(settings.method, stage.clean.spec.family, scenario, stage.auc_clean, outcomes)


def write_report_metrics(run: Run, report: AttackReport, dataset: str, prefix: str = "") -> None:
    tag = f"{prefix}{report.scenario}"
    extra = {"dataset": dataset}
    run.write(f"metrics/targets-{tag}.csv",
              rows_to_csv([{**r, **extra} for r in report.target_rows()], ("dataset",) + TARGET_FIELDS),
              metric=True)
    run.write(f"metrics/timestamps-{tag}.csv", rows_to_csv(report.timestamp_rows(), TIMESTAMP_FIELDS),
              metric=True)
    run.write(f"metrics/summary-{tag}.csv",
              rows_to_csv([{**report.summary_row(), **extra}], ("dataset",) + SUMMARY_FIELDS), metric=True)


# -------------------------------------------------------------------- commands


@dataclass
class RunResult:
    run: Run
    manifest: dict
    ok: bool
    value: object = None


def _execute(run: Run, body: Callable[[Run], object]) -> RunResult:
    value = None
    try:
        value = body(run)
    except Exception as exc:  # recorded in the manifest; earlier stage outputs stay on disk
        log.error("run failed: %s", exc)
        run.extra["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        if not run.stages or run.stages[-1].status == "done":
            run.stages.append(StageRecord("unknown", status="failed", error=run.extra["error"]))
    manifest = run.write_manifest()
    return RunResult(run, manifest, manifest["status"] == "complete", value)


def ingest(cfg: ExperimentConfig, resume: str | Path | None = None) -> RunResult:
    run = Run.create(cfg, "ingest", resume)
    run.extra["dataset"] = dataset_label(cfg)
    return _execute(run, stage_ingest)


def train(cfg: ExperimentConfig, resume: str | Path | None = None) -> RunResult:
    run = Run.create(cfg, "train", resume)
    run.extra["dataset"] = dataset_label(cfg)

    def body(r: Run):
        stage = stage_clean(r, stage_ingest(r))
        r.write("metrics/clean.csv", rows_to_csv(
            [{"dataset": dataset_label(cfg), "family": stage.clean.spec.family, "auc_clean": stage.auc_clean,
              "final_loss": stage.history[-1] if stage.history else None}],
            ("dataset", "family", "auc_clean", "final_loss")), metric=True)
        return stage

    return _execute(run, body)


def run(cfg: ExperimentConfig, resume: str | Path | None = None) -> RunResult:
    """Ingest, pre-train, select targets, attack each, retrain on poisoned data and evaluate."""
    r = Run.create(cfg, "attack", resume)
    r.extra["dataset"] = dataset_label(cfg)

    def body(r: Run):
        stage = stage_clean(r, stage_ingest(r))
        report = stage_attack(r, stage, cfg.scenario, cfg.attack_settings(), cfg.seed)
        with r.stage("evaluate"):
            write_report_metrics(r, report, dataset_label(cfg))
        return report

    return _execute(r, body)


def transfer(cfg: ExperimentConfig, resume: str | Path | None = None) -> RunResult:
    """Triggers crafted against ``model.family`` poison every family in ``attack.transfer_families``."""
    r = Run.create(cfg, "transfer", resume)
    r.extra["dataset"] = dataset_label(cfg)

    def body(r: Run):
        seq = stage_ingest(r)
        cache: dict[str, CleanStage] = {}

        def stages(fam: str) -> CleanStage:
            if fam not in cache:
                cache[fam] = stage_clean(r, seq, fam)
            return cache[fam]

        families = list(dict.fromkeys([cfg.family, *cfg.transfer_families]))
        settings = {s: cfg.attack_settings(s) for s in ("I", "II")}
        with r.stage("transfer"):
            result = transfer_experiment(cfg.family, families, stages, settings, cfg.targets, cfg.seed, cfg.n_pairs)
        with r.stage("evaluate"):
            r.write("metrics/transfer.csv", result.csv(), metric=True)
            for (fam, scen), rep in sorted(result.reports.items()):
                write_report_metrics(r, rep, dataset_label(cfg), prefix=f"{fam}-")
            from .plotting import transfer_bars
            for p in transfer_bars(result.cells, r.file("plots")):
                r.metric_files.append(str(p.relative_to(r.path)))
            failed = [c for c in result.cells if c.error]
            if failed:
                raise RunError(f"{len(failed)} transfer cell(s) failed: " + "; ".join(c.error for c in failed))
        return result

    return _execute(r, body)


def sweep(cfg: ExperimentConfig, resume: str | Path | None = None) -> RunResult:
    r = Run.create(cfg, "sweep", resume)
    r.extra["dataset"] = dataset_label(cfg)

    def body(r: Run):
        seq = stage_ingest(r)
        with r.stage(f"sweep:{cfg.sweep_param}"):
            result = sensitivity_sweep(cfg.sweep_param, cfg.sweep_grid, lambda s: stage_clean(r, seq, seed=s),
                                       cfg.attack_settings("I"), cfg.targets, cfg.sweep_seeds, cfg.sweep_fixed,
                                       cfg.n_pairs)
        with r.stage("evaluate"):
            r.write(f"metrics/sweep-{cfg.sweep_param}-rows.csv", result.rows_csv(), metric=True)
            r.write(f"metrics/sweep-{cfg.sweep_param}.csv", result.curve_csv(), metric=True)
            from .plotting import sweep_plot
            p = sweep_plot(result.curve(), r.file(f"plots/sweep-{cfg.sweep_param}.png"))
            r.metric_files.append(str(p.relative_to(r.path)))
            bad = [row for row in result.rows if row["error"]]
            if bad:
                raise RunError(f"{len(bad)} sweep point(s) failed")
        return result

    return _execute(r, body)


# ---------------------------------------------------------------------- report


REPORT_FIELDS = ("run", "command", "dataset", "method", "family", "scenario", "n_targets", "asr", "amc_pct",
                 "auc_clean", "auc_backdoored", "max_abs_delta_auc", "complete")


def collect(run_dirs: Sequence[str | Path]) -> tuple[list[dict], list[dict]]:
    """Summary rows of attack and transfer runs plus curve rows of sweep runs.

    Ingest, train and report runs are skipped. A directory without a
    manifest or without summary metrics yields a row flagged incomplete.
    """
    import csv as _csv
    rows, curves = [], []
    for d in run_dirs:
        d = Path(d)
        mpath = d / MANIFEST
        if not mpath.is_file():
            rows.append({"run": d.name, "complete": 0})
            continue
        man = json.loads(mpath.read_text(encoding="utf-8"))
        if man["command"] in ("ingest", "train", "report"):
            log.warning("%s: %s runs carry no attack metrics; skipped", d.name, man["command"])
            continue
        summaries = sorted((d / "metrics").glob("summary-*.csv"))
        if man["command"] == "sweep":
            for f in sorted((d / "metrics").glob("sweep-*.csv")):
                if not f.name.endswith("-rows.csv"):
                    curves += [{**c, "run": d.name} for c in _csv.DictReader(f.open(encoding="utf-8"))]
            continue
        if not summaries:
            rows.append({"run": d.name, "command": man["command"], "dataset": man.get("dataset"), "complete": 0})
            continue
        for f in summaries:
            for s in _csv.DictReader(f.open(encoding="utf-8")):
                complete = int(man["status"] == "complete" and all(s.get(k) not in (None, "")
                                                                    for k in ("asr", "auc_backdoored")))
                rows.append({**{k: s.get(k) for k in REPORT_FIELDS if k in s}, "run": d.name,
                             "command": man["command"], "complete": complete})
    return rows, curves


def report(run_dirs: Sequence[str | Path], cfg: ExperimentConfig) -> RunResult:
    r = Run.create(cfg.with_overrides(name=cfg.name or "report"), "report")
    r.extra["dataset"] = None
    r.extra["sources"] = [str(Path(d)) for d in run_dirs]

    def body(r: Run):
        with r.stage("report"):
            if not run_dirs:
                raise RunError("report needs at least one run directory")
            rows, curves = collect(run_dirs)
            r.write("metrics/report.csv", rows_to_csv(rows, REPORT_FIELDS), metric=True)
            from .plotting import grouped_bars, sweep_plot
            for metric in ("asr", "amc_pct", "auc_backdoored"):
                for p in grouped_bars(rows, metric, r.file("plots")):
                    r.metric_files.append(str(p.relative_to(r.path)))
            if curves:
                r.write("metrics/curves.csv", rows_to_csv(curves, ("run", "param", "value", "n_seeds", "asr",
                                                                   "amc_pct", "auc_backdoored")), metric=True)
                for param in sorted({c["param"] for c in curves}):
                    p = sweep_plot([c for c in curves if c["param"] == param], r.file(f"plots/sweep-{param}.png"))
                    r.metric_files.append(str(p.relative_to(r.path)))
            incomplete = [x for x in rows if not x.get("complete")]
            if incomplete:
                raise RunError(f"{len(incomplete)} run(s) lack complete metrics: "
                               + ", ".join(str(x["run"]) for x in incomplete))
        return rows

    return _execute(r, body)

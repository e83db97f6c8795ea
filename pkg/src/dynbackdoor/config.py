"""Experiment configuration: an INI document with ``[data]``, ``[model]``, ``[attack]`` and ``[run]``.

Every key has one schema entry, and key names are unique across sections so
CLI flags can mirror them one to one (``--train-fraction`` sets
``data.train_fraction``). Empty values mean "use the default"; for ``t`` the
default depends on the scenario.
"""

from __future__ import annotations

import configparser
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .attack import SCENARIOS, AttackBudget
from .evaluation import METHODS, SWEEP_PARAMS, AttackSettings
from .models import FAMILIES, ArchSpec

OUTPUT_ROOT_ENV = "DYNBD_OUTPUT_ROOT"
SYNTHETIC_CORPORA = ("community", "periodic", "email")

SCENARIO_DEFAULTS = {"I": {"t": 0.05, "p": 0.05, "n": 0.05}, "II": {"t": 0.03, "p": 0.05, "n": 0.05}}


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float_or_inf(s: str) -> float:
    v = s.strip().lower()
    return math.inf if v in ("inf", "infinity", "never") else float(v)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _words(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _ratio(v: float) -> bool:
    return 0.0 < v <= 1.0


@dataclass(frozen=True)
class Key:
    section: str
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


SCHEMA: dict[str, Key] = {
    # data
    "path": Key("data", str, ""),
    "synthetic": Key("data", str, "", lambda v: v in ("",) + SYNTHETIC_CORPORA,
                     f"one of {SYNTHETIC_CORPORA} or empty"),
    "ts_column": Key("data", int, 2, lambda v: v >= 2, ">= 2 (3 for KONECT 'src dst weight ts')"),
    "synthetic_nodes": Key("data", int, 20, lambda v: v >= 2, ">= 2"),
    "synthetic_seed": Key("data", int, 0, lambda v: v >= 0, ">= 0"),
    "n_snapshots": Key("data", int, 180, lambda v: v >= 2, ">= 2"),
    "window": Key("data", int, 10, lambda v: v >= 1, ">= 1"),
    "train_fraction": Key("data", float, 0.8, lambda v: 0.0 < v < 1.0, "in (0, 1)"),
    # model
    "family": Key("model", str, "ddne", lambda v: v in FAMILIES, f"one of {FAMILIES}"),
    "hidden": Key("model", int, 0, lambda v: v >= 0, ">= 0 (0 keeps the per-family default sizes)"),
    "large": Key("model", _bool, False),
    "epochs": Key("model", int, 100, lambda v: v >= 0, ">= 0"),
    "batch_size": Key("model", int, 0, lambda v: v >= 0, ">= 0 (0 is full batch)"),
    "lr": Key("model", float, 0.0, lambda v: v >= 0, ">= 0 (0 keeps the per-family default rate)"),
    "weight_decay": Key("model", float, 0.0005, lambda v: v >= 0, ">= 0"),
    # attack
    "scenario": Key("attack", str, "I", lambda v: v in SCENARIOS, "I or II"),
    "method": Key("attack", str, "dyn-backdoor", lambda v: v in METHODS, f"one of {METHODS}"),
    "t": Key("attack", float, None, _ratio, "in (0, 1]"),
    "p": Key("attack", float, None, _ratio, "in (0, 1]"),
    "n": Key("attack", float, None, _ratio, "in (0, 1]"),
    "beta": Key("attack", float, 0.5, lambda v: v >= 0, ">= 0"),
    "q": Key("attack", int, 100, lambda v: v >= 1, ">= 1"),
    "k_gen": Key("attack", int, 20, lambda v: v >= 1, ">= 1"),
    "reopt_interval": Key("attack", _float_or_inf, 20.0, lambda v: v >= 1, ">= 1 or inf"),
    "generator_units": Key("attack", int, 256, lambda v: v >= 1, ">= 1"),
    "generator_batch": Key("attack", int, 16, lambda v: v >= 1, ">= 1"),
    "objective": Key("attack", str, "all", lambda v: v in ("all", "atk"), "all or atk"),
    "add_only": Key("attack", _bool, False),
    "anchor_mode": Key("attack", str, "all", lambda v: v in ("all", "cycle"), "all or cycle"),
    "targets": Key("attack", int, 10, lambda v: v >= 1, ">= 1"),
    "transfer_families": Key("attack", _words, FAMILIES, lambda v: len(v) > 0 and set(v) <= set(FAMILIES),
                             f"comma-separated subset of {FAMILIES}"),
    "sweep_param": Key("attack", str, "p", lambda v: v in SWEEP_PARAMS, f"one of {SWEEP_PARAMS}"),
    "sweep_grid": Key("attack", _floats, (0.01, 0.05, 0.1, 0.2), lambda v: len(v) > 0 and all(map(_ratio, v)),
                      "comma-separated values in (0, 1]"),
    "sweep_fixed": Key("attack", float, 0.03, _ratio, "in (0, 1]"),
    "sweep_seeds": Key("attack", _ints, (0, 1, 2, 3, 4), lambda v: len(v) > 0, "comma-separated integers"),
    # run
    "seed": Key("run", int, 0, lambda v: v >= 0, ">= 0"),
    "output_root": Key("run", str, ""),
    "name": Key("run", str, ""),
    "auc_pairs": Key("run", int, 0, lambda v: v >= 0, ">= 0 (0 is exhaustive)"),
}

SECTIONS = ("data", "model", "attack", "run")


def _emit_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    if isinstance(v, tuple):
        return ",".join(_emit_value(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated configuration; ``values`` holds every schema key."""

    values: Mapping[str, Any]

    def __getattr__(self, key: str):
        if key == "values":
            raise AttributeError(key)
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def emit(self) -> str:
        buf = io.StringIO()
        for sec in SECTIONS:
            buf.write(f"[{sec}]\n")
            for key, spec in SCHEMA.items():
                if spec.section == sec:
                    buf.write(f"{key} = {_emit_value(self.values[key])}\n")
            buf.write("\n")
        return buf.getvalue()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        raw = {k: _emit_value(v) for k, v in self.values.items()}
        raw.update({k: _emit_value(v) for k, v in changes.items()})
        return validate(raw, check_files=False, require_data=bool(raw.get("path") or raw.get("synthetic")))

    # -- derived objects ---------------------------------------------------------

    def budget(self) -> AttackBudget:
        return AttackBudget(t=self.t, p=self.p, n=self.n, beta=self.beta, Q=self.q, k_gen=self.k_gen,
                            reopt_interval=self.reopt_interval)

    def attack_settings(self, scenario: str | None = None) -> AttackSettings:
        """Settings for ``scenario``; a scenario other than the configured one gets its default ratios."""
        budget = self.budget()
        if scenario is not None and scenario != self.scenario:
            d = SCENARIO_DEFAULTS[scenario]
            budget = AttackBudget(t=d["t"], p=d["p"], n=d["n"], beta=self.beta, Q=self.q, k_gen=self.k_gen,
                                  reopt_interval=self.reopt_interval)
        return AttackSettings(method=self.method, budget=budget, generator_units=self.generator_units,
                              generator_batch=self.generator_batch, objective=self.objective,
                              add_only=self.add_only, anchor_mode=self.anchor_mode)

    def arch_spec(self, n_nodes: int, family: str | None = None) -> ArchSpec:
        spec = ArchSpec.default(family or self.family, n_nodes, large=self.large, hidden=self.hidden or None)
        lr = self.lr if self.lr > 0 else spec.lr
        return ArchSpec(spec.family, spec.encoder_units, spec.recurrent_units, spec.decoder_units, lr,
                        self.weight_decay)

    @property
    def batch(self) -> int | None:
        return self.batch_size or None

    @property
    def n_pairs(self) -> int | None:
        return self.auc_pairs or None

    def output_root_path(self) -> Path:
        root = self.output_root or os.environ.get(OUTPUT_ROOT_ENV, "") or "runs"
        return Path(root)


def flatten(doc: Mapping[str, Any]) -> dict[str, str]:
    """Accept either ``{section: {key: value}}`` or a flat ``{key: value}`` mapping."""
    flat: dict[str, str] = {}
    for k, v in doc.items():
        if isinstance(v, Mapping):
            if k not in SECTIONS:
                raise ConfigError(f"unknown section [{k}]")
            for kk, vv in v.items():
                spec = SCHEMA.get(kk)
                if spec is None:
                    raise ConfigError(f"unknown key {k}.{kk}")
                if spec.section != k:
                    raise ConfigError(f"key {kk!r} belongs in [{spec.section}], not [{k}]")
                flat[kk] = vv
        else:
            flat[k] = v
    return flat


def parse_ini(text: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {sec: dict(cp[sec]) for sec in cp.sections()}


def validate(doc: Mapping[str, Any] | str | Path | None = None, check_files: bool = True,
             require_data: bool = True) -> ExperimentConfig:
    """Parse, fill defaults and range-check a configuration.

    ``doc`` is a mapping (sectioned or flat), INI text, or a path to an INI
    file. Unknown keys, out-of-range values and a missing dataset are errors.
    """
    if doc is None:
        doc = {}
    if isinstance(doc, Path):
        doc = parse_ini(doc.read_text(encoding="utf-8"))
    elif isinstance(doc, str):
        doc = parse_ini(doc)
    flat = flatten(doc)
    out: dict[str, Any] = {}
    for key, raw in flat.items():
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(f"unknown key {key!r}")
        if raw is None or (isinstance(raw, str) and raw.strip() == ""):
            continue
        try:
            val = spec.parse(raw) if isinstance(raw, str) else spec.parse(_emit_value(raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{spec.section}.{key}: cannot parse {raw!r}: {exc}") from None
        if spec.check is not None and not spec.check(val):
            raise ConfigError(f"{spec.section}.{key} = {raw!r} must be {spec.rule}")
        out[key] = val
    for key, spec in SCHEMA.items():
        out.setdefault(key, spec.default)
    for r in ("t", "p", "n"):
        if out[r] is None:
            out[r] = SCENARIO_DEFAULTS[out["scenario"]][r]

    if out["path"] and out["synthetic"]:
        raise ConfigError("set only one of data.path and data.synthetic")
    if require_data and not (out["path"] or out["synthetic"]):
        raise ConfigError("no dataset: set data.path or data.synthetic")
    if out["path"] and check_files and not Path(out["path"]).is_file():
        raise ConfigError(f"dataset file not found: {out['path']}")
    if out["n_snapshots"] < out["window"] + 2:
        raise ConfigError("n_snapshots must exceed window + 1 so both splits are non-empty")
    return ExperimentConfig(out)

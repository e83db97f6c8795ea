import json
import math
import time
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynbackdoor import cli
from dynbackdoor.config import OUTPUT_ROOT_ENV, SCHEMA, ConfigError, parse_ini, validate

TOY = ["--synthetic", "community", "--synthetic-nodes", "20", "--n-snapshots", "60", "--family", "dynae",
       "--hidden", "32", "--batch-size", "8", "--epochs", "60", "--targets", "2", "--scenario", "II",
       "--p", "0.2", "--n", "0.2", "--q", "40", "--k-gen", "5", "--generator-units", "16",
       "--generator-batch", "8"]


def run_cli(args, capsys=None):
    code = cli.main(args)
    out = capsys.readouterr() if capsys is not None else None
    return code, out


def run_dir(out) -> Path:
    line = next(x for x in out.out.splitlines() if x.startswith("run directory:"))
    return Path(line.split(":", 1)[1].strip())


# ---------------------------------------------------------------- config


def test_defaults():
    cfg = validate({"synthetic": "community"})
    assert (cfg.t, cfg.p, cfg.n) == (0.05, 0.05, 0.05)
    assert cfg.family == "ddne" and cfg.window == 10 and cfg.n_snapshots == 180
    assert cfg.train_fraction == 0.8 and cfg.q == 100 and cfg.k_gen == 20 and cfg.beta == 0.5
    two = validate({"synthetic": "community", "scenario": "II"})
    assert (two.t, two.p, two.n) == (0.03, 0.05, 0.05)
    assert cfg.attack_settings("II").budget.t == 0.03
    assert validate({"synthetic": "community", "reopt_interval": "inf"}).reopt_interval == math.inf


@pytest.mark.parametrize("doc,msg", [
    ({"synthetic": "community", "t": "1.5"}, "attack.t"),
    ({"synthetic": "community", "p": "0"}, "attack.p"),
    ({"synthetic": "community", "colour": "red"}, "unknown key"),
    ({"model": {"scenario": "I"}}, "belongs in"),
    ({"extras": {"x": "1"}}, "unknown section"),
    ({"synthetic": "community", "path": "a.txt"}, "only one"),
    ({}, "no dataset"),
    ({"path": "/nonexistent/edges.txt"}, "not found"),
    ({"synthetic": "community", "n_snapshots": "11"}, "n_snapshots"),
    ({"synthetic": "community", "epochs": "many"}, "cannot parse"),
    ({"synthetic": "community", "transfer_families": "ddne,gcn"}, "transfer_families"),
])
def test_invalid_configs(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        validate(doc)


def test_malformed_ini():
    with pytest.raises(ConfigError):
        parse_ini("key without section = 1\n")


@given(st.sampled_from(["I", "II"]), st.floats(0.01, 1.0), st.integers(1, 500), st.sampled_from(["ddne", "dynae"]),
       st.lists(st.floats(0.01, 1.0), min_size=1, max_size=4))
def test_emit_roundtrip_idempotent(scen, t, epochs, fam, grid):
    cfg = validate({"synthetic": "periodic", "scenario": scen, "t": repr(t), "epochs": str(epochs), "family": fam,
                    "sweep_grid": ",".join(map(repr, grid))})
    again = validate(cfg.emit())
    assert again.emit() == cfg.emit()
    assert dict(again.values) == dict(cfg.values)


def test_output_root_precedence(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert validate({"synthetic": "community"}).output_root_path() == Path("runs")
    monkeypatch.setenv(OUTPUT_ROOT_ENV, "/tmp/from-env")
    assert validate({"synthetic": "community"}).output_root_path() == Path("/tmp/from-env")
    assert validate({"synthetic": "community", "output_root": "/x"}).output_root_path() == Path("/x")


def test_every_key_has_a_flag():
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"ingest", "train", "attack", "transfer", "sweep", "report"}
    flags = {a.dest for a in sub["attack"]._actions}
    assert {f"cfg_{k}" for k in SCHEMA} <= flags


# ------------------------------------------------------------------- CLI


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "dynbackdoor" in capsys.readouterr().out


def test_invalid_value_exits_2(tmp_path, capsys):
    code, out = run_cli(["attack", *TOY, "--t", "1.5", "--output-root", str(tmp_path)], capsys)
    assert code == 2 and "attack.t" in out.err
    assert not any(tmp_path.iterdir())


def test_config_file_and_flag_override(tmp_path, capsys):
    ini = tmp_path / "exp.ini"
    ini.write_text("[data]\nsynthetic = periodic\nsynthetic_nodes = 8\nn_snapshots = 20\nwindow = 4\n"
                   "[run]\nname = cfgfile\n")
    code, out = run_cli(["ingest", "--config", str(ini), "--synthetic-nodes", "6", "--output-root", str(tmp_path)],
                        capsys)
    assert code == 0
    stats = json.loads((run_dir(out) / "data" / "stats.json").read_text())
    assert stats["nodes"] == 6 and stats["n_snapshots"] == 20
    assert run_dir(out).name.startswith("cfgfile-")
    code, out = run_cli(["ingest", "--config", str(tmp_path / "missing.ini")], capsys)
    assert code == 2


def test_env_output_root(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "envroot"))
    code, out = run_cli(["ingest", "--synthetic", "periodic", "--n-snapshots", "20", "--window", "4"], capsys)
    assert code == 0 and run_dir(out).parent == tmp_path / "envroot"


def test_failed_stage_exits_1(tmp_path, capsys):
    bad = tmp_path / "edges.txt"
    bad.write_text("0 1 5\n1 2\n")
    code, out = run_cli(["ingest", "--path", str(bad), "--output-root", str(tmp_path / "runs")], capsys)
    assert code == 1 and "line 2" in out.err
    man = json.loads((run_dir(out) / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_stage"] == "ingest"


def test_edge_list_ingest(tmp_path, capsys):
    edges = tmp_path / "edges.txt"
    edges.write_text("% header\n" + "".join(f"{i % 5} {(i + 1) % 5} {i * 10}\n" for i in range(60)))
    code, out = run_cli(["ingest", "--path", str(edges), "--n-snapshots", "12", "--window", "4",
                         "--output-root", str(tmp_path / "runs")], capsys)
    assert code == 0
    stats = json.loads((run_dir(out) / "data" / "stats.json").read_text())
    assert stats["nodes"] == 5 and stats["edges"] == 60


@pytest.fixture(scope="module")
def attack_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    t0 = time.perf_counter()
    code = cli.main(["attack", *TOY, "--output-root", str(root), "--name", "toy"])
    elapsed = time.perf_counter() - t0
    (path,) = root.iterdir()
    return code, path, elapsed, root


def test_attack_end_to_end(attack_run):
    code, path, elapsed, _ = attack_run
    assert code == 0 and elapsed < 60
    man = json.loads((path / "manifest.json").read_text())
    assert man["status"] == "complete" and man["failed_stage"] is None
    names = [s["name"] for s in man["stages"]]
    assert names[:3] == ["ingest", "train:clean-dynae-s0", "targets:II"] and names[-1] == "evaluate"
    assert len(names) == 6 and all(n.startswith("attack:II:") for n in names[3:5])
    assert set(man["metric_files"]) == {"metrics/clean-dynae-s0-loss.csv", "metrics/summary-II.csv",
                                        "metrics/targets-II.csv", "metrics/timestamps-II.csv"}
    on_disk = sorted(str(p.relative_to(path)) for p in path.rglob("*") if p.is_file() and p.name != "manifest.json")
    assert man["files"] == on_disk
    assert "config.ini" in on_disk and "models/clean-dynae-s0.ckpt" in on_disk
    assert any(f.endswith("backdoored.ckpt") for f in on_disk)
    assert validate(man["config"], check_files=False).emit() == (path / "config.ini").read_text()
    summary = (path / "metrics" / "summary-II.csv").read_text().splitlines()
    assert len(summary) == 2 and summary[1].startswith("synthetic-community,dyn-backdoor,dynae,II,2,")


def _metrics(path):
    return {p.name: p.read_bytes() for p in sorted((path / "metrics").glob("*.csv"))}


def test_attack_deterministic_and_isolated(attack_run, capsys):
    _, path, _, root = attack_run
    code, out = run_cli(["attack", *TOY, "--output-root", str(root), "--name", "toy"], capsys)
    assert code == 0
    other = run_dir(out)
    assert other != path
    assert _metrics(other) == _metrics(path)


def test_resume_completed_run(attack_run, capsys):
    _, path, _, root = attack_run
    before = _metrics(path)
    code, out = run_cli(["attack", *TOY, "--output-root", str(root), "--name", "toy", "--resume", str(path)], capsys)
    assert code == 0 and run_dir(out) == path
    assert _metrics(path) == before
    man = json.loads((path / "manifest.json").read_text())
    assert all(s["resumed"] for s in man["stages"] if s["name"] != "evaluate")


def test_resume_interrupted_run(attack_run, capsys):
    _, path, _, root = attack_run
    code, out = run_cli(["attack", *TOY, "--output-root", str(root), "--name", "partial"], capsys)
    part = run_dir(out)
    reference = _metrics(part)
    target_dirs = sorted((part / "attack").iterdir())
    for f in target_dirs[-1].iterdir():
        f.unlink()
    for f in (part / "metrics").glob("summary-*"):
        f.unlink()
    code, out = run_cli(["attack", *TOY, "--output-root", str(root), "--name", "partial", "--resume", str(part)],
                        capsys)
    assert code == 0 and _metrics(part) == reference


def test_resume_with_other_config_rejected(attack_run, capsys):
    _, path, _, root = attack_run
    code, out = run_cli(["attack", *TOY, "--q", "41", "--output-root", str(root), "--resume", str(path)], capsys)
    assert code == 2 and "differs" in out.err


def test_report_single_run(attack_run, tmp_path, capsys):
    _, path, _, _ = attack_run
    code, out = run_cli(["report", str(path), "--output-root", str(tmp_path)], capsys)
    assert code == 0
    rdir = run_dir(out)
    rows = (rdir / "metrics" / "report.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].endswith(",1")
    plots = sorted((rdir / "plots").glob("*.png"))
    assert len(plots) == 3 and all(p.stat().st_size > 1000 for p in plots)


def test_report_flags_incomplete(tmp_path, capsys):
    empty = tmp_path / "not-a-run"
    empty.mkdir()
    code, out = run_cli(["report", str(empty), "--output-root", str(tmp_path / "r")], capsys)
    assert code == 1 and "lack complete metrics" in out.err


def test_train_command(tmp_path, capsys):
    code, out = run_cli(["train", "--synthetic", "periodic", "--synthetic-nodes", "8", "--n-snapshots", "20",
                         "--window", "4", "--family", "dynrnn", "--hidden", "8", "--epochs", "3",
                         "--output-root", str(tmp_path)], capsys)
    assert code == 0
    text = (run_dir(out) / "metrics" / "clean.csv").read_text().splitlines()
    assert text[0] == "dataset,family,auc_clean,final_loss" and ",dynrnn," in text[1]


QUICK = ["--synthetic", "community", "--synthetic-nodes", "20", "--n-snapshots", "60", "--hidden", "32",
         "--batch-size", "8", "--epochs", "60", "--targets", "1", "--q", "3", "--k-gen", "2",
         "--generator-units", "8", "--generator-batch", "4", "--method", "rb"]


@pytest.mark.filterwarnings("ignore")
def test_sweep_command(tmp_path, capsys):
    code, out = run_cli(["sweep", *QUICK, "--family", "dynae", "--sweep-grid", "0.1,0.3", "--sweep-seeds", "0,1",
                         "--output-root", str(tmp_path)], capsys)
    path = run_dir(out)
    assert code == 0, out.err
    curve = (path / "metrics" / "sweep-p.csv").read_text().splitlines()
    assert len(curve) == 3
    assert len((path / "metrics" / "sweep-p-rows.csv").read_text().splitlines()) == 5
    assert (path / "plots" / "sweep-p.png").stat().st_size > 1000
    code, out = run_cli(["report", str(path), "--output-root", str(tmp_path)], capsys)
    assert code == 0
    assert (run_dir(out) / "plots" / "sweep-p.png").is_file()


@pytest.mark.filterwarnings("ignore")
def test_transfer_command(tmp_path, capsys):
    code, out = run_cli(["transfer", *QUICK, "--family", "dynae", "--transfer-families", "dynae,dynrnn",
                         "--output-root", str(tmp_path)], capsys)
    path = run_dir(out)
    assert code == 0, out.err
    rows = (path / "metrics" / "transfer.csv").read_text().splitlines()
    assert rows[0].startswith("disc_family,target_family") and len(rows) == 3
    assert rows[1].startswith("dynae,dynae,") and rows[2].startswith("dynae,dynrnn,")
    assert (path / "metrics" / "summary-dynrnn-I.csv").is_file()
    assert (path / "plots" / "transfer.png").stat().st_size > 1000

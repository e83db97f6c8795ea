import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynbackdoor import evaluation as ev
from dynbackdoor.attack import AttackBudget, TargetLink
from dynbackdoor.metrics import attack_timestamp_rate
from dynbackdoor.models import ArchSpec, build_model
from dynbackdoor.seeding import derive_seed

BUDGET = AttackBudget(t=0.05, p=0.2, n=0.2, Q=60, k_gen=5, reopt_interval=20)


def settings(method="dyn-backdoor", **kw):
    return ev.AttackSettings(method=method, budget=BUDGET, generator_units=16, generator_batch=8, **kw)


@pytest.fixture(scope="module")
def stage(community_seq):
    return ev.prepare_clean(community_seq, ArchSpec.default("dynae", 20, hidden=32), T=10, epochs=60, seed=0,
                            batch_size=8)


@pytest.fixture(scope="module")
def stage_rnn(community_seq):
    return ev.prepare_clean(community_seq, ArchSpec.default("dynrnn", 20, hidden=16), T=10, epochs=40, seed=0,
                            batch_size=8)


# ----------------------------------------------------------------- metrics


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=40),
       st.integers(0, 1))
def test_atr_matches_loop(events, desired):
    clean, truth, attacked = (np.array(x) for x in zip(*events))
    rate, attack_mask, success = attack_timestamp_rate(clean, truth, attacked, desired)
    n_att = n_succ = 0
    for c, y, a in events:
        if (c >= 0.5) == bool(y):
            n_att += 1
            n_succ += (a >= 0.5) == bool(desired)
    assert int(attack_mask.sum()) == n_att and int(success.sum()) == n_succ
    assert rate == (None if n_att == 0 else pytest.approx(n_succ / n_att))


def test_asr_and_amc():
    assert ev.asr([1.0, 0.5, 0.0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        ev.asr([])
    assert ev.amc([0.1, 0.3], "I") == pytest.approx(0.2)
    assert ev.amc([], "II") is None
    with pytest.raises(ValueError):
        ev.amc([0.1], "III")


def test_select_targets_brute_force(stage):
    scores = stage.clean.predict_batch(np.stack([s.window for s in stage.test])).mean(axis=0)
    for scen, pred in (("I", lambda x: x > 0.9), ("II", lambda x: x <= 0.1)):
        pool = [(u, v) for u in range(20) for v in range(20) if u != v and pred(scores[u, v])]
        targets = ev.select_targets(stage.clean, stage.test, scen, 5, seed=3)
        pairs = [t.pair for t in targets]
        assert len(pairs) == min(5, len(pool)) and set(pairs) <= set(pool)
        assert pairs == sorted(pairs)
        assert all(t.scenario == scen and t.clean_score == scores[t.u, t.v] for t in targets)
        assert pairs == [t.pair for t in ev.select_targets(stage.clean, stage.test, scen, 5, seed=3)]


def test_select_targets_none_available(stage):
    with pytest.raises(ev.NoTargetsError):
        ev.select_targets(stage.clean, stage.test, "I", 3, high=1.0)


def test_stealth_antisymmetric(stage, stage_rnn):
    a = ev.stealth_auc(stage.clean, stage_rnn.clean, stage.test)
    b = ev.stealth_auc(stage_rnn.clean, stage.clean, stage.test)
    assert a.delta == -b.delta
    assert ev.stealth_auc(stage.clean, stage.clean, stage.test).delta == 0.0


def test_derive_seed_streams_independent():
    assert derive_seed(0, "poison", 1, 2) == derive_seed(0, "poison", 1, 2)
    seen = {derive_seed(0, s, 1, 2) for s in ("poison", "rb", "targets")}
    seen |= {derive_seed(1, "poison", 1, 2), derive_seed(0, "poison", 2, 1)}
    assert len(seen) == 5


# ------------------------------------------------------------------ attacks


@pytest.fixture(scope="module")
def outcome(stage):
    target = ev.select_targets(stage.clean, stage.test, "II", 1, seed=0)[0]
    return ev.attack_target(stage, target, settings(), seed=0)


def test_attack_target_end_to_end(stage, outcome):
    assert outcome.result.atr is not None and outcome.result.atr >= 0.9
    assert abs(outcome.auc_backdoored - stage.auc_clean) <= 0.1
    assert len(outcome.trigger) <= BUDGET.max_links(20, 10)
    assert [e for e, _, _ in outcome.trigger_history] == [0, 20, 40]
    assert len(outcome.plan.indices) == int(np.ceil(0.2 * len(stage.train)))


def test_attack_target_deterministic(stage, outcome):
    again = ev.attack_target(stage, outcome.target, settings(), seed=0)
    assert again.trigger == outcome.trigger
    assert again.model.checksum() == outcome.model.checksum()
    assert np.array_equal(again.result.attacked_scores, outcome.result.attacked_scores)


def test_clean_model_untouched_by_attack(stage, outcome):
    ref = build_model(stage.clean.spec, 20, 10, stage.clean.seed)
    assert stage.clean.checksum() != ref.checksum()
    assert outcome.model.checksum() != stage.clean.checksum()


@pytest.mark.parametrize("method", ["dyn-one", "gb", "rb"])
def test_baselines_run(stage, outcome, method):
    o = ev.attack_target(stage, outcome.target, settings(method), seed=0)
    assert len(o.trigger_history) == 1
    assert o.trigger.mode == ("flip" if method == "rb" else "set")
    assert o.result.atr is not None


def test_report_rows(stage, outcome):
    rep = ev.AttackReport("dyn-backdoor", "dynae", "II", stage.auc_clean, [outcome])
    row = rep.summary_row()
    assert row["asr"] == outcome.result.atr and row["n_targets"] == 1
    pooled = outcome.result.success_scores
    assert row["amc_pct"] == pytest.approx(100 * pooled.mean())
    assert len(rep.timestamp_rows()) == len(stage.test)
    text = ev.rows_to_csv([row], ev.SUMMARY_FIELDS)
    assert text.splitlines()[0] == ",".join(ev.SUMMARY_FIELDS)
    assert len(text.splitlines()) == 2


def test_amc_pools_over_events(stage, outcome):
    o2 = ev.TargetOutcome(**{**outcome.__dict__})
    rep = ev.AttackReport("x", "dynae", "II", stage.auc_clean, [outcome, o2])
    pooled = np.concatenate([outcome.result.success_scores, o2.result.success_scores])
    assert rep.amc == pytest.approx(pooled.mean())


def test_run_attack_validation(stage):
    with pytest.raises(ev.NoTargetsError):
        ev.run_attack(stage, [], settings())
    with pytest.raises(ValueError):
        ev.run_attack(stage, [TargetLink(0, 1, "I"), TargetLink(0, 2, "II")], settings())
    with pytest.raises(ValueError):
        ev.AttackSettings(method="poison-all")


def test_transfer_diagonal_is_standalone(stage, stage_rnn):
    stages = {"dynae": stage, "dynrnn": stage_rnn}
    scen = {"II": settings()}
    res = ev.transfer_experiment("dynae", ["dynae", "dynrnn"], stages.__getitem__, scen, n_targets=2, seed=0)
    targets = ev.select_targets(stage.clean, stage.test, "II", 2, seed=0)
    alone = ev.run_attack(stage, targets, settings(), seed=0)
    diag = res.cells[0]
    assert diag.diagonal and diag.asr_II == alone.asr and diag.amc_II == alone.amc
    assert [o.trigger for o in res.reports[("dynae", "II")].outcomes] == [o.trigger for o in alone.outcomes]
    other = res.reports[("dynrnn", "II")]
    assert other.method == "dyn-backdoor-transfer"
    assert [o.trigger for o in other.outcomes] == [o.trigger for o in alone.outcomes]
    assert all(len(o.trigger_history) == 1 for o in other.outcomes)
    assert res.cells[1].asr_I is None and res.cells[1].error is None
    assert len(res.csv().splitlines()) == 3


def test_transfer_records_failed_cells(stage):
    def stages(fam):
        if fam == "dynae":
            return stage
        raise RuntimeError("no such stage")

    res = ev.transfer_experiment("dynae", ["dynae", "ddne"], stages, {"II": settings("rb")}, 1, seed=0)
    assert res.cells[0].error is None and res.cells[0].asr_II is not None
    assert "no such stage" in res.cells[1].error


@pytest.mark.filterwarnings("ignore:node ratio")
def test_sweep_shapes_and_failures(stage):
    def stage_for_seed(seed):
        if seed == 2:
            raise RuntimeError("broken seed")
        return stage

    quick = ev.AttackSettings("rb", AttackBudget(Q=5))
    res = ev.sensitivity_sweep("p", [0.1, 0.3], stage_for_seed, quick, n_targets=1, seeds=[0, 2])
    assert [(r["value"], r["seed"]) for r in res.rows] == [(0.1, 0), (0.3, 0), (0.1, 2), (0.3, 2)]
    assert all("broken seed" in r["error"] for r in res.rows if r["seed"] == 2)
    curve = res.curve()
    assert [c["value"] for c in curve] == [0.1, 0.3] and all(c["n_seeds"] == 1 for c in curve)
    assert len(res.curve_csv().splitlines()) == 3
    with pytest.raises(ValueError):
        ev.sensitivity_sweep("q", [0.1], stage_for_seed, quick, 1, [0])
    with pytest.raises(ValueError):
        ev.sensitivity_sweep("p", [1.5], stage_for_seed, quick, 1, [0])

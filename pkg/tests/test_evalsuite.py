from pathlib import Path

import numpy as np
import pytest

from inpaintpref import dpo, evalsuite, prefdata, rewards, toyworld
from inpaintpref.evalsuite import (
    ConstantGenerator,
    DataResampler,
    EvalSpec,
    SourceGenerator,
    drift,
    evaluate,
    win_rate,
)
from inpaintpref.seeding import stable_hash

GOLDEN = Path(__file__).parent / "golden"


def test_source_images_fidelity_matches_noise_variance():
    sigma = 0.05
    tasks = toyworld.make_dataset(seed=3, n_tasks=200, noise_sigma=sigma)
    rep = evaluate(SourceGenerator(), EvalSpec(tasks, samples_per_task=1))
    per = rep.per_sample["fidelity"]
    se = per.std(ddof=1) / np.sqrt(len(per))
    assert abs(rep.fidelity - (-sigma ** 2)) < 3 * se


def test_constant_gray_report():
    tasks = toyworld.make_dataset(seed=0, n_tasks=5)
    rep = evaluate(ConstantGenerator(0.5), EvalSpec(tasks, samples_per_task=2))
    assert rep.bias["brightness"] == pytest.approx(0.5, abs=1e-15)
    assert rep.bias["vividness"] == 0.0 and rep.bias["complexity"] == 0.0
    assert rep.sample_count == 10


def test_evaluate_deterministic(tiny_tasks, tiny_ckpt_factory):
    ck = tiny_ckpt_factory("FM")
    spec = EvalSpec(tiny_tasks, samples_per_task=2, seed=4)
    assert evaluate(ck, spec).rows() == evaluate(ck, spec).rows()
    other = evaluate(ck, EvalSpec(tiny_tasks, samples_per_task=2, seed=5))
    assert other.rows() != evaluate(ck, spec).rows()


def test_evaluate_with_judge(tiny_tasks):
    rep = evaluate(SourceGenerator(), EvalSpec(tiny_tasks, samples_per_task=1,
                                               judge=lambda t, img: 7.0))
    assert rep.judge_score == 7.0
    assert ("judge", "judge", 7.0) in rep.rows()


def test_eval_spec_validation(tiny_tasks):
    with pytest.raises(Exception):
        EvalSpec(tiny_tasks, samples_per_task=0)
    with pytest.raises(Exception):
        EvalSpec([])


def test_win_rate_identity_is_all_ties(tiny_tasks, tiny_ckpt_factory):
    ck = tiny_ckpt_factory()
    wr = win_rate(ck, ck, tiny_tasks, rewards.scorer("fidelity"), seed=1)
    assert wr.row() == (0.0, 0.0, 1.0)


def test_win_rate_constant_judge(tiny_tasks, tiny_ckpt_factory):
    wr = win_rate(tiny_ckpt_factory(seed=1), tiny_ckpt_factory(seed=2), tiny_tasks,
                  lambda t, img: 1.0)
    assert wr.tie == 1.0


def test_win_rate_matches_brute_force(tiny_ckpt_factory):
    tasks = toyworld.make_dataset(seed=5, K=2, n_tasks=100, height=4, width=4)
    a, b = tiny_ckpt_factory(seed=1), tiny_ckpt_factory(seed=2)
    wr = win_rate(a, b, tasks, rewards.scorer("fidelity"), seed=3)
    wins_a = wins_b = ties = 0
    for t in tasks:
        s = stable_hash(3, t.task_id, 0)
        fa = rewards.fidelity(t, evalsuite.CheckpointGenerator(a).generate([t], [s])[0])
        fb = rewards.fidelity(t, evalsuite.CheckpointGenerator(b).generate([t], [s])[0])
        wins_a += fa > fb
        wins_b += fb > fa
        ties += fa == fb
    assert wr.row() == (wins_a / 100, wins_b / 100, ties / 100)
    assert sum(wr.row()) == pytest.approx(1.0)


def test_win_rate_skips_failing_tasks(tiny_tasks):
    def judge(t, img):
        if t.task_id == tiny_tasks[0].task_id:
            raise RuntimeError("judge down")
        return float(img.mean())

    wr = win_rate(ConstantGenerator(0.9, True), ConstantGenerator(0.1, True), tiny_tasks, judge)
    assert wr.skipped == 1 and wr.counted == len(tiny_tasks) - 1 and wr.win_a == 1.0


def test_null_drift_calibration():
    train = toyworld.make_dataset(seed=1, n_tasks=200)
    held = toyworld.make_dataset(seed=1, n_tasks=100, first_task_id=5000)
    rep = drift(DataResampler(0.05), held, train, M=4, seed=2)
    for name in evalsuite.BIAS_STATS:
        assert abs(rep.drift[name]) < 3 * rep.stderr[name]


def test_constant_white_brightness_drift():
    train = toyworld.make_dataset(seed=1, n_tasks=30)
    rep = drift(ConstantGenerator(1.0), train[:5], train, M=1)
    data_mean = np.mean([rewards.brightness(t.source) for t in train])
    assert rep.drift["brightness"] == pytest.approx(1.0 - data_mean, abs=1e-12)
    assert rep.hacking_index == max(abs(v) for v in rep.drift.values())


def test_drift_deterministic_and_paired(tiny_tasks, tiny_ckpt_factory):
    ck = tiny_ckpt_factory("FM")
    a = drift(ck, tiny_tasks, tiny_tasks, M=2, seed=3)
    b = drift(ck, tiny_tasks, tiny_tasks, M=2, seed=3)
    assert a.rows() == b.rows()
    assert evalsuite.paired_drift_difference(a, b, "brightness") == (0.0, 0.0)
    c = drift(ck, tiny_tasks, tiny_tasks, M=2, seed=4)
    with pytest.raises(Exception):
        evalsuite.paired_drift_difference(a, drift(ck, tiny_tasks[:2], tiny_tasks, M=2), "brightness")
    assert c.rows() != a.rows()


@pytest.fixture
def scaling_setup(tiny_tasks, tiny_ckpt_factory):
    ck = tiny_ckpt_factory("DDPM", hidden=(8,))
    spec = EvalSpec(tiny_tasks[:3], samples_per_task=1, seed=2)
    cfg = dpo.DpoConfig(steps=3, lr=1e-3, beta=100.0, batch_size=2)
    return ck, spec, cfg


def test_scale_candidates_single_n_is_one_pipeline(scaling_setup, tiny_tasks):
    ck, spec, cfg = scaling_setup
    (row,) = evalsuite.scale_candidates(ck, tiny_tasks, "fidelity", [3], cfg, spec, global_seed=4)
    cands = prefdata.gen_candidates(ck, tiny_tasks, 3, 4)
    prefdata.score_candidates(cands, tiny_tasks, ["fidelity"])
    ds = prefdata.build_pairs(cands, tiny_tasks, "fidelity", generator_tag="DDPM", K=2)
    model, _, _ = dpo.train_dpo(ck, ds, cfg)
    expected = evaluate(model, spec).metrics()
    assert row["margin"] == ds.mean_margin()
    assert all(row[k] == v for k, v in expected.items())


def test_scale_candidates_margin_monotone_and_csv(scaling_setup, tiny_tasks, tmp_path):
    ck, spec, cfg = scaling_setup
    rows = evalsuite.scale_candidates(ck, tiny_tasks, "fidelity", [2, 4, 8], cfg, spec)
    margins = [r["margin"] for r in rows]
    assert margins == sorted(margins)
    path = tmp_path / "scale.csv"
    evalsuite.write_table(path, rows)
    assert evalsuite.read_table(path) == rows
    with pytest.raises(Exception):
        evalsuite.scale_candidates(ck, tiny_tasks, "fidelity", [4, 2], cfg, spec)


def test_scale_samples_step_zero_is_baseline(scaling_setup, tiny_tasks):
    ck, spec, cfg = scaling_setup
    cands = prefdata.gen_candidates(ck, tiny_tasks, 3, 0)
    prefdata.score_candidates(cands, tiny_tasks, ["fidelity"])
    ds = prefdata.build_pairs(cands, tiny_tasks, "fidelity", generator_tag="DDPM", K=2)
    rows = evalsuite.scale_samples(ck, ds, [0, 2, 4], cfg, spec)
    base = evaluate(ck, spec).metrics()
    assert all(rows[0][k] == v for k, v in base.items())
    assert [r["steps"] for r in rows] == [0, 2, 4]
    assert rows == evalsuite.scale_samples(ck, ds, [0, 2, 4], cfg, spec)


def test_csv_schemas_match_golden(tmp_path):
    tasks = toyworld.make_dataset(seed=0, n_tasks=3, height=4, width=4, noise_sigma=0.0)
    rep = evaluate(ConstantGenerator(0.25, True), EvalSpec(tasks, samples_per_task=1))
    evalsuite.write_report(tmp_path / "report.csv", rep)
    assert (tmp_path / "report.csv").read_text() == (GOLDEN / "report_constant.csv").read_text()
    wr = evalsuite.WinRate(0.5, 0.25, 0.25, 4, 0)
    evalsuite.write_win_rate(tmp_path / "win.csv", wr)
    assert (tmp_path / "win.csv").read_text() == (GOLDEN / "win_rate.csv").read_text()

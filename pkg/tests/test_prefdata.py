import numpy as np
import pytest

from inpaintpref import prefdata, toyworld
from inpaintpref.errors import FormatError, InvalidArgument, MissingScores
from inpaintpref.prefdata import Candidate, build_pairs
from inpaintpref.rewards import ScoreMatrix, ensemble_rank
from inpaintpref.seeding import stable_hash


def synthetic_candidates(tasks, score_rows, name="fidelity"):
    """Candidates whose images encode their index and whose scores are given."""
    out = []
    for task, row in zip(tasks, score_rows):
        for i, s in enumerate(row):
            img = np.full(task.source.shape, (i + 1) / (len(row) + 1))
            out.append(Candidate(task.task_id, i, stable_hash(0, task.task_id, i), img, {name: s}))
    return out


def test_candidate_seeds_follow_stable_hash(tiny_tasks, tiny_ckpt_factory):
    ck = tiny_ckpt_factory()
    cands = prefdata.gen_candidates(ck, tiny_tasks[:1], 2, global_seed=5)
    assert [c.seed for c in cands] == [stable_hash(5, tiny_tasks[0].task_id, i) for i in range(2)]
    assert cands[0].seed != cands[1].seed
    assert not np.array_equal(cands[0].image, cands[1].image)


def test_candidates_reproducible_and_blended(tiny_tasks, tiny_ckpt_factory):
    ck = tiny_ckpt_factory("FM")
    a = prefdata.gen_candidates(ck, tiny_tasks[:3], 3, global_seed=1)
    b = prefdata.gen_candidates(ck, tiny_tasks[:3], 3, global_seed=1)
    by_id = {t.task_id: t for t in tiny_tasks}
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        keep = by_id[x.task_id].mask == 0
        assert np.array_equal(x.image[keep], by_id[x.task_id].source[keep])


def test_candidate_seed_set_no_collisions():
    seeds = {prefdata.candidate_seed(7, tid, i) for tid in range(10) for i in range(16)}
    assert len(seeds) == 160


def test_gen_candidates_count_and_validation(tiny_tasks, tiny_ckpt_factory):
    ck = tiny_ckpt_factory()
    cands = prefdata.gen_candidates(ck, tiny_tasks, 3, global_seed=0)
    assert len(cands) == 3 * len(tiny_tasks)
    with pytest.raises(InvalidArgument):
        prefdata.gen_candidates(ck, tiny_tasks, 1, global_seed=0)
    with pytest.raises(InvalidArgument):
        prefdata.gen_candidates(ck, tiny_tasks, 2, global_seed=0, generator_tag="FM")


def test_single_reward_pair_and_margin(tiny_tasks):
    cands = synthetic_candidates(tiny_tasks[:1], [[0.9, 0.1]])
    ds = build_pairs(cands, tiny_tasks[:1], "fidelity")
    (p,) = ds.pairs
    assert (p.preferred_idx, p.dispreferred_idx) == (0, 1)
    assert p.margin == pytest.approx(0.8)
    assert np.array_equal(p.preferred, cands[0].image)


def test_tied_scores_excluded_and_logged(tiny_tasks, caplog):
    cands = synthetic_candidates(tiny_tasks[:2], [[0.5, 0.5, 0.5], [0.1, 0.3, 0.2]])
    with caplog.at_level("INFO"):
        ds = build_pairs(cands, tiny_tasks[:2], "fidelity")
    assert ds.excluded == [tiny_tasks[0].task_id]
    assert [p.task_id for p in ds.pairs] == [tiny_tasks[1].task_id]
    assert "excluded" in caplog.text


def test_ensemble_selector_matches_rank_oracle(tiny_tasks):
    task = tiny_tasks[0]
    scores = {"a": [3.0, 1.0, 2.0], "b": [2.0, 1.0, 3.0]}
    cands = [Candidate(task.task_id, i, i, np.full(task.source.shape, i / 3),
                       {k: v[i] for k, v in scores.items()}) for i in range(3)]
    ds = build_pairs(cands, [task], "ensemble", ensemble_members=("a", "b"))
    sel = ensemble_rank(ScoreMatrix(task.task_id, ["a", "b"], [scores["a"], scores["b"]]))
    (p,) = ds.pairs
    assert (p.preferred_idx, p.dispreferred_idx) == (sel.preferred, sel.dispreferred) == (0, 1)
    assert p.margin == pytest.approx(1.5)


def test_missing_scores_rejected(tiny_tasks):
    cands = synthetic_candidates(tiny_tasks[:1], [[0.2, 0.4]])
    with pytest.raises(MissingScores, match="hps_like"):
        build_pairs(cands, tiny_tasks[:1], "hps_like")


def test_too_few_candidates_rejected(tiny_tasks):
    cands = synthetic_candidates(tiny_tasks[:1], [[0.2]])
    with pytest.raises(InvalidArgument):
        build_pairs(cands, tiny_tasks[:1], "fidelity")


def test_random_selector_distinct_and_deterministic(tiny_tasks):
    rows = np.random.default_rng(0).random((len(tiny_tasks), 5))
    cands = synthetic_candidates(tiny_tasks, rows)
    a = build_pairs(cands, tiny_tasks, "random", seed=3, margin_reward="fidelity")
    b = build_pairs(cands, tiny_tasks, "random", seed=3, margin_reward="fidelity")
    assert len(a.pairs) == len(tiny_tasks)
    for p, q, row in zip(a.pairs, b.pairs, rows):
        assert p.preferred_idx != p.dispreferred_idx
        assert (p.preferred_idx, p.dispreferred_idx) == (q.preferred_idx, q.dispreferred_idx)
        assert p.margin == pytest.approx(abs(row[p.preferred_idx] - row[p.dispreferred_idx]))


def test_random_selector_is_uniform_over_ordered_pairs():
    tasks = toyworld.make_dataset(seed=0, n_tasks=600, height=2, width=2)
    cands = synthetic_candidates(tasks, np.zeros((600, 3)))
    ds = build_pairs(cands, tasks, "random", seed=1)
    counts = np.zeros((3, 3))
    for p in ds.pairs:
        counts[p.preferred_idx, p.dispreferred_idx] += 1
    off = counts[~np.eye(3, dtype=bool)]
    expected = 100.0
    chi2 = float(np.sum((off - expected) ** 2 / expected))
    assert chi2 < 20.52  # 99.9th percentile, 5 degrees of freedom


def test_random_margin_below_best_worst_margin():
    tasks = toyworld.make_dataset(seed=2, n_tasks=200, height=2, width=2)
    rows = np.random.default_rng(4).random((200, 8))
    cands = synthetic_candidates(tasks, rows)
    rnd = build_pairs(cands, tasks, "random", seed=0, margin_reward="fidelity")
    best = build_pairs(cands, tasks, "fidelity")
    assert rnd.mean_margin() <= best.mean_margin()


def test_margin_non_decreasing_in_prefix_size():
    tasks = toyworld.make_dataset(seed=3, n_tasks=200, height=2, width=2)
    rows = np.random.default_rng(5).normal(size=(200, 16))
    pool = synthetic_candidates(tasks, rows)
    margins = [build_pairs(prefdata.first_n(pool, n), tasks, "fidelity").mean_margin()
               for n in (2, 4, 8, 16)]
    assert margins == sorted(margins)


def test_single_reward_pairs_are_ordered(tiny_tasks):
    rows = np.random.default_rng(6).random((len(tiny_tasks), 4))
    ds = build_pairs(synthetic_candidates(tiny_tasks, rows), tiny_tasks, "fidelity")
    for p, row in zip(ds.pairs, rows):
        assert row[p.preferred_idx] >= row[p.dispreferred_idx]


def test_scoring_fills_requested_rewards(tiny_tasks, tiny_ckpt_factory):
    cands = prefdata.gen_candidates(tiny_ckpt_factory(), tiny_tasks[:2], 2, 0)
    prefdata.score_candidates(cands, tiny_tasks, ["fidelity", "hps_like"])
    assert all(set(c.scores) == {"fidelity", "hps_like"} for c in cands)


def make_dataset_with_pairs(n_tasks=6, h=4, w=4, tag="DDPM"):
    tasks = toyworld.make_dataset(seed=9, K=3, n_tasks=n_tasks, height=h, width=w)
    rows = np.random.default_rng(7).random((n_tasks, 3))
    rows[0] = 0.5  # one excluded task
    cands = synthetic_candidates(tasks, rows)
    return build_pairs(cands, tasks, "fidelity", generator_tag=tag, K=3)


def assert_datasets_equal(a, b):
    assert (a.height, a.width, a.K, a.reward_name, a.n_candidates, a.generator_tag) == \
        (b.height, b.width, b.K, b.reward_name, b.n_candidates, b.generator_tag)
    assert a.excluded == b.excluded
    for s, t in zip(a.tasks, b.tasks):
        assert (s.task_id, s.label) == (t.task_id, t.label)
        assert np.array_equal(s.source, t.source) and np.array_equal(s.mask, t.mask)
    assert len(a.pairs) == len(b.pairs)
    for p, q in zip(a.pairs, b.pairs):
        assert (p.task_id, p.preferred_idx, p.dispreferred_idx, p.preferred_seed,
                p.dispreferred_seed, p.margin) == (q.task_id, q.preferred_idx, q.dispreferred_idx,
                                                   q.preferred_seed, q.dispreferred_seed, q.margin)
        assert np.array_equal(p.preferred, q.preferred)
        assert np.array_equal(p.dispreferred, q.dispreferred)


def test_dataset_round_trip(tmp_path):
    ds = make_dataset_with_pairs()
    assert ds.excluded
    path = tmp_path / "d.pfd"
    prefdata.save_dataset(ds, path)
    back = prefdata.load_dataset(path)
    assert_datasets_equal(ds, back)
    assert prefdata.dataset_bytes(back) == path.read_bytes()


def test_task_only_dataset_round_trip():
    tasks = toyworld.make_dataset(seed=1, n_tasks=3, height=3, width=5)
    ds = prefdata.task_dataset(tasks, 4)
    back = prefdata.dataset_from_bytes(prefdata.dataset_bytes(ds))
    assert back.generator_tag is None and back.pairs == []
    assert_datasets_equal(ds, back)


def test_thousand_pair_checksum(tmp_path):
    tasks = toyworld.make_dataset(seed=4, n_tasks=1000, height=4, width=4)
    rows = np.random.default_rng(8).random((1000, 2))
    rng = np.random.default_rng(9)
    cands = [Candidate(t.task_id, i, i, toyworld.to_f32_grid(rng.random((4, 4, 3))),
                       {"fidelity": row[i]}) for t, row in zip(tasks, rows) for i in range(2)]
    ds = build_pairs(cands, tasks, "fidelity", K=4)
    assert len(ds.pairs) == 1000
    prefdata.save_dataset(ds, tmp_path / "big.pfd")
    assert prefdata.load_dataset(tmp_path / "big.pfd").pixel_checksum() == ds.pixel_checksum()


@pytest.mark.parametrize("mutate, category", [
    (lambda b: b"X" + b[1:], "bad-magic"),
    (lambda b: b[:4] + b"\x02\x00" + b[6:], "version-mismatch"),
    (lambda b: b[:40], "truncated"),
    (lambda b: b[:-30] + bytes([b[-30] ^ 0xFF]) + b[-29:], "checksum"),
])
def test_corrupted_datasets_rejected(mutate, category):
    data = prefdata.dataset_bytes(make_dataset_with_pairs())
    with pytest.raises(FormatError) as info:
        prefdata.dataset_from_bytes(mutate(data))
    assert info.value.category == category

import json
from itertools import product

import numpy as np
import pytest

from trilogen.imagekit import Video
from trilogen.orchestrator import (
    RunConfig, Scorer, derive_seed, load_or_make_corpus, moving_average, run_iteration, run_loop,
    score_prompt, splitmix64,
)
from trilogen.prefopt import PolicyParams, PromptChoice, load_policy
from trilogen.realism import corpus_from_images, realism_reward
from trilogen.smoothness import fid_adjacent, smoothness_reward


def by_text(scores):
    return {s.prompt.split("; ")[0].split(": ", 1)[1]: s for s in scores}


def test_splitmix_reference_values():
    # first outputs of the reference splitmix64 generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_derived_seeds_distinct():
    seeds = {derive_seed(42, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert all(0 <= s < 2**63 for s in seeds)
    assert derive_seed(42, 1) != derive_seed(43, 1)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(samples_per_context=1)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"iterations": 3, "bogus": 1})
    (tmp_path / "c.json").write_text(json.dumps({"iterations": 3, "seed": 7}))
    cfg = RunConfig.load(tmp_path / "c.json")
    assert (cfg.iterations, cfg.seed, cfg.samples_per_context) == (3, 7, 8)


def test_grid_size(grid_scores):
    assert all(len(v) == 36 for v in grid_scores.values())


def test_best_tokens_beat_worst_tokens(grid_scores):
    for scores in grid_scores.values():
        t = by_text(scores)
        assert t["crawls hard shell smoothly"].r_total > t["glides plain abruptly"].r_total


def test_token_monotonicity(grid_scores, default_scorer):
    v = default_scorer.cfg.vocab
    for scores in grid_scores.values():
        t = by_text(scores)
        for verb, adj, trans in product(v.verbs, v.adjectives, v.transitions):
            assert t[f"{verb} {adj} smoothly"].r_s >= t[f"{verb} {adj} abruptly"].r_s
            if adj != "plain":
                assert t[f"{verb} {adj} {trans}"].r_a >= t[f"{verb} plain {trans}"].r_a


def test_score_prompt_deterministic(default_scorer):
    y = PromptChoice("reef", (2, 1, 1))
    a = score_prompt(y, default_scorer.cfg, default_scorer.corpus)
    b = score_prompt(y, default_scorer.cfg, default_scorer.corpus)
    assert (a.r_s, a.r_a, a.r_total, a.prompt) == (b.r_s, b.r_a, b.r_total, b.prompt)
    assert a.video == b.video
    assert default_scorer(y).r_total == a.r_total


def test_corpus_frames_reach_the_ceiling(default_scorer):
    frame = default_scorer.corpus.entries[0].image
    video = Video((frame,) * 4)
    total = smoothness_reward(fid_adjacent(video)) + realism_reward(video, corpus_from_images({"r": frame})).reward
    assert total == 0.0


def concentrated(cfg, scorer, grid_scores, p=0.995):
    logits = {}
    for c in cfg.contexts:
        best = max(grid_scores[c], key=lambda s: s.r_total).choice.selections
        slots = []
        for i, n in zip(best, map(len, cfg.vocab.slots)):
            v = np.zeros(n)
            v[i] = np.log(p * (n - 1) / (1 - p))
            slots.append(v)
        logits[c] = slots
    return PolicyParams(logits, cfg.vocab.slot_names, cfg.vocab.slots)


def test_concentrated_policy_scores_near_best(default_scorer, grid_scores):
    cfg = default_scorer.cfg
    pol = concentrated(cfg, default_scorer, grid_scores)
    res = run_iteration(pol, cfg.initial_policy(), default_scorer, seed=5)
    best = np.mean([max(s.r_total for s in grid_scores[c]) for c in cfg.contexts])
    spread = np.mean([np.std([s.r_total for s in grid_scores[c]]) for c in cfg.contexts])
    assert abs(res.mean_reward - best) < 0.25 * spread


def test_iteration_is_pure(default_scorer):
    pol = default_scorer.cfg.initial_policy()
    a = run_iteration(pol, pol.copy(), default_scorer, seed=11)
    b = run_iteration(pol, pol.copy(), Scorer(default_scorer.cfg, default_scorer.corpus), seed=11)
    assert [s.row() for s in a.samples] == [s.row() for s in b.samples]
    assert a.policy == b.policy and a.loss_after == b.loss_after


def test_kto_descent_rate(default_scorer):
    cfg = default_scorer.cfg
    pol, ref = cfg.initial_policy(), cfg.initial_policy()
    descents = 0
    for i in range(20):
        res = run_iteration(pol, ref, default_scorer, derive_seed(99, i))
        descents += res.loss_after <= res.loss_before
        pol = res.policy
    assert descents >= 18


def test_zero_iterations(tmp_path, default_scorer):
    cfg = RunConfig(**{**default_scorer.cfg.__dict__, "output_dir": str(tmp_path / "z"), "iterations": 0})
    manifest = run_loop(cfg, Scorer(cfg, default_scorer.corpus))
    assert manifest["iterations"] == []
    assert load_policy(tmp_path / "z" / "policy_initial.json") == cfg.initial_policy()


def test_reward_threshold_stops_early(tmp_path, default_scorer):
    cfg = RunConfig(**{**default_scorer.cfg.__dict__, "output_dir": str(tmp_path / "t"), "iterations": 5, "reward_threshold": -10.0})
    manifest = run_loop(cfg, Scorer(cfg, default_scorer.corpus))
    assert len(manifest["iterations"]) == 1


def test_refresh_reference_runs(tmp_path, default_scorer):
    cfg = RunConfig(**{**default_scorer.cfg.__dict__, "output_dir": str(tmp_path / "r"), "iterations": 2, "refresh_reference": True, "dump_frames": False})
    manifest = run_loop(cfg, Scorer(cfg, default_scorer.corpus))
    assert manifest["iterations"][1]["z0"] == 0.0
    assert not (tmp_path / "r" / "iter_001" / "best_frames").exists()


def test_default_run_outputs(default_run, loop_dir, grid_scores, default_scorer):
    manifest, _ = default_run
    its = manifest["iterations"]
    assert [it["iteration"] for it in its] == list(range(1, 31))
    assert all(len(it["samples"]) == 16 for it in its)
    assert all(np.isfinite(s["r_total"]) for it in its for s in it["samples"])
    assert manifest["reference_unchanged"] is True
    assert load_policy(loop_dir / "policy_initial.json") == default_scorer.cfg.initial_policy()
    for name in ["manifest.json", "policy_final.json", "final_showcase_fid.csv", "iter_001/best_fid.csv", "iter_030/best_frames/frame_000001.ppm"]:
        assert (loop_dir / name).exists()


def test_default_run_moves_mass_to_best_prompt(default_run, loop_dir, grid_scores, default_scorer):
    final = load_policy(loop_dir / "policy_final.json")
    initial = default_scorer.cfg.initial_policy()
    from trilogen.prefopt import choice_prob

    for c, scores in grid_scores.items():
        best = max(scores, key=lambda s: s.r_total).choice
        assert choice_prob(final, best) > choice_prob(initial, best)


def test_moving_average():
    assert moving_average([1, 2, 3, 4, 5, 6], 3) == [1, 1.5, 2, 3, 4, 5]


def test_load_or_make_corpus_reuses(tmp_path):
    cfg = RunConfig(output_dir=str(tmp_path), corpus_count=2)
    a = load_or_make_corpus(cfg)
    mtime = (tmp_path / "corpus" / "ref_0001.pgm").stat().st_mtime_ns
    b = load_or_make_corpus(cfg)
    assert a.ids == b.ids == ["ref_0001", "ref_0002"]
    assert (tmp_path / "corpus" / "ref_0001.pgm").stat().st_mtime_ns == mtime

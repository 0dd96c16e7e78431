import json

import numpy as np
import pytest
from click.testing import CliRunner

from trilogen.cli import main
from trilogen.imagekit import Image, Video, write_video
from trilogen.prefopt import PolicyParams, PreferenceExample, PromptChoice, load_policy, save_dataset, save_policy


@pytest.fixture
def run():
    runner = CliRunner()
    return lambda *args: runner.invoke(main, [str(a) for a in args])


@pytest.fixture
def frames(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "frames"
    write_video(d, Video(tuple(Image(rng.integers(0, 256, (48, 48), dtype=np.uint8)) for _ in range(3))))
    return d


def test_parse(run, tmp_path):
    (tmp_path / "s.txt").write_text("1: a crawls ;  5:b")
    res = run("parse", tmp_path / "s.txt", "--frames", 8)
    assert res.exit_code == 0
    assert res.output.splitlines() == ["1: a crawls; 5: b", "[1, 4] a crawls", "[5, 8] b"]


def test_parse_bad_script(run, tmp_path):
    (tmp_path / "s.txt").write_text("1: a; 1: b")
    res = run("parse", tmp_path / "s.txt")
    assert res.exit_code == 3
    assert "non-increasing start_frame at entry 2" in res.output


def test_usage_error(run):
    assert run("parse").exit_code == 2
    assert run("no-such-command").exit_code == 2


def test_score_smoothness(run, frames, tmp_path):
    res = run("score-smoothness", frames, "--csv", tmp_path / "fid.csv")
    assert res.exit_code == 0 and res.output.startswith("frames=3 r_s=-")
    assert len((tmp_path / "fid.csv").read_text().splitlines()) == 3


def test_score_smoothness_bad_frame(run, frames):
    (frames / "frame_000002.ppm").write_bytes(b"P5 48 48 255\n\x00")
    assert run("score-smoothness", frames).exit_code == 3


def test_build_corpus_and_score_realism(run, frames, tmp_path):
    assert run("build-corpus", tmp_path / "c", "--count", 2, "--seed", 1).exit_code == 0
    assert sorted(p.name for p in (tmp_path / "c").iterdir()) == ["ref_0001.pgm", "ref_0002.pgm"]
    res = run("score-realism", frames, tmp_path / "c")
    assert res.exit_code == 0
    assert res.output.splitlines()[0] == "frame_id,min_distance,argmin_reference_id"
    assert "# r_a=" in res.output


def test_score_realism_empty_corpus(run, frames, tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("score-realism", frames, tmp_path / "empty").exit_code == 3


def test_render(run, tmp_path):
    (tmp_path / "s.txt").write_text("1: glides segmented smoothly; 4: darts plain abruptly")
    res = run("render", tmp_path / "s.txt", tmp_path / "out", "--frames-per-clip", 3)
    assert res.exit_code == 0
    assert len(list((tmp_path / "out").glob("frame_*.ppm"))) == 6
    assert run("render", tmp_path / "s.txt", tmp_path / "o2", "--frames", 2).exit_code == 3


def test_kto_step(run, tmp_path):
    pol = PolicyParams({"x": [np.zeros(3)]})
    save_policy(tmp_path / "p.json", pol)
    save_dataset(tmp_path / "d.json", [PreferenceExample("x", PromptChoice("x", (0,)), True), PreferenceExample("x", PromptChoice("x", (2,)), False)])
    res = run("kto-step", tmp_path / "p.json", tmp_path / "d.json", "--out", tmp_path / "new.json", "--lr", 1.0)
    assert res.exit_code == 0
    assert res.output.startswith("kto_loss_before=0.5 kto_loss_after=")
    new = load_policy(tmp_path / "new.json").logits["x"][0]
    assert new[0] > 0 > new[2]


def test_kto_step_structure_mismatch(run, tmp_path):
    save_policy(tmp_path / "p.json", PolicyParams({"x": [np.zeros(3)]}))
    save_policy(tmp_path / "r.json", PolicyParams({"x": [np.zeros(2)]}))
    save_dataset(tmp_path / "d.json", [PreferenceExample("x", PromptChoice("x", (0,)), True)])
    assert run("kto-step", tmp_path / "p.json", tmp_path / "d.json", "--reference", tmp_path / "r.json").exit_code == 3


def test_run_loop(run, tmp_path):
    cfg = {"output_dir": str(tmp_path / "run"), "iterations": 1, "corpus_count": 2, "samples_per_context": 2,
           "contexts": ["seabed"], "frames_per_clip": 3, "width": 64, "height": 64}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    res = run("run-loop", tmp_path / "cfg.json")
    assert res.exit_code == 0, res.output
    assert json.loads((tmp_path / "run" / "manifest.json").read_text())["iterations"][0]["iteration"] == 1


def test_run_loop_bad_config(run, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"iterations": -1}))
    assert run("run-loop", tmp_path / "cfg.json").exit_code == 3
    (tmp_path / "cfg.json").write_text("{not json")
    assert run("run-loop", tmp_path / "cfg.json").exit_code == 3

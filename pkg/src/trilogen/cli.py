"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from . import prefopt
from .imagekit import PnmError, read_video, write_video
from .orchestrator import RunConfig, run_loop
from .realism import build_corpus, realism_reward
from .script import ScriptError, clip_frame_ranges, parse_script, serialize_script
from .simgen import RenderConfig, make_reference_corpus, render_script
from .smoothness import fid_adjacent, smoothness_reward, write_fid_csv

DATA_ERROR = 3


class DataError(click.ClickException):
    exit_code = DATA_ERROR


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ScriptError, PnmError, prefopt.StructureError, ValueError, OSError, KeyError, TypeError, RuntimeError) as exc:
        raise DataError(str(exc)) from exc


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Reward-driven prompt optimisation for procedural trilobite videos."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("score-smoothness")
@click.argument("frames_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--csv", "csv_out", type=click.Path(dir_okay=False), help="Write the FID curve as CSV.")
def score_smoothness(frames_dir, csv_out):
    video = _guard(read_video, frames_dir)
    curve = _guard(fid_adjacent, video)
    if csv_out:
        write_fid_csv(csv_out, curve)
    click.echo(f"frames={len(video)} r_s={smoothness_reward(curve)!r} mean_fid={curve.mean()!r}")


@main.command("score-realism")
@click.argument("frames_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
def score_realism(frames_dir, corpus_dir):
    video = _guard(read_video, frames_dir)
    corpus = _guard(build_corpus, corpus_dir)
    click.echo(realism_reward(video, corpus).to_text(), nl=False)


@main.command("build-corpus")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--count", type=click.IntRange(min=1), default=12, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def build_corpus_cmd(out_dir, count, seed):
    paths = make_reference_corpus(out_dir, RenderConfig(), count, seed)
    click.echo(f"wrote {len(paths)} reference images to {out_dir}")


@main.command()
@click.argument("script_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--frames", type=int, default=None, help="Total frame count (default: last start + clip length - 1).")
@click.option("--frames-per-clip", type=click.IntRange(min=1), default=12, show_default=True)
@click.option("--background", default="seabed", show_default=True)
def render(script_file, out_dir, seed, frames, frames_per_clip, background):
    script = _guard(parse_script, Path(script_file).read_text(encoding="utf-8"))
    cfg = RenderConfig(frames_per_clip=frames_per_clip, seed=seed, background=background)
    video = _guard(render_script, script, cfg, frames)
    write_video(out_dir, video)
    click.echo(f"wrote {len(video)} frames to {out_dir}")


@main.command()
@click.argument("script_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--frames", type=int, default=None, help="Also print clip frame ranges for this frame count.")
def parse(script_file, frames):
    script = _guard(parse_script, Path(script_file).read_text(encoding="utf-8"))
    click.echo(serialize_script(script))
    if frames is not None:
        for (lo, hi), clip in zip(_guard(clip_frame_ranges, script, frames), script.clips):
            click.echo(f"[{lo}, {hi}] {clip.text}")


@main.command("kto-step")
@click.argument("policy_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("dataset_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--reference", "reference_file", type=click.Path(exists=True, dir_okay=False), help="Reference checkpoint (default: the policy itself).")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), help="Write the updated policy here.")
@click.option("--lr", type=float, default=0.05, show_default=True)
@click.option("--beta", type=float, default=0.1, show_default=True)
@click.option("--lambda-d", type=float, default=1.0, show_default=True)
@click.option("--lambda-u", type=float, default=1.0, show_default=True)
def kto_step(policy_file, dataset_file, reference_file, out_file, lr, beta, lambda_d, lambda_u):
    policy = _guard(prefopt.load_policy, policy_file)
    reference = _guard(prefopt.load_policy, reference_file) if reference_file else policy.copy()
    dataset = _guard(prefopt.load_dataset, dataset_file)
    cfg = _guard(prefopt.KTOConfig, beta, lambda_d, lambda_u)
    z0 = _guard(prefopt.exact_reference_kl, policy, reference, [ex.context for ex in dataset])
    loss, grad = _guard(prefopt.kto_loss, policy, reference, dataset, cfg, z0)
    new = prefopt.gradient_step(policy, grad, lr)
    after, _ = prefopt.kto_loss(new, reference, dataset, cfg, z0)
    if out_file:
        prefopt.save_policy(out_file, new)
    click.echo(f"kto_loss_before={loss!r} kto_loss_after={after!r}")


@main.command("run-loop")
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
def run_loop_cmd(config_file):
    cfg = _guard(RunConfig.load, config_file)
    manifest = _guard(run_loop, cfg)
    its = manifest["iterations"]
    if its:
        click.echo(f"iterations={len(its)} first_mean={its[0]['mean_reward']!r} last_mean={its[-1]['mean_reward']!r}")
    click.echo(f"manifest: {Path(cfg.output_dir) / 'manifest.json'}")


if __name__ == "__main__":
    sys.exit(main())

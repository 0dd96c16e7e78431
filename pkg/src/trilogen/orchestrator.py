"""The closed prompt-optimisation loop.

Each iteration samples prompts from the current policy, renders and scores
them with ``r = w_s * r_s + w_a * r_a``, ranks them into a KTO dataset and
takes one gradient step. Rendering uses one seed for the whole run, so a
prompt's score is a pure function of the prompt and is computed once.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from pathlib import Path

import numpy as np

from .imagekit import Video, write_video
from .prefopt import (
    KTOConfig,
    PolicyParams,
    PreferenceExample,
    PromptChoice,
    build_preference_dataset,
    choice_prob,
    exact_reference_kl,
    gradient_step,
    kto_loss,
    modal_choice,
    sample_choice,
    save_policy,
)
from .realism import RealismReport, ReferenceCorpus, build_corpus, match_score_from_distance, realism_reward
from .script import serialize_script
from .simgen import RenderConfig, TokenVocab, expand_prompt, make_reference_corpus, render_script
from .smoothness import FidCurve, fid_adjacent, smoothness_reward, write_fid_csv

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, index: int) -> int:
    """Independent 63-bit seed for stream ``index`` of ``master``."""
    return splitmix64(splitmix64(master & MASK64) ^ (index & MASK64)) >> 1


RENDER_STREAM = 0xFFFF_0001
CORPUS_STREAM = 0xFFFF_0002


@dataclass
class RunConfig:
    output_dir: str = "run"
    corpus_dir: str | None = None
    corpus_count: int = 12
    contexts: list = field(default_factory=lambda: ["seabed", "reef"])
    verbs: list = field(default_factory=lambda: list(TokenVocab().verbs))
    adjectives: list = field(default_factory=lambda: list(TokenVocab().adjectives))
    transitions: list = field(default_factory=lambda: list(TokenVocab().transitions))
    n_clips: int = 2
    frames_per_clip: int = 12
    samples_per_context: int = 8
    iterations: int = 30
    beta: float = 0.1
    lambda_D: float = 1.0
    lambda_U: float = 1.0
    learning_rate: float = 50.0
    seed: int = 42
    reward_weights: list = field(default_factory=lambda: [1.0, 1.0])
    reward_threshold: float | None = None
    refresh_reference: bool = False
    width: int = 128
    height: int = 128
    base_jitter: float = 2.0
    dump_frames: bool = True

    def __post_init__(self):
        for name in ("corpus_count", "n_clips", "frames_per_clip", "samples_per_context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not self.contexts:
            raise ValueError("at least one context is required")
        if self.samples_per_context < 2:
            raise ValueError("samples_per_context must be at least 2 to rank prompts")
        if len(self.reward_weights) != 2:
            raise ValueError("reward_weights must hold two numbers")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def vocab(self) -> TokenVocab:
        return TokenVocab(tuple(self.verbs), tuple(self.adjectives), tuple(self.transitions))

    @property
    def kto(self) -> KTOConfig:
        return KTOConfig(self.beta, self.lambda_D, self.lambda_U)

    @property
    def render_seed(self) -> int:
        return derive_seed(self.seed, RENDER_STREAM) & 0xFFFFFFFF

    def render_config(self, context: str) -> RenderConfig:
        return RenderConfig(
            width=self.width, height=self.height, frames_per_clip=self.frames_per_clip,
            base_jitter=self.base_jitter, seed=self.render_seed, background=context,
        )

    def initial_policy(self) -> PolicyParams:
        v = self.vocab
        return PolicyParams.uniform(self.contexts, v.slots, v.slot_names)


@dataclass(frozen=True)
class PromptScore:
    choice: PromptChoice
    prompt: str
    r_s: float
    r_a: float
    r_total: float
    curve: FidCurve
    report: RealismReport
    video: Video

    @property
    def best_frame_match_score(self) -> float:
        return match_score_from_distance(min(self.report.per_frame_min_distance))

    def row(self) -> dict:
        return {"context": self.choice.context, "prompt": self.prompt, "r_s": self.r_s, "r_a": self.r_a, "r_total": self.r_total}


class Scorer:
    """Renders and scores prompts for one run configuration, memoising results."""

    def __init__(self, cfg: RunConfig, corpus: ReferenceCorpus):
        self.cfg = cfg
        self.corpus = corpus
        self._cache: dict[tuple, PromptScore] = {}

    def script(self, y: PromptChoice):
        return expand_prompt(y, self.cfg.n_clips, self.cfg.frames_per_clip, self.cfg.vocab)

    def text(self, y: PromptChoice) -> str:
        return serialize_script(self.script(y))

    def __call__(self, y: PromptChoice) -> PromptScore:
        key = (y.context, y.selections)
        if key not in self._cache:
            self._cache[key] = score_prompt(y, self.cfg, self.corpus)
        return self._cache[key]

    def grid(self, context: str) -> list[PromptScore]:
        """Scores of every prompt in the token grid for ``context``."""
        return [self(PromptChoice(context, sel)) for sel in product(*(range(n) for n in map(len, self.cfg.vocab.slots)))]


def score_prompt(y: PromptChoice, cfg: RunConfig, corpus: ReferenceCorpus) -> PromptScore:
    """Expand, render and score one prompt on the whole video."""
    script = expand_prompt(y, cfg.n_clips, cfg.frames_per_clip, cfg.vocab)
    video = render_script(script, cfg.render_config(y.context))
    curve = fid_adjacent(video)
    r_s = smoothness_reward(curve)
    report = realism_reward(video, corpus)
    w_s, w_a = cfg.reward_weights
    return PromptScore(y, serialize_script(script), r_s, report.reward, w_s * r_s + w_a * report.reward, curve, report, video)


@dataclass
class IterationResult:
    index: int
    seed: int
    samples: list[PromptScore]
    dataset: list[PreferenceExample]
    policy: PolicyParams
    loss_before: float
    loss_after: float
    z0: float
    showcase: PromptScore

    @property
    def mean_reward(self) -> float:
        return math.fsum(s.r_total for s in self.samples) / len(self.samples)

    @property
    def best(self) -> PromptScore:
        return max(self.samples, key=lambda s: s.r_total)


def showcase(policy: PolicyParams, scorer: Scorer) -> PromptScore:
    """The best-scoring modal prompt across contexts (the policy's greedy output)."""
    scores = [scorer(modal_choice(policy, c)) for c in policy.contexts]
    return max(scores, key=lambda s: s.r_total)


def run_iteration(policy: PolicyParams, reference: PolicyParams, scorer: Scorer, seed: int, index: int = 1) -> IterationResult:
    cfg = scorer.cfg
    rng = np.random.default_rng(seed)
    choices = [sample_choice(policy, c, rng) for c in policy.contexts for _ in range(cfg.samples_per_context)]
    samples = [scorer(y) for y in choices]
    dataset, _ = build_preference_dataset([(s.choice.context, s.choice, s.r_total) for s in samples], scorer.text)
    z0 = exact_reference_kl(policy, reference, [ex.context for ex in dataset])
    loss_before, grad = kto_loss(policy, reference, dataset, cfg.kto, z0=z0)
    new_policy = gradient_step(policy, grad, cfg.learning_rate)
    loss_after, _ = kto_loss(new_policy, reference, dataset, cfg.kto, z0=z0)
    return IterationResult(index, seed, samples, dataset, new_policy, loss_before, loss_after, z0, showcase(policy, scorer))


def load_or_make_corpus(cfg: RunConfig) -> ReferenceCorpus:
    directory = Path(cfg.corpus_dir) if cfg.corpus_dir else Path(cfg.output_dir) / "corpus"
    if not directory.exists() or not any(directory.iterdir()):
        make_reference_corpus(directory, cfg.render_config(cfg.contexts[0]), cfg.corpus_count, derive_seed(cfg.seed, CORPUS_STREAM))
    return build_corpus(directory)


def _showcase_row(s: PromptScore) -> dict:
    return {**s.row(), "best_frame_match_score": s.best_frame_match_score, "fid_mean": s.curve.mean()}


def run_loop(cfg: RunConfig, scorer: Scorer | None = None) -> dict:
    """Run the whole loop and write manifest, curves, frames and checkpoints.

    Returns the manifest that is also written to ``manifest.json``.
    """
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if scorer is None:
        scorer = Scorer(cfg, load_or_make_corpus(cfg))
    policy = cfg.initial_policy()
    reference = policy.copy()
    frozen_reference = reference.copy()
    save_policy(out / "policy_initial.json", policy)

    iterations = []
    for i in range(1, cfg.iterations + 1):
        seed = derive_seed(cfg.seed, i)
        try:
            res = run_iteration(policy, reference, scorer, seed, i)
        except Exception as exc:
            raise RuntimeError(f"iteration {i} failed: {exc}") from exc
        log.info("iteration %d: mean r=%.4f max r=%.4f loss %.6f -> %.6f", i, res.mean_reward, res.best.r_total, res.loss_before, res.loss_after)
        it_dir = out / f"iter_{i:03d}"
        it_dir.mkdir(exist_ok=True)
        write_fid_csv(it_dir / "best_fid.csv", res.best.curve)
        write_fid_csv(it_dir / "showcase_fid.csv", res.showcase.curve)
        if cfg.dump_frames:
            write_video(it_dir / "best_frames", res.best.video)
        iterations.append({
            "iteration": i,
            "seed": seed,
            "samples": [s.row() for s in res.samples],
            "mean_reward": res.mean_reward,
            "max_reward": res.best.r_total,
            "kto_loss_before": res.loss_before,
            "kto_loss_after": res.loss_after,
            "z0": res.z0,
            "best": _showcase_row(res.best),
            "showcase": _showcase_row(res.showcase),
        })
        policy = res.policy
        if cfg.refresh_reference:
            reference = policy.copy()
        if cfg.reward_threshold is not None and res.mean_reward >= cfg.reward_threshold:
            log.info("reward threshold %.4f reached at iteration %d", cfg.reward_threshold, i)
            break

    save_policy(out / "policy_final.json", policy)
    final = showcase(policy, scorer)
    write_fid_csv(out / "final_showcase_fid.csv", final.curve)
    if cfg.dump_frames:
        write_video(out / "final_showcase_frames", final.video)
    manifest = {
        "config": asdict(cfg),
        "render_seed": cfg.render_seed,
        "corpus_ids": scorer.corpus.ids,
        "iterations": iterations,
        "final": {
            "checkpoint": "policy_final.json",
            "showcase": _showcase_row(final),
            "modal_prompt_probability": {c: choice_prob(policy, modal_choice(policy, c)) for c in policy.contexts},
        },
        "reference_unchanged": bool(cfg.refresh_reference or reference == frozen_reference),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def moving_average(values, window: int = 5) -> list[float]:
    """Trailing moving average; early entries average what is available."""
    return [float(np.mean(values[max(0, i - window + 1):i + 1])) for i in range(len(values))]

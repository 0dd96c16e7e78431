"""Preference optimisation over a factored categorical prompt policy.

A policy holds, for every context, one logit vector per slot; a prompt picks
one entry per slot, so ``log pi(y|x)`` is a sum of per-slot log-softmax
terms and every loss here has an exact analytic gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class StructureError(ValueError):
    """Policies, gradients or choices whose slot layout does not line up."""


@dataclass(frozen=True)
class PromptChoice:
    context: str
    selections: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "selections", tuple(int(i) for i in self.selections))


@dataclass(frozen=True)
class PreferenceExample:
    context: str
    choice: PromptChoice
    desirable: bool


@dataclass(frozen=True)
class KTOConfig:
    beta: float = 0.1
    lambda_D: float = 1.0
    lambda_U: float = 1.0

    def __post_init__(self):
        if not (self.beta > 0 and self.lambda_D > 0 and self.lambda_U > 0):
            raise ValueError("beta, lambda_D and lambda_U must be positive")


class PolicyParams:
    """Per-context, per-slot categorical logits.

    ``logits[context][k]`` is the logit vector of slot ``k``. Gradients use the
    same class with the same layout.
    """

    def __init__(self, logits: dict[str, Sequence[np.ndarray]], slot_names: Sequence[str] = (), vocabs: Sequence[Sequence[str]] = ()):
        self.logits = {ctx: [np.array(v, dtype=np.float64) for v in slots] for ctx, slots in logits.items()}
        if not self.logits:
            raise StructureError("a policy needs at least one context")
        shapes = None
        for ctx, slots in self.logits.items():
            if not slots:
                raise StructureError(f"context {ctx!r} has no slots")
            for v in slots:
                if v.ndim != 1 or len(v) == 0:
                    raise StructureError(f"context {ctx!r} has an empty or non-vector slot")
                if not np.all(np.isfinite(v)):
                    raise StructureError(f"context {ctx!r} has non-finite logits")
            s = [len(v) for v in slots]
            if shapes is not None and s != shapes:
                raise StructureError("all contexts must share the same slot sizes")
            shapes = s
        self.slot_names = tuple(slot_names) or tuple(f"slot{k}" for k in range(len(shapes)))
        self.vocabs = tuple(tuple(v) for v in vocabs) or tuple(tuple(str(i) for i in range(n)) for n in shapes)
        if len(self.slot_names) != len(shapes) or [len(v) for v in self.vocabs] != shapes:
            raise StructureError("slot names or vocabularies do not match the logit shapes")

    @classmethod
    def uniform(cls, contexts: Iterable[str], vocabs: Sequence[Sequence[str]], slot_names: Sequence[str] = ()) -> "PolicyParams":
        return cls({c: [np.zeros(len(v)) for v in vocabs] for c in contexts}, slot_names, vocabs)

    @property
    def contexts(self) -> tuple[str, ...]:
        return tuple(self.logits)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.vocabs)

    def structure(self):
        return (self.contexts, self.shape)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits, self.slot_names, self.vocabs)

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams({c: [np.zeros_like(v) for v in s] for c, s in self.logits.items()}, self.slot_names, self.vocabs)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v for ctx in self.contexts for v in self.logits[ctx]])

    def from_vector(self, vec) -> "PolicyParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, i = {}, 0
        for ctx in self.contexts:
            out[ctx] = []
            for v in self.logits[ctx]:
                out[ctx].append(vec[i:i + len(v)])
                i += len(v)
        if i != len(vec):
            raise StructureError(f"vector of length {len(vec)} does not fit {i} logits")
        return PolicyParams(out, self.slot_names, self.vocabs)

    def probs(self, context: str) -> list[np.ndarray]:
        return [np.exp(_log_softmax(v)) for v in self._slots(context)]

    def _slots(self, context: str) -> list[np.ndarray]:
        try:
            return self.logits[context]
        except KeyError:
            raise StructureError(f"unknown context {context!r}") from None

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (
            self.structure() == other.structure()
            and self.slot_names == other.slot_names
            and self.vocabs == other.vocabs
            and all(np.array_equal(a, b) for c in self.contexts for a, b in zip(self.logits[c], other.logits[c]))
        )

    def __repr__(self):
        return f"PolicyParams(contexts={self.contexts}, shape={self.shape})"


def _log_softmax(v: np.ndarray) -> np.ndarray:
    m = np.max(v)
    return v - m - math.log(np.sum(np.exp(v - m)))


def _log_sigmoid(z: float) -> float:
    return -float(np.logaddexp(0.0, -z))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def check_structure(a: PolicyParams, b: PolicyParams) -> None:
    if a.structure() != b.structure():
        raise StructureError(f"policy structures differ: {a.structure()} vs {b.structure()}")


def _check_choice(policy: PolicyParams, y: PromptChoice) -> list[np.ndarray]:
    slots = policy._slots(y.context)
    if len(y.selections) != len(slots):
        raise StructureError(f"choice has {len(y.selections)} selections, policy has {len(slots)} slots")
    for k, (i, v) in enumerate(zip(y.selections, slots)):
        if not 0 <= i < len(v):
            raise StructureError(f"selection {i} out of range for slot {k} of size {len(v)}")
    return slots


def log_prob(policy: PolicyParams, x: str, y: PromptChoice) -> float:
    if y.context != x:
        raise StructureError(f"choice context {y.context!r} differs from {x!r}")
    slots = _check_choice(policy, y)
    return float(sum(_log_softmax(v)[i] for i, v in zip(y.selections, slots)))


def _add_log_prob_grad(grad: PolicyParams, policy: PolicyParams, y: PromptChoice, weight: float) -> None:
    """grad += weight * d log pi(y|x) / d logits."""
    for k, (i, v) in enumerate(zip(y.selections, policy._slots(y.context))):
        g = -np.exp(_log_softmax(v))
        g[i] += 1.0
        grad.logits[y.context][k] += weight * g


def log_ratio(policy: PolicyParams, reference: PolicyParams, y: PromptChoice) -> float:
    return log_prob(policy, y.context, y) - log_prob(reference, y.context, y)


def bradley_terry(r_w: float, r_l: float) -> float:
    """Probability that the first response is preferred: ``sigmoid(r_w - r_l)``."""
    return _sigmoid(r_w - r_l)


def reward_model_nll(score_pairs: Sequence[tuple[float, float]]) -> float:
    if not score_pairs:
        raise ValueError("reward_model_nll needs at least one pair")
    return math.fsum(-_log_sigmoid(rw - rl) for rw, rl in score_pairs) / len(score_pairs)


def kl_objective_value(mean_reward: float, mean_kl: float, beta: float) -> float:
    if mean_kl < 0:
        raise ValueError(f"KL divergence cannot be negative, got {mean_kl}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return mean_reward - beta * mean_kl


def dpo_loss(policy: PolicyParams, reference: PolicyParams, pairs, beta: float = 0.1) -> tuple[float, PolicyParams]:
    """Mean ``-log sigmoid(beta * (r_w - r_l))`` with log-ratio rewards, and its gradient."""
    check_structure(policy, reference)
    if not pairs:
        raise ValueError("dpo_loss needs at least one pair")
    grad = policy.zeros_like()
    total = []
    n = len(pairs)
    for x, y_w, y_l in pairs:
        if y_w.context != x or y_l.context != x:
            raise StructureError("pair choices must belong to the pair's context")
        z = beta * (log_ratio(policy, reference, y_w) - log_ratio(policy, reference, y_l))
        total.append(-_log_sigmoid(z))
        dz = -_sigmoid(-z) * beta / n
        _add_log_prob_grad(grad, policy, y_w, dz)
        _add_log_prob_grad(grad, policy, y_l, -dz)
    return math.fsum(total) / n, grad


def slot_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    lp = _log_softmax(p_logits)
    lq = _log_softmax(q_logits)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def exact_reference_kl(policy: PolicyParams, reference: PolicyParams, contexts: Sequence[str]) -> float:
    """Mean over ``contexts`` (repeats count) of the exact KL(policy || reference)."""
    check_structure(policy, reference)
    contexts = list(contexts)
    if not contexts:
        return 0.0
    per = {}
    for c in set(contexts):
        per[c] = math.fsum(slot_kl(p, q) for p, q in zip(policy._slots(c), reference._slots(c)))
    return max(0.0, math.fsum(per[c] for c in contexts) / len(contexts))


def kto_loss(
    policy: PolicyParams,
    reference: PolicyParams,
    dataset: Sequence[PreferenceExample],
    cfg: KTOConfig = KTOConfig(),
    z0: float | None = None,
) -> tuple[float, PolicyParams]:
    """KTO loss ``mean(lambda_y - v(x, y))`` and its gradient.

    The KL baseline ``z0`` is computed exactly over the dataset's contexts
    unless given, and is treated as a constant by the gradient.
    """
    check_structure(policy, reference)
    if not dataset:
        raise ValueError("kto_loss needs a nonempty dataset")
    if z0 is None:
        z0 = exact_reference_kl(policy, reference, [ex.context for ex in dataset])
    grad = policy.zeros_like()
    n = len(dataset)
    terms = []
    for ex in dataset:
        r = log_ratio(policy, reference, ex.choice)
        if ex.desirable:
            s = _sigmoid(cfg.beta * (r - z0))
            terms.append(cfg.lambda_D - cfg.lambda_D * s)
            dloss_dr = -cfg.lambda_D * cfg.beta * s * (1 - s)
        else:
            s = _sigmoid(cfg.beta * (z0 - r))
            terms.append(cfg.lambda_U - cfg.lambda_U * s)
            dloss_dr = cfg.lambda_U * cfg.beta * s * (1 - s)
        _add_log_prob_grad(grad, policy, ex.choice, dloss_dr / n)
    return math.fsum(terms) / n, grad


def gradient_step(policy: PolicyParams, gradient: PolicyParams, learning_rate: float = 0.05) -> PolicyParams:
    check_structure(policy, gradient)
    if learning_rate < 0:
        raise ValueError("learning_rate must be nonnegative")
    return PolicyParams(
        {c: [v - learning_rate * g for v, g in zip(policy.logits[c], gradient.logits[c])] for c in policy.contexts},
        policy.slot_names,
        policy.vocabs,
    )


def default_text(y: PromptChoice) -> str:
    return " ".join(str(i) for i in y.selections)


def build_preference_dataset(
    scored: Sequence[tuple[str, PromptChoice, float]],
    text_of: Callable[[PromptChoice], str] = default_text,
) -> tuple[list[PreferenceExample], list[tuple[str, PromptChoice, PromptChoice]]]:
    """Split each context's samples at the median reward.

    Samples are ranked by reward (descending) with ties broken by prompt text
    (ascending). The top half is desirable, the bottom half undesirable, and
    an odd middle sample is dropped. Also returns DPO pairs matching the i-th
    desirable with the i-th undesirable sample.

    Raises:
        ValueError: if a context has fewer than two samples.
    """
    by_ctx: dict[str, list[tuple[PromptChoice, float]]] = {}
    for x, y, r in scored:
        if not math.isfinite(r):
            raise ValueError(f"non-finite reward {r} in context {x!r}")
        by_ctx.setdefault(x, []).append((y, r))
    examples, pairs = [], []
    for x, items in by_ctx.items():
        if len(items) < 2:
            raise ValueError(f"context {x!r} has {len(items)} sample(s); at least 2 are needed")
        ranked = sorted(items, key=lambda yr: (-yr[1], text_of(yr[0])))
        half = len(ranked) // 2
        good = ranked[:half]
        bad = ranked[len(ranked) - half:]
        examples += [PreferenceExample(x, y, True) for y, _ in good]
        examples += [PreferenceExample(x, y, False) for y, _ in bad]
        pairs += [(x, g, b) for (g, _), (b, _) in zip(good, bad)]
    return examples, pairs


def sample_choice(policy: PolicyParams, context: str, rng: np.random.Generator) -> PromptChoice:
    sel = []
    for p in policy.probs(context):
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
        sel.append(min(idx, len(p) - 1))
    return PromptChoice(context, tuple(sel))


def modal_choice(policy: PolicyParams, context: str) -> PromptChoice:
    """Most probable prompt; ties go to the lowest vocabulary index."""
    return PromptChoice(context, tuple(int(np.argmax(v)) for v in policy._slots(context)))


def choice_prob(policy: PolicyParams, y: PromptChoice) -> float:
    return math.exp(log_prob(policy, y.context, y))


def save_policy(path, policy: PolicyParams) -> None:
    doc = {
        "slot_names": list(policy.slot_names),
        "vocabs": [list(v) for v in policy.vocabs],
        "contexts": {c: [[float(x) for x in v] for v in policy.logits[c]] for c in policy.contexts},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_policy(path) -> PolicyParams:
    doc = json.loads(Path(path).read_text())
    try:
        return PolicyParams(doc["contexts"], doc["slot_names"], doc["vocabs"])
    except KeyError as exc:
        raise StructureError(f"{path}: checkpoint is missing {exc.args[0]!r}") from None


def save_dataset(path, dataset: Sequence[PreferenceExample]) -> None:
    rows = [{"context": ex.context, "selections": list(ex.choice.selections), "desirable": ex.desirable} for ex in dataset]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def load_dataset(path) -> list[PreferenceExample]:
    rows = json.loads(Path(path).read_text())
    return [PreferenceExample(r["context"], PromptChoice(r["context"], r["selections"]), bool(r["desirable"])) for r in rows]

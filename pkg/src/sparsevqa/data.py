"""Synthetic changing-priors benchmark.

Each question prototype carries a preferred answer; in the training split
the answer sticks to that preference with probability beta, so the question
alone is highly predictive. The test split shifts every preference to a
different answer of the same type, so a model leaning on the learned prior
is systematically wrong out of distribution. Visual features encode the
true answer with probability gamma and are pure noise otherwise, giving a
vision-based route whose value survives the prior shift.

Question types partition the answer space (yes/no, numeric, other) so
per-type accuracy breakdowns are meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace, field
from typing import Optional

import numpy as np

QUESTION_TYPES = ("yn", "num", "other")

# token layout: 0 reserved for the leading CLS position
CLS_TOKEN = 0
TYPE_TOKEN_BASE = 1
PROTO_TOKEN_BASE = 4


@dataclass(frozen=True)
class SynthSpec:
    answers: int = 16
    prototypes: int = 24
    beta: Optional[float] = 0.9       # None draws answers uniformly per type
    gamma: float = 0.8
    train_size: int = 16000
    test_size: int = 4000
    seed: int = 0
    question_len: int = 6
    vis_len: int = 8
    vis_dim: int = 16
    distractor_prob: float = 0.2
    distractor_score: float = 0.3
    vis_noise: float = 0.0
    sample_offset: int = 0   # shifts sampling streams, keeps encodings fixed

    def __post_init__(self):
        if self.answers < 2:
            raise ValueError("need at least two answers")
        if self.prototypes < len(self.active_types()):
            raise ValueError("need at least one prototype per question type")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta={self.beta} outside [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma={self.gamma} outside [0, 1]")
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("split sizes must be positive")
        if self.question_len < 3:
            raise ValueError("question_len must fit CLS, type and prototype tokens")

    def answer_slices(self) -> dict:
        """Disjoint answer ranges per question type; empty slices drop out."""
        k = self.answers
        slices = {"yn": list(range(min(2, k)))}
        rest = k - len(slices["yn"])
        n_num = (rest + 1) // 2
        slices["num"] = list(range(2, 2 + n_num))
        slices["other"] = list(range(2 + n_num, k))
        return {t: s for t, s in slices.items() if s}

    def active_types(self):
        return tuple(self.answer_slices())

    def prototype_types(self) -> dict:
        """Round-robin assignment of prototypes to active question types."""
        active = self.active_types()
        return {p: active[p % len(active)] for p in range(self.prototypes)}

    def required_vocab(self) -> int:
        return PROTO_TOKEN_BASE + self.prototypes + 3  # a few filler tokens

    def unbiased(self, size: int) -> "SynthSpec":
        """Variant with no question-answer correlation, for pre-training.

        Keeps the structure seed, so answer encodings match the parent spec;
        only the sampling streams shift.
        """
        return replace(self, beta=None, train_size=size, test_size=1,
                       sample_offset=7919)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


@dataclass
class Example:
    prototype: int
    qtype: str
    tokens: np.ndarray
    visual: np.ndarray
    targets: np.ndarray
    answer: int


@dataclass
class Dataset:
    spec: SynthSpec
    split: str
    examples: list
    train_preferred: dict = field(default_factory=dict)
    preferred: dict = field(default_factory=dict)
    _arrays: Optional[dict] = None

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def arrays(self) -> dict:
        """Contiguous batched views over the whole split (cached)."""
        if self._arrays is None:
            self._arrays = {
                "tokens": np.stack([e.tokens for e in self.examples]),
                "visual": np.stack([e.visual for e in self.examples]),
                "targets": np.stack([e.targets for e in self.examples]),
                "prototypes": np.array([e.prototype for e in self.examples]),
                "qtypes": np.array([e.qtype for e in self.examples]),
            }
        return self._arrays


def _expand_tokens(spec: SynthSpec, proto: int, qtype: str) -> np.ndarray:
    """Deterministic short token sequence identifying the prototype."""
    type_tok = TYPE_TOKEN_BASE + QUESTION_TYPES.index(qtype)
    proto_tok = PROTO_TOKEN_BASE + proto
    filler_base = PROTO_TOKEN_BASE + spec.prototypes
    toks = [CLS_TOKEN, type_tok, proto_tok]
    i = 0
    while len(toks) < spec.question_len:
        toks.append(filler_base + (proto * (i + 3) + i) % 3)
        i += 1
    return np.array(toks[: spec.question_len], dtype=np.int64)


def _preferred_answers(spec: SynthSpec, rng) -> tuple:
    slices = spec.answer_slices()
    types = spec.prototype_types()
    train_pref, test_pref = {}, {}
    for p in range(spec.prototypes):
        sl = slices[types[p]]
        a = int(rng.choice(sl))
        train_pref[p] = a
        # shift within the slice: a derangement of the preference map
        test_pref[p] = sl[(sl.index(a) + 1) % len(sl)] if len(sl) > 1 else a
    return train_pref, test_pref


def _draw_answer(rng, sl, preferred, beta):
    if beta is None or len(sl) == 1:
        return int(rng.choice(sl))
    if rng.random() < beta:
        return preferred
    others = [a for a in sl if a != preferred]
    return int(rng.choice(others))


def _make_split(spec, rng, size, split, prefs, encodings, train_pref):
    slices = spec.answer_slices()
    types = spec.prototype_types()
    examples = []
    for _ in range(size):
        p = int(rng.integers(spec.prototypes))
        qtype = types[p]
        sl = slices[qtype]
        answer = _draw_answer(rng, sl, prefs[p], spec.beta)
        if rng.random() < spec.gamma:
            visual = (encodings[answer]
                      + spec.vis_noise * rng.normal(size=(spec.vis_len, spec.vis_dim)))
        else:
            visual = rng.normal(size=(spec.vis_len, spec.vis_dim))
        targets = np.zeros(spec.answers)
        targets[answer] = 1.0
        if len(sl) > 1 and rng.random() < spec.distractor_prob:
            distractor = int(rng.choice([a for a in sl if a != answer]))
            targets[distractor] = spec.distractor_score
        examples.append(Example(prototype=p, qtype=qtype,
                                tokens=_expand_tokens(spec, p, qtype),
                                visual=visual, targets=targets, answer=answer))
    return Dataset(spec=spec, split=split, examples=examples,
                   train_preferred=dict(train_pref), preferred=dict(prefs))


def generate(spec: SynthSpec):
    """Returns (train, test) datasets; byte-identical for a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    encodings = rng.normal(size=(spec.answers, spec.vis_dim))
    train_pref, test_pref = _preferred_answers(spec, rng)
    train = _make_split(spec, np.random.default_rng(spec.seed + 1 + spec.sample_offset),
                        spec.train_size, "train", train_pref, encodings, train_pref)
    test = _make_split(spec, np.random.default_rng(spec.seed + 2 + spec.sample_offset),
                       spec.test_size, "test", test_pref, encodings, train_pref)
    return train, test


# ---------------------------------------------------------------------------
# closed-form reference accuracies


@dataclass
class OracleAccuracies:
    question_only_train: float
    question_only_test: float
    vision_ceiling_train: float
    vision_ceiling_test: float
    vision_only_test: float
    chance_test: float


def _prior(spec, sl, preferred):
    c = len(sl)
    probs = {}
    for a in sl:
        if spec.beta is None or c == 1:
            probs[a] = 1.0 / c
        elif a == preferred:
            probs[a] = spec.beta
        else:
            probs[a] = (1.0 - spec.beta) / (c - 1)
    return probs


def oracle_accuracies(spec: SynthSpec) -> OracleAccuracies:
    """Exact accuracies of reference predictors under the generative process.

    The question-only predictor answers with the training prior's argmax;
    vision ceilings assume informative features are decoded perfectly and
    fall back on the stated prior (or a uniform guess) otherwise.
    """
    rng = np.random.default_rng(spec.seed)
    rng.normal(size=(spec.answers, spec.vis_dim))  # keep stream aligned
    train_pref, test_pref = _preferred_answers(spec, rng)
    slices = spec.answer_slices()
    types = spec.prototype_types()

    q_tr, q_te, v_tr, v_te, v_free, chance = [], [], [], [], [], []
    for p in range(spec.prototypes):
        sl = slices[types[p]]
        p_tr = _prior(spec, sl, train_pref[p])
        p_te = _prior(spec, sl, test_pref[p])
        guess = max(sl, key=lambda a: (p_tr[a], -a))  # argmax, low index first
        guess_te = max(sl, key=lambda a: (p_te[a], -a))
        g = spec.gamma
        q_tr.append(p_tr[guess])
        q_te.append(p_te[guess])
        v_tr.append(g + (1 - g) * p_tr[guess])
        v_te.append(g + (1 - g) * p_te[guess_te])
        v_free.append(g + (1 - g) / len(sl))
        chance.append(1.0 / len(sl))
    mean = lambda xs: float(np.mean(xs))
    return OracleAccuracies(
        question_only_train=mean(q_tr),
        question_only_test=mean(q_te),
        vision_ceiling_train=mean(v_tr),
        vision_ceiling_test=mean(v_te),
        vision_only_test=mean(v_free),
        chance_test=mean(chance),
    )


# ---------------------------------------------------------------------------
# line-delimited persistence


def save_dataset(dataset: Dataset, path):
    with open(path, "w") as fh:
        header = {"synth_spec": dataset.spec.to_dict(), "split": dataset.split,
                  "count": len(dataset),
                  "train_preferred": {str(k): v for k, v in dataset.train_preferred.items()},
                  "preferred": {str(k): v for k, v in dataset.preferred.items()}}
        fh.write(json.dumps(header) + "\n")
        for ex in dataset.examples:
            sparse = {str(i): float(s) for i, s in enumerate(ex.targets) if s > 0}
            fh.write(json.dumps({
                "prototype": ex.prototype,
                "qtype": ex.qtype,
                "tokens": ex.tokens.tolist(),
                "visual": [round(v, 12) for v in ex.visual.ravel().tolist()],
                "targets": sparse,
            }) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        spec = SynthSpec.from_dict(header["synth_spec"])
        examples = []
        for line in fh:
            raw = json.loads(line)
            targets = np.zeros(spec.answers)
            for k, v in raw["targets"].items():
                targets[int(k)] = v
            visual = np.array(raw["visual"]).reshape(spec.vis_len, spec.vis_dim)
            examples.append(Example(
                prototype=raw["prototype"], qtype=raw["qtype"],
                tokens=np.array(raw["tokens"], dtype=np.int64),
                visual=visual, targets=targets,
                answer=int(np.argmax(targets)),
            ))
    return Dataset(spec=spec, split=header["split"], examples=examples,
                   train_preferred={int(k): v for k, v in header.get("train_preferred", {}).items()},
                   preferred={int(k): v for k, v in header.get("preferred", {}).items()})

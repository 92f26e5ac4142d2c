"""Training objectives: sigmoid BCE, product-of-experts fusion, and the
learned-mixin objective with its entropy penalty, plus the question-only
bias prior they lean on.

The bias prior is a per-prototype answer frequency table; on this benchmark
that is the exact question-only predictor, and it stays fixed during
training (no gradient ever reaches it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_EPS = 1e-9


def _const(x) -> Tensor:
    """Detach: raw data wrapped as a fresh constant tensor."""
    if isinstance(x, Tensor):
        return Tensor(x.data.copy())
    return Tensor(np.asarray(x, dtype=np.float64))


def bce_loss(logits, targets) -> Tensor:
    """Mean over elements of -[t log s(z) + (1 - t) log(1 - s(z))]."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("target scores must lie in [0, 1]")
    p = ad.sigmoid(logits)
    pos = ad.mul(Tensor(t), ad.log(p, eps=LOG_EPS))
    neg = ad.mul(Tensor(1.0 - t), ad.log(ad.sub(1.0, p), eps=LOG_EPS))
    return ad.neg(ad.mean_(ad.add(pos, neg)))


def poe_fuse(p_m, p_b) -> Tensor:
    """Product of experts: renormalized product of the two distributions."""
    p_m = p_m if isinstance(p_m, Tensor) else Tensor(p_m)
    fused = ad.add(ad.log(p_m, eps=LOG_EPS), ad.log(_const(p_b), eps=LOG_EPS))
    return ad.softmax(fused, axis=-1)


def gate_value(h, w) -> Tensor:
    """Nonnegative bias trust g = softplus(w . h), one scalar per example."""
    return ad.softplus(ad.matmul(h, w))


def lmh_fuse(p_m, p_b, h, w):
    """Learned-mixin fusion; returns (debiased distribution, gate values)."""
    p_m = p_m if isinstance(p_m, Tensor) else Tensor(p_m)
    g = gate_value(h, w)
    g_col = ad.reshape(g, (g.shape[0], 1))
    fused = ad.add(ad.log(p_m, eps=LOG_EPS),
                   ad.mul(g_col, ad.log(_const(p_b), eps=LOG_EPS)))
    return ad.softmax(fused, axis=-1), g


def entropy_penalty(p_b, g, z: float) -> Tensor:
    """z * Shannon entropy of softmax(g * log p_b), meaned over the batch.

    Minimizing it sharpens the gated bias distribution, which keeps the
    gate from collapsing to zero and ignoring the prior.
    """
    if z < 0:
        raise ValueError("entropy coefficient must be nonnegative")
    log_pb = ad.log(_const(p_b), eps=LOG_EPS)
    g_col = ad.reshape(g, (g.shape[0], 1)) if g.ndim == 1 else g
    q = ad.softmax(ad.mul(g_col, log_pb), axis=-1)
    ent = ad.neg(ad.sum_(ad.mul(q, ad.log(q, eps=LOG_EPS)), axis=-1))
    return ad.mul(ad.mean_(ent), float(z))


def lmh_loss(logits, p_b, h, w, targets, z: float) -> Tensor:
    """BCE on the gate-fused scores plus the entropy penalty.

    The fusion adds g * log p_b to the raw answer scores, so a closed gate
    (g = 0) reduces exactly to the plain BCE loss. The bias distribution is
    detached: gradient reaches the scores, h and w, never the prior.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    g = gate_value(h, w)
    g_col = ad.reshape(g, (g.shape[0], 1))
    fused = ad.add(logits, ad.mul(g_col, ad.log(_const(p_b), eps=LOG_EPS)))
    loss = bce_loss(fused, targets)
    if z != 0.0:
        loss = ad.add(loss, entropy_penalty(p_b, g, z))
    return loss


@dataclass
class BiasPrior:
    """Question-only answer distributions keyed by prototype id."""

    table: dict
    answers: int
    smoothing: float = 0.0

    def lookup(self, prototype: int) -> np.ndarray:
        dist = self.table.get(int(prototype))
        if dist is None:
            return np.full(self.answers, 1.0 / self.answers)
        return dist

    def lookup_batch(self, prototypes) -> np.ndarray:
        return np.stack([self.lookup(p) for p in np.asarray(prototypes).ravel()])

    def to_json(self) -> str:
        return json.dumps({
            "answers": self.answers,
            "smoothing": self.smoothing,
            "table": {str(k): list(v) for k, v in self.table.items()},
        })

    @classmethod
    def from_json(cls, text: str) -> "BiasPrior":
        raw = json.loads(text)
        table = {int(k): np.asarray(v, dtype=np.float64)
                 for k, v in raw["table"].items()}
        return cls(table=table, answers=raw["answers"], smoothing=raw["smoothing"])


def fit_bias_prior(examples, answers: int, smoothing: float = 1.0) -> BiasPrior:
    """Per-prototype ground-truth frequencies with additive smoothing."""
    counts = {}
    for ex in examples:
        vec = counts.setdefault(int(ex.prototype), np.zeros(answers))
        vec[int(np.argmax(ex.targets))] += 1.0
    table = {}
    for proto, vec in counts.items():
        smoothed = vec + smoothing
        total = smoothed.sum()
        table[proto] = smoothed / total if total > 0 else np.full(answers, 1.0 / answers)
    return BiasPrior(table=table, answers=answers, smoothing=smoothing)

"""One-shot magnitude pruning and trainable binary masks.

A MaskSet pairs each prunable matrix with a binary mask (what the forward
pass multiplies in) and optionally a real-valued mask that is trained with
a straight-through gradient: the binarization is treated as identity, so the
gradient that arrives at the binary mask, which equals upstream * W, updates
the real mask directly. Thresholds are recomputed periodically so survivor
counts track the per-matrix targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sparsity import SparsityConfig

DEFAULT_PHI0 = 0.01
DEFAULT_ALPHA = 2.0
DEFAULT_RECOMPUTE_EVERY = 10
DEFAULT_MASK_LR = 0.05


class NonFiniteLossError(RuntimeError):
    """A training step produced a non-finite loss and was aborted."""


def prune_count(target: float, size: int) -> int:
    """Number of entries to remove: ceil(target * size), guarded for floats."""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"sparsity target {target} outside [0, 1]")
    return min(size, math.ceil(target * size - 1e-9))


def binarize(m_hat: np.ndarray, phi: float) -> np.ndarray:
    """Binary mask: 1 where the real mask meets the threshold, else 0."""
    return (m_hat >= phi).astype(np.float64)


@dataclass
class MaskSet:
    targets: dict
    binary: dict
    real: Optional[dict] = None
    thresholds: dict = field(default_factory=dict)
    alpha: float = DEFAULT_ALPHA
    phi0: float = DEFAULT_PHI0
    recompute_every: int = DEFAULT_RECOMPUTE_EVERY
    mask_lr: float = DEFAULT_MASK_LR
    global_threshold: bool = False
    overall_target: Optional[float] = None

    def as_tensors(self, requires_grad: bool = False) -> dict:
        return {n: Tensor(m, requires_grad=requires_grad)
                for n, m in self.binary.items()}

    def survivor_counts(self) -> dict:
        return {n: int(m.sum()) for n, m in self.binary.items()}

    def binarize_all(self):
        if self.real is None:
            raise ValueError("maskset has no real-valued mask")
        for name, m_hat in self.real.items():
            self.binary[name] = binarize(m_hat, self.thresholds[name])

    def recompute_thresholds(self):
        """Reset each threshold to the quantile that restores the target."""
        if self.real is None:
            raise ValueError("maskset has no real-valued mask")
        if self.global_threshold:
            if self.overall_target is None:
                raise ValueError("global thresholding needs an overall target")
            flat = np.concatenate([m.ravel() for m in self.real.values()])
            phi = _threshold_for_keep(flat, flat.size - prune_count(self.overall_target, flat.size))
            for name in self.real:
                self.thresholds[name] = phi
        else:
            for name, m_hat in self.real.items():
                n = m_hat.size
                keep = n - prune_count(self.targets[name], n)
                self.thresholds[name] = _threshold_for_keep(m_hat.ravel(), keep)
        self.binarize_all()

    def copy(self) -> "MaskSet":
        return MaskSet(
            targets=dict(self.targets),
            binary={n: m.copy() for n, m in self.binary.items()},
            real=None if self.real is None else {n: m.copy() for n, m in self.real.items()},
            thresholds=dict(self.thresholds),
            alpha=self.alpha, phi0=self.phi0,
            recompute_every=self.recompute_every, mask_lr=self.mask_lr,
            global_threshold=self.global_threshold,
            overall_target=self.overall_target,
        )


def _threshold_for_keep(values: np.ndarray, keep: int) -> float:
    if keep <= 0:
        top = float(values.max()) if values.size else 0.0
        return np.nextafter(top, np.inf)
    if keep >= values.size:
        return float(values.min())
    return float(np.partition(values, values.size - keep)[values.size - keep])


def _omp_mask(weights: np.ndarray, target: float) -> np.ndarray:
    """Zero the smallest-|W| entries; ties resolved by smaller flat index."""
    mask = np.ones(weights.size)
    k = prune_count(target, weights.size)
    if k:
        order = np.argsort(np.abs(weights).ravel(), kind="stable")
        mask[order[:k]] = 0.0
    return mask.reshape(weights.shape)


def omp(registry, targets: dict) -> MaskSet:
    """One-shot magnitude pruning; weights are read, never changed."""
    binary, thresholds = {}, {}
    for name, target in targets.items():
        entry = registry[name]
        binary[name] = _omp_mask(entry.tensor.data, target)
        thresholds[name] = DEFAULT_PHI0
    return MaskSet(targets=dict(targets), binary=binary, thresholds=thresholds)


def init_real_mask(registry, targets: dict, alpha: float = DEFAULT_ALPHA,
                   **hyper) -> MaskSet:
    """Magnitude-based initialization: kept entries start at alpha * phi0."""
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    base = omp(registry, targets)
    phi0 = hyper.pop("phi0", DEFAULT_PHI0)
    real = {n: m * (alpha * phi0) for n, m in base.binary.items()}
    mask = MaskSet(targets=dict(targets), binary=base.binary, real=real,
                   thresholds={n: phi0 for n in targets}, alpha=alpha,
                   phi0=phi0, **hyper)
    mask.binarize_all()
    return mask


def random_init_real_mask(registry, targets: dict, seed: int,
                          alpha: float = DEFAULT_ALPHA, **hyper) -> MaskSet:
    """Ablation baseline: real mask drawn uniform in [0, 2*phi0]."""
    rng = np.random.default_rng(seed)
    phi0 = hyper.pop("phi0", DEFAULT_PHI0)
    real, binary, thresholds = {}, {}, {}
    for name, target in targets.items():
        shape = registry[name].tensor.shape
        real[name] = rng.uniform(0.0, 2.0 * phi0, size=shape)
        binary[name] = np.ones(shape)
        thresholds[name] = phi0
    mask = MaskSet(targets=dict(targets), binary=binary, real=real,
                   thresholds=thresholds, alpha=alpha, phi0=phi0, **hyper)
    mask.recompute_thresholds()
    return mask


def mask_train_step(registry, maskset: MaskSet, batch, loss_fn,
                    step_index: int, extra_params=(), extra_opt=None):
    """One straight-through mask update; weights stay frozen.

    ``loss_fn(registry, mask_tensors, batch)`` must run the masked forward
    and return a scalar loss. Gradients reaching each binary mask equal
    upstream * W, exactly the straight-through estimate used to update the
    real mask. Every ``recompute_every`` steps the thresholds are reset so
    survivor counts return to target.
    """
    if maskset.real is None:
        raise ValueError("mask training requires a real-valued mask")
    mask_tensors = maskset.as_tensors(requires_grad=True)
    for p in extra_params:
        p.grad = None
    with ad.Tape() as tape:
        loss = loss_fn(registry, mask_tensors, batch)
        value = float(loss.data)
        if not math.isfinite(value):
            batch_id = batch.get("batch_id") if isinstance(batch, dict) else None
            raise NonFiniteLossError(
                f"non-finite loss {value} at step {step_index}"
                + (f" (batch {batch_id})" if batch_id is not None else "")
            )
        ad.backward(loss, tape)
    for name, tensor in mask_tensors.items():
        if tensor.grad is not None:
            maskset.real[name] = maskset.real[name] - maskset.mask_lr * tensor.grad
    if extra_opt is not None:
        extra_opt.step()
    if (step_index + 1) % maskset.recompute_every == 0:
        maskset.recompute_thresholds()
    else:
        maskset.binarize_all()
    return maskset, value


@dataclass
class SparsityAudit:
    per_matrix: dict
    per_module: dict
    overall: dict
    passed: bool

    def to_dict(self) -> dict:
        return {"per_matrix": self.per_matrix, "per_module": self.per_module,
                "overall": self.overall, "passed": self.passed}


def audit_sparsity(maskset: MaskSet, registry,
                   config: Optional[SparsityConfig] = None) -> SparsityAudit:
    """Survivor accounting per matrix, per module, and overall.

    Per-matrix pass tolerance is one scalar against the target count; under
    a global threshold only the overall count is enforced.
    """
    per_matrix, tags = {}, {}
    for name, m in maskset.binary.items():
        entry = registry[name]
        n = m.size
        kept = int(m.sum())
        target = maskset.targets.get(name)
        ok = True
        if target is not None and not maskset.global_threshold:
            ok = abs(kept - (n - prune_count(target, n))) <= 1
        per_matrix[name] = {"size": n, "kept": kept,
                            "sparsity": 1.0 - kept / n,
                            "target": target, "ok": ok}
        tags[name] = entry.tag

    per_module = {}
    for name, row in per_matrix.items():
        mod = per_module.setdefault(tags[name], {"size": 0, "kept": 0})
        mod["size"] += row["size"]
        mod["kept"] += row["kept"]
    module_targets = {}
    if config is not None:
        module_targets = {"language": config.s_language, "visual": config.s_visual,
                          "cross": config.s_cross, "pooler": config.overall}
    for tag, mod in per_module.items():
        mod["sparsity"] = 1.0 - mod["kept"] / mod["size"]
        mod["target"] = module_targets.get(tag)

    total = sum(r["size"] for r in per_matrix.values())
    kept_total = sum(r["kept"] for r in per_matrix.values())
    overall = {"size": total, "kept": kept_total,
               "sparsity": 1.0 - kept_total / total if total else 0.0,
               "target": config.overall if config is not None else None}

    passed = all(r["ok"] for r in per_matrix.values())
    if maskset.global_threshold and maskset.overall_target is not None:
        expected = total - prune_count(maskset.overall_target, total)
        passed = abs(kept_total - expected) <= 1
    return SparsityAudit(per_matrix=per_matrix, per_module=per_module,
                         overall=overall, passed=passed)

"""Three-stage train/compress/fine-tune pipeline.

Stage 1 fine-tunes the full model on the biased training split with either
the plain or debiased objective. Stage 2 compresses it, by one-shot
magnitude pruning or by mask training (weights frozen, classifier and gate
still trainable). Stage 3 optionally fine-tunes the surviving weights under
fixed masks. A short surrogate pre-training pass on unbiased data precedes
everything so weight magnitudes are informative for magnitude-based mask
initialization.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .data import Dataset, SynthSpec, generate
from .losses import bce_loss, lmh_loss, fit_bias_prior, BiasPrior
from .model import ModelConfig, ParameterRegistry, build_model, forward
from .pruning import (MaskSet, NonFiniteLossError, audit_sparsity,
                      init_real_mask, mask_train_step, omp,
                      random_init_real_mask)
from .report import RunRecord, evaluate
from .sparsity import SparsityConfig, per_matrix_targets

STAGE1_LOSSES = ("bce", "lmh")
STAGE2_METHODS = ("omp", "mask-train")
STAGE3_CHOICES = ("none", "bce-ft", "lmh-ft")
MASK_INITS = ("magnitude", "random")


class DivergenceError(RuntimeError):
    """Weight training hit a non-finite loss."""


class AuditError(RuntimeError):
    """A produced subnetwork violates its sparsity constraint."""


@dataclass
class OptimizerSettings:
    epochs_stage1: int = 1
    epochs_stage2: int = 1
    epochs_stage3: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-3
    mask_lr: float = 0.5
    recompute_every: int = 10
    alpha: float = 2.0
    entropy_weight: float = 0.36
    pretrain_steps: int = 400
    pretrain_lr: float = 1e-3
    prior_smoothing: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSettings":
        return cls(**d)


@dataclass
class ExperimentSpec:
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    stage1_loss: str = "lmh"
    stage2_method: str = "mask-train"
    stage2_loss: str = "lmh"
    stage3: str = "none"
    sparsity: SparsityConfig = field(default_factory=lambda: SparsityConfig(0.5))
    mask_init: str = "magnitude"
    optim: OptimizerSettings = field(default_factory=OptimizerSettings)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    pretrain_seed: int = 0
    output_dir: str = "runs"
    save_checkpoints: bool = True
    eval_train_subset: int = 2048

    def __post_init__(self):
        if self.stage1_loss not in STAGE1_LOSSES:
            raise ValueError(f"stage1 loss must be one of {STAGE1_LOSSES}")
        if self.stage2_method not in STAGE2_METHODS:
            raise ValueError(f"stage2 method must be one of {STAGE2_METHODS}")
        if self.stage2_loss not in STAGE1_LOSSES:
            raise ValueError(f"stage2 loss must be one of {STAGE1_LOSSES}")
        if self.stage3 not in STAGE3_CHOICES:
            raise ValueError(f"stage3 must be one of {STAGE3_CHOICES}")
        if self.mask_init not in MASK_INITS:
            raise ValueError(f"mask init must be one of {MASK_INITS}")
        if self.model.answers != self.synth.answers:
            raise ValueError("model answer count must match the data spec")
        if self.model.vis_dim != self.synth.vis_dim:
            raise ValueError("model visual dim must match the data spec")
        if self.model.vocab_size < self.synth.required_vocab():
            raise ValueError(
                f"vocab {self.model.vocab_size} too small for "
                f"{self.synth.prototypes} prototypes"
            )

    def to_json(self) -> str:
        return json.dumps({
            "model": self.model.to_dict(),
            "synth": self.synth.to_dict(),
            "stage1_loss": self.stage1_loss,
            "stage2_method": self.stage2_method,
            "stage2_loss": self.stage2_loss,
            "stage3": self.stage3,
            "sparsity": self.sparsity.to_dict(),
            "mask_init": self.mask_init,
            "optim": self.optim.to_dict(),
            "seeds": list(self.seeds),
            "pretrain_seed": self.pretrain_seed,
            "output_dir": self.output_dir,
            "save_checkpoints": self.save_checkpoints,
            "eval_train_subset": self.eval_train_subset,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        raw = json.loads(text)
        return cls(
            model=ModelConfig.from_dict(raw["model"]),
            synth=SynthSpec.from_dict(raw["synth"]),
            stage1_loss=raw.get("stage1_loss", "lmh"),
            stage2_method=raw.get("stage2_method", "mask-train"),
            stage2_loss=raw.get("stage2_loss", "lmh"),
            stage3=raw.get("stage3", "none"),
            sparsity=SparsityConfig.from_dict(raw["sparsity"]),
            mask_init=raw.get("mask_init", "magnitude"),
            optim=OptimizerSettings.from_dict(raw.get("optim", {})),
            seeds=raw.get("seeds", [0, 1, 2, 3]),
            pretrain_seed=raw.get("pretrain_seed", 0),
            output_dir=raw.get("output_dir", "runs"),
            save_checkpoints=raw.get("save_checkpoints", True),
            eval_train_subset=raw.get("eval_train_subset", 2048),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())


def recipe_name(spec: ExperimentSpec) -> str:
    """Pipeline naming: fullmodel(loss) + method(loss) [+ loss ft]."""
    parts = [f"full({spec.stage1_loss})"]
    if spec.stage2_method == "omp":
        parts.append("omp")
    else:
        train = "mask train" if spec.mask_init == "magnitude" else "rand-init mask train"
        parts.append(f"{train}({spec.stage2_loss})")
    if spec.stage3 != "none":
        parts.append(f"{spec.stage3.split('-')[0]} ft")
    return " + ".join(parts)


def recipe_slug(name: str) -> str:
    return (name.replace(" + ", "__").replace(" ", "-")
            .replace("(", "_").replace(")", ""))


# ---------------------------------------------------------------------------
# optimizer and objectives


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


class BceObjective:
    name = "bce"
    params: list = []

    def loss(self, output, batch) -> Tensor:
        return bce_loss(output.logits, batch["targets"])


class LmhObjective:
    """Learned-mixin objective: fixed bias prior, trainable gate vector."""

    name = "lmh"

    def __init__(self, prior: BiasPrior, pooled_dim: int, z: float):
        self.prior = prior
        self.z = z
        self.w = Tensor(np.zeros(pooled_dim), requires_grad=True)
        self.params = [self.w]

    def loss(self, output, batch) -> Tensor:
        p_b = self.prior.lookup_batch(batch["prototypes"])
        return lmh_loss(output.logits, p_b, output.pooled, self.w,
                        batch["targets"], self.z)


def make_objective(kind: str, train: Dataset, model_cfg: ModelConfig,
                   settings: OptimizerSettings):
    if kind == "bce":
        return BceObjective()
    prior = fit_bias_prior(train.examples, answers=train.spec.answers,
                           smoothing=settings.prior_smoothing)
    return LmhObjective(prior, model_cfg.pooled_dim, settings.entropy_weight)


# ---------------------------------------------------------------------------
# batching and weight training


def iter_batches(dataset: Dataset, batch_size: int, rng=None, shuffle=True):
    arr = dataset.arrays()
    n = len(dataset)
    order = rng.permutation(n) if (shuffle and rng is not None) else np.arange(n)
    for i, lo in enumerate(range(0, n, batch_size)):
        idx = order[lo: lo + batch_size]
        yield {
            "tokens": arr["tokens"][idx],
            "visual": arr["visual"][idx],
            "targets": arr["targets"][idx],
            "prototypes": arr["prototypes"][idx],
            "batch_id": i,
        }


def _weight_step(registry, masks, batch, objective, opt, stage: str) -> float:
    opt.zero_grad()
    with ad.Tape() as tape:
        out = forward(registry, batch["tokens"], batch["visual"], masks=masks)
        loss = objective.loss(out, batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(
                f"{stage}: non-finite loss {value} on batch {batch['batch_id']}"
            )
        ad.backward(loss, tape)
    opt.step()
    return value


def _train_weights(registry, dataset, objective, settings, *, epochs=None,
                   steps=None, masks=None, lr=None, seed=0, stage="train"):
    """Adam over every registry parameter plus the objective's own params."""
    registry.set_requires_grad(True)
    for p in objective.params:
        p.requires_grad = True
    opt = Adam(registry.parameters() + objective.params,
               lr=lr if lr is not None else settings.learning_rate)
    rng = np.random.default_rng(seed)
    losses = []
    if steps is not None:
        done = 0
        while done < steps:
            for batch in iter_batches(dataset, settings.batch_size, rng):
                if done >= steps:
                    break
                losses.append(_weight_step(registry, masks, batch, objective,
                                           opt, stage))
                done += 1
    else:
        for _ in range(epochs):
            for batch in iter_batches(dataset, settings.batch_size, rng):
                losses.append(_weight_step(registry, masks, batch, objective,
                                           opt, stage))
    registry.set_requires_grad(False)
    return losses


# ---------------------------------------------------------------------------
# pipeline stages


def pretrain_surrogate(registry: ParameterRegistry, unbiased: Dataset,
                       steps: int, settings: Optional[OptimizerSettings] = None,
                       seed: int = 0):
    """Brief fit on unbiased data so weight magnitudes become informative.

    Returns (pre-trained registry copy, per-step losses). Zero steps return
    the initialization unchanged.
    """
    settings = settings or OptimizerSettings()
    reg = registry.copy()
    if steps == 0:
        return reg, []
    losses = _train_weights(reg, unbiased, BceObjective(), settings,
                            steps=steps, lr=settings.pretrain_lr, seed=seed,
                            stage="pretrain")
    for name, entry in reg.prunable_items():
        if float(entry.tensor.data.std()) == 0.0:
            raise DivergenceError(f"pretrain left degenerate magnitudes in {name}")
    return reg, losses


def stage1_finetune(registry: ParameterRegistry, train: Dataset, objective,
                    settings: OptimizerSettings, seed: int = 0):
    """Full-model fine-tuning; returns a new registry."""
    reg = registry.copy()
    losses = _train_weights(reg, train, objective, settings,
                            epochs=settings.epochs_stage1, seed=seed,
                            stage="stage1")
    return reg, losses


def stage2_compress(registry: ParameterRegistry, method: str, objective,
                    sparsity_config: SparsityConfig, mask_init: str,
                    train: Optional[Dataset], settings: OptimizerSettings,
                    seed: int = 0):
    """Compress a fine-tuned model into a binary mask set.

    OMP reads weight magnitudes only. Mask training optimizes the masks with
    the given objective while every weight outside the classifier stays
    frozen (verified by checksum); the classifier, being unprunable, keeps
    training. Returns (maskset, audit, registry copy carrying the trained
    classifier); the input registry is never modified.
    """
    targets = per_matrix_targets(registry, sparsity_config)
    global_mode = sparsity_config.scheme == "matrix-specific"
    reg = registry.copy()
    frozen_before = reg.checksum(exclude_tags=("classifier",))

    if method == "omp":
        maskset = omp(reg, targets)
        maskset.overall_target = sparsity_config.overall
        maskset.global_threshold = False
    else:
        hyper = dict(recompute_every=settings.recompute_every,
                     mask_lr=settings.mask_lr,
                     global_threshold=global_mode,
                     overall_target=sparsity_config.overall)
        if mask_init == "magnitude":
            maskset = init_real_mask(reg, targets, alpha=settings.alpha, **hyper)
        else:
            maskset = random_init_real_mask(reg, targets, seed=seed + 1,
                                            alpha=settings.alpha, **hyper)
        reg.set_requires_grad(False)
        reg.set_requires_grad(True, lambda n, e: e.tag == "classifier")
        extra = [e.tensor for _, e in reg.items() if e.tag == "classifier"]
        for p in objective.params:
            p.requires_grad = True
        extra_opt = Adam(extra + objective.params, lr=settings.learning_rate)

        def loss_fn(r, mask_tensors, batch):
            out = forward(r, batch["tokens"], batch["visual"],
                          masks=mask_tensors)
            return objective.loss(out, batch)

        rng = np.random.default_rng(seed)
        step = 0
        for _ in range(settings.epochs_stage2):
            for batch in iter_batches(train, settings.batch_size, rng):
                mask_train_step(reg, maskset, batch, loss_fn, step,
                                extra_params=extra, extra_opt=extra_opt)
                step += 1
        maskset.recompute_thresholds()
        reg.set_requires_grad(False)

    frozen_after = reg.checksum(exclude_tags=("classifier",))
    if frozen_before != frozen_after:
        raise AuditError("stage2 modified frozen weights")
    audit = audit_sparsity(maskset, reg, sparsity_config)
    if not audit.passed:
        raise AuditError(
            f"sparsity audit failed: overall {audit.overall['sparsity']:.4f} "
            f"vs target {audit.overall['target']}"
        )
    return maskset, audit, reg


def stage3_finetune(registry: ParameterRegistry, maskset: MaskSet, objective,
                    train: Dataset, settings: OptimizerSettings, seed: int = 0):
    """Further fine-tuning of the subnetwork; masks stay fixed.

    Gradients reach surviving weights only (the mask multiplies into the
    chain rule) plus the never-pruned classifier and norm/bias vectors.
    """
    reg = registry.copy()
    masks = maskset.as_tensors(requires_grad=False)
    losses = _train_weights(reg, train, objective, settings,
                            epochs=settings.epochs_stage3, masks=masks,
                            seed=seed, stage="stage3")
    return reg, losses


# ---------------------------------------------------------------------------
# full recipe


@dataclass
class RunResult:
    spec: ExperimentSpec
    full: RunRecord
    subnetwork: RunRecord
    paths: dict = field(default_factory=dict)


def _eval_pair(registry, maskset, train, test, subset, seed):
    """Evaluate on the OOD test split and optionally a train subsample."""
    out = {}
    out["test"] = evaluate(registry, test, masks=maskset, seed=seed)
    if subset:
        sub = Dataset(spec=train.spec, split="train",
                      examples=train.examples[:subset],
                      train_preferred=train.train_preferred,
                      preferred=train.preferred)
        out["train"] = evaluate(registry, sub, masks=maskset, seed=seed)
    return out


def run_recipe(spec: ExperimentSpec, train: Optional[Dataset] = None,
               test: Optional[Dataset] = None, write: bool = True) -> RunResult:
    """Run the full pipeline for every seed and assemble run records."""
    if train is None or test is None:
        train, test = generate(spec.synth)
    unbiased_size = spec.optim.batch_size * min(spec.optim.pretrain_steps, 100)
    unbiased, _ = generate(spec.synth.unbiased(max(unbiased_size, spec.optim.batch_size)))

    name = recipe_name(spec)
    full_name = f"full({spec.stage1_loss})"
    full_metrics = {"test": [], "train": []}
    sub_metrics = {"test": [], "train": []}
    audits = []
    failures = []

    # one surrogate pre-training per run: every fine-tuning seed starts
    # from the same pre-trained weights
    reg0 = build_model(spec.model, spec.pretrain_seed)
    reg_pt, _ = pretrain_surrogate(reg0, unbiased, spec.optim.pretrain_steps,
                                   spec.optim, seed=spec.pretrain_seed)

    for seed in spec.seeds:
        objectives = {}

        def get_objective(kind):
            if kind not in objectives:
                objectives[kind] = make_objective(kind, train, spec.model,
                                                  spec.optim)
            return objectives[kind]

        # a failed seed is recorded and skipped; partial results survive
        try:
            reg_ft, _ = stage1_finetune(reg_pt, train,
                                        get_objective(spec.stage1_loss),
                                        spec.optim, seed=seed)
            for split, record in _eval_pair(reg_ft, None, train, test,
                                            spec.eval_train_subset, seed).items():
                full_metrics[split].append(record.to_dict())

            reg_stage1 = reg_ft
            maskset, audit, reg_ft = stage2_compress(
                reg_ft, spec.stage2_method, get_objective(spec.stage2_loss),
                spec.sparsity, spec.mask_init, train, spec.optim, seed=seed)
            audits.append({"seed": seed, "stage2": audit.to_dict()["overall"]})

            reg_final = reg_ft
            if spec.stage3 != "none":
                kind = spec.stage3.split("-")[0]
                reg_final, _ = stage3_finetune(reg_ft, maskset,
                                               get_objective(kind), train,
                                               spec.optim, seed=seed)
                audit_after = audit_sparsity(maskset, reg_final, spec.sparsity)
                if audit_after.to_dict()["overall"] != audit.to_dict()["overall"]:
                    raise AuditError("stage3 changed the mask audit")
        except (DivergenceError, AuditError, NonFiniteLossError) as exc:
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue

        for split, record in _eval_pair(reg_final, maskset, train, test,
                                        spec.eval_train_subset, seed).items():
            record.sparsity_overall = audit.overall["sparsity"]
            sub_metrics[split].append(record.to_dict())

        if spec.save_checkpoints and write:
            seed_dir = os.path.join(spec.output_dir, recipe_slug(name),
                                    f"seed{seed}")
            os.makedirs(seed_dir, exist_ok=True)
            save_checkpoint(os.path.join(seed_dir, "stage1.ckpt"), reg_stage1,
                            meta={"stage": "stage1", "recipe": name, "seed": seed})
            save_checkpoint(os.path.join(seed_dir, "stage2.ckpt"), reg_ft,
                            maskset=maskset,
                            meta={"stage": "stage2", "recipe": name, "seed": seed})
            if spec.stage3 != "none":
                save_checkpoint(os.path.join(seed_dir, "stage3.ckpt"), reg_final,
                                maskset=maskset,
                                meta={"stage": "stage3", "recipe": name,
                                      "seed": seed})

    full_record = RunRecord(
        recipe=full_name, sparsity={"overall": 0.0, "scheme": "uniform"},
        seeds=list(spec.seeds),
        metrics={k: v for k, v in full_metrics.items() if v},
    )
    sub_record = RunRecord(
        recipe=name, sparsity=spec.sparsity.to_dict(), seeds=list(spec.seeds),
        metrics={k: v for k, v in sub_metrics.items() if v}, audits=audits,
        meta={"mask_init": spec.mask_init, "stage2_method": spec.stage2_method,
              "failures": failures},
    )
    result = RunResult(spec=spec, full=full_record, subnetwork=sub_record)

    if write:
        out_dir = os.path.join(spec.output_dir, recipe_slug(name))
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "record.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump({"recipe": name, "spec": json.loads(spec.to_json()),
                       "full": full_record.to_dict(),
                       "subnetwork": sub_record.to_dict()}, fh, indent=1)
        os.replace(tmp, path)
        result.paths["record"] = path
    return result


def canonical_recipes(base: ExperimentSpec) -> list:
    """The eight stage1-loss x stage2-loss x further-fine-tuning combos."""
    specs = []
    for s1 in ("bce", "lmh"):
        for s2 in ("bce", "lmh"):
            for s3 in ("none", "lmh-ft"):
                raw = json.loads(base.to_json())
                raw.update(stage1_loss=s1, stage2_method="mask-train",
                           stage2_loss=s2, stage3=s3)
                specs.append(ExperimentSpec.from_json(json.dumps(raw)))
    return specs


def load_run_records(runs_dir) -> list:
    """Collect every record.json under a runs directory."""
    records = []
    for root, _dirs, files in os.walk(runs_dir):
        if "record.json" in files:
            with open(os.path.join(root, "record.json")) as fh:
                raw = json.load(fh)
            records.append(RunRecord.from_dict(raw["full"]))
            records.append(RunRecord.from_dict(raw["subnetwork"]))
    records.sort(key=lambda r: (r.recipe, json.dumps(r.sparsity, sort_keys=True)))
    return records

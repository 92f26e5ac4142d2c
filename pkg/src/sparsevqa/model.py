"""Miniature two-stream cross-modal transformer.

Layout: token embedding -> language encoder (T layers), visual fc -> visual
encoder (I layers), then a cross-modality encoder (X layers) where each layer
applies one shared cross-attention module to both streams, a per-stream
self-attention module, and a per-stream FFN after the self-attention only.
A pooler reads the first language position and feeds a linear classifier.

All parameters live in a ParameterRegistry keyed by name, tagged with the
module they belong to, and flagged prunable for exactly the weight matrices
that take part in compression (the classifier never does; bias and
layer-norm vectors never do).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict
from typing import Iterable, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError

TAGS = ("language", "visual", "cross", "pooler", "classifier")

INIT_STD = 0.02


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ffn: int = 128
    heads: int = 4
    lang_layers: int = 4
    vis_layers: int = 2
    cross_layers: int = 2
    vocab_size: int = 64
    vis_dim: int = 16
    answers: int = 16
    pooled_dim: int = 64
    max_question_len: int = 16
    max_visual_len: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by heads={self.heads}"
            )
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"activation must be relu or gelu, got {self.activation!r}")
        for name in ("lang_layers", "vis_layers", "cross_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("d_model", "d_ffn", "vocab_size", "vis_dim", "answers",
                     "pooled_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class RegistryEntry:
    tensor: Tensor
    tag: str
    prunable: bool


class ParameterRegistry:
    """Ordered name -> (tensor, module tag, prunable flag) map."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._entries: dict[str, RegistryEntry] = {}

    def add(self, name: str, data: np.ndarray, tag: str, prunable: bool = False):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        self._entries[name] = RegistryEntry(Tensor(data), tag, prunable)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> RegistryEntry:
        return self._entries[name]

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensor(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def prunable_items(self):
        return [(n, e) for n, e in self._entries.items() if e.prunable]

    def prunable_names(self):
        return [n for n, e in self._entries.items() if e.prunable]

    def parameters(self, trainable_only: bool = False):
        ts = [e.tensor for e in self._entries.values()]
        if trainable_only:
            ts = [t for t in ts if t.requires_grad]
        return ts

    def set_requires_grad(self, flag: bool, predicate=None):
        """Toggle grad tracking; ``predicate(name, entry)`` limits the scope."""
        for name, entry in self._entries.items():
            if predicate is None or predicate(name, entry):
                entry.tensor.requires_grad = flag

    def zero_grads(self):
        for entry in self._entries.values():
            entry.tensor.grad = None

    def copy(self) -> "ParameterRegistry":
        dup = ParameterRegistry(self.config)
        for name, entry in self._entries.items():
            dup.add(name, entry.tensor.data.copy(), entry.tag, entry.prunable)
            dup._entries[name].tensor.requires_grad = entry.tensor.requires_grad
        return dup

    def checksum(self, exclude_tags: Iterable[str] = ("classifier",)) -> str:
        """SHA-256 over parameter bytes in registry order, skipping tags."""
        excluded = set(exclude_tags or ())
        h = hashlib.sha256()
        for name, entry in self._entries.items():
            if entry.tag in excluded:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(entry.tensor.data).tobytes())
        return h.hexdigest()


@dataclass
class ForwardOutput:
    logits: Tensor
    pooled: Tensor


def _tags_as_set(tags) -> Optional[set]:
    if tags is None:
        return None
    if isinstance(tags, str):
        return {tags}
    return set(tags)


def count_parameters(registry: ParameterRegistry, tags=None,
                     prunable: Optional[bool] = None) -> int:
    """Exact scalar count over entries matching the tag/prunable filter."""
    wanted = _tags_as_set(tags)
    total = 0
    for _, entry in registry.items():
        if wanted is not None and entry.tag not in wanted:
            continue
        if prunable is not None and entry.prunable != prunable:
            continue
        total += entry.tensor.size
    return total


# ---------------------------------------------------------------------------
# construction


def _add_attention(reg, rng, prefix, tag, d):
    for nm in ("Wq", "Wk", "Wv", "Wo"):
        reg.add(f"{prefix}.{nm}", rng.normal(0.0, INIT_STD, (d, d)), tag,
                prunable=True)
    for nm in ("bq", "bk", "bv", "bo"):
        reg.add(f"{prefix}.{nm}", np.zeros(d), tag)


def _add_ln(reg, prefix, tag, d):
    reg.add(f"{prefix}.g", np.ones(d), tag)
    reg.add(f"{prefix}.b", np.zeros(d), tag)


def _add_ffn(reg, rng, prefix, tag, d, f):
    reg.add(f"{prefix}.Win", rng.normal(0.0, INIT_STD, (d, f)), tag, prunable=True)
    reg.add(f"{prefix}.bin", np.zeros(f), tag)
    reg.add(f"{prefix}.Wout", rng.normal(0.0, INIT_STD, (f, d)), tag, prunable=True)
    reg.add(f"{prefix}.bout", np.zeros(d), tag)


def build_model(config: ModelConfig, seed: int) -> ParameterRegistry:
    """Populate a registry with freshly initialized parameters."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ffn
    reg = ParameterRegistry(config)

    reg.add("embed.W", rng.normal(0.0, INIT_STD, (config.vocab_size, d)),
            "language", prunable=True)
    _add_ln(reg, "embed.ln", "language", d)

    reg.add("vis_fc.W", rng.normal(0.0, INIT_STD, (config.vis_dim, d)),
            "visual", prunable=True)
    reg.add("vis_fc.b", np.zeros(d), "visual")
    _add_ln(reg, "vis_fc.ln", "visual", d)

    for t in range(config.lang_layers):
        _add_attention(reg, rng, f"lang.{t}.attn", "language", d)
        _add_ln(reg, f"lang.{t}.attn.ln", "language", d)
        _add_ffn(reg, rng, f"lang.{t}.ffn", "language", d, f)
        _add_ln(reg, f"lang.{t}.ffn.ln", "language", d)

    for i in range(config.vis_layers):
        _add_attention(reg, rng, f"vis.{i}.attn", "visual", d)
        _add_ln(reg, f"vis.{i}.attn.ln", "visual", d)
        _add_ffn(reg, rng, f"vis.{i}.ffn", "visual", d, f)
        _add_ln(reg, f"vis.{i}.ffn.ln", "visual", d)

    for x in range(config.cross_layers):
        # one cross-attention module shared by both directions
        _add_attention(reg, rng, f"cross.{x}.xatt", "cross", d)
        _add_ln(reg, f"cross.{x}.xatt.lnL", "cross", d)
        _add_ln(reg, f"cross.{x}.xatt.lnV", "cross", d)
        _add_attention(reg, rng, f"cross.{x}.lself", "cross", d)
        _add_ln(reg, f"cross.{x}.lself.ln", "cross", d)
        _add_attention(reg, rng, f"cross.{x}.vself", "cross", d)
        _add_ln(reg, f"cross.{x}.vself.ln", "cross", d)
        _add_ffn(reg, rng, f"cross.{x}.lffn", "cross", d, f)
        _add_ln(reg, f"cross.{x}.lffn.ln", "cross", d)
        _add_ffn(reg, rng, f"cross.{x}.vffn", "cross", d, f)
        _add_ln(reg, f"cross.{x}.vffn.ln", "cross", d)

    reg.add("pooler.W", rng.normal(0.0, INIT_STD, (d, config.pooled_dim)),
            "pooler", prunable=True)
    reg.add("pooler.b", np.zeros(config.pooled_dim), "pooler")

    reg.add("cls.W", rng.normal(0.0, INIT_STD, (config.pooled_dim, config.answers)),
            "classifier")
    reg.add("cls.b", np.zeros(config.answers), "classifier")
    return reg


# ---------------------------------------------------------------------------
# forward pass


def _check_masks(registry: ParameterRegistry, masks: Mapping[str, Tensor]):
    for name, mask in masks.items():
        if name not in registry:
            raise ShapeError(f"mask for unknown matrix {name!r}")
        entry = registry[name]
        if not entry.prunable:
            raise ShapeError(f"mask supplied for non-prunable matrix {name!r}")
        if mask.shape != entry.tensor.shape:
            raise ShapeError(
                f"mask shape {mask.shape} does not match matrix {name!r} "
                f"shape {entry.tensor.shape}"
            )


def _split_heads(t, batch, length, heads, dk):
    return ad.transpose(ad.reshape(t, (batch, length, heads, dk)), 1, 2)


def _merge_heads(t, batch, length, d):
    return ad.reshape(ad.transpose(t, 1, 2), (batch, length, d))


class _Params:
    """Weight lookup that applies element-wise masks where provided."""

    def __init__(self, registry, masks):
        self.registry = registry
        self.masks = masks or {}

    def __call__(self, name: str) -> Tensor:
        t = self.registry.tensor(name)
        m = self.masks.get(name)
        return ad.mul(m, t) if m is not None else t


def _mha(p, prefix, x_q, x_kv, heads):
    batch, lq, d = x_q.shape
    lk = x_kv.shape[1]
    dk = d // heads
    reg = p.registry
    q = ad.linear(x_q, p(f"{prefix}.Wq"), reg.tensor(f"{prefix}.bq"))
    k = ad.linear(x_kv, p(f"{prefix}.Wk"), reg.tensor(f"{prefix}.bk"))
    v = ad.linear(x_kv, p(f"{prefix}.Wv"), reg.tensor(f"{prefix}.bv"))
    ctx = ad.attention(
        _split_heads(q, batch, lq, heads, dk),
        _split_heads(k, batch, lk, heads, dk),
        _split_heads(v, batch, lk, heads, dk),
    )
    merged = _merge_heads(ctx, batch, lq, d)
    return ad.linear(merged, p(f"{prefix}.Wo"), reg.tensor(f"{prefix}.bo"))


def _ffn(p, prefix, x, act):
    reg = p.registry
    hidden = act(ad.linear(x, p(f"{prefix}.Win"), reg.tensor(f"{prefix}.bin")))
    return ad.linear(hidden, p(f"{prefix}.Wout"), reg.tensor(f"{prefix}.bout"))


def _residual_ln(p, ln_prefix, x, sub):
    reg = p.registry
    return ad.layer_norm(ad.add(x, sub), reg.tensor(f"{ln_prefix}.g"),
                         reg.tensor(f"{ln_prefix}.b"))


def forward(registry: ParameterRegistry, tokens, visual,
            masks: Optional[Mapping[str, Tensor]] = None) -> ForwardOutput:
    """Run the network; prunable matrices participate as mask * W when masked.

    ``tokens`` is an integer [batch, q_len] array, ``visual`` a float
    [batch, v_len, vis_dim] array. Masks are binary tensors keyed by matrix
    name; the underlying weights are never modified.
    """
    cfg = registry.config
    tokens = np.asarray(tokens, dtype=np.int64)
    visual = np.asarray(visual, dtype=np.float64)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be [batch, length], got {tokens.shape}")
    if tokens.shape[1] > cfg.max_question_len:
        raise ShapeError(
            f"question length {tokens.shape[1]} exceeds max {cfg.max_question_len}"
        )
    if visual.ndim != 3 or visual.shape[-1] != cfg.vis_dim:
        raise ShapeError(
            f"visual features must be [batch, length, {cfg.vis_dim}], got {visual.shape}"
        )
    if visual.shape[1] > cfg.max_visual_len:
        raise ShapeError(
            f"visual length {visual.shape[1]} exceeds max {cfg.max_visual_len}"
        )
    if masks is not None:
        _check_masks(registry, masks)

    p = _Params(registry, masks)
    heads = cfg.heads
    act = ad.relu if cfg.activation == "relu" else ad.gelu

    lang = ad.embedding(p("embed.W"), tokens)
    lang = ad.layer_norm(lang, registry.tensor("embed.ln.g"),
                         registry.tensor("embed.ln.b"))

    vis = ad.linear(Tensor(visual), p("vis_fc.W"), registry.tensor("vis_fc.b"))
    vis = ad.layer_norm(vis, registry.tensor("vis_fc.ln.g"),
                        registry.tensor("vis_fc.ln.b"))

    for t in range(cfg.lang_layers):
        base = f"lang.{t}"
        lang = _residual_ln(p, f"{base}.attn.ln", lang,
                            _mha(p, f"{base}.attn", lang, lang, heads))
        lang = _residual_ln(p, f"{base}.ffn.ln", lang, _ffn(p, f"{base}.ffn", lang, act))

    for i in range(cfg.vis_layers):
        base = f"vis.{i}"
        vis = _residual_ln(p, f"{base}.attn.ln", vis,
                           _mha(p, f"{base}.attn", vis, vis, heads))
        vis = _residual_ln(p, f"{base}.ffn.ln", vis, _ffn(p, f"{base}.ffn", vis, act))

    for x in range(cfg.cross_layers):
        base = f"cross.{x}"
        # shared cross-attention applied in both directions, then per-stream
        # self-attention, then per-stream FFN
        lang_x = _mha(p, f"{base}.xatt", lang, vis, heads)
        vis_x = _mha(p, f"{base}.xatt", vis, lang, heads)
        lang = _residual_ln(p, f"{base}.xatt.lnL", lang, lang_x)
        vis = _residual_ln(p, f"{base}.xatt.lnV", vis, vis_x)
        lang = _residual_ln(p, f"{base}.lself.ln", lang,
                            _mha(p, f"{base}.lself", lang, lang, heads))
        vis = _residual_ln(p, f"{base}.vself.ln", vis,
                           _mha(p, f"{base}.vself", vis, vis, heads))
        lang = _residual_ln(p, f"{base}.lffn.ln", lang, _ffn(p, f"{base}.lffn", lang, act))
        vis = _residual_ln(p, f"{base}.vffn.ln", vis, _ffn(p, f"{base}.vffn", vis, act))

    first = ad.take(lang, 0, axis=1)
    pooled = ad.tanh(ad.linear(first, p("pooler.W"), registry.tensor("pooler.b")))
    logits = ad.linear(pooled, registry.tensor("cls.W"), registry.tensor("cls.b"))
    return ForwardOutput(logits=logits, pooled=pooled)

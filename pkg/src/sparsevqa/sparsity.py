"""Sparsity configuration algebra.

Given per-module parameter budgets, the overall sparsity constraint is a
weighted mean over the language, visual and cross-modality modules; the
pooler is pinned to the overall level and excluded from the arithmetic.
This module solves that constraint for a missing module, verifies configs,
enumerates the coarse/refined search grids, and derives per-matrix targets
for the uniform, modality-specific and matrix-specific assignment schemes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

MODALITIES = ("language", "visual", "cross")

COARSE_VALUES = (0.10, 0.30, 0.50, 0.70, 0.90)

# Full-scale reference budgets (millions of parameters) used by the search
# tables; the pooler is carried along for bookkeeping only.
REFERENCE_MODULE_SIZES = None  # set below once ModuleSizes exists


@dataclass(frozen=True)
class ModuleSizes:
    language: float
    visual: float
    cross: float
    pooler: float = 0.0

    def total(self) -> float:
        return self.language + self.visual + self.cross

    def as_tuple(self):
        return (self.language, self.visual, self.cross)


REFERENCE_MODULE_SIZES = ModuleSizes(83.1, 35.3, 78.8, 0.5)

SCHEMES = ("uniform", "modality-specific", "matrix-specific")


@dataclass
class SparsityConfig:
    overall: float
    scheme: str = "uniform"
    s_language: Optional[float] = None
    s_visual: Optional[float] = None
    s_cross: Optional[float] = None
    sizes: Optional[ModuleSizes] = None

    def __post_init__(self):
        if not 0.0 <= self.overall <= 1.0:
            raise ValueError(f"overall sparsity {self.overall} outside [0, 1]")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "uniform":
            self.s_language = self.s_visual = self.s_cross = self.overall
        if self.scheme == "modality-specific":
            for name in ("s_language", "s_visual", "s_cross"):
                v = getattr(self, name)
                if v is None:
                    raise ValueError(f"modality-specific config missing {name}")
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name}={v} outside [0, 1]")

    def triple(self):
        return (self.s_language, self.s_visual, self.s_cross)

    def to_dict(self) -> dict:
        d = {"overall": self.overall, "scheme": self.scheme}
        if self.scheme == "modality-specific":
            d.update(s_language=self.s_language, s_visual=self.s_visual,
                     s_cross=self.s_cross)
        if self.sizes is not None:
            d["sizes"] = list(self.sizes.as_tuple()) + [self.sizes.pooler]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SparsityConfig":
        sizes = d.get("sizes")
        return cls(
            overall=d["overall"],
            scheme=d.get("scheme", "uniform"),
            s_language=d.get("s_language"),
            s_visual=d.get("s_visual"),
            s_cross=d.get("s_cross"),
            sizes=ModuleSizes(*sizes) if sizes else None,
        )


def round_half_away(x: float, ndigits: int = 2) -> float:
    """Round half away from zero, the convention of the printed tables."""
    factor = 10 ** ndigits
    return math.copysign(math.floor(abs(x) * factor + 0.5), x) / factor


def solve_third(s: float, sizes: ModuleSizes, s_language: Optional[float] = None,
                s_visual: Optional[float] = None,
                s_cross: Optional[float] = None) -> float:
    """Solve the overall-sparsity equality for the one unassigned module.

    Exactly two of the three module sparsities must be given. The returned
    value satisfies the weighted-mean constraint exactly; values outside
    [0, 1] mark the assignment as infeasible.
    """
    if min(sizes.language, sizes.visual, sizes.cross) <= 0:
        raise ValueError("module sizes must be positive")
    given = {"language": s_language, "visual": s_visual, "cross": s_cross}
    missing = [k for k, v in given.items() if v is None]
    if len(missing) != 1:
        raise ValueError("exactly two module sparsities must be given")
    target = missing[0]
    budget = s * sizes.total()
    for name in given:
        if name != target:
            budget -= given[name] * getattr(sizes, name)
    return budget / getattr(sizes, target)


def feasible(value: float, tol: float = 1e-9) -> bool:
    return -tol <= value <= 1.0 + tol


def verify_overall(config: SparsityConfig, tol: float = 1e-6):
    """Check the weighted-mean equality; returns (ok, residual)."""
    sizes = config.sizes or REFERENCE_MODULE_SIZES
    sl, sr, sx = config.triple()
    if sl is None or sr is None or sx is None:
        raise ValueError("all three module sparsities must be present")
    implied = (sl * sizes.language + sr * sizes.visual + sx * sizes.cross) / sizes.total()
    residual = abs(implied - config.overall)
    return residual <= tol * max(1.0, abs(config.overall)), residual


def _assemble(s, sizes, assigned: dict) -> Optional[SparsityConfig]:
    value = solve_third(s, sizes, **{f"s_{k}": v for k, v in assigned.items()})
    if not feasible(value):
        return None
    missing = next(m for m in MODALITIES if m not in assigned)
    trip = dict(assigned)
    trip[missing] = min(max(value, 0.0), 1.0)
    return SparsityConfig(
        overall=s, scheme="modality-specific",
        s_language=trip["language"], s_visual=trip["visual"],
        s_cross=trip["cross"], sizes=sizes,
    )


def _dedupe(configs: list) -> list:
    """Sort lexicographically by (s_L, s_R) and drop rounded duplicates."""
    configs.sort(key=lambda c: (c.s_language, c.s_visual, c.s_cross))
    seen = set()
    out = []
    for cfg in configs:
        key = tuple(round_half_away(v, 2) for v in cfg.triple())
        if key in seen:
            continue
        seen.add(key)
        out.append(cfg)
    return out


def coarse_grid(s: float, sizes: ModuleSizes = REFERENCE_MODULE_SIZES,
                values: Iterable[float] = COARSE_VALUES) -> list:
    """First-pass grid: assign two modules from ``values``, solve the third.

    Infeasible triples are discarded; the uniform point (s, s, s) is always
    included since it solves the constraint trivially.
    """
    values = tuple(values)
    configs = []
    for i, a in enumerate(MODALITIES):
        for b in MODALITIES[i + 1:]:
            for va in values:
                for vb in values:
                    cfg = _assemble(s, sizes, {a: va, b: vb})
                    if cfg is not None:
                        configs.append(cfg)
    configs.append(SparsityConfig(overall=s, scheme="modality-specific",
                                  s_language=s, s_visual=s, s_cross=s,
                                  sizes=sizes))
    return _dedupe(configs)


def refine_grid(region: dict, s: float,
                sizes: ModuleSizes = REFERENCE_MODULE_SIZES,
                step: float = 0.05) -> list:
    """Second-pass grid over ``region`` ({module: (lo, hi)}) at a finer step.

    Every pair of modules present in the region is swept; the remaining
    module is solved from the constraint and filtered for feasibility.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    axes = [m for m in MODALITIES if m in region]
    if len(axes) < 2:
        return []
    spans = {}
    for m in axes:
        lo, hi = region[m]
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"region for {m} outside [0, 1]: ({lo}, {hi})")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        spans[m] = [lo + k * step for k in range(n)]
    configs = []
    for i, a in enumerate(axes):
        for b in axes[i + 1:]:
            for va in spans[a]:
                for vb in spans[b]:
                    cfg = _assemble(s, sizes, {a: va, b: vb})
                    if cfg is not None:
                        configs.append(cfg)
    return _dedupe(configs)


def matrix_specific_targets(registry, s: float, real_masks: Optional[dict] = None) -> dict:
    """Per-matrix sparsity induced by one global magnitude ranking.

    Ranks every prunable scalar (by |weight|, or by the real-valued mask when
    given) and prunes the globally smallest fraction ``s``; each matrix then
    carries whatever share of the pruned entries landed in it.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sparsity {s} outside [0, 1]")
    names, sizes_, mags = [], [], []
    for name, entry in registry.prunable_items():
        source = real_masks[name] if real_masks is not None else entry.tensor.data
        names.append(name)
        sizes_.append(source.size)
        mags.append(np.abs(source).ravel())
    flat = np.concatenate(mags)
    total = flat.size
    k = math.ceil(s * total - 1e-9)
    owner = np.repeat(np.arange(len(names)), sizes_)
    order = np.argsort(flat, kind="stable")
    pruned_per = np.bincount(owner[order[:k]], minlength=len(names))
    return {n: pruned_per[i] / sizes_[i] for i, n in enumerate(names)}


def per_matrix_targets(registry, config: SparsityConfig) -> dict:
    """Expand a SparsityConfig into target sparsity per prunable matrix.

    Uniform and modality-specific schemes apply one level per module, with
    the pooler pinned to the overall level; the matrix-specific scheme
    delegates to the global ranking.
    """
    if config.scheme == "matrix-specific":
        return matrix_specific_targets(registry, config.overall)
    by_tag = {"language": config.s_language, "visual": config.s_visual,
              "cross": config.s_cross, "pooler": config.overall}
    targets = {}
    for name, entry in registry.prunable_items():
        if entry.tag not in by_tag:
            raise ValueError(f"prunable matrix {name!r} has unexpected tag {entry.tag}")
        targets[name] = float(by_tag[entry.tag])
    return targets


def module_sizes_from_registry(registry) -> ModuleSizes:
    """Prunable parameter budgets of an actual registry, by module."""
    from .model import count_parameters  # local import to avoid cycles
    return ModuleSizes(
        language=count_parameters(registry, "language", prunable=True),
        visual=count_parameters(registry, "visual", prunable=True),
        cross=count_parameters(registry, "cross", prunable=True),
        pooler=count_parameters(registry, "pooler", prunable=True),
    )


def grid_to_csv(configs: Iterable[SparsityConfig], path):
    """Write a grid as CSV with columns s_L, s_R, s_X, feasible."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s_L", "s_R", "s_X", "feasible"])
        for cfg in configs:
            sl, sr, sx = cfg.triple()
            ok = all(feasible(v) for v in (sl, sr, sx))
            writer.writerow([repr(sl), repr(sr), repr(sx), int(ok)])

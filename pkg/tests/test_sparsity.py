import math

import numpy as np
import pytest

from sparsevqa.model import ModelConfig, build_model
from sparsevqa.sparsity import (REFERENCE_MODULE_SIZES, ModuleSizes,
                                SparsityConfig, coarse_grid, feasible,
                                grid_to_csv, matrix_specific_targets,
                                module_sizes_from_registry, per_matrix_targets,
                                refine_grid, round_half_away, solve_third,
                                verify_overall)

SIZES = REFERENCE_MODULE_SIZES


def test_reference_budgets():
    assert SIZES.language == 83.1
    assert SIZES.visual == 35.3
    assert SIZES.cross == 78.8
    assert SIZES.pooler == 0.5


def test_solve_third_anchor_rows():
    # frozen reference triples from the full-scale sweep tables
    v = solve_third(0.5, SIZES, s_language=0.50, s_visual=0.70)
    assert abs(v - 0.41) <= 0.01
    v = solve_third(0.7, SIZES, s_language=0.90, s_visual=0.50)
    assert abs(v - 0.58) <= 0.01
    v = solve_third(0.9, SIZES, s_language=0.98, s_visual=0.53)
    assert abs(v - 0.98) <= 0.01


def test_solve_third_uniform_is_trivial():
    assert solve_third(0.7, SIZES, s_language=0.7, s_visual=0.7) == pytest.approx(0.7)


def test_solve_third_infeasible_flagged():
    v = solve_third(0.9, SIZES, s_language=0.1, s_visual=0.1)
    assert not feasible(v)
    assert v > 1.0


def test_solve_third_argument_validation():
    with pytest.raises(ValueError):
        solve_third(0.5, SIZES, s_language=0.5)
    with pytest.raises(ValueError):
        solve_third(0.5, SIZES, s_language=0.5, s_visual=0.5, s_cross=0.5)
    with pytest.raises(ValueError):
        solve_third(0.5, ModuleSizes(0.0, 1.0, 1.0), s_language=0.5, s_visual=0.5)


def test_verify_overall_examples():
    ok, res = verify_overall(SparsityConfig(
        0.9, "modality-specific", s_language=0.98, s_visual=0.53,
        s_cross=solve_third(0.9, SIZES, s_language=0.98, s_visual=0.53),
        sizes=SIZES))
    assert ok and res <= 1e-9
    ok, res = verify_overall(SparsityConfig(
        0.0, "modality-specific", s_language=0.0, s_visual=0.0, s_cross=0.0,
        sizes=SIZES))
    assert ok and res == 0.0
    # printed-table row; the two-decimal rounding leaves a real residual
    ok, _ = verify_overall(SparsityConfig(
        0.7, "modality-specific", s_language=0.85, s_visual=0.12, s_cross=0.80,
        sizes=SIZES), tol=0.01)
    assert ok


@pytest.mark.parametrize("seed", range(10))
def test_solve_then_verify_round_trip(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.2, 0.8)
    sl, sr = rng.uniform(0, 1, 2)
    sx = solve_third(s, SIZES, s_language=sl, s_visual=sr)
    if not feasible(sx):
        return
    ok, res = verify_overall(SparsityConfig(
        s, "modality-specific", s_language=sl, s_visual=sr, s_cross=sx,
        sizes=SIZES))
    assert ok and res <= 1e-9


def test_round_half_away():
    assert round_half_away(0.405, 2) == 0.41
    assert round_half_away(0.125, 2) == 0.13
    assert round_half_away(-0.125, 2) == -0.13
    assert round_half_away(0.4449, 2) == 0.44


def test_coarse_grid_contains_reference_rows():
    grid = coarse_grid(0.5, SIZES)
    rounded = {tuple(round_half_away(v, 2) for v in c.triple()) for c in grid}
    assert (0.50, 0.70, 0.41) in rounded
    assert (0.30, 0.10, 0.89) in rounded
    assert (0.50, 0.50, 0.50) in rounded


def test_coarse_grid_all_feasible_and_verified():
    for s in (0.5, 0.7):
        for cfg in coarse_grid(s, SIZES):
            assert all(0.0 <= v <= 1.0 for v in cfg.triple())
            ok, _ = verify_overall(cfg)
            assert ok


def test_coarse_grid_boundary_only_uniform():
    grid = coarse_grid(1.0, SIZES)
    assert len(grid) == 1
    assert grid[0].triple() == (1.0, 1.0, 1.0)


def test_coarse_grid_deduplicates():
    grid = coarse_grid(0.5, SIZES)
    keys = [tuple(round_half_away(v, 2) for v in c.triple()) for c in grid]
    assert len(keys) == len(set(keys))


def test_refine_grid_contains_second_stage_row():
    region = {"language": (0.70, 0.90), "cross": (0.60, 0.80)}
    grid = refine_grid(region, 0.7, SIZES, step=0.05)
    rounded = {tuple(round_half_away(v, 2) for v in c.triple()) for c in grid}
    assert (0.85, 0.12, 0.80) in rounded


def test_refine_grid_high_sparsity_contains_uniform():
    region = {m: (0.80, 0.98) for m in ("language", "visual", "cross")}
    grid = refine_grid(region, 0.9, SIZES, step=0.02)
    rounded = {tuple(round_half_away(v, 2) for v in c.triple()) for c in grid}
    assert (0.90, 0.90, 0.90) in rounded


def test_refine_grid_step_larger_than_region():
    region = {"language": (0.4, 0.45), "visual": (0.4, 0.45)}
    grid = refine_grid(region, 0.5, SIZES, step=0.2)
    # at most one point per axis, therefore at most one configuration
    assert len(grid) <= 1


def test_refine_grid_empty_region():
    assert refine_grid({}, 0.5, SIZES) == []
    assert refine_grid({"language": (0.4, 0.5)}, 0.5, SIZES) == []


REG = build_model(ModelConfig(), seed=0)


def test_matrix_specific_ordering():
    cfg = ModelConfig(d_model=32, d_ffn=32, heads=2, lang_layers=1,
                      vis_layers=1, cross_layers=1, vocab_size=16, vis_dim=8,
                      answers=4, pooled_dim=32)
    reg = build_model(cfg, seed=3)
    small, big = "lang.0.attn.Wq", "lang.0.attn.Wk"
    reg[small].tensor.data = np.full(reg[small].tensor.shape, 0.001)
    reg[big].tensor.data = np.full(reg[big].tensor.shape, 10.0)
    targets = matrix_specific_targets(reg, 0.5)
    assert targets[small] > 0.5
    assert targets[big] < 0.5


def test_matrix_specific_zero():
    targets = matrix_specific_targets(REG, 0.0)
    assert all(v == 0.0 for v in targets.values())


def test_matrix_specific_weighted_mean():
    targets = matrix_specific_targets(REG, 0.37)
    sizes = {n: e.tensor.size for n, e in REG.prunable_items()}
    total = sum(sizes.values())
    pruned = sum(targets[n] * sizes[n] for n in sizes)
    assert abs(pruned - math.ceil(0.37 * total - 1e-9)) <= 1.0


def test_per_matrix_targets_schemes():
    uniform = per_matrix_targets(REG, SparsityConfig(0.6))
    assert set(uniform) == set(REG.prunable_names())
    assert all(v == 0.6 for v in uniform.values())

    modality = per_matrix_targets(REG, SparsityConfig(
        0.5, "modality-specific", s_language=0.5, s_visual=0.7, s_cross=0.41))
    assert modality["lang.0.attn.Wq"] == 0.5
    assert modality["vis.0.ffn.Win"] == 0.7
    assert modality["cross.0.xatt.Wq"] == 0.41
    assert modality["pooler.W"] == 0.5  # pooler pinned to the overall level
    assert modality["embed.W"] == 0.5
    assert modality["vis_fc.W"] == 0.7


def test_uniform_scheme_fills_triple():
    cfg = SparsityConfig(0.3)
    assert cfg.triple() == (0.3, 0.3, 0.3)


def test_modality_specific_requires_all_three():
    with pytest.raises(ValueError):
        SparsityConfig(0.5, "modality-specific", s_language=0.5)


def test_config_dict_round_trip():
    cfg = SparsityConfig(0.5, "modality-specific", s_language=0.5,
                         s_visual=0.7, s_cross=0.41, sizes=SIZES)
    back = SparsityConfig.from_dict(cfg.to_dict())
    assert back.triple() == cfg.triple()
    assert back.sizes.as_tuple() == cfg.sizes.as_tuple()


def test_module_sizes_from_registry():
    sizes = module_sizes_from_registry(REG)
    assert sizes.language == 135168
    assert sizes.visual == 66560
    assert sizes.cross == 163840
    assert sizes.pooler == 4096


def test_grid_csv_export(tmp_path):
    path = tmp_path / "grid.csv"
    grid_to_csv(coarse_grid(0.5, SIZES), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "s_L,s_R,s_X,feasible"
    assert len(lines) > 10
    for line in lines[1:]:
        sl, sr, sx, ok = line.split(",")
        assert ok == "1"
        assert 0.0 <= float(sl) <= 1.0

"""Search for sparse and debiased subnetworks of a miniature cross-modal
transformer, evaluated on a synthetic changing-priors benchmark."""

from .autodiff import Tensor, Tape, backward, grad_check
from .data import SynthSpec, generate, oracle_accuracies
from .losses import (bce_loss, poe_fuse, lmh_fuse, lmh_loss, entropy_penalty,
                     fit_bias_prior, BiasPrior)
from .model import ModelConfig, ParameterRegistry, build_model, forward, count_parameters
from .pipeline import (ExperimentSpec, OptimizerSettings, run_recipe,
                       pretrain_surrogate, stage1_finetune, stage2_compress,
                       stage3_finetune, canonical_recipes, recipe_name)
from .pruning import (MaskSet, omp, binarize, init_real_mask,
                      random_init_real_mask, mask_train_step, audit_sparsity)
from .report import MetricsRecord, RunRecord, evaluate, aggregate, gap, export
from .sparsity import (ModuleSizes, SparsityConfig, REFERENCE_MODULE_SIZES,
                       solve_third, verify_overall, coarse_grid, refine_grid,
                       matrix_specific_targets, per_matrix_targets)

__version__ = "0.1.0"

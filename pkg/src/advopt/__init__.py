"""Adversarial attacks with hand-designed and learned optimizers.

Modules: ``core`` (types, losses, projections), ``attacks`` (iterative
attack rules and runners), ``learned_opt`` (the coordinate-wise recurrent
optimizer), ``training`` (unrolled and meta-split trainers),
``defense_zoo`` (desk-scale defenses) and ``bench`` (campaigns, sweeps,
reports, CLI).
"""

__version__ = "0.1.0"

from .core import (AttackBudget, AttackState, Classifier, LabeledExample,
                   Norm, CE, CW, DLR, TargetedMargin, loss, project,
                   project_straight_through, input_gradient, derive_seed)
from .attacks import (SignGD, Momentum, Nesterov, AdamStep, Learned,
                      CleanStart, UniformRandom, ODI, attack_step, run_attack,
                      run_with_restarts, multi_targeted, odi_init)
from .learned_opt import (OptimizerParams, RecurrentState, rnn_step,
                          learned_attack_step, save_optimizer, load_optimizer)
from .training import (BMAConfig, MAMAConfig, bma_objective, train_bma,
                       mama_iteration, train_mama)
from .defense_zoo import (DefenseRecipe, Standard, PGDAT, load_dataset,
                          train_defense, build_pool, load_pool)
from .bench import CampaignConfig, AttackSpec, EvalReport, run_campaign, sweep, report

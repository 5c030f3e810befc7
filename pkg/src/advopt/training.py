"""Unrolled training of the recurrent attack optimizer.

Two trainers live here. ``train_bma`` maximizes the trajectory loss plus a
prior penalty that pulls each update direction toward sign(grad), by plain
gradient ascent on the optimizer parameters. ``train_mama`` wraps the same
objective in a per-iteration meta-train/meta-test split over a defense pool
and ascends the combined objective, differentiating through the inner
one-step update (exact second order by default).

During unrolling the projection is applied exactly in the forward pass but
backpropagates as identity (straight-through), which avoids the zero
gradients the clip otherwise produces once iterates hit the ball boundary.
Input gradients fed to the optimizer are detached by default, matching the
usual learned-optimizer convention; set ``higher_order_input_grad`` to also
differentiate through them.
"""

import json
import time
from dataclasses import dataclass, field, asdict

import torch

from .core import (AttackBudget, Classifier, LossKind, CW,
                   NonFiniteGradientError, derive_seed, project,
                   project_straight_through, loss as attack_loss)
from .learned_opt import OptimizerParams, rnn_step
from . import attacks

__all__ = [
    "BMAConfig", "MAMAConfig", "TrainRecord", "TrainingDiverged",
    "unroll_objective", "bma_objective", "bma_objective_parts", "train_bma",
    "combined_meta_objective", "mama_iteration", "train_mama",
    "write_training_log", "read_training_log", "evaluate_robust_accuracy",
]


class TrainingDiverged(RuntimeError):
    """Objective went NaN/Inf; carries the last finite parameters."""

    def __init__(self, message, params=None, records=None):
        super().__init__(message)
        self.params = params
        self.records = records or []


@dataclass
class BMAConfig:
    """Hyperparameters of the unrolled trainer.

    ``step_weights`` and ``prior_weights`` default to all-1 and all-0.1 of
    length T. ``unroll_truncation`` caps how many steps gradients flow back
    through (None or T = full unroll, the desk-scale default).
    """

    step_weights: tuple = None
    prior_weights: tuple = None
    unroll_truncation: int = None
    batch_size: int = 32
    trainer_learning_rate: float = 0.001
    max_iterations: int = 200
    eval_every: int = 0
    eval_samples: int = 200
    higher_order_input_grad: bool = False
    # start unrolled trajectories from uniform random points in the ball,
    # matching how randomly initialized attacks are evaluated; clean starts
    # keep the objective deterministic for gradient checks
    uniform_init: bool = False

    def resolve(self, iterations: int):
        """Validated (step_weights, prior_weights, truncation) for T steps."""
        w = self.step_weights if self.step_weights is not None else (1.0,) * iterations
        lam = self.prior_weights if self.prior_weights is not None else (0.1,) * iterations
        w, lam = tuple(float(v) for v in w), tuple(float(v) for v in lam)
        if len(w) != iterations or len(lam) != iterations:
            raise ValueError("weight schedules must have length T")
        if any(v < 0 for v in w) or any(v < 0 for v in lam):
            raise ValueError("weights must be nonnegative")
        trunc = self.unroll_truncation if self.unroll_truncation is not None else iterations
        if not 1 <= trunc <= iterations:
            raise ValueError("unroll_truncation must be in [1, T]")
        if self.batch_size < 1 or self.trainer_learning_rate <= 0:
            raise ValueError("batch_size >= 1 and trainer_learning_rate > 0 required")
        return w, lam, trunc


@dataclass
class MAMAConfig(BMAConfig):
    """Meta-split training over a defense pool.

    Each iteration holds out ``meta_test_count`` defenses, takes one inner
    ascent step of size ``beta`` on the rest, and ascends the combined
    objective with outer rate ``gamma``; ``mu`` balances the held-out term.
    """

    defense_pool: list = field(default_factory=list)
    meta_test_count: int = 1
    beta: float = 0.0001
    gamma: float = 0.001
    mu: float = 1.0
    second_order: bool = True

    def validate_pool(self):
        n_defs = len(self.defense_pool)
        if n_defs < 2:
            raise ValueError("meta-split training needs a pool of >= 2 defenses")
        if not 1 <= self.meta_test_count < n_defs:
            raise ValueError("meta_test_count must satisfy 1 <= n < pool size")
        if self.beta <= 0 or self.gamma <= 0 or self.mu < 0:
            raise ValueError("beta, gamma must be > 0 and mu >= 0")


@dataclass
class TrainRecord:
    """One line of the training-run log (JSONL serializable)."""

    iteration: int
    meta_train_objective: float
    meta_test_objective: float = None
    robust_accuracy: float = None
    wall_seconds: float = 0.0
    seed: int = 0
    meta_test_defenses: list = None


def write_training_log(records, path: str):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_training_log(path: str):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(TrainRecord(**json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# The unrolled objective.
# ---------------------------------------------------------------------------

def _detach_carry(carry):
    return carry.detach() if hasattr(carry, "detach") else carry


def unroll_objective(direction_fn, f: Classifier, images: torch.Tensor,
                     labels: torch.Tensor, budget: AttackBudget,
                     step_weights, prior_weights, kind: LossKind = CW(),
                     truncation: int = None, higher_order_input_grad: bool = False,
                     init_x: torch.Tensor = None, iterate_hook=None):
    """Sum over the trajectory of weighted loss minus prior penalty.

    ``direction_fn(grad, carry) -> (g, carry)`` supplies update directions;
    passing a sign oracle instead of the recurrent policy reproduces the
    plain projected-sign trajectory. Returns ``(total, loss_part,
    prior_part)`` as scalar tensors (batch means), where
    ``total = loss_part - prior_part``.
    """
    iters = budget.iterations
    trunc = iters if truncation is None else truncation
    labels = labels.reshape(-1)
    b = images.shape[0]

    x_hat = (images if init_x is None else init_x).detach().clone().requires_grad_(True)
    carry = None
    loss_part = images.new_zeros(())
    prior_part = images.new_zeros(())

    with torch.enable_grad():
        logits = f(x_hat)
        l_vec = attack_loss(kind, logits, labels)
        for t in range(iters):
            grad = torch.autograd.grad(l_vec.sum(), x_hat, retain_graph=True,
                                       create_graph=higher_order_input_grad)[0]
            if not higher_order_input_grad:
                grad = grad.detach()
            g, carry = direction_fn(grad, carry)
            target = torch.sign(grad.detach())
            x_hat = project_straight_through(
                x_hat + budget.step_at(t) * g.to(x_hat.dtype), images, budget,
                batched=True)
            if iterate_hook is not None:
                iterate_hook(t + 1, x_hat.detach())
            logits = f(x_hat)
            l_vec = attack_loss(kind, logits, labels)
            if not torch.isfinite(l_vec).all():
                bad = int((~torch.isfinite(l_vec)).nonzero()[0])
                raise NonFiniteGradientError(
                    f"non-finite trajectory loss (step={t + 1}, example={bad})",
                    step_index=t + 1, example_index=bad)
            penalty = ((g - target) ** 2).reshape(b, -1).sum(dim=1)
            loss_part = loss_part + step_weights[t] * l_vec.mean()
            prior_part = prior_part + prior_weights[t] * penalty.mean()
            if (t + 1) % trunc == 0 and t + 1 < iters:
                x_hat = x_hat.detach().requires_grad_(True)
                carry = _detach_carry(carry)
                logits = f(x_hat)
                l_vec = attack_loss(kind, logits, labels)
    return loss_part - prior_part, loss_part, prior_part


def _policy(params: OptimizerParams):
    return lambda grad, carry: rnn_step(params, grad, carry)


def _train_init(images, budget, cfg, init_generator):
    if not cfg.uniform_init:
        return None
    gen = init_generator if init_generator is not None \
        else torch.Generator().manual_seed(0)
    noise = (torch.rand(images.shape, generator=gen, dtype=images.dtype) * 2 - 1)
    return project(images + noise * budget.epsilon, images, budget, batched=True)


def bma_objective_parts(params: OptimizerParams, f: Classifier,
                        images: torch.Tensor, labels: torch.Tensor,
                        budget: AttackBudget, cfg: BMAConfig,
                        kind: LossKind = CW(), init_generator=None):
    w, lam, trunc = cfg.resolve(budget.iterations)
    init_x = _train_init(images, budget, cfg, init_generator)
    return unroll_objective(_policy(params), f, images, labels, budget, w, lam,
                            kind, truncation=trunc,
                            higher_order_input_grad=cfg.higher_order_input_grad,
                            init_x=init_x)


def bma_objective(params: OptimizerParams, f: Classifier, images: torch.Tensor,
                  labels: torch.Tensor, budget: AttackBudget, cfg: BMAConfig,
                  kind: LossKind = CW(), init_generator=None) -> torch.Tensor:
    """Batch-mean unrolled objective; differentiable w.r.t. the parameters."""
    return bma_objective_parts(params, f, images, labels, budget, cfg, kind,
                               init_generator=init_generator)[0]


# ---------------------------------------------------------------------------
# Evaluation helper shared by trainers and sweeps.
# ---------------------------------------------------------------------------

def evaluate_robust_accuracy(params: OptimizerParams, f: Classifier,
                             images: torch.Tensor, labels: torch.Tensor,
                             budget: AttackBudget, kind: LossKind = CW(),
                             init=None, seed: int = 0) -> float:
    """Robust accuracy (%) of ``f`` under the learned attack, eval mode."""
    rule = attacks.Learned(params.clone())
    init = init if init is not None else attacks.CleanStart()
    res = attacks.run_attack_batch(f, images, labels, budget, rule, init, kind,
                                   seed=seed)
    return 100.0 * (1.0 - res.success.float().mean().item())


def _sample_batch(images, labels, batch_size, gen):
    idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
    return images[idx], labels[idx]


def _grad_tensors(params: OptimizerParams):
    return [params.tensors[n] for n in params.names]


# ---------------------------------------------------------------------------
# Plain unrolled trainer.
# ---------------------------------------------------------------------------

def train_bma(params: OptimizerParams, f: Classifier, data, budget: AttackBudget,
              cfg: BMAConfig, kind: LossKind = CW(), seed: int = 0,
              eval_data=None, log_path: str = None):
    """Gradient-ascent training on one defense.

    ``data`` is an ``(images, labels)`` pair; ``eval_data`` (defaults to
    ``data``) supplies the fixed subset used for periodic robust-accuracy
    points on the training curve. Returns ``(trained_params, records)``.
    """
    images, labels = data
    work = params.clone().requires_grad_(True)
    last_good = params.clone()
    data_gen = torch.Generator().manual_seed(derive_seed(seed, "data"))

    ev_images, ev_labels = eval_data if eval_data is not None else data
    if cfg.eval_every:
        perm = torch.randperm(ev_images.shape[0],
                              generator=torch.Generator().manual_seed(derive_seed(seed, "eval")))
        keep = perm[:min(cfg.eval_samples, ev_images.shape[0])]
        ev_images, ev_labels = ev_images[keep], ev_labels[keep]

    records = []
    start = time.monotonic()
    for it in range(1, cfg.max_iterations + 1):
        bx, by = _sample_batch(images, labels, cfg.batch_size, data_gen)
        try:
            objective = bma_objective(work, f, bx, by, budget, cfg, kind,
                                      init_generator=data_gen)
        except NonFiniteGradientError as err:
            raise TrainingDiverged(f"objective non-finite at iteration {it}: {err}",
                                   params=last_good, records=records) from err
        if not torch.isfinite(objective):
            raise TrainingDiverged(f"objective non-finite at iteration {it}",
                                   params=last_good, records=records)
        grads = torch.autograd.grad(objective, _grad_tensors(work))
        with torch.no_grad():
            for t, g in zip(_grad_tensors(work), grads):
                t.add_(cfg.trainer_learning_rate * g)
        if not all(torch.isfinite(t).all() for t in work.tensors.values()):
            raise TrainingDiverged(f"parameters non-finite at iteration {it}",
                                   params=last_good, records=records)
        last_good = work.clone()

        acc = None
        if cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.max_iterations):
            acc = evaluate_robust_accuracy(work, f, ev_images, ev_labels, budget,
                                           kind, seed=seed)
        records.append(TrainRecord(iteration=it,
                                   meta_train_objective=float(objective.detach()),
                                   robust_accuracy=acc,
                                   wall_seconds=time.monotonic() - start,
                                   seed=seed))
    if log_path:
        write_training_log(records, log_path)
    return work.clone(), records


# ---------------------------------------------------------------------------
# Meta-split trainer.
# ---------------------------------------------------------------------------

def combined_meta_objective(params: OptimizerParams, meta_train, meta_test,
                            train_batches, test_batches, budget: AttackBudget,
                            cfg: MAMAConfig, kind: LossKind = CW(),
                            init_generator=None):
    """J(phi; train) + mu * J(phi + beta * grad J; test), as one scalar.

    The inner ascent step is part of the graph, so differentiating the
    returned total w.r.t. the parameters includes the second-order term (or
    the first-order approximation when ``cfg.second_order`` is off). Also
    returns the two component values. Parameters that do not require grad
    are copied into a local differentiable set (value-only evaluation, e.g.
    finite differencing).
    """
    if not all(t.requires_grad for t in _grad_tensors(params)):
        params = params.map_tensors(lambda n, t: t.detach().clone().requires_grad_(True))
    tensors = _grad_tensors(params)
    per_def = [bma_objective(params, f_r, bx, by, budget, cfg, kind,
                             init_generator=init_generator)
               for f_r, (bx, by) in zip(meta_train, train_batches)]
    j_train = torch.stack(per_def).mean()

    if cfg.mu == 0 or not meta_test:
        return j_train, j_train, None

    inner = torch.autograd.grad(j_train, tensors,
                                create_graph=cfg.second_order, retain_graph=True)
    by_name = dict(zip(params.names, inner))
    shifted = params.map_tensors(lambda name, t: t + cfg.beta * by_name[name])
    per_def_test = [bma_objective(shifted, f_e, bx, by, budget, cfg, kind,
                                  init_generator=init_generator)
                    for f_e, (bx, by) in zip(meta_test, test_batches)]
    j_test = torch.stack(per_def_test).mean()
    return j_train + cfg.mu * j_test, j_train, j_test


def mama_iteration(params: OptimizerParams, cfg: MAMAConfig, data,
                   budget: AttackBudget, kind: LossKind = CW(),
                   split_generator=None, data_generator=None, seed: int = 0):
    """One meta-split update; returns ``(new_params, record)``.

    The pool is split fresh each call; every defense draws its own
    mini-batch. With ``mu = 0`` the update reduces to plain gradient ascent
    on the meta-train defenses (the held-out pass is skipped).
    """
    cfg.validate_pool()
    if split_generator is None:
        split_generator = torch.Generator().manual_seed(derive_seed(seed, "split"))
    if data_generator is None:
        data_generator = torch.Generator().manual_seed(derive_seed(seed, "data"))
    images, labels = data
    pool = cfg.defense_pool
    n_defs = len(pool)

    perm = torch.randperm(n_defs, generator=split_generator).tolist()
    train_idx, test_idx = perm[:n_defs - cfg.meta_test_count], perm[n_defs - cfg.meta_test_count:]
    meta_train = [pool[i] for i in train_idx]
    meta_test = [pool[i] for i in test_idx]

    work = params.clone().requires_grad_(True)
    train_batches = [_sample_batch(images, labels, cfg.batch_size, data_generator)
                     for _ in meta_train]
    test_batches = []
    if cfg.mu > 0:
        test_batches = [_sample_batch(images, labels, cfg.batch_size, data_generator)
                        for _ in meta_test]

    try:
        total, j_train, j_test = combined_meta_objective(
            work, meta_train, meta_test if cfg.mu > 0 else [], train_batches,
            test_batches, budget, cfg, kind, init_generator=data_generator)
    except NonFiniteGradientError as err:
        raise TrainingDiverged(f"combined objective non-finite: {err}",
                               params=params) from err
    if not torch.isfinite(total):
        raise TrainingDiverged("combined objective non-finite", params=params)
    grads = torch.autograd.grad(total, _grad_tensors(work))
    with torch.no_grad():
        for t, g in zip(_grad_tensors(work), grads):
            t.add_(cfg.gamma * g)

    record = TrainRecord(
        iteration=0,
        meta_train_objective=float(j_train.detach()),
        meta_test_objective=None if j_test is None else float(j_test.detach()),
        seed=seed,
        meta_test_defenses=[f.name for f in meta_test])
    return work.clone(), record


def train_mama(cfg: MAMAConfig, data, budget: AttackBudget,
               kind: LossKind = CW(), seed: int = 0,
               initial_params: OptimizerParams = None, log_path: str = None):
    """Iterate meta-split updates; returns ``(params, records)``.

    Zero ``max_iterations`` returns the initial parameters untouched.
    """
    cfg.validate_pool()
    params = (initial_params.clone() if initial_params is not None
              else OptimizerParams.initialize(derive_seed(seed, "init")))
    split_gen = torch.Generator().manual_seed(derive_seed(seed, "split"))
    data_gen = torch.Generator().manual_seed(derive_seed(seed, "data"))

    records = []
    start = time.monotonic()
    for it in range(1, cfg.max_iterations + 1):
        try:
            params, rec = mama_iteration(params, cfg, data, budget, kind,
                                         split_generator=split_gen,
                                         data_generator=data_gen, seed=seed)
        except TrainingDiverged as err:
            err.params = params
            err.records = records
            raise
        rec.iteration = it
        rec.wall_seconds = time.monotonic() - start
        records.append(rec)
    if log_path:
        write_training_log(records, log_path)
    return params, records

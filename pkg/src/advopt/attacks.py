"""Iterative attacks: update rules, initialization strategies and runners.

All runners do best-iterate selection: the reported adversarial example is
the trajectory iterate with maximal attack loss (ties keep the earliest),
and attacks never stop early so full loss traces are available for
convergence plots. The batched engine carries a leading example dimension;
single-example wrappers match the one-trajectory contracts.

Per-trajectory randomness (uniform starts, diversified-init directions) is
drawn from per-example integer seeds so that restarts and paired attack
comparisons are reproducible.
"""

from dataclasses import dataclass

import torch

from .core import (AttackBudget, AttackState, Classifier, LabeledExample,
                   LossKind, CW, TargetedMargin, NonFiniteGradientError,
                   derive_seed, input_gradient, loss, project)
from .learned_opt import OptimizerParams, learned_attack_step

__all__ = [
    "SignGD", "Momentum", "Nesterov", "AdamStep", "Learned", "UpdateRule",
    "CleanStart", "UniformRandom", "ODI", "InitStrategy",
    "attack_step", "grad_eval_point", "odi_init",
    "run_attack", "run_with_restarts", "multi_targeted",
    "BatchAttackResult", "run_attack_batch", "run_with_restarts_batch",
    "multi_targeted_batch",
]


# ---------------------------------------------------------------------------
# Update rules. Rule objects are immutable configs; accumulators travel in
# AttackState so trajectories stay independent and concurrency-safe.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignGD:
    """Plain sign-gradient ascent (the PGD update)."""


@dataclass(frozen=True)
class Momentum:
    """L1-normalized gradient accumulation, sign step."""

    decay: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")


@dataclass(frozen=True)
class Nesterov:
    """Momentum with the gradient evaluated at a lookahead point.

    The caller evaluates the gradient at :func:`grad_eval_point`.
    """

    decay: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")


@dataclass(frozen=True)
class AdamStep:
    """Bias-corrected adaptive-moment direction replacing sign(grad)."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8


@dataclass(frozen=True, eq=False)
class Learned:
    """Delegates the update direction to the recurrent optimizer."""

    params: OptimizerParams


UpdateRule = SignGD | Momentum | Nesterov | AdamStep | Learned


def _l1_normalized(grad: torch.Tensor, batched: bool) -> torch.Tensor:
    # zero gradient: skip normalization, treat the normalized gradient as 0
    if batched:
        norms = grad.reshape(grad.shape[0], -1).abs().sum(dim=1)
        norms = norms.reshape((-1,) + (1,) * (grad.dim() - 1))
        return torch.where(norms > 0, grad / norms.clamp_min(1e-30), torch.zeros_like(grad))
    n = grad.abs().sum()
    return grad / n if n > 0 else torch.zeros_like(grad)


def grad_eval_point(rule: UpdateRule, state: AttackState,
                    budget: AttackBudget) -> torch.Tensor:
    """Where the caller should evaluate the input gradient for this rule."""
    if isinstance(rule, Nesterov) and state.acc is not None:
        alpha = budget.step_at(state.step_index)
        return state.x_adv + alpha * rule.decay * state.acc
    return state.x_adv


def attack_step(rule: UpdateRule, state: AttackState, grad: torch.Tensor,
                budget: AttackBudget, batched: bool = False,
                straight_through: bool = False) -> AttackState:
    """One projected update of the trajectory under the given rule."""
    if isinstance(rule, Learned):
        return learned_attack_step(rule.params, state, grad, budget,
                                   batched=batched, straight_through=straight_through)

    alpha = budget.step_at(state.step_index)
    acc = state.acc
    if isinstance(rule, SignGD):
        direction = torch.sign(grad)
    elif isinstance(rule, (Momentum, Nesterov)):
        buf = torch.zeros_like(grad) if acc is None else acc
        buf = rule.decay * buf + _l1_normalized(grad, batched)
        direction = torch.sign(buf)
        acc = buf
    elif isinstance(rule, AdamStep):
        m, v, t = (torch.zeros_like(grad), torch.zeros_like(grad), 0) if acc is None else acc
        t += 1
        m = rule.beta1 * m + (1 - rule.beta1) * grad
        v = rule.beta2 * v + (1 - rule.beta2) * grad * grad
        m_hat = m / (1 - rule.beta1 ** t)
        v_hat = v / (1 - rule.beta2 ** t)
        direction = m_hat / (v_hat.sqrt() + rule.eps_hat)
        acc = (m, v, t)
    else:
        raise TypeError(f"unknown update rule: {rule!r}")

    x_next = project(state.x_adv + alpha * direction, state.origin, budget,
                     batched=batched)
    return AttackState(x_adv=x_next, origin=state.origin,
                       step_index=state.step_index + 1, hidden=state.hidden,
                       acc=acc)


# ---------------------------------------------------------------------------
# Initialization strategies.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CleanStart:
    """Start from the clean input."""

    @property
    def tag(self) -> str:
        return "clean"


@dataclass(frozen=True)
class UniformRandom:
    """delta_0 ~ U(-eps, eps) elementwise, then projected."""

    @property
    def tag(self) -> str:
        return "uniform"


@dataclass(frozen=True)
class ODI:
    """Output-diversified warm start: a few sign-ascent steps on a random
    linear functional of the logits before the main attack."""

    odi_steps: int = 2
    odi_step_size: float | None = None  # None -> budget.epsilon

    def __post_init__(self):
        if self.odi_steps < 1:
            raise ValueError("odi_steps must be >= 1")

    @property
    def tag(self) -> str:
        return f"odi:{self.odi_steps}:{self.odi_step_size}"


InitStrategy = CleanStart | UniformRandom | ODI


def _per_example_uniform(n, example_shape, seeds, low, high, dtype, key=""):
    rows = []
    for s in seeds:
        gen = torch.Generator().manual_seed(derive_seed(int(s), key) if key else int(s))
        rows.append(torch.rand(example_shape, generator=gen, dtype=dtype) * (high - low) + low)
    return torch.stack(rows) if rows else torch.empty((0,) + tuple(example_shape), dtype=dtype)


def _uniform_start(images, budget, seeds):
    noise = _per_example_uniform(images.shape[0], images.shape[1:], seeds,
                                 -budget.epsilon, budget.epsilon, images.dtype,
                                 key="uniform")
    return project(images + noise, images, budget, batched=True)


def _odi_batch(f: Classifier, images: torch.Tensor, budget: AttackBudget,
               odi_steps: int, odi_step_size: float, seeds) -> torch.Tensor:
    """Diversified warm start for a batch; per-example random directions.

    Examples whose diversification gradient vanishes fall back to a uniform
    random start drawn from the same per-example seed stream.
    """
    b = images.shape[0]
    k = f.num_classes
    w = _per_example_uniform(b, (k,), seeds, -1.0, 1.0, images.dtype, key="odi-w")
    x = images.clone()
    alive = torch.ones(b, dtype=torch.bool)
    for _ in range(odi_steps):
        x_req = x.detach().requires_grad_(True)
        with torch.enable_grad():
            value = (f(x_req) * w).sum()
            grad = torch.autograd.grad(value, x_req)[0]
        flat = grad.reshape(b, -1)
        dead = (flat.abs().sum(dim=1) == 0) & alive
        if dead.any():
            fallback = _uniform_start(images[dead], budget,
                                      [seeds[i] for i in dead.nonzero().reshape(-1).tolist()])
            x = x.clone()
            x[dead] = fallback
            alive &= ~dead
        if not alive.any():
            break
        norms = flat.norm(dim=1).clamp_min(1e-30).reshape((-1,) + (1,) * (grad.dim() - 1))
        step = odi_step_size * torch.sign(grad / norms)
        moved = project(x + step, images, budget, batched=True)
        x = torch.where(alive.reshape((-1,) + (1,) * (x.dim() - 1)), moved, x)
    return x.detach()


def initial_iterates(init: InitStrategy, f: Classifier, images: torch.Tensor,
                     budget: AttackBudget, seeds) -> torch.Tensor:
    if isinstance(init, CleanStart):
        return images.clone()
    if isinstance(init, UniformRandom):
        return _uniform_start(images, budget, seeds)
    if isinstance(init, ODI):
        step = budget.epsilon if init.odi_step_size is None else init.odi_step_size
        return _odi_batch(f, images, budget, init.odi_steps, step, seeds)
    raise TypeError(f"unknown init strategy: {init!r}")


def odi_init(f: Classifier, example: LabeledExample, budget: AttackBudget,
             odi_steps: int, odi_step_size: float, seed: int) -> AttackState:
    """Diversified warm start for one trajectory; returns the initial state."""
    if odi_steps < 1:
        raise ValueError("odi_steps must be >= 1")
    images = example.image.unsqueeze(0)
    x0 = _odi_batch(f, images, budget, odi_steps, odi_step_size, [seed])
    return AttackState(x_adv=x0.squeeze(0), origin=example.image, step_index=0)


# ---------------------------------------------------------------------------
# Trajectory runners (batched engine + single-example wrappers).
# ---------------------------------------------------------------------------

@dataclass
class BatchAttackResult:
    """Per-example outcome of one trajectory set.

    ``losses`` and ``misclass`` have shape (T+1, B) and include the initial
    iterate, so best-iterate statistics for any iteration prefix can be
    recovered exactly.
    """

    x_adv: torch.Tensor
    success: torch.Tensor
    best_loss: torch.Tensor
    losses: torch.Tensor
    misclass: torch.Tensor

    def prefix_success(self) -> torch.Tensor:
        """(T+1, B) bool: best-iterate success if the attack had stopped at
        each step. First-occurrence argmax keeps ties at the earlier step."""
        vals, idx = torch.cummax(self.losses, dim=0)
        del vals
        return self.misclass.gather(0, idx)


def _eval_iterate(f, kind, x, labels):
    with torch.no_grad():
        logits = f(x)
        l_vec = loss(kind, logits, labels)
        mis = torch.argmax(logits, dim=-1) != labels
    return l_vec, mis


def run_attack_batch(f: Classifier, images: torch.Tensor, labels: torch.Tensor,
                     budget: AttackBudget, rule: UpdateRule, init: InitStrategy,
                     kind: LossKind, example_seeds=None, seed: int = 0) -> BatchAttackResult:
    """Run one trajectory per example; fresh accumulators, no early stop."""
    b = images.shape[0]
    labels = labels.reshape(-1)
    if example_seeds is None:
        example_seeds = [derive_seed(seed, i) for i in range(b)]

    x0 = initial_iterates(init, f, images, budget, example_seeds)
    state = AttackState(x_adv=x0, origin=images, step_index=0)

    l0, m0 = _eval_iterate(f, kind, x0, labels)
    losses, misclass = [l0], [m0]
    best_x, best_loss, best_mis = x0.clone(), l0.clone(), m0.clone()

    for t in range(budget.iterations):
        x_eval = grad_eval_point(rule, state, budget)
        try:
            grad = input_gradient(f, kind, x_eval, labels, step_index=t)
        except NonFiniteGradientError as err:
            err.step_index = t
            raise
        state = attack_step(rule, state, grad, budget, batched=True)
        l_t, m_t = _eval_iterate(f, kind, state.x_adv, labels)
        losses.append(l_t)
        misclass.append(m_t)
        better = l_t > best_loss
        mask = better.reshape((-1,) + (1,) * (images.dim() - 1))
        best_x = torch.where(mask, state.x_adv, best_x)
        best_loss = torch.where(better, l_t, best_loss)
        best_mis = torch.where(better, m_t, best_mis)

    return BatchAttackResult(x_adv=best_x, success=best_mis, best_loss=best_loss,
                             losses=torch.stack(losses), misclass=torch.stack(misclass))


def run_attack(f: Classifier, example: LabeledExample, budget: AttackBudget,
               rule: UpdateRule, init: InitStrategy, kind: LossKind,
               seed: int = 0):
    """Single-trajectory attack; returns ``(x_adv, success, trace)``.

    ``trace`` is the loss at every iterate including the start (length T+1);
    the returned example is the max-loss iterate.
    """
    res = run_attack_batch(f, example.image.unsqueeze(0),
                           torch.tensor([example.label]), budget, rule, init,
                           kind, example_seeds=[seed])
    return res.x_adv.squeeze(0), bool(res.success[0]), res.losses[:, 0].tolist()


def run_with_restarts_batch(f: Classifier, images: torch.Tensor,
                            labels: torch.Tensor, budget: AttackBudget,
                            rule: UpdateRule, init: InitStrategy, kind: LossKind,
                            example_seeds=None, seed: int = 0):
    """Independent restarts; per example keeps the best restart.

    Successful restarts always beat failed ones; among equals the higher
    final (best-iterate) loss wins. Returns ``(result, per_restart_losses)``
    with the latter shaped (R, B).
    """
    b = images.shape[0]
    if example_seeds is None:
        example_seeds = [derive_seed(seed, i) for i in range(b)]

    agg = None
    per_restart = []
    for r in range(budget.restarts):
        seeds_r = [derive_seed(s, "restart", r) for s in example_seeds]
        res = run_attack_batch(f, images, labels, budget, rule, init, kind,
                               example_seeds=seeds_r)
        per_restart.append(res.best_loss)
        if agg is None:
            agg = res
            continue
        better = (res.success & ~agg.success) | \
                 ((res.success == agg.success) & (res.best_loss > agg.best_loss))
        mask = better.reshape((-1,) + (1,) * (images.dim() - 1))
        agg = BatchAttackResult(
            x_adv=torch.where(mask, res.x_adv, agg.x_adv),
            success=agg.success | res.success,
            best_loss=torch.where(better, res.best_loss, agg.best_loss),
            losses=torch.where(better, res.losses, agg.losses),
            misclass=torch.where(better, res.misclass, agg.misclass),
        )
    return agg, torch.stack(per_restart)


def run_with_restarts(f: Classifier, example: LabeledExample,
                      budget: AttackBudget, rule: UpdateRule,
                      init: InitStrategy, kind: LossKind, seed: int = 0):
    """Restart wrapper for one example: ``(x_adv, success, per_restart_losses)``."""
    agg, per_restart = run_with_restarts_batch(
        f, example.image.unsqueeze(0), torch.tensor([example.label]), budget,
        rule, init, kind, example_seeds=[seed])
    return agg.x_adv.squeeze(0), bool(agg.success[0]), per_restart[:, 0].tolist()


def multi_targeted_batch(f: Classifier, images: torch.Tensor,
                         labels: torch.Tensor, budget: AttackBudget,
                         rule: UpdateRule, init: InitStrategy,
                         example_seeds=None, seed: int = 0):
    """One targeted run per non-true class; per example the union of
    successes and the best run. Every target reuses the same per-example
    seeds so comparisons against a single untargeted run are paired."""
    if f.num_classes < 2:
        raise ValueError("multi-targeted attack needs at least 2 classes")
    b = images.shape[0]
    labels = labels.reshape(-1)
    if example_seeds is None:
        example_seeds = [derive_seed(seed, i) for i in range(b)]

    agg_x = images.clone()
    agg_success = torch.zeros(b, dtype=torch.bool)
    agg_loss = torch.full((b,), float("-inf"), dtype=images.dtype)
    for c in range(f.num_classes):
        mask = labels != c
        if not mask.any():
            continue
        idx = mask.nonzero().reshape(-1)
        sub, _ = run_with_restarts_batch(
            f, images[idx], labels[idx], budget, rule, init, TargetedMargin(c),
            example_seeds=[example_seeds[i] for i in idx.tolist()])
        cur_success = agg_success[idx]
        cur_loss = agg_loss[idx]
        better = (sub.success & ~cur_success) | \
                 ((sub.success == cur_success) & (sub.best_loss > cur_loss))
        upd = idx[better]
        agg_x[upd] = sub.x_adv[better]
        agg_loss[idx] = torch.where(better, sub.best_loss, cur_loss)
        agg_success[idx] = cur_success | sub.success
    return agg_x, agg_success


def multi_targeted(f: Classifier, example: LabeledExample,
                   budget: AttackBudget, rule: UpdateRule, init: InitStrategy,
                   seed: int = 0):
    """Single-example multi-target wrapper: ``(x_adv, success)``."""
    x, s = multi_targeted_batch(f, example.image.unsqueeze(0),
                                torch.tensor([example.label]), budget, rule,
                                init, example_seeds=[seed])
    return x.squeeze(0), bool(s[0])

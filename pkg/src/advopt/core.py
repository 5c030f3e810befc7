"""Shared domain types, loss functions, norm projections and input gradients.

Everything here is pure given frozen classifier parameters, so all functions
are safe to call concurrently from evaluation workers. Tensors follow the
caller's dtype/device; attack iterates always live in [0, 1].
"""

import hashlib
from dataclasses import dataclass
from enum import Enum

import torch

__all__ = [
    "Norm",
    "AttackBudget",
    "LabeledExample",
    "Classifier",
    "AttackState",
    "CE",
    "CW",
    "DLR",
    "TargetedMargin",
    "LossKind",
    "loss",
    "project",
    "project_straight_through",
    "input_gradient",
    "misclassified",
    "derive_seed",
    "NonFiniteGradientError",
]

# Degenerate-logit fallback for the logit-ratio loss: when the top and
# third-ranked logits tie exactly, the denominator becomes this instead of 0.
DLR_TIE_EPS = 1e-12

# Slack allowed when *checking* ball membership; projections themselves are
# exact up to float rounding.
BALL_TOL = 1e-6


class Norm(str, Enum):
    LINF = "linf"
    L2 = "l2"


class NonFiniteGradientError(RuntimeError):
    """Raised when an input gradient or objective turns NaN/Inf.

    Carries enough context (step index, example index) to locate the
    offending trajectory position.
    """

    def __init__(self, message, step_index=None, example_index=None):
        super().__init__(message)
        self.step_index = step_index
        self.example_index = example_index


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation budget: norm ball, radius, step schedule and counts.

    ``step_size`` is either a single float (constant schedule) or a sequence
    of per-iteration sizes of length ``iterations``.
    """

    norm: Norm
    epsilon: float
    step_size: float | tuple[float, ...]
    iterations: int
    restarts: int = 1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.norm == Norm.LINF and self.epsilon > 1.0:
            raise ValueError("Linf epsilon > 1 is meaningless for [0,1] inputs")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        steps = self.step_size if isinstance(self.step_size, tuple) else (self.step_size,)
        if any(a <= 0 for a in steps):
            raise ValueError("every step size must be > 0")
        if isinstance(self.step_size, tuple) and len(self.step_size) != self.iterations:
            raise ValueError("per-step schedule length must equal iterations")

    def step_at(self, t: int) -> float:
        """Step size for iteration t (0-based)."""
        if isinstance(self.step_size, tuple):
            return self.step_size[t]
        return self.step_size


@dataclass(frozen=True)
class LabeledExample:
    """A single clean input with its true class index. ``image`` is (C, H, W)
    (or any fixed example shape) with values in [0, 1]."""

    image: torch.Tensor
    label: int

    def __post_init__(self):
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        if self.label < 0:
            raise ValueError("label must be a nonnegative class index")


class Classifier:
    """A frozen differentiable map from images to logits, plus metadata.

    The wrapped module is put in eval mode and its parameters are detached
    from training, so identical inputs always produce identical logits and
    attacks can never mutate the defense.
    """

    def __init__(self, module, name: str, num_classes: int,
                 architecture: str = "", recipe_tag: str = ""):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.module = module
        self.name = name
        self.num_classes = num_classes
        self.architecture = architecture
        self.recipe_tag = recipe_tag

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(x)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(x)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Argmax prediction; ties resolve to the smallest class index."""
        with torch.no_grad():
            return torch.argmax(self.module(x), dim=-1)

    def param_hash(self) -> str:
        """SHA-256 over (name, shape, bytes) of all parameters and buffers.

        Used to verify defenses stay frozen across an attack campaign.
        """
        h = hashlib.sha256()
        state = self.module.state_dict()
        for key in sorted(state):
            t = state[key].detach().cpu().contiguous()
            h.update(key.encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def __repr__(self):
        return (f"Classifier(name={self.name!r}, arch={self.architecture!r}, "
                f"classes={self.num_classes})")


@dataclass
class AttackState:
    """One trajectory's current iterate plus per-trajectory bookkeeping.

    ``hidden`` holds the recurrent optimizer state when the learned update
    rule is active; ``acc`` holds momentum/Adam accumulators otherwise. Both
    are trajectory-local and never shared.
    """

    x_adv: torch.Tensor
    origin: torch.Tensor
    step_index: int = 0
    hidden: object = None
    acc: object = None


# ---------------------------------------------------------------------------
# Loss functions. Higher loss always means "more adversarial".
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CE:
    """Cross-entropy of the true class: -log softmax(z)[y]."""


@dataclass(frozen=True)
class CW:
    """Margin loss max_{i != y} z_i - z_y; positive iff misclassified."""


@dataclass(frozen=True)
class DLR:
    """Scale-invariant logit ratio -(z_y - max_{i != y} z_i)/(z_(1) - z_(3)).

    Requires K >= 3. Fully tied logits fall back to a tiny denominator
    instead of dividing by zero.
    """


@dataclass(frozen=True)
class TargetedMargin:
    """Targeted margin z_c - max_{i != c} z_i for a fixed target class c."""

    target: int


LossKind = CE | CW | DLR | TargetedMargin


def _runnerup(logits: torch.Tensor, excluded: torch.Tensor) -> torch.Tensor:
    """max_i z_i over i != excluded, per row."""
    masked = logits.clone()
    masked.scatter_(-1, excluded.unsqueeze(-1), float("-inf"))
    return masked.max(dim=-1).values


def loss(kind: LossKind, logits: torch.Tensor, label) -> torch.Tensor:
    """Attack loss of ``logits`` against ``label``.

    Accepts a single logit vector (K,) with an int label, returning a 0-dim
    tensor, or a batch (B, K) with labels (B,), returning (B,). Differentiable
    w.r.t. logits.
    """
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(label, dtype=torch.long, device=logits.device).reshape(-1)
    k = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")

    if isinstance(kind, CE):
        out = torch.logsumexp(logits, dim=-1) - logits.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    elif isinstance(kind, CW):
        z_y = logits.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
        out = _runnerup(logits, labels) - z_y
    elif isinstance(kind, DLR):
        if k < 3:
            raise ValueError("DLR needs at least 3 classes")
        z_y = logits.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
        top = logits.sort(dim=-1, descending=True).values
        denom = top[..., 0] - top[..., 2]
        denom = torch.where(denom == 0, torch.full_like(denom, DLR_TIE_EPS), denom)
        out = -(z_y - _runnerup(logits, labels)) / denom
    elif isinstance(kind, TargetedMargin):
        tgt = torch.full_like(labels, kind.target)
        if kind.target < 0 or kind.target >= k:
            raise ValueError(f"target {kind.target} out of range [0, {k})")
        z_c = logits.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
        out = z_c - _runnerup(logits, tgt)
    else:
        raise TypeError(f"unknown loss kind: {kind!r}")
    return out.squeeze(0) if single else out


def misclassified(f: Classifier, x: torch.Tensor, labels) -> torch.Tensor:
    """Boolean success predicate C_f(x) != y per example.

    ``x`` is a batch (B, *example_shape); argmax ties resolve to the
    smallest class index.
    """
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    preds = f.predict(x).reshape(-1)
    return preds != labels


# ---------------------------------------------------------------------------
# Projections onto the epsilon ball intersected with the [0,1] box.
# ---------------------------------------------------------------------------

def _l2_norms(delta: torch.Tensor, batched: bool) -> torch.Tensor:
    if batched:
        flat = delta.reshape(delta.shape[0], -1)
        return flat.norm(dim=1).reshape((-1,) + (1,) * (delta.dim() - 1))
    return delta.norm()


# Relative inward bias applied when an L2 rescale actually fires; keeps
# re-projection a bitwise fixed point despite float rounding.
_L2_UNDERSHOOT = 1e-5


def project(x_adv: torch.Tensor, origin: torch.Tensor, budget: AttackBudget,
            batched: bool = False) -> torch.Tensor:
    """Project onto the epsilon ball around ``origin`` intersected with [0, 1].

    With ``batched=True`` the leading dimension indexes independent examples
    and the L2 norm is taken per example; otherwise the whole tensor is one
    example.

    Idempotent: Linf clamps against fixed per-coordinate bounds; L2 points
    inside the ball pass through bit-exactly, and rescaled points land
    strictly inside (0.01% of the radius) so a second projection is the
    identity.
    """
    if x_adv.shape != origin.shape:
        raise ValueError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(origin.shape)}")
    if budget.norm == Norm.LINF:
        lo = (origin - budget.epsilon).clamp_min(0.0)
        hi = (origin + budget.epsilon).clamp_max(1.0)
        return torch.minimum(torch.maximum(x_adv, lo), hi)
    # L2 in float64: float32 differences are exact there, so the
    # inside-the-ball branch returns the input (box-clamped) unchanged.
    delta = x_adv.double() - origin.double()
    norms = _l2_norms(delta, batched)
    scale = torch.where(norms > budget.epsilon,
                        (budget.epsilon / norms.clamp_min(1e-300)) * (1.0 - _L2_UNDERSHOOT),
                        torch.ones_like(norms))
    out = (origin.double() + delta * scale).clamp(0.0, 1.0)
    return out.to(x_adv.dtype)


def project_straight_through(x_adv: torch.Tensor, origin: torch.Tensor,
                             budget: AttackBudget, batched: bool = False) -> torch.Tensor:
    """``project`` in the forward pass, identity in the backward pass.

    Used during unrolled training so clipped coordinates keep gradient 1
    instead of 0.
    """
    projected = project(x_adv, origin, budget, batched=batched)
    # forward value is exactly `projected` ((x - x.detach()) is exactly 0);
    # gradient flows only through that term, i.e. identity
    return projected.detach() + (x_adv - x_adv.detach())


# ---------------------------------------------------------------------------
# Input gradients.
# ---------------------------------------------------------------------------

def input_gradient(f: Classifier, kind: LossKind, x: torch.Tensor, label,
                   step_index=None) -> torch.Tensor:
    """Gradient of loss(kind, f(x), label) w.r.t. x. Does not mutate x.

    Batched inputs sum the per-example losses before differentiating, which
    yields per-example gradients because examples are independent.
    """
    x_req = x.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = f(x_req)
        value = loss(kind, logits, label)
        grad = torch.autograd.grad(value.sum(), x_req)[0]
    if not torch.isfinite(grad).all():
        bad = (~torch.isfinite(grad)).reshape(grad.shape[0], -1).any(dim=1) \
            if grad.dim() > 1 else None
        idx = int(bad.nonzero()[0]) if bad is not None and bad.any() else None
        raise NonFiniteGradientError(
            f"non-finite input gradient (step={step_index}, example={idx})",
            step_index=step_index, example_index=idx)
    return grad


def derive_seed(master: int, *parts) -> int:
    """Deterministic 63-bit seed from a master seed and context labels.

    The documented campaign seeding hash: SHA-256 over
    ``"{master}|{part1}|{part2}|..."`` truncated to 63 bits.
    """
    text = "|".join([str(master)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF

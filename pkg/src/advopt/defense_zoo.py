"""Desk-scale defense zoo: small classifiers trained on the 8x8 digits set.

Defenses are trained either normally or with projected-sign adversarial
training, then persisted as parameter arrays plus a metadata sidecar with a
content hash. A pool manifest lists checkpoints so the bench and the
meta-trainer can load a frozen, auditable defense set.

Recipes fully determine training: model init, batch order and the inner
attack's random starts all derive from the recipe seed, so re-running a
recipe on fixed hardware reproduces the checkpoint hash.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import AttackBudget, Classifier, Norm, derive_seed

__all__ = [
    "Split", "ImageDataset", "load_dataset",
    "Standard", "PGDAT", "TrainingKind", "DefenseRecipe", "DefenseCheckpoint",
    "build_model", "train_defense", "build_pool", "load_defense",
    "write_pool_manifest", "load_pool", "pool_diversity_issues",
    "default_recipes", "DEFAULT_REFERENCE_BUDGET",
]

log = logging.getLogger(__name__)

INPUT_SHAPE = (1, 8, 8)
NUM_CLASSES = 10

# Reference budget stored with every checkpoint: Linf, step eps/10, 20 steps.
# eps is scaled to the 8x8 digits set; adversarial training collapses there
# for radii much beyond ~0.2 of the pixel range.
DEFAULT_REFERENCE_BUDGET = AttackBudget(norm=Norm.LINF, epsilon=0.15,
                                        step_size=0.015, iterations=20)


# ---------------------------------------------------------------------------
# Data.
# ---------------------------------------------------------------------------

@dataclass
class Split:
    images: torch.Tensor  # (N, 1, 8, 8) in [0, 1]
    labels: torch.Tensor  # (N,) long

    def __len__(self):
        return self.images.shape[0]


@dataclass
class ImageDataset:
    name: str
    train: Split
    test: Split


def load_dataset(name: str = "digits", test_fraction: float = 1 / 3,
                 seed: int = 0) -> ImageDataset:
    """Deterministic train/test split of a small image classification set.

    Only the scikit-learn 8x8 digits set is bundled (1797 examples, 10
    classes); pixels are rescaled from [0, 16] to [0, 1].
    """
    if name != "digits":
        raise ValueError(f"unknown dataset {name!r}")
    from sklearn.datasets import load_digits
    raw = load_digits()
    images = torch.from_numpy(raw.images).float().unsqueeze(1) / 16.0
    labels = torch.from_numpy(raw.target).long()
    n = images.shape[0]
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(derive_seed(seed, "split")))
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    return ImageDataset(name="digits",
                        train=Split(images[train_idx], labels[train_idx]),
                        test=Split(images[test_idx], labels[test_idx]))


# ---------------------------------------------------------------------------
# Architectures. Spec strings: "mlp:<h1>[-<h2>...]" and "cnn:<c1>-<c2>".
# ---------------------------------------------------------------------------

def build_model(architecture: str, input_shape=INPUT_SHAPE,
                num_classes: int = NUM_CLASSES) -> nn.Module:
    kind, _, spec = architecture.partition(":")
    dims = [int(v) for v in spec.split("-")] if spec else []
    c, h, w = input_shape
    if kind == "mlp":
        layers, width = [nn.Flatten()], c * h * w
        for d in dims:
            layers += [nn.Linear(width, d), nn.ReLU()]
            width = d
        layers.append(nn.Linear(width, num_classes))
        return nn.Sequential(*layers)
    if kind == "cnn":
        if len(dims) != 2:
            raise ValueError("cnn spec needs two channel counts, e.g. cnn:8-16")
        c1, c2 = dims
        return nn.Sequential(
            nn.Conv2d(c, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(), nn.Linear(c2 * (h // 4) * (w // 4), num_classes))
    raise ValueError(f"unknown architecture {architecture!r}")


# ---------------------------------------------------------------------------
# Recipes.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Standard:
    @property
    def tag(self) -> str:
        return "standard"


@dataclass(frozen=True)
class PGDAT:
    """Adversarial training: every batch is replaced by projected-sign
    adversarial examples at this inner budget before the optimizer step."""

    at_epsilon: float
    at_steps: int = 10
    at_step_size: float = None  # None -> at_epsilon / 4

    def __post_init__(self):
        if self.at_epsilon <= 0:
            raise ValueError("at_epsilon must be > 0")

    @property
    def step(self) -> float:
        return self.at_step_size if self.at_step_size is not None else self.at_epsilon / 4

    @property
    def tag(self) -> str:
        return f"pgd_at(eps={self.at_epsilon},steps={self.at_steps})"


TrainingKind = Standard | PGDAT


@dataclass(frozen=True)
class DefenseRecipe:
    name: str
    architecture: str
    training: TrainingKind
    dataset: str = "digits"
    epochs: int = 20
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 64

    def to_dict(self) -> dict:
        d = {"name": self.name, "architecture": self.architecture,
             "dataset": self.dataset, "epochs": self.epochs, "seed": self.seed,
             "learning_rate": self.learning_rate, "batch_size": self.batch_size}
        if isinstance(self.training, Standard):
            d["training"] = {"kind": "standard"}
        else:
            d["training"] = {"kind": "pgd_at", "at_epsilon": self.training.at_epsilon,
                             "at_steps": self.training.at_steps,
                             "at_step_size": self.training.at_step_size}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseRecipe":
        tr = d["training"]
        if tr["kind"] == "standard":
            training = Standard()
        elif tr["kind"] == "pgd_at":
            training = PGDAT(at_epsilon=tr["at_epsilon"], at_steps=tr["at_steps"],
                             at_step_size=tr.get("at_step_size"))
        else:
            raise ValueError(f"unknown training kind {tr['kind']!r}")
        return cls(name=d["name"], architecture=d["architecture"], training=training,
                   dataset=d.get("dataset", "digits"), epochs=d["epochs"],
                   seed=d["seed"], learning_rate=d.get("learning_rate", 1e-3),
                   batch_size=d.get("batch_size", 64))


def default_recipes() -> list:
    """Five diverse recipes: mixed architectures, mixed adversarial budgets,
    one standard model. Supports leave-one-out meta evaluation."""
    return [
        DefenseRecipe("at-cnn", "cnn:8-16", PGDAT(at_epsilon=0.15), epochs=30, seed=101),
        DefenseRecipe("at-mlp", "mlp:96", PGDAT(at_epsilon=0.15), epochs=30, seed=102),
        DefenseRecipe("at-wide", "cnn:16-32", PGDAT(at_epsilon=0.15), epochs=30, seed=103),
        DefenseRecipe("at-cnn-tight", "cnn:8-16", PGDAT(at_epsilon=0.1), epochs=30, seed=104),
        DefenseRecipe("std-cnn", "cnn:8-16", Standard(), epochs=15, seed=105),
    ]


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

def _pgd_batch(module: nn.Module, x: torch.Tensor, y: torch.Tensor,
               epsilon: float, steps: int, alpha: float, gen) -> torch.Tensor:
    """Inline Linf projected-sign attack against the live training model.

    Uses cross-entropy, a uniform random start and the last iterate, the
    classic adversarial-training inner loop. Gradients are taken w.r.t. the
    input only, so model parameter grads are untouched.
    """
    noise = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * epsilon
    adv = (x + noise).clamp(0, 1)
    for _ in range(steps):
        adv_req = adv.detach().requires_grad_(True)
        with torch.enable_grad():
            ce = nn.functional.cross_entropy(module(adv_req), y)
            grad = torch.autograd.grad(ce, adv_req)[0]
        adv = adv + alpha * grad.sign()
        adv = x + (adv - x).clamp(-epsilon, epsilon)
        adv = adv.clamp(0, 1)
    return adv.detach()


def _accuracy(module: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> float:
    module.eval()
    with torch.no_grad():
        preds = module(images).argmax(dim=-1)
    return 100.0 * (preds == labels).float().mean().item()


def _robust_accuracy_reference(f: Classifier, split: Split,
                               budget: AttackBudget, seed: int) -> float:
    from .attacks import SignGD, UniformRandom, run_attack_batch
    from .core import CE
    res = run_attack_batch(f, split.images, split.labels, budget, SignGD(),
                           UniformRandom(), CE(), seed=derive_seed(seed, "refeval"))
    return 100.0 * (1.0 - res.success.float().mean().item())


def _state_hash(state_dict: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state_dict):
        t = state_dict[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class DefenseCheckpoint:
    """A trained defense plus its provenance and reference metrics."""

    recipe: DefenseRecipe
    module: nn.Module
    clean_accuracy: float
    robust_accuracy: float
    reference_budget: AttackBudget
    content_hash: str

    def as_classifier(self) -> Classifier:
        return Classifier(self.module, name=self.recipe.name,
                          num_classes=NUM_CLASSES,
                          architecture=self.recipe.architecture,
                          recipe_tag=self.recipe.training.tag)

    def save(self, base_path: str) -> str:
        base = base_path[:-4] if base_path.endswith(".npz") else base_path
        os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
        arrays = {k: v.detach().cpu().numpy() for k, v in self.module.state_dict().items()}
        tmp = base + ".npz.tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, base + ".npz")
        meta = {
            "format": "advopt-defense-v1",
            "recipe": self.recipe.to_dict(),
            "clean_accuracy": self.clean_accuracy,
            "robust_accuracy": self.robust_accuracy,
            "reference_budget": {
                "norm": self.reference_budget.norm.value,
                "epsilon": self.reference_budget.epsilon,
                "step_size": self.reference_budget.step_size,
                "iterations": self.reference_budget.iterations,
            },
            "content_hash": self.content_hash,
        }
        with open(base + ".json.tmp", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        os.replace(base + ".json.tmp", base + ".json")
        return base + ".npz"


def load_defense(base_path: str) -> DefenseCheckpoint:
    """Load a checkpoint; refuses to load on content-hash mismatch."""
    base = base_path[:-4] if base_path.endswith(".npz") else base_path
    with open(base + ".json") as fh:
        meta = json.load(fh)
    recipe = DefenseRecipe.from_dict(meta["recipe"])
    module = build_model(recipe.architecture)
    with np.load(base + ".npz") as data:
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files}
    module.load_state_dict(state)
    module.eval()
    actual = _state_hash(module.state_dict())
    if actual != meta["content_hash"]:
        raise RuntimeError(f"defense checkpoint hash mismatch for {base}: "
                           f"expected {meta['content_hash'][:12]}, got {actual[:12]}")
    rb = meta["reference_budget"]
    budget = AttackBudget(norm=Norm(rb["norm"]), epsilon=rb["epsilon"],
                          step_size=rb["step_size"], iterations=rb["iterations"])
    return DefenseCheckpoint(recipe=recipe, module=module,
                             clean_accuracy=meta["clean_accuracy"],
                             robust_accuracy=meta["robust_accuracy"],
                             reference_budget=budget,
                             content_hash=meta["content_hash"])


def train_defense(recipe: DefenseRecipe, dataset: ImageDataset,
                  reference_budget: AttackBudget = DEFAULT_REFERENCE_BUDGET) -> DefenseCheckpoint:
    """Train one defense per its recipe and measure reference metrics."""
    torch.manual_seed(derive_seed(recipe.seed, "model-init"))
    module = build_model(recipe.architecture)
    opt = torch.optim.Adam(module.parameters(), lr=recipe.learning_rate)
    order_gen = torch.Generator().manual_seed(derive_seed(recipe.seed, "order"))
    attack_gen = torch.Generator().manual_seed(derive_seed(recipe.seed, "at-init"))
    images, labels = dataset.train.images, dataset.train.labels
    n = images.shape[0]

    last_epoch_loss = float("nan")
    for epoch in range(recipe.epochs):
        module.train()
        perm = torch.randperm(n, generator=order_gen)
        epoch_loss = 0.0
        for start in range(0, n, recipe.batch_size):
            idx = perm[start:start + recipe.batch_size]
            bx, by = images[idx], labels[idx]
            if isinstance(recipe.training, PGDAT):
                module.eval()
                bx = _pgd_batch(module, bx, by, recipe.training.at_epsilon,
                                recipe.training.at_steps, recipe.training.step,
                                attack_gen)
                module.train()
            opt.zero_grad()
            ce = nn.functional.cross_entropy(module(bx), by)
            ce.backward()
            opt.step()
            epoch_loss += float(ce.detach())
        if not np.isfinite(epoch_loss):
            raise RuntimeError(f"defense training diverged at epoch {epoch} "
                               f"(last finite epoch loss {last_epoch_loss:.4f})")
        last_epoch_loss = epoch_loss

    module.eval()
    clean = _accuracy(module, dataset.test.images, dataset.test.labels)
    ckpt = DefenseCheckpoint(recipe=recipe, module=module, clean_accuracy=clean,
                             robust_accuracy=0.0, reference_budget=reference_budget,
                             content_hash=_state_hash(module.state_dict()))
    ckpt.robust_accuracy = _robust_accuracy_reference(
        ckpt.as_classifier(), dataset.test, reference_budget, recipe.seed)
    log.info("trained defense %s: clean %.2f%%, reference robust %.2f%%",
             recipe.name, ckpt.clean_accuracy, ckpt.robust_accuracy)
    return ckpt


# ---------------------------------------------------------------------------
# Pools.
# ---------------------------------------------------------------------------

def build_pool(recipes, dataset: ImageDataset, cache_dir: str,
               reference_budget: AttackBudget = DEFAULT_REFERENCE_BUDGET,
               manifest_path: str = None):
    """Load or train every recipe; returns frozen classifiers.

    Checkpoints are cached under ``cache_dir`` by recipe name; a manifest
    listing the pool is written for later loading and audit.
    """
    if not recipes:
        raise ValueError("a pool needs at least one recipe")
    os.makedirs(cache_dir, exist_ok=True)
    classifiers, entries = [], []
    for recipe in recipes:
        base = os.path.join(cache_dir, recipe.name)
        if os.path.exists(base + ".npz"):
            ckpt = load_defense(base)
            if ckpt.recipe != recipe:
                raise RuntimeError(f"cached checkpoint {base} was built from a "
                                   f"different recipe; refusing to reuse")
        else:
            ckpt = train_defense(recipe, dataset, reference_budget)
            ckpt.save(base)
        classifiers.append(ckpt.as_classifier())
        entries.append({"name": recipe.name, "path": os.path.abspath(base + ".npz"),
                        "role": "pool"})
        log.info("pool member %s (%s, %s)", recipe.name, recipe.architecture,
                 recipe.training.tag)
    manifest_path = manifest_path or os.path.join(cache_dir, "pool.json")
    write_pool_manifest(entries, manifest_path)
    return classifiers


def write_pool_manifest(entries, path: str):
    payload = {"format": "advopt-pool-v1", "checkpoints": list(entries)}
    with open(path + ".tmp", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    os.replace(path + ".tmp", path)


def load_pool(manifest_path: str):
    """Classifiers for every checkpoint listed in a pool manifest."""
    with open(manifest_path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "advopt-pool-v1":
        raise ValueError(f"not a pool manifest: {manifest_path}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for entry in payload["checkpoints"]:
        path = entry["path"]
        if not os.path.isabs(path):
            path = os.path.join(root, path)
        out.append(load_defense(path).as_classifier())
    return out


def pool_diversity_issues(classifiers) -> list:
    """Configuration lint for meta-training pools: wants at least two
    distinct architectures and two distinct training kinds."""
    issues = []
    archs = {c.architecture for c in classifiers}
    kinds = {c.recipe_tag.split("(")[0] for c in classifiers}
    if len(archs) < 2:
        issues.append(f"pool has a single architecture tag: {sorted(archs)}")
    if len(kinds) < 2:
        issues.append(f"pool has a single training kind: {sorted(kinds)}")
    return issues

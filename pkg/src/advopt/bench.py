"""Evaluation harness: attack campaigns over (defense x attack) grids.

A campaign evaluates every configured attack against every pool defense on
one shared example subset. Seeding discipline: the master seed derives a
per-(defense, init-strategy, example, restart) seed via the documented hash
``derive_seed(master, defense, init_tag, example_index)`` (restarts fork one
more level inside the runner). The attack's identity enters only through its
init strategy tag, so attacks sharing an init strategy see identical starts
and per-example success bitmaps are validly paired.

Reports are line-delimited JSON with a versioned schema: one header record
followed by one record per grid cell.
"""

import hashlib
import json
import os
import time
from dataclasses import dataclass, asdict, field

import torch

from . import attacks as atk
from .core import (AttackBudget, Classifier, Norm, CE, CW, DLR, TargetedMargin,
                   derive_seed)
from .defense_zoo import load_dataset, load_pool
from .learned_opt import load_optimizer

__all__ = [
    "ConfigError", "AttackSpec", "CampaignConfig", "CellResult", "EvalReport",
    "CONFIG_DEFAULTS", "parse_rule", "parse_init", "parse_loss", "parse_budget",
    "run_campaign", "sweep", "CurveRecord", "write_curves", "read_curves",
    "plot_curves", "report",
]

SCHEMA_VERSION = 1

# Named defaults for config files; any omitted key takes the value below.
CONFIG_DEFAULTS = {
    "iterations": 20,           # attack steps T
    "epsilon": 0.15,            # Linf radius scaled to the 8x8 digits set
    "step_fraction": 0.25,      # step size alpha = step_fraction * epsilon
    "restarts": 1,
    "norm": "linf",
    "loss": "cw",
    "step_weight": 1.0,         # trajectory loss weight w_t
    "prior_weight": 0.1,        # prior penalty weight lambda_t
    "batch_size": 32,
    "trainer_learning_rate": 0.001,
    "max_iterations": 200,
    "beta": 0.0001,             # meta-train inner rate
    "gamma": 0.001,             # outer rate
    "mu": 1.0,                  # meta-test balance
    "meta_test_count": 1,
    "hidden_size": 20,          # recurrent width per layer
    "num_layers": 2,
}

MULTI_TARGETED = "mt"


class ConfigError(ValueError):
    """Invalid configuration (maps to CLI exit code 1)."""


# ---------------------------------------------------------------------------
# Config parsing.
# ---------------------------------------------------------------------------

def parse_budget(d: dict) -> AttackBudget:
    eps = float(d.get("epsilon", CONFIG_DEFAULTS["epsilon"]))
    step = d.get("step_size")
    if step is None:
        step = eps * float(d.get("step_fraction", CONFIG_DEFAULTS["step_fraction"]))
    step = tuple(step) if isinstance(step, (list, tuple)) else float(step)
    try:
        return AttackBudget(norm=Norm(d.get("norm", CONFIG_DEFAULTS["norm"])),
                            epsilon=eps, step_size=step,
                            iterations=int(d.get("iterations", CONFIG_DEFAULTS["iterations"])),
                            restarts=int(d.get("restarts", CONFIG_DEFAULTS["restarts"])))
    except ValueError as err:
        raise ConfigError(f"bad budget: {err}") from err


def parse_rule(d: dict):
    kind = d.get("kind")
    if kind == "sign":
        return atk.SignGD()
    if kind == "momentum":
        return atk.Momentum(decay=float(d.get("decay", 1.0)))
    if kind == "nesterov":
        return atk.Nesterov(decay=float(d.get("decay", 1.0)))
    if kind == "adam":
        return atk.AdamStep(beta1=float(d.get("beta1", 0.9)),
                            beta2=float(d.get("beta2", 0.999)),
                            eps_hat=float(d.get("eps_hat", 1e-8)))
    if kind == "learned":
        path = d.get("checkpoint")
        if not path:
            raise ConfigError("learned rule needs a 'checkpoint' path")
        params, _ = load_optimizer(path)
        return atk.Learned(params)
    raise ConfigError(f"unknown update rule {kind!r}")


def parse_init(d: dict):
    kind = d.get("kind", "clean")
    if kind == "clean":
        return atk.CleanStart()
    if kind == "uniform":
        return atk.UniformRandom()
    if kind == "odi":
        size = d.get("odi_step_size")
        return atk.ODI(odi_steps=int(d.get("odi_steps", 2)),
                       odi_step_size=None if size is None else float(size))
    raise ConfigError(f"unknown init strategy {kind!r}")


def parse_loss(name: str):
    if name == "ce":
        return CE()
    if name == "cw":
        return CW()
    if name == "dlr":
        return DLR()
    if name == MULTI_TARGETED:
        return MULTI_TARGETED
    if name.startswith("targeted:"):
        return TargetedMargin(int(name.split(":", 1)[1]))
    raise ConfigError(f"unknown loss {name!r}")


@dataclass(frozen=True)
class AttackSpec:
    """One attack grid entry: a named (rule, init, loss, budget) combo."""

    name: str
    rule: dict
    init: dict
    loss: str
    budget: dict

    def build(self):
        return (parse_rule(dict(self.rule)), parse_init(dict(self.init)),
                parse_loss(self.loss), parse_budget(dict(self.budget)))


@dataclass
class CampaignConfig:
    pool_manifest: str
    attacks: list
    dataset: str = "digits"
    split: str = "test"
    samples: int = 200
    seed: int = 0
    output_dir: str = "runs"
    batch_cap: int = 256

    def __post_init__(self):
        names = [a.name for a in self.attacks]
        if len(names) != len(set(names)):
            raise ConfigError("attack names must be unique")
        if not self.attacks:
            raise ConfigError("campaign needs at least one attack")
        if self.split not in ("test", "train"):
            raise ConfigError(f"unknown split {self.split!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = [asdict(a) for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        try:
            specs = [AttackSpec(**a) for a in d["attacks"]]
            return cls(pool_manifest=d["pool_manifest"], attacks=specs,
                       dataset=d.get("dataset", "digits"),
                       split=d.get("split", "test"),
                       samples=int(d.get("samples", 200)),
                       seed=int(d.get("seed", 0)),
                       output_dir=d.get("output_dir", "runs"),
                       batch_cap=int(d.get("batch_cap", 256)))
        except (KeyError, TypeError) as err:
            raise ConfigError(f"bad campaign config: {err}") from err

    @classmethod
    def from_json_file(cls, path: str) -> "CampaignConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read campaign config {path}: {err}") from err

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Reports.
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    defense: str
    attack: str
    robust_accuracy: float = None
    clean_accuracy: float = None
    mean_final_loss: float = None
    wall_seconds: float = 0.0
    seed: int = 0
    success_bitmap: list = field(default_factory=list)
    error: str = None


@dataclass
class EvalReport:
    schema_version: int
    config_hash: str
    master_seed: int
    dataset: str
    split: str
    sample_indices: list
    cells: list

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            header = {"record": "header", "schema_version": self.schema_version,
                      "config_hash": self.config_hash,
                      "master_seed": self.master_seed, "dataset": self.dataset,
                      "split": self.split, "sample_indices": self.sample_indices}
            fh.write(json.dumps(header) + "\n")
            for cell in self.cells:
                fh.write(json.dumps({"record": "cell", **asdict(cell)}) + "\n")
        return path

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        cells, header = [], None
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.pop("record") == "header":
                    header = rec
                else:
                    cells.append(CellResult(**rec))
        if header is None:
            raise ConfigError(f"no header record in {path}")
        return cls(schema_version=header["schema_version"],
                   config_hash=header["config_hash"],
                   master_seed=header["master_seed"], dataset=header["dataset"],
                   split=header["split"],
                   sample_indices=header["sample_indices"], cells=cells)

    def cell(self, defense: str, attack: str) -> CellResult:
        for c in self.cells:
            if c.defense == defense and c.attack == attack:
                return c
        raise KeyError((defense, attack))


# ---------------------------------------------------------------------------
# Campaign runner.
# ---------------------------------------------------------------------------

def _clean_accuracy(f: Classifier, images, labels) -> float:
    return 100.0 * (f.predict(images) == labels).float().mean().item()


def _cell_seeds(master: int, defense: str, init_tag: str, indices) -> list:
    return [derive_seed(master, defense, init_tag, int(i)) for i in indices]


def _run_cell(f: Classifier, images, labels, indices, spec: AttackSpec,
              master_seed: int, batch_cap: int):
    rule, init, kind, budget = spec.build()
    seeds = _cell_seeds(master_seed, f.name, init.tag, indices)
    bits, losses = [], []
    for start in range(0, images.shape[0], batch_cap):
        sl = slice(start, start + batch_cap)
        if kind == MULTI_TARGETED:
            x_adv, success = atk.multi_targeted_batch(
                f, images[sl], labels[sl], budget, rule, init,
                example_seeds=seeds[sl])
            final = atk._eval_iterate(f, CW(), x_adv, labels[sl])[0]
        else:
            agg, _ = atk.run_with_restarts_batch(
                f, images[sl], labels[sl], budget, rule, init, kind,
                example_seeds=seeds[sl])
            success, final = agg.success, agg.best_loss
        bits.extend(int(s) for s in success)
        losses.append(final)
    mean_loss = float(torch.cat(losses).mean())
    robust = 100.0 * (1.0 - sum(bits) / len(bits))
    return robust, mean_loss, bits


def run_campaign(cfg: CampaignConfig, pool=None, dataset=None) -> EvalReport:
    """Evaluate the attack grid; deterministic given (config, seed).

    A failing attack aborts only its own (defense, attack) cell; the error
    text is recorded and the campaign continues.
    """
    dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
    split = dataset.test if cfg.split == "test" else dataset.train
    if cfg.samples > len(split):
        raise ConfigError(f"samples={cfg.samples} exceeds split size {len(split)}")
    pool = pool if pool is not None else load_pool(cfg.pool_manifest)

    perm = torch.randperm(len(split),
                          generator=torch.Generator().manual_seed(
                              derive_seed(cfg.seed, "examples")))
    indices = sorted(perm[:cfg.samples].tolist())
    images, labels = split.images[indices], split.labels[indices]

    cells = []
    for f in pool:
        hash_before = f.param_hash()
        clean = _clean_accuracy(f, images, labels)
        for spec in cfg.attacks:
            cell_seed = derive_seed(cfg.seed, f.name, parse_init(dict(spec.init)).tag)
            t0 = time.monotonic()
            try:
                robust, mean_loss, bits = _run_cell(f, images, labels, indices,
                                                    spec, cfg.seed, cfg.batch_cap)
                cells.append(CellResult(defense=f.name, attack=spec.name,
                                        robust_accuracy=robust, clean_accuracy=clean,
                                        mean_final_loss=mean_loss,
                                        wall_seconds=time.monotonic() - t0,
                                        seed=cell_seed, success_bitmap=bits))
            except ConfigError:
                raise
            except Exception as err:  # error isolation: record, keep going
                cells.append(CellResult(defense=f.name, attack=spec.name,
                                        wall_seconds=time.monotonic() - t0,
                                        seed=cell_seed, error=f"{type(err).__name__}: {err}"))
        if f.param_hash() != hash_before:
            raise RuntimeError(f"defense {f.name} was mutated during the campaign")

    return EvalReport(schema_version=SCHEMA_VERSION, config_hash=cfg.config_hash(),
                      master_seed=cfg.seed, dataset=cfg.dataset, split=cfg.split,
                      sample_indices=list(indices), cells=cells)


# ---------------------------------------------------------------------------
# Sweeps.
# ---------------------------------------------------------------------------

@dataclass
class CurveRecord:
    """One curve emitted by a sweep: y values over x positions."""

    axis: str
    value: float
    defense: str
    attack: str
    xs: list
    ys: list
    seed: int = 0


def write_curves(records, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")
    return path


def read_curves(path: str):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(CurveRecord(**json.loads(line)))
    return out


def plot_curves(records, path: str, title: str = "") -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rec in records:
        label = f"{rec.attack or rec.defense} {rec.axis}={rec.value}"
        if rec.seed:
            label += f" s{rec.seed}"
        ax.plot(rec.xs, rec.ys, marker="o", markersize=2.5, label=label)
    ax.set_xlabel(records[0].axis if records else "x")
    ax.set_ylabel("robust accuracy (%)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _prefix_robust_curve(f, images, labels, indices, spec, master_seed, max_iter):
    """Best-iterate robust accuracy for every iteration prefix 0..max_iter,
    union over the configured restarts. Exact by construction."""
    rule, init, kind, budget = spec.build()
    if kind == MULTI_TARGETED:
        raise ConfigError("iteration sweep does not support the multi-target wrapper")
    long_budget = AttackBudget(norm=budget.norm, epsilon=budget.epsilon,
                               step_size=budget.step_size if not isinstance(budget.step_size, tuple)
                               else budget.step_size[0],
                               iterations=max_iter, restarts=1)
    seeds = _cell_seeds(master_seed, f.name, init.tag, indices)
    agg = None
    for r in range(budget.restarts):
        seeds_r = [derive_seed(s, "restart", r) for s in seeds]
        res = atk.run_attack_batch(f, images, labels, long_budget, rule, init,
                                   kind, example_seeds=seeds_r)
        pref = res.prefix_success()
        agg = pref if agg is None else (agg | pref)
    return [100.0 * (1.0 - agg[t].float().mean().item()) for t in range(max_iter + 1)]


def sweep(axis: str, values, campaign: CampaignConfig, training: dict = None,
          pool=None, dataset=None, out_dir: str = None):
    """Rerun evaluation or training along one axis, all else fixed.

    Axes: ``iterations`` and ``restarts`` are evaluation-only and reuse one
    long run per cell (prefix/union slicing, exact). ``lambda`` retrains the
    optimizer per prior weight and emits robust-accuracy-vs-iteration
    curves; ``train-size`` retrains per training-subset size and emits a
    final-accuracy curve. Returns the curve records and writes them (plus a
    plot) when ``out_dir`` is given.
    """
    dataset = dataset if dataset is not None else load_dataset(campaign.dataset)
    split = dataset.test if campaign.split == "test" else dataset.train
    pool = pool if pool is not None else load_pool(campaign.pool_manifest)
    perm = torch.randperm(len(split),
                          generator=torch.Generator().manual_seed(
                              derive_seed(campaign.seed, "examples")))
    indices = sorted(perm[:campaign.samples].tolist())
    images, labels = split.images[indices], split.labels[indices]

    records = []
    if axis == "iterations":
        max_iter = int(max(values))
        for f in pool:
            for spec in campaign.attacks:
                ys = _prefix_robust_curve(f, images, labels, indices, spec,
                                          campaign.seed, max_iter)
                records.append(CurveRecord(axis="iterations", value=max_iter,
                                           defense=f.name, attack=spec.name,
                                           xs=[int(v) for v in values],
                                           ys=[ys[int(v)] for v in values]))
    elif axis == "restarts":
        max_r = int(max(values))
        for f in pool:
            for spec in campaign.attacks:
                rule, init, kind, budget = spec.build()
                if kind == MULTI_TARGETED:
                    raise ConfigError("restart sweep does not support the multi-target wrapper")
                seeds = _cell_seeds(campaign.seed, f.name, init.tag, indices)
                biggest = AttackBudget(norm=budget.norm, epsilon=budget.epsilon,
                                       step_size=budget.step_size,
                                       iterations=budget.iterations, restarts=1)
                any_success = torch.zeros(len(indices), dtype=torch.bool)
                ys = []
                for r in range(max_r):
                    seeds_r = [derive_seed(s, "restart", r) for s in seeds]
                    res = atk.run_attack_batch(f, images, labels, biggest, rule,
                                               init, kind, example_seeds=seeds_r)
                    any_success |= res.success
                    if (r + 1) in values:
                        ys.append(100.0 * (1.0 - any_success.float().mean().item()))
                records.append(CurveRecord(axis="restarts", value=max_r,
                                           defense=f.name, attack=spec.name,
                                           xs=[int(v) for v in values], ys=ys))
    elif axis in ("lambda", "train-size"):
        records = _training_sweep(axis, values, campaign, training, pool,
                                  dataset, images, labels)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")

    if out_dir:
        write_curves(records, os.path.join(out_dir, f"sweep-{axis}.jsonl"))
        plot_curves(records, os.path.join(out_dir, f"sweep-{axis}.png"),
                    title=f"sweep over {axis}")
    return records


def _training_sweep(axis, values, campaign, training, pool, dataset,
                    ev_images, ev_labels):
    from .learned_opt import OptimizerParams
    from .training import BMAConfig, train_bma, evaluate_robust_accuracy

    if not training:
        raise ConfigError(f"axis {axis!r} needs a 'training' config section")
    by_name = {f.name: f for f in pool}
    name = training.get("defense")
    if name not in by_name:
        raise ConfigError(f"training defense {name!r} not in pool")
    f = by_name[name]
    budget = parse_budget(dict(training.get("budget", {})))
    seeds = training.get("seeds", [0])
    tr_images, tr_labels = dataset.train.images, dataset.train.labels

    def make_cfg(lam):
        return BMAConfig(
            prior_weights=(float(lam),) * budget.iterations,
            batch_size=int(training.get("batch_size", CONFIG_DEFAULTS["batch_size"])),
            trainer_learning_rate=float(training.get("trainer_learning_rate",
                                                     CONFIG_DEFAULTS["trainer_learning_rate"])),
            max_iterations=int(training.get("max_iterations",
                                            CONFIG_DEFAULTS["max_iterations"])),
            eval_every=int(training.get("eval_every", 10)),
            eval_samples=int(training.get("eval_samples", 200)))

    records = []
    if axis == "lambda":
        for seed in seeds:
            for lam in values:
                cfg = make_cfg(lam)
                params0 = OptimizerParams.initialize(derive_seed(seed, "init"))
                _, recs = train_bma(params0, f, (tr_images, tr_labels), budget,
                                    cfg, seed=seed, eval_data=(ev_images, ev_labels))
                pts = [(r.iteration, r.robust_accuracy) for r in recs
                       if r.robust_accuracy is not None]
                records.append(CurveRecord(axis="lambda", value=float(lam),
                                           defense=f.name, attack="learned",
                                           xs=[p[0] for p in pts],
                                           ys=[p[1] for p in pts], seed=seed))
    else:  # train-size
        for seed in seeds:
            xs, ys = [], []
            order = torch.randperm(tr_images.shape[0],
                                   generator=torch.Generator().manual_seed(
                                       derive_seed(seed, "subset")))
            for size in values:
                count = int(round(size * tr_images.shape[0])) if size <= 1 else int(size)
                keep = order[:count]
                cfg = make_cfg(training.get("prior_weight", CONFIG_DEFAULTS["prior_weight"]))
                cfg.eval_every = 0
                params0 = OptimizerParams.initialize(derive_seed(seed, "init"))
                trained, _ = train_bma(params0, f, (tr_images[keep], tr_labels[keep]),
                                       budget, cfg, seed=seed)
                acc = evaluate_robust_accuracy(trained, f, ev_images, ev_labels, budget)
                xs.append(count)
                ys.append(acc)
            records.append(CurveRecord(axis="train-size", value=0.0,
                                       defense=f.name, attack="learned",
                                       xs=xs, ys=ys, seed=seed))
    return records


# ---------------------------------------------------------------------------
# Report emission.
# ---------------------------------------------------------------------------

def _format_table(rep: EvalReport) -> str:
    defenses = sorted({c.defense for c in rep.cells})
    attack_order = []
    for c in rep.cells:
        if c.attack not in attack_order:
            attack_order.append(c.attack)
    head = ["defense", "clean"] + attack_order
    rows = []
    for d in defenses:
        cells = {c.attack: c for c in rep.cells if c.defense == d}
        clean = next((c.clean_accuracy for c in cells.values()
                      if c.clean_accuracy is not None), None)
        vals = {a: cells[a].robust_accuracy for a in attack_order if a in cells}
        ok = {a: v for a, v in vals.items() if v is not None}
        best = min(ok.values()) if ok else None
        row = [d, "-" if clean is None else f"{clean:.2f}"]
        for a in attack_order:
            v = vals.get(a)
            if v is None:
                row.append("err" if cells.get(a) and cells[a].error else "-")
            else:
                row.append(f"*{v:.2f}*" if v == best else f"{v:.2f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    header = (f"# robust accuracy (%) under best-iterate selection, schema v{rep.schema_version}\n"
              f"# dataset={rep.dataset} split={rep.split} samples={len(rep.sample_indices)} "
              f"seed={rep.master_seed} config={rep.config_hash[:12]}\n")
    return header + "\n".join(lines) + "\n"


def report(rep: EvalReport, fmt: str, out_dir: str) -> list:
    """Emit a report artifact; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "table-text":
        path = os.path.join(out_dir, "report.txt")
        with open(path, "w") as fh:
            fh.write(_format_table(rep))
        return [path]
    if fmt == "structured":
        return [rep.save(os.path.join(out_dir, "report.jsonl"))]
    if fmt == "plot":
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        defenses = sorted({c.defense for c in rep.cells})
        attack_order = []
        for c in rep.cells:
            if c.attack not in attack_order:
                attack_order.append(c.attack)
        fig, ax = plt.subplots(figsize=(8, 4.5))
        width = 0.8 / max(len(attack_order), 1)
        for j, a in enumerate(attack_order):
            xs, ys = [], []
            for i, d in enumerate(defenses):
                try:
                    cell = rep.cell(d, a)
                except KeyError:
                    continue
                if cell.robust_accuracy is not None:
                    xs.append(i + j * width)
                    ys.append(cell.robust_accuracy)
            ax.bar(xs, ys, width=width, label=a)
        ax.set_xticks([i + 0.4 for i in range(len(defenses))])
        ax.set_xticklabels(defenses, rotation=20, fontsize=8)
        ax.set_ylabel("robust accuracy (%)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(out_dir, "report.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return [path]
    raise ConfigError(f"unknown report format {fmt!r}")

"""Coordinate-wise recurrent attack optimizer.

A two-layer LSTM cell of hidden width 20 is shared across every input
coordinate: each coordinate's scalar gradient is a separate row through the
cell, so the parameter count is independent of the input dimensionality. A
final affine head plus tanh maps the top hidden vector to a per-coordinate
update direction in (-1, 1).

Parameters are kept in a plain name->tensor mapping and the forward pass is
purely functional, which lets training code build shifted parameter sets
(phi + beta * grad) that stay connected to the autograd graph.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .core import (AttackBudget, AttackState, NonFiniteGradientError, project,
                   project_straight_through)

__all__ = [
    "OptimizerParams",
    "RecurrentState",
    "rnn_step",
    "learned_attack_step",
    "save_optimizer",
    "load_optimizer",
]

HIDDEN_SIZE = 20
NUM_LAYERS = 2

# Input feature layouts for the per-coordinate cell. "grad_sign" feeds the
# raw gradient plus its sign (stabilizes early training when gradient scales
# vary over orders of magnitude); "grad" is the raw-only variant kept
# switchable for ablations.
INPUT_MODES = {"grad_sign": 2, "grad": 1}


@dataclass
class RecurrentState:
    """Per-coordinate hidden/cell tensors for each layer, shape (N, hidden).

    Zero-initialized at trajectory start and never shared between
    trajectories.
    """

    h: tuple
    c: tuple

    @classmethod
    def zeros(cls, n_coords: int, hidden_size: int = HIDDEN_SIZE,
              num_layers: int = NUM_LAYERS, dtype=torch.float32, device=None):
        mk = lambda: torch.zeros(n_coords, hidden_size, dtype=dtype, device=device)
        return cls(h=tuple(mk() for _ in range(num_layers)),
                   c=tuple(mk() for _ in range(num_layers)))

    @property
    def n_coords(self) -> int:
        return self.h[0].shape[0]

    def detach(self):
        return RecurrentState(h=tuple(t.detach() for t in self.h),
                              c=tuple(t.detach() for t in self.c))


class OptimizerParams:
    """Trainable parameters of the coordinate-wise recurrent optimizer.

    Tensor names: ``l{i}.w_ih``, ``l{i}.w_hh``, ``l{i}.b_ih``, ``l{i}.b_hh``
    per layer, plus ``head.w`` and ``head.b``. The output head is
    zero-initialized so a fresh optimizer produces g = tanh(0) = 0 and the
    learned attack is a no-op until training moves it.
    """

    def __init__(self, tensors: dict, hidden_size: int = HIDDEN_SIZE,
                 num_layers: int = NUM_LAYERS, input_mode: str = "grad_sign"):
        if input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input_mode {input_mode!r}")
        self.tensors = dict(tensors)
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.input_mode = input_mode
        for t in self.tensors.values():
            if not torch.isfinite(t).all():
                raise ValueError("optimizer parameters must be finite")

    # -- construction ------------------------------------------------------

    @classmethod
    def initialize(cls, seed: int = 0, hidden_size: int = HIDDEN_SIZE,
                   num_layers: int = NUM_LAYERS, input_mode: str = "grad_sign",
                   dtype=torch.float32):
        if input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input_mode {input_mode!r}")
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(hidden_size)
        in_ch = INPUT_MODES[input_mode]
        tensors = {}
        for i in range(num_layers):
            fan_in = in_ch if i == 0 else hidden_size
            uni = lambda *shape: (torch.rand(*shape, generator=gen, dtype=dtype) * 2 - 1) * bound
            tensors[f"l{i}.w_ih"] = uni(4 * hidden_size, fan_in)
            tensors[f"l{i}.w_hh"] = uni(4 * hidden_size, hidden_size)
            tensors[f"l{i}.b_ih"] = uni(4 * hidden_size)
            tensors[f"l{i}.b_hh"] = uni(4 * hidden_size)
        tensors["head.w"] = torch.zeros(1, hidden_size, dtype=dtype)
        tensors["head.b"] = torch.zeros(1, dtype=dtype)
        return cls(tensors, hidden_size, num_layers, input_mode)

    # -- metadata ----------------------------------------------------------

    @property
    def input_channels(self) -> int:
        return INPUT_MODES[self.input_mode]

    @property
    def architecture(self) -> str:
        return (f"coordlstm:layers={self.num_layers},hidden={self.hidden_size},"
                f"input={self.input_mode}")

    @property
    def names(self):
        order = []
        for i in range(self.num_layers):
            order += [f"l{i}.w_ih", f"l{i}.w_hh", f"l{i}.b_ih", f"l{i}.b_hh"]
        order += ["head.w", "head.b"]
        return order

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    @property
    def dtype(self):
        return self.tensors["head.w"].dtype

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.names:
            t = self.tensors[name].detach().cpu().contiguous()
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    # -- functional plumbing ------------------------------------------------

    def clone(self):
        return OptimizerParams({k: v.detach().clone() for k, v in self.tensors.items()},
                               self.hidden_size, self.num_layers, self.input_mode)

    def requires_grad_(self, flag: bool = True):
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def to(self, dtype):
        return OptimizerParams({k: v.detach().to(dtype) for k, v in self.tensors.items()},
                               self.hidden_size, self.num_layers, self.input_mode)

    def map_tensors(self, fn):
        """New params with ``fn(name, tensor)`` applied; keeps autograd graph."""
        return OptimizerParams({k: fn(k, v) for k, v in self.tensors.items()},
                               self.hidden_size, self.num_layers, self.input_mode)

    def flat(self) -> torch.Tensor:
        """All parameters concatenated into one vector (fixed name order)."""
        return torch.cat([self.tensors[n].reshape(-1) for n in self.names])

    def with_flat(self, vec: torch.Tensor):
        """Inverse of :meth:`flat`: rebuild a params object from a vector."""
        out, offset = {}, 0
        for n in self.names:
            shape = self.tensors[n].shape
            k = self.tensors[n].numel()
            out[n] = vec[offset:offset + k].reshape(shape)
            offset += k
        if offset != vec.numel():
            raise ValueError("flat vector length mismatch")
        return OptimizerParams(out, self.hidden_size, self.num_layers, self.input_mode)

    def equal(self, other) -> bool:
        """Bit-exact equality of all parameter tensors."""
        return (self.names == other.names
                and all(torch.equal(self.tensors[n], other.tensors[n]) for n in self.names))


def _cell(x, h, c, w_ih, w_hh, b_ih, b_hh):
    # standard gated recurrent cell, gate order (input, forget, cell, output)
    gates = x @ w_ih.T + b_ih + h @ w_hh.T + b_hh
    i, f, g, o = gates.chunk(4, dim=1)
    c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_next = torch.sigmoid(o) * torch.tanh(c_next)
    return h_next, c_next


def rnn_step(params: OptimizerParams, grad: torch.Tensor,
             state: RecurrentState | None = None):
    """One recurrent update: per-coordinate gradients -> directions in (-1, 1).

    ``grad`` may have any shape; it is flattened to one row per coordinate,
    fed through the shared cell, and the output is reshaped back. Returns
    ``(g, next_state)``. Differentiable end-to-end w.r.t. the parameters.
    """
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError("non-finite gradient fed to recurrent optimizer")
    v = grad.reshape(-1, 1).to(params.dtype)
    n = v.shape[0]
    if state is None:
        state = RecurrentState.zeros(n, params.hidden_size, params.num_layers,
                                     dtype=params.dtype, device=v.device)
    if state.n_coords != n:
        raise ValueError(f"state holds {state.n_coords} coordinates, gradient has {n}")

    x = torch.cat([v, torch.sign(v)], dim=1) if params.input_mode == "grad_sign" else v
    hs, cs = [], []
    p = params.tensors
    for i in range(params.num_layers):
        h, c = _cell(x, state.h[i], state.c[i],
                     p[f"l{i}.w_ih"], p[f"l{i}.w_hh"], p[f"l{i}.b_ih"], p[f"l{i}.b_hh"])
        hs.append(h)
        cs.append(c)
        x = h
    out = x @ p["head.w"].T + p["head.b"]
    g = torch.tanh(out).reshape(grad.shape)
    return g, RecurrentState(h=tuple(hs), c=tuple(cs))


def learned_attack_step(params: OptimizerParams, state: AttackState,
                        grad: torch.Tensor, budget: AttackBudget,
                        batched: bool = False,
                        straight_through: bool = False) -> AttackState:
    """Advance one trajectory step with the learned update direction.

    ``straight_through=True`` keeps the projection exact in the forward pass
    but routes its gradient as identity; evaluation uses the true projection.
    """
    g, hidden = rnn_step(params, grad, state.hidden)
    alpha = budget.step_at(state.step_index)
    proj = project_straight_through if straight_through else project
    x_next = proj(state.x_adv + alpha * g.to(state.x_adv.dtype), state.origin,
                  budget, batched=batched)
    return AttackState(x_adv=x_next, origin=state.origin,
                       step_index=state.step_index + 1, hidden=hidden,
                       acc=state.acc)


# ---------------------------------------------------------------------------
# Checkpoint container: <base>.npz with raw parameter arrays plus a .json
# metadata sidecar. Round-trips are bit-exact.
# ---------------------------------------------------------------------------

def _strip_npz(path: str) -> str:
    return path[:-4] if path.endswith(".npz") else path


def save_optimizer(params: OptimizerParams, path: str,
                   training_config_hash: str = "", extra_meta: dict | None = None) -> str:
    """Persist parameters plus a metadata record. Returns the .npz path."""
    base = _strip_npz(path)
    os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
    arrays = {name: params.tensors[name].detach().cpu().numpy() for name in params.names}
    meta = {
        "format": "advopt-optimizer-v1",
        "architecture": params.architecture,
        "hidden_size": params.hidden_size,
        "num_layers": params.num_layers,
        "input_mode": params.input_mode,
        "dtype": str(params.dtype).replace("torch.", ""),
        "param_sha256": params.param_hash(),
        "version_tag": params.param_hash()[:12],
        "training_config_hash": training_config_hash,
    }
    if extra_meta:
        meta.update(extra_meta)
    tmp = base + ".npz.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, base + ".npz")
    with open(base + ".json.tmp", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    os.replace(base + ".json.tmp", base + ".json")
    return base + ".npz"


def load_optimizer(path: str):
    """Load a checkpoint; returns ``(params, metadata)``.

    Refuses to load when the stored parameter hash does not match the
    arrays on disk.
    """
    base = _strip_npz(path)
    with open(base + ".json") as fh:
        meta = json.load(fh)
    with np.load(base + ".npz") as data:
        tensors = {name: torch.from_numpy(np.array(data[name])) for name in data.files}
    params = OptimizerParams(tensors, hidden_size=meta["hidden_size"],
                             num_layers=meta["num_layers"],
                             input_mode=meta["input_mode"])
    if params.param_hash() != meta["param_sha256"]:
        raise RuntimeError(f"optimizer checkpoint hash mismatch for {base}")
    return params, meta

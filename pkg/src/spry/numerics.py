"""Parameter storage, reverse-mode gradients, Adam and checkpoint files.

Tensors are float64 torch tensors; torch autograd supplies reverse mode.
A *graph* is any callable ``graph(params, inputs)`` returning either a
scalar loss tensor or a mapping of named stage outputs that includes
``"loss"``. Stage names are what :class:`TrainingDivergence` reports.
"""
from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, TrainingDivergence

DTYPE = torch.float64
CKPT_MAGIC = b"SPRYCKPT"
CKPT_VERSION = 1


class ParamStore:
    """Named float64 parameters with trainable flags and Adam state."""

    def __init__(self):
        self._params = {}
        self._trainable = {}
        self.m = {}
        self.v = {}
        self.steps = {}

    def add(self, name, value, trainable=True):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(value, dtype=np.float64)).clone()
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        self.m[name] = torch.zeros_like(t)
        self.v[name] = torch.zeros_like(t)
        self.steps[name] = 0
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def is_trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [n for n in self._params if self._trainable[n]]

    def set_trainable(self, prefix, flag):
        """Set the flag of every parameter whose name starts with ``prefix``."""
        hit = self.names(prefix)
        if not hit:
            raise KeyError(f"no parameters match prefix {prefix!r}")
        for n in hit:
            self._trainable[n] = bool(flag)

    def leaves(self):
        """Fresh autograd leaves: trainable entries require grad, frozen do not."""
        return {n: p.detach().requires_grad_(self._trainable[n]) for n, p in self._params.items()}

    def values(self):
        return {n: p.detach() for n, p in self._params.items()}

    def num_values(self, prefix=""):
        return sum(self._params[n].numel() for n in self.names(prefix))

    def copy(self):
        out = ParamStore()
        for n, p in self._params.items():
            out._params[n] = p.clone()
            out._trainable[n] = self._trainable[n]
            out.m[n] = self.m[n].clone()
            out.v[n] = self.v[n].clone()
            out.steps[n] = self.steps[n]
        return out

    def identical_to(self, other, prefix="", with_state=True):
        """Bit-level equality of parameters (and optionally optimizer state)."""
        mine, theirs = self.names(prefix), other.names(prefix)
        if mine != theirs:
            return False
        for n in mine:
            if not torch.equal(self._params[n], other._params[n]):
                return False
            if with_state and (self.steps[n] != other.steps[n] or not torch.equal(self.m[n], other.m[n])
                               or not torch.equal(self.v[n], other.v[n])):
                return False
        return True


def _stage_items(outputs):
    if isinstance(outputs, Mapping):
        if "loss" not in outputs:
            raise ValueError("graph output mapping must contain 'loss'")
        return list(outputs.items()), outputs["loss"]
    return [("loss", outputs)], outputs


def check_finite(outputs):
    """Raise :class:`TrainingDivergence` naming the first non-finite stage."""
    items, _ = _stage_items(outputs)
    for name, value in items:
        if torch.is_tensor(value) and not bool(torch.isfinite(value.detach()).all()):
            raise TrainingDivergence(name)


def forward_backward(graph, inputs, params):
    """Evaluate ``graph`` and differentiate its loss w.r.t. trainable params.

    Returns (outputs, grads) where grads maps each trainable name to a
    gradient tensor; frozen parameters never appear.
    """
    leaves = params.leaves()
    outputs = graph(leaves, inputs)
    check_finite(outputs)
    _, loss = _stage_items(outputs)
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = params.trainable_names()
    if not names:
        return outputs, {}
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    result = {}
    for n, g in zip(names, grads):
        result[n] = torch.zeros_like(leaves[n]) if g is None else g.detach()
    return outputs, result


def _loss_value(graph, params_values, inputs):
    with torch.no_grad():
        _, loss = _stage_items(graph(params_values, inputs))
        return float(loss)


# central-difference stencils: (offset in epsilons, weight)
_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)),
}


def gradient_check(graph, params, epsilon=1e-5, inputs=None, max_entries=64, seed=0, order=2):
    """Max relative error between autograd and central differences.

    Up to ``max_entries`` scalar entries are drawn (seeded) from the
    trainable parameters; relative error is
    |analytic - numeric| / max(1e-8, |numeric|). ``order`` selects the
    2-point or 4-point central stencil; the 4-point one tolerates a larger
    epsilon, which keeps float64 roundoff below 1e-12 for O(1) losses.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    names = params.trainable_names()
    if not names:
        return 0.0
    _, grads = forward_backward(graph, inputs, params)
    entries = [(n, i) for n in names for i in range(params[n].numel())]
    rng = np.random.default_rng(seed)
    if len(entries) > max_entries:
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]
    values = params.values()
    worst = 0.0
    for name, idx in entries:
        flat = values[name].view(-1)
        orig = flat[idx].item()
        numeric = 0.0
        for step, coeff in _STENCILS[order]:
            flat[idx] = orig + step * epsilon
            numeric += coeff * _loss_value(graph, values, inputs)
        flat[idx] = orig
        numeric /= epsilon
        analytic = grads[name].reshape(-1)[idx].item()
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam, in place on trainable parameters only."""
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if tuple(g.shape) != tuple(params[name].shape):
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match "
                             f"parameter {name!r} shape {tuple(params[name].shape)}")
    with torch.no_grad():
        for name in params.trainable_names():
            g = grads.get(name)
            if g is None:
                continue
            g = g.to(DTYPE)
            params.steps[name] += 1
            step = params.steps[name]
            m = params.m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = params.v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / (1.0 - beta1 ** step)
            v_hat = v / (1.0 - beta2 ** step)
            params[name].sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params


# -- checkpoint files -------------------------------------------------------

def _write_record(fh, name, array):
    a = np.asarray(array, dtype="<f8", order="C")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", a.ndim))
    for d in a.shape:
        fh.write(struct.pack("<I", d))
    fh.write(a.tobytes())


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return buf


def _read_record(fh, path):
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
    name = _read_exact(fh, nlen, path).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    values = np.frombuffer(_read_exact(fh, 8 * count, path), dtype="<f8").reshape(dims)
    return name, values.astype(np.float64)


def save_checkpoint(path, params, meta=None):
    """Write parameters, then optimizer state (and ``meta/*`` scalars).

    Each section is a u32 record count followed by records of the form
    (u32 name length, name, u32 rank, u32 dims, f64 LE values).
    """
    meta = dict(meta or {})
    state = []
    for n in params:
        state.append((f"adam.m/{n}", params.m[n].numpy()))
        state.append((f"adam.v/{n}", params.v[n].numpy()))
        state.append((f"adam.step/{n}", np.float64(params.steps[n])))
        state.append((f"trainable/{n}", np.float64(params.is_trainable(n))))
    for k, value in meta.items():
        state.append((f"meta/{k}", np.asarray(value, dtype=np.float64)))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for n in params:
            _write_record(fh, n, params[n].numpy())
        fh.write(struct.pack("<I", len(state)))
        for n, a in state:
            _write_record(fh, n, a)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (ParamStore, meta dict)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        store = ParamStore()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        for _ in range(count):
            name, values = _read_record(fh, path)
            store.add(name, values)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        meta = {}
        for _ in range(count):
            name, values = _read_record(fh, path)
            kind, _, target = name.partition("/")
            if kind == "meta":
                meta[target] = values
                continue
            if target not in store:
                raise CheckpointError(f"{path}: state record for unknown parameter {target!r}")
            if kind == "adam.m":
                store.m[target] = torch.from_numpy(values.copy())
            elif kind == "adam.v":
                store.v[target] = torch.from_numpy(values.copy())
            elif kind == "adam.step":
                store.steps[target] = int(values)
            elif kind == "trainable":
                store._trainable[target] = bool(values)
            else:
                raise CheckpointError(f"{path}: unknown state record {name!r}")
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return store, meta

"""Named parameter collections, He initialisation, and BN bookkeeping."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .core import Tensor
from .nn import BatchNormState
from .rng import RngStream


def he_init(shape, fan_in: int, rng: RngStream) -> Tensor:
    """Weights ~ N(0, 2 / fan_in), marked trainable."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return Tensor(rng.normal(shape, math.sqrt(2.0 / fan_in)), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


class ModelParams:
    """Ordered name -> Tensor map of trainable parameters plus BN layers.

    Batch-norm layers are registered by prefix; their gamma/beta appear among
    the trainable tensors as ``<prefix>.gamma`` / ``<prefix>.beta`` and their
    running statistics are exported as buffers ``<prefix>.running_mean`` /
    ``<prefix>.running_var``.
    """

    def __init__(self):
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormState]" = OrderedDict()

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.name = name
        self.tensors[name] = tensor
        return tensor

    def add_bn(self, prefix: str, channels: int) -> BatchNormState:
        state = BatchNormState.create(channels)
        self.add(prefix + ".gamma", state.gamma)
        self.add(prefix + ".beta", state.beta)
        self.bn[prefix] = state
        return state

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size() for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for prefix, s in self.bn.items():
            out[prefix + ".running_mean"] = s.running_mean
            out[prefix + ".running_var"] = s.running_var
        return out

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        """Copies of every parameter and buffer whose name starts with ``prefix``."""
        out = OrderedDict()
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                out[name] = t.data.copy()
        for name, arr in self.buffers().items():
            if name.startswith(prefix):
                out[name] = arr.copy()
        return out

    def load_state_dict(self, state, prefix: str = "", strict: bool = True) -> list[str]:
        """Copy matching entries in place; returns the names that were loaded.

        Everything is validated before anything is written, so a failed load
        leaves the parameters untouched.
        """
        targets = dict(self.tensors.items())
        buffers = self.buffers()
        selected = [k for k in state if k.startswith(prefix)]
        if strict and prefix and not selected:
            raise KeyError(f"no entries with prefix {prefix!r}")
        for k in selected:
            dest = targets[k].data if k in targets else buffers.get(k)
            if dest is None:
                if strict:
                    raise KeyError(f"unexpected entry {k!r}")
                continue
            if dest.shape != np.shape(state[k]):
                raise ValueError(f"shape mismatch for {k!r}: {np.shape(state[k])} vs {dest.shape}")
        if strict:
            wanted = [k for k in list(targets) + list(buffers) if k.startswith(prefix)]
            missing = [k for k in wanted if k not in state]
            if missing:
                raise KeyError(f"missing entries: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        loaded = []
        for k in selected:
            if k in targets:
                targets[k].data[...] = state[k]
            elif k in buffers:
                buffers[k][...] = state[k]
            else:
                continue
            loaded.append(k)
        return loaded

    def clone(self, requires_grad: bool = True) -> "ModelParams":
        new = ModelParams()
        for name, t in self.tensors.items():
            new.tensors[name] = Tensor(t.data.copy(), requires_grad=requires_grad, name=name)
        for prefix, s in self.bn.items():
            new.bn[prefix] = BatchNormState(
                gamma=new.tensors[prefix + ".gamma"],
                beta=new.tensors[prefix + ".beta"],
                running_mean=s.running_mean.copy(),
                running_var=s.running_var.copy(),
                momentum=s.momentum,
                eps=s.eps,
            )
        return new

    def subset(self, prefix: str) -> "ModelParams":
        """View (shared tensors) restricted to names under ``prefix``."""
        new = ModelParams()
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                new.tensors[name] = t
        for p, s in self.bn.items():
            if p.startswith(prefix):
                new.bn[p] = s
        return new

    def merge(self, other: "ModelParams") -> "ModelParams":
        for name, t in other.tensors.items():
            self.add(name, t)
        self.bn.update(other.bn)
        return self

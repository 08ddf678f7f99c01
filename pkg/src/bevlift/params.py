"""Named parameters with freeze semantics, grouped in a store."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Parameter:
    __slots__ = ("tensor", "name", "frozen")

    def __init__(self, data, name, frozen=False):
        self.tensor = Tensor(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def freeze(self):
        self.frozen = True
        self.tensor.requires_grad = False
        self.tensor.grad = None

    def unfreeze(self):
        self.frozen = False
        self.tensor.requires_grad = True

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


class ParameterStore:
    """Flat name -> Parameter mapping with unique hierarchical names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name, data, frozen=False):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(data, name, frozen=frozen)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def matching(self, patterns):
        """Parameters whose name starts with any of the given prefixes."""
        out = []
        for p in self._params.values():
            if any(p.name.startswith(pat) for pat in patterns):
                out.append(p)
        return out

    def trainable(self):
        return [p for p in self._params.values() if not p.frozen]

    def frozen(self):
        return [p for p in self._params.values() if p.frozen]

    def num_trainable(self):
        return sum(p.data.size for p in self.trainable())

    def freeze_all(self):
        for p in self._params.values():
            p.freeze()

    def apply_plan(self, trainable_patterns, frozen_patterns):
        """Set freeze flags from name-prefix patterns; every param must be covered
        by exactly one side."""
        for p in self._params.values():
            t = any(p.name.startswith(pat) for pat in trainable_patterns)
            f = any(p.name.startswith(pat) for pat in frozen_patterns)
            if t and f:
                raise ValueError(f"{p.name} matches both trainable and frozen patterns")
            if not t and not f:
                raise ValueError(f"{p.name} not covered by the stage plan")
            if t:
                p.unfreeze()
            else:
                p.freeze()

    def zero_grads(self):
        for p in self._params.values():
            p.tensor.grad = None

    def state_arrays(self):
        return {name: p.data for name, p in self._params.items()}

    def load_arrays(self, arrays, frozen_flags=None):
        for name, arr in arrays.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter in checkpoint: {name}")
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
            p.tensor.data = np.ascontiguousarray(arr, dtype=np.float32)
            if frozen_flags is not None and name in frozen_flags:
                if frozen_flags[name]:
                    p.freeze()
                else:
                    p.unfreeze()

"""Low-rank additive visual prompts.

A full prompt is a (C,H,W) tensor added to the aligned feature map. The
low-rank variant stores three factor matrices A (R,C), B (R,H), D (R,W) and
materializes P[c,h,w] = sum_r A[r,c] * B[r,h] * D[r,w], dropping the trainable
count from C*H*W to R*(C+H+W).
"""

from __future__ import annotations

import warnings

import numpy as np

from .blocks import derive_rng
from .tensor import Tensor, _node


class PromptFactors:
    """Rank-R factor triple for one agent type, registered in a store under
    lift.<type-id>.{A,B,D}."""

    def __init__(self, store, type_id, c, h, w, rank, init_std=0.02, seed=0, frozen=False):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if rank > min(c, h, w):
            warnings.warn(f"rank {rank} exceeds min(C,H,W)={min(c, h, w)}")
        self.type_id = type_id
        self.rank = rank
        self.shape = (c, h, w)
        rng = derive_rng(seed, "lift", type_id, rank)
        self.A = store.add(f"lift.{type_id}.A",
                           (rng.standard_normal((rank, c)) * init_std).astype(np.float32),
                           frozen=frozen)
        self.B = store.add(f"lift.{type_id}.B",
                           (rng.standard_normal((rank, h)) * init_std).astype(np.float32),
                           frozen=frozen)
        self.D = store.add(f"lift.{type_id}.D",
                           (rng.standard_normal((rank, w)) * init_std).astype(np.float32),
                           frozen=frozen)

    def param_count(self):
        return self.rank * sum(self.shape)

    def materialize(self):
        return materialize_factors(self.A.tensor, self.B.tensor, self.D.tensor)

    def set_factors(self, a, b, d):
        """Directly assign factor values (e.g. for exactness tests)."""
        self.A.tensor.data = np.ascontiguousarray(a, dtype=np.float32)
        self.B.tensor.data = np.ascontiguousarray(b, dtype=np.float32)
        self.D.tensor.data = np.ascontiguousarray(d, dtype=np.float32)


class FullPrompt:
    """Dense (C,H,W) prompt; the baseline the factorization is measured against."""

    def __init__(self, store, type_id, c, h, w, init_std=0.02, seed=0, frozen=False):
        rng = derive_rng(seed, "lift-full", type_id)
        self.type_id = type_id
        self.shape = (c, h, w)
        self.P = store.add(f"lift.{type_id}.P",
                           (rng.standard_normal((c, h, w)) * init_std).astype(np.float32),
                           frozen=frozen)

    def param_count(self):
        c, h, w = self.shape
        return c * h * w

    def materialize(self):
        return self.P.tensor


def materialize_factors(a, b, d):
    """einsum('rc,rh,rw->chw') with gradients to all three factors."""
    av, bv, dv = a.data, b.data, d.data
    p = np.einsum("rc,rh,rw->chw", av, bv, dv, optimize=True).astype(av.dtype)
    out = _node(p, (a, b, d))

    def bw(g):
        a._accum(np.einsum("chw,rh,rw->rc", g, bv, dv, optimize=True).astype(av.dtype))
        b._accum(np.einsum("chw,rc,rw->rh", g, av, dv, optimize=True).astype(av.dtype))
        d._accum(np.einsum("chw,rc,rh->rw", g, av, bv, optimize=True).astype(av.dtype))
    out._backward = bw
    return out


def apply_prompt(f_aligned, prompt):
    """F'' = F' + P. Accepts PromptFactors, FullPrompt, or a raw Tensor."""
    p = prompt.materialize() if hasattr(prompt, "materialize") else prompt
    if p.data.shape != f_aligned.data.shape:
        raise ValueError(
            f"prompt shape {p.data.shape} does not match feature {f_aligned.data.shape}")
    return f_aligned + p


def prompt_param_count(c, h, w, rank, low_rank=True):
    if min(c, h, w, rank) < 1:
        raise ValueError("all dims must be positive")
    return rank * (c + h + w) if low_rank else c * h * w

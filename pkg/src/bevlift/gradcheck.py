"""Central finite-difference gradient checking.

The analytic gradient is taken from the production float32 path. The numeric
side re-evaluates the same function in float64 (see tensor.default_dtype) so
the central difference is not dominated by f32 rounding of the loss value.
"""

import numpy as np

from .tensor import Tensor, default_dtype


def grad_check(f, xs, eps=1e-3):
    """Max relative error between analytic and central-difference gradients.

    f: callable taking the Tensor list and returning a scalar Tensor; must be
    deterministic. xs: list of Tensors (requires_grad set by the caller).
    Returns max over elements of |analytic-numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    xs = list(xs)
    for x in xs:
        x.zero_grad()
    loss = f(xs)
    loss.backward()
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs]

    worst = 0.0
    with default_dtype(np.float64):
        xs64 = [Tensor(x.data.astype(np.float64), requires_grad=x.requires_grad) for x in xs]
        for xi, x in enumerate(xs64):
            flat = x.data.reshape(-1)
            num = np.zeros(flat.size, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(xs64).item()
                flat[i] = orig - eps
                fm = f(xs64).item()
                flat[i] = orig
                num[i] = (fp - fm) / (2 * eps)
            a = analytic[xi].reshape(-1).astype(np.float64)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
            err = np.abs(a - num) / denom
            # below f32 resolution neither side carries information
            err[np.maximum(np.abs(a), np.abs(num)) < 1e-6] = 0.0
            worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def rand_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.standard_normal(shape).astype(np.float32) * scale,
                  requires_grad=requires_grad)

# -- standard check suites -------------------------------------------------

def _op_cases(seed):
    """(name, builder) pairs covering every differentiable op.

    Each builder returns (f, xs) for grad_check. Losses reduce with plain
    sums/means (central differences are exact for the reduction itself).
    """
    from . import tensor as T
    rng = np.random.default_rng(seed)

    def r(shape, scale=1.0):
        return rand_tensor(rng, shape, scale=scale)

    cases = []

    def case(name):
        def deco(fn):
            cases.append((name, fn))
            return fn
        return deco

    @case("add")
    def _(): return (lambda xs: (xs[0] + xs[1]).sum(), [r((3, 4)), r((3, 4))])

    @case("sub")
    def _(): return (lambda xs: (xs[0] - xs[1]).mean(), [r((3, 4)), r((3, 4))])

    @case("mul")
    def _(): return (lambda xs: (xs[0] * xs[1]).sum(), [r((3, 4)), r((3, 4))])

    @case("neg")
    def _(): return (lambda xs: (-xs[0]).sum(), [r((5,))])

    @case("scale")
    def _(): return (lambda xs: xs[0].scale(2.5).sum(), [r((4, 4))])

    @case("add_const")
    def _(): return (lambda xs: xs[0].add_const(1.25).mean(), [r((4, 4))])

    @case("pow_const")
    def _():
        x = r((3, 3))
        x.data = np.abs(x.data) + 0.5
        return (lambda xs: xs[0].pow_const(3.0).sum(), [x])

    @case("exp")
    def _(): return (lambda xs: xs[0].exp().sum(), [r((3, 3), scale=0.5)])

    @case("log")
    def _():
        x = r((3, 3))
        x.data = np.abs(x.data) + 0.5
        return (lambda xs: xs[0].log().sum(), [x])

    @case("mean")
    def _(): return (lambda xs: xs[0].mean(), [r((6, 2))])

    @case("reshape")
    def _(): return (lambda xs: (xs[0].reshape(4, 6) * xs[0].reshape(4, 6)).sum(),
                     [r((2, 12))])

    @case("relu")
    def _():
        x = r((4, 8))
        x.data += np.sign(x.data) * 0.05  # keep clear of the kink
        return (lambda xs: T.relu(xs[0]).sum(), [x])

    @case("gelu")
    def _(): return (lambda xs: T.gelu(xs[0]).sum(), [r((4, 8))])

    @case("sigmoid")
    def _(): return (lambda xs: T.sigmoid(xs[0]).sum(), [r((4, 8))])

    @case("softplus")
    def _(): return (lambda xs: T.softplus(xs[0]).sum(), [r((4, 8))])

    @case("conv2d-s1")
    def _(): return (lambda xs: T.conv2d(xs[0], xs[1], xs[2], stride=1, padding=1).sum(),
                     [r((3, 6, 8)), r((4, 3, 3, 3), scale=0.5), r((4,), scale=0.1)])

    @case("conv2d-s2")
    def _(): return (lambda xs: T.conv2d(xs[0], xs[1], None, stride=2, padding=1).sum(),
                     [r((2, 8, 8)), r((5, 2, 3, 3), scale=0.5)])

    @case("conv2d-groups")
    def _(): return (lambda xs: T.conv2d(xs[0], xs[1], None, stride=1, padding=1).sum(),
                     [r((4, 6, 6)), r((4, 2, 3, 3), scale=0.5)])

    @case("upsample_nearest2x")
    def _(): return (lambda xs: (T.upsample_nearest2x(xs[0]) *
                                 T.upsample_nearest2x(xs[0])).sum(), [r((2, 3, 4))])

    @case("concat_channels")
    def _(): return (lambda xs: T.concat_channels(xs).pow_const(2.0).sum(),
                     [r((2, 4, 4)), r((3, 4, 4))])

    @case("slice_channels")
    def _(): return (lambda xs: (T.slice_channels(xs[0], 1, 3) *
                                 T.slice_channels(xs[0], 1, 3)).sum(), [r((4, 3, 3))])

    @case("sum_over_agents")
    def _(): return (lambda xs: T.sum_over_agents(xs).pow_const(2.0).sum(),
                     [r((1, 3, 4)), r((1, 3, 4)), r((1, 3, 4))])

    @case("softmax_over_agents")
    def _():
        def f(xs):
            ws = T.softmax_over_agents(xs)
            return (ws[0] * ws[0]).sum() + ws[1].scale(0.5).sum()
        return (f, [r((1, 3, 4)), r((1, 3, 4)), r((1, 3, 4))])

    @case("group_norm")
    def _(): return (lambda xs: T.group_norm(xs[0], 2, xs[1], xs[2]).pow_const(2.0).sum(),
                     [r((4, 5, 5)), r((4,), scale=0.5), r((4,), scale=0.5)])

    @case("warp_bilinear")
    def _():
        from .scenegen import AgentPose, GridSpec, make_sampler
        grid = GridSpec(8, 8, 0.5)
        sampler = make_sampler(AgentPose(0.4, -0.3, 0.3), grid)
        return (lambda xs: T.warp_bilinear(xs[0], sampler).pow_const(2.0).sum(),
                [r((2, 8, 8))])

    @case("masked_sum")
    def _():
        mask = (rng.random((3, 4, 4)) > 0.5).astype(np.float32)
        return (lambda xs: T.masked_sum(xs[0] * xs[0], mask), [r((3, 4, 4))])

    @case("smooth_l1")
    def _():
        x = r((3, 4))
        x.data += np.sign(x.data) * 0.05  # keep clear of |x| = beta
        return (lambda xs: T.smooth_l1(xs[0]).sum(), [x])

    return cases


def run_op_checks(seed=0, eps=1e-3):
    """grad_check over the op registry; returns [{op, rel_err}, ...]."""
    results = []
    for name, build in _op_cases(seed):
        f, xs = build()
        results.append({"op": name, "rel_err": grad_check(f, xs, eps=eps)})
    return results


def run_end_to_end_check(seed=0, eps=1e-3):
    """Finite-difference check through the full stage-2 forward + loss.

    Tiny configuration (2 agents, unified C=4, 16x32 grid, rank 2), checking
    the gradient w.r.t. every stage-2 trainable parameter group: prompt
    factors, an aligner kernel, and a replacement foreground estimator.
    """
    import copy

    from .config import DEFAULT_CONFIG, validate_config
    from .model import Model
    from .pipeline import _sample_losses
    from .scenegen import GridSpec, build_sample
    from .blocks import FamilySpec

    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg["grid"] = {"h": 16, "w": 32, "res": 0.4}
    cfg["unified_channels"] = 4
    cfg["pyramid"] = {"channels": [4, 8, 16], "blocks": [1, 1, 1],
                      "alphas": [0.4, 0.4, 0.4], "cardinality": 2}
    cfg["prompt"] = {"rank": 2, "init_std": 0.02}
    cfg["families"] = [
        {"type_id": "m1", "out_channels": 4, "hidden": [4], "kernel": 3,
         "activation": "relu", "seed": 11, "noise": 0.02, "blur": 0,
         "range_m": 4.0, "fpn": 0.0},
        {"type_id": "m2", "out_channels": 6, "hidden": [4], "kernel": 3,
         "activation": "gelu", "seed": 22, "noise": 0.05, "blur": 3,
         "range_m": 5.0, "fpn": 0.3},
    ]
    cfg["scenario"] = ["m2"]
    cfg["data"]["objects"] = [2, 3]
    cfg = validate_config(cfg)

    model = Model(cfg, seed=seed)
    grid = GridSpec(**cfg["grid"])
    families = [FamilySpec(**f) for f in cfg["families"]]
    sample = build_sample(grid, families, "m1", scene_seed=seed + 7,
                          scene_kw={"n_objects": (2, 3), "w_range": (0.8, 1.2),
                                    "l_range": (1.6, 2.4), "margin": 0.4})

    names = ["lift.m2.A", "lift.m2.B", "lift.m2.D",
             "aligner.m2.proj.w", "foreground_new.m2.scale0.w"]
    params = [model.store[n] for n in names]
    tensors = [p.tensor for p in params]

    def f(xs):
        for p, x in zip(params, xs):
            p.tensor.data = x.data
        state, head = model.forward_hetero(sample, ["m2"])
        total, _ = _sample_losses(model, state, head, sample)
        return total

    orig = [t.data.copy() for t in tensors]
    try:
        for t in tensors:
            t.requires_grad = True
        err = grad_check(f, tensors, eps=eps)
    finally:
        for p, d in zip(params, orig):
            p.tensor.data = d
    return {"rel_err": err, "params": names}

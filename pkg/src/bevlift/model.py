"""Full model assembly: shared ego encoder, frozen heterogeneous encoder
families, pyramid fusion, per-family aligner + low-rank prompt + replacement
foreground estimators, and the detection head.

Parameter name prefixes (stage plans select on these):
  enc.<type>.*            encoders (ego's trainable in stage 1, others frozen)
  pyramid.*               scale ladders + stage-1 foreground estimators
  head.*                  detection head
  aligner.<type>.*        per-family ConvNeXt-style aligner
  lift.<type>.{A,B,D}     per-family low-rank prompt factors
  foreground_new.<type>.* per-family stage-2 foreground estimators
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import (Aligner, DetectionHead, EncoderFamily, FamilySpec,
                     ForegroundEstimator, derive_rng)
from .fusion import PyramidConfig, PyramidExtractor, pyramid_forward
from .params import ParameterStore
from .prompt import PromptFactors, apply_prompt
from .scenegen import GridSpec, make_sampler


class Model:
    def __init__(self, config, seed=0):
        """config: a validated ExperimentConfig (see config module)."""
        self.config = config
        self.grid = GridSpec(**config["grid"])
        self.unified = config["unified_channels"]
        self.pyr_cfg = PyramidConfig(
            channels=config["pyramid"]["channels"],
            blocks=config["pyramid"]["blocks"],
            alphas=config["pyramid"]["alphas"],
            cardinality=config["pyramid"].get("cardinality", 4),
        )
        self.store = ParameterStore()
        self.families = {f["type_id"]: FamilySpec(**f) for f in config["families"]}
        self.ego_family = config["ego_family"]
        if self.families[self.ego_family].out_channels != self.unified:
            raise ValueError("ego family out_channels must equal unified_channels")

        rng = derive_rng(seed, "model")
        self.encoders = {}
        for tid, spec in self.families.items():
            # the ego encoder is trained in stage 1; other families stay frozen
            self.encoders[tid] = EncoderFamily(self.store, spec,
                                               frozen=(tid != self.ego_family))
        self.pyramid = PyramidExtractor(self.store, self.pyr_cfg, self.unified, rng)
        self.head = DetectionHead(self.store, "head", self.pyr_cfg.fused_channels, rng=rng)

        self.aligners = {}
        self.prompts = {}
        self.new_foreground = {}
        pr = config["prompt"]
        for tid, spec in self.families.items():
            if tid == self.ego_family:
                continue
            arng = derive_rng(seed, "aligner", tid)
            self.aligners[tid] = Aligner(self.store, f"aligner.{tid}", spec.out_channels,
                                         self.unified, depth=config["aligner_depth"], rng=arng)
            self.prompts[tid] = PromptFactors(
                self.store, tid, self.unified, self.grid.h, self.grid.w,
                rank=pr["rank"], init_std=pr["init_std"], seed=seed)
            frng = derive_rng(seed, "fg-new", tid)
            self.new_foreground[tid] = [
                ForegroundEstimator(self.store, f"foreground_new.{tid}.scale{l}", c, rng=frng)
                for l, c in enumerate(self.pyr_cfg.channels)
            ]
        self._samplers = {}

    # -- forward paths ---------------------------------------------------

    def _sampler(self, pose):
        key = (round(pose.x, 6), round(pose.y, 6), round(pose.yaw, 6))
        if key not in self._samplers:
            self._samplers[key] = make_sampler(pose, self.grid)
        return self._samplers[key]

    def _warp(self, f, pose):
        """Warp an agent-frame feature map into the ego frame (identity pose
        short-circuits to the input)."""
        if abs(pose.x) < 1e-9 and abs(pose.y) < 1e-9 and abs(pose.yaw) < 1e-9:
            return f
        return T.warp_bilinear(f, self._sampler(pose))

    def encode_to_ego(self, obs):
        """Frozen/shared encoder on a raw observation, then warp to ego frame."""
        x = T.Tensor(obs.raw)
        return self._warp(self.encoders[obs.type_id](x), obs.pose)

    def align_neighbor(self, obs, use_prompt=True):
        """Stage-2 path for a heterogeneous neighbor: encode, align and prompt
        in the agent's own frame (the aligner doubles as the transmission
        compressor, and the prompt's fixed spatial bias matches the agent-frame
        sensing geometry), then warp the result into the ego frame."""
        tid = obs.type_id
        if tid not in self.aligners:
            raise KeyError(f"no aligner/prompt pair for family {tid}")
        f = self.encoders[tid](T.Tensor(obs.raw))
        f = self.aligners[tid](f)
        if use_prompt:
            f = apply_prompt(f, self.prompts[tid])
        return self._warp(f, obs.pose)

    def forward_homogeneous(self, sample, agent_ids):
        """Stage-1 fusion over ego-type agents; returns (FusionState, head outputs)."""
        feats = [self.encode_to_ego(sample.observations[a]) for a in agent_ids]
        state = pyramid_forward(feats, self.pyramid)
        return state, self.head(state.fused)

    def forward_hetero(self, sample, scenario, include_ego=True, use_prompt=True):
        """Stage-2 fusion: the ego's own feature plus one aligned+prompted agent
        per family in `scenario`. Neighbor occupancies use that family's
        replacement foreground estimators."""
        by_type = {o.type_id: o for o in sample.observations[1:]}
        feats, estimators = [], []
        if include_ego:
            feats.append(self.encode_to_ego(sample.observations[0]))
            estimators.append(self.pyramid.foreground)
        for tid in scenario:
            if tid not in by_type:
                raise KeyError(f"sample has no agent of family {tid}")
            feats.append(self.align_neighbor(by_type[tid], use_prompt=use_prompt))
            estimators.append(self.new_foreground[tid])
        if not feats:
            raise ValueError("empty agent set")
        state = pyramid_forward(feats, self.pyramid, estimators=estimators)
        return state, self.head(state.fused)

    def forward_ego_only(self, sample):
        """No-fusion baseline: ego's own observation only."""
        return self.forward_homogeneous(sample, [0])

    def transmitted_elements(self, tid):
        """Feature element counts before and after alignment (the aligner acts
        as the compressor on the neighbor side)."""
        ck = self.families[tid].out_channels
        n = self.grid.h * self.grid.w
        return {"raw": ck * n, "aligned": self.unified * n}


# -- analytic accounting --------------------------------------------------

def _conv_params(cout, cin, k, groups=1, norm=False, bias=True):
    n = cout * (cin // groups * k * k + (1 if bias else 0))
    if norm:
        n += (2 if bias else 1) * cout
    return n


def _resnext_mid(cout, cardinality):
    cmid = max(cout // 2, cardinality)
    while cmid % cardinality:
        cmid += 1
    return cmid


def _resnext_params(cin, cout, cardinality, stride):
    cmid = _resnext_mid(cout, cardinality)
    n = _conv_params(cmid, cin, 1, norm=True)
    n += _conv_params(cmid, cmid, 3, groups=cardinality, norm=True)
    n += _conv_params(cout, cmid, 1, norm=True)
    if cin != cout or stride != 1:
        n += _conv_params(cout, cin, 1, norm=True)
    return n


def _encoder_params(spec: FamilySpec, in_channels=EncoderFamily.IN_CHANNELS):
    widths = [in_channels] + list(spec.hidden) + [spec.out_channels]
    n = 0
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        n += _conv_params(b, a, spec.kernel, norm=not last)
    return n


def _aligner_params(c_in, c_out, depth):
    n = 0
    for _ in range(depth):
        n += _conv_params(c_in, c_in, 7, groups=c_in, norm=True)   # depthwise
        n += _conv_params(4 * c_in, c_in, 1)                       # expand
        n += _conv_params(c_in, 4 * c_in, 1)                       # project
    n += _conv_params(c_out, c_in, 1)
    return n


def account(config):
    """Analytic per-component trainable parameter counts and forward FLOPs.

    Mirrors the constructors in this module; a test cross-checks every number
    against the instantiated parameter store.
    """
    pyr = config["pyramid"]
    card = pyr.get("cardinality", 4)
    C = config["unified_channels"]
    g = config["grid"]
    h, w = g["h"], g["w"]
    fams = {f["type_id"]: FamilySpec(**f) for f in config["families"]}
    ego = config["ego_family"]

    counts = {}
    flops = {}
    for tid, spec in fams.items():
        counts[f"enc.{tid}"] = _encoder_params(spec)
        widths = [EncoderFamily.IN_CHANNELS] + list(spec.hidden) + [spec.out_channels]
        flops[f"enc.{tid}"] = sum(
            2 * h * w * b * a * spec.kernel ** 2 for a, b in zip(widths[:-1], widths[1:]))

    n_pyr = 0
    f_pyr = 0
    cin = C
    hl, wl = h, w
    for l, (cout, nblocks) in enumerate(zip(pyr["channels"], pyr["blocks"])):
        hl, wl = hl // 2, wl // 2
        for bi in range(nblocks):
            a = cin if bi == 0 else cout
            stride = 2 if bi == 0 else 1
            n_pyr += _resnext_params(a, cout, card, stride)
            cmid = _resnext_mid(cout, card)
            f_pyr += 2 * hl * wl * (cmid * a + cmid * (cmid // card) * 9 + cout * cmid)
            if a != cout or stride != 1:
                f_pyr += 2 * hl * wl * cout * a
        n_pyr += _conv_params(1, cout, 1)  # stage-1 foreground estimator
        f_pyr += 2 * hl * wl * cout
        cin = cout
    counts["pyramid"] = n_pyr
    flops["pyramid"] = f_pyr

    fused = sum(pyr["channels"])
    counts["head"] = sum(_conv_params(c, fused, 1) for c in (1, 5, 2))
    flops["head"] = 2 * h * w * fused * 8

    rank = config["prompt"]["rank"]
    for tid, spec in fams.items():
        if tid == ego:
            continue
        counts[f"aligner.{tid}"] = _aligner_params(spec.out_channels, C,
                                                   config["aligner_depth"])
        ck = spec.out_channels
        f_al = config["aligner_depth"] * 2 * h * w * (ck * 49 + 4 * ck * ck * 2)
        f_al += 2 * h * w * C * ck
        flops[f"aligner.{tid}"] = f_al
        counts[f"lift.{tid}"] = rank * (C + h + w)
        flops[f"lift.{tid}"] = 2 * rank * C * h * w
        counts[f"foreground_new.{tid}"] = sum(
            _conv_params(1, c, 1) for c in pyr["channels"])
        flops[f"foreground_new.{tid}"] = sum(
            2 * (h >> (l + 1)) * (w >> (l + 1)) * c
            for l, c in enumerate(pyr["channels"]))
    return {"params": counts, "flops": flops,
            "total_params": sum(counts.values()), "total_flops": sum(flops.values())}

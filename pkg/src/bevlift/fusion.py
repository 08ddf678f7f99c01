"""Occupancy-weighted multi-scale pyramid fusion.

Each scale halves the spatial dims through a ladder of ResNeXt-style blocks
(weights shared across agents). A per-scale 1x1 foreground estimator produces
occupancy logits per agent, softmax-normalized across agents into fusion
weights. The weighted per-scale sums are upsampled back to the input
resolution and concatenated channel-wise into the fused map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .blocks import ForegroundEstimator, ResNeXtBlock


@dataclass
class PyramidConfig:
    channels: list            # per-scale output channels, strictly increasing
    blocks: list              # per-scale ResNeXt block counts
    alphas: list              # per-scale foreground loss weights
    cardinality: int = 4

    def __post_init__(self):
        L = len(self.channels)
        if len(self.blocks) != L or len(self.alphas) != L:
            raise ValueError("channels, blocks and alphas must have equal length")
        if any(b < 1 for b in self.blocks):
            raise ValueError("each scale needs at least one block")
        if list(self.channels) != sorted(set(self.channels)):
            raise ValueError("channels must be strictly increasing")

    @property
    def num_scales(self):
        return len(self.channels)

    @property
    def fused_channels(self):
        return sum(self.channels)


class PyramidExtractor:
    """The per-scale block ladders plus the stage-1 foreground estimators."""

    def __init__(self, store, config: PyramidConfig, in_channels, rng, prefix="pyramid",
                 frozen=False):
        self.config = config
        self.scales = []
        cin = in_channels
        for l, (cout, nblocks) in enumerate(zip(config.channels, config.blocks)):
            blocks = []
            for bi in range(nblocks):
                blocks.append(ResNeXtBlock(
                    store, f"{prefix}.scale{l}.block{bi}", cin if bi == 0 else cout, cout,
                    stride=2 if bi == 0 else 1, cardinality=config.cardinality,
                    rng=rng, frozen=frozen))
            self.scales.append(blocks)
            cin = cout
        self.foreground = [
            ForegroundEstimator(store, f"{prefix}.fg.scale{l}", c, rng=rng, frozen=frozen)
            for l, c in enumerate(config.channels)
        ]

    def extract(self, x):
        """Run the ladder; returns the per-scale feature list."""
        feats = []
        for blocks in self.scales:
            for b in blocks:
                x = b(x)
            feats.append(x)
        return feats


@dataclass
class FusionState:
    """Everything Eq-level consumers need: per-agent per-scale features and
    occupancy logits, per-scale weights and fused maps, and the final output."""
    scale_feats: list         # [agent][scale] Tensor
    occ_logits: list          # [agent][scale] Tensor (1, H_l, W_l), pre-sigmoid
    weights: list             # [scale][agent] Tensor (1, H_l, W_l)
    fused_scales: list        # [scale] Tensor, upsampled to input resolution
    fused: "T.Tensor"         # concat over scales


def pyramid_forward(features, extractor: PyramidExtractor, estimators=None):
    """Fuse N same-shape ego-frame feature maps.

    estimators: per-agent list of foreground-estimator lists; defaults to the
    extractor's shared stage-1 estimators for every agent.
    """
    if not features:
        raise ValueError("pyramid_forward needs at least one agent")
    shape0 = features[0].data.shape
    L = extractor.config.num_scales
    c, h, w = shape0
    if h % (2 ** L) or w % (2 ** L):
        raise ValueError(f"spatial dims {h}x{w} not divisible by 2^{L}")
    for f in features[1:]:
        if f.data.shape != shape0:
            raise ValueError("agent feature shapes differ")

    scale_feats = []
    occ_logits = []
    for i, f in enumerate(features):
        feats = extractor.extract(f)
        est = extractor.foreground if estimators is None else estimators[i]
        occs = [est[l](feats[l]) for l in range(L)]
        scale_feats.append(feats)
        occ_logits.append(occs)

    weights = []
    fused_scales = []
    for l in range(L):
        wts = T.softmax_over_agents([occ_logits[i][l] for i in range(len(features))])
        weights.append(wts)
        # order-invariant accumulation: the fused map must not depend on the
        # order the agent features arrive in, down to the bit level
        acc = T.sum_over_agents(
            [scale_feats[i][l] * wts[i] for i in range(len(features))])
        for _ in range(l + 1):
            acc = T.upsample_nearest2x(acc)
        fused_scales.append(acc)

    fused = T.concat_channels(fused_scales)
    return FusionState(scale_feats, occ_logits, weights, fused_scales, fused)


def occupancy_maps(state: FusionState):
    """Raw pre-sigmoid occupancy logits as (agent_index, scale, Tensor) triples."""
    out = []
    for i, occs in enumerate(state.occ_logits):
        for l, occ in enumerate(occs):
            out.append((i, l, occ))
    return out

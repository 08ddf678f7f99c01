import copy

import numpy as np
import pytest

from bevlift.config import DEFAULT_CONFIG, validate_config


TINY_FAMILIES = [
    {"type_id": "m1", "out_channels": 4, "hidden": [4], "kernel": 3,
     "activation": "relu", "seed": 11, "noise": 0.02, "blur": 0,
     "range_m": 4.0, "fpn": 0.0},
    {"type_id": "m2", "out_channels": 6, "hidden": [4], "kernel": 3,
     "activation": "gelu", "seed": 22, "noise": 0.05, "blur": 3,
     "range_m": 5.0, "fpn": 0.3},
]


def make_tiny_config(**overrides):
    """A small but fully valid configuration for fast training tests:
    2 families, C=4, 16x32 grid, rank-2 prompts, small scenes."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg["grid"] = {"h": 16, "w": 32, "res": 0.4}
    cfg["unified_channels"] = 4
    cfg["pyramid"] = {"channels": [4, 8, 16], "blocks": [1, 1, 1],
                      "alphas": [0.4, 0.4, 0.4], "cardinality": 2}
    cfg["prompt"] = {"rank": 2, "init_std": 0.02}
    cfg["families"] = copy.deepcopy(TINY_FAMILIES)
    cfg["scenario"] = ["m2"]
    cfg["data"] = {"train_scenes": 4, "eval_scenes": 2, "objects": [2, 3],
                   "w_range": [0.8, 1.2], "l_range": [1.6, 2.4]}
    cfg["stage1"] = {"epochs": 1, "lr": 0.002}
    cfg["stage2"] = {"epochs": 1, "lr": 0.002, "include_ego": True,
                     "finetune_epochs": 0}
    cfg.update(overrides)
    return validate_config(cfg)


TINY_SCENE_KW = {"n_objects": (2, 3), "w_range": (0.8, 1.2),
                 "l_range": (1.6, 2.4), "margin": 0.4}


def make_tiny_sample(cfg, scene_seed=7):
    from bevlift.blocks import FamilySpec
    from bevlift.scenegen import GridSpec, build_sample
    grid = GridSpec(**cfg["grid"])
    families = [FamilySpec(**f) for f in cfg["families"]]
    return build_sample(grid, families, cfg["ego_family"], scene_seed,
                        scene_kw=TINY_SCENE_KW)


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def tiny_sample(tiny_config):
    return make_tiny_sample(tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

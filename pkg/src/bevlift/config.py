"""Experiment configuration: defaults, closed-world validation, hashing."""

from __future__ import annotations

import copy
import hashlib
import json


class ConfigError(ValueError):
    pass


# Desk-scale defaults. The paper-scale preset swaps in the published
# architecture constants (three scales [64,128,256] with [3,5,8] blocks,
# 0.4 m cells over +-102.4 m x +-51.2 m, 25 epochs, Adam lr 0.002).
DEFAULT_CONFIG = {
    "grid": {"h": 32, "w": 64, "res": 0.4},
    "unified_channels": 12,
    "pyramid": {"channels": [12, 24, 96], "blocks": [2, 2, 2],
                "alphas": [0.4, 0.4, 0.4], "cardinality": 4},
    "aligner_depth": 1,
    "anchor": [2.0, 4.0],
    "families": [
        {"type_id": "m1", "out_channels": 12, "hidden": [8], "kernel": 3,
         "activation": "relu", "seed": 101, "noise": 0.02, "blur": 0,
         "range_m": 7.0, "fpn": 0.0},
        {"type_id": "m2", "out_channels": 12, "hidden": [10], "kernel": 3,
         "activation": "gelu", "seed": 202, "noise": 0.05, "blur": 3,
         "range_m": 9.0, "fpn": 0.35},
        {"type_id": "m3", "out_channels": 6, "hidden": [6, 6], "kernel": 5,
         "activation": "sigmoid", "seed": 303, "noise": 0.03, "blur": 0,
         "range_m": 9.0, "fpn": 0.3},
        {"type_id": "m4", "out_channels": 10, "hidden": [8], "kernel": 3,
         "activation": "relu", "seed": 404, "noise": 0.08, "blur": 3,
         "range_m": 8.0, "fpn": 0.4},
    ],
    "ego_family": "m1",
    "prompt": {"rank": 8, "init_std": 0.02},
    "data": {"train_scenes": 150, "eval_scenes": 20, "objects": [3, 8],
             "w_range": [1.6, 2.4], "l_range": [3.4, 5.2]},
    "stage1": {"epochs": 30, "lr": 0.002},
    "stage2": {"epochs": 15, "lr": 0.002, "include_ego": True, "finetune_epochs": 0},
    "eval": {"score_thresh": 0.1, "nms_iou": 0.15, "iou_thresholds": [0.5, 0.7]},
    "scenario": ["m2", "m3", "m4"],
}

PAPER_SCALE_OVERRIDES = {
    "grid": {"h": 256, "w": 512, "res": 0.4},
    "unified_channels": 64,
    "pyramid": {"channels": [64, 128, 256], "blocks": [3, 5, 8],
                "alphas": [0.4, 0.4, 0.4], "cardinality": 4},
    "aligner_depth": 2,
    "stage1": {"epochs": 25, "lr": 0.002},
    "stage2": {"epochs": 25, "lr": 0.002, "include_ego": True, "finetune_epochs": 0},
    "families": [
        {"type_id": "m1", "out_channels": 64, "hidden": [32], "kernel": 3,
         "activation": "relu", "seed": 101, "noise": 0.02, "blur": 0,
         "range_m": 40.0, "fpn": 0.0},
        {"type_id": "m2", "out_channels": 96, "hidden": [48], "kernel": 3,
         "activation": "gelu", "seed": 202, "noise": 0.05, "blur": 3,
         "range_m": 80.0, "fpn": 0.35},
        {"type_id": "m3", "out_channels": 72, "hidden": [48, 48], "kernel": 5,
         "activation": "sigmoid", "seed": 303, "noise": 0.03, "blur": 0,
         "range_m": 80.0, "fpn": 0.3},
        {"type_id": "m4", "out_channels": 80, "hidden": [48], "kernel": 3,
         "activation": "relu", "seed": 404, "noise": 0.08, "blur": 3,
         "range_m": 70.0, "fpn": 0.4},
    ],
}


def paper_scale_config():
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg.update(copy.deepcopy(PAPER_SCALE_OVERRIDES))
    return cfg


def _check_keys(obj, template, path):
    unknown = set(obj) - set(template)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    missing = set(template) - set(obj)
    if missing:
        raise ConfigError(f"missing config keys at {path or 'top level'}: {sorted(missing)}")


def validate_config(cfg):
    """Closed-world validation against the default layout; returns cfg."""
    _check_keys(cfg, DEFAULT_CONFIG, "")
    for key in ("grid", "pyramid", "prompt", "data", "stage1", "stage2", "eval"):
        _check_keys(cfg[key], DEFAULT_CONFIG[key], key)
    fam_template = DEFAULT_CONFIG["families"][0]
    ids = []
    for f in cfg["families"]:
        _check_keys(f, fam_template, "families[]")
        ids.append(f["type_id"])
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate family type_ids")
    if cfg["ego_family"] not in ids:
        raise ConfigError(f"ego_family {cfg['ego_family']} not among families")
    for tid in cfg["scenario"]:
        if tid not in ids:
            raise ConfigError(f"scenario references unknown family {tid}")
    p = cfg["pyramid"]
    L = len(p["channels"])
    if len(p["blocks"]) != L or len(p["alphas"]) != L:
        raise ConfigError("pyramid channels/blocks/alphas length mismatch")
    g = cfg["grid"]
    if g["h"] % (2 ** L) or g["w"] % (2 ** L):
        raise ConfigError(f"grid {g['h']}x{g['w']} not divisible by 2^{L}")
    ego = next(f for f in cfg["families"] if f["type_id"] == cfg["ego_family"])
    if ego["out_channels"] != cfg["unified_channels"]:
        raise ConfigError("ego family out_channels must equal unified_channels")
    if cfg["prompt"]["rank"] < 1:
        raise ConfigError("prompt rank must be >= 1")
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}")
    return validate_config(cfg)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

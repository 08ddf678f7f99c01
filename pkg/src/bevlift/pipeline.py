"""Two-stage training protocol, optimizer, dataset generation and evaluation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, losses
from .blocks import derive_rng
from .config import config_hash
from .evaluation import average_precision, nms
from .model import Model, account
from .scenegen import (GridSpec, build_sample, decode_detections,
                       detection_targets, gt_masks, load_sample, save_sample)
from .tensor import NumericError


class FrozenParameterError(RuntimeError):
    """A stage plan or optimizer tried to update a frozen parameter."""


@dataclass
class StagePlan:
    stage: str                      # "base" | "lift" | ablation row name
    trainable: list                 # name prefixes
    frozen: list                    # name prefixes
    epochs: int
    lr: float

    def apply(self, store):
        overlap = [t for t in self.trainable if t in self.frozen]
        if overlap:
            raise FrozenParameterError(f"patterns both trainable and frozen: {overlap}")
        store.apply_plan(self.trainable, self.frozen)


def base_plan(config, model):
    ego = config["ego_family"]
    others = [tid for tid in model.families if tid != ego]
    return StagePlan(
        stage="base",
        trainable=[f"enc.{ego}.", "pyramid.", "head."],
        frozen=[f"enc.{t}." for t in others] + ["aligner.", "lift.", "foreground_new."],
        epochs=config["stage1"]["epochs"],
        lr=config["stage1"]["lr"],
    )


# Table-3-style ablation rows: which parameter groups train in stage 2 besides
# the aligner (always trained) and the replacement foreground estimator.
ABLATION_ROWS = {
    "enc+bev": ("enc", "bev"),
    "enc+bev+lift": ("enc", "bev", "lift"),
    "enc+lift": ("enc", "lift"),
    "bev+lift": ("bev", "lift"),
    "lift": ("lift",),
}


def lift_plan(config, model, family, row="lift"):
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row}")
    parts = ABLATION_ROWS[row]
    ego = config["ego_family"]
    trainable = [f"aligner.{family}.", f"foreground_new.{family}."]
    if "lift" in parts:
        trainable.append(f"lift.{family}.")
    if "enc" in parts:
        trainable.append(f"enc.{family}.")
    if "bev" in parts:
        trainable.append("pyramid.")
    all_prefixes = ([f"enc.{t}." for t in model.families] +
                    ["pyramid.", "head.", "aligner.", "lift.", "foreground_new."])
    frozen = []
    for p in model.store:
        if not any(p.name.startswith(t) for t in trainable):
            frozen.append(p.name)
    return StagePlan(stage="lift" if row == "lift" else f"ablate:{row}",
                     trainable=trainable, frozen=frozen,
                     epochs=config["stage2"]["epochs"], lr=config["stage2"]["lr"])


class Adam:
    """Standard Adam with bias correction; owns gradient zeroing."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        for p in params:
            if p.frozen:
                raise FrozenParameterError(f"frozen parameter in optimizer: {p.name}")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.frozen:
                raise FrozenParameterError(f"parameter froze mid-training: {p.name}")
            g = p.tensor.grad
            if g is None:
                raise NumericError(f"missing gradient for trainable parameter {p.name}")
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.tensor.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
                             ).astype(np.float32)
            p.tensor.grad = None


# -- datasets -------------------------------------------------------------

def generate_dataset(config, out_dir, seed, split="train", n_scenes=None):
    os.makedirs(out_dir, exist_ok=True)
    grid = GridSpec(**config["grid"])
    from .blocks import FamilySpec
    families = [FamilySpec(**f) for f in config["families"]]
    n = n_scenes if n_scenes is not None else config["data"][f"{split}_scenes"]
    data_cfg = config["data"]
    scene_kw = {"n_objects": tuple(data_cfg["objects"]),
                "w_range": tuple(data_cfg["w_range"]),
                "l_range": tuple(data_cfg["l_range"])}
    paths = []
    counts = []
    for s in range(n):
        scene_seed = int(derive_rng(seed, "dataset", split, s).integers(2 ** 31))
        sample = build_sample(grid, families, config["ego_family"], scene_seed,
                              scene_kw=scene_kw)
        path = os.path.join(out_dir, f"{split}_{s:05d}.bin")
        save_sample(path, sample)
        paths.append(path)
        counts.append(len(sample.scene.boxes))
    import hashlib
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as f:
            h.update(f.read())
    manifest = os.path.join(out_dir, f"manifest_{split}.txt")
    with open(manifest, "w") as f:
        f.write(f"seed={seed}\n")
        f.write(f"config_hash={config_hash(config)}\n")
        f.write(f"split={split}\n")
        f.write(f"n_scenes={n}\n")
        f.write(f"content_sha256={h.hexdigest()}\n")
    return paths, {"manifest": manifest, "content_sha256": h.hexdigest(),
                   "object_counts": counts}


def dataset_paths(data_dir, split):
    paths = sorted(
        os.path.join(data_dir, f) for f in os.listdir(data_dir)
        if f.startswith(f"{split}_") and f.endswith(".bin"))
    if not paths:
        raise FileNotFoundError(f"no {split} samples under {data_dir}")
    return paths


# -- training -------------------------------------------------------------

def _sample_losses(model, state, head_out, sample):
    """Assemble the composite loss for one sample."""
    cls_t, reg_t, bins = detection_targets(sample.scene, anchor=tuple(model.config["anchor"]))
    masks = gt_masks(sample.scene, model.pyr_cfg.num_scales)
    cls_logits, reg, dir_logits = head_out
    focal = losses.focal_loss(cls_logits, cls_t[None])
    npos = float(cls_t.sum())
    if npos > 0:
        sl1 = losses.smooth_l1_loss(reg, reg_t, cls_t)
        dirn = losses.direction_loss(dir_logits, bins, cls_t)
    else:
        raise NumericError("sample without positive cells")
    fgs = []
    for l in range(model.pyr_cfg.num_scales):
        occs = [state.occ_logits[i][l] for i in range(len(state.occ_logits))]
        fgs.append(losses.foreground_loss(occs, masks[l]))
    return losses.total_loss(focal, sl1, dirn, fgs, model.pyr_cfg.alphas)


def _train(model, plan, samples, seed, log_path=None, steps_limit=None,
           forward_fn=None):
    plan.apply(model.store)
    opt = Adam(model.store.trainable(), lr=plan.lr)
    rng = derive_rng(seed, "train-order", plan.stage)
    log_rows = []
    step = 0
    done = False
    for epoch in range(plan.epochs):
        order = rng.permutation(len(samples))
        for si in order:
            sample = samples[si]
            state, head_out = forward_fn(sample)
            total, report = _sample_losses(model, state, head_out, sample)
            model.store.zero_grads()
            total.backward()
            opt.step()
            log_rows.append([step, plan.stage] + [f"{v:.6f}" for v in report.row()])
            step += 1
            if steps_limit is not None and step >= steps_limit:
                done = True
                break
        if done:
            break
    if log_path:
        with open(log_path, "w", newline="") as f:
            wcsv = csv.writer(f)
            L = model.pyr_cfg.num_scales
            wcsv.writerow(["step", "stage", "focal", "smooth_l1", "dir"]
                          + [f"fg{l}" for l in range(L)] + ["total"])
            wcsv.writerows(log_rows)
    return log_rows


def train_base(config, samples, seed, ckpt_path, log_path=None, steps_limit=None):
    """Stage 1: homogeneous collaborative training of encoder, pyramid, head."""
    model = Model(config, seed=seed)
    plan = base_plan(config, model)
    n_ego = sum(1 for o in samples[0].observations if o.type_id == config["ego_family"])
    agent_ids = list(range(n_ego))
    _train(model, plan, samples, seed, log_path=log_path, steps_limit=steps_limit,
           forward_fn=lambda s: model.forward_homogeneous(s, agent_ids))
    # The stage-1 checkpoint carries only what stage 1 owns: the adapters
    # (aligner/prompt/new estimator) belong to the per-family stage-2
    # checkpoints, which keeps checkpoints composable across families and
    # prompt ranks.
    checkpoint.save_store(ckpt_path, model.store,
                          exclude=_adapter_prefixes(config),
                          meta={"stage": "base", "config_hash": config_hash(config),
                                "seed": seed})
    return model


def _adapter_prefixes(config, keep_family=None):
    """Name prefixes of per-family stage-2 parameter groups, optionally
    keeping one family's groups."""
    out = []
    for fam in config["families"]:
        tid = fam["type_id"]
        if tid == keep_family:
            continue
        out += [f"aligner.{tid}.", f"lift.{tid}.", f"foreground_new.{tid}."]
    return tuple(out)


def train_lift(config, samples, family, seed, base_ckpt, ckpt_path, row="lift",
               log_path=None, steps_limit=None, extra_epochs=0, use_prompt=True):
    """Stage 2: adapt one heterogeneous family onto the frozen base.

    use_prompt=False trains the aligner-only baseline: the prompt factors are
    left frozen at init and the forward path skips them entirely.
    """
    model = Model(config, seed=seed)
    checkpoint.load_store(base_ckpt, model.store, strict=False,
                          restore_freeze=False)
    plan = lift_plan(config, model, family, row=row)
    plan.epochs += extra_epochs
    if not use_prompt:
        pfx = f"lift.{family}."
        plan.trainable = [t for t in plan.trainable if t != pfx]
        plan.frozen += [p.name for p in model.store if p.name.startswith(pfx)]
    include_ego = config["stage2"]["include_ego"]
    _train(model, plan, samples, seed, log_path=log_path, steps_limit=steps_limit,
           forward_fn=lambda s: model.forward_hetero(s, [family],
                                                     include_ego=include_ego,
                                                     use_prompt=use_prompt))
    # Keep only this family's adapters (plus the shared groups, whose bytes
    # match the base checkpoint unless the ablation row tuned them), so lift
    # checkpoints for different families compose without clobbering each other.
    checkpoint.save_store(ckpt_path, model.store,
                          exclude=_adapter_prefixes(config, keep_family=family),
                          meta={"stage": plan.stage, "family": family,
                                "config_hash": config_hash(config), "seed": seed,
                                "trainable_params": int(model.store.num_trainable())})
    return model


def load_model(config, seed, ckpts):
    """Model with one or more checkpoints applied in order (base, then lifts)."""
    model = Model(config, seed=seed)
    for c in ckpts:
        # non-strict: each checkpoint carries only the groups its stage owns
        checkpoint.load_store(c, model.store, strict=False, restore_freeze=False)
    model.store.freeze_all()
    return model


# -- evaluation -----------------------------------------------------------

def evaluate(model, samples, scenario, mode="fusion", use_prompt=True):
    """AP over a sample list.

    mode: "fusion" (ego + scenario agents through aligner/prompt),
    "no_fusion" (ego only), or "homogeneous" (all ego-type agents).
    """
    for tid in scenario:
        if mode == "fusion" and tid not in model.aligners:
            raise KeyError(f"no trained aligner/prompt pair for family {tid}")
    ev = model.config["eval"]
    scene_preds, scene_gts = [], []
    for sample in samples:
        if mode == "no_fusion":
            state, head_out = model.forward_ego_only(sample)
        elif mode == "homogeneous":
            n_ego = sum(1 for o in sample.observations
                        if o.type_id == model.ego_family)
            state, head_out = model.forward_homogeneous(sample, list(range(n_ego)))
        else:
            state, head_out = model.forward_hetero(sample, scenario,
                                                   use_prompt=use_prompt)
        dets = decode_detections(head_out[0].data, head_out[1].data, head_out[2].data,
                                 model.grid, anchor=tuple(model.config["anchor"]),
                                 score_thresh=ev["score_thresh"])
        dets = nms(dets, iou_thresh=ev["nms_iou"])
        scene_preds.append(dets)
        scene_gts.append(sample.scene.boxes)
    result = {}
    for thr in ev["iou_thresholds"]:
        ap, _ = average_precision(scene_preds, scene_gts, thr)
        result[f"ap@{thr}"] = round(ap, 6)
    result["trainable_params"] = int(model.store.num_trainable())
    return result

"""Synthetic BEV scenes and datasets.

Conventions: a grid has H rows (y) by W cols (x), cell size `res` meters,
origin at the grid center. Cell (i,j) center is
x = (j + 0.5 - W/2) * res, y = (i + 0.5 - H/2) * res.
A box is (cx, cy, w, l, theta): length l along heading theta, width w across,
theta in (-pi, pi]. An agent pose (x, y, yaw) maps agent-frame points into the
ego frame: p_ego = R(yaw) @ p_agent + (x, y).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .blocks import derive_rng
from .checkpoint import load_records, save_records


@dataclass(frozen=True)
class GridSpec:
    h: int
    w: int
    res: float  # meters per cell

    @property
    def extent_x(self):
        return self.w * self.res / 2.0

    @property
    def extent_y(self):
        return self.h * self.res / 2.0

    def cell_centers(self):
        """(H,W) arrays of metric x and y cell-center coordinates."""
        xs = (np.arange(self.w) + 0.5 - self.w / 2.0) * self.res
        ys = (np.arange(self.h) + 0.5 - self.h / 2.0) * self.res
        return np.meshgrid(xs, ys)  # x: (H,W), y: (H,W)


@dataclass
class GtBox:
    cx: float
    cy: float
    w: float
    l: float
    theta: float

    def corners(self):
        c, s = np.cos(self.theta), np.sin(self.theta)
        dx = np.array([self.l, self.l, -self.l, -self.l]) / 2.0
        dy = np.array([self.w, -self.w, -self.w, self.w]) / 2.0
        return np.stack([self.cx + c * dx - s * dy, self.cy + s * dx + c * dy], axis=1)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.l, self.theta], dtype=np.float32)


@dataclass
class AgentPose:
    x: float
    y: float
    yaw: float

    def compose(self, other):
        """self after other: maps other's frame through self (p -> self(other(p)))."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return AgentPose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def to_ego(self, pts):
        """Transform (N,2) agent-frame points into the ego frame."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        r = np.array([[c, -s], [s, c]])
        return pts @ r.T + np.array([self.x, self.y])

    def from_ego(self, pts):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        r = np.array([[c, s], [-s, c]])
        return (pts - np.array([self.x, self.y])) @ r.T

    def as_array(self):
        return np.array([self.x, self.y, self.yaw], dtype=np.float32)


@dataclass
class Scene:
    grid: GridSpec
    boxes: list
    seed: int


def rotated_iou(a: GtBox, b: GtBox):
    """Exact rotated-rectangle IoU via polygon clipping."""
    from shapely.geometry import Polygon

    # quick reject: farther apart than the circumscribed circles
    ra = np.hypot(a.w, a.l) / 2.0
    rb = np.hypot(b.w, b.l) / 2.0
    if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 > (ra + rb) ** 2:
        return 0.0
    pa, pb = Polygon(a.corners()), Polygon(b.corners())
    inter = pa.intersection(pb).area
    if inter == 0:
        return 0.0
    return inter / (pa.area + pb.area - inter)


def generate_scene(grid: GridSpec, seed, n_objects=(3, 8), w_range=(1.6, 2.4),
                   l_range=(3.4, 5.2), margin=1.0, max_attempts=1000):
    """Rejection-sample non-overlapping boxes inside the grid extent."""
    rng = derive_rng(seed, "scene")
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    boxes = []
    attempts = 0
    while len(boxes) < count:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could not place {count} objects in extent after {max_attempts} attempts")
        l = float(rng.uniform(*l_range))
        w = float(rng.uniform(*w_range))
        half = l / 2.0 + margin
        cx = float(rng.uniform(-grid.extent_x + half, grid.extent_x - half))
        cy = float(rng.uniform(-grid.extent_y + half, grid.extent_y - half))
        theta = float(rng.uniform(-np.pi, np.pi))
        cand = GtBox(cx, cy, w, l, theta)
        if all(rotated_iou(cand, b) == 0.0 for b in boxes):
            boxes.append(cand)
    return Scene(grid=grid, boxes=boxes, seed=seed)


def _box_fields(boxes, x, y):
    """inside mask and front-half mask of any box, over coordinate arrays x,y."""
    inside = np.zeros(x.shape, dtype=bool)
    front = np.zeros(x.shape, dtype=bool)
    for b in boxes:
        c, s = np.cos(b.theta), np.sin(b.theta)
        u = c * (x - b.cx) + s * (y - b.cy)
        v = -s * (x - b.cx) + c * (y - b.cy)
        m = (np.abs(u) <= b.l / 2.0) & (np.abs(v) <= b.w / 2.0)
        inside |= m
        front |= m & (u > 0)
    return inside, front


def rasterize(scene: Scene, frame_pose: AgentPose | None = None):
    """(H,W) f32 occupancy raster in `frame_pose`'s frame (identity = ego).

    Front halves get value 1.0 and rear halves 0.5 so heading is recoverable
    from the raster.
    """
    x, y = scene.grid.cell_centers()
    if frame_pose is not None:
        pts = np.stack([x.ravel(), y.ravel()], axis=1)
        pe = frame_pose.to_ego(pts)
        x, y = pe[:, 0].reshape(x.shape), pe[:, 1].reshape(y.shape)
    inside, front = _box_fields(scene.boxes, x, y)
    r = np.where(inside, np.where(front, 1.0, 0.5), 0.0)
    return r.astype(np.float32)


@dataclass
class Observation:
    agent_id: int
    type_id: str
    pose: AgentPose
    raw: np.ndarray  # (2,H,W) f32, agent-local frame


def fixed_pattern(family_spec, shape):
    """The family's fixed-pattern noise field: a deterministic smooth additive
    artifact in the sensor frame, identical for every scene the family
    observes. Built as a short sum of smoothed outer products so it is
    spatially structured (blob-like) rather than white.
    """
    h, w = shape
    rng = derive_rng(family_spec.seed, "fpn", family_spec.type_id)
    pat = np.zeros(shape, dtype=np.float64)
    for _ in range(3):
        u = ndimage.uniform_filter(rng.standard_normal(h), size=max(3, h // 8))
        v = ndimage.uniform_filter(rng.standard_normal(w), size=max(3, w // 8))
        pat += np.outer(u, v)
    pat -= pat.mean()
    std = pat.std()
    if std > 0:
        pat /= std
    return (family_spec.fpn * pat).astype(np.float32)


def observe(scene: Scene, pose: AgentPose, family_spec, seed):
    """Agent-local raster with the family's sensor signature applied."""
    occ = rasterize(scene, frame_pose=pose)
    g = scene.grid
    x, y = g.cell_centers()
    dist = np.sqrt(x * x + y * y)
    rng = derive_rng(seed, "observe", family_spec.type_id)
    if family_spec.blur and family_spec.blur > 1:
        occ = ndimage.uniform_filter(occ, size=family_spec.blur, mode="constant")
    if family_spec.noise:
        occ = occ + rng.standard_normal(occ.shape).astype(np.float32) * family_spec.noise
    if family_spec.fpn:
        occ = occ + fixed_pattern(family_spec, occ.shape)
    rng_prior = np.clip(1.0 - dist / family_spec.range_m, 0.0, 1.0)
    raw = np.stack([occ, rng_prior.astype(np.float32)])
    raw[:, dist > family_spec.range_m] = 0.0
    return raw.astype(np.float32)


def make_sampler(pose: AgentPose, grid: GridSpec):
    """Bilinear sample info mapping an agent-frame (C,H,W) map to the ego frame.

    For each ego cell, find its position in the agent frame and the four
    bilinear corners; out-of-grid corners get weight zero.
    """
    x, y = grid.cell_centers()
    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    pa = pose.from_ego(pts)
    fj = pa[:, 0] / grid.res + grid.w / 2.0 - 0.5
    fi = pa[:, 1] / grid.res + grid.h / 2.0 - 0.5
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    di = fi - i0
    dj = fj - j0
    idx = np.empty((4, fi.size), dtype=np.int64)
    wts = np.empty((4, fi.size), dtype=np.float32)
    k = 0
    for oi, wi in ((i0, 1.0 - di), (i0 + 1, di)):
        for oj, wj in ((j0, 1.0 - dj), (j0 + 1, dj)):
            valid = (oi >= 0) & (oi < grid.h) & (oj >= 0) & (oj < grid.w)
            ii = np.clip(oi, 0, grid.h - 1)
            jj = np.clip(oj, 0, grid.w - 1)
            idx[k] = ii * grid.w + jj
            wts[k] = np.where(valid, wi * wj, 0.0).astype(np.float32)
            k += 1
    return idx, wts


def gt_masks(scene: Scene, num_scales):
    """Binary foreground masks for scales 1..L, each (1, H/2^l, W/2^l),
    built by max-pooling the full-resolution box-interior raster."""
    m = (rasterize(scene) > 0).astype(np.float32)
    masks = []
    for _ in range(num_scales):
        h, w = m.shape
        m = m.reshape(h // 2, 2, w // 2, 2).max(axis=(1, 3))
        masks.append(m[None].copy())
    return masks


def detection_targets(scene: Scene, anchor=(2.0, 4.0)):
    """Full-resolution head targets.

    A cell is positive iff its center lies inside a box -- the same rule the
    ground-truth raster uses. Returns (cls (H,W), reg (5,H,W), bins (H,W));
    reg is (dx, dy, log w/aw, log l/al, theta residual) with dx, dy measured
    from each positive cell's own center, and the direction bin is
    [theta >= 0] with the residual folded so bin + residual reconstruct
    theta exactly.
    """
    g = scene.grid
    cls = np.zeros((g.h, g.w), dtype=np.float32)
    reg = np.zeros((5, g.h, g.w), dtype=np.float32)
    bins = np.zeros((g.h, g.w), dtype=np.float32)
    aw, al = anchor
    x, y = g.cell_centers()
    for b in scene.boxes:
        inside, _ = _box_fields([b], x, y)
        if not inside.any():
            continue
        bin_ = 1.0 if b.theta >= 0 else 0.0
        res = b.theta - (np.pi / 2.0 if bin_ else -np.pi / 2.0)
        cls[inside] = 1.0
        reg[0][inside] = b.cx - x[inside]
        reg[1][inside] = b.cy - y[inside]
        reg[2][inside] = np.log(b.w / aw)
        reg[3][inside] = np.log(b.l / al)
        reg[4][inside] = res
        bins[inside] = bin_
    return cls, reg, bins


def decode_detections(cls_logits, reg, dir_logits, grid: GridSpec, anchor=(2.0, 4.0),
                      score_thresh=0.1, topk=512):
    """Decode head outputs (ndarrays) into scored boxes.

    Returns list of (score, GtBox) above the score threshold, best `topk` only
    (caps the NMS cost when the head is untrained).
    """
    aw, al = anchor
    prob = 1.0 / (1.0 + np.exp(-cls_logits[0].astype(np.float64)))
    keep = np.argwhere(prob > score_thresh)
    if len(keep) > topk:
        scores = prob[keep[:, 0], keep[:, 1]]
        keep = keep[np.argsort(-scores, kind="stable")[:topk]]
    out = []
    for i, j in keep:
        cell_x = (j + 0.5 - grid.w / 2.0) * grid.res
        cell_y = (i + 0.5 - grid.h / 2.0) * grid.res
        dx, dy, lw, ll, res = reg[:, i, j]
        bin_ = 1.0 if dir_logits[1, i, j] >= dir_logits[0, i, j] else 0.0
        theta = float(res) + (np.pi / 2.0 if bin_ else -np.pi / 2.0)
        out.append((float(prob[i, j]),
                    GtBox(cell_x + float(dx), cell_y + float(dy),
                          aw * float(np.exp(lw)), al * float(np.exp(ll)), theta)))
    out.sort(key=lambda t: -t[0])
    return out


# -- dataset on disk ------------------------------------------------------

@dataclass
class Sample:
    scene: Scene
    observations: list  # list of Observation


def build_sample(grid, families, ego_family_id, scene_seed, scene_kw=None):
    """One sample: the scene plus observations for [ego, extra-ego, one agent
    per non-ego family], each at a deterministic random pose."""
    scene = generate_scene(grid, scene_seed, **(scene_kw or {}))
    rng = derive_rng(scene_seed, "poses")
    obs = []
    fam_by_id = {f.type_id: f for f in families}
    ego = fam_by_id[ego_family_id]

    def rand_pose():
        return AgentPose(
            x=float(rng.uniform(-0.4, 0.4)) * 2 * grid.extent_x,
            y=float(rng.uniform(-0.4, 0.4)) * 2 * grid.extent_y,
            yaw=float(rng.uniform(-np.pi, np.pi)),
        )

    slots = [(ego, AgentPose(0.0, 0.0, 0.0)), (ego, rand_pose())]
    for f in families:
        if f.type_id != ego_family_id:
            slots.append((f, rand_pose()))
    for a, (fam, pose) in enumerate(slots):
        raw = observe(scene, pose, fam, derive_rng(scene_seed, "obs-seed", a).integers(2**31))
        obs.append(Observation(agent_id=a, type_id=fam.type_id, pose=pose, raw=raw))
    return Sample(scene=scene, observations=obs)


def save_sample(path, sample: Sample):
    arrays = {"gt.boxes": np.stack([b.as_array() for b in sample.scene.boxes])
              if sample.scene.boxes else np.zeros((0, 5), dtype=np.float32)}
    types = []
    for o in sample.observations:
        arrays[f"agent{o.agent_id}.pose"] = o.pose.as_array()
        arrays[f"agent{o.agent_id}.raw"] = o.raw
        types.append(o.type_id)
    meta = {"types": types, "seed": sample.scene.seed,
            "grid": [sample.scene.grid.h, sample.scene.grid.w, sample.scene.grid.res]}
    save_records(path, arrays, meta=meta)


def load_sample(path):
    arrays, _, meta = load_records(path)
    gh, gw, res = meta["grid"]
    grid = GridSpec(int(gh), int(gw), float(res))
    boxes = [GtBox(*row) for row in arrays["gt.boxes"]]
    scene = Scene(grid=grid, boxes=boxes, seed=meta["seed"])
    obs = []
    for a, tid in enumerate(meta["types"]):
        pose = AgentPose(*[float(v) for v in arrays[f"agent{a}.pose"]])
        obs.append(Observation(agent_id=a, type_id=tid, pose=pose,
                               raw=arrays[f"agent{a}.raw"]))
    return Sample(scene=scene, observations=obs)

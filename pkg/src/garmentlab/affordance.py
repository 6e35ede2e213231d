"""Grasp affordance: geometric ground truth, a synthetic tactile classifier,
the encoder-decoder scoring network, and its fine-tuning objective.

A pixel is graspable when the gripper can reach it from the side without
pushing through cloth and would close on at most two layers. The tactile
classifier reports what a grasp at a pixel would actually catch, including
the case where cloth earlier along the approach row is caught instead of
the target. Fine-tuning adapts a simulation-trained network to a shifted
deployment domain from sparse labeled grasps, regularized toward spatial
smoothness and toward the frozen simulation network.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import io as glio
from .descriptor import normalize_image
from .nn import Adam, Bilinear, Conv2d, ELU, flatten_params, load_flat
from .rng import substream
from .simgen import Camera, generate_scene
from .simgen.dataset import DEFAULT_DOMAIN, Domain

SUCCESS = "Success"
TOO_LITTLE = "TooLittle"
EXCESS = "Excess"
GRASP_CLASSES = (SUCCESS, TOO_LITTLE, EXCESS)


# ---------------------------------------------------------------------------
# gripper geometry


@dataclass(frozen=True)
class GripperSpec:
    """Desk-scale side-approach gripper.

    The jaw travels along an image row from the `approach` border toward the
    target. `clearance` pixels right next to the target are expected to
    contain cloth; beyond them, more than `slack` cloth pixels on the
    approach row count as a collision. `jaw_window` is the vertical extent
    the closing jaw captures, and `workspace` (x0, y0, x1, y1, half-open)
    bounds where grasp targets may lie; None means the whole image.
    """

    approach: str = "FromRight"
    jaw_window: int = 3
    clearance: int = 4
    slack: int = 2
    workspace: tuple | None = None
    max_layers: int = 2

    def __post_init__(self):
        if self.approach not in ("FromRight", "FromLeft"):
            raise ValueError(f"bad approach {self.approach!r}")
        if self.jaw_window < 1 or self.max_layers < 1:
            raise ValueError("jaw_window and max_layers must be >= 1")
        if self.clearance < 0 or self.slack < 0:
            raise ValueError("clearance and slack must be >= 0")

    def workspace_mask(self, shape) -> np.ndarray:
        h, w = shape
        if self.workspace is None:
            return np.ones((h, w), dtype=bool)
        x0, y0, x1, y1 = self.workspace
        ws = np.zeros((h, w), dtype=bool)
        ws[max(0, y0):min(h, y1), max(0, x0):min(w, x1)] = True
        return ws

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj):
        ws = obj.get("workspace")
        return cls(**{**obj, "workspace": tuple(ws) if ws else None})


def _cloth_ahead(mask: np.ndarray, gripper: GripperSpec) -> np.ndarray:
    """Per pixel, cloth pixels on its row between it and the approach-side
    border, not counting the `clearance` pixels adjacent to it."""
    cloth = mask.astype(np.int32)
    h, w = mask.shape
    c = gripper.clearance + 1
    out = np.zeros((h, w), dtype=np.int32)
    if gripper.approach == "FromRight":
        suffix = np.cumsum(cloth[:, ::-1], axis=1)[:, ::-1]
        if w > c:
            out[:, :w - c] = suffix[:, c:]
    else:
        prefix = np.cumsum(cloth, axis=1)
        if w > c:
            out[:, c:] = prefix[:, :w - c]
    return out


def label_affordance_gt(mask: np.ndarray, layers: np.ndarray,
                        gripper: GripperSpec) -> np.ndarray:
    """Binary graspability: cloth inside the workspace, a clear approach
    row, and at most `max_layers` layers under the pixel."""
    ok = mask & gripper.workspace_mask(mask.shape)
    ok &= layers <= gripper.max_layers
    ok &= _cloth_ahead(mask, gripper) <= gripper.slack
    return ok.astype(np.uint8)


def probe_grasp(mask: np.ndarray, layers: np.ndarray, pixel,
                gripper: GripperSpec):
    """Resolve a grasp by first contact along the approach row.

    The jaw travels from the approach border and closes on the first cloth
    column at or before the target, which may not be the target itself.
    Returns (resolved (x, y) or None, captured layer count).
    """
    h, w = mask.shape
    x, y = int(pixel[0]), int(pixel[1])
    x = min(max(x, 0), w - 1)
    y = min(max(y, 0), h - 1)
    row = mask[y]
    if gripper.approach == "FromRight":
        hits = np.nonzero(row[x:])[0]
        xr = x + int(hits.max()) if hits.size else None
    else:
        hits = np.nonzero(row[:x + 1])[0]
        xr = int(hits.min()) if hits.size else None
    if xr is None:
        return None, 0
    half = gripper.jaw_window // 2
    band = layers[max(0, y - half):min(h, y + half + 1), xr]
    return (xr, y), int(band.max())


def tactile_oracle(mask: np.ndarray, layers: np.ndarray, pixel,
                   gripper: GripperSpec, rng=None, p_slip: float = 0.0) -> str:
    """Three-way grasp outcome from resolved contact.

    Nothing caught reads as too little fabric; a graspable layer count is a
    success, except that thin pinches slip with probability `p_slip`; more
    than `max_layers` layers is an excess grasp.
    """
    _, count = probe_grasp(mask, layers, pixel, gripper)
    if count == 0:
        return TOO_LITTLE
    if count <= gripper.max_layers:
        if p_slip > 0.0 and rng is not None and rng.random() < p_slip:
            return TOO_LITTLE
        return SUCCESS
    return EXCESS


def flip_for_left(arr: np.ndarray) -> np.ndarray:
    """Mirror an image or map horizontally; the left-arm network is the
    right-arm network conjugated by this flip."""
    return np.ascontiguousarray(arr[:, ::-1])


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class AffordanceConfig:
    channels: tuple = (12, 24, 36, 48)
    image_size: tuple = (96, 128)
    iterations: int = 2500
    lr: float = 1e-3
    batch: int = 2
    seed: int = 0

    def validate(self):
        if len(self.channels) != 4:
            raise ValueError("channels must list 4 stage widths")
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError("image size must be divisible by 8")
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be >= 1")
        return self

    def to_json(self):
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, obj):
        return cls(**{**obj, "channels": tuple(obj["channels"]),
                      "image_size": tuple(obj["image_size"])}).validate()


class _UNet:
    """Three-level encoder-decoder with skip connections and a logit head."""

    def __init__(self, cfg: AffordanceConfig, rng, dtype=np.float32):
        c0, c1, c2, c3 = cfg.channels
        h, w = cfg.image_size
        self.stem = [Conv2d(3, c0, rng=rng, dtype=dtype, name="stem"), ELU()]
        self.down = [
            [Conv2d(c0, c1, stride=2, rng=rng, dtype=dtype, name="down1"), ELU()],
            [Conv2d(c1, c2, stride=2, rng=rng, dtype=dtype, name="down2"), ELU()],
            [Conv2d(c2, c3, stride=2, rng=rng, dtype=dtype, name="down3"), ELU()],
        ]
        self.up = [
            [Bilinear(h // 4, w // 4),
             Conv2d(c3 + c2, c2, rng=rng, dtype=dtype, name="up1"), ELU()],
            [Bilinear(h // 2, w // 2),
             Conv2d(c2 + c1, c1, rng=rng, dtype=dtype, name="up2"), ELU()],
            [Bilinear(h, w),
             Conv2d(c1 + c0, c0, rng=rng, dtype=dtype, name="up3"), ELU()],
        ]
        self.head = Conv2d(c0, 1, k=1, pad=0, rng=rng, dtype=dtype, name="head")
        self._skip_channels = (c2, c1, c0)

    def params(self):
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        return out

    def _layers(self):
        yield from self.stem
        for stage in self.down:
            yield from stage
        for stage in self.up:
            yield from stage
        yield self.head

    @staticmethod
    def _run(stage, x):
        for layer in stage:
            x = layer.forward(x)
        return x

    @staticmethod
    def _run_back(stage, g):
        for layer in reversed(stage):
            g = layer.backward(g)
        return g

    def forward(self, x):
        a0 = self._run(self.stem, x)
        a1 = self._run(self.down[0], a0)
        a2 = self._run(self.down[1], a1)
        a3 = self._run(self.down[2], a2)
        skips = (a2, a1, a0)
        u = a3
        for stage, skip in zip(self.up, skips):
            u = stage[0].forward(u)
            u = np.concatenate([u, skip], axis=3)
            u = stage[2].forward(stage[1].forward(u))
        return self.head.forward(u)

    def backward(self, g):
        g = self.head.backward(g)
        skip_grads = []
        for stage, c_skip in zip(reversed(self.up),
                                 reversed(self._skip_channels)):
            g = stage[1].backward(stage[2].backward(g))
            skip_grads.append(g[..., -c_skip:])
            g = stage[0].backward(np.ascontiguousarray(g[..., :-c_skip]))
        gs2, gs1, gs0 = skip_grads[2], skip_grads[1], skip_grads[0]
        g = self._run_back(self.down[2], g) + gs2
        g = self._run_back(self.down[1], g) + gs1
        g = self._run_back(self.down[0], g) + gs0
        return self._run_back(self.stem, g)


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_logits(z, y):
    """Mean binary cross-entropy on logits; returns (loss, dloss/dz)."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (_sigmoid(z) - y) / z.size
    return float(loss.mean()), grad


class AffordanceNet:
    """Scores per-pixel graspability for the right arm; the left arm reuses
    the same weights on a mirrored image."""

    def __init__(self, cfg: AffordanceConfig, net=None, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.net = net or _UNet(cfg, substream(cfg.seed, "aff-init"),
                                dtype=dtype)
        self.history = []

    def params(self):
        return self.net.params()

    def logits(self, x):
        return self.net.forward(x)

    def predict(self, image, arm: str = "right") -> np.ndarray:
        """(H, W) affordance scores in [0, 1]."""
        if arm not in ("right", "left"):
            raise ValueError(f"bad arm {arm!r}")
        if arm == "left":
            return flip_for_left(self.predict(flip_for_left(image)))
        z = self.net.forward(normalize_image(image))
        return _sigmoid(z[0, :, :, 0]).astype(np.float32)

    def clone(self) -> "AffordanceNet":
        other = AffordanceNet(self.cfg)
        layout, flat = flatten_params(self.params())
        load_flat(other.params(), layout, flat)
        return other

    def save(self, path, extra=None):
        layout, flat = flatten_params(self.params())
        header = {"kind": "affordance", "config": self.cfg.to_json(),
                  "layout": layout,
                  "history_tail": [round(v, 6) for v in self.history[-50:]]}
        if extra:
            header["extra"] = extra
        glio.write_checkpoint(path, header, flat)

    @classmethod
    def load(cls, path) -> "AffordanceNet":
        header, payload = glio.read_checkpoint(path)
        if header.get("kind") != "affordance":
            raise ValueError(f"not an affordance checkpoint: {path}")
        model = cls(AffordanceConfig.from_json(header["config"]))
        load_flat(model.params(), header["layout"], payload)
        return model


# ---------------------------------------------------------------------------
# datasets


@dataclass
class AffordanceItem:
    """One rendered view with its geometric ground truth."""

    image: np.ndarray
    mask: np.ndarray
    layers: np.ndarray
    gt: np.ndarray
    scene: int
    rotation: int


def build_affordance_set(n_scenes: int, seed: int, gripper: GripperSpec,
                         domain: Domain = DEFAULT_DOMAIN,
                         image_size=(96, 128), rotations: int = 12,
                         mesh_density: int = 700,
                         kinds=("suspended", "table")) -> list:
    """Scenes rendered at every rotation step, each with its GT map."""
    items = []
    for i in range(n_scenes):
        kind = kinds[i % len(kinds)]
        scene, _, view = generate_scene(seed, i, kind, image_size=image_size,
                                        mesh_density=mesh_density,
                                        domain=domain)
        for k in range(rotations):
            if k == 0:
                v = view
            else:
                cam = Camera(rotation=2.0 * math.pi * k / rotations)
                v = scene.render(camera=cam)
            items.append(AffordanceItem(
                image=v.image, mask=v.mask, layers=v.layers,
                gt=label_affordance_gt(v.mask, v.layers, gripper),
                scene=i, rotation=k))
    return items


def train_affordance_sim(items: list, cfg: AffordanceConfig) -> AffordanceNet:
    """Fit the network to geometric GT maps with per-pixel cross-entropy."""
    if not items:
        raise ValueError("empty affordance dataset")
    cfg.validate()
    model = AffordanceNet(cfg)
    opt = Adam(model.params(), lr=cfg.lr)
    stream = substream(cfg.seed, "aff-train")
    n = len(items)
    for _ in range(cfg.iterations):
        idx = stream.choice(n, size=min(cfg.batch, n), replace=False)
        x = np.concatenate([normalize_image(items[i].image) for i in idx])
        y = np.stack([items[i].gt for i in idx]).astype(np.float64)[..., None]
        z = model.logits(x)
        loss, gz = bce_logits(z, y)
        opt.zero_grad()
        model.net.backward(gz.astype(np.float32))
        opt.step()
        model.history.append(loss)
    return model


# ---------------------------------------------------------------------------
# grasp samples and fine-tuning losses


@dataclass
class GraspSample:
    """One labeled grasp attempt on a deployment image."""

    scene: int
    pixel: tuple
    outcome: str
    resolved_layers: int

    @property
    def label(self) -> float:
        return 1.0 if self.outcome == SUCCESS else 0.0

    def to_json(self):
        return {"scene": int(self.scene),
                "pixel": [int(self.pixel[0]), int(self.pixel[1])],
                "outcome": self.outcome,
                "resolved_layers": int(self.resolved_layers)}

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["scene"]), tuple(obj["pixel"]), obj["outcome"],
                   int(obj["resolved_layers"]))


def sample_grasps(items: list, n: int, gripper: GripperSpec, rng,
                  p_slip: float = 0.0, cloth_bias: float = 0.6) -> list:
    """Draw labeled grasp attempts over a set of rendered items.

    A `cloth_bias` fraction of targets land on cloth pixels, the rest
    anywhere in frame, so both positives and empty grasps appear.
    """
    samples = []
    h, w = items[0].mask.shape
    pools = []
    for item in items:
        ys, xs = np.nonzero(item.mask)
        pools.append(np.stack([xs, ys], axis=1))
    for _ in range(n):
        i = int(rng.integers(len(items)))
        if pools[i].size and rng.random() < cloth_bias:
            px = tuple(int(v) for v in pools[i][rng.integers(len(pools[i]))])
        else:
            px = (int(rng.integers(w)), int(rng.integers(h)))
        _, count = probe_grasp(items[i].mask, items[i].layers, px, gripper)
        outcome = tactile_oracle(items[i].mask, items[i].layers, px, gripper,
                                 rng=rng, p_slip=p_slip)
        samples.append(GraspSample(scene=i, pixel=px, outcome=outcome,
                                   resolved_layers=count))
    return samples


def neighbor_loss(A, pixel, y_gt, d_px: int, sigma_n: float,
                  with_grad: bool = False):
    """Gaussian-weighted squared error over a window around a labeled grasp.

    The window is d_px on a side, clipped at image bounds; weights fall off
    with distance from the labeled pixel and the average runs over the
    clipped window size.
    """
    if d_px < 1 or d_px % 2 == 0:
        raise ValueError("d_px must be odd and >= 1")
    h, w = A.shape
    x, y = int(pixel[0]), int(pixel[1])
    r = d_px // 2
    y0, y1 = max(0, y - r), min(h, y + r + 1)
    x0, x1 = max(0, x - r), min(w, x + r + 1)
    win = A[y0:y1, x0:x1]
    yy, xx = np.mgrid[y0:y1, x0:x1]
    wgt = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * sigma_n ** 2))
    n = win.size
    diff = win - y_gt
    loss = float(np.sum(wgt * diff * diff) / n)
    if not with_grad:
        return loss
    grad = np.zeros_like(A, dtype=np.float64)
    grad[y0:y1, x0:x1] = 2.0 * wgt * diff / n
    return loss, grad


def spatial_loss(A, with_grad: bool = False):
    """Total variation: summed absolute differences between row and column
    neighbors."""
    A = np.asarray(A, dtype=np.float64)
    dv = A[1:, :] - A[:-1, :]
    dh = A[:, 1:] - A[:, :-1]
    loss = float(np.abs(dv).sum() + np.abs(dh).sum())
    if not with_grad:
        return loss
    grad = np.zeros_like(A)
    sv, sh = np.sign(dv), np.sign(dh)
    grad[1:, :] += sv
    grad[:-1, :] -= sv
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    return loss, grad


def sim_consistency_loss(A, A_sim, with_grad: bool = False):
    """Mean squared difference from the frozen simulation network's map."""
    A = np.asarray(A, dtype=np.float64)
    A_sim = np.asarray(A_sim, dtype=np.float64)
    if A.shape != A_sim.shape:
        raise ValueError("map shapes differ")
    diff = A - A_sim
    loss = float(np.mean(diff * diff))
    if not with_grad:
        return loss
    return loss, 2.0 * diff / A.size


@dataclass(frozen=True)
class FinetuneConfig:
    d_px: int = 9
    sigma_n: float = 2.0
    lam_spatial: float = 1e-4
    lam_sim: float = 0.1
    lam_weight: float = 1e-4
    learning_rate: float = 5e-4
    iterations: int = 600
    seed: int = 0

    def validate(self):
        if self.d_px < 1 or self.d_px % 2 == 0:
            raise ValueError("d_px must be odd and >= 1")
        if self.sigma_n <= 0:
            raise ValueError("sigma_n must be positive")
        if min(self.lam_spatial, self.lam_sim, self.lam_weight) < 0:
            raise ValueError("loss weights must be >= 0")
        return self

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj).validate()


def finetune_map_loss(A, samples, sim_map, cfg: FinetuneConfig):
    """Total fine-tuning objective on one affordance map; returns
    (loss, dloss/dA). Weight decay is not part of this term; it acts in the
    optimizer."""
    total = 0.0
    grad = np.zeros_like(np.asarray(A, dtype=np.float64))
    inv = 1.0 / max(len(samples), 1)
    for s in samples:
        l, g = neighbor_loss(A, s.pixel, s.label, cfg.d_px, cfg.sigma_n,
                             with_grad=True)
        total += l * inv
        grad += g * inv
    if cfg.lam_spatial:
        l, g = spatial_loss(A, with_grad=True)
        total += cfg.lam_spatial * l
        grad += cfg.lam_spatial * g
    if cfg.lam_sim:
        l, g = sim_consistency_loss(A, sim_map, with_grad=True)
        total += cfg.lam_sim * l
        grad += cfg.lam_sim * g
    return total, grad


def finetune(sim_model: AffordanceNet, items: list, samples: list,
             cfg: FinetuneConfig) -> AffordanceNet:
    """Adapt a simulation-trained network to deployment images from labeled
    grasps, staying smooth and close to the frozen starting network."""
    cfg.validate()
    if not samples:
        raise ValueError("no grasp samples")
    model = sim_model.clone()
    by_scene = {}
    for s in samples:
        by_scene.setdefault(s.scene, []).append(s)
    scene_ids = sorted(by_scene)
    sim_maps = {i: sim_model.predict(items[i].image) for i in scene_ids}
    opt = Adam(model.params(), lr=cfg.learning_rate,
               weight_decay=cfg.lam_weight)
    stream = substream(cfg.seed, "aff-finetune")
    for _ in range(cfg.iterations):
        sid = scene_ids[int(stream.integers(len(scene_ids)))]
        x = normalize_image(items[sid].image)
        z = model.logits(x)
        A = _sigmoid(z[0, :, :, 0])
        loss, gA = finetune_map_loss(A, by_scene[sid], sim_maps[sid], cfg)
        gz = (gA * A * (1.0 - A))[None, :, :, None]
        opt.zero_grad()
        model.net.backward(gz.astype(np.float32))
        opt.step()
        model.history.append(loss)
    return model


def mean_neighbor_loss(model: AffordanceNet, items: list, samples: list,
                       cfg: FinetuneConfig) -> float:
    """Average per-sample neighbor loss of a model over a sample set."""
    by_scene = {}
    for s in samples:
        by_scene.setdefault(s.scene, []).append(s)
    total, count = 0.0, 0
    for sid, group in sorted(by_scene.items()):
        A = model.predict(items[sid].image)
        for s in group:
            total += neighbor_loss(A, s.pixel, s.label, cfg.d_px, cfg.sigma_n)
            count += 1
    return total / max(count, 1)

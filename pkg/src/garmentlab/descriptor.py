"""Dense pixel descriptors for garment correspondence.

A fully convolutional network maps an RGB frame to a d-channel descriptor
image. Correspondence between a query pixel in one frame and a canonical
flat view is read out as a softmax over all canonical pixels of the
negative squared descriptor distance; the peak of that distribution is the
predicted match and its probability is the match confidence.

Training minimizes KL(target || predicted) where the target is an isotropic
Gaussian around the true pixel, optionally with a second mode at the
left/right mirror of the truth so the network may resolve the garment's
bilateral ambiguity either way. A squared-hinge contrastive loss over
match/non-match pixel pairs is included as the classical baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as glio
from . import nn
from .rng import substream
from .simgen.dataset import load_scene_bundle

IMG_MEAN = 0.5
IMG_STD = 0.25


@dataclass
class DescriptorConfig:
    dim: int = 16
    sigma: float = 2.0
    loss: str = "symmetric"        # "symmetric" | "nonsymmetric" | "contrastive"
    iterations: int = 10000
    lr: float = 1e-3
    queries_per_step: int = 96
    nonmatches_per_query: int = 24  # contrastive only
    margin: float = 0.5             # contrastive hinge margin on distance
    occlusion_prob: float = 0.5
    channels: tuple = (16, 32, 32, 64, 64)
    image_size: tuple = (96, 128)
    seed: int = 0

    def validate(self):
        if self.loss not in ("symmetric", "nonsymmetric", "contrastive"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.dim < 1 or self.sigma <= 0:
            raise ValueError("dim must be >= 1 and sigma > 0")

    def to_json(self):
        d = self.__dict__.copy()
        d["channels"] = list(self.channels)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (1, H, W, 3) network input."""
    x = image.astype(np.float32) / 255.0
    x = (x - IMG_MEAN) / IMG_STD
    return np.ascontiguousarray(x[None])


def build_network(cfg: DescriptorConfig, rng: np.random.Generator,
                  dtype=np.float32) -> nn.Sequential:
    h, w = cfg.image_size
    c = cfg.channels
    return nn.Sequential(
        nn.Conv2d(3, c[0], k=3, stride=1, rng=rng, dtype=dtype, name="enc0"),
        nn.ELU(),
        nn.Conv2d(c[0], c[1], k=3, stride=2, rng=rng, dtype=dtype, name="enc1"),
        nn.ELU(),
        nn.Conv2d(c[1], c[2], k=3, stride=1, rng=rng, dtype=dtype, name="enc2"),
        nn.ELU(),
        nn.Conv2d(c[2], c[3], k=3, stride=2, rng=rng, dtype=dtype, name="enc3"),
        nn.ELU(),
        nn.Conv2d(c[3], c[4], k=3, stride=1, rng=rng, dtype=dtype, name="enc4"),
        nn.ELU(),
        nn.Bilinear(h, w),
        nn.Conv2d(c[4], cfg.dim, k=1, pad=0, rng=rng, dtype=dtype, name="head"),
    )


class DescriptorNet:
    """Network plus its config; the public matching interface."""

    def __init__(self, cfg: DescriptorConfig, net: nn.Sequential | None = None):
        cfg.validate()
        self.cfg = cfg
        self.net = net or build_network(cfg, substream(cfg.seed, "desc-init"))

    def features(self, image: np.ndarray) -> np.ndarray:
        """RGB uint8 (H, W, 3) -> (H, W, dim) float32 descriptor map."""
        return self.net.forward(normalize_image(image))[0]

    def features_pair(self, image_a, image_b):
        x = np.concatenate([normalize_image(image_a), normalize_image(image_b)])
        out = self.net.forward(x)
        return out[0], out[1]

    def save(self, path, extra: dict | None = None):
        layout, flat = nn.flatten_params(self.net.params())
        header = {"kind": "descriptor", "config": self.cfg.to_json(),
                  "layout": layout}
        if extra:
            header.update(extra)
        glio.write_checkpoint(path, header, flat)

    @classmethod
    def load(cls, path) -> "DescriptorNet":
        header, flat = glio.read_checkpoint(path)
        if header.get("kind") != "descriptor":
            raise ValueError(f"{path}: not a descriptor checkpoint")
        cfg = DescriptorConfig.from_json(header["config"])
        model = cls(cfg)
        nn.load_flat(model.net.params(), header["layout"], flat)
        return model


def match_distribution(feat_query: np.ndarray, pixel,
                       feat_target: np.ndarray) -> np.ndarray:
    """Probability over every target pixel of matching `pixel` in the query
    frame: softmax of negative squared descriptor distance."""
    x, y = int(pixel[0]), int(pixel[1])
    a = feat_query[y, x, :].astype(np.float64)
    h, w, d = feat_target.shape
    fb = feat_target.reshape(-1, d).astype(np.float64)
    z = -(np.sum(a * a) - 2.0 * (fb @ a) + np.sum(fb * fb, axis=1))
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return p.reshape(h, w)


def best_match(feat_query, pixel, feat_target):
    """((x, y), confidence): the mode of the match distribution and its
    probability mass."""
    p = match_distribution(feat_query, pixel, feat_target)
    flat = int(np.argmax(p))
    h, w = p.shape
    return (flat % w, flat // w), float(p.ravel()[flat])


def target_distribution(shape, modes, sigma: float) -> np.ndarray:
    """Isotropic Gaussian mixture over the pixel grid, one component per
    (x, y) mode, truncated at 4 sigma and normalized to sum 1."""
    h, w = shape
    q = np.zeros((h, w))
    r = max(1, int(math.ceil(4.0 * sigma)))
    for mx, my in modes:
        x0, x1 = max(0, int(mx) - r), min(w - 1, int(mx) + r)
        y0, y1 = max(0, int(my) - r), min(h - 1, int(my) + r)
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        q[y0:y1 + 1, x0:x1 + 1] += np.exp(
            -((xs - mx) ** 2 + (ys - my) ** 2) / (2.0 * sigma * sigma))
    s = q.sum()
    if s <= 0:
        raise ValueError("target distribution has no support inside the image")
    return q / s


def kl_divergence(q: np.ndarray, p: np.ndarray, eps: float = 0.0) -> float:
    """KL(q || p) restricted to the support of q.

    With the default eps=0 this is exact and returns +inf when p vanishes
    somewhere q does not; pass a small eps to clamp instead.
    """
    sup = q > 0
    with np.errstate(divide="ignore"):
        lp = np.log(p[sup] + eps)
    return float(np.sum(q[sup] * (np.log(q[sup]) - lp)))


def distributional_loss(feat_scene, feat_canon, queries, targets):
    """Mean KL over queries plus gradients w.r.t. both descriptor maps.

    queries: (Q, 2) int pixel (x, y) in the scene frame.
    targets: (Q, H*W) rows of target distributions over the canonical frame.
    Returns (loss, grad_scene, grad_canon), gradients in the dtype of the
    inputs.
    """
    h, w, d = feat_canon.shape
    qn = len(queries)
    a = feat_scene[queries[:, 1], queries[:, 0], :].astype(np.float64)
    fb = feat_canon.reshape(-1, d).astype(np.float64)    # (HW, d)
    d2 = (np.sum(a * a, axis=1)[:, None] - 2.0 * (a @ fb.T)
          + np.sum(fb * fb, axis=1)[None, :])
    z = -d2
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    log_p = z - np.log(denom)       # exact log-softmax, no epsilon floor

    sup = targets > 0
    loss = float(np.sum(targets[sup] * (np.log(targets[sup])
                                        - log_p[sup]))) / qn

    coef = (p - targets) / qn                       # dL/dz, rows sum to 0
    ga = 2.0 * (coef @ fb)                          # (Q, d)
    col = coef.sum(axis=0)
    gfb = -2.0 * fb * col[:, None] + 2.0 * (coef.T @ a)

    grad_scene = np.zeros_like(feat_scene)
    np.add.at(grad_scene, (queries[:, 1], queries[:, 0]),
              ga.astype(feat_scene.dtype))
    grad_canon = gfb.reshape(h, w, d).astype(feat_canon.dtype)
    return loss, grad_scene, grad_canon


def contrastive_loss(feat_scene, feat_canon, queries, matches, nonmatches,
                     margin: float):
    """Squared distances for matches, squared hinge below `margin` for
    non-matches, averaged per pair; returns (loss, grads) like the
    distributional loss.

    matches: (Q, 2) canonical pixel per query; nonmatches: (Q, K, 2).
    """
    h, w, d = feat_canon.shape
    qn, k = nonmatches.shape[:2]
    a = feat_scene[queries[:, 1], queries[:, 0], :].astype(np.float64)
    bm = feat_canon[matches[:, 1], matches[:, 0], :].astype(np.float64)
    bn = feat_canon[nonmatches[..., 1].ravel(),
                    nonmatches[..., 0].ravel(), :].astype(np.float64)
    bn = bn.reshape(qn, k, d)

    diff_m = a - bm
    loss_m = np.sum(diff_m * diff_m, axis=1)
    diff_n = a[:, None, :] - bn
    dist_n = np.sqrt(np.maximum(np.sum(diff_n * diff_n, axis=2), 1e-18))
    viol = np.maximum(0.0, margin - dist_n)
    loss = float(loss_m.mean() + (viol ** 2).sum() / (qn * k))

    ga = 2.0 * diff_m / qn
    gbm = -2.0 * diff_m / qn
    scale = (-2.0 * viol / np.maximum(dist_n, 1e-18) / (qn * k))[..., None]
    gn = scale * diff_n
    ga += gn.sum(axis=1)
    gbn = -gn

    grad_scene = np.zeros_like(feat_scene)
    np.add.at(grad_scene, (queries[:, 1], queries[:, 0]),
              ga.astype(feat_scene.dtype))
    grad_canon = np.zeros_like(feat_canon)
    np.add.at(grad_canon, (matches[:, 1], matches[:, 0]),
              gbm.astype(feat_canon.dtype))
    flat = nonmatches.reshape(-1, 2)
    np.add.at(grad_canon, (flat[:, 1], flat[:, 0]),
              gbn.reshape(-1, d).astype(feat_canon.dtype))
    return loss, grad_scene, grad_canon


def occlusion_augment(image: np.ndarray, mask: np.ndarray,
                      rng: np.random.Generator):
    """Drop 1-3 random rectangles over the frame; returns (image, occluded)
    where `occluded` flags pixels whose evidence was destroyed."""
    h, w = mask.shape
    out = image.copy()
    occ = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        rw = int(rng.integers(6, 26))
        rh = int(rng.integers(6, 26))
        x0 = int(rng.integers(0, max(1, w - rw)))
        y0 = int(rng.integers(0, max(1, h - rh)))
        color = rng.integers(0, 256, size=3, dtype=np.uint8)
        out[y0:y0 + rh, x0:x0 + rw] = color
        occ[y0:y0 + rh, x0:x0 + rw] = True
    return out, occ


class _ScenePack:
    """One training sample held in RAM."""

    __slots__ = ("image", "mask", "corr", "canonical", "canonical_mask",
                 "mirror", "query_pool")

    def __init__(self, bundle):
        self.image = bundle["image"]
        self.mask = bundle["mask"]
        self.corr = bundle["corr"]
        self.canonical = bundle["canonical"]
        self.canonical_mask = bundle["canonical_mask"]
        self.mirror = bundle["mirror"]
        ys, xs = np.nonzero(self.mask & np.isfinite(self.corr[..., 0]))
        self.query_pool = np.stack([xs, ys], axis=1)


def load_packs(dataset_dir, indices=None) -> list:
    root = Path(dataset_dir)
    manifest = glio.read_json(root / "manifest.json")
    entries = manifest["scenes"]
    if indices is not None:
        entries = [entries[i] for i in indices]
    return [_ScenePack(load_scene_bundle(root / e["path"])) for e in entries]


def _clip_pixels(p, w, h):
    p[:, 0] = np.clip(p[:, 0], 0, w - 1)
    p[:, 1] = np.clip(p[:, 1], 0, h - 1)
    return p


def train_descriptor(dataset_dir, cfg: DescriptorConfig, indices=None,
                     log_every: int = 0, callback=None) -> DescriptorNet:
    """Train a descriptor on scene bundles; deterministic in (cfg, data)."""
    cfg.validate()
    model = DescriptorNet(cfg)
    packs = [p for p in load_packs(dataset_dir, indices)
             if len(p.query_pool) >= 16]
    if not packs:
        raise ValueError(f"no usable scenes under {dataset_dir}")
    opt = nn.Adam(model.net.params(), lr=cfg.lr)
    stream = substream(cfg.seed, "desc-train", cfg.loss)
    h, w = cfg.image_size
    hw = h * w
    history = []

    for it in range(cfg.iterations):
        pack = packs[int(stream.integers(len(packs)))]
        image = pack.image
        pool = pack.query_pool
        if cfg.occlusion_prob > 0 and stream.random() < cfg.occlusion_prob:
            image, occ = occlusion_augment(image, pack.mask, stream)
            keep = ~occ[pool[:, 1], pool[:, 0]]
            if keep.sum() >= 8:
                pool = pool[keep]
        qn = min(cfg.queries_per_step, len(pool))
        queries = pool[stream.choice(len(pool), size=qn, replace=False)]
        gt = pack.corr[queries[:, 1], queries[:, 0]]
        gt_px = _clip_pixels(np.rint(gt).astype(np.int64), w, h)

        x = np.concatenate([normalize_image(image),
                            normalize_image(pack.canonical)])
        feats = model.net.forward(x)
        fa, fb = feats[0], feats[1]

        if cfg.loss == "contrastive":
            cys, cxs = np.nonzero(pack.canonical_mask)
            pick = stream.integers(len(cys),
                                   size=qn * cfg.nonmatches_per_query)
            non = np.stack([cxs[pick], cys[pick]], axis=1) \
                .reshape(qn, cfg.nonmatches_per_query, 2)
            loss, gfa, gfb = contrastive_loss(fa, fb, queries, gt_px, non,
                                              cfg.margin)
        else:
            modes_list = []
            for i in range(qn):
                modes = [tuple(gt[i])]
                if cfg.loss == "symmetric":
                    m = pack.mirror[gt_px[i, 1], gt_px[i, 0]]
                    if np.isfinite(m[0]):
                        modes.append((float(m[0]), float(m[1])))
                modes_list.append(modes)
            targets = np.stack([
                target_distribution((h, w), m, cfg.sigma).ravel()
                for m in modes_list])
            loss, gfa, gfb = distributional_loss(fa, fb, queries, targets)

        opt.zero_grad()
        model.net.backward(np.stack([gfa, gfb]))
        opt.step()
        history.append(loss)
        if log_every and (it + 1) % log_every == 0:
            recent = float(np.mean(history[-log_every:]))
            print(f"[desc {cfg.loss}] iter {it + 1}/{cfg.iterations} "
                  f"loss {recent:.4f}", flush=True)
        if callback is not None:
            callback(it, loss, model)
    model.history = history
    return model


def pca_visualize(feat: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Project an (H, W, d) descriptor map to RGB via its top 3 principal
    components, for quick visual inspection."""
    h, w, d = feat.shape
    flat = feat.reshape(-1, d).astype(np.float64)
    sel = flat if mask is None else flat[mask.ravel()]
    mu = sel.mean(axis=0)
    centered = sel - mu
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = (flat - mu) @ vt[:3].T
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    rgb = (proj - lo) / np.maximum(hi - lo, 1e-12)
    img = (rgb.reshape(h, w, 3) * 255).astype(np.uint8)
    if mask is not None:
        img[~mask] = 0
    return img

"""Dataset generation: sampled garments, deformations, and disk bundles.

A dataset is a directory of scene bundles plus a manifest. Each bundle
holds the rendered image, the garment mask, the per-pixel layer count, and
the exact pixel-to-canonical correspondence, so nothing downstream ever
needs the mesh. Everything is reproducible from (seed, config): the
manifest records per-file digests, and regenerating with the same arguments
writes byte-identical files.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .. import io as glio
from ..rng import substream
from . import render
from .deform import DrapeOp, FoldOp, RigidOp, Scene, WarpOp, geodesic_distances
from .render import RenderConfig
from .template import (FRAME_MARGIN, GarmentParams, STIFFNESS_RANGE,
                       build_canonical, frame_transform)

_PALETTE_POOL = (
    (186, 60, 70), (224, 208, 190), (52, 84, 140), (228, 190, 80),
    (70, 130, 96), (240, 240, 238), (140, 90, 160), (40, 44, 52),
    (210, 120, 60), (96, 110, 120),
)


@dataclasses.dataclass(frozen=True)
class Domain:
    """Scene-sampling ranges. The default reproduces the standard training
    distribution; shifted instances model a deployment domain whose
    appearance and deformation statistics differ from training."""

    warp_magnitude: tuple = (0.02, 0.12)
    warp_bandwidth: tuple = (0.15, 0.45)
    drape_beta: tuple = (0.35, 0.60)
    brightness: tuple = (0.85, 1.08)
    palette_start: int = 0
    palette_count: int = len(_PALETTE_POOL)

    def to_json(self):
        return dataclasses.asdict(self)


DEFAULT_DOMAIN = Domain()

# appearance and deformation statistics deliberately outside the training
# ranges: stronger, tighter warps, heavier drape spread, dim light, and the
# back half of the palette pool only
DEPLOYMENT_DOMAIN = Domain(
    warp_magnitude=(0.10, 0.22), warp_bandwidth=(0.10, 0.32),
    drape_beta=(0.50, 0.75), brightness=(0.60, 0.95),
    palette_start=5, palette_count=5)


def sample_params(rng: np.random.Generator, mesh_density: int = 700,
                  domain: Domain = DEFAULT_DOMAIN) -> GarmentParams:
    """Draw garment parameters from the dataset distribution."""
    if rng.random() < 0.65:
        sleeve = rng.uniform(0.0, 0.25)        # short sleeve
    else:
        sleeve = rng.uniform(0.70, 1.0)        # long sleeve
    neck = "U" if rng.random() < 0.80 else "V"
    collar_hem = bool(rng.random() < 0.80)
    bottom_hem = bool(rng.random() < 0.30)
    stiffness = float(rng.uniform(*STIFFNESS_RANGE))
    texture = ["solid", "stripes", "checker"][int(rng.choice(3, p=[0.4, 0.35, 0.25]))]
    n_colors = 1 if texture == "solid" else int(rng.integers(2, 4))
    pal_idx = rng.choice(domain.palette_count, size=min(n_colors, domain.palette_count),
                         replace=False) + domain.palette_start
    palette = tuple(_PALETTE_POOL[i] for i in pal_idx)
    return GarmentParams(
        sleeve_length=float(sleeve), neck_type=neck, collar_hem=collar_hem,
        bottom_hem=bottom_hem, stiffness=stiffness, palette=palette,
        texture=texture, mesh_density=mesh_density)


def _sample_fold(rng, positions, max_fraction):
    """A fold line whose folded side holds at most `max_fraction` of the
    cloth; returns None when no sampled line qualifies."""
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    for _ in range(12):
        point = rng.uniform(lo, hi)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        d = np.array([math.cos(ang), math.sin(ang)])
        n = np.array([-d[1], d[0]])
        frac = np.mean((positions - point) @ n > 0.0)
        if frac > 0.5:
            d, frac = -d, 1.0 - frac
        if 0.04 <= frac <= max_fraction:
            return FoldOp(point=tuple(point), direction=tuple(d))
    return None


def _sample_warps(rng, positions, n, domain=DEFAULT_DOMAIN):
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    ops = []
    for _ in range(n):
        center = rng.uniform(lo, hi)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        mag = rng.uniform(*domain.warp_magnitude)
        shift = (mag * math.cos(ang), mag * math.sin(ang))
        ops.append(WarpOp(center=tuple(center), shift=shift,
                          bandwidth=float(rng.uniform(*domain.warp_bandwidth))))
    return ops


def sample_scene(template, kind: str, rng: np.random.Generator,
                 image_size=(96, 128), domain: Domain = DEFAULT_DOMAIN) -> Scene:
    """Compose a deformation sequence for one garment.

    Suspended scenes drape from a random pin, then take small folds and
    warps; table scenes fold flat cloth, warp it, and settle at a random
    orientation near the frame center.
    """
    h, w = image_size
    s, ox, oy = frame_transform(h, w)
    ops = []
    if kind == "suspended":
        pin = int(rng.integers(template.n_vertices))
        g = geodesic_distances(template, pin)
        span = (h - 1 - 2.0 * FRAME_MARGIN) / s
        alpha_cloth = 0.82 + 0.012 * (template.params.stiffness - STIFFNESS_RANGE[0])
        alpha = min(alpha_cloth, span / max(g.max(), 1e-9))
        beta = float(rng.uniform(*domain.drape_beta))
        ops.append(DrapeOp(pin_vertex=pin, alpha=float(alpha), beta=beta))
        pin_pos = template.vertices[pin]
        top_y = (FRAME_MARGIN + 1.0 - oy) / s
        ops.append(RigidOp(angle=0.0, pivot=(0.0, 0.0),
                           translation=(-float(pin_pos[0]),
                                        float(top_y - pin_pos[1]))))
        n_folds = int(rng.integers(0, 3))
        max_frac = 0.25
    else:
        n_folds = int(rng.integers(0, 4))
        max_frac = 0.55

    positions = template.vertices.copy()
    layers = np.zeros(template.n_vertices, dtype=np.int64)
    for op in ops:
        positions, layers = op.apply(template, positions, layers)
    for _ in range(n_folds):
        fold = _sample_fold(rng, positions, max_frac)
        if fold is None:
            continue
        ops.append(fold)
        positions, layers = fold.apply(template, positions, layers)
    for wop in _sample_warps(rng, positions, int(rng.integers(1, 4)), domain):
        ops.append(wop)
        positions, layers = wop.apply(template, positions, layers)

    if kind == "table":
        angle = float(rng.uniform(-math.pi, math.pi))
        pivot = positions.mean(axis=0)
        ca, sa = math.cos(angle), math.sin(angle)
        rot = (positions - pivot) @ np.array([[ca, -sa], [sa, ca]]).T + pivot
        center = 0.5 * (rot.min(axis=0) + rot.max(axis=0))
        target = np.array([0.0, ((h - 1) / 2.0 - oy) / s])
        rigid = RigidOp(angle=angle, pivot=tuple(pivot),
                        translation=tuple(target - center))
        ops.append(rigid)
        positions, layers = rigid.apply(template, positions, layers)

    return Scene(template=template, kind=kind, ops=ops, positions=positions,
                 layers=layers,
                 brightness=float(rng.uniform(*domain.brightness)))


def generate_scene(seed: int, index: int, kind: str, image_size=(96, 128),
                   mesh_density: int = 700, domain: Domain = DEFAULT_DOMAIN):
    """Build scene `index` of a dataset: (scene, template, rendered view)."""
    rng = substream(seed, "scene", index)
    params = sample_params(rng, mesh_density=mesh_density, domain=domain)
    template_seed = int(rng.integers(1 << 32))
    template = build_canonical(params, template_seed, image_size=image_size)
    scene = sample_scene(template, kind, rng, image_size=image_size,
                         domain=domain)
    view = scene.render()
    return scene, template, view


def mirror_map(template) -> np.ndarray:
    """(H, W, 2) mirror-partner pixel for every canonical mask pixel, NaN
    elsewhere, transported through the vertex pairing."""
    v = template.raster
    h, w = template.image_size
    out = np.full((h, w, 2), np.nan)
    ys, xs = np.nonzero(v.mask)
    fids = v.face_id[ys, xs]
    weights = v.bary[ys, xs].astype(np.float64)          # (K, 3)
    partner_verts = template.mirror[template.faces[fids]]  # (K, 3)
    pos = template.image_positions[partner_verts]          # (K, 3, 2)
    out[ys, xs] = np.einsum("kj,kjc->kc", weights, pos)
    return out


def generate_dataset(out_dir, n_suspended: int, n_table: int, seed: int = 0,
                     image_size=(96, 128), mesh_density: int = 700) -> dict:
    """Write scene bundles and a manifest under `out_dir`; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = ["suspended"] * n_suspended + ["table"] * n_table
    entries = []
    for idx, kind in enumerate(kinds):
        scene, template, view = generate_scene(
            seed, idx, kind, image_size=image_size, mesh_density=mesh_density)
        name = f"scene_{idx:04d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        glio.write_png(sdir / "image.png", view.image)
        glio.write_png(sdir / "mask.png",
                       (view.mask * np.uint8(255)).astype(np.uint8))
        glio.write_png(sdir / "layers.png",
                       np.clip(view.layers, 0, 255).astype(np.uint8))
        glio.write_corr(sdir / "corr.bin", view.corr)
        cr = template.raster
        glio.write_png(sdir / "canonical.png", cr.image)
        glio.write_png(sdir / "canonical_mask.png",
                       (cr.mask * np.uint8(255)).astype(np.uint8))
        glio.write_mirror(sdir / "mirror.bin", mirror_map(template))
        meta = {
            "id": name,
            "kind": kind,
            "index": idx,
            "image_size": [image_size[0], image_size[1]],
            "garment": template.params.to_json(),
            "template_seed": template.seed,
            "brightness": scene.brightness,
            "ops": scene.ops_json(),
        }
        glio.write_json(sdir / "meta.json", meta)
        files = {f: glio.sha256_file(sdir / f)
                 for f in ("meta.json", "image.png", "mask.png", "layers.png",
                           "corr.bin", "canonical.png", "canonical_mask.png",
                           "mirror.bin")}
        entries.append({"id": name, "kind": kind, "path": name, "files": files})
    manifest = {
        "seed": int(seed),
        "image_size": [image_size[0], image_size[1]],
        "mesh_density": int(mesh_density),
        "n_suspended": int(n_suspended),
        "n_table": int(n_table),
        "scenes": entries,
    }
    glio.write_json(out / "manifest.json", manifest)
    return manifest


def load_scene_bundle(scene_dir):
    """Read one bundle back as a dict of arrays plus meta."""
    sdir = Path(scene_dir)
    meta = glio.read_json(sdir / "meta.json")
    image = glio.read_png(sdir / "image.png")
    mask = glio.read_png(sdir / "mask.png") > 0
    layers = glio.read_png(sdir / "layers.png").astype(np.int32)
    corr = glio.read_corr(sdir / "corr.bin")
    return {"meta": meta, "image": image, "mask": mask,
            "layers": layers, "corr": corr,
            "canonical": glio.read_png(sdir / "canonical.png"),
            "canonical_mask": glio.read_png(sdir / "canonical_mask.png") > 0,
            "mirror": glio.read_mirror(sdir / "mirror.bin")}


def rebuild_template(meta: dict, image_size=None):
    """Recreate a bundle's template from its recorded parameters."""
    params = GarmentParams.from_json(meta["garment"])
    size = tuple(image_size or meta["image_size"])
    return build_canonical(params, meta["template_seed"], image_size=size)

"""Software rasterizer with per-pixel layer, correspondence and visibility
ground truth.

Cloth faces are drawn back to front (painter's algorithm, lowest layer
first), so the stored correspondence always describes the topmost surface
point at each pixel. Pixel centers sit at integer coordinates; coverage uses
a half-open fill rule so faces sharing an edge never claim the same pixel
twice within one layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RenderConfig:
    height: int = 96
    width: int = 128
    seam_width: float = 2.0
    seam_darkness: float = 0.35
    layer_attenuation: float = 0.9
    background: tuple = (24, 26, 30)
    stripe_period: float = 0.13   # canonical units
    checker_cell: float = 0.16

    @property
    def size(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class Camera:
    """In-plane view transform: p_view = R(rotation) @ (p - center) + center + shift."""
    rotation: float = 0.0
    shift: tuple = (0.0, 0.0)
    center: tuple | None = None

    def apply(self, positions: np.ndarray) -> np.ndarray:
        if self.rotation == 0.0 and self.shift == (0.0, 0.0):
            return positions
        c = np.mean(positions, axis=0) if self.center is None else np.asarray(self.center)
        ca, sa = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[ca, -sa], [sa, ca]])
        return (positions - c) @ rot.T + c + np.asarray(self.shift)


@dataclass
class RenderedView:
    image: np.ndarray            # (H, W, 3) uint8
    mask: np.ndarray             # (H, W) bool
    layers: np.ndarray           # (H, W) int16, faces covering each pixel
    corr: np.ndarray             # (H, W, 2) float32 (x, y) target pixel, NaN off-mask
    visible: np.ndarray          # (N,) bool, per vertex
    face_id: np.ndarray          # (H, W) int32, top face index, -1 off-mask
    bary: np.ndarray             # (H, W, 3) float32, barycentric in the top face
    warnings: list = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def edge_closed(dx: float, dy: float) -> bool:
    """Whether a pixel exactly on this directed edge counts as covered."""
    return dy > 0 or (dy == 0 and dx < 0)


def face_coverage(ax, ay, bx, by, cx, cy, xs, ys):
    """Coverage of pixel centers (xs, ys broadcastable) by triangle a,b,c.

    Returns (covered, w_a, w_b, w_c) with the barycentric weights of the
    original vertex order. Degenerate triangles cover nothing.
    """
    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if area2 == 0.0:
        z = np.zeros(np.broadcast(xs, ys).shape)
        return z.astype(bool), z, z, z
    if area2 < 0.0:
        covered, wa, wc, wb = face_coverage(ax, ay, cx, cy, bx, by, xs, ys)
        return covered, wa, wb, wc
    # edge functions; w_k is proportional to the weight of the vertex
    # opposite the edge
    wab = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
    wbc = (cx - bx) * (ys - by) - (cy - by) * (xs - bx)
    wca = (ax - cx) * (ys - cy) - (ay - cy) * (xs - cx)
    covered = np.ones(np.broadcast(xs, ys).shape, dtype=bool)
    for w, dx, dy in (
        (wab, bx - ax, by - ay),
        (wbc, cx - bx, cy - by),
        (wca, ax - cx, ay - cy),
    ):
        covered &= (w > 0) | ((w == 0) & edge_closed(dx, dy))
    return covered, wbc / area2, wca / area2, wab / area2


def texture_colors(uv: np.ndarray, kind: str, palette, cfg: RenderConfig) -> np.ndarray:
    """Base color per canonical-space point. Patterns depend on |x| so the
    garment looks identical under its left/right mirror."""
    pal = np.asarray(palette, dtype=np.float64)
    if kind == "solid" or len(pal) == 1:
        return np.broadcast_to(pal[0], uv.shape[:-1] + (3,)).copy()
    if kind == "stripes":
        idx = np.floor(uv[..., 1] / cfg.stripe_period).astype(np.int64) % len(pal)
        return pal[idx]
    if kind == "checker":
        ix = np.floor(np.abs(uv[..., 0]) / cfg.checker_cell).astype(np.int64)
        iy = np.floor(uv[..., 1] / cfg.checker_cell).astype(np.int64)
        return pal[(ix + iy) % 2]
    raise ValueError(f"unknown texture kind {kind!r}")


def _segment_stripe(image, face_id, face_layers, layer, p0, p1, cfg, shape):
    """Darken pixels of `layer` within seam_width/2 of segment p0-p1."""
    h, w = shape
    r = cfg.seam_width / 2.0
    x0 = max(0, int(np.floor(min(p0[0], p1[0]) - r)))
    x1 = min(w - 1, int(np.ceil(max(p0[0], p1[0]) + r)))
    y0 = max(0, int(np.floor(min(p0[1], p1[1]) - r)))
    y1 = min(h - 1, int(np.ceil(max(p0[1], p1[1]) + r)))
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
    ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    len2 = float(d @ d)
    if len2 == 0.0:
        dist2 = (xs - p0[0]) ** 2 + (ys - p0[1]) ** 2
    else:
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / len2, 0.0, 1.0)
        dist2 = (xs - (p0[0] + t * d[0])) ** 2 + (ys - (p0[1] + t * d[1])) ** 2
    sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
    fid = face_id[sub]
    hit = (dist2 <= r * r) & (fid >= 0) & (face_layers[np.clip(fid, 0, None)] == layer)
    image[sub][hit] = image[sub][hit] * cfg.seam_darkness


def rasterize(
    positions: np.ndarray,
    faces: np.ndarray,
    vertex_layers: np.ndarray,
    tex_uv: np.ndarray,
    corr_xy: np.ndarray,
    texture_kind: str,
    palette,
    seam_edges,
    cfg: RenderConfig,
    brightness: float = 1.0,
    camera: Camera | None = None,
) -> RenderedView:
    """Rasterize a layered triangle mesh.

    positions: (N, 2) vertex (x, y) in pixel units.
    vertex_layers: (N,) int stack index; a face inherits the max of its corners.
    tex_uv: (N, 2) canonical coordinates driving the texture.
    corr_xy: (N, 2) correspondence target (x, y) per vertex, in target-image
        pixel units.
    seam_edges: iterable of (vertex_a, vertex_b) index pairs to stripe.
    """
    h, w = cfg.height, cfg.width
    if camera is not None:
        positions = camera.apply(positions)
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    vertex_layers = np.asarray(vertex_layers, dtype=np.int64)

    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = cfg.background
    layers = np.zeros((h, w), dtype=np.int16)
    face_id = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3), dtype=np.float32)
    corr = np.full((h, w, 2), np.nan, dtype=np.float32)

    face_layers = vertex_layers[faces].max(axis=1)
    seam_edges = list(seam_edges)
    seam_layers = np.array(
        [max(vertex_layers[a], vertex_layers[b]) for a, b, *_ in seam_edges],
        dtype=np.int64,
    ) if seam_edges else np.zeros(0, dtype=np.int64)

    warnings = []
    all_layers = np.union1d(np.unique(face_layers), np.unique(seam_layers)) \
        if len(faces) else np.unique(seam_layers)
    for lay in all_layers:
        for f in np.nonzero(face_layers == lay)[0]:
            ia, ib, ic = faces[f]
            ax, ay = positions[ia]
            bx, by = positions[ib]
            cx, cy = positions[ic]
            x0 = max(0, int(np.ceil(min(ax, bx, cx))))
            x1 = min(w - 1, int(np.floor(max(ax, bx, cx))))
            y0 = max(0, int(np.ceil(min(ay, by, cy))))
            y1 = min(h - 1, int(np.floor(max(ay, by, cy))))
            if x0 > x1 or y0 > y1:
                continue
            xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
            ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
            covered, wa, wb, wc = face_coverage(ax, ay, bx, by, cx, cy, xs, ys)
            if not covered.any():
                continue
            sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
            layers[sub][covered] += 1
            face_id[sub][covered] = f
            wvec = np.stack(np.broadcast_arrays(wa, wb, wc), axis=-1)[covered]
            bary[sub][covered] = wvec
            tri_uv = tex_uv[faces[f]]
            color = texture_colors(wvec @ tri_uv, texture_kind, palette, cfg)
            shade = brightness * cfg.layer_attenuation ** int(lay)
            image[sub][covered] = color * shade
            corr[sub][covered] = (wvec @ corr_xy[faces[f]]).astype(np.float32)
        for (a, b, *_), sl in zip(seam_edges, seam_layers):
            if sl == lay:
                _segment_stripe(image, face_id, face_layers, int(lay),
                                positions[a], positions[b], cfg, (h, w))

    mask = layers > 0
    if not mask.any():
        warnings.append("empty-mask: garment outside frame")
    corr[~mask] = np.nan

    # a vertex is visible when the top surface at its pixel is its own layer
    px = np.rint(positions).astype(np.int64)
    inb = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    visible = np.zeros(len(positions), dtype=bool)
    idx = np.nonzero(inb)[0]
    fid = face_id[px[idx, 1], px[idx, 0]]
    ok = fid >= 0
    visible[idx[ok]] = face_layers[fid[ok]] == vertex_layers[idx[ok]]

    return RenderedView(
        image=np.clip(np.rint(image), 0, 255).astype(np.uint8),
        mask=mask,
        layers=layers,
        corr=corr,
        visible=visible,
        face_id=face_id,
        bary=bary,
        warnings=warnings,
    )

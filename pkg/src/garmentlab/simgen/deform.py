"""Composable garment deformations with exact ground truth.

Every op maps (vertex positions, vertex layers) to new arrays without
touching mesh topology, so the pixel-to-canonical correspondence of a
deformed scene is always known exactly: each vertex keeps its identity, and
the renderer interpolates per-vertex canonical-image coordinates.

Ops are small frozen dataclasses that serialize to plain dicts; ``replay``
re-applies a recorded op list to a template and reproduces a scene bit for
bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.sparse.csgraph import dijkstra

from . import render
from .render import Camera, RenderConfig, RenderedView
from .template import CanonicalTemplate, frame_transform


def geodesic_distances(template: CanonicalTemplate, source: int) -> np.ndarray:
    """Shortest-path distance from one vertex to all others along mesh edges,
    using canonical rest lengths."""
    e, d = template.edge_lengths()
    n = template.n_vertices
    g = scipy.sparse.csr_matrix(
        (np.concatenate([d, d]),
         (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(n, n))
    return dijkstra(g, directed=False, indices=source)


@dataclass(frozen=True)
class FoldOp:
    """Reflect every vertex on the positive side of a line across it.

    The positive side is where dot(v - point, n) > 0 with n the left normal
    of ``direction``. Folded vertices land one layer above everything
    currently in the scene.
    """
    point: tuple
    direction: tuple

    def apply(self, template, positions, layers):
        p = np.asarray(self.point, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        n = np.array([-d[1], d[0]])
        s = (positions - p) @ n
        moved = s > 0.0
        out = positions.copy()
        out[moved] -= 2.0 * s[moved, None] * n
        new_layers = layers.copy()
        if moved.any():
            new_layers[moved] = layers.max() + 1
        return out, new_layers

    def to_json(self):
        return {"op": "fold", "point": list(self.point),
                "direction": list(self.direction)}


@dataclass(frozen=True)
class WarpOp:
    """Smooth local displacement: a Gaussian bump of width ``bandwidth``
    around ``center`` pushes the cloth by ``shift``."""
    center: tuple
    shift: tuple
    bandwidth: float

    def apply(self, template, positions, layers):
        c = np.asarray(self.center, dtype=np.float64)
        v = np.asarray(self.shift, dtype=np.float64)
        d2 = np.sum((positions - c) ** 2, axis=1)
        w = np.exp(-d2 / (2.0 * self.bandwidth ** 2))
        return positions + w[:, None] * v, layers.copy()

    def to_json(self):
        return {"op": "warp", "center": list(self.center),
                "shift": list(self.shift), "bandwidth": self.bandwidth}


@dataclass(frozen=True)
class RigidOp:
    """Rotate about a pivot (default: current centroid), then translate."""
    angle: float
    translation: tuple
    pivot: tuple | None = None

    def apply(self, template, positions, layers):
        pv = (np.mean(positions, axis=0) if self.pivot is None
              else np.asarray(self.pivot, dtype=np.float64))
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        rot = np.array([[ca, -sa], [sa, ca]])
        out = (positions - pv) @ rot.T + pv + np.asarray(self.translation)
        return out, layers.copy()

    def to_json(self):
        d = {"op": "rigid", "angle": self.angle,
             "translation": list(self.translation)}
        if self.pivot is not None:
            d["pivot"] = list(self.pivot)
        return d


@dataclass(frozen=True)
class DrapeOp:
    """Hang the garment from one vertex.

    Every vertex drops below the pin by ``alpha`` times its geodesic
    distance from the pin, and pulls laterally toward the pin line by the
    compression factor ``beta``. Vertices nearer the pin than the median
    distance form the camera-facing half; the rest fall behind it.
    """
    pin_vertex: int
    alpha: float
    beta: float

    def apply(self, template, positions, layers):
        g = geodesic_distances(template, self.pin_vertex)
        pin = positions[self.pin_vertex]
        out = np.empty_like(positions)
        out[:, 0] = pin[0] + self.beta * (positions[:, 0] - pin[0])
        out[:, 1] = pin[1] + self.alpha * g
        new_layers = np.where(g <= np.median(g), 1, 0).astype(layers.dtype)
        new_layers[self.pin_vertex] = 1
        return out, new_layers

    def to_json(self):
        return {"op": "drape", "pin_vertex": self.pin_vertex,
                "alpha": self.alpha, "beta": self.beta}


_OP_TYPES = {"fold": FoldOp, "warp": WarpOp, "rigid": RigidOp, "drape": DrapeOp}


def op_from_json(d: dict):
    d = dict(d)
    kind = d.pop("op")
    cls = _OP_TYPES[kind]
    for key in ("point", "direction", "center", "shift", "translation", "pivot"):
        if key in d:
            d[key] = tuple(d[key])
    return cls(**d)


def replay(template: CanonicalTemplate, ops) -> tuple[np.ndarray, np.ndarray]:
    """Apply an op sequence to the flat template."""
    positions = template.vertices.copy()
    layers = np.zeros(template.n_vertices, dtype=np.int64)
    for op in ops:
        positions, layers = op.apply(template, positions, layers)
    return positions, layers


@dataclass
class Scene:
    """A deformed garment instance ready to render.

    ``positions``/``layers`` always equal ``replay(template, ops)``; they are
    cached here so rendering does not re-run the geodesics.
    """
    template: CanonicalTemplate
    kind: str                   # "suspended" | "table"
    ops: list
    positions: np.ndarray
    layers: np.ndarray
    brightness: float = 1.0

    @classmethod
    def build(cls, template, kind, ops, brightness=1.0) -> "Scene":
        positions, layers = replay(template, ops)
        return cls(template=template, kind=kind, ops=list(ops),
                   positions=positions, layers=layers, brightness=brightness)

    def image_positions(self, image_size=None, camera: Camera | None = None):
        h, w = image_size or self.template.image_size
        s, ox, oy = frame_transform(h, w)
        pos = np.empty_like(self.positions)
        pos[:, 0] = ox + s * self.positions[:, 0]
        pos[:, 1] = oy + s * self.positions[:, 1]
        if camera is not None:
            pos = camera.apply(pos)
        return pos

    def render(self, cfg: RenderConfig | None = None,
               camera: Camera | None = None) -> RenderedView:
        t = self.template
        cfg = cfg or RenderConfig(height=t.image_size[0], width=t.image_size[1])
        pos = self.image_positions((cfg.height, cfg.width), camera)
        return render.rasterize(
            pos, t.faces, self.layers, t.vertices, t.image_positions,
            t.params.texture, t.params.palette, t.seam_edges, cfg,
            brightness=self.brightness)

    def ops_json(self):
        return [op.to_json() for op in self.ops]

"""Procedural flat garment templates.

A template is a triangulated 2-D shirt built on a fixed lattice: a torso
grid plus two sleeve grids stitched to the armholes. The lattice topology
depends only on ``mesh_density``, so vertex *i* marks the same semantic spot
(left cuff, collar rim, ...) on every garment sampled from the same density,
whatever the sleeve length or neckline. That shared indexing is what lets a
deformed instance of one garment be labeled against the flat image of
another.

Coordinates are canonical units, y growing downward, the left/right
symmetry axis at x = 0. Construction is exactly mirror-symmetric: positions
(including the seeded lattice jitter) are generated for the right half and
reflected, so ``mirror`` is an exact involution on vertex indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import render
from .render import Camera, RenderConfig, RenderedView

# garment proportions (canonical units)
TORSO_W = 1.0
TORSO_H = 1.3
NECK_HALF_W = 0.18
NECK_DEPTH = {"U": 0.18, "V": 0.26}
SLEEVE_ANGLE = math.radians(20.0)
SLEEVE_LEN_MIN = 0.30
SLEEVE_LEN_MAX = 1.10
ARMHOLE_ROW_FRACTION = 0.30
STIFFNESS_RANGE = (7.0, 15.0)
JITTER_SIGMA = 0.006
JITTER_CLIP = 0.012

# region band extents (canonical units / fractions)
COLLAR_RADIUS = 0.14
SHOULDER_BAND_Y = 0.14
CUFF_FRACTION = 0.30
BOTTOM_BAND_Y = 0.18
BOTTOM_BAND_X = 0.22

FRAME_MARGIN = 5.0  # px kept free around the widest garment

REGION_LABELS = (
    "Collar", "LeftShoulder", "RightShoulder", "LeftSleeve", "RightSleeve",
    "LeftBottom", "RightBottom", "Body",
)
MIRRORED_REGION = {
    "Collar": "Collar", "Body": "Body",
    "LeftShoulder": "RightShoulder", "RightShoulder": "LeftShoulder",
    "LeftSleeve": "RightSleeve", "RightSleeve": "LeftSleeve",
    "LeftBottom": "RightBottom", "RightBottom": "LeftBottom",
}

SEAM_CLASSES = ("side-seam", "sleeve-cuff", "collar", "bottom-hem", "none")


@dataclass
class GarmentParams:
    sleeve_length: float = 0.35      # 0 = shortest, 1 = longest
    neck_type: str = "U"             # "U" or "V"
    collar_hem: bool = True
    bottom_hem: bool = False
    stiffness: float = 11.0
    palette: tuple = ((186, 60, 70), (224, 208, 190))
    texture: str = "stripes"         # "solid" | "stripes" | "checker"
    mesh_density: int = 700

    def validate(self) -> None:
        if not 0.0 <= self.sleeve_length <= 1.0:
            raise ValueError(f"sleeve_length {self.sleeve_length} outside [0, 1]")
        if self.neck_type not in ("U", "V"):
            raise ValueError(f"unknown neck_type {self.neck_type!r}")
        lo, hi = STIFFNESS_RANGE
        if not lo <= self.stiffness <= hi:
            raise ValueError(f"stiffness {self.stiffness} outside [{lo}, {hi}]")
        if len(self.palette) == 0:
            raise ValueError("palette must be non-empty")
        if self.texture not in ("solid", "stripes", "checker"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.mesh_density < 200:
            raise ValueError(f"mesh_density {self.mesh_density} < 200")

    def to_json(self) -> dict:
        return {
            "sleeve_length": self.sleeve_length,
            "neck_type": self.neck_type,
            "collar_hem": self.collar_hem,
            "bottom_hem": self.bottom_hem,
            "stiffness": self.stiffness,
            "palette": [list(c) for c in self.palette],
            "texture": self.texture,
            "mesh_density": self.mesh_density,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GarmentParams":
        d = dict(d)
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)


def sleeve_length_units(ratio: float) -> float:
    return SLEEVE_LEN_MIN + ratio * (SLEEVE_LEN_MAX - SLEEVE_LEN_MIN)


def lattice_dims(mesh_density: int) -> tuple[int, int, int, int]:
    """(torso cols, torso rows, armhole rows, sleeve cols) for a vertex budget."""
    k = math.sqrt(mesh_density / 269.0)
    nc = max(7, round(11 * k))
    if nc % 2 == 0:
        nc += 1
    nr = max(9, round(15 * k))
    n_arm = max(2, round(ARMHOLE_ROW_FRACTION * nr))
    ns = max(3, round(2.8 * n_arm))
    return nc, nr, n_arm, ns


def frame_transform(height: int, width: int) -> tuple[float, float, float]:
    """(scale, x-offset, y-offset) mapping canonical coords into any frame.

    The transform depends only on the frame size, never on garment
    parameters, so corresponding points land at comparable pixels across the
    whole dataset and the symmetry axis sits exactly on the reflection line
    x -> (width-1) - x.
    """
    xmax = TORSO_W / 2 + SLEEVE_LEN_MAX * math.cos(SLEEVE_ANGLE) + 0.05
    ymin, ymax = -0.05, TORSO_H + 0.05
    s = min((width - 1 - 2 * FRAME_MARGIN) / (2 * xmax),
            (height - 1 - 2 * FRAME_MARGIN) / (ymax - ymin))
    spare = (height - 1 - 2 * FRAME_MARGIN) - s * (ymax - ymin)
    return s, (width - 1) / 2.0, FRAME_MARGIN - s * ymin + spare / 2.0


@dataclass
class BoundaryEdge:
    a: int
    b: int
    seam: str


@dataclass
class CanonicalTemplate:
    params: GarmentParams
    seed: int
    vertices: np.ndarray          # (N, 2) canonical coords
    faces: np.ndarray             # (F, 3) vertex indices
    boundary_edges: list          # [BoundaryEdge]
    seam_edges: list              # [(a, b)] edges rendered as stripes
    mirror: np.ndarray            # (N,) partner index, involution
    regions: np.ndarray           # (N,) index into REGION_LABELS
    landmarks: dict               # named vertex index groups
    image_size: tuple             # (H, W) of the canonical raster
    image_positions: np.ndarray   # (N, 2) vertices in canonical-image pixels
    raster: RenderedView          # flat render; face_id/bary give pixel->mesh

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def region_name(self, vertex: int) -> str:
        return REGION_LABELS[self.regions[vertex]]

    def vertices_in_region(self, name: str) -> np.ndarray:
        return np.nonzero(self.regions == REGION_LABELS.index(name))[0]

    def edge_lengths(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique mesh edges and their canonical lengths."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                            self.faces[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        d = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        return e, d

    def pixel_to_point(self, pixel) -> np.ndarray:
        """Canonical-image pixel -> exact surface point in image coords."""
        x, y = int(pixel[0]), int(pixel[1])
        f = int(self.raster.face_id[y, x])
        if f < 0:
            raise ValueError(f"pixel {pixel} is background on the canonical image")
        w = self.raster.bary[y, x].astype(np.float64)
        return w @ self.image_positions[self.faces[f]]

    def mirror_pixel(self, pixel) -> tuple[int, int]:
        """Mirror partner of a canonical-image pixel via the vertex pairing."""
        x, y = int(pixel[0]), int(pixel[1])
        f = int(self.raster.face_id[y, x])
        if f < 0:
            raise ValueError(f"pixel {pixel} is background on the canonical image")
        w = self.raster.bary[y, x].astype(np.float64)
        p = w @ self.image_positions[self.mirror[self.faces[f]]]
        return int(np.rint(p[0])), int(np.rint(p[1]))


def mirror_pixel(template: CanonicalTemplate, pixel) -> tuple[int, int]:
    return template.mirror_pixel(pixel)


def _neck_top_y(x: np.ndarray, neck_type: str) -> np.ndarray:
    """Top boundary height of the torso at column position x."""
    depth = NECK_DEPTH[neck_type]
    u = np.clip(np.abs(x) / NECK_HALF_W, 0.0, 1.0)
    if neck_type == "U":
        return depth * np.sqrt(np.maximum(0.0, 1.0 - u * u))
    return depth * (1.0 - u)


def build_canonical(params: GarmentParams, seed: int,
                    image_size: tuple = (96, 128),
                    render_cfg: RenderConfig | None = None) -> CanonicalTemplate:
    """Build the flat template and its canonical raster.

    Deterministic in (params, seed, image_size); the seed only drives the
    small symmetric lattice jitter.
    """
    params.validate()
    nc, nr, n_arm, ns = lattice_dims(params.mesh_density)
    if n_arm < 2 or ns < 3:
        raise ValueError(
            f"mesh_density {params.mesh_density} too low to form sleeves "
            f"(armhole rows {n_arm}, sleeve cols {ns})")
    mid = (nc - 1) // 2

    n_torso = nr * nc
    per_sleeve = n_arm * (ns - 1)
    n_total = n_torso + 2 * per_sleeve

    def t_id(r, c):
        return r * nc + c

    def sleeve_id(side, j, i):
        # side +1 = right (x>0), -1 = left; i = 0 is the shared torso column
        if i == 0:
            return t_id(j, nc - 1 if side > 0 else 0)
        base = n_torso if side > 0 else n_torso + per_sleeve
        return base + j * (ns - 1) + (i - 1)

    # column x positions, exactly antisymmetric about the axis column
    xcol = np.zeros(nc)
    for k in range(1, mid + 1):
        x = k * (TORSO_W / 2) / mid
        xcol[mid + k] = x
        xcol[mid - k] = -x

    verts = np.zeros((n_total, 2))
    ytop = _neck_top_y(xcol, params.neck_type)
    for r in range(nr):
        t = r / (nr - 1)
        for c in range(nc):
            verts[t_id(r, c)] = (xcol[c], ytop[c] + t * (TORSO_H - ytop[c]))

    length = sleeve_length_units(params.sleeve_length)
    ax_r = (math.cos(SLEEVE_ANGLE), math.sin(SLEEVE_ANGLE))
    for j in range(n_arm):
        for i in range(1, ns):
            d = i * length / (ns - 1)
            rx, ry = verts[t_id(j, nc - 1)]
            verts[sleeve_id(+1, j, i)] = (rx + d * ax_r[0], ry + d * ax_r[1])
            lx, ly = verts[t_id(j, 0)]
            verts[sleeve_id(-1, j, i)] = (lx - d * ax_r[0], ly + d * ax_r[1])

    # mirror pairing
    mirror = np.zeros(n_total, dtype=np.int64)
    for r in range(nr):
        for c in range(nc):
            mirror[t_id(r, c)] = t_id(r, nc - 1 - c)
    for j in range(n_arm):
        for i in range(1, ns):
            mirror[sleeve_id(+1, j, i)] = sleeve_id(-1, j, i)
            mirror[sleeve_id(-1, j, i)] = sleeve_id(+1, j, i)

    # symmetric seeded jitter: draw for every vertex, then overwrite the left
    # half with its partner's reflection so mirror symmetry stays exact
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    jit = np.clip(rng.normal(0.0, JITTER_SIGMA, size=(n_total, 2)),
                  -JITTER_CLIP, JITTER_CLIP)
    on_axis = mirror == np.arange(n_total)
    jit[on_axis, 0] = 0.0
    left = verts[:, 0] < -1e-12
    jit[left] = jit[mirror[left]]
    jit[left, 0] = -jit[left, 0]
    verts = verts + jit

    # faces
    faces = []
    for r in range(nr - 1):
        for c in range(nc - 1):
            v00, v01 = t_id(r, c), t_id(r, c + 1)
            v10, v11 = t_id(r + 1, c), t_id(r + 1, c + 1)
            faces.append((v00, v01, v11))
            faces.append((v00, v11, v10))
    for side in (+1, -1):
        for j in range(n_arm - 1):
            for i in range(ns - 1):
                v00, v01 = sleeve_id(side, j, i), sleeve_id(side, j, i + 1)
                v10, v11 = sleeve_id(side, j + 1, i), sleeve_id(side, j + 1, i + 1)
                faces.append((v00, v01, v11))
                faces.append((v00, v11, v10))
    faces = np.array(faces, dtype=np.int64)

    # boundary edges with seam classes
    boundary: list[BoundaryEdge] = []
    collar_cls = "collar" if params.collar_hem else "none"
    bottom_cls = "bottom-hem" if params.bottom_hem else "none"
    for c in range(nc - 1):
        xm = 0.5 * (xcol[c] + xcol[c + 1])
        cls = collar_cls if abs(xm) < NECK_HALF_W else "side-seam"
        boundary.append(BoundaryEdge(t_id(0, c), t_id(0, c + 1), cls))
        boundary.append(BoundaryEdge(t_id(nr - 1, c), t_id(nr - 1, c + 1), bottom_cls))
    for r in range(n_arm - 1, nr - 1):
        boundary.append(BoundaryEdge(t_id(r, 0), t_id(r + 1, 0), "side-seam"))
        boundary.append(BoundaryEdge(t_id(r, nc - 1), t_id(r + 1, nc - 1), "side-seam"))
    for side in (+1, -1):
        for i in range(ns - 1):
            boundary.append(BoundaryEdge(sleeve_id(side, 0, i),
                                         sleeve_id(side, 0, i + 1), "side-seam"))
            boundary.append(BoundaryEdge(sleeve_id(side, n_arm - 1, i),
                                         sleeve_id(side, n_arm - 1, i + 1), "side-seam"))
        for j in range(n_arm - 1):
            boundary.append(BoundaryEdge(sleeve_id(side, j, ns - 1),
                                         sleeve_id(side, j + 1, ns - 1), "sleeve-cuff"))

    seam_edges = [(e.a, e.b) for e in boundary if e.seam != "none"]
    # armhole seams are interior but visually prominent on real shirts
    for col in (0, nc - 1):
        for r in range(n_arm - 1):
            seam_edges.append((t_id(r, col), t_id(r + 1, col)))

    # landmarks
    neck_cols = [c for c in range(nc) if abs(xcol[c]) < NECK_HALF_W]
    landmarks = {
        "neck_center": t_id(0, mid),
        "neck_rim": [t_id(0, c) for c in neck_cols],
        "cuff_right": [sleeve_id(+1, j, ns - 1) for j in range(n_arm)],
        "cuff_left": [sleeve_id(-1, j, ns - 1) for j in range(n_arm)],
        "shoulder_right": t_id(0, nc - 1),
        "shoulder_left": t_id(0, 0),
        "bottom_right": t_id(nr - 1, nc - 1),
        "bottom_left": t_id(nr - 1, 0),
    }

    regions = _label_regions(verts, mirror, landmarks, n_total,
                             sleeve_id, n_arm, ns, length)

    # canonical raster: flat garment, identity correspondence
    h, w = image_size
    cfg = render_cfg or RenderConfig(height=h, width=w)
    s, ox, oy = frame_transform(h, w)
    img_pos = np.empty_like(verts)
    img_pos[:, 0] = ox + s * verts[:, 0]
    img_pos[:, 1] = oy + s * verts[:, 1]
    raster = render.rasterize(
        img_pos, faces, np.zeros(n_total, dtype=np.int64), verts, img_pos,
        params.texture, params.palette, seam_edges, cfg)

    return CanonicalTemplate(
        params=params, seed=int(seed), vertices=verts, faces=faces,
        boundary_edges=boundary, seam_edges=seam_edges, mirror=mirror,
        regions=regions, landmarks=landmarks, image_size=(h, w),
        image_positions=img_pos, raster=raster)


def _label_regions(verts, mirror, landmarks, n_total, sleeve_id, n_arm, ns, length):
    """Assign a region label to every vertex; exactly mirror-consistent
    because the right half is labeled and reflected with a left/right swap."""
    idx = {name: i for i, name in enumerate(REGION_LABELS)}
    regions = np.full(n_total, idx["Body"], dtype=np.int64)

    rim = np.array(landmarks["neck_rim"])
    rim_pos = verts[rim]
    d_neck = np.min(np.linalg.norm(verts[:, None, :] - rim_pos[None, :, :], axis=2),
                    axis=1)
    collar = d_neck <= COLLAR_RADIUS

    cuff_start = math.ceil((1.0 - CUFF_FRACTION) * (ns - 1))
    right_sleeve = np.zeros(n_total, dtype=bool)
    for j in range(n_arm):
        for i in range(max(1, cuff_start), ns):
            right_sleeve[sleeve_id(+1, j, i)] = True

    x, y = verts[:, 0], verts[:, 1]
    right_shoulder = (~collar) & (y <= SHOULDER_BAND_Y) & (x > NECK_HALF_W * 0.8) \
        & (x <= TORSO_W / 2 + 0.08) & ~right_sleeve
    right_bottom = (y >= TORSO_H - BOTTOM_BAND_Y) & (x >= TORSO_W / 2 - BOTTOM_BAND_X)

    regions[collar] = idx["Collar"]
    regions[right_sleeve] = idx["RightSleeve"]
    regions[right_shoulder & (regions == idx["Body"])] = idx["RightShoulder"]
    regions[right_bottom & (regions == idx["Body"])] = idx["RightBottom"]

    left = x < -1e-12
    for v in np.nonzero(left)[0]:
        regions[v] = idx[MIRRORED_REGION[REGION_LABELS[regions[mirror[v]]]]]
    return regions

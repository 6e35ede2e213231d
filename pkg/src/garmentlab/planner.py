"""Confidence-gated grasp planning for folding and hanging.

The planner closes the loop around the perception stack: it queries
canonical regions through a correspondence model, gates candidates on
correspondence confidence and (in air) grasp affordance, validates every
grasp with the tactile oracle, and recovers from failures by rotating the
garment or falling back to silhouette heuristics. Episodes emit a replayable
JSON-line trace so the safety gates can be audited after the fact.

Everything here treats the simulator as ground truth: a "pin" is a mesh
vertex held by a gripper, lifting re-drapes the cloth from that vertex, and
tensioning reads inter-grip strain directly from mesh geodesics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .affordance import (EXCESS, SUCCESS, TOO_LITTLE, GripperSpec,
                         label_affordance_gt, probe_grasp)
from .descriptor import best_match
from .evaluation import invert_correspondence
from .rng import derive_seed, substream
from .simgen.dataset import generate_scene
from .simgen.deform import DrapeOp, FoldOp, RigidOp, Scene, WarpOp, \
    geodesic_distances
from .simgen.template import (FRAME_MARGIN, MIRRORED_REGION, REGION_LABELS,
                              STIFFNESS_RANGE, frame_transform)

FOLD_TASK = "Fold"
HANG_TASK = "Hang"

FEATURE_REGIONS = ("LeftShoulder", "RightShoulder", "LeftBottom",
                   "RightBottom", "LeftSleeve", "RightSleeve")
HANG_REGIONS = ("Collar", "LeftShoulder", "RightShoulder")

STRATEGY_PRIORITY = ("ShoulderToShoulder", "BottomToBottom",
                     "SleeveToSleeve", "SleeveToBottom")
STRATEGY_PAIRS = {
    "ShoulderToShoulder": (frozenset(("LeftShoulder", "RightShoulder")),),
    "BottomToBottom": (frozenset(("LeftBottom", "RightBottom")),),
    "SleeveToSleeve": (frozenset(("LeftSleeve", "RightSleeve")),),
    "SleeveToBottom": (frozenset(("LeftSleeve", "RightBottom")),
                       frozenset(("RightSleeve", "LeftBottom"))),
}

INCORRECT_CORRESPONDENCE = "IncorrectCorrespondence"
DIAGONAL_FEATURE_GRASP = "DiagonalFeatureGrasp"
GRASPED_EXCESS_LAYERS = "GraspedExcessLayers"
TIMEOUT = "Timeout"
FAILURE_KINDS = (INCORRECT_CORRESPONDENCE, DIAGONAL_FEATURE_GRASP,
                 GRASPED_EXCESS_LAYERS, TIMEOUT)


class NoFallbackError(RuntimeError):
    """No cloth pixel qualifies for the requested fallback grasp."""


# ---------------------------------------------------------------------------
# region map


@dataclass
class RegionMap:
    """Canonical-frame region labels plus fixed per-region query pixels.

    `labels` assigns every canonical garment pixel one of REGION_LABELS
    (background is -1). `representatives` holds the pixels actually sent to
    the correspondence model for each region: the snapped centroid plus a
    couple of jittered samples, frozen at build time so traces stay
    deterministic.
    """
    labels: np.ndarray
    representatives: dict
    names: tuple = REGION_LABELS

    def label_at(self, pixel):
        x, y = int(pixel[0]), int(pixel[1])
        h, w = self.labels.shape
        if not (0 <= x < w and 0 <= y < h):
            return None
        r = int(self.labels[y, x])
        return None if r < 0 else self.names[r]

    def mirror_label(self, name: str) -> str:
        return MIRRORED_REGION[name]

    def pixels(self, name: str) -> np.ndarray:
        ys, xs = np.nonzero(self.labels == self.names.index(name))
        return np.stack([xs, ys], axis=1)


def build_region_map(template, n_jitter: int = 2) -> RegionMap:
    """Label every canonical raster pixel with its mesh region.

    Each garment pixel takes the region of the dominant vertex of its top
    face, so the labels cover the mask exactly and inherit the mesh's mirror
    symmetry. Representative query pixels are the region centroid snapped
    onto the region plus `n_jitter` random members.
    """
    r = template.raster
    labels = np.full(r.mask.shape, -1, dtype=np.int16)
    ys, xs = np.nonzero(r.mask)
    if xs.size == 0:
        raise ValueError("template raster has no garment pixels")
    f = r.face_id[ys, xs]
    dom = template.faces[f, np.argmax(r.bary[ys, xs], axis=1)]
    labels[ys, xs] = template.regions[dom]

    reps = {}
    for name in REGION_LABELS:
        pix = np.stack(np.nonzero(labels == REGION_LABELS.index(name))[::-1],
                       axis=1)
        if pix.shape[0] == 0:
            reps[name] = []
            continue
        c = pix.mean(axis=0)
        snapped = pix[int(np.argmin(np.sum((pix - c) ** 2, axis=1)))]
        chosen = [tuple(int(v) for v in snapped)]
        rng = substream(0, "region-reps", name)
        extra = rng.choice(pix.shape[0], size=min(n_jitter, pix.shape[0]),
                           replace=False)
        for i in extra:
            p = (int(pix[i, 0]), int(pix[i, 1]))
            if p not in chosen:
                chosen.append(p)
        reps[name] = chosen
    return RegionMap(labels=labels, representatives=reps)


# ---------------------------------------------------------------------------
# thresholds


@dataclass(frozen=True)
class Thresholds:
    """Gate and budget settings for one episode."""
    tau_corr: float = 0.1
    tau_aff: float = 0.5
    tension_limit: float = 0.05
    rotation_step: float = math.pi / 6.0
    max_full_rotations: int = 2
    max_attempts: int = 20
    contact_tolerance: int = 0

    def __post_init__(self):
        # 0 is allowed so the no-gate ablation stays expressible
        if not 0.0 <= self.tau_corr < 1.0:
            raise ValueError("tau_corr must lie in [0, 1)")
        if not 0.0 <= self.tau_aff <= 1.0:
            raise ValueError("tau_aff must lie in [0, 1]")
        if self.tension_limit < 0.0:
            raise ValueError("tension_limit must be non-negative")
        k = 2.0 * math.pi / self.rotation_step
        if abs(k - round(k)) > 1e-9:
            raise ValueError("rotation_step must divide a full turn")
        if self.max_attempts < 1 or self.max_full_rotations < 0:
            raise ValueError("episode budgets must be positive")
        if self.contact_tolerance < 0:
            raise ValueError("contact_tolerance must be non-negative")

    @property
    def steps_per_turn(self) -> int:
        return int(round(2.0 * math.pi / self.rotation_step))

    def to_json(self) -> dict:
        return {"tau_corr": self.tau_corr, "tau_aff": self.tau_aff,
                "tension_limit": self.tension_limit,
                "rotation_step": self.rotation_step,
                "max_full_rotations": self.max_full_rotations,
                "max_attempts": self.max_attempts,
                "contact_tolerance": self.contact_tolerance}

    @classmethod
    def from_json(cls, d: dict) -> "Thresholds":
        return cls(**d)


# ---------------------------------------------------------------------------
# perception interfaces


class OraclePerception:
    """Ground-truth correspondence and affordance read from the render.

    Inverse queries come from the exact correspondence map (confidence 1 for
    visible canonical points, 0 otherwise); affordance maps come from the
    geometric labeler.
    """

    def __init__(self, template):
        self.template = template
        self._view = None
        self._inv = None
        self._aff = {}

    def _prepare(self, view):
        if view is not self._view:
            self._view = view
            self._inv = invert_correspondence(view.corr,
                                              self.template.image_size)
            self._aff = {}

    def corr_query(self, view, canonical_pixel):
        self._prepare(view)
        x, y = int(canonical_pixel[0]), int(canonical_pixel[1])
        v = self._inv[y, x]
        if not np.isfinite(v[0]):
            return (0, 0), 0.0
        return (int(v[0]), int(v[1])), 1.0

    def affordance_map(self, view, gripper: GripperSpec) -> np.ndarray:
        self._prepare(view)
        key = gripper.approach
        if key not in self._aff:
            self._aff[key] = label_affordance_gt(
                view.mask, view.layers, gripper).astype(np.float64)
        return self._aff[key]


class NoisyPerception:
    """Oracle corrupted with confidence-correlated correspondence errors.

    Models a learned matcher: every query gets an answer. An occluded
    target still yields a best guess (a random garment pixel), but its
    confidence collapses to zero, so any positive gate defers it. Visible
    targets are corrupted to a random garment pixel with probability
    `p_corrupt` at a `bad_conf` confidence; otherwise the true pixel comes
    back with a `good_conf` confidence. The ranges overlap, so the gate
    trades coverage against safety instead of separating the two cases
    exactly.
    """

    def __init__(self, base, rng, p_corrupt: float = 0.3,
                 good_conf=(0.55, 1.0), bad_conf=(0.05, 0.6)):
        self.base = base
        self.rng = rng
        self.p_corrupt = float(p_corrupt)
        self.good_conf = good_conf
        self.bad_conf = bad_conf
        self._view = None
        self._cloth = None

    def _cloth_pixels(self, view):
        if view is not self._view:
            ys, xs = np.nonzero(view.mask)
            self._view = view
            self._cloth = (xs, ys)
        return self._cloth

    def _spurious(self, view):
        xs, ys = self._cloth_pixels(view)
        i = int(self.rng.integers(xs.size))
        return (int(xs[i]), int(ys[i])), float(
            self.rng.uniform(*self.bad_conf))

    def corr_query(self, view, canonical_pixel):
        pixel, conf = self.base.corr_query(view, canonical_pixel)
        if conf <= 0.0:
            guess, _ = self._spurious(view)
            return guess, 0.0
        if self.rng.random() < self.p_corrupt:
            return self._spurious(view)
        return pixel, float(self.rng.uniform(*self.good_conf))

    def affordance_map(self, view, gripper: GripperSpec) -> np.ndarray:
        return self.base.affordance_map(view, gripper)


class TrainedPerception:
    """Correspondence and affordance served by trained networks."""

    def __init__(self, descriptor_model, affordance_model, template):
        self.descriptor = descriptor_model
        self.affordance = affordance_model
        self.template = template
        self._canon = descriptor_model.features(template.raster.image)
        self._view = None
        self._feat = None
        self._aff = {}

    def _prepare(self, view):
        if view is not self._view:
            self._view = view
            self._feat = self.descriptor.features(view.image)
            self._aff = {}

    def corr_query(self, view, canonical_pixel):
        self._prepare(view)
        pixel, conf = best_match(self._canon, canonical_pixel, self._feat)
        return pixel, conf

    def affordance_map(self, view, gripper: GripperSpec) -> np.ndarray:
        self._prepare(view)
        arm = "right" if gripper.approach == "FromRight" else "left"
        if arm not in self._aff:
            self._aff[arm] = self.affordance.predict(view.image, arm=arm)
        return self._aff[arm]


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Candidate:
    pixel: tuple
    region: str
    corr_conf: float
    aff_score: float | None

    def to_json(self) -> dict:
        return {"pixel": [int(self.pixel[0]), int(self.pixel[1])],
                "region": self.region, "corr_conf": float(self.corr_conf),
                "aff_score": None if self.aff_score is None
                else float(self.aff_score)}


def _lowest_band_start(mask: np.ndarray, fraction: float) -> int:
    """First row of the to-be-masked bottom band of the garment extent."""
    ys = np.nonzero(mask.any(axis=1))[0]
    if ys.size == 0:
        return mask.shape[0]
    extent = int(ys[-1] - ys[0] + 1)
    n = int(math.floor(fraction * extent))
    return int(ys[-1] - n + 1)


def mask_lowest_region(heatmap: np.ndarray, mask: np.ndarray,
                       fraction: float) -> np.ndarray:
    """Zero the lowest `fraction` of the garment's vertical extent.

    Used by the same-side feature heuristic: when the point being searched
    for should not be hanging at the bottom, suppressing the lowest band
    keeps the argmax away from the opposite corner.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly inside (0, 1)")
    out = np.array(heatmap, dtype=np.float64, copy=True)
    out[_lowest_band_start(mask, fraction):, :] = 0.0
    return out


def query_candidates(view, perception, region_map: RegionMap, regions,
                     thresholds: Thresholds, in_air: bool,
                     gripper: GripperSpec | None = None,
                     low_mask_fraction: float = 0.0,
                     contact_tolerance: int | None = None):
    """Gated grasp candidates for the requested canonical regions.

    Each region is queried through its representative canonical pixels and
    max-pooled over confidence. A candidate survives only if its confidence
    clears tau_corr and, in the air, the affordance at the matched pixel
    clears tau_aff. The result is sorted by confidence, descending, with
    ties kept in region scan order.

    `contact_tolerance` additionally requires the jaw's predicted first
    contact (visible from the silhouette) to land within that many pixels of
    the matched point: a side grasp can only pinch cloth at the approach
    edge, so targets buried behind other cloth are pruned.
    """
    aff = None
    if in_air:
        if gripper is None:
            raise ValueError("in-air queries need the approaching gripper")
        aff = perception.affordance_map(view, gripper)
    band_start = None
    if low_mask_fraction > 0.0:
        band_start = _lowest_band_start(view.mask, low_mask_fraction)

    out = []
    for region in regions:
        best = None
        for rep in region_map.representatives.get(region, []):
            pixel, conf = perception.corr_query(view, rep)
            if best is None or conf > best[1]:
                best = (pixel, conf)
        if best is None:
            continue
        pixel, conf = best
        if conf < thresholds.tau_corr:
            continue
        score = None
        if in_air:
            score = float(aff[int(pixel[1]), int(pixel[0])])
            if score < thresholds.tau_aff:
                continue
            if contact_tolerance is not None:
                contact, _ = probe_grasp(view.mask, view.layers, pixel,
                                         gripper)
                if (contact is None
                        or abs(contact[0] - int(pixel[0]))
                        > contact_tolerance):
                    continue
        if (band_start is not None and int(pixel[1]) >= band_start
                and region not in ("LeftBottom", "RightBottom")):
            continue
        out.append(Candidate(pixel=pixel, region=region, corr_conf=conf,
                             aff_score=score))
    order = np.argsort([-c.corr_conf for c in out], kind="stable")
    return [out[i] for i in order]


def rotate_garment(scene: Scene, rotation_step: float,
                   hold_vertex: int | None = None) -> Scene:
    """Rigidly rotate the garment by one step and return the new scene.

    Suspended garments rotate about the held vertex, table garments about
    their centroid; either way twelve 30-degree steps compose back to the
    start.
    """
    pivot = None
    if hold_vertex is not None:
        pivot = tuple(float(v) for v in scene.positions[hold_vertex])
    op = RigidOp(angle=float(rotation_step), translation=(0.0, 0.0),
                 pivot=pivot)
    positions, layers = op.apply(scene.template, scene.positions,
                                 scene.layers)
    return Scene(template=scene.template, kind=scene.kind,
                 ops=scene.ops + [op], positions=positions, layers=layers,
                 brightness=scene.brightness)


def lift_garment(scene: Scene, vertex: int) -> Scene:
    """Re-drape the garment hanging from a pinned vertex.

    Lifting wipes the previous configuration: the cloth falls below the pin
    by geodesic distance (same vertical scale the scene sampler uses) and
    the pin is moved to the top of the frame.
    """
    t = scene.template
    h, w = t.image_size
    s, ox, oy = frame_transform(h, w)
    g = geodesic_distances(t, vertex)
    span = (h - 1 - 2.0 * FRAME_MARGIN) / s
    alpha_cloth = 0.82 + 0.012 * (t.params.stiffness - STIFFNESS_RANGE[0])
    alpha = min(alpha_cloth, span / max(float(g.max()), 1e-9))
    drape = DrapeOp(pin_vertex=int(vertex), alpha=float(alpha), beta=0.5)
    positions, layers = drape.apply(t, scene.positions, scene.layers)
    pin = positions[vertex]
    top_y = (FRAME_MARGIN + 1.0 - oy) / s
    recenter = RigidOp(angle=0.0, pivot=(0.0, 0.0),
                       translation=(-float(pin[0]), float(top_y - pin[1])))
    positions, layers = recenter.apply(t, positions, layers)
    return Scene(template=t, kind="suspended",
                 ops=scene.ops + [drape, recenter], positions=positions,
                 layers=layers, brightness=scene.brightness)


@dataclass
class GraspOutcome:
    outcome: str
    resolved: tuple | None
    vertex: int | None
    layer_count: int


def contact_vertex(view, template, pixel) -> int | None:
    """Dominant mesh vertex under a rendered cloth pixel, None off-mask."""
    x, y = int(pixel[0]), int(pixel[1])
    face = int(view.face_id[y, x])
    if face < 0:
        return None
    return int(template.faces[face, int(np.argmax(view.bary[y, x]))])


def _probe_topdown(mask: np.ndarray, layers: np.ndarray, pixel,
                   gripper: GripperSpec):
    """Straight-down pinch at the target column: no approach travel, the
    jaw window simply closes on whatever lies under it."""
    h, w = mask.shape
    x = min(max(int(pixel[0]), 0), w - 1)
    y = min(max(int(pixel[1]), 0), h - 1)
    half = gripper.jaw_window // 2
    rows = np.arange(max(0, y - half), min(h, y + half + 1))
    col = mask[rows, x]
    if not col.any():
        return None, 0
    yr = int(rows[col][np.argmin(np.abs(rows[col] - y))])
    return (x, yr), int(layers[rows, x].max())


def attempt_grasp(view, template, pixel, gripper: GripperSpec, rng=None,
                  p_slip: float = 0.0, topdown: bool = False) -> GraspOutcome:
    """Execute a grasp at a pixel and read the tactile outcome.

    In the air the jaw closes on the first cloth contact along the approach
    row, which resolves the pixel actually caught (and hence the mesh vertex
    a Success would pin). On the table the hand comes straight down, so the
    target pixel itself is pinched. Outcomes follow the tactile oracle:
    nothing caught is TooLittle, a thin pinch succeeds except for slip, a
    thick stack is Excess.
    """
    if topdown:
        resolved, count = _probe_topdown(view.mask, view.layers, pixel,
                                         gripper)
    else:
        resolved, count = probe_grasp(view.mask, view.layers, pixel, gripper)
    if count == 0:
        return GraspOutcome(TOO_LITTLE, None, None, 0)
    vertex = contact_vertex(view, template, resolved)
    if count > gripper.max_layers:
        return GraspOutcome(EXCESS, tuple(resolved), vertex, count)
    if p_slip > 0.0 and rng is not None and rng.random() < p_slip:
        return GraspOutcome(TOO_LITTLE, tuple(resolved), None, count)
    return GraspOutcome(SUCCESS, tuple(resolved), vertex, count)


def fallback_highest(mask: np.ndarray) -> tuple:
    """Topmost cloth pixel, ties broken by scan order."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise NoFallbackError("empty mask")
    top = ys.min()
    return (int(xs[ys == top].min()), int(top))


def fallback_lowest_affordable(view, aff_map: np.ndarray,
                               tau_aff: float) -> tuple:
    """Bottommost cloth pixel whose affordance clears the gate."""
    ok = view.mask & (np.asarray(aff_map) >= tau_aff)
    ys, xs = np.nonzero(ok)
    if ys.size == 0:
        raise NoFallbackError("no affordable pixel")
    bot = ys.max()
    return (int(xs[ys == bot].min()), int(bot))


# ---------------------------------------------------------------------------
# tension


@dataclass
class TensionResult:
    strains: list
    distances: list
    stop_index: int
    reached: bool
    canonical: float

    def to_json(self) -> dict:
        return {"strains": [float(s) for s in self.strains],
                "stop_index": int(self.stop_index),
                "reached": bool(self.reached),
                "canonical": float(self.canonical)}


def tension(scene: Scene, grips, tension_limit: float = 0.05,
            increment: float = 0.02, max_steps: int = 200) -> TensionResult:
    """Separate the grippers until inter-grip strain hits the limit.

    Strain is measured against the canonical geodesic distance between the
    two pinned vertices: (grip distance - geodesic) / geodesic, floored at
    zero since slack cloth carries no tension. The grippers move apart in
    fixed increments of the canonical distance and stop at the first reading
    at or above the limit.
    """
    v1, v2 = int(grips[0]), int(grips[1])
    if v1 == v2:
        raise ValueError("tensioning needs two distinct pinned points")
    t = scene.template
    canonical = float(geodesic_distances(t, v1)[v2])
    if canonical <= 0.0:
        raise ValueError("pinned points coincide on the mesh")
    d0 = float(np.linalg.norm(scene.positions[v1] - scene.positions[v2]))
    strains, distances = [], []
    stop, reached = 0, False
    for k in range(max_steps + 1):
        d = d0 + k * increment * canonical
        strain = max(0.0, (d - canonical) / canonical)
        strains.append(strain)
        distances.append(d)
        stop = k
        if strain >= tension_limit:
            reached = True
            break
    return TensionResult(strains=strains, distances=distances,
                         stop_index=stop, reached=reached,
                         canonical=canonical)


# ---------------------------------------------------------------------------
# strategies


def select_strategy(confident) -> str | None:
    """Highest-priority fold strategy whose two regions are both available.

    Returns None when no strategy is satisfiable, in which case the caller
    keeps rotating.
    """
    s = set(confident)
    if not s:
        raise ValueError("empty confident-region set")
    for name in STRATEGY_PRIORITY:
        for pair in STRATEGY_PAIRS[name]:
            if pair <= s:
                return name
    return None


def partner_regions(held: str | None):
    """Regions that can complete a fold strategy with the held region,
    in strategy priority order. An unknown held region allows everything."""
    if held is None:
        return FEATURE_REGIONS
    out = []
    for name in STRATEGY_PRIORITY:
        for pair in STRATEGY_PAIRS[name]:
            if held in pair:
                other = next(iter(pair - {held}))
                if other not in out:
                    out.append(other)
    return tuple(out)


def _region_priority(region: str) -> int:
    for i, name in enumerate(STRATEGY_PRIORITY):
        for pair in STRATEGY_PAIRS[name]:
            if region in pair:
                return i
    return len(STRATEGY_PRIORITY)


def _strategy_for(first_region: str | None, second_region: str):
    """Executed strategy and required region pair for two intended grasps."""
    for name in STRATEGY_PRIORITY:
        for pair in STRATEGY_PAIRS[name]:
            if first_region is None:
                if second_region in pair:
                    return name, pair
            elif {first_region, second_region} == set(pair):
                return name, pair
    return None, None


def _is_diagonal(achieved, required) -> bool:
    """Whether the achieved pair is the required one with exactly one
    region flipped to its mirror partner."""
    for r in required:
        alt = set(required) - {r} | {MIRRORED_REGION[r]}
        if set(achieved) == alt and set(achieved) != set(required):
            return True
    return False


# ---------------------------------------------------------------------------
# traces and results


@dataclass
class TraceEvent:
    """One timestamped planner event; the trace is the episode's audit log."""
    t: int
    state: str
    action: str
    data: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"t": int(self.t), "state": self.state, "action": self.action,
                "data": self.data}


def trace_lines(trace, episode: int | None = None):
    """JSON-line serialization of a trace, one event per line."""
    out = []
    for e in trace:
        d = e.to_json()
        if episode is not None:
            d["episode"] = int(episode)
        out.append(json.dumps(d, sort_keys=True))
    return out


@dataclass
class EpisodeResult:
    task: str
    success: bool
    failure_kind: str | None
    recovered_events: int
    trace: list
    grasps: list
    strategy: str | None
    pair_acquired: bool
    attempts: int
    rotations: int
    regrasps: int = 0

    def __post_init__(self):
        if self.success and self.failure_kind is not None:
            raise ValueError("successful episodes carry no failure kind")
        if not self.success and self.failure_kind not in FAILURE_KINDS:
            raise ValueError("failed episodes need a failure kind")

    def to_json(self) -> dict:
        return {"task": self.task, "success": bool(self.success),
                "failure_kind": self.failure_kind,
                "recovered_events": int(self.recovered_events),
                "strategy": self.strategy,
                "pair_acquired": bool(self.pair_acquired),
                "attempts": int(self.attempts),
                "rotations": int(self.rotations),
                "regrasps": int(self.regrasps),
                "grasps": self.grasps,
                "trace": [e.to_json() for e in self.trace]}


def default_grippers() -> dict:
    return {"right": GripperSpec(approach="FromRight"),
            "left": GripperSpec(approach="FromLeft")}


class _EpisodeEngine:
    """Mutable state shared by the fold and hang state machines."""

    def __init__(self, scene, perception, thresholds, rng, grippers,
                 p_slip, tactile_recovery, low_mask_fraction, region_map):
        self.scene = scene
        self.template = scene.template
        self.perception = perception
        self.th = thresholds
        self.rng = rng
        self.grippers = grippers
        self.p_slip = float(p_slip)
        self.recovery = bool(tactile_recovery)
        self.low_mask = float(low_mask_fraction)
        self.region_map = region_map
        self.view = scene.render()
        self.t = 0
        self.trace = []
        self.accepted = []
        self.attempts = 0
        self.rotations = 0
        self.recovered = 0
        self.regrasps = 0

    def emit(self, state, action, **data):
        self.trace.append(TraceEvent(self.t, state, action, data))
        self.t += 1

    def rerender(self):
        self.view = self.scene.render()

    def rotate(self, state, hold_vertex):
        self.scene = rotate_garment(self.scene, self.th.rotation_step,
                                    hold_vertex)
        self.rerender()
        self.rotations += 1
        self.emit(state, "Rotate",
                  pivot="hold" if hold_vertex is not None else "centroid",
                  angle=float(self.th.rotation_step), count=self.rotations)

    def query(self, state, regions, in_air, arm=None):
        gripper = self.grippers[arm] if arm is not None else None
        cands = query_candidates(self.view, self.perception, self.region_map,
                                 regions, self.th, in_air=in_air,
                                 gripper=gripper,
                                 low_mask_fraction=self.low_mask if in_air
                                 else 0.0,
                                 contact_tolerance=self.th.contact_tolerance
                                 if in_air else None)
        self.emit(state, "Query", regions=list(regions), in_air=in_air,
                  arm=arm, candidates=[c.to_json() for c in cands])
        return cands

    def _label_near(self, x, y):
        """Raster region label at a canonical pixel, snapping one pixel
        outward when rounding lands on background."""
        h, w = self.template.image_size
        for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1),
                       (-1, -1), (1, -1), (-1, 1), (1, 1)):
            r = self.region_map.label_at(
                (min(max(x + dx, 0), w - 1), min(max(y + dy, 0), h - 1)))
            if r is not None:
                return r
        return None

    def _point_region(self, pixel):
        """Region of the canonical point shown at a scene pixel."""
        c = self.view.corr[int(pixel[1]), int(pixel[0])]
        if not np.isfinite(c[0]):
            return None
        return self._label_near(int(round(float(c[0]))),
                                int(round(float(c[1]))))


    def grasp(self, state, arm, pixel, region, conf, aff, fallback, in_air):
        out = attempt_grasp(self.view, self.template, pixel,
                            self.grippers[arm], self.rng, self.p_slip,
                            topdown=not in_air)
        occupied = (out.vertex is not None and
                    any(g["vertex"] == out.vertex for g in self.accepted))
        if occupied:
            # the point is already in a gripper; the jaw closes on nothing new
            out = GraspOutcome(TOO_LITTLE, out.resolved, None,
                               out.layer_count)
        self.attempts += 1
        accepted = (out.outcome == SUCCESS) if self.recovery else True
        actual = (self._point_region(out.resolved)
                  if out.resolved is not None else None)
        rec = {"arm": arm,
               "target": [int(pixel[0]), int(pixel[1])],
               "region": region,
               "corr_conf": None if conf is None else float(conf),
               "aff_score": None if aff is None else float(aff),
               "fallback": bool(fallback), "in_air": bool(in_air),
               "outcome": out.outcome,
               "resolved": None if out.resolved is None
               else [int(out.resolved[0]), int(out.resolved[1])],
               "vertex": out.vertex, "layer_count": int(out.layer_count),
               "occupied": occupied,
               "accepted": bool(accepted), "actual_region": actual}
        self.emit(state, "Grasp", **rec)
        return rec

    def unfurl(self, pixel):
        """Tug the grasped lowest point downward, then release it."""
        h, w = self.template.image_size
        s, ox, oy = frame_transform(h, w)
        center = ((pixel[0] - ox) / s, (pixel[1] - oy) / s)
        op = WarpOp(center=center, shift=(0.0, 0.35), bandwidth=0.3)
        positions, layers = op.apply(self.template, self.scene.positions,
                                     self.scene.layers)
        self.scene = Scene(template=self.template, kind=self.scene.kind,
                           ops=self.scene.ops + [op], positions=positions,
                           layers=layers, brightness=self.scene.brightness)
        self.rerender()
        self.emit("InAir", "Unfurl", pixel=[int(pixel[0]), int(pixel[1])])


def _finish(eng: _EpisodeEngine, task, success, failure_kind, strategy,
            required, achieved, pair_acquired, tension_reached):
    achieved_list = (sorted(a if a is not None else "?" for a in achieved)
                     if achieved else None)
    eng.emit("Done", "End", success=bool(success), failure_kind=failure_kind,
             strategy=strategy,
             required=sorted(required) if required else None,
             achieved=achieved_list,
             pair_acquired=bool(pair_acquired),
             tension_reached=tension_reached,
             recovered_events=eng.recovered, regrasps=eng.regrasps,
             attempts=eng.attempts, rotations=eng.rotations)
    return EpisodeResult(task=task, success=bool(success),
                         failure_kind=None if success else failure_kind,
                         recovered_events=eng.recovered, trace=eng.trace,
                         grasps=list(eng.accepted), strategy=strategy,
                         pair_acquired=bool(pair_acquired),
                         attempts=eng.attempts, rotations=eng.rotations,
                         regrasps=eng.regrasps)


def _classify_failure(task, eng, timeout, required, achieved, both_pinned):
    if timeout:
        return TIMEOUT
    if any(g["outcome"] == EXCESS for g in eng.accepted):
        return GRASPED_EXCESS_LAYERS
    if (task == FOLD_TASK and required and both_pinned
            and _is_diagonal(achieved, required)):
        return DIAGONAL_FEATURE_GRASP
    return INCORRECT_CORRESPONDENCE


def _pick_fold_candidate(cands, held_region):
    """Prefer the candidate completing the highest-priority strategy,
    then confidence, then list order."""
    def rank(i):
        c = cands[i]
        if held_region is None:
            pri = _region_priority(c.region)
        else:
            name, _ = _strategy_for(held_region, c.region)
            pri = (STRATEGY_PRIORITY.index(name) if name
                   else len(STRATEGY_PRIORITY))
        return (pri, -c.corr_conf, i)
    return cands[min(range(len(cands)), key=rank)]


# Most events one pass of the search loop plus the episode close-out can
# append to the trace; the loop stops this far short of the event budget.
_EVENT_MARGIN = 8


def _run_episode(task, scene0, models, thresholds, rng, grippers, p_slip,
                 tactile_recovery, low_mask_fraction, region_map):
    th = thresholds if thresholds is not None else Thresholds()
    rng = rng if rng is not None else np.random.default_rng(0)
    grips = grippers if grippers is not None else default_grippers()
    rm = region_map if region_map is not None else \
        build_region_map(scene0.template)
    eng = _EpisodeEngine(scene0, models, th, rng, grips, p_slip,
                         tactile_recovery, low_mask_fraction, rm)
    all_first = FEATURE_REGIONS if task == FOLD_TASK else HANG_REGIONS
    event_budget = (th.max_full_rotations * th.steps_per_turn
                    * th.max_attempts)

    first = None
    second = None
    tried_first = set()
    burned = set()     # Excess-rejected regions; rotation cannot fix those
    arm_order = ("left", "right")
    arm_i = 0
    consec_no_cand = 0
    revolutions = 0
    while (eng.attempts < th.max_attempts and second is None
           and eng.t + _EVENT_MARGIN <= event_budget):
        if first is None:
            # --- acquire the first grasp on the table (top-down)
            regions = tuple(r for r in all_first if r not in tried_first)
            if not regions:
                tried_first.clear()
                regions = all_first
            cands = eng.query("Table", regions, in_air=False)
            cands = [c for c in cands if c.region not in burned]
            if cands:
                c = (_pick_fold_candidate(cands, None) if task == FOLD_TASK
                     else cands[0])
                rec = eng.grasp("Table", "right", c.pixel, c.region,
                                c.corr_conf, None, fallback=False,
                                in_air=False)
            else:
                px = fallback_highest(eng.view.mask)
                eng.emit("Table", "Fallback", kind="Highest",
                         pixel=[px[0], px[1]])
                rec = eng.grasp("Table", "right", px, None, None, None,
                                fallback=True, in_air=False)
            if rec["accepted"]:
                first = rec
                eng.accepted.append(rec)
                if first["vertex"] is not None:
                    eng.scene = lift_garment(eng.scene, first["vertex"])
                    eng.rerender()
                eng.emit("InAir", "Lift", vertex=first["vertex"],
                         lifted=first["vertex"] is not None)
                eng.emit("InAir", "Check", kind="GripPersistence",
                         ok=first["vertex"] is not None)
                consec_no_cand = 0
                revolutions = 0
                burned.clear()
                arm_i = 0
            else:
                eng.recovered += 1
                if rec["outcome"] == EXCESS and rec["region"] is not None:
                    burned.add(rec["region"])
                eng.rotate("Table", None)
            continue

        # --- search for the second grasp in the air
        arm = arm_order[arm_i % 2]
        targets = (partner_regions(first["region"]) if task == FOLD_TASK
                   else HANG_REGIONS)
        cands = eng.query("InAir", targets, in_air=True, arm=arm)
        cands = [c for c in cands if c.region not in burned]
        if cands:
            consec_no_cand = 0
            c = (_pick_fold_candidate(cands, first["region"])
                 if task == FOLD_TASK else cands[0])
            rec = eng.grasp("InAir", arm, c.pixel, c.region, c.corr_conf,
                            c.aff_score, fallback=False, in_air=True)
            if rec["accepted"]:
                second = rec
                eng.accepted.append(rec)
                break
            eng.recovered += 1
            if rec["outcome"] == EXCESS:
                burned.add(rec["region"])
            eng.rotate("InAir", first["vertex"])
            arm_i += 1
        elif consec_no_cand >= th.steps_per_turn:
            revolutions += 1
            consec_no_cand = 0
            if revolutions > th.max_full_rotations:
                break
            if revolutions == 1:
                # a full turn showed nothing: tug the lowest affordable
                # point to shake the garment out, then keep looking
                aff = eng.perception.affordance_map(eng.view, grips[arm])
                try:
                    px = fallback_lowest_affordable(eng.view, aff,
                                                    th.tau_aff)
                except NoFallbackError:
                    eng.emit("InAir", "Fallback", kind="LowestAffordable",
                             error="NoFallback")
                    break
                eng.emit("InAir", "Fallback", kind="LowestAffordable",
                         pixel=[px[0], px[1]])
                eng.grasp("InAir", arm, px, None, None,
                          float(aff[px[1], px[0]]), fallback=True,
                          in_air=True)
                eng.unfurl(px)
                eng.recovered += 1
                arm_i += 1
            else:
                # still nothing: this hold is hopeless, drop the garment
                # back on the table and start over from another feature
                if first["region"] is not None:
                    tried_first.add(first["region"])
                eng.accepted.remove(first)
                eng.emit("Table", "Release", vertex=first["vertex"],
                         region=first["region"])
                if first["vertex"] is not None:
                    # the dropped garment lands in a fresh orientation of
                    # its tabletop configuration
                    k = int(eng.rng.integers(th.steps_per_turn))
                    eng.scene = rotate_garment(scene0,
                                               k * th.rotation_step, None)
                    eng.rerender()
                first = None
                eng.regrasps += 1
                burned.clear()
        else:
            # rotating also swaps which hand is free, doubling the
            # reachable configurations per turn
            eng.rotate("InAir", first["vertex"])
            consec_no_cand += 1
            arm_i += 1

    if second is None:
        return _finish(eng, task, False, TIMEOUT, None, None, None, False,
                       None)

    eng.emit("InAir", "Check", kind="GripPersistence",
             ok=second["vertex"] is not None)

    # --- tension, fold or hang, and scoring
    v1, v2 = first["vertex"], second["vertex"]
    both_pinned = v1 is not None and v2 is not None
    strategy, required = (None, None)
    if task == FOLD_TASK:
        strategy, required = _strategy_for(first["region"], second["region"])

    tension_reached = None
    if task == FOLD_TASK:
        tension_reached = False
        if both_pinned:
            tr = tension(eng.scene, (v1, v2), th.tension_limit)
            eng.emit("Tension", "Tension", limit=float(th.tension_limit),
                     **tr.to_json())
            tension_reached = tr.reached

    achieved = None
    if both_pinned:
        achieved = {first["actual_region"], second["actual_region"]}

    if task == FOLD_TASK and both_pinned:
        p1, p2 = eng.scene.positions[v1], eng.scene.positions[v2]
        gap = p1 - p2
        if np.linalg.norm(gap) > 1e-9:
            m = 0.5 * (p1 + p2)
            n = gap / np.linalg.norm(gap)
            fold = FoldOp(point=(float(m[0]), float(m[1])),
                          direction=(float(n[1]), float(-n[0])))
            positions, layers = fold.apply(eng.template, eng.scene.positions,
                                           eng.scene.layers)
            eng.scene = Scene(template=eng.template, kind=eng.scene.kind,
                              ops=eng.scene.ops + [fold],
                              positions=positions, layers=layers,
                              brightness=eng.scene.brightness)
            eng.rerender()
        eng.emit("Place", "Fold", strategy=strategy)
    elif task == HANG_TASK:
        eng.emit("Place", "Hang", target="peg")

    outcomes_ok = (first["outcome"] == SUCCESS
                   and second["outcome"] == SUCCESS)
    pair_acquired = both_pinned and outcomes_ok
    if task == FOLD_TASK:
        regions_ok = (both_pinned and required is not None
                      and achieved == set(required))
        success = regions_ok and outcomes_ok and bool(tension_reached)
    else:
        regions_ok = (both_pinned and v1 != v2
                      and achieved is not None
                      and achieved <= set(HANG_REGIONS))
        success = regions_ok and outcomes_ok

    kind = None
    if not success:
        kind = _classify_failure(task, eng, False, required, achieved,
                                 both_pinned)
    return _finish(eng, task, success, kind, strategy, required, achieved,
                   pair_acquired, tension_reached)


def run_fold_episode(scene0, models, thresholds=None, rng=None, *,
                     grippers=None, p_slip: float = 0.0,
                     tactile_recovery: bool = True,
                     low_mask_fraction: float = 0.0,
                     region_map: RegionMap | None = None) -> EpisodeResult:
    """Run the reactive fold state machine on one scene.

    Table grasp, lift, gated in-air search with rotation and fallback
    recovery, tension, fold. Success requires both pinned points in the
    selected strategy's regions, two tactile successes, and tension reached.
    """
    return _run_episode(FOLD_TASK, scene0, models, thresholds, rng, grippers,
                        p_slip, tactile_recovery, low_mask_fraction,
                        region_map)


def run_hang_episode(scene0, models, thresholds=None, rng=None, *,
                     grippers=None, p_slip: float = 0.0,
                     tactile_recovery: bool = True,
                     low_mask_fraction: float = 0.0,
                     region_map: RegionMap | None = None) -> EpisodeResult:
    """Run the hanging task: both grasps must land in collar or shoulder
    regions, after which the garment moves open-loop to the peg."""
    return _run_episode(HANG_TASK, scene0, models, thresholds, rng, grippers,
                        p_slip, tactile_recovery, low_mask_fraction,
                        region_map)


# ---------------------------------------------------------------------------
# trace auditing and batches


def validate_trace(trace, thresholds: Thresholds,
                   recovery: bool = True) -> list:
    """Audit one trace against the planner's safety contracts.

    Returns human-readable violation strings: non-monotone timestamps,
    non-fallback grasps executed below a gate, a TooLittle immediately
    followed by tensioning, and (when recovery is on) a rejected TooLittle
    not followed by a rotation or fallback.
    """
    out = []
    prev = -1
    for i, e in enumerate(trace):
        if e.t <= prev:
            out.append(f"event {i}: timestamp not increasing")
        prev = e.t
        if e.action != "Grasp":
            continue
        d = e.data
        if not d["fallback"]:
            if d["corr_conf"] is None or d["corr_conf"] < thresholds.tau_corr:
                out.append(f"event {i}: grasp below correspondence gate")
            if d["in_air"] and (d["aff_score"] is None
                                or d["aff_score"] < thresholds.tau_aff):
                out.append(f"event {i}: in-air grasp below affordance gate")
        if d["outcome"] == TOO_LITTLE and i + 1 < len(trace):
            nxt = trace[i + 1].action
            if nxt == "Tension":
                out.append(f"event {i}: tension straight after TooLittle")
            if recovery and not d["accepted"] and nxt not in (
                    "Rotate", "Fallback", "Unfurl", "End"):
                out.append(f"event {i}: TooLittle not followed by recovery")
    return out


def count_wrong_region_grasps(results) -> int:
    """Executed non-fallback grasps whose caught point lies outside the
    intended region (missed grasps that caught nothing do not count)."""
    n = 0
    for r in results:
        for e in r.trace:
            if e.action != "Grasp" or e.data["fallback"]:
                continue
            actual = e.data["actual_region"]
            if actual is not None and actual != e.data["region"]:
                n += 1
    return n


def summarize_episodes(results) -> dict:
    """Failure-table style batch summary."""
    failures = {k: 0 for k in FAILURE_KINDS}
    succ = 0
    for r in results:
        if r.success:
            succ += 1
        else:
            failures[r.failure_kind] += 1
    n = len(results)
    return {"n": n, "successes": succ,
            "success_rate": succ / n if n else 0.0,
            "failures": failures,
            "recovered_events": int(sum(r.recovered_events
                                        for r in results)),
            "pair_acquired": int(sum(r.pair_acquired for r in results)),
            "pair_acquisition_rate": (sum(r.pair_acquired for r in results)
                                      / n if n else 0.0),
            "wrong_region_grasps": count_wrong_region_grasps(results)}


def write_trace_file(path, results) -> None:
    """All episode traces as one JSON-lines file."""
    with open(path, "w", encoding="utf-8") as f:
        for i, r in enumerate(results):
            for line in trace_lines(r.trace, episode=i):
                f.write(line + "\n")


def oracle_factory():
    """Perception factory giving every episode exact correspondence and
    affordance."""
    return lambda template, rng: OraclePerception(template)


def noisy_oracle_factory(p_corrupt: float = 0.3, good_conf=(0.55, 1.0),
                         bad_conf=(0.05, 0.6)):
    """Perception factory with confidence-correlated correspondence noise,
    seeded per episode."""
    def make(template, rng):
        return NoisyPerception(OraclePerception(template), rng,
                               p_corrupt=p_corrupt, good_conf=good_conf,
                               bad_conf=bad_conf)
    return make


def trained_factory(descriptor_model, affordance_model):
    """Perception factory around trained descriptor and affordance nets."""
    return lambda template, rng: TrainedPerception(
        descriptor_model, affordance_model, template)


def run_episode_batch(task, n_episodes: int, seed: int, perception_factory,
                      thresholds: Thresholds | None = None, *,
                      kind: str = "table", image_size=(96, 128),
                      mesh_density: int = 700, p_slip: float = 0.0,
                      tactile_recovery: bool = True,
                      low_mask_fraction: float = 0.0,
                      trace_path=None):
    """Run seeded episodes on freshly sampled scenes.

    Each episode gets its own scene, planner RNG stream, and perception
    noise stream, so batches are reproducible and ablations can pair
    episodes by index. Returns (results, summary).
    """
    th = thresholds if thresholds is not None else Thresholds()
    scene_seed = derive_seed(seed, "episode-scenes")
    results = []
    for i in range(n_episodes):
        scene, template, _ = generate_scene(scene_seed, i, kind,
                                            image_size=image_size,
                                            mesh_density=mesh_density)
        perception = perception_factory(template, substream(seed, "noise", i))
        run = run_fold_episode if task == FOLD_TASK else run_hang_episode
        results.append(run(scene, perception, th,
                           substream(seed, "episode", i), p_slip=p_slip,
                           tactile_recovery=tactile_recovery,
                           low_mask_fraction=low_mask_fraction))
    if trace_path is not None:
        write_trace_file(trace_path, results)
    return results, summarize_episodes(results)


def collect_correspondence_records(n_scenes: int, seed: int,
                                   perception_factory, kind: str = "table",
                                   image_size=(96, 128),
                                   mesh_density: int = 700,
                                   queries_per_scene: int = 25):
    """Confidence/correctness records for calibrating the correspondence
    gate.

    Query pixels are sampled from the regions the planner actually targets
    (the six grasp features plus the collar), occluded ones included; an
    answer is correct when the point shown at the returned pixel belongs to
    the query's region. Returns (confidences, correct) arrays ready for
    threshold calibration.
    """
    scene_seed = derive_seed(seed, "gate-scenes")
    target = set(FEATURE_REGIONS) | set(HANG_REGIONS)
    confs, correct = [], []
    for i in range(n_scenes):
        scene, template, view = generate_scene(scene_seed, i, kind,
                                               image_size=image_size,
                                               mesh_density=mesh_density)
        rm = build_region_map(template)
        perception = perception_factory(template,
                                        substream(seed, "gate-noise", i))
        rng = substream(seed, "gate-queries", i)
        wanted = np.zeros_like(rm.labels, dtype=bool)
        for name in target:
            wanted |= rm.labels == rm.names.index(name)
        ys, xs = np.nonzero(wanted)
        take = rng.choice(xs.size, size=min(queries_per_scene, xs.size),
                          replace=False)
        h, w = template.image_size
        for j in take:
            q = (int(xs[j]), int(ys[j]))
            pixel, conf = perception.corr_query(view, q)
            c = view.corr[int(pixel[1]), int(pixel[0])]
            actual = None
            if np.isfinite(c[0]):
                actual = rm.label_at(
                    (min(max(int(round(float(c[0]))), 0), w - 1),
                     min(max(int(round(float(c[1]))), 0), h - 1)))
            confs.append(float(conf))
            correct.append(actual == rm.label_at(q))
    return np.asarray(confs, dtype=float), np.asarray(correct, dtype=bool)

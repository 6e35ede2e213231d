"""Scene generation: lattice symmetry, rasterizer coverage, deformation ops,
and dataset reproducibility, each checked against an independent oracle
where one exists."""

import heapq
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garmentlab.simgen import (Camera, DrapeOp, FoldOp, GarmentParams,
                               REGION_LABELS, RenderConfig, RigidOp, Scene,
                               WarpOp, build_canonical, generate_dataset,
                               generate_scene, geodesic_distances,
                               lattice_dims, load_scene_bundle, op_from_json,
                               rasterize, rebuild_template, replay,
                               sample_scene)
from garmentlab.simgen.render import edge_closed, face_coverage
from garmentlab.simgen.template import MIRRORED_REGION


@pytest.fixture(scope="module")
def tpl():
    return build_canonical(GarmentParams(), seed=7)


@pytest.fixture(scope="module")
def tpl_small():
    return build_canonical(GarmentParams(mesh_density=220), seed=3)


# ---------------------------------------------------------------- lattice

def test_lattice_dims_scale_with_density():
    d200 = lattice_dims(200)
    d700 = lattice_dims(700)
    d1500 = lattice_dims(1500)
    assert all(a <= b <= c for a, b, c in zip(d200, d700, d1500))
    for dims in (d200, d700, d1500):
        nc, nr, n_arm, ns = dims
        assert nc % 2 == 1          # odd column count keeps a true axis column
        assert n_arm >= 2 and ns >= 3


def test_params_validation():
    GarmentParams().validate()
    with pytest.raises(ValueError):
        GarmentParams(sleeve_length=1.2).validate()
    with pytest.raises(ValueError):
        GarmentParams(neck_type="boat").validate()
    with pytest.raises(ValueError):
        GarmentParams(stiffness=3.0).validate()
    with pytest.raises(ValueError):
        GarmentParams(mesh_density=150).validate()
    with pytest.raises(ValueError):
        GarmentParams(texture="plaid").validate()


def test_params_json_roundtrip():
    p = GarmentParams(sleeve_length=0.8, neck_type="V", bottom_hem=True,
                      stiffness=9.5, texture="checker")
    assert GarmentParams.from_json(json.loads(json.dumps(p.to_json()))) == p


# ------------------------------------------------------------- symmetry

def test_mirror_is_involution(tpl):
    n = tpl.n_vertices
    assert (tpl.mirror[tpl.mirror] == np.arange(n)).all()


def test_vertex_positions_exactly_antisymmetric(tpl):
    pm = tpl.vertices[tpl.mirror]
    assert np.array_equal(pm[:, 0], -tpl.vertices[:, 0])
    assert np.array_equal(pm[:, 1], tpl.vertices[:, 1])


@pytest.mark.parametrize("params", [
    GarmentParams(),
    GarmentParams(neck_type="V", texture="checker", bottom_hem=True),
    GarmentParams(sleeve_length=0.9, texture="solid", collar_hem=False),
])
def test_canonical_image_hflip_symmetric(params):
    t = build_canonical(params, seed=5)
    img = t.raster.image
    assert np.array_equal(img, img[:, ::-1])
    assert np.array_equal(t.raster.mask, t.raster.mask[:, ::-1])
    assert np.array_equal(t.raster.layers, t.raster.layers[:, ::-1])


def test_mirror_pixel_is_exact_reflection(tpl):
    w = tpl.image_size[1]
    ys, xs = np.nonzero(tpl.raster.mask)
    for x, y in zip(xs.tolist(), ys.tolist()):
        assert tpl.mirror_pixel((x, y)) == (w - 1 - x, y)


def test_mirror_pixel_rejects_background(tpl):
    assert not tpl.raster.mask[0, 0]
    with pytest.raises(ValueError):
        tpl.mirror_pixel((0, 0))


def test_region_labels_mirror_consistent(tpl):
    for v in range(tpl.n_vertices):
        a = REGION_LABELS[tpl.regions[v]]
        b = REGION_LABELS[tpl.regions[tpl.mirror[v]]]
        assert b == MIRRORED_REGION[a]


def test_all_regions_populated(tpl):
    present = {REGION_LABELS[i] for i in np.unique(tpl.regions)}
    assert present == set(REGION_LABELS)


def test_landmarks_in_expected_regions(tpl):
    assert tpl.region_name(tpl.landmarks["neck_center"]) == "Collar"
    for v in tpl.landmarks["cuff_right"]:
        assert tpl.region_name(v) == "RightSleeve"
    for v in tpl.landmarks["cuff_left"]:
        assert tpl.region_name(v) == "LeftSleeve"
    assert tpl.region_name(tpl.landmarks["bottom_right"]) == "RightBottom"
    assert tpl.region_name(tpl.landmarks["bottom_left"]) == "LeftBottom"


# ---------------------------------------------------------- seam classes

def test_seam_classes_follow_hem_flags():
    with_hems = build_canonical(
        GarmentParams(collar_hem=True, bottom_hem=True), seed=1)
    bare = build_canonical(
        GarmentParams(collar_hem=False, bottom_hem=False), seed=1)
    classes = lambda t: {e.seam for e in t.boundary_edges}
    assert {"collar", "bottom-hem", "side-seam", "sleeve-cuff"} <= classes(with_hems)
    assert "collar" not in classes(bare)
    assert "bottom-hem" not in classes(bare)
    assert {"side-seam", "sleeve-cuff"} <= classes(bare)


def test_boundary_edges_are_mesh_edges(tpl):
    edges = {tuple(sorted(e)) for e in
             np.concatenate([tpl.faces[:, [0, 1]], tpl.faces[:, [1, 2]],
                             tpl.faces[:, [2, 0]]]).tolist()}
    for e in tpl.boundary_edges:
        assert tuple(sorted((e.a, e.b))) in edges


# ------------------------------------------------------------ rasterizer

def _brute_cover(tri, px, py):
    """Independent point-in-triangle test with the same half-open edge rule."""
    (ax, ay), (bx, by), (cx, cy) = tri
    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if area2 == 0:
        return False
    if area2 < 0:
        (bx, by), (cx, cy) = (cx, cy), (bx, by)
    for (x0, y0, x1, y1) in ((ax, ay, bx, by), (bx, by, cx, cy),
                             (cx, cy, ax, ay)):
        e = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        if e < 0:
            return False
        if e == 0 and not edge_closed(x1 - x0, y1 - y0):
            return False
    return True


def test_face_coverage_matches_brute_force():
    rng = np.random.default_rng(42)
    ys, xs = np.mgrid[0:14, 0:14]
    for _ in range(50):
        tri = rng.uniform(0.0, 13.0, size=(3, 2))
        cov, *_ = face_coverage(tri[0, 0], tri[0, 1], tri[1, 0], tri[1, 1],
                                tri[2, 0], tri[2, 1],
                                xs.astype(float), ys.astype(float))
        for y in range(14):
            for x in range(14):
                assert cov[y, x] == _brute_cover(tri, float(x), float(y)), \
                    (tri, x, y)


def test_adjacent_faces_tile_without_overlap():
    """Two triangles sharing an edge must cover each pixel at most once."""
    pos = np.array([[2.0, 2.0], [11.0, 2.5], [10.5, 11.0], [2.5, 10.5]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    n = len(pos)
    view = rasterize(pos, faces, np.zeros(n, dtype=np.int64), pos, pos,
                     "solid", [(200, 100, 100)], [],
                     RenderConfig(height=14, width=14))
    assert view.layers.max() == 1
    assert view.mask.sum() > 40


def test_canonical_corr_is_identity(tpl):
    ys, xs = np.nonzero(tpl.raster.mask)
    c = tpl.raster.corr[ys, xs]
    err = np.hypot(c[:, 0] - xs, c[:, 1] - ys)
    assert err.max() < 1e-3


def test_pixel_layer_counts_match_brute_force(tpl_small):
    """Scene layer channel equals the number of faces covering each pixel."""
    scene, template, view = generate_scene(seed=9, index=0, kind="table",
                                           mesh_density=220)
    pos = scene.image_positions()
    rng = np.random.default_rng(1)
    ys, xs = np.nonzero(view.layers >= 0)
    pick = rng.choice(len(ys), size=150, replace=False)
    for i in pick:
        x, y = float(xs[i]), float(ys[i])
        count = sum(_brute_cover(pos[f], x, y) for f in template.faces)
        assert count == int(view.layers[int(y), int(x)])


def test_visible_vertices_sit_on_their_own_top_face(tpl):
    v = tpl.raster
    idx = np.nonzero(v.visible)[0]
    assert len(idx) > 0
    pos = tpl.image_positions
    for i in idx[:: max(1, len(idx) // 80)]:
        x = int(np.rint(pos[i, 0]))
        y = int(np.rint(pos[i, 1]))
        assert v.mask[y, x]
        f = v.face_id[y, x]
        assert i in set(tpl.faces[f].tolist()) or v.layers[y, x] >= 1


def test_brightness_scales_foreground_only():
    p = GarmentParams(texture="solid")
    t = build_canonical(p, seed=2)
    sc = Scene.build(t, "table", [], brightness=0.5)
    dim = sc.render()
    bright = Scene.build(t, "table", [], brightness=1.0).render()
    m = dim.mask & bright.mask
    assert (dim.image[m].astype(int) <= bright.image[m].astype(int) + 1).all()
    bg = ~dim.mask & ~bright.mask
    assert np.array_equal(dim.image[bg], bright.image[bg])


# ------------------------------------------------------------ deformation

def test_fold_reflection_is_isometry(tpl_small):
    t = tpl_small
    op = FoldOp(point=(0.1, 0.6), direction=(0.3, 1.0))
    pos, lay = op.apply(t, t.vertices, np.zeros(t.n_vertices, dtype=np.int64))
    rng = np.random.default_rng(0)
    pairs = rng.integers(0, t.n_vertices, size=(200, 2))
    moved = lay > 0
    for a, b in pairs:
        if moved[a] == moved[b]:
            d0 = np.linalg.norm(t.vertices[a] - t.vertices[b])
            d1 = np.linalg.norm(pos[a] - pos[b])
            assert d1 == pytest.approx(d0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(px=st.floats(-0.4, 0.4), py=st.floats(0.1, 1.2),
       ang=st.floats(0.0, 2 * math.pi))
def test_fold_is_idempotent_and_preserves_line_distance(px, py, ang):
    t = _FOLD_TPL
    op = FoldOp(point=(px, py), direction=(math.cos(ang), math.sin(ang)))
    zeros = np.zeros(t.n_vertices, dtype=np.int64)
    p1, l1 = op.apply(t, t.vertices, zeros)
    # nothing is left on the fold side, so folding again changes nothing
    p2, l2 = op.apply(t, p1, l1)
    assert np.array_equal(p2, p1)
    assert np.array_equal(l2, l1)
    # reflection preserves each vertex's distance to the fold line
    n = np.array([-math.sin(ang), math.cos(ang)])
    s0 = (t.vertices - [px, py]) @ n
    s1 = (p1 - [px, py]) @ n
    assert np.allclose(np.abs(s1), np.abs(s0), atol=1e-9)
    assert (s1 <= 1e-12).all()


_FOLD_TPL = build_canonical(GarmentParams(mesh_density=200), seed=1)


def test_fold_layer_assignment():
    t = _FOLD_TPL
    zeros = np.zeros(t.n_vertices, dtype=np.int64)
    left = FoldOp(point=(-0.35, 0.0), direction=(0.0, 1.0))    # folds x < -0.35
    right = FoldOp(point=(0.35, 0.0), direction=(0.0, -1.0))   # folds x > 0.35
    p1, l1 = left.apply(t, t.vertices, zeros)
    assert set(np.unique(l1)) == {0, 1}
    p2, l2 = right.apply(t, p1, l1)
    # disjoint second fold still lands one above the current maximum
    assert l2.max() == 2
    assert (l2[l1 == 1] == 1).all()


def test_warp_displacement_profile(tpl_small):
    t = tpl_small
    v0 = int(np.argmin(np.linalg.norm(t.vertices - [0.0, 0.65], axis=1)))
    center = tuple(t.vertices[v0])
    op = WarpOp(center=center, shift=(0.08, -0.05), bandwidth=0.2)
    pos, _ = op.apply(t, t.vertices, np.zeros(t.n_vertices, dtype=np.int64))
    disp = np.linalg.norm(pos - t.vertices, axis=1)
    shift_mag = math.hypot(0.08, 0.05)
    assert disp[v0] == pytest.approx(shift_mag, rel=1e-9)
    assert disp.max() <= shift_mag + 1e-12
    far = np.linalg.norm(t.vertices - center, axis=1) > 1.0
    if far.any():
        assert disp[far].max() < shift_mag * math.exp(-1.0 / 0.08)


def test_rigid_preserves_all_distances(tpl_small):
    t = tpl_small
    op = RigidOp(angle=0.7, translation=(0.3, -0.2))
    pos, _ = op.apply(t, t.vertices, np.zeros(t.n_vertices, dtype=np.int64))
    rng = np.random.default_rng(3)
    pairs = rng.integers(0, t.n_vertices, size=(100, 2))
    d0 = np.linalg.norm(t.vertices[pairs[:, 0]] - t.vertices[pairs[:, 1]], axis=1)
    d1 = np.linalg.norm(pos[pairs[:, 0]] - pos[pairs[:, 1]], axis=1)
    assert np.allclose(d0, d1, atol=1e-9)


def test_drape_hangs_everything_below_pin(tpl_small):
    t = tpl_small
    pin = t.landmarks["neck_center"]
    op = DrapeOp(pin_vertex=pin, alpha=0.8, beta=0.5)
    pos, lay = op.apply(t, t.vertices, np.zeros(t.n_vertices, dtype=np.int64))
    others = np.arange(t.n_vertices) != pin
    assert (pos[others, 1] > pos[pin, 1]).all()
    assert set(np.unique(lay)) == {0, 1}
    # median split puts roughly half the cloth in front
    frac = lay.mean()
    assert 0.35 < frac < 0.65
    # lateral compression shrinks the x spread
    assert np.ptp(pos[:, 0]) < np.ptp(t.vertices[:, 0])


def _heapq_dijkstra(edges, lengths, n, source):
    adj = [[] for _ in range(n)]
    for (a, b), d in zip(edges.tolist(), lengths.tolist()):
        adj[a].append((b, d))
        adj[b].append((a, d))
    dist = [math.inf] * n
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return np.array(dist)


def test_geodesics_match_heapq_oracle(tpl_small):
    t = tpl_small
    e, d = t.edge_lengths()
    for src in (0, t.landmarks["neck_center"], t.n_vertices - 1):
        got = geodesic_distances(t, src)
        want = _heapq_dijkstra(e, d, t.n_vertices, src)
        assert np.allclose(got, want, atol=1e-9)
        assert got[src] == 0.0


def test_op_json_roundtrip():
    ops = [FoldOp(point=(0.1, 0.2), direction=(1.0, 0.0)),
           WarpOp(center=(0.0, 0.5), shift=(0.05, 0.0), bandwidth=0.3),
           RigidOp(angle=0.4, translation=(0.1, 0.1), pivot=(0.0, 0.0)),
           DrapeOp(pin_vertex=12, alpha=0.8, beta=0.5)]
    back = [op_from_json(json.loads(json.dumps(o.to_json()))) for o in ops]
    assert back == ops


def test_replay_matches_scene_state(tpl_small):
    scene = sample_scene(tpl_small, "table",
                         np.random.default_rng(123))
    pos, lay = replay(tpl_small, scene.ops)
    assert np.array_equal(pos, scene.positions)
    assert np.array_equal(lay, scene.layers)
    ops2 = [op_from_json(d) for d in scene.ops_json()]
    pos2, lay2 = replay(tpl_small, ops2)
    assert np.allclose(pos2, pos)
    assert np.array_equal(lay2, lay)


# -------------------------------------------------------------- dataset

def test_dataset_bundles_and_determinism(tmp_path):
    m1 = generate_dataset(tmp_path / "a", n_suspended=2, n_table=1, seed=21,
                          mesh_density=250)
    m2 = generate_dataset(tmp_path / "b", n_suspended=2, n_table=1, seed=21,
                          mesh_density=250)
    assert m1["scenes"] == m2["scenes"]       # same per-file digests
    m3 = generate_dataset(tmp_path / "c", n_suspended=1, n_table=0, seed=22,
                          mesh_density=250)
    assert (m3["scenes"][0]["files"]["image.png"]
            != m1["scenes"][0]["files"]["image.png"])

    b = load_scene_bundle(tmp_path / "a" / "scene_0000")
    assert b["image"].shape == (96, 128, 3) and b["image"].dtype == np.uint8
    assert b["mask"].dtype == np.bool_
    assert b["meta"]["kind"] == "suspended"
    # correspondence defined exactly on the mask
    assert (np.isfinite(b["corr"][..., 0]) == b["mask"]).all()
    # canonical render and its mirror map ride along in the bundle
    assert b["canonical"].shape == (96, 128, 3)
    mm = b["mirror"]
    assert (np.isfinite(mm[..., 0]) == b["canonical_mask"]).all()
    ys, xs = np.nonzero(b["canonical_mask"])
    assert np.array_equal(mm[ys, xs, 0], 127 - xs)
    assert np.array_equal(mm[ys, xs, 1], ys)


def test_scene_corr_lands_on_canonical_mask(tmp_path):
    generate_dataset(tmp_path, n_suspended=1, n_table=1, seed=5,
                     mesh_density=250)
    for name in ("scene_0000", "scene_0001"):
        b = load_scene_bundle(tmp_path / name)
        t = rebuild_template(b["meta"])
        ys, xs = np.nonzero(b["mask"])
        c = b["corr"][ys, xs]
        xi = np.clip(np.rint(c[:, 0]).astype(int), 0, 127)
        yi = np.clip(np.rint(c[:, 1]).astype(int), 0, 95)
        on = t.raster.mask[yi, xi].mean()
        assert on > 0.95


def test_camera_rotation_keeps_mask_size(tpl_small):
    sc = Scene.build(tpl_small, "table", [])
    base = sc.render().mask.sum()
    rot = sc.render(camera=Camera(rotation=math.pi / 6,
                                  center=(63.5, 47.5))).mask.sum()
    assert abs(int(base) - int(rot)) < 0.2 * base

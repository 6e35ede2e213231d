"""Synthetic garment scenes with exact correspondence ground truth."""

from .dataset import (DEFAULT_DOMAIN, DEPLOYMENT_DOMAIN, Domain,
                      generate_dataset, generate_scene, load_scene_bundle,
                      mirror_map, rebuild_template, sample_params,
                      sample_scene)
from .deform import (DrapeOp, FoldOp, RigidOp, Scene, WarpOp,
                     geodesic_distances, op_from_json, replay)
from .render import Camera, RenderConfig, RenderedView, rasterize
from .template import (CanonicalTemplate, GarmentParams, REGION_LABELS,
                       SEAM_CLASSES, build_canonical, frame_transform,
                       lattice_dims, mirror_pixel)

__all__ = [
    "Camera", "CanonicalTemplate", "DEFAULT_DOMAIN", "DEPLOYMENT_DOMAIN",
    "Domain", "DrapeOp", "FoldOp", "GarmentParams",
    "REGION_LABELS", "RenderConfig", "RenderedView", "RigidOp",
    "SEAM_CLASSES", "Scene", "WarpOp", "build_canonical", "frame_transform",
    "generate_dataset", "generate_scene", "geodesic_distances",
    "lattice_dims", "load_scene_bundle", "mirror_map", "mirror_pixel",
    "op_from_json",
    "rasterize", "rebuild_template", "replay", "sample_params",
    "sample_scene",
]

"""Parametric quadruped body model toolkit.

Core pieces: a linear-blend-skinned mesh model with shape blendshapes
(`pose_mesh`), a fixed-focal camera (`project`), the published loss suite
(`losses`), an Adam-based keypoint fitter (`fit`), evaluation metrics
(`pa_mpjpe`, `pck`, `auc`), a synthetic scene pipeline (`sample_scene`,
`rasterize`, `emit_annotation`), and weighted dataset aggregation
(`aggregate`, `split`, `sample_batch`).
"""

from .camera import Camera, project, project_jacobian
from .dataset import (DEFAULT_SOURCE_WEIGHTS, Aggregate, DatasetSource, aggregate,
                      sample_batch, split)
from .errors import ParseError, ValidationError
from .fitter import (Adam, FitConfig, FitFailure, FitResult, FitStage, Observation,
                     batch_fit, fit)
from .jacobian import (KinematicCache, param_size, pose_keypoints,
                       pose_keypoints_with_jacobian)
from .losses import (DEFAULT_WEIGHTS, EmbeddingBatch, LossReport, LossWeights,
                     ParamGradient, PriorDistribution, grad_fd, load_prior,
                     loss_2d, loss_2d_grad, loss_3d, loss_3d_grad, loss_adv,
                     loss_prior, loss_prior_grad, loss_supcon, loss_total,
                     make_toy_prior, reference_discriminator, save_prior)
from .metrics import (VALIDATION_RATIO, DegenerateGeometryError, MetricsAccumulator,
                      MetricsReport, PckSpec, ProcrustesResult, auc, pa_mpjpe,
                      pa_mpvpe, pck, procrustes_align)
from .model import (ModelTemplate, Params, PosedMesh, export_obj, load_template,
                    pose_mesh, rodrigues, rodrigues_with_jacobian, save_template)
from .pipeline import (SPECIES, SPECIES_FAMILY, AnnotationRecord, SceneSample,
                       composite_background, cycle_consistency, emit_annotation,
                       load_pose_library, load_record, mask_bbox, sample_scene,
                       sample_scene_arrays, sample_scenes, save_pose_library,
                       save_record)
from .raster import ConditionImages, keypoint_visibility, rasterize
from .toy import (KEYPOINT_NAMES, TORSO_KEYPOINTS, make_toy_pose_library,
                  make_toy_template)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Aggregate", "AnnotationRecord", "Camera", "ConditionImages",
    "DEFAULT_SOURCE_WEIGHTS", "DEFAULT_WEIGHTS", "DatasetSource",
    "DegenerateGeometryError", "EmbeddingBatch", "FitConfig", "FitFailure",
    "FitResult", "FitStage", "KEYPOINT_NAMES", "KinematicCache", "LossReport",
    "LossWeights", "MetricsAccumulator", "MetricsReport", "ModelTemplate",
    "Observation", "ParamGradient", "Params", "ParseError", "PckSpec",
    "PosedMesh", "PriorDistribution", "ProcrustesResult", "SPECIES",
    "SPECIES_FAMILY", "SceneSample", "TORSO_KEYPOINTS", "VALIDATION_RATIO",
    "ValidationError", "aggregate", "auc", "batch_fit", "composite_background",
    "cycle_consistency", "emit_annotation", "export_obj", "fit", "grad_fd",
    "keypoint_visibility", "load_pose_library", "load_prior", "load_record",
    "load_template", "loss_2d", "loss_2d_grad", "loss_3d", "loss_3d_grad",
    "loss_adv", "loss_prior", "loss_prior_grad", "loss_supcon", "loss_total",
    "make_toy_pose_library", "make_toy_prior", "make_toy_template", "mask_bbox",
    "pa_mpjpe", "pa_mpvpe", "param_size", "pck", "pose_keypoints",
    "pose_keypoints_with_jacobian", "pose_mesh", "procrustes_align", "project",
    "project_jacobian", "rasterize", "rodrigues", "rodrigues_with_jacobian",
    "sample_batch", "sample_scene", "sample_scene_arrays", "sample_scenes",
    "save_pose_library",
    "save_prior", "save_record", "save_template", "split",
]

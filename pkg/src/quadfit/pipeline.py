"""Synthetic data pipeline: scene sampling through annotation emission.

A scene is a (shape, pose, placement, species) draw. Shape comes from the
prior, pose from a library with the root row replaced by a uniform random
orientation, and placement goes into the camera translation (the model
offset gamma stays zero, which projects identically). Rendered scenes are
filtered by mask cycle consistency and serialized as one annotation JSON
per image plus a JSONL manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .camera import DEFAULT_IMAGE_SIZE, Camera, project
from .errors import ParseError, ValidationError
from .losses import PriorDistribution
from .model import ModelTemplate, Params, pose_mesh
from .raster import ConditionImages, keypoint_visibility

# Species shipped with the toy data, keyed to their taxonomic family.
SPECIES_FAMILY = {
    "cat": "felidae", "lion": "felidae", "cheetah": "felidae", "tiger": "felidae",
    "dog": "canidae", "wolf": "canidae",
    "horse": "equidae", "zebra": "equidae",
    "cow": "bovidae",
    "hippo": "hippopotamidae",
}
SPECIES = tuple(SPECIES_FAMILY)

# Hard bounds for scene draws: root orientation per-axis and placement box.
ROOT_ROTATION_LOW, ROOT_ROTATION_HIGH = -np.pi, np.pi
POSITION_LOW = np.array([-0.5, -0.5, 4.0])
POSITION_HIGH = np.array([0.5, 0.5, 8.0])

# Cycle-consistency IoU buckets.
IOU_ACCEPT = 0.8
IOU_UNCERTAIN = 0.6

BBOX_PAD = 2  # pixels around the tight mask bounds


@dataclass
class SceneSample:
    params: Params
    camera: Camera
    species: str
    family: str
    pose_id: int
    seed: int
    index: int = 0  # position within the batch drawn from ``seed``

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "index": self.index,
            "species": self.species,
            "family": self.family,
            "pose_id": self.pose_id,
            "beta": self.params.beta.tolist(),
            "theta": self.params.theta.tolist(),
            "gamma": self.params.gamma.tolist(),
            "camera": self.camera.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSample":
        try:
            return cls(
                params=Params(np.asarray(d["beta"]), np.asarray(d["theta"]),
                              np.asarray(d["gamma"])),
                camera=Camera.from_dict(d["camera"]),
                species=d["species"],
                family=d["family"],
                pose_id=int(d["pose_id"]),
                seed=int(d["seed"]),
                index=int(d.get("index", 0)),
            )
        except (KeyError, TypeError) as e:
            raise ParseError(f"bad scene record: {e}") from e


def sample_scene_arrays(
    prior: PriorDistribution,
    pose_library: np.ndarray,
    count: int,
    seed: int,
) -> dict[str, np.ndarray]:
    """Raw scene draws as arrays (the single-scene path wraps this).

    Draw order per batch: species, pose row, shape noise, root orientation,
    placement. Bounds: root orientation per-axis uniform in [-pi, pi),
    placement uniform in the box [-0.5,-0.5,4] .. [0.5,0.5,8].
    """
    lib = np.asarray(pose_library, dtype=np.float64)
    if lib.ndim != 3 or len(lib) == 0:
        raise ValidationError("pose library must be a non-empty (P, J, 3) array")
    rng = np.random.default_rng(seed)
    species_idx = rng.integers(0, len(SPECIES), size=count)
    pose_idx = rng.integers(0, len(lib), size=count)
    chol = np.linalg.cholesky(prior.sigma_beta)
    beta = prior.mu_beta + rng.standard_normal((count, prior.n_beta)) @ chol.T
    root = rng.uniform(ROOT_ROTATION_LOW, ROOT_ROTATION_HIGH, size=(count, 3))
    position = rng.uniform(POSITION_LOW, POSITION_HIGH, size=(count, 3))
    theta = lib[pose_idx].copy()
    theta[:, 0, :] = root
    return {
        "species_idx": species_idx,
        "pose_idx": pose_idx,
        "beta": beta,
        "theta": theta,
        "position": position,
    }


def sample_scenes(
    prior: PriorDistribution,
    pose_library: np.ndarray,
    count: int,
    seed: int,
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
) -> list[SceneSample]:
    draws = sample_scene_arrays(prior, pose_library, count, seed)
    scenes = []
    for i in range(count):
        species = SPECIES[draws["species_idx"][i]]
        scenes.append(SceneSample(
            params=Params(draws["beta"][i], draws["theta"][i], np.zeros(3)),
            camera=Camera(image_size=image_size, translation=draws["position"][i]),
            species=species,
            family=SPECIES_FAMILY[species],
            pose_id=int(draws["pose_idx"][i]),
            seed=seed,
            index=i,
        ))
    return scenes


def sample_scene(
    prior: PriorDistribution,
    pose_library: np.ndarray,
    seed: int,
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
) -> SceneSample:
    return sample_scenes(prior, pose_library, 1, seed, image_size)[0]


def save_pose_library(poses: np.ndarray, path) -> None:
    """Write a pose library: a JSON list of (n_joints, 3) axis-angle rows."""
    arr = np.asarray(poses, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError("pose library must be (P, J, 3)")
    with open(path, "w") as f:
        json.dump(arr.tolist(), f)


def load_pose_library(path) -> np.ndarray:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"pose library JSON is malformed: {e}") from e
    try:
        arr = np.asarray(doc, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ParseError(f"pose library is not a numeric array: {e}") from e
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[2] != 3:
        raise ValidationError(f"pose library must be (P, J, 3), got {arr.shape}")
    return arr


def cycle_consistency(mask_a: np.ndarray, mask_b: np.ndarray) -> tuple[float, bool]:
    """IoU between two masks and whether it clears the accept threshold."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = (a | b).sum()
    if union == 0:
        raise ValidationError("IoU undefined: both masks are empty")
    iou = float((a & b).sum() / union)
    return iou, iou >= IOU_ACCEPT


def iou_bucket(iou: float) -> str:
    if iou >= IOU_ACCEPT:
        return "accepted"
    if iou >= IOU_UNCERTAIN:
        return "uncertain"
    return "rejected"


def composite_background(
    foreground: np.ndarray, mask: np.ndarray, background: np.ndarray
) -> np.ndarray:
    """Per-pixel select: foreground where the mask is set, else background."""
    fg = np.asarray(foreground)
    bg = np.asarray(background)
    m = np.asarray(mask).astype(bool)
    if fg.shape != bg.shape or fg.shape[:2] != m.shape:
        raise ValueError("foreground, background, and mask sizes must agree")
    return np.where(m[:, :, None], fg, bg)


@dataclass
class AnnotationRecord:
    """One image worth of supervision. 3D fields are None for 2D-only data."""

    image: str
    source: str
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive right/bottom)
    keypoints2d: np.ndarray          # (K, 2)
    visibility: np.ndarray           # (K,)
    camera: Camera
    species: str | None = None
    family: str | None = None
    keypoints3d: np.ndarray | None = None
    beta: np.ndarray | None = None
    theta: np.ndarray | None = None
    gamma: np.ndarray | None = None

    def has_3d(self) -> bool:
        return self.keypoints3d is not None

    def to_dict(self) -> dict:
        opt = lambda a: None if a is None else np.asarray(a).tolist()  # noqa: E731
        return {
            "image": self.image,
            "source": self.source,
            "species": self.species,
            "family": self.family,
            "bbox": [int(v) for v in self.bbox],
            "keypoints2d": np.asarray(self.keypoints2d).tolist(),
            "visibility": np.asarray(self.visibility).astype(int).tolist(),
            "camera": self.camera.to_dict(),
            "keypoints3d": opt(self.keypoints3d),
            "beta": opt(self.beta),
            "theta": opt(self.theta),
            "gamma": opt(self.gamma),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        opt = lambda v: None if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
        try:
            return cls(
                image=d["image"],
                source=d["source"],
                species=d.get("species"),
                family=d.get("family"),
                bbox=tuple(int(v) for v in d["bbox"]),
                keypoints2d=np.asarray(d["keypoints2d"], dtype=np.float64),
                visibility=np.asarray(d["visibility"], dtype=np.uint8),
                camera=Camera.from_dict(d["camera"]),
                keypoints3d=opt(d.get("keypoints3d")),
                beta=opt(d.get("beta")),
                theta=opt(d.get("theta")),
                gamma=opt(d.get("gamma")),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad annotation record: {e}") from e


def save_record(record: AnnotationRecord, path) -> None:
    with open(path, "w") as f:
        json.dump(record.to_dict(), f, sort_keys=True)


def load_record(path) -> AnnotationRecord:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"annotation JSON is malformed: {e}") from e
    return AnnotationRecord.from_dict(doc)


def mask_bbox(mask: np.ndarray, pad: int = BBOX_PAD) -> tuple[int, int, int, int]:
    """Tight bounds of the mask padded by ``pad``, clamped to the image."""
    m = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(m)
    if len(xs) == 0:
        raise ValidationError("cannot compute a bbox of an empty mask")
    h, w = m.shape
    return (
        max(int(xs.min()) - pad, 0),
        max(int(ys.min()) - pad, 0),
        min(int(xs.max()) + pad + 1, w),
        min(int(ys.max()) + pad + 1, h),
    )


def emit_annotation(
    template: ModelTemplate,
    scene: SceneSample,
    cond: ConditionImages,
    image_path: str,
    source: str = "CtrlAni3D",
) -> AnnotationRecord:
    """Build the annotation record for a rendered scene.

    Refuses to emit when the mask is empty (animal fully out of frame).
    Visible keypoints are guaranteed inside the bbox: visibility requires a
    covered pixel, and the bbox contains every covered pixel plus padding.
    """
    bbox = mask_bbox(cond.mask)
    mesh = pose_mesh(template, scene.params)
    kp3d = mesh.keypoints3d
    px, _, ok = project(kp3d, scene.camera)
    vis = keypoint_visibility(kp3d, scene.camera, cond.depth)
    kp2d = np.where(ok[:, None], px, -1.0)
    return AnnotationRecord(
        image=image_path,
        source=source,
        species=scene.species,
        family=scene.family,
        bbox=bbox,
        keypoints2d=kp2d,
        visibility=vis,
        camera=scene.camera,
        keypoints3d=kp3d,
        beta=scene.params.beta,
        theta=scene.params.theta,
        gamma=scene.params.gamma,
    )

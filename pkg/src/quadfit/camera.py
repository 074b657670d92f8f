"""Fixed-focal perspective camera and pixel projection.

Pixel conventions: (0, 0) is the top-left corner, +x right, +y down.
A point at pixel (u, v) lands in the pixel cell (floor(u), floor(v)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_FOCAL = 1000.0
DEFAULT_IMAGE_SIZE = (512, 512)

# Camera-space depths at or below this count as behind the camera.
MIN_DEPTH = 1e-6


@dataclass
class Camera:
    """Perspective camera with a fixed focal length and centered principal point.

    ``translation`` is added to model-space points before projection, so the
    camera itself sits at the origin looking down +z with +y pointing down.
    """

    focal: float = DEFAULT_FOCAL
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE  # (width, height)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    principal_point: tuple[float, float] | None = None  # defaults to image center

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.translation.shape != (3,):
            raise ValidationError("camera translation must be a 3-vector")
        if self.focal <= 0:
            raise ValidationError("focal length must be positive")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValidationError("image size must be positive")

    @property
    def center(self) -> tuple[float, float]:
        if self.principal_point is not None:
            return self.principal_point
        w, h = self.image_size
        return (w / 2.0, h / 2.0)

    def intrinsics(self) -> np.ndarray:
        """3x3 K matrix."""
        cx, cy = self.center
        return np.array([
            [self.focal, 0.0, cx],
            [0.0, self.focal, cy],
            [0.0, 0.0, 1.0],
        ])

    def to_dict(self) -> dict:
        d = {
            "focal": float(self.focal),
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
            "translation": [float(v) for v in self.translation],
        }
        if self.principal_point is not None:
            d["principal_point"] = [float(v) for v in self.principal_point]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            pp = d.get("principal_point")
            return cls(
                focal=float(d["focal"]),
                image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
                translation=np.asarray(d["translation"], dtype=np.float64),
                principal_point=tuple(float(v) for v in pp) if pp is not None else None,
            )
        except (KeyError, TypeError, IndexError) as e:
            raise ParseError(f"bad camera dict: {e}") from e


def project(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project model-space points to pixels.

    Returns ``(pixels, depths, valid)`` where ``pixels`` is (N, 2), ``depths``
    is the camera-space z after translation, and ``valid`` flags points in
    front of the camera plane. Pixels of invalid points are NaN; no exception
    is raised for them.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {pts.shape}")
    cam = pts + camera.translation
    depths = cam[:, 2].copy()
    valid = depths > MIN_DEPTH
    cx, cy = camera.center
    pixels = np.full((len(pts), 2), np.nan)
    d = np.where(valid, depths, 1.0)
    pixels[:, 0] = camera.focal * cam[:, 0] / d + cx
    pixels[:, 1] = camera.focal * cam[:, 1] / d + cy
    pixels[~valid] = np.nan
    return pixels, depths, valid


def project_jacobian(points: np.ndarray, camera: Camera) -> np.ndarray:
    """d(pixel)/d(point) for each point, shape (N, 2, 3).

    The same matrix is d(pixel)/d(translation) since both enter additively.
    Rows for behind-camera points are zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts + camera.translation
    d = cam[:, 2]
    ok = d > MIN_DEPTH
    safe = np.where(ok, d, 1.0)
    jac = np.zeros((len(pts), 2, 3))
    f = camera.focal
    jac[:, 0, 0] = f / safe
    jac[:, 0, 2] = -f * cam[:, 0] / safe**2
    jac[:, 1, 1] = f / safe
    jac[:, 1, 2] = -f * cam[:, 1] / safe**2
    jac[~ok] = 0.0
    return jac

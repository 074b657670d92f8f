"""Z-buffer triangle rasterization and depth-tested keypoint visibility.

Pixels are sampled at their centers (ix + 0.5, iy + 0.5). Coverage uses
inclusive edge tests in either winding, so shared edges never open gaps;
overlapping faces resolve to the nearest camera-space depth, interpolated
perspective-correctly (1/d is linear in screen space). Background pixels
keep a +inf depth sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, project

# Relative slack for the keypoint-vs-surface depth test.
VISIBILITY_EPS_SCALE = 1e-3


@dataclass
class ConditionImages:
    """Rendered silhouette mask and depth map for one scene."""

    mask: np.ndarray   # (H, W) bool
    depth: np.ndarray  # (H, W) float64, +inf where uncovered


def rasterize(vertices: np.ndarray, faces: np.ndarray, camera: Camera) -> ConditionImages:
    """Render the mesh silhouette and nearest-depth map.

    Faces touching a vertex at or behind the camera plane are dropped
    rather than clipped; a fully visible mesh is unaffected.
    """
    w, h = camera.image_size
    px, depths, ok = project(vertices, camera)
    depth = np.full((h, w), np.inf)
    faces = np.asarray(faces, dtype=np.int64)
    inv_d = np.where(ok, 1.0 / np.where(ok, depths, 1.0), 0.0)

    for tri in faces:
        if not ok[tri].all():
            continue
        p = px[tri]  # (3, 2)
        x0 = max(int(np.floor(p[:, 0].min())), 0)
        x1 = min(int(np.ceil(p[:, 0].max())), w - 1)
        y0 = max(int(np.floor(p[:, 1].min())), 0)
        y1 = min(int(np.ceil(p[:, 1].max())), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        area = ((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0]))
        if abs(area) < 1e-12:
            continue
        cx = np.arange(x0, x1 + 1) + 0.5
        cy = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        w0 = (p[2, 0] - p[1, 0]) * (cy - p[1, 1]) - (p[2, 1] - p[1, 1]) * (cx - p[1, 0])
        w1 = (p[0, 0] - p[2, 0]) * (cy - p[2, 1]) - (p[0, 1] - p[2, 1]) * (cx - p[2, 0])
        w2 = (p[1, 0] - p[0, 0]) * (cy - p[0, 1]) - (p[1, 1] - p[0, 1]) * (cx - p[0, 0])
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        if not inside.any():
            continue
        lam0, lam1, lam2 = w0 / area, w1 / area, w2 / area
        inv = lam0 * inv_d[tri[0]] + lam1 * inv_d[tri[1]] + lam2 * inv_d[tri[2]]
        d = np.where(inv > 0, 1.0 / np.where(inv > 0, inv, 1.0), np.inf)
        tile = depth[y0:y1 + 1, x0:x1 + 1]
        np.minimum(tile, np.where(inside, d, np.inf), out=tile)

    return ConditionImages(mask=np.isfinite(depth), depth=depth)


def keypoint_visibility(
    keypoints3d: np.ndarray,
    camera: Camera,
    depth: np.ndarray,
    eps: float | None = None,
) -> np.ndarray:
    """Per-keypoint visibility flags against a rendered depth map.

    A keypoint is visible when it projects inside the image, its pixel is
    covered, and its camera-space depth is at most the surface depth there
    plus eps (default 1e-3 times the mean covered depth). A keypoint whose
    pixel shows background counts as occluded: it is outside the rendered
    silhouette, so visible keypoints always land inside the mask.
    """
    h, w = depth.shape
    px, dk, ok = project(keypoints3d, camera)
    n = len(px)
    vis = np.zeros(n, dtype=np.uint8)
    inside = ok & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    if not inside.any():
        return vis
    if eps is None:
        covered = np.isfinite(depth)
        eps = VISIBILITY_EPS_SCALE * float(depth[covered].mean()) if covered.any() else 0.0
    ix = np.clip(np.floor(px[inside, 0]).astype(int), 0, w - 1)
    iy = np.clip(np.floor(px[inside, 1]).astype(int), 0, h - 1)
    dp = depth[iy, ix]
    vis[inside] = (np.isfinite(dp) & (dk[inside] <= dp + eps)).astype(np.uint8)
    return vis

"""Evaluation metrics: Procrustes-aligned point errors, PCK, AUC.

All aggregate numbers are plain means over instances, each instance
weighted equally. PCK uses strict inequality, so a distance exactly at
the threshold does not count as correct.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Held-out fraction used by dataset splits and quoted in reports.
VALIDATION_RATIO = 3 / 20


class DegenerateGeometryError(ValueError):
    """Point set leaves the alignment underdetermined."""


@dataclass
class ProcrustesResult:
    scale: float
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)
    aligned: np.ndarray      # (N, 3) transformed source points
    residual: float          # Frobenius norm of (aligned - target)


def procrustes_align(source: np.ndarray, target: np.ndarray) -> ProcrustesResult:
    """Similarity transform (scale, rotation, translation) minimizing
    ||s R x + t - y||^2, solved in closed form via SVD.

    The rotation is proper (det +1); a reflection in the raw SVD solution
    is folded into the smallest singular direction. Collinear or coincident
    sources raise DegenerateGeometryError.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    n = len(x)
    if n < 3:
        raise DegenerateGeometryError("need at least 3 points")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("source points are collinear or coincident")
    m = xc.T @ yc
    u, s, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    signs = np.ones(3)
    signs[-1] = d
    rot = vt.T @ np.diag(signs) @ u.T
    var = float((xc ** 2).sum())
    scale = float((s * signs).sum() / var)
    trans = my - scale * rot @ mx
    aligned = scale * x @ rot.T + trans
    return ProcrustesResult(
        scale=scale, rotation=rot, translation=trans, aligned=aligned,
        residual=float(np.linalg.norm(aligned - y)),
    )


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-point Euclidean error after Procrustes-aligning pred onto gt."""
    res = procrustes_align(pred, gt)
    return float(np.linalg.norm(res.aligned - np.asarray(gt, dtype=np.float64),
                                axis=1).mean())


# Vertex errors use the same alignment; the alias keeps call sites readable.
pa_mpvpe = pa_mpjpe


@dataclass(frozen=True)
class PckSpec:
    """Threshold rule for PCK.

    ``hth`` mode thresholds at fraction * ||head - tail|| of the 2D ground
    truth; instances with an invisible head or tail are skipped. ``fraction``
    mode thresholds at fraction * normalizer where the default normalizer is
    the longest side of the visible ground-truth keypoint bbox.
    """

    mode: str = "hth"
    fraction: float = 0.5
    head: int = 0
    tail: int = 2

    def label(self) -> str:
        if self.mode == "hth":
            return f"pck@{self.fraction:g}hth"
        return f"pck@{self.fraction:g}bbox"


def _bbox_side(points: np.ndarray) -> float:
    span = points.max(axis=0) - points.min(axis=0)
    return float(span.max())


def pck(
    pred2d: np.ndarray,
    gt2d: np.ndarray,
    visibility: np.ndarray,
    spec: PckSpec = PckSpec(),
    normalizer: float | None = None,
) -> float | None:
    """Fraction of visible keypoints with pixel error strictly below the
    threshold. Returns None for hth instances whose head or tail keypoint
    is invisible (callers count those as skipped).
    """
    vis = np.asarray(visibility).astype(bool).reshape(-1)
    if not vis.any():
        raise ValueError("PCK needs at least one visible keypoint")
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    if spec.mode == "hth":
        if not (vis[spec.head] and vis[spec.tail]):
            return None
        threshold = spec.fraction * float(
            np.linalg.norm(gt2d[spec.head] - gt2d[spec.tail]))
    elif spec.mode == "fraction":
        norm = _bbox_side(gt2d[vis]) if normalizer is None else float(normalizer)
        threshold = spec.fraction * norm
    else:
        raise ValueError(f"unknown PCK mode: {spec.mode}")
    dist = np.linalg.norm(pred2d[vis] - gt2d[vis], axis=1)
    return float((dist < threshold).mean())


def auc(
    pred2d: np.ndarray,
    gt2d: np.ndarray,
    visibility: np.ndarray,
    normalizer: float | None = None,
    steps: int = 100,
) -> float:
    """Trapezoidal integral of PCK over normalized thresholds in [0, 1].

    Distances are divided by ``normalizer`` (default: longest side of the
    visible ground-truth bbox); the threshold axis is sampled at ``steps``
    uniform intervals.
    """
    vis = np.asarray(visibility).astype(bool).reshape(-1)
    if not vis.any():
        raise ValueError("AUC needs at least one visible keypoint")
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    norm = _bbox_side(gt2d[vis]) if normalizer is None else float(normalizer)
    if norm <= 0:
        raise ValueError("normalizer must be positive")
    dist = np.linalg.norm(pred2d[vis] - gt2d[vis], axis=1) / norm
    ts = np.linspace(0.0, 1.0, steps + 1)
    frac = (dist[None, :] < ts[:, None]).mean(axis=1)
    return float(0.5 * ((frac[1:] + frac[:-1]) * np.diff(ts)).sum())


@dataclass
class MetricsReport:
    pa_mpjpe: float | None
    pa_mpvpe: float | None
    pck: dict[str, float]
    auc: float | None
    n_instances: int
    n_skipped_hth: int

    def to_dict(self) -> dict:
        return {
            "pa_mpjpe": self.pa_mpjpe,
            "pa_mpvpe": self.pa_mpvpe,
            "pck": dict(self.pck),
            "auc": self.auc,
            "n_instances": self.n_instances,
            "n_skipped_hth": self.n_skipped_hth,
        }


@dataclass
class MetricsAccumulator:
    """Collects per-instance metrics and averages them on report()."""

    pck_specs: tuple[PckSpec, ...] = (PckSpec(),)
    _jpe: list = field(default_factory=list)
    _vpe: list = field(default_factory=list)
    _auc: list = field(default_factory=list)
    _pck: dict = field(default_factory=dict)
    _n: int = 0
    _skipped: int = 0

    def add(
        self,
        pred_kp3d: np.ndarray | None = None,
        gt_kp3d: np.ndarray | None = None,
        pred_vertices: np.ndarray | None = None,
        gt_vertices: np.ndarray | None = None,
        pred2d: np.ndarray | None = None,
        gt2d: np.ndarray | None = None,
        visibility: np.ndarray | None = None,
    ) -> None:
        self._n += 1
        if pred_kp3d is not None and gt_kp3d is not None:
            self._jpe.append(pa_mpjpe(pred_kp3d, gt_kp3d))
        if pred_vertices is not None and gt_vertices is not None:
            self._vpe.append(pa_mpvpe(pred_vertices, gt_vertices))
        if pred2d is not None and gt2d is not None and visibility is not None:
            vis = np.asarray(visibility).astype(bool).reshape(-1)
            if vis.any():
                for spec in self.pck_specs:
                    v = pck(pred2d, gt2d, vis, spec)
                    if v is None:
                        self._skipped += 1
                    else:
                        self._pck.setdefault(spec.label(), []).append(v)
                self._auc.append(auc(pred2d, gt2d, vis))

    def report(self) -> MetricsReport:
        mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
        return MetricsReport(
            pa_mpjpe=mean(self._jpe),
            pa_mpvpe=mean(self._vpe),
            pck={k: float(np.mean(v)) for k, v in sorted(self._pck.items())},
            auc=mean(self._auc),
            n_instances=self._n,
            n_skipped_hth=self._skipped,
        )

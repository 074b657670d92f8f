"""Training/fitting losses and their gradients.

The total objective is a weighted sum of up to five components (3D
supervision, 2D reprojection, shape/pose prior, adversarial, supervised
contrastive). Components that do not apply to a sample are absent, never
zero. Published default weights:

    total = 0.05 * kp3d + 0.01 * kp2d + 0.001 * prior
          + 0.0005 * adv + 0.0005 * supcon

Pixel errors are reported in image-width units so the 2D term is
resolution independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .camera import Camera, project, project_jacobian
from .errors import ParseError, ValidationError
from .jacobian import KinematicCache, pose_keypoints_with_jacobian
from .model import ModelTemplate, Params

PRIOR_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    """Published component and inner-term weights."""

    kp3d: float = 0.05
    kp2d: float = 0.01
    prior: float = 0.001
    adv: float = 0.0005
    supcon: float = 0.0005
    # inner weights of the 3D term
    kp3d_beta: float = 0.01
    kp3d_theta: float = 0.2
    # beta weight inside the prior term (theta stays unweighted)
    prior_beta: float = 0.5


DEFAULT_WEIGHTS = LossWeights()


@dataclass
class LossReport:
    """Weighted total plus unweighted per-component values (None = absent)."""

    total: float
    kp3d: float | None = None
    kp2d: float | None = None
    prior: float | None = None
    adv: float | None = None
    supcon: float | None = None


def loss_total(
    kp3d: float | None = None,
    kp2d: float | None = None,
    prior: float | None = None,
    adv: float | None = None,
    supcon: float | None = None,
    weights: LossWeights = DEFAULT_WEIGHTS,
) -> LossReport:
    """Combine whatever components are present. All-absent is an error."""
    parts = [
        (kp3d, weights.kp3d), (kp2d, weights.kp2d), (prior, weights.prior),
        (adv, weights.adv), (supcon, weights.supcon),
    ]
    if all(v is None for v, _ in parts):
        raise ValueError("loss_total needs at least one component")
    total = sum(w * v for v, w in parts if v is not None)
    return LossReport(total=float(total), kp3d=kp3d, kp2d=kp2d,
                      prior=prior, adv=adv, supcon=supcon)


# ---------------------------------------------------------------------------
# supervised contrastive

@dataclass
class EmbeddingBatch:
    """Embeddings with integer group labels (taxonomic family ids)."""

    z: np.ndarray       # (B, D)
    labels: np.ndarray  # (B,)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.z.ndim != 2 or len(self.z) != len(self.labels):
            raise ValidationError("z must be (B, D) with one label per row")
        if len(self.z) < 2:
            raise ValidationError("contrastive batches need at least 2 rows")


def loss_supcon(
    batch: EmbeddingBatch,
    normalize: bool = True,
    log_form: bool = False,
    temperature: float = 1.0,
) -> float:
    """Supervised contrastive loss over a labeled embedding batch.

    Default is the literal published form: for each anchor the mean over
    same-label rows of exp(z_i . z_p) / sum_others exp(z_i . z_o), negated
    and summed over anchors. No log, no temperature. Anchors without any
    positive contribute 0. ``log_form=True`` switches to the conventional
    log-ratio variant; ``temperature`` divides the dot products in either
    form. The softmax denominator is evaluated with max-subtraction.
    """
    z = batch.z
    if normalize:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValidationError("cannot normalize a zero embedding")
        z = z / norms
    sim = (z @ z.T) / temperature
    n = len(z)
    same = batch.labels[:, None] == batch.labels[None, :]
    off = ~np.eye(n, dtype=bool)
    total = 0.0
    for i in range(n):
        pos = same[i] & off[i]
        npos = int(pos.sum())
        if npos == 0:
            continue
        others = sim[i, off[i]]
        m = others.max()
        denom = np.exp(others - m).sum()
        ratio = np.exp(sim[i, pos] - m) / denom
        if log_form:
            total += -np.log(ratio).sum() / npos
        else:
            total += -ratio.sum() / npos
    return float(total)


# ---------------------------------------------------------------------------
# 3D / 2D supervision

def loss_3d(
    pred_beta: np.ndarray | None,
    pred_theta: np.ndarray | None,
    pred_kp3d: np.ndarray,
    gt_beta: np.ndarray | None,
    gt_theta: np.ndarray | None,
    gt_kp3d: np.ndarray,
    weights: LossWeights = DEFAULT_WEIGHTS,
) -> float:
    """Squared shape/pose parameter errors plus an L1 keypoint term.

    value = 0.01 |dbeta|^2 + 0.2 |dtheta|^2 + sum |dK3D|; the parameter
    terms are skipped when either side is None (keypoint-only records).
    """
    total = 0.0
    if pred_beta is not None and gt_beta is not None:
        d = np.asarray(pred_beta, dtype=np.float64) - np.asarray(gt_beta, dtype=np.float64)
        total += weights.kp3d_beta * float(d @ d)
    if pred_theta is not None and gt_theta is not None:
        d = (np.asarray(pred_theta, dtype=np.float64)
             - np.asarray(gt_theta, dtype=np.float64)).ravel()
        total += weights.kp3d_theta * float(d @ d)
    dk = np.asarray(pred_kp3d, dtype=np.float64) - np.asarray(gt_kp3d, dtype=np.float64)
    total += float(np.abs(dk).sum())
    return total


def loss_2d(
    pred_kp3d: np.ndarray,
    camera: Camera,
    gt_kp2d: np.ndarray,
    visibility: np.ndarray,
    normalize: bool = True,
) -> float | None:
    """L1 reprojection error over visible keypoints.

    Pixel residuals are divided by the image width when ``normalize`` is
    set (a 3 px + 4 px error at 512 wide scores 7/512). Returns None when
    nothing is visible. A visible keypoint behind the camera is an error.
    """
    vis = np.asarray(visibility).astype(bool).reshape(-1)
    if not vis.any():
        return None
    px, _, ok = project(pred_kp3d, camera)
    if np.any(vis & ~ok):
        raise ValidationError("a visible keypoint projects behind the camera")
    diff = px[vis] - np.asarray(gt_kp2d, dtype=np.float64)[vis]
    err = float(np.abs(diff).sum())
    if normalize:
        err /= camera.image_size[0]
    return err


# ---------------------------------------------------------------------------
# prior

@dataclass
class PriorDistribution:
    """Gaussian over shape coefficients and flattened pose vectors."""

    mu_beta: np.ndarray      # (n_beta,)
    sigma_beta: np.ndarray   # (n_beta, n_beta), SPD
    mu_theta: np.ndarray     # (3 * n_joints,)
    sigma_theta: np.ndarray  # (3 * n_joints, 3 * n_joints), SPD
    _chol_beta: tuple = field(default=None, repr=False, compare=False)
    _chol_theta: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mu_beta = np.asarray(self.mu_beta, dtype=np.float64).reshape(-1)
        self.sigma_beta = np.asarray(self.sigma_beta, dtype=np.float64)
        self.mu_theta = np.asarray(self.mu_theta, dtype=np.float64).reshape(-1)
        self.sigma_theta = np.asarray(self.sigma_theta, dtype=np.float64)
        nb, nt = len(self.mu_beta), len(self.mu_theta)
        if self.sigma_beta.shape != (nb, nb) or self.sigma_theta.shape != (nt, nt):
            raise ValidationError("covariance shapes do not match the means")
        try:
            # Cholesky both validates SPD and backs the Mahalanobis solves;
            # the explicit inverse is never formed.
            self._chol_beta = cho_factor(self.sigma_beta)
            self._chol_theta = cho_factor(self.sigma_theta)
        except np.linalg.LinAlgError as e:
            raise ValidationError(f"covariance is not positive definite: {e}") from e

    @property
    def n_beta(self) -> int:
        return len(self.mu_beta)

    @property
    def n_joints(self) -> int:
        return len(self.mu_theta) // 3

    def solve_beta(self, dev: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol_beta, dev)

    def solve_theta(self, dev: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol_theta, dev)

    def mean_params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mu_beta.copy(), self.mu_theta.reshape(-1, 3).copy()


def make_toy_prior(
    n_beta: int = 6,
    n_joints: int = 18,
    sigma_beta: float = 1.0,
    sigma_theta: float = 1.0,
) -> PriorDistribution:
    """Zero-mean isotropic prior sized for a toy template."""
    return PriorDistribution(
        mu_beta=np.zeros(n_beta),
        sigma_beta=sigma_beta**2 * np.eye(n_beta),
        mu_theta=np.zeros(3 * n_joints),
        sigma_theta=sigma_theta**2 * np.eye(3 * n_joints),
    )


def save_prior(prior: PriorDistribution, path) -> None:
    doc = {
        "version": PRIOR_VERSION,
        "n_beta": prior.n_beta,
        "n_joints": prior.n_joints,
        "mu_beta": prior.mu_beta.tolist(),
        "sigma_beta": prior.sigma_beta.tolist(),
        "mu_theta": prior.mu_theta.tolist(),
        "sigma_theta": prior.sigma_theta.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_prior(path) -> PriorDistribution:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"prior JSON is malformed: {e}") from e
    for name in ("mu_beta", "sigma_beta", "mu_theta", "sigma_theta"):
        if name not in doc:
            raise ParseError(f"missing field: {name}")
    try:
        prior = PriorDistribution(
            mu_beta=np.asarray(doc["mu_beta"], dtype=np.float64),
            sigma_beta=np.asarray(doc["sigma_beta"], dtype=np.float64),
            mu_theta=np.asarray(doc["mu_theta"], dtype=np.float64),
            sigma_theta=np.asarray(doc["sigma_theta"], dtype=np.float64),
        )
    except ValidationError:
        raise
    except (TypeError, ValueError) as e:
        raise ParseError(f"prior arrays are malformed: {e}") from e
    if doc.get("n_beta") not in (None, prior.n_beta):
        raise ValidationError("declared n_beta does not match mu_beta")
    if doc.get("n_joints") not in (None, prior.n_joints):
        raise ValidationError("declared n_joints does not match mu_theta")
    return prior


def loss_prior(
    beta: np.ndarray,
    theta: np.ndarray,
    prior: PriorDistribution,
    weights: LossWeights = DEFAULT_WEIGHTS,
) -> float:
    """Mahalanobis distances to the prior: 0.5 * d_beta + d_theta.

    A unit beta deviation under identity covariance scores 0.5.
    """
    db = np.asarray(beta, dtype=np.float64).reshape(-1) - prior.mu_beta
    dt = np.asarray(theta, dtype=np.float64).reshape(-1) - prior.mu_theta
    return float(weights.prior_beta * (db @ prior.solve_beta(db))
                 + dt @ prior.solve_theta(dt))


# ---------------------------------------------------------------------------
# adversarial

def loss_adv(scores: np.ndarray) -> float:
    """Generator-side least-squares objective: sum_k (D_k - 1)^2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("need at least one discriminator score")
    return float(((s - 1.0) ** 2).sum())


def reference_discriminator(
    params: Params, prior: PriorDistribution,
    weights: LossWeights = DEFAULT_WEIGHTS,
) -> np.ndarray:
    """Two-head reference discriminator: sigmoid of negative Mahalanobis.

    Scores approach 1 for parameters near the prior mean and 0 far away;
    any callable with the same (params -> scores) shape can stand in.
    """
    db = params.beta - prior.mu_beta
    dt = params.theta.reshape(-1) - prior.mu_theta
    d = np.array([
        weights.prior_beta * float(db @ prior.solve_beta(db)),
        float(dt @ prior.solve_theta(dt)),
    ])
    return 1.0 / (1.0 + np.exp(d))


Discriminator = Callable[[Params], np.ndarray]


# ---------------------------------------------------------------------------
# gradients

@dataclass
class ParamGradient:
    """Gradient over model parameters, plus camera translation when used."""

    beta: np.ndarray
    theta: np.ndarray  # (n_joints, 3)
    gamma: np.ndarray
    cam_t: np.ndarray | None = None

    @classmethod
    def zeros(cls, template: ModelTemplate, with_cam_t: bool = False) -> "ParamGradient":
        return cls(np.zeros(template.n_beta), np.zeros((template.n_joints, 3)),
                   np.zeros(3), np.zeros(3) if with_cam_t else None)

    def as_vector(self) -> np.ndarray:
        """Flat [beta | theta | gamma] layout matching the keypoint Jacobian."""
        return np.concatenate([self.beta, self.theta.ravel(), self.gamma])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_beta: int, n_joints: int,
                    cam_t: np.ndarray | None = None) -> "ParamGradient":
        nb, nt = n_beta, 3 * n_joints
        return cls(vec[:nb], vec[nb:nb + nt].reshape(-1, 3), vec[nb + nt:], cam_t)


def grad_fd(
    objective: Callable[[Params, np.ndarray | None], float],
    params: Params,
    cam_t: np.ndarray | None = None,
    h: float = 1e-5,
) -> ParamGradient:
    """Central-difference gradient of a scalar objective.

    The objective is called as objective(params, cam_t). This is the slow
    reference path; analytic gradients are checked against it.
    """
    def central(setter) -> float:
        setter(+h)
        hi = objective(p, t)
        setter(-2 * h)
        lo = objective(p, t)
        setter(+h)
        return (hi - lo) / (2 * h)

    p = params.copy()
    t = None if cam_t is None else np.asarray(cam_t, dtype=np.float64).copy()

    g_beta = np.empty_like(p.beta)
    for i in range(p.beta.size):
        g_beta[i] = central(lambda d, i=i: p.beta.__setitem__(i, p.beta[i] + d))
    g_theta = np.empty_like(p.theta)
    for j in range(p.theta.shape[0]):
        for c in range(3):
            g_theta[j, c] = central(
                lambda d, j=j, c=c: p.theta.__setitem__((j, c), p.theta[j, c] + d))
    g_gamma = np.empty(3)
    for c in range(3):
        g_gamma[c] = central(lambda d, c=c: p.gamma.__setitem__(c, p.gamma[c] + d))
    g_t = None
    if t is not None:
        g_t = np.empty(3)
        for c in range(3):
            g_t[c] = central(lambda d, c=c: t.__setitem__(c, t[c] + d))
    return ParamGradient(g_beta, g_theta, g_gamma, g_t)


def loss_2d_grad(
    template: ModelTemplate,
    params: Params,
    camera: Camera,
    gt_kp2d: np.ndarray,
    visibility: np.ndarray,
    cache: KinematicCache,
    normalize: bool = True,
) -> tuple[float | None, ParamGradient]:
    """loss_2d through the posed keypoints, with its analytic gradient.

    The gradient covers model parameters and the camera translation. When
    nothing is visible both the value (None) and a zero gradient return.
    """
    vis = np.asarray(visibility).astype(bool).reshape(-1)
    if not vis.any():
        return None, ParamGradient.zeros(template, with_cam_t=True)
    kp, jac = pose_keypoints_with_jacobian(template, params, cache)
    px, _, ok = project(kp, camera)
    if np.any(vis & ~ok):
        raise ValidationError("a visible keypoint projects behind the camera")
    scale = 1.0 / camera.image_size[0] if normalize else 1.0
    diff = px - np.asarray(gt_kp2d, dtype=np.float64)
    value = float(np.abs(diff[vis]).sum()) * scale

    d_px = np.zeros_like(diff)
    d_px[vis] = np.sign(diff[vis]) * scale
    pjac = project_jacobian(kp, camera)           # (K, 2, 3)
    g_kp = np.einsum("kc,kcd->kd", d_px, pjac)    # (K, 3)
    g_vec = np.einsum("kd,kdp->p", g_kp, jac)
    g_t = g_kp.sum(axis=0)  # d(pixel)/d(cam translation) == d(pixel)/d(point)
    return value, ParamGradient.from_vector(g_vec, template.n_beta,
                                            template.n_joints, g_t)


def loss_3d_grad(
    template: ModelTemplate,
    params: Params,
    gt_beta: np.ndarray | None,
    gt_theta: np.ndarray | None,
    gt_kp3d: np.ndarray,
    cache: KinematicCache,
    weights: LossWeights = DEFAULT_WEIGHTS,
) -> tuple[float, ParamGradient]:
    """loss_3d evaluated on the model's own keypoints, with gradient."""
    kp, jac = pose_keypoints_with_jacobian(template, params, cache)
    value = loss_3d(params.beta if gt_beta is not None else None,
                    params.theta if gt_theta is not None else None,
                    kp, gt_beta, gt_theta, gt_kp3d, weights)
    sign = np.sign(kp - np.asarray(gt_kp3d, dtype=np.float64))
    g_vec = np.einsum("kd,kdp->p", sign, jac)
    grad = ParamGradient.from_vector(g_vec, template.n_beta, template.n_joints)
    if gt_beta is not None:
        grad.beta += 2.0 * weights.kp3d_beta * (params.beta - np.asarray(gt_beta))
    if gt_theta is not None:
        grad.theta += 2.0 * weights.kp3d_theta * (params.theta - np.asarray(gt_theta))
    return value, grad


def loss_prior_grad(
    params: Params,
    prior: PriorDistribution,
    weights: LossWeights = DEFAULT_WEIGHTS,
) -> tuple[float, ParamGradient]:
    """loss_prior with its gradient (zero in gamma and camera translation)."""
    db = params.beta - prior.mu_beta
    dt = params.theta.reshape(-1) - prior.mu_theta
    sb = prior.solve_beta(db)
    st = prior.solve_theta(dt)
    value = float(weights.prior_beta * (db @ sb) + dt @ st)
    return value, ParamGradient(
        beta=2.0 * weights.prior_beta * sb,
        theta=(2.0 * st).reshape(-1, 3),
        gamma=np.zeros(3),
    )

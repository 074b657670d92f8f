"""Optimization-based model fitting to 2D (and optionally 3D) keypoints.

The default schedule runs two stages of a from-scratch Adam optimizer:

  1. global placement: root orientation, gamma, and camera translation
     against the reprojection error of a torso keypoint subset;
  2. everything: all parameters against a lambda-weighted sum of the
     reprojection term, the prior term, and (when 3D observations exist)
     the 3D term.

The whole schedule restarts from four canonical yaw initializations and
keeps the best final objective. There is no randomness anywhere, so
results are bitwise reproducible for identical inputs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .camera import MIN_DEPTH, Camera, project, project_jacobian
from .errors import ValidationError
from .jacobian import KinematicCache, pose_keypoints, pose_keypoints_with_jacobian
from .losses import (DEFAULT_WEIGHTS, LossReport, LossWeights, PriorDistribution,
                     loss_2d, loss_3d, loss_prior, loss_total)
from .model import ModelTemplate, Params, rodrigues_with_jacobian
from .pipeline import AnnotationRecord
from .toy import TORSO_KEYPOINTS

# Linear objective ramp for keypoints pushed behind the camera plane; keeps
# the objective finite with a restoring gradient instead of raising.
_BEHIND_SLOPE = 10.0
_BEHIND_BASE = 10.0


class Adam:
    """Plain Adam over a flat parameter vector."""

    def __init__(self, size: int, step: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, x: np.ndarray, grad: np.ndarray, step_scale: float = 1.0) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return x - self.step * step_scale * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class FitStage:
    """One optimization stage: which parameters move against which terms.

    The lambda weights belong to the fitting schedule, not to the published
    loss weights; the final FitResult report always uses the latter.
    """

    free: tuple[str, ...]            # of {"beta", "theta", "root", "gamma", "cam_t"}
    max_iters: int
    step: float
    torso_only: bool = False
    lambda_2d: float = 1.0
    lambda_prior: float = 0.0
    lambda_3d: float = 0.0           # applied only when 3D observations exist
    final_step_scale: float = 1.0    # linear step decay target


DEFAULT_STAGES = (
    FitStage(free=("root", "gamma", "cam_t"), max_iters=300, step=0.05,
             torso_only=True),
    FitStage(free=("beta", "theta", "gamma", "cam_t"), max_iters=1200, step=0.02,
             lambda_prior=1e-4, lambda_3d=1.0, final_step_scale=0.1),
)

# Yaw initializations (rotations about +y) tried by every fit.
DEFAULT_RESTARTS = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)


@dataclass(frozen=True)
class FitConfig:
    stages: tuple[FitStage, ...] = DEFAULT_STAGES
    restarts: tuple[float, ...] = DEFAULT_RESTARTS
    survivors: int = 3               # restarts kept past the first stage
    init_translation: tuple[float, float, float] = (0.0, 0.0, 6.0)
    torso_keypoints: tuple[int, ...] = TORSO_KEYPOINTS
    min_visible: int = 6
    conv_tol: float = 1e-7
    conv_window: int = 10
    weights: LossWeights = DEFAULT_WEIGHTS


@dataclass
class Observation:
    """Fitting input. The camera provides intrinsics only; its translation
    is re-estimated from the documented initialization."""

    kp2d: np.ndarray        # (K, 2)
    visibility: np.ndarray  # (K,)
    camera: Camera
    kp3d: np.ndarray | None = None
    beta: np.ndarray | None = None
    theta: np.ndarray | None = None

    def __post_init__(self):
        self.kp2d = np.asarray(self.kp2d, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility).astype(bool).reshape(-1)

    @classmethod
    def from_record(cls, record: AnnotationRecord, use_3d: bool = False) -> "Observation":
        return cls(
            kp2d=record.keypoints2d,
            visibility=record.visibility,
            camera=record.camera,
            kp3d=record.keypoints3d if use_3d else None,
            beta=record.beta if use_3d else None,
            theta=record.theta if use_3d else None,
        )


@dataclass
class FitResult:
    params: Params
    cam_t: np.ndarray
    report: LossReport
    objective: float            # best final-stage objective
    converged: bool
    iterations: tuple[int, ...]  # per stage, winning restart
    restart: int


@dataclass
class FitFailure:
    index: int
    error: str


def _free_mask(template: ModelTemplate, free: tuple[str, ...]) -> np.ndarray:
    nb = template.n_beta
    nt = 3 * template.n_joints
    mask = np.zeros(nb + nt + 3 + 3, dtype=bool)
    for name in free:
        if name == "beta":
            mask[:nb] = True
        elif name == "theta":
            mask[nb:nb + nt] = True
        elif name == "root":
            mask[nb:nb + 3] = True
        elif name == "gamma":
            mask[nb + nt:nb + nt + 3] = True
        elif name == "cam_t":
            mask[nb + nt + 3:] = True
        else:
            raise ValueError(f"unknown free-parameter group: {name}")
    return mask


class _Problem:
    """Objective/gradient evaluation shared by all stages of one fit."""

    def __init__(self, template: ModelTemplate, obs: Observation,
                 prior: PriorDistribution, config: FitConfig,
                 cache: KinematicCache):
        self.template = template
        self.obs = obs
        self.prior = prior
        self.config = config
        self.cache = cache
        self.nb = template.n_beta
        self.nt = 3 * template.n_joints
        torso = np.zeros_like(obs.visibility)
        ok = [i for i in config.torso_keypoints if i < len(torso)]
        torso[ok] = True
        torso &= obs.visibility
        # Documented fallback: no visible torso keypoint means stage 1 uses
        # every visible keypoint.
        self.torso_vis = torso if torso.any() else obs.visibility

    def unpack(self, x: np.ndarray) -> tuple[Params, np.ndarray]:
        nb, nt = self.nb, self.nt
        params = Params(x[:nb], x[nb:nb + nt].reshape(-1, 3), x[nb + nt:nb + nt + 3])
        return params, x[nb + nt + 3:]

    def pack(self, params: Params, cam_t: np.ndarray) -> np.ndarray:
        return np.concatenate([params.beta, params.theta.ravel(), params.gamma, cam_t])

    def _pixel_term(self, kp, cam_t, vis):
        """L1 pixel term in width units with a behind-camera ramp.

        Returns the value with gradients in keypoint space (K, 3) and
        against the camera translation; callers fold through whichever
        keypoint jacobian their stage uses.
        """
        cam = replace(self.obs.camera, translation=cam_t)
        px, d, ok = project(kp, cam)
        scale = 1.0 / cam.image_size[0]
        value = 0.0
        g_kp = np.zeros_like(kp)
        g_t = np.zeros(3)
        good = vis & ok
        if good.any():
            diff = px[good] - self.obs.kp2d[good]
            value += float(np.abs(diff).sum()) * scale
            d_px = np.sign(diff) * scale
            pjac = project_jacobian(kp[good], cam)
            g = np.einsum("kc,kcd->kd", d_px, pjac)
            g_kp[good] += g
            g_t += g.sum(axis=0)
        bad = vis & ~ok
        if bad.any():
            value += float((_BEHIND_BASE + _BEHIND_SLOPE * (MIN_DEPTH - d[bad])).sum())
            g_kp[bad, 2] -= _BEHIND_SLOPE
            g_t[2] -= _BEHIND_SLOPE * int(bad.sum())
        return value, g_kp, g_t

    def rigid_base(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Keypoints with the root rotation and gamma removed, plus the
        shaped root joint they pivot about. Valid while beta and the
        non-root pose rows stay frozen."""
        params, _ = self.unpack(x)
        p0 = params.copy()
        p0.theta[0] = 0.0
        p0.gamma[:] = 0.0
        kp_id = pose_keypoints(self.template, p0, self.cache)
        j0 = self.template.rest_joints[0] + self.cache.d_jrest[0] @ params.beta
        return kp_id, j0

    def evaluate_rigid(self, x: np.ndarray, stage: FitStage,
                       kp_id: np.ndarray, j0: np.ndarray) -> tuple[float, np.ndarray]:
        """Stage objective when only {root, gamma, cam_t} move: the root
        rotation acts as a rigid transform about the shaped root joint, so
        the full-mesh jacobian never needs to be built."""
        nb, nt = self.nb, self.nt
        root = x[nb:nb + 3]
        gamma = x[nb + nt:nb + nt + 3]
        cam_t = x[nb + nt + 3:]
        R, dR = rodrigues_with_jacobian(root)
        base = kp_id - j0
        kp = base @ R.T + j0 + gamma

        vis = self.torso_vis if stage.torso_only else self.obs.visibility
        v2, g_kp, g_t = self._pixel_term(kp, cam_t, vis)
        grad = np.zeros_like(x)
        grad[nb:nb + 3] = np.einsum("kd,cde,ke->c", g_kp, dR, base)
        grad[nb + nt:nb + nt + 3] = g_kp.sum(axis=0)
        grad[nb + nt + 3:] = g_t
        return stage.lambda_2d * v2, stage.lambda_2d * grad

    def evaluate(self, x: np.ndarray, stage: FitStage) -> tuple[float, np.ndarray]:
        params, cam_t = self.unpack(x)
        w = self.config.weights
        kp, jac = pose_keypoints_with_jacobian(self.template, params, self.cache)

        vis = self.torso_vis if stage.torso_only else self.obs.visibility
        v2, g_kp, g_t = self._pixel_term(kp, cam_t, vis)
        g_vec = np.einsum("kd,kdp->p", g_kp, jac)
        total = stage.lambda_2d * v2
        grad = stage.lambda_2d * np.concatenate([g_vec, g_t])

        if stage.lambda_prior:
            db = params.beta - self.prior.mu_beta
            dt = params.theta.ravel() - self.prior.mu_theta
            sb = self.prior.solve_beta(db)
            st = self.prior.solve_theta(dt)
            vp = float(w.prior_beta * (db @ sb) + dt @ st)
            total += stage.lambda_prior * vp
            grad[:self.nb] += stage.lambda_prior * 2.0 * w.prior_beta * sb
            grad[self.nb:self.nb + self.nt] += stage.lambda_prior * 2.0 * st

        if stage.lambda_3d and self.obs.kp3d is not None:
            sign = np.sign(kp - self.obs.kp3d)
            v3 = float(np.abs(kp - self.obs.kp3d).sum())
            g3 = np.einsum("kd,kdp->p", sign, jac)
            if self.obs.beta is not None:
                db = params.beta - self.obs.beta
                v3 += w.kp3d_beta * float(db @ db)
                g3[:self.nb] += 2.0 * w.kp3d_beta * db
            if self.obs.theta is not None:
                dt = (params.theta - self.obs.theta).ravel()
                v3 += w.kp3d_theta * float(dt @ dt)
                g3[self.nb:self.nb + self.nt] += 2.0 * w.kp3d_theta * dt
            total += stage.lambda_3d * v3
            grad[:-3] += stage.lambda_3d * g3

        return total, grad


def fit(
    template: ModelTemplate,
    observation: Observation,
    prior: PriorDistribution,
    config: FitConfig = FitConfig(),
    cache: KinematicCache | None = None,
) -> FitResult:
    """Fit parameters and camera translation to one observation.

    Deterministic: identical inputs give identical results. Requires at
    least ``config.min_visible`` visible keypoints. Each stage returns its
    best-seen iterate, so stage objectives never regress below their
    initialization.
    """
    if observation.kp2d.shape != (template.n_kp, 2):
        raise ValidationError(
            f"expected {template.n_kp} keypoints, got {observation.kp2d.shape[0]}")
    n_vis = int(observation.visibility.sum())
    if n_vis < config.min_visible:
        raise ValidationError(
            f"need at least {config.min_visible} visible keypoints, got {n_vis}")
    if cache is None:
        cache = KinematicCache.build(template)
    problem = _Problem(template, observation, prior, config, cache)

    mu_beta, mu_theta = prior.mean_params()
    if len(mu_beta) != template.n_beta or len(mu_theta) != template.n_joints:
        raise ValidationError("prior dimensions do not match the template")

    # Candidates advance stage-major so the cheap first stage can rank the
    # restarts and only the best few pay for the remaining stages.
    candidates = []
    for ri, yaw in enumerate(config.restarts):
        params = Params(mu_beta.copy(), mu_theta.copy(), np.zeros(3))
        params.theta[0] = (0.0, yaw, 0.0)
        x = problem.pack(params, np.asarray(config.init_translation, dtype=np.float64))
        candidates.append({"x": x, "obj": math.inf, "converged": False,
                           "iters": [], "restart": ri})

    for si, stage in enumerate(config.stages):
        if si == 1 and len(candidates) > config.survivors > 0:
            order = np.argsort([c["obj"] for c in candidates], kind="stable")
            candidates = [candidates[i] for i in order[:config.survivors]]
        mask = _free_mask(template, stage.free)
        # Rigid shortcut: stages that move only the global placement can
        # pivot precomputed keypoints instead of rebuilding the jacobian.
        rigid = (set(stage.free) <= {"root", "gamma", "cam_t"}
                 and stage.lambda_prior == 0.0
                 and (stage.lambda_3d == 0.0 or observation.kp3d is None))
        for cand in candidates:
            x = cand["x"]
            if rigid:
                kp_id, j0 = problem.rigid_base(x)
            adam = Adam(len(x), step=stage.step)
            x_best = x.copy()
            f_best = math.inf
            hist: list[float] = []
            converged = False
            t = 0
            for t in range(stage.max_iters + 1):
                if rigid:
                    f, g = problem.evaluate_rigid(x, stage, kp_id, j0)
                else:
                    f, g = problem.evaluate(x, stage)
                if f < f_best:
                    f_best, x_best = f, x.copy()
                hist.append(f)
                win = config.conv_window
                if len(hist) > win:
                    ref = hist[-1 - win]
                    if abs(ref - hist[-1]) < config.conv_tol * max(abs(ref), 1e-12):
                        converged = True
                        break
                if t == stage.max_iters:
                    break
                frac = t / max(stage.max_iters - 1, 1)
                scale = 1.0 + (stage.final_step_scale - 1.0) * frac
                x = adam.update(x, np.where(mask, g, 0.0), scale)
            cand["x"] = x_best
            cand["obj"] = f_best
            cand["converged"] = converged
            cand["iters"].append(t)

    win_i = int(np.argmin([c["obj"] for c in candidates]))
    chosen = candidates[win_i]
    objective, x = chosen["obj"], chosen["x"]
    converged, iterations = chosen["converged"], tuple(chosen["iters"])
    restart = chosen["restart"]
    params, cam_t = problem.unpack(x)
    params = params.copy()
    cam_t = cam_t.copy()

    cam = replace(observation.camera, translation=cam_t)
    kp = pose_keypoints(template, params, cache)
    l2d = loss_2d(kp, cam, observation.kp2d, observation.visibility)
    lprior = loss_prior(params.beta, params.theta, prior, config.weights)
    l3d = None
    if observation.kp3d is not None:
        l3d = loss_3d(
            params.beta if observation.beta is not None else None,
            params.theta if observation.theta is not None else None,
            kp, observation.beta, observation.theta, observation.kp3d,
            config.weights)
    report = loss_total(kp3d=l3d, kp2d=l2d, prior=lprior, weights=config.weights)
    return FitResult(params=params, cam_t=cam_t, report=report,
                     objective=float(objective), converged=converged,
                     iterations=iterations, restart=restart)


def batch_fit(
    template: ModelTemplate,
    observations: list[Observation],
    prior: PriorDistribution,
    config: FitConfig = FitConfig(),
    threads: int = 1,
) -> list[FitResult | FitFailure]:
    """Fit a batch independently; failures become per-item entries.

    Order follows the input. A batch of N equals N single fits bitwise
    (items share nothing but the read-only template cache).
    """
    cache = KinematicCache.build(template)

    def run(i_obs):
        i, obs = i_obs
        try:
            return fit(template, obs, prior, config, cache)
        except Exception as e:  # noqa: BLE001  (reported per item)
            return FitFailure(index=i, error=f"{type(e).__name__}: {e}")

    items = list(enumerate(observations))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, items))
    return [run(it) for it in items]

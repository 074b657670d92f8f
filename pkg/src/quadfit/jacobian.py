"""Forward-mode derivatives of regressed keypoints w.r.t. model parameters.

Tangents are propagated down the joint tree alongside the world transforms:
for joint j with parent p and local transform L_j,

    G_j = G_p L_j
    dG_j = dG_p L_j + G_p dL_j

where dL_j is nonzero only for joint j's own axis-angle coordinates (via the
closed-form Rodrigues derivative) and for shape coordinates (via the rest
joint offsets). Keypoints are folded through the regressor ahead of time:
with m_kj = sum_i KR_ki w_ij [v_i; 1], a keypoint is k = sum_j S_j m_kj, so
per-call cost scales with joints and keypoints instead of vertices.

Parameter layout is the flat vector [beta | theta row-major | gamma].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelTemplate, Params, rodrigues_many, skinning_transforms


@dataclass
class KinematicCache:
    """Template-constant contractions reused across gradient evaluations."""

    d_jrest: np.ndarray   # (J, 3, n_beta)  d(rest joints)/d(beta)
    c_rest: np.ndarray    # (K, J, 4)  regressor-folded homogeneous rest vertices
    c_basis: np.ndarray   # (K, J, 3, n_beta)  same fold of the shape basis

    @classmethod
    def build(cls, template: ModelTemplate) -> "KinematicCache":
        basis = template.shape_basis
        kr = template.keypoint_regressor
        w = template.skin_weights
        hom = np.concatenate(
            [template.rest_vertices, np.ones((template.v_count, 1))], axis=1)
        return cls(
            d_jrest=np.einsum("jv,vcb->jcb", template.joint_regressor, basis),
            c_rest=np.einsum("kv,vj,vc->kjc", kr, w, hom, optimize=True),
            c_basis=np.einsum("kv,vj,vcb->kjcb", kr, w, basis, optimize=True),
        )


def param_size(template: ModelTemplate) -> int:
    return template.n_beta + 3 * template.n_joints + 3


def _shaped_rest_joints(template: ModelTemplate, cache: KinematicCache,
                        beta: np.ndarray) -> np.ndarray:
    return template.rest_joints + cache.d_jrest @ beta


def _keypoint_folds(cache: KinematicCache, beta: np.ndarray) -> np.ndarray:
    m = cache.c_rest.copy()
    m[:, :, :3] += cache.c_basis @ beta
    return m  # (K, J, 4)


def pose_keypoints(template: ModelTemplate, params: Params,
                   cache: KinematicCache) -> np.ndarray:
    """Keypoints3d only, matching pose_mesh but skipping the full mesh."""
    j_rest = _shaped_rest_joints(template, cache, params.beta)
    skin = skinning_transforms(j_rest, template.parent, params.theta)
    m = _keypoint_folds(cache, params.beta)
    return np.tensordot(m, skin[:, :3, :4], axes=([1, 2], [0, 2])) + params.gamma


def pose_keypoints_with_jacobian(
    template: ModelTemplate, params: Params, cache: KinematicCache
) -> tuple[np.ndarray, np.ndarray]:
    """Keypoints3d and their full parameter Jacobian.

    Returns ``(kp, jac)`` with ``kp`` of shape (K, 3) and ``jac`` of shape
    (K, 3, P) over the flat [beta | theta | gamma] layout.
    """
    nb = template.n_beta
    nj = template.n_joints
    parent = template.parent
    p4 = nb + 3 * nj  # tangent slots propagated through the tree

    j_rest = _shaped_rest_joints(template, cache, params.beta)
    rots, d_rots = rodrigues_many(params.theta)

    world = np.empty((nj, 4, 4))
    d_world = np.zeros((nj, p4, 4, 4))
    for j in range(nj):
        t = j_rest[j] - (j_rest[parent[j]] if j else 0.0)
        local = np.eye(4)
        local[:3, :3] = rots[j]
        local[:3, 3] = t
        s = nb + 3 * j
        if j == 0:
            world[0] = local
            d_world[0, s:s + 3, :3, :3] = d_rots[0]
            d_world[0, :nb, :3, 3] = cache.d_jrest[0].T
        else:
            p = parent[j]
            gp = world[p]
            world[j] = gp @ local
            d_world[j] = d_world[p] @ local
            d_world[j, s:s + 3, :3, :3] += gp[:3, :3] @ d_rots[j]
            dt = cache.d_jrest[j] - cache.d_jrest[p]  # (3, nb)
            d_world[j, :nb, :3, 3] += (gp[:3, :3] @ dt).T

    # Fold in T(-j_rest) so transforms act on rest-space points.
    skin = world.copy()
    skin[:, :3, 3] -= (world[:, :3, :3] @ j_rest[:, :, None])[:, :, 0]
    d_skin = d_world
    d_skin[:, :, :3, 3] -= (d_world[:, :, :3, :3] @ j_rest[:, None, :, None])[..., 0]
    d_skin[:, :nb, :3, 3] -= np.swapaxes(world[:, :3, :3] @ cache.d_jrest, 1, 2)

    m = _keypoint_folds(cache, params.beta)
    kp = np.tensordot(m, skin[:, :3, :4], axes=([1, 2], [0, 2])) + params.gamma

    jac = np.empty((template.n_kp, 3, p4 + 3))
    jac[:, :, :p4] = np.swapaxes(
        np.tensordot(m, d_skin[:, :, :3, :4], axes=([1, 2], [0, 3])), 1, 2)
    jac[:, :, :nb] += np.swapaxes(
        np.tensordot(cache.c_basis, skin[:, :3, :3], axes=([1, 2], [0, 2])), 1, 2)
    jac[:, :, p4:] = np.eye(3)
    return kp, jac

"""Parametric quadruped body model.

A template bundles a rest-pose surface mesh with linear shape blendshapes,
per-vertex skinning weights over a joint tree, and regressors that read
joint and keypoint locations off the surface. Posing is classic linear
blend skinning: shape first, then forward kinematics over the parent
tree, then a global translation.

Conventions: +x forward (nose), +y down (gravity), +z left; units are
meters. The root rotation pivots about joint 0, so a root-only pose maps
vertex v to R (v - j0) + j0 + gamma.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

TEMPLATE_VERSION = 1

# Families covered by the shipped pose/shape data.
DEFAULT_FAMILY_NAMES = ("felidae", "canidae", "equidae", "bovidae", "hippopotamidae")

# Below this rotation angle the Taylor forms of the Rodrigues coefficients
# are used; second-order expansions keep the switch error near 1e-16.
_SMALL_ANGLE = 1e-8
_SMALL_ANGLE_JAC = 1e-4


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rodrigues(r: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector to rotation matrix.

    The direction of ``r`` is the rotation axis and its norm the angle in
    radians. Falls back to the second-order Taylor expansion below 1e-8 so
    the zero vector maps exactly to the identity.
    """
    r = np.asarray(r, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(r)):
        raise ValidationError("axis-angle input must be finite")
    a = np.linalg.norm(r)
    u = _skew(r)
    if a < _SMALL_ANGLE:
        return np.eye(3) + u + 0.5 * (u @ u)
    k = u / a
    return np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k)


def rodrigues_with_jacobian(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its derivative w.r.t. the axis-angle vector.

    Returns ``(R, dR)`` with ``dR[c] = dR/dr_c``, shape (3, 3, 3). Writing
    R = I + f1(a) U + f2(a) U^2 with U = skew(r) and a = |r| gives

        dR/dr_c = (g1 U + g2 U^2) r_c + f1 E_c + f2 (E_c U + U E_c)

    where E_c = skew(e_c), g1 = f1'(a)/a, g2 = f2'(a)/a. Near a = 0 the
    coefficients use their series so the derivative stays exact at zero.
    """
    r = np.asarray(r, dtype=np.float64).reshape(3)
    a = np.linalg.norm(r)
    u = _skew(r)
    uu = u @ u
    if a < _SMALL_ANGLE_JAC:
        a2 = a * a
        f1 = 1.0 - a2 / 6.0
        f2 = 0.5 - a2 / 24.0
        g1 = -1.0 / 3.0 + a2 / 30.0
        g2 = -1.0 / 12.0 + a2 / 180.0
    else:
        sa, ca = np.sin(a), np.cos(a)
        f1 = sa / a
        f2 = (1.0 - ca) / (a * a)
        g1 = (a * ca - sa) / a**3
        g2 = (a * sa - 2.0 * (1.0 - ca)) / a**4
    rot = np.eye(3) + f1 * u + f2 * uu
    base = g1 * u + g2 * uu
    jac = np.empty((3, 3, 3))
    eye = np.eye(3)
    for c in range(3):
        ec = _skew(eye[c])
        jac[c] = base * r[c] + f1 * ec + f2 * (ec @ u + u @ ec)
    return rot, jac


# Basis skews E_c = skew(e_c), stacked for the batched jacobian.
_E_SKEW = np.array([_skew(np.eye(3)[c]) for c in range(3)])


def rodrigues_many(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched rodrigues_with_jacobian over rows of an (N, 3) array.

    Identical branch behavior per row; returns (N, 3, 3) rotations and
    (N, 3, 3, 3) jacobians with the per-component axis first.
    """
    r = np.asarray(r, dtype=np.float64).reshape(-1, 3)
    n = len(r)
    a = np.linalg.norm(r, axis=1)
    u = np.zeros((n, 3, 3))
    u[:, 0, 1] = -r[:, 2]
    u[:, 0, 2] = r[:, 1]
    u[:, 1, 0] = r[:, 2]
    u[:, 1, 2] = -r[:, 0]
    u[:, 2, 0] = -r[:, 1]
    u[:, 2, 1] = r[:, 0]
    uu = u @ u

    a2 = a * a
    small = a < _SMALL_ANGLE_JAC
    # np.where keeps both branches finite; guard the divisions.
    sa, ca = np.sin(a), np.cos(a)
    a_safe = np.where(small, 1.0, a)
    f1 = np.where(small, 1.0 - a2 / 6.0, sa / a_safe)
    f2 = np.where(small, 0.5 - a2 / 24.0, (1.0 - ca) / (a_safe * a_safe))
    g1 = np.where(small, -1.0 / 3.0 + a2 / 30.0, (a * ca - sa) / a_safe**3)
    g2 = np.where(small, -1.0 / 12.0 + a2 / 180.0,
                  (a * sa - 2.0 * (1.0 - ca)) / a_safe**4)

    rot = np.eye(3) + f1[:, None, None] * u + f2[:, None, None] * uu
    base = g1[:, None, None] * u + g2[:, None, None] * uu
    eu_ue = _E_SKEW[None] @ u[:, None] + u[:, None] @ _E_SKEW[None]
    jac = (base[:, None] * r[:, :, None, None]
           + f1[:, None, None, None] * _E_SKEW[None]
           + f2[:, None, None, None] * eu_ue)
    return rot, jac


@dataclass
class ModelTemplate:
    """Rest mesh, blendshapes, skinning weights, regressors, joint tree."""

    n_beta: int
    n_joints: int
    n_kp: int
    rest_vertices: np.ndarray    # (V, 3)
    faces: np.ndarray            # (F, 3) int
    shape_basis: np.ndarray      # (V, 3, n_beta)
    skin_weights: np.ndarray     # (V, n_joints), rows sum to 1
    joint_regressor: np.ndarray  # (n_joints, V), rows sum to 1
    keypoint_regressor: np.ndarray  # (n_kp, V), rows sum to 1
    parent: np.ndarray           # (n_joints,) int, parent[0] == -1
    family_names: tuple[str, ...] = DEFAULT_FAMILY_NAMES
    version: int = TEMPLATE_VERSION
    rest_joints: np.ndarray | None = None  # (n_joints, 3), derived if omitted
    pose_corrective_basis: np.ndarray | None = None  # reserved, unused

    def __post_init__(self):
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.keypoint_regressor = np.asarray(self.keypoint_regressor, dtype=np.float64)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.family_names = tuple(self.family_names)
        if self.rest_joints is not None:
            self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        elif (self.joint_regressor.ndim == 2 and self.rest_vertices.ndim == 2
              and self.joint_regressor.shape[1] == self.rest_vertices.shape[0]):
            self.rest_joints = self.joint_regressor @ self.rest_vertices
        # else: left None; validate() reports the shape mismatch

    @property
    def v_count(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def f_count(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> None:
        """Raise ValidationError on any violated structural invariant."""
        v = self.v_count
        j = self.n_joints
        if self.rest_vertices.shape != (v, 3):
            raise ValidationError("rest_vertices must be (V, 3)")
        if v < j:
            raise ValidationError(f"vertex count {v} below joint count {j}")
        if self.shape_basis.shape != (v, 3, self.n_beta):
            raise ValidationError(
                f"shape_basis shape {self.shape_basis.shape} != {(v, 3, self.n_beta)}")
        if self.skin_weights.shape != (v, j):
            raise ValidationError(
                f"skin_weights shape {self.skin_weights.shape} != {(v, j)}")
        if self.joint_regressor.shape != (j, v):
            raise ValidationError(
                f"joint_regressor shape {self.joint_regressor.shape} != {(j, v)}")
        if self.keypoint_regressor.shape != (self.n_kp, v):
            raise ValidationError(
                f"keypoint_regressor shape {self.keypoint_regressor.shape} != {(self.n_kp, v)}")
        if self.parent.shape != (j,):
            raise ValidationError("parent must have one entry per joint")
        if np.any(self.skin_weights < -1e-12):
            raise ValidationError("skin weights must be non-negative")
        if np.max(np.abs(self.skin_weights.sum(axis=1) - 1.0)) > 1e-9:
            raise ValidationError("skin weight rows must sum to 1")
        if np.max(np.abs(self.joint_regressor.sum(axis=1) - 1.0)) > 1e-9:
            raise ValidationError("joint regressor rows must sum to 1")
        if np.max(np.abs(self.keypoint_regressor.sum(axis=1) - 1.0)) > 1e-9:
            raise ValidationError("keypoint regressor rows must sum to 1")
        if self.parent[0] != -1:
            raise ValidationError("joint 0 must be the root (parent -1)")
        for jj in range(1, j):
            p = self.parent[jj]
            if not (0 <= p < jj):
                raise ValidationError(
                    f"parent[{jj}] = {p} breaks topological order (must be < {jj})")
        if self.f_count and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValidationError("face indices out of vertex range")

    def validate_params(self, params: "Params") -> None:
        if params.beta.shape != (self.n_beta,):
            raise ValidationError(f"beta must be ({self.n_beta},), got {params.beta.shape}")
        if params.theta.shape != (self.n_joints, 3):
            raise ValidationError(
                f"theta must be ({self.n_joints}, 3), got {params.theta.shape}")
        if params.gamma.shape != (3,):
            raise ValidationError("gamma must be a 3-vector")
        if not (np.all(np.isfinite(params.beta)) and np.all(np.isfinite(params.theta))
                and np.all(np.isfinite(params.gamma))):
            raise ValidationError("params must be finite")


@dataclass
class Params:
    """Pose/shape state: shape coefficients, per-joint axis-angles, translation.

    ``theta`` row 0 is the global (root) orientation.
    """

    beta: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(3)

    @classmethod
    def zeros(cls, template: ModelTemplate) -> "Params":
        return cls(np.zeros(template.n_beta), np.zeros((template.n_joints, 3)))

    def copy(self) -> "Params":
        return Params(self.beta.copy(), self.theta.copy(), self.gamma.copy())


@dataclass
class PosedMesh:
    vertices: np.ndarray     # (V, 3)
    joints: np.ndarray       # (n_joints, 3), regressed from posed vertices
    keypoints3d: np.ndarray  # (n_kp, 3), regressed from posed vertices


def shaped_vertices(template: ModelTemplate, beta: np.ndarray) -> np.ndarray:
    return template.rest_vertices + template.shape_basis @ np.asarray(beta, dtype=np.float64)


def skinning_transforms(
    rest_joints: np.ndarray, parent: np.ndarray, theta: np.ndarray
) -> np.ndarray:
    """Per-joint 4x4 world transforms applied to rest-space points.

    Joint j's local transform is a rotation about its rest location composed
    onto the parent chain; the root's pivot is joint 0.
    """
    n = len(parent)
    rot = np.empty((n, 3, 3))
    trans = np.empty((n, 3))
    for j in range(n):
        local = rodrigues(theta[j])
        if j == 0:
            rot[0] = local
            trans[0] = rest_joints[0] - local @ rest_joints[0]
        else:
            p = parent[j]
            rot[j] = rot[p] @ local
            # Equivalent to world_t[j] - R_world[j] @ j_rest[j] but phrased so the
            # chain cancels bitwise at the identity pose instead of telescoping.
            trans[j] = trans[p] + (rot[p] - rot[j]) @ rest_joints[j]
    skin = np.zeros((n, 4, 4))
    skin[:, :3, :3] = rot
    skin[:, :3, 3] = trans
    skin[:, 3, 3] = 1.0
    return skin


def pose_mesh(template: ModelTemplate, params: Params) -> PosedMesh:
    """Apply shape, pose, and translation; regress joints and keypoints.

    Identity check: zero parameters return the rest vertices. A root-only
    rotation R with translation t maps vertices to R (v - j0) + j0 + t.
    """
    template.validate_params(params)
    v_shaped = shaped_vertices(template, params.beta)
    j_rest = template.joint_regressor @ v_shaped
    skin = skinning_transforms(j_rest, template.parent, params.theta)
    per_vertex = np.tensordot(template.skin_weights, skin, axes=(1, 0))  # (V, 4, 4)
    posed = np.einsum("vab,vb->va", per_vertex[:, :3, :3], v_shaped) + per_vertex[:, :3, 3]
    posed += params.gamma
    return PosedMesh(
        vertices=posed,
        joints=template.joint_regressor @ posed,
        keypoints3d=template.keypoint_regressor @ posed,
    )


# ---------------------------------------------------------------------------
# serialization

_ARRAY_FIELDS = {
    "rest_vertices": np.float64,
    "faces": np.int64,
    "shape_basis": np.float64,
    "skin_weights": np.float64,
    "joint_regressor": np.float64,
    "keypoint_regressor": np.float64,
    "parent": np.int64,
}

_INT_FIELDS = ("n_beta", "n_joints", "v_count", "f_count", "n_kp")


def save_template(template: ModelTemplate, path) -> None:
    """Write a template as a single JSON document (arrays row-major)."""
    doc = {
        "version": template.version,
        "n_beta": template.n_beta,
        "n_joints": template.n_joints,
        "v_count": template.v_count,
        "f_count": template.f_count,
        "n_kp": template.n_kp,
        "rest_vertices": template.rest_vertices.tolist(),
        "faces": template.faces.tolist(),
        "shape_basis": template.shape_basis.tolist(),
        "skin_weights": template.skin_weights.tolist(),
        "joint_regressor": template.joint_regressor.tolist(),
        "keypoint_regressor": template.keypoint_regressor.tolist(),
        "parent": template.parent.tolist(),
        "family_names": list(template.family_names),
        "pose_corrective_basis": (
            None if template.pose_corrective_basis is None
            else np.asarray(template.pose_corrective_basis).tolist()),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_template(path) -> ModelTemplate:
    """Load and validate a template JSON file.

    Truncated or ill-typed files raise ParseError naming the offending
    field; structurally consistent but invariant-breaking content raises
    ValidationError.
    """
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"template JSON is malformed: {e}") from e
    if not isinstance(doc, dict):
        raise ParseError("template document must be a JSON object")

    for name in _INT_FIELDS + ("version",):
        if name not in doc:
            raise ParseError(f"missing field: {name}")
        if not isinstance(doc[name], int):
            raise ParseError(f"field {name} must be an integer")
    arrays = {}
    for name, dtype in _ARRAY_FIELDS.items():
        if name not in doc:
            raise ParseError(f"missing field: {name}")
        try:
            arrays[name] = np.asarray(doc[name], dtype=dtype)
        except (TypeError, ValueError) as e:
            raise ParseError(f"field {name} is not a numeric array: {e}") from e
    fams = doc.get("family_names")
    if not isinstance(fams, list) or not all(isinstance(s, str) for s in fams):
        raise ParseError("field family_names must be a list of strings")

    pcb = doc.get("pose_corrective_basis")
    try:
        template = ModelTemplate(
            n_beta=doc["n_beta"],
            n_joints=doc["n_joints"],
            n_kp=doc["n_kp"],
            family_names=tuple(fams),
            version=doc["version"],
            pose_corrective_basis=None if pcb is None else np.asarray(pcb, dtype=np.float64),
            **arrays,
        )
    except ValidationError:
        raise
    except (TypeError, ValueError) as e:
        raise ParseError(f"template arrays are malformed: {e}") from e
    if template.v_count != doc["v_count"]:
        raise ValidationError(
            f"declared v_count {doc['v_count']} != rest_vertices rows {template.v_count}")
    if template.f_count != doc["f_count"]:
        raise ValidationError(
            f"declared f_count {doc['f_count']} != faces rows {template.f_count}")
    template.validate()
    return template


def export_obj(vertices: np.ndarray, faces: np.ndarray, path) -> None:
    """Write a minimal Wavefront OBJ (v/f records only, 1-based indices)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")

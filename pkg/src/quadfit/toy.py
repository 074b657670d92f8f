"""Deterministic toy quadruped assets for tests, demos, and the CLI.

The toy skeleton is an 18-joint quadruped (spine, neck, head, two tail
joints, four 3-joint legs) with tube geometry: every bone carries rings of
4 vertices at fixed fractions along its axis, capped at the ends. Joint
regressor rows average the ring centered on the joint, so regressed rest
joints reproduce the designed skeleton exactly. Keypoint rows are one-hot
vertex picks at named anatomical spots, which keeps keypoints exactly on
the surface.

Joint counts other than 18 are supported: extra joints extend the tail,
head, and paw chains round-robin; fewer than 18 joints degrade to a plain
chain. Everything is a pure function of the arguments and the seed.
"""

from __future__ import annotations

import numpy as np

from .model import DEFAULT_FAMILY_NAMES, ModelTemplate

_CORE = [
    # name, parent index, rest position (x fwd, y down, z left)
    ("root", -1, (0.00, 0.00, 0.00)),
    ("withers", 0, (0.35, -0.05, 0.00)),
    ("neck", 1, (0.55, -0.15, 0.00)),
    ("head", 2, (0.75, -0.25, 0.00)),
    ("tail_root", 0, (-0.45, -0.05, 0.00)),
    ("tail_tip", 4, (-0.75, 0.05, 0.00)),
    ("fl_upper", 1, (0.35, 0.12, 0.14)),
    ("fl_lower", 6, (0.35, 0.35, 0.14)),
    ("fl_paw", 7, (0.35, 0.55, 0.14)),
    ("fr_upper", 1, (0.35, 0.12, -0.14)),
    ("fr_lower", 9, (0.35, 0.35, -0.14)),
    ("fr_paw", 10, (0.35, 0.55, -0.14)),
    ("hl_upper", 0, (-0.35, 0.12, 0.14)),
    ("hl_lower", 12, (-0.35, 0.35, 0.14)),
    ("hl_paw", 13, (-0.35, 0.55, 0.14)),
    ("hr_upper", 0, (-0.35, 0.12, -0.14)),
    ("hr_lower", 15, (-0.35, 0.35, -0.14)),
    ("hr_paw", 16, (-0.35, 0.55, -0.14)),
]

# Chains that grow when n_joints > 18, in extension order.
_EXTENSION_TIPS = ("tail_tip", "head", "fl_paw", "fr_paw", "hl_paw", "hr_paw")

_BONE_RADIUS = {
    "withers": 0.16, "neck": 0.09, "head": 0.08,
    "tail_root": 0.14, "tail_tip": 0.05,
    "fl_upper": 0.055, "fl_lower": 0.05, "fl_paw": 0.05,
    "fr_upper": 0.055, "fr_lower": 0.05, "fr_paw": 0.05,
    "hl_upper": 0.055, "hl_lower": 0.05, "hl_paw": 0.05,
    "hr_upper": 0.055, "hr_lower": 0.05, "hr_paw": 0.05,
}

KEYPOINT_NAMES = (
    "nose", "tail_root", "tail_tip",
    "fl_paw", "fr_paw", "hl_paw", "hr_paw",
    "fl_knee", "fr_knee", "hl_knee", "hr_knee",
    "fl_shoulder", "fr_shoulder", "hl_hip", "hr_hip",
    "ear_left", "ear_right", "withers",
    "chest", "belly", "spine_mid", "tail_mid",
    "neck_mid", "chin", "flank_left", "flank_right",
)

# Keypoint indices used as default head/tail anchors by metric normalizers.
HEAD_KEYPOINT = 0   # nose
TAIL_KEYPOINT = 2   # tail_tip

# Default stage-1 fitting anchors: shoulders, hips, withers.
TORSO_KEYPOINTS = (11, 12, 13, 14, 17)

_PICKS = (
    # keypoint name, bone child name, ring fraction, direction
    ("nose", "head", 1.0, "front"),
    ("tail_root", "tail_root", 1.0, "top"),
    ("tail_tip", "tail_tip", 1.0, "back"),
    ("fl_paw", "fl_paw", 1.0, "bottom"),
    ("fr_paw", "fr_paw", 1.0, "bottom"),
    ("hl_paw", "hl_paw", 1.0, "bottom"),
    ("hr_paw", "hr_paw", 1.0, "bottom"),
    ("fl_knee", "fl_lower", 1.0, "front"),
    ("fr_knee", "fr_lower", 1.0, "front"),
    ("hl_knee", "hl_lower", 1.0, "front"),
    ("hr_knee", "hr_lower", 1.0, "front"),
    ("fl_shoulder", "fl_upper", 1.0, "left"),
    ("fr_shoulder", "fr_upper", 1.0, "right"),
    ("hl_hip", "hl_upper", 1.0, "left"),
    ("hr_hip", "hr_upper", 1.0, "right"),
    ("ear_left", "head", 1.0, "left"),
    ("ear_right", "head", 1.0, "right"),
    ("withers", "withers", 1.0, "top"),
    ("chest", "withers", 0.5, "bottom"),
    ("belly", "tail_root", 0.5, "bottom"),
    ("spine_mid", "withers", 0.0, "top"),
    ("tail_mid", "tail_tip", 0.5, "top"),
    ("neck_mid", "neck", 1.0, "top"),
    ("chin", "head", 1.0, "bottom"),
    ("flank_left", "withers", 0.0, "left"),
    ("flank_right", "withers", 0.0, "right"),
)

_DIRECTION_PICKERS = {
    "top": lambda p: np.argmin(p[:, 1]),
    "bottom": lambda p: np.argmax(p[:, 1]),
    "front": lambda p: np.argmax(p[:, 0]),
    "back": lambda p: np.argmin(p[:, 0]),
    "left": lambda p: np.argmax(p[:, 2]),
    "right": lambda p: np.argmin(p[:, 2]),
}


def _skeleton(n_joints: int):
    """Names, parents, and rest positions for a given joint count."""
    if n_joints < 2:
        raise ValueError("toy skeleton needs at least 2 joints")
    if n_joints < len(_CORE):
        names = [f"chain{i}" for i in range(n_joints)]
        names[0] = "root"
        parents = [-1] + list(range(n_joints - 1))
        pos = np.array([(0.12 * i, 0.0, 0.0) for i in range(n_joints)])
        return names, np.array(parents), pos

    names = [c[0] for c in _CORE]
    parents = [c[1] for c in _CORE]
    pos = [np.array(c[2]) for c in _CORE]
    tips = {t: names.index(t) for t in _EXTENSION_TIPS}
    k = 0
    while len(names) < n_joints:
        chain = _EXTENSION_TIPS[k % len(_EXTENSION_TIPS)]
        end = tips[chain]
        direction = pos[end] - pos[parents[end]]
        names.append(f"{chain}_ext{k}")
        parents.append(end)
        pos.append(pos[end] + 0.6 * direction)
        tips[chain] = len(names) - 1
        k += 1
    return names, np.array(parents), np.array(pos)


def _ring_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axis = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u1 = np.cross(axis, ref)
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(axis, u1)
    return u1, u2


def _optional_fractions():
    """0.5 first, then ever-finer odd dyadic fractions: 0.25, 0.75, 0.125, ..."""
    yield 0.5
    denom = 4
    while True:
        for num in range(1, denom, 2):
            yield num / denom
        denom *= 2


def make_toy_template(
    n_joints: int = 18,
    n_beta: int = 6,
    v_count: int | None = None,
    n_kp: int = 26,
    seed: int = 0,
) -> ModelTemplate:
    """Build a valid toy quadruped template.

    ``v_count`` defaults to the natural tube vertex count (140 for the
    18-joint skeleton); values below 4 * n_joints are rejected. The first
    three shape directions are global scale, elongation, and widening;
    remaining ones are seeded smooth random displacement fields.
    """
    names, parents, jpos = _skeleton(n_joints)
    n_bones = n_joints - 1
    bones = [(parents[j], j) for j in range(1, n_joints)]

    # Ring schedule: one anchor ring per bone at t = 1 plus the root ring at
    # t = 0 on bone 0 (the joint regressor depends on these), then optional
    # rings by round-robin until the vertex budget is met.
    must = [(0, 0.0)] + [(b, 1.0) for b in range(n_bones)]
    if v_count is None:
        rings = must + [(b, 0.5) for b in range(n_bones)]
        n_tip = 0
    else:
        n_rings = v_count // 4
        n_tip = v_count - 4 * n_rings
        if n_rings < len(must):
            raise ValueError(
                f"v_count {v_count} below minimum {4 * len(must)} for {n_joints} joints")
        rings = list(must)
        frac = _optional_fractions()
        while len(rings) < n_rings:
            t = next(frac)
            for b in range(n_bones):
                if len(rings) >= n_rings:
                    break
                rings.append((b, t))

    verts = []
    weights = []
    ring_ids: dict[tuple[int, float], list[int]] = {}
    for b, t in rings:
        p, c = bones[b]
        center = jpos[p] + t * (jpos[c] - jpos[p])
        u1, u2 = _ring_frame(jpos[c] - jpos[p])
        r = _BONE_RADIUS.get(names[c], 0.05)
        ids = []
        for d in (u1, u2, -u1, -u2):
            ids.append(len(verts))
            verts.append(center + r * d)
            w = np.zeros(n_joints)
            w[c] = 0.5 * t
            w[p] = 1.0 - 0.5 * t
            weights.append(w)
        ring_ids[(b, t)] = ids

    # Leftover budget (v_count % 4) becomes isolated tip vertices, one-hot
    # skinned and excluded from faces.
    tip_spots = [
        (names.index("head") if "head" in names else n_joints - 1, (0.08, -0.02, 0.0)),
        (names.index("tail_tip") if "tail_tip" in names else n_joints - 1, (-0.06, 0.02, 0.0)),
        (0, (0.0, 0.18, 0.0)),
    ]
    for j, off in tip_spots[:n_tip]:
        verts.append(jpos[j] + np.array(off))
        w = np.zeros(n_joints)
        w[j] = 1.0
        weights.append(w)

    verts = np.array(verts)
    weights = np.array(weights)
    nv = len(verts)

    faces = []
    bone_ts: dict[int, list[float]] = {}
    for b, t in rings:
        bone_ts.setdefault(b, []).append(t)
    for b, ts in bone_ts.items():
        ts = sorted(ts)
        for ta, tb in zip(ts[:-1], ts[1:]):
            a, bb = ring_ids[(b, ta)], ring_ids[(b, tb)]
            for k in range(4):
                k2 = (k + 1) % 4
                faces.append((a[k], a[k2], bb[k]))
                faces.append((a[k2], bb[k2], bb[k]))
        for ring in (ring_ids[(b, ts[0])], ring_ids[(b, ts[-1])]):
            faces.append((ring[0], ring[1], ring[2]))
            faces.append((ring[0], ring[2], ring[3]))
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)

    joint_regressor = np.zeros((n_joints, nv))
    joint_regressor[0, ring_ids[(0, 0.0)]] = 0.25
    for b, (p, c) in enumerate(bones):
        joint_regressor[c, ring_ids[(b, 1.0)]] = 0.25

    bone_by_child = {names[c]: b for b, (p, c) in enumerate(bones)}

    def pick(child_name: str, t: float, direction: str) -> int:
        b = bone_by_child.get(child_name, 0)
        ids = ring_ids.get((b, t)) or ring_ids[(b, 1.0)]
        local = _DIRECTION_PICKERS[direction](verts[ids])
        return ids[int(local)]

    chosen = []
    if n_joints >= len(_CORE):
        for _, child, t, direction in _PICKS:
            chosen.append(pick(child, t, direction))
    else:
        for b in range(n_bones):
            chosen.extend(ring_ids[(b, 1.0)])
    base_picks = list(chosen)
    while len(chosen) < n_kp:  # cycle when asked for more picks than spots
        chosen.append(base_picks[len(chosen) % len(base_picks)])
    keypoint_regressor = np.zeros((n_kp, nv))
    for k, vid in enumerate(chosen[:n_kp]):
        keypoint_regressor[k, vid] = 1.0

    rng = np.random.default_rng(seed)
    basis = np.zeros((nv, 3, n_beta))
    analytic = [
        0.06 * (verts - jpos[0]),
        np.stack([0.05 * verts[:, 0], np.zeros(nv), np.zeros(nv)], axis=1),
        np.stack([np.zeros(nv), np.zeros(nv), 0.08 * verts[:, 2]], axis=1),
    ]
    for b in range(n_beta):
        if b < len(analytic):
            basis[:, :, b] = analytic[b]
        else:
            g = rng.normal(0.0, 0.02, size=(n_joints, 3))
            basis[:, :, b] = weights @ g

    template = ModelTemplate(
        n_beta=n_beta,
        n_joints=n_joints,
        n_kp=n_kp,
        rest_vertices=verts,
        faces=faces,
        shape_basis=basis,
        skin_weights=weights,
        joint_regressor=joint_regressor,
        keypoint_regressor=keypoint_regressor,
        parent=parents,
        family_names=DEFAULT_FAMILY_NAMES,
    )
    template.validate()
    return template


def make_toy_pose_library(n_joints: int = 18, n_poses: int = 8, seed: int = 0) -> np.ndarray:
    """Gait-flavored pose rows, shape (n_poses, n_joints, 3). Root rows are zero."""
    names, _, _ = _skeleton(n_joints)
    idx = {n: i for i, n in enumerate(names)}
    rng = np.random.default_rng(seed)
    poses = np.zeros((n_poses, n_joints, 3))
    leg_phase = {"fl": 0.0, "fr": np.pi, "hl": np.pi / 2, "hr": 3 * np.pi / 2}
    for p in range(n_poses):
        phase = 2.0 * np.pi * p / max(n_poses, 1)
        th = poses[p]
        if n_joints >= len(_CORE):
            for leg, off in leg_phase.items():
                th[idx[f"{leg}_upper"], 2] = 0.35 * np.sin(phase + off)
                th[idx[f"{leg}_lower"], 2] = 0.15 + 0.25 * np.sin(phase + off + 0.5)
                th[idx[f"{leg}_paw"], 2] = 0.10 * np.sin(phase + off + 1.0)
            th[idx["neck"], 2] = 0.10 * np.sin(phase)
            th[idx["head"], 2] = 0.08 * np.sin(phase + 1.0)
            th[idx["tail_root"], 1] = 0.25 * np.sin(phase)
            th[idx["tail_tip"], 1] = 0.30 * np.sin(phase + 0.7)
            th[idx["withers"], 2] = 0.05 * np.sin(phase)
        th[1:] += rng.normal(0.0, 0.05, size=(n_joints - 1, 3))
        th[0] = 0.0
    return poses

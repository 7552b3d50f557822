"""Miniature linear body model: blendshape morphing, kinematics, skinning.

The generated humanoid is a stand-in for a licensed full-resolution body
asset: same math (template + shape/pose blendshapes, regressed joints,
kinematic chain of twist exponentials, linear blend skinning), small enough
to run desk-scale experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, rodrigues, rodrigues_with_jacobian
from .tsdf import TriMesh


class InvalidWeightsError(ValueError):
    """Skinning weights do not form a convex combination."""


@dataclass
class BodyTemplate:
    vertices: np.ndarray  # (V, 3) rest positions
    faces: np.ndarray  # (F, 3)
    shape_basis: np.ndarray  # (V, 3, S)
    pose_basis: np.ndarray | None  # (V, 3, P) or None (disabled)
    joint_regressor: np.ndarray  # (K, V), rows sum to 1
    skin_weights: np.ndarray  # (V, K), rows sum to 1, >= 0
    parents: np.ndarray  # (K,), root is -1
    bone_labels: np.ndarray | None = None  # (V,) dominant bone per vertex

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shapes(self) -> int:
        return self.shape_basis.shape[2]

    def validate(self) -> None:
        reg_sums = self.joint_regressor.sum(axis=1)
        if np.abs(reg_sums - 1.0).max() > 1e-9:
            raise ValueError("joint regressor rows must sum to 1")
        w_sums = self.skin_weights.sum(axis=1)
        if np.abs(w_sums - 1.0).max() > 1e-9 or self.skin_weights.min() < 0:
            raise ValueError("skinning weights must be a convex combination")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, self.n_joints)):
            raise ValueError("kinematic tree must be topologically sorted with root first")

    def mesh(self, vertices: np.ndarray | None = None) -> TriMesh:
        return TriMesh(
            self.vertices.copy() if vertices is None else np.asarray(vertices, dtype=float),
            self.faces.copy(),
        )


@dataclass
class Shape:
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("non-finite shape coefficients")
        self.beta = np.clip(self.beta, -5.0, 5.0)


@dataclass
class Pose:
    """Root transform plus per-joint axis-angle twists (K, 3)."""

    root: RigidTransform = field(default_factory=RigidTransform.identity)
    joints: np.ndarray = field(default_factory=lambda: np.zeros((16, 3)))

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float)
        if not np.all(np.isfinite(self.joints)):
            raise ValueError("non-finite pose")
        if np.any(np.linalg.norm(self.joints, axis=1) >= 2 * np.pi):
            raise ValueError("per-joint twist angle must stay below 2*pi")

    @staticmethod
    def rest(n_joints: int) -> "Pose":
        return Pose(RigidTransform.identity(), np.zeros((n_joints, 3)))

    def as_vector(self) -> np.ndarray:
        """Flat parameter vector [root translation, joint twists]."""
        return np.concatenate([self.root.t, self.joints.ravel()])

    @staticmethod
    def from_vector(x: np.ndarray, n_joints: int) -> "Pose":
        return Pose(
            RigidTransform(t=np.array(x[:3])), np.array(x[3 : 3 + 3 * n_joints]).reshape(-1, 3)
        )


def morph(tpl: BodyTemplate, shape: Shape, pose: Pose | None = None) -> np.ndarray:
    """Template plus shape (and optional pose) blendshape displacements."""
    if len(shape.beta) != tpl.n_shapes:
        raise ValueError(f"expected {tpl.n_shapes} shape coefficients")
    v = tpl.vertices + tpl.shape_basis @ shape.beta
    if tpl.pose_basis is not None and pose is not None:
        feat = pose_feature(tpl, pose)
        v = v + tpl.pose_basis @ feat
    return v


def pose_feature(tpl: BodyTemplate, pose: Pose) -> np.ndarray:
    """Rotation-matrix deviation features driving the pose blendshapes."""
    feats = []
    for k in range(1, tpl.n_joints):
        feats.append((rodrigues(pose.joints[k]) - np.eye(3)).ravel())
    return np.concatenate(feats) if feats else np.zeros(0)


def regress_joints(tpl: BodyTemplate, vertices: np.ndarray) -> np.ndarray:
    return tpl.joint_regressor @ vertices


def joint_chain(
    tpl: BodyTemplate, shape: Shape, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Global per-bone transforms G (K,4,4) and the morphed joints (K,3)."""
    joints = regress_joints(tpl, morph(tpl, shape))
    G = np.zeros((tpl.n_joints, 4, 4))
    root = pose.root.matrix()
    for k in range(tpl.n_joints):
        local = np.eye(4)
        local[:3, :3] = rodrigues(pose.joints[k])
        if tpl.parents[k] < 0:
            local[:3, 3] = joints[k]
            G[k] = root @ local
        else:
            local[:3, 3] = joints[k] - joints[tpl.parents[k]]
            G[k] = G[tpl.parents[k]] @ local
    return G, joints


def skinning_transforms(
    tpl: BodyTemplate, shape: Shape, pose: Pose, ref_pose: Pose | None = None
) -> np.ndarray:
    """Per-bone 4x4 matrices mapping ref_pose-posed space to pose-posed space.

    With ref_pose None the reference is the rest pose, so the rest pose maps
    to identity matrices.
    """
    G, _ = joint_chain(tpl, shape, pose)
    if ref_pose is None:
        ref_pose = Pose.rest(tpl.n_joints)
    G_ref, _ = joint_chain(tpl, shape, ref_pose)
    M = np.empty_like(G)
    for k in range(tpl.n_joints):
        M[k] = G[k] @ np.linalg.inv(G_ref[k])
    return M


def skin_points(points: np.ndarray, weights: np.ndarray, M: np.ndarray) -> np.ndarray:
    """LBS: apply the weight-blended bone matrices to each point."""
    sums = weights.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise InvalidWeightsError("per-point skinning weights must sum to 1")
    T = np.einsum("pk,kij->pij", weights, M)  # (P, 4, 4)
    return np.einsum("pij,pj->pi", T[:, :3, :3], points) + T[:, :3, 3]


def skin_normals(normals: np.ndarray, weights: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Rotate normals by the blended linear part and renormalize."""
    T = np.einsum("pk,kij->pij", weights, M[:, :3, :3])
    out = np.einsum("pij,pj->pi", T, normals)
    n = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(n, 1e-12)


def skin_lbs(
    tpl: BodyTemplate,
    shape: Shape,
    pose: Pose,
    points: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    ref_pose: Pose | None = None,
) -> np.ndarray:
    """Pose template vertices (default) or external points with given weights."""
    M = skinning_transforms(tpl, shape, pose, ref_pose)
    if points is None:
        points = morph(tpl, shape, pose)
        weights = tpl.skin_weights
    return skin_points(np.asarray(points, dtype=float), weights, M)


class PoseJacobian:
    """Forward-mode derivatives of the skinning matrices.

    Parameters are laid out as [root translation (3), joint twists (3K)],
    optionally followed by shape coefficients (S) when with_shape is set.
    The reference pose is held fixed.
    """

    def __init__(
        self,
        tpl: BodyTemplate,
        shape: Shape,
        pose: Pose,
        ref_pose: Pose | None = None,
        with_shape: bool = False,
    ):
        self.tpl = tpl
        self.with_shape = with_shape
        K = tpl.n_joints
        S = tpl.n_shapes
        self.n_params = 3 + 3 * K + (S if with_shape else 0)

        template_morphed = tpl.vertices + tpl.shape_basis @ shape.beta
        joints = tpl.joint_regressor @ template_morphed
        dJ_dbeta = np.einsum("kv,vds->kds", tpl.joint_regressor, tpl.shape_basis)  # (K,3,S)

        if ref_pose is None:
            ref_pose = Pose.rest(K)
        G_ref, _ = joint_chain(tpl, shape, ref_pose)
        G_ref_inv = np.array([np.linalg.inv(G_ref[k]) for k in range(K)])

        G = np.zeros((K, 4, 4))
        dG = np.zeros((K, self.n_params, 4, 4))
        root = pose.root.matrix()
        droot = np.zeros((3, 4, 4))
        for i in range(3):
            droot[i, i, 3] = 1.0
        for k in range(K):
            R, dR = rodrigues_with_jacobian(pose.joints[k])
            local = np.eye(4)
            local[:3, :3] = R
            p = tpl.parents[k]
            offset = joints[k] if p < 0 else joints[k] - joints[p]
            local[:3, 3] = offset
            dlocal = np.zeros((self.n_params, 4, 4))
            for i in range(3):
                dlocal[3 + 3 * k + i, :3, :3] = dR[i]
            if with_shape:
                doff = dJ_dbeta[k] if p < 0 else dJ_dbeta[k] - dJ_dbeta[p]
                for s in range(S):
                    dlocal[3 + 3 * K + s, :3, 3] = doff[:, s]
            if p < 0:
                G[k] = root @ local
                dG[k] = root[None] @ dlocal
                for i in range(3):
                    dG[k, i] += droot[i] @ local
            else:
                G[k] = G[p] @ local
                dG[k] = dG[p] @ local + G[p][None] @ dlocal
        self.G = G
        self.dG = dG
        self.M = np.einsum("kij,kjl->kil", G, G_ref_inv)
        self.dM = np.einsum("kpij,kjl->kpil", dG, G_ref_inv)
        # shape also moves the reference chain; the reference uses the same
        # beta, so differentiate G_ref too
        if with_shape:
            dG_ref = np.zeros((K, S, 4, 4))
            for k in range(K):
                p = tpl.parents[k]
                doff = dJ_dbeta[k] if p < 0 else dJ_dbeta[k] - dJ_dbeta[p]
                dlocal = np.zeros((S, 4, 4))
                R_ref = rodrigues(ref_pose.joints[k])
                for s in range(S):
                    dlocal[s, :3, 3] = doff[:, s]
                if p < 0:
                    dG_ref[k] = ref_pose.root.matrix()[None] @ dlocal
                else:
                    local_ref = np.eye(4)
                    local_ref[:3, :3] = R_ref
                    local_ref[:3, 3] = (
                        joints[k] - joints[p]
                    )
                    dG_ref[k] = dG_ref[p] @ local_ref + G_ref[p][None] @ dlocal
            # d(G Gref^-1) = dG Gref^-1 - G Gref^-1 dGref Gref^-1
            for k in range(K):
                for s in range(S):
                    self.dM[k, 3 + 3 * K + s] -= (
                        self.M[k] @ dG_ref[k, s] @ G_ref_inv[k]
                    )
        self._dJ_dbeta = dJ_dbeta
        self._joints = joints

    def skin_with_jacobian(
        self,
        points: np.ndarray,
        weights: np.ndarray,
        d_points_dbeta: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Posed points and their (P,3,n_params) Jacobian.

        d_points_dbeta (P,3,S) covers points that themselves move with shape
        (template vertices); external points pass None.
        """
        T = np.einsum("pk,kij->pij", weights, self.M)
        ph = np.concatenate([points, np.ones((len(points), 1))], axis=1)
        out = np.einsum("pij,pj->pi", T[:, :3], ph)
        dT = np.einsum("pk,kqij->pqij", weights, self.dM[:, :, :3, :])  # (P,np,3,4)
        jac = np.einsum("pqij,pj->piq", dT, ph)
        if self.with_shape and d_points_dbeta is not None:
            S = self.tpl.n_shapes
            jac[:, :, 3 + 3 * self.tpl.n_joints :] += np.einsum(
                "pij,pjs->pis", T[:, :3, :3], d_points_dbeta
            )
        return out, jac

    def joints_with_jacobian(self) -> tuple[np.ndarray, np.ndarray]:
        """Posed joint pivots (K,3) and their (K,3,n_params) Jacobian."""
        return self.G[:, :3, 3], np.transpose(self.dG[:, :, :3, 3], (0, 2, 1))


def generate_miniature_body(
    n_joints: int = 16, vertex_budget: int = 2000, n_shapes: int = 4, seed: int = 7
) -> BodyTemplate:
    """Deterministic capsule-limb humanoid satisfying the template invariants."""
    if n_joints < 4:
        raise ValueError("need at least 4 joints")
    if vertex_budget < 200:
        raise ValueError("vertex budget too small")
    if n_joints != 16:
        raise ValueError("the miniature generator is defined for 16 joints")
    rng = np.random.default_rng(seed)

    # pivots (T pose, meters, y up) and capsule end points
    J = np.array(
        [
            [0.00, 0.95, 0.0],  # 0 pelvis
            [0.00, 1.08, 0.0],  # 1 spine
            [0.00, 1.26, 0.0],  # 2 chest
            [0.00, 1.44, 0.0],  # 3 head
            [0.09, 0.90, 0.0],  # 4 hip.L
            [0.10, 0.52, 0.0],  # 5 knee.L
            [0.10, 0.14, 0.0],  # 6 ankle.L
            [-0.09, 0.90, 0.0],  # 7 hip.R
            [-0.10, 0.52, 0.0],  # 8 knee.R
            [-0.10, 0.14, 0.0],  # 9 ankle.R
            [0.17, 1.38, 0.0],  # 10 shoulder.L
            [0.44, 1.38, 0.0],  # 11 elbow.L
            [0.66, 1.38, 0.0],  # 12 wrist.L
            [-0.17, 1.38, 0.0],  # 13 shoulder.R
            [-0.44, 1.38, 0.0],  # 14 elbow.R
            [-0.66, 1.38, 0.0],  # 15 wrist.R
        ]
    )
    parents = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 11, 2, 13, 14])
    ends = np.array(
        [
            J[1], J[2], J[3], J[3] + [0, 0.20, 0],
            J[5], J[6], J[6] + [0.0, -0.10, 0.06],
            J[8], J[9], J[9] + [0.0, -0.10, 0.06],
            J[11], J[12], J[12] + [0.10, 0, 0],
            J[14], J[15], J[15] + [-0.10, 0, 0],
        ]
    )
    radii = np.array(
        [0.085, 0.095, 0.10, 0.075, 0.055, 0.048, 0.035, 0.055, 0.048, 0.035,
         0.042, 0.036, 0.028, 0.042, 0.036, 0.028]
    )

    n_bones = n_joints
    ring_pts = 8
    budget_per_bone = max(vertex_budget // n_bones, 4 * ring_pts)
    n_rings = max(budget_per_bone // ring_pts - 2, 4)

    verts, faces = [], []
    ring_of_joint = {}
    for k in range(n_bones):
        p0, p1, r = J[k], ends[k], radii[k]
        axis = p1 - p0
        length = np.linalg.norm(axis)
        axis = axis / max(length, 1e-9)
        ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        side = np.cross(axis, ref)
        side /= np.linalg.norm(side)
        up = np.cross(axis, side)
        base = len(verts)
        # bottom pole (cap behind the pivot), rings from pivot to end, top pole
        verts.append(p0 - r * axis)
        for i in range(n_rings):
            t = i / (n_rings - 1)
            center = p0 + t * (p1 - p0)
            if i == 0:
                ring_of_joint[k] = list(range(len(verts), len(verts) + ring_pts))
            for a in range(ring_pts):
                ang = 2 * np.pi * a / ring_pts
                verts.append(center + r * (np.cos(ang) * side + np.sin(ang) * up))
        verts.append(p1 + r * axis)
        bot, top = base, len(verts) - 1
        first = base + 1
        for a in range(ring_pts):
            faces.append([bot, first + (a + 1) % ring_pts, first + a])
        for i in range(n_rings - 1):
            r0 = first + i * ring_pts
            r1 = r0 + ring_pts
            for a in range(ring_pts):
                a2 = (a + 1) % ring_pts
                faces.append([r0 + a, r0 + a2, r1 + a])
                faces.append([r0 + a2, r1 + a2, r1 + a])
        last = first + (n_rings - 1) * ring_pts
        for a in range(ring_pts):
            faces.append([top, last + a, last + (a + 1) % ring_pts])

    vertices = np.array(verts)
    faces = np.array(faces, dtype=np.int64)

    # smooth, local skinning: Gaussian in distance to each bone segment
    sigma = 0.05
    d = np.empty((len(vertices), n_bones))
    for k in range(n_bones):
        d[:, k] = _point_segment_distance(vertices, J[k], ends[k])
    w = np.exp(-(d**2) / (2 * sigma**2))
    w[w < 1e-7 * w.max(axis=1, keepdims=True)] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    bone_labels = np.argmax(w, axis=1)

    regressor = np.zeros((n_joints, len(vertices)))
    for k, ring in ring_of_joint.items():
        regressor[k, ring] = 1.0 / len(ring)

    # shape modes: uniform scale, arm length, leg length, girth (plus small
    # seeded variations beyond the first four when requested)
    S = n_shapes
    basis = np.zeros((len(vertices), 3, S))
    center = J[0]
    basis[:, :, 0] = 0.03 * (vertices - center)
    if S > 1:
        arm_w = w[:, [10, 11, 12, 13, 14, 15]].sum(axis=1)
        basis[:, 0, 1] = 0.06 * arm_w * np.sign(vertices[:, 0])
    if S > 2:
        leg_w = w[:, [4, 5, 6, 7, 8, 9]].sum(axis=1)
        basis[:, 1, 2] = -0.06 * leg_w
    if S > 3:
        nearest = np.argmin(d, axis=1)
        closest = np.array(
            [_closest_on_segment(vertices[i], J[nearest[i]], ends[nearest[i]]) for i in range(len(vertices))]
        )
        radial = vertices - closest
        nr = np.linalg.norm(radial, axis=1, keepdims=True)
        basis[:, :, 3] = 0.01 * radial / np.maximum(nr, 1e-9)
    for s in range(4, S):
        basis[:, :, s] = 0.005 * rng.standard_normal((len(vertices), 3))

    tpl = BodyTemplate(
        vertices=vertices,
        faces=faces,
        shape_basis=basis,
        pose_basis=None,
        joint_regressor=regressor,
        skin_weights=w,
        parents=parents,
        bone_labels=bone_labels,
    )
    tpl.validate()
    return tpl


def _point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((pts - a) @ ab / max(ab @ ab, 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(pts - closest, axis=1)


def _closest_on_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((p - a) @ ab / max(ab @ ab, 1e-12), 0.0, 1.0)
    return a + t * ab


def save_template(tpl: BodyTemplate, path) -> None:
    """Self-describing text container with named blocks and a version tag."""
    with open(path, "w") as fh:
        fh.write("bodytemplate 1\n")
        _write_block(fh, "vertices", tpl.vertices)
        _write_block(fh, "faces", tpl.faces)
        _write_block(fh, "shape_basis", tpl.shape_basis.reshape(len(tpl.vertices), -1))
        _write_block(fh, "joint_regressor", tpl.joint_regressor)
        _write_block(fh, "skin_weights", tpl.skin_weights)
        _write_block(fh, "parents", tpl.parents[None, :])
        if tpl.bone_labels is not None:
            _write_block(fh, "bone_labels", tpl.bone_labels[None, :])


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    fh.write(f"block {name} {arr.shape[0]} {arr.shape[1]}\n")
    for row in arr:
        fh.write(" ".join(repr(float(x)) if arr.dtype.kind == "f" else str(int(x)) for x in row))
        fh.write("\n")


def load_template(path) -> BodyTemplate:
    blocks = {}
    with open(path) as fh:
        tag = fh.readline().split()
        if tag[:1] != ["bodytemplate"]:
            raise ValueError("not a body template file")
        for line in fh:
            parts = line.split()
            if parts[0] != "block":
                raise ValueError(f"unexpected line: {line!r}")
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            data = np.array(
                [[float(x) for x in fh.readline().split()] for _ in range(rows)]
            )
            blocks[name] = data.reshape(rows, cols)
    v = blocks["vertices"]
    n_shapes = blocks["shape_basis"].shape[1] // 3
    tpl = BodyTemplate(
        vertices=v,
        faces=blocks["faces"].astype(np.int64),
        shape_basis=blocks["shape_basis"].reshape(len(v), 3, n_shapes),
        pose_basis=None,
        joint_regressor=blocks["joint_regressor"],
        skin_weights=blocks["skin_weights"],
        parents=blocks["parents"].astype(np.int64).ravel(),
        bone_labels=blocks["bone_labels"].astype(np.int64).ravel()
        if "bone_labels" in blocks
        else None,
    )
    tpl.validate()
    return tpl

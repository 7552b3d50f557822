"""Rigid transforms, dual quaternions, camera projection and depth-image geometry.

Quaternions are stored as (w, x, y, z) float64 arrays. Twists are 6-vectors
ordered [angular; linear].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateBlendError(ValueError):
    """Dual-quaternion blend has no usable mass (zero weights or real part)."""


class BehindCameraError(ValueError):
    """Projection requested for a point with z <= 0."""


# ---------------------------------------------------------------------------
# quaternions


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product p*q, broadcasting over leading dimensions."""
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by unit quaternion q (broadcasting)."""
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion from a rotation matrix (Shepperd's branch selection)."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        q = np.array(
            [0.25 / s, (R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_exp_rotvec(w: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation vector w (angle = |w|)."""
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        # second-order series keeps the map smooth through zero
        return np.array([1.0 - angle * angle / 8.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
    axis = w / angle
    half = 0.5 * angle
    s = np.sin(half)
    return np.array([np.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    if q[0] < 0:
        q = -q
    w = min(q[0], 1.0)
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(sin_half, w)
    return q[1:] * (angle / sin_half)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector."""
    angle = np.linalg.norm(w)
    K = skew(w)
    if angle < 1e-10:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + (np.sin(angle) / angle) * K + ((1 - np.cos(angle)) / angle**2) * (K @ K)


def rodrigues_with_jacobian(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its derivative w.r.t. the rotation-vector components.

    Returns (R, dR) with dR[i] = dR/dw_i (Gallego & Yezzi closed form; series
    fallback near zero).
    """
    angle = np.linalg.norm(w)
    R = rodrigues(w)
    dR = np.empty((3, 3, 3))
    if angle < 1e-7:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            dR[i] = skew(e) + 0.5 * (skew(e) @ skew(w) + skew(w) @ skew(e))
        return R, dR
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        cross_term = np.cross(w, (np.eye(3) - R) @ e)
        dR[i] = ((w[i] * skew(w) + skew(cross_term)) / (angle * angle)) @ R
    return R, dR


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element as unit quaternion (w,x,y,z) plus translation (meters)."""

    q: np.ndarray = field(default_factory=quat_identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise ValueError("non-finite transform components")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            if n < 1e-12:
                raise ValueError("zero quaternion")
            q = q / n
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_matrix(M: np.ndarray) -> "RigidTransform":
        return RigidTransform(quat_from_matrix(M[:3, :3]), np.array(M[:3, 3]))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(self.q)
        M[:3, 3] = self.t
        return M

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(p, dtype=float)) + self.t

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(v, dtype=float))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other (apply other first)."""
        return RigidTransform(quat_mul(self.q, other.q), self.apply(other.t))

    def inverse(self) -> "RigidTransform":
        qi = quat_conj(self.q)
        return RigidTransform(qi, -quat_rotate(qi, self.t))


def se3_exp(twist: np.ndarray) -> RigidTransform:
    """Exponential map of a twist [angular; linear]."""
    twist = np.asarray(twist, dtype=float)
    if twist.shape != (6,) or not np.all(np.isfinite(twist)):
        raise ValueError("twist must be a finite 6-vector")
    w, v = twist[:3], twist[3:]
    angle = np.linalg.norm(w)
    K = skew(w)
    if angle < 1e-10:
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
    else:
        V = (
            np.eye(3)
            + ((1 - np.cos(angle)) / angle**2) * K
            + ((angle - np.sin(angle)) / angle**3) * (K @ K)
        )
    return RigidTransform(quat_exp_rotvec(w), V @ v)


def se3_log(T: RigidTransform) -> np.ndarray:
    """Inverse of se3_exp (rotation angle must be < pi)."""
    w = quat_to_rotvec(T.q)
    angle = np.linalg.norm(w)
    K = skew(w)
    if angle < 1e-10:
        Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        half = 0.5 * angle
        coef = (1.0 - half * np.cos(half) / np.sin(half)) / angle**2
        Vinv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return np.concatenate([w, Vinv @ T.t])


# ---------------------------------------------------------------------------
# dual quaternions


@dataclass(frozen=True)
class DualQuat:
    """Unit dual quaternion: real rotation part plus translation-carrying dual."""

    real: np.ndarray
    dual: np.ndarray

    @staticmethod
    def identity() -> "DualQuat":
        return DualQuat(quat_identity(), np.zeros(4))

    @staticmethod
    def from_transform(T: RigidTransform) -> "DualQuat":
        tq = np.array([0.0, T.t[0], T.t[1], T.t[2]])
        return DualQuat(np.array(T.q), 0.5 * quat_mul(tq, T.q))

    def to_transform(self) -> RigidTransform:
        n = np.linalg.norm(self.real)
        if n < 1e-12:
            raise DegenerateBlendError("zero real part")
        r = self.real / n
        d = self.dual / n
        t = 2.0 * quat_mul(d, quat_conj(r))[1:]
        return RigidTransform(r, t)

    def normalized(self) -> "DualQuat":
        """Full normalization: unit real part and real-orthogonal dual part."""
        n = np.linalg.norm(self.real)
        if n < 1e-12:
            raise DegenerateBlendError("zero real part")
        r = self.real / n
        d = self.dual / n
        d = d - r * np.dot(r, d)
        return DualQuat(r, d)

    def mul(self, other: "DualQuat") -> "DualQuat":
        return DualQuat(
            quat_mul(self.real, other.real),
            quat_mul(self.real, other.dual) + quat_mul(self.dual, other.real),
        )


def dqb_blend(pairs: list[tuple[float, DualQuat]]) -> RigidTransform:
    """Weighted dual-quaternion blend, normalized back to a rigid transform.

    Real parts are sign-aligned to the first element before summation;
    weights must be non-negative with positive sum.
    """
    if not pairs:
        raise DegenerateBlendError("empty blend")
    weights = np.array([w for w, _ in pairs], dtype=float)
    if np.any(weights < 0):
        raise ValueError("negative blend weight")
    if weights.sum() <= 0:
        raise DegenerateBlendError("all-zero weights")
    ref = pairs[0][1].real
    acc_r = np.zeros(4)
    acc_d = np.zeros(4)
    for w, dq in pairs:
        s = -1.0 if np.dot(dq.real, ref) < 0 else 1.0
        acc_r += (w * s) * dq.real
        acc_d += (w * s) * dq.dual
    if np.linalg.norm(acc_r) < 1e-9:
        raise DegenerateBlendError("blended real part near zero")
    return DualQuat(acc_r, acc_d).normalized().to_transform()


def dqb_apply_with_jacobian(
    a: np.ndarray, b: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply the rigid transform of a raw (unnormalized) dual quaternion to v.

    Returns (v_out, d v_out/d a, d v_out/d b), each Jacobian 3x4. Relies on
    the identity that translation extraction is invariant to the dual-part
    orthogonalization, so v_out = R(a/|a|) v + 2 vec(b a*) / |a|^2.
    """
    s = float(np.dot(a, a))
    if s < 1e-18:
        raise DegenerateBlendError("blended real part near zero")
    w, u = a[0], a[1:]
    bw, bu = b[0], b[1:]
    uxv = np.cross(u, v)
    f = (w * w - np.dot(u, u)) * v + 2.0 * np.dot(u, v) * u + 2.0 * w * uxv
    g = 2.0 * (-bw * u + w * bu + np.cross(u, bu))
    v_out = (f + g) / s

    df = np.empty((3, 4))
    df[:, 0] = 2.0 * w * v + 2.0 * uxv
    df[:, 1:] = (
        -2.0 * np.outer(v, u)
        + 2.0 * np.outer(u, v)
        + 2.0 * np.dot(u, v) * np.eye(3)
        - 2.0 * w * skew(v)
    )
    dg_da = np.empty((3, 4))
    dg_da[:, 0] = 2.0 * bu
    dg_da[:, 1:] = 2.0 * (-bw * np.eye(3) - skew(bu))
    d_a = (df + dg_da) / s - np.outer(v_out, 2.0 * a) / s
    d_b = np.empty((3, 4))
    d_b[:, 0] = -2.0 * u / s
    d_b[:, 1:] = 2.0 * (w * np.eye(3) + skew(u)) / s
    return v_out, d_a, d_b


# ---------------------------------------------------------------------------
# camera and depth images


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001  # meters per raw 16-bit unit

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("invalid camera intrinsics")


def project(cam: Camera, p: np.ndarray) -> np.ndarray:
    """Pinhole projection of a single point with z > 0."""
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise BehindCameraError(f"z = {p[2]}")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def project_many(cam: Camera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels (N,2), valid mask for z>0)."""
    pts = np.asarray(pts, dtype=float)
    z = pts[:, 2]
    valid = z > 0
    zsafe = np.where(valid, z, 1.0)
    uv = np.stack(
        [cam.fx * pts[:, 0] / zsafe + cam.cx, cam.fy * pts[:, 1] / zsafe + cam.cy], axis=1
    )
    return uv, valid


def backproject(cam: Camera, pixel: np.ndarray, depth: float) -> np.ndarray:
    if depth <= 0:
        raise ValueError(f"invalid depth {depth}")
    u, v = pixel
    return np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])


def backproject_grid(cam: Camera, depth: np.ndarray) -> np.ndarray:
    """Backproject a full depth image to an (H,W,3) point map (invalid -> 0)."""
    h, w = depth.shape
    us = np.arange(w, dtype=float)
    vs = np.arange(h, dtype=float)
    uu, vv = np.meshgrid(us, vs)
    pts = np.stack(
        [(uu - cam.cx) * depth / cam.fx, (vv - cam.cy) * depth / cam.fy, depth], axis=-1
    )
    pts[depth <= 0] = 0.0
    return pts


def depth_normals(cam: Camera, depth: np.ndarray) -> np.ndarray:
    """Camera-facing normals from central differences on backprojected pixels.

    Pixels whose four neighbors are not all valid get a zero normal.
    """
    pts = backproject_grid(cam, depth)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    valid = depth > 0
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n[ok] /= norm[ok][:, None]
    # orient toward the camera: n . p must be negative
    flip = np.sum(n * pts, axis=-1) > 0
    n[flip] *= -1.0
    normals[ok] = n[ok]
    return normals


@dataclass
class PointCloud:
    """Per-point position, unit normal (zero if undefined) and RGB in [0,1]."""

    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, T: RigidTransform) -> "PointCloud":
        return PointCloud(T.apply(self.points), T.rotate(self.normals), self.colors.copy())


def depth_to_cloud(
    cam: Camera, depth: np.ndarray, mask: np.ndarray | None = None, color: np.ndarray | None = None
) -> PointCloud:
    """Masked, valid depth pixels as a camera-space point cloud with normals."""
    if mask is not None and mask.shape != depth.shape:
        raise ValueError("mask dimensions do not match depth")
    sel = depth > 0
    if mask is not None:
        sel &= mask.astype(bool)
    pts = backproject_grid(cam, depth)
    normals = depth_normals(cam, depth)
    if color is not None:
        cols = color[sel].astype(float)
        if cols.size and cols.max() > 1.0:
            cols = cols / 255.0
    else:
        cols = np.full((int(sel.sum()), 3), 0.5)
    return PointCloud(pts[sel], normals[sel], cols)

"""Truncated signed distance volumes: sampling, integration, mesh extraction.

Stored distances are normalized by the truncation band mu and clamped to
[-1, 1]; the camera side of an observed surface is positive. Colors are kept
as running averages with the same weights as geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from . import kernels
from .geometry import Camera, depth_normals


class InvalidMeshError(ValueError):
    """Mesh is not closed/manifold where a watertight mesh is required."""


@dataclass(frozen=True)
class FusionConstants:
    w_max: float = 32.0
    init_trigger_weight: float = 32.0
    human_weight_threshold: float = 0.2
    occlusion_ratio_threshold: float = 0.3
    object_rmse_gate: float = 0.003
    object_cadence: int = 5


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.vertices)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (cached on the normals field)."""
        if self.normals is not None and len(self.normals) == len(self.vertices):
            return self.normals
        v, f = self.vertices, self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        n = np.zeros_like(v)
        for k in range(3):
            np.add.at(n, f[:, k], fn)
        norms = np.linalg.norm(n, axis=1)
        n[norms > 1e-12] /= norms[norms > 1e-12][:, None]
        self.normals = n
        return n

    def is_watertight(self) -> bool:
        """Closed manifold: every edge shared by exactly two opposed faces."""
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        keys = edges.min(axis=1).astype(np.int64) * (self.vertices.shape[0] + 1) + edges.max(
            axis=1
        )
        _, counts = np.unique(keys, return_counts=True)
        if not np.all(counts == 2):
            return False
        directed = edges[:, 0].astype(np.int64) * (self.vertices.shape[0] + 1) + edges[:, 1]
        return len(np.unique(directed)) == len(directed)

    def signed_volume(self) -> float:
        v, f = self.vertices, self.faces
        return float(np.sum(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]]))) / 6.0)


@dataclass
class TsdfVolume:
    """Dense voxel grid of normalized TSDF, accumulated weight and mean color."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    mu: float
    w_max: float = 32.0
    d: np.ndarray = field(init=False)
    w: np.ndarray = field(init=False)
    color: np.ndarray = field(init=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.d = np.zeros(self.dims)
        self.w = np.zeros(self.dims)
        self.color = np.zeros(self.dims + (3,))

    @staticmethod
    def from_bounds(lo, hi, voxel_size: float, mu: float | None = None) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size)) + 1 for i in range(3))
        return TsdfVolume(lo, voxel_size, dims, mu if mu is not None else 10.0 * voxel_size)

    def voxel_centers(self, indices: np.ndarray | None = None) -> np.ndarray:
        """World positions of voxel grid points (linear indices or all)."""
        if indices is None:
            indices = np.arange(int(np.prod(self.dims)))
        coords = np.stack(np.unravel_index(indices, self.dims), axis=1).astype(float)
        return self.origin[None, :] + coords * self.voxel_size

    def observed_indices(self) -> np.ndarray:
        return np.nonzero(self.w.ravel() > 0)[0]

    def copy(self) -> "TsdfVolume":
        out = TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.mu, self.w_max)
        out.d = self.d.copy()
        out.w = self.w.copy()
        out.color = self.color.copy()
        return out

    def save(self, path) -> None:
        """Debug dump: text header plus raw float64 D and W blocks."""
        header = (
            f"tsdf v1\ndims {self.dims[0]} {self.dims[1]} {self.dims[2]}\n"
            f"origin {self.origin[0]!r} {self.origin[1]!r} {self.origin[2]!r}\n"
            f"voxel {self.voxel_size!r}\nmu {self.mu!r}\nend\n"
        )
        with open(path, "wb") as fh:
            fh.write(header.encode())
            fh.write(self.d.astype("<f8").tobytes())
            fh.write(self.w.astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "TsdfVolume":
        with open(path, "rb") as fh:
            lines = []
            while True:
                line = fh.readline().decode()
                lines.append(line.strip())
                if line.strip() == "end":
                    break
            meta = {ln.split()[0]: ln.split()[1:] for ln in lines if ln and ln != "end"}
            dims = tuple(int(x) for x in meta["dims"])
            vol = TsdfVolume(
                np.array([float(x) for x in meta["origin"]]),
                float(meta["voxel"][0]),
                dims,
                float(meta["mu"][0]),
            )
            count = int(np.prod(dims))
            vol.d = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(dims).copy()
            vol.w = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(dims).copy()
        return vol


def sample_trilinear(vol: TsdfVolume, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated TSDF at pts; valid=False outside or at unobserved corners."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return kernels.sample_trilinear(vol.d, vol.w, vol.origin, vol.voxel_size, pts)


def sample_color(vol: TsdfVolume, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.zeros((len(pts), 3))
    for k in range(3):
        out[:, k], _ = kernels.sample_trilinear(
            np.ascontiguousarray(vol.color[..., k]), vol.w, vol.origin, vol.voxel_size, pts
        )
    return out


def tsdf_gradient(vol: TsdfVolume, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of the interpolated field (per meter)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return kernels.trilinear_gradient(vol.d, vol.w, vol.origin, vol.voxel_size, pts)


def integrate_frame(
    vol: TsdfVolume,
    depth: np.ndarray,
    cam: Camera,
    warp=None,
    weight=1.0,
    indices: np.ndarray | None = None,
    color: np.ndarray | None = None,
    normals: np.ndarray | None = None,
) -> None:
    """Projective TSDF update from a depth image.

    warp maps canonical voxel centers to camera space ((N,3)->(N,3), None for
    identity). weight is a scalar or a per-voxel array aligned with indices;
    zero-weight voxels are untouched. indices restricts the update to a subset
    of linear voxel indices.
    """
    if indices is None:
        indices = np.arange(int(np.prod(vol.dims)), dtype=np.int64)
    else:
        indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        return
    pts = vol.voxel_centers(indices)
    if warp is not None:
        pts = warp(pts)
    weights = np.broadcast_to(np.asarray(weight, dtype=float), (len(indices),))
    if np.any(weights < 0):
        raise ValueError("negative integration weight")
    if normals is None:
        normals = depth_normals(cam, depth)
    col = vol.color.reshape(-1, 3)
    if color is not None:
        color = np.ascontiguousarray(color, dtype=float)
        if color.max() > 1.0:
            color = color / 255.0
    kernels.integrate_projective(
        vol.d.ravel(),
        vol.w.ravel(),
        col,
        indices,
        np.ascontiguousarray(pts),
        np.ascontiguousarray(weights),
        np.ascontiguousarray(depth, dtype=float),
        np.ascontiguousarray(normals, dtype=float),
        color,
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy,
        vol.mu,
        vol.w_max,
    )


def closest_surface_points(mesh: TriMesh, pts: np.ndarray, k_candidates: int = 8):
    """Nearest point on the mesh surface for each query.

    Candidate faces come from a centroid KD-tree; exact point-triangle
    distances pick the winner. Returns (closest points, face indices).
    """
    v, f = mesh.vertices, mesh.faces
    centroids = v[f].mean(axis=1)
    tree = cKDTree(centroids)
    k = min(k_candidates, len(f))
    _, cand = tree.query(pts, k=k)
    if k == 1:
        cand = cand[:, None]

    a = v[f[cand, 0]]  # (N, k, 3)
    b = v[f[cand, 1]]
    c = v[f[cand, 2]]
    p = pts[:, None, :]
    closest = _point_triangle_closest(p, a, b, c)
    d2 = np.sum((closest - p) ** 2, axis=2)
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(pts))
    return closest[rows, best], cand[rows, best]


def _point_triangle_closest(p, a, b, c):
    """Closest points on triangles abc for queries p (broadcast arrays)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-30, 1e-30, denom)
    v = vb / denom
    w = vc / denom
    inner = a + v[..., None] * ab + w[..., None] * ac

    out = inner.copy()
    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = np.broadcast_to(a, out.shape)[m]
    m = (d3 >= 0) & (d4 <= d3)
    out[m] = np.broadcast_to(b, out.shape)[m]
    m = (d6 >= 0) & (d5 <= d6)
    out[m] = np.broadcast_to(c, out.shape)[m]
    # edge ab
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = np.where(np.abs(d1 - d3) > 1e-30, d1 / np.where(d1 - d3 == 0, 1e-30, d1 - d3), 0.0)
    out[m] = (a + np.clip(t, 0, 1)[..., None] * ab)[m]
    # edge ac
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = np.where(np.abs(d2 - d6) > 1e-30, d2 / np.where(d2 - d6 == 0, 1e-30, d2 - d6), 0.0)
    out[m] = (a + np.clip(t, 0, 1)[..., None] * ac)[m]
    # edge bc
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    den = (d4 - d3) + (d5 - d6)
    t = (d4 - d3) / np.where(den == 0, 1e-30, den)
    out[m] = (b + np.clip(t, 0, 1)[..., None] * (c - b))[m]
    return out


def angle_weighted_normals(mesh: TriMesh) -> np.ndarray:
    """Vertex pseudonormals (face normals weighted by incident angles)."""
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-12)
    out = np.zeros_like(v)
    for k in range(3):
        a = v[f[:, k]]
        b = v[f[:, (k + 1) % 3]]
        c = v[f[:, (k + 2) % 3]]
        e1 = b - a
        e2 = c - a
        cosang = np.einsum("ij,ij->i", e1, e2) / np.maximum(
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-12
        )
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(out, f[:, k], ang[:, None] * fn)
    norms = np.linalg.norm(out, axis=1)
    out[norms > 1e-12] /= norms[norms > 1e-12][:, None]
    return out


def mesh_signed_distance(mesh: TriMesh, pts: np.ndarray):
    """Signed distance to a watertight mesh (outside positive).

    Sign comes from the pseudonormal interpolated at the exact closest
    surface point, which is correct on faces, edges and vertices.
    """
    u, face_idx = closest_surface_points(mesh, pts)
    v, f = mesh.vertices, mesh.faces
    vn = angle_weighted_normals(mesh)
    a = v[f[face_idx, 0]]
    ab = v[f[face_idx, 1]] - a
    ac = v[f[face_idx, 2]] - a
    rel = u - a
    # barycentric of the closest point via the 2x2 normal equations
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    r0 = np.einsum("ij,ij->i", rel, ab)
    r1 = np.einsum("ij,ij->i", rel, ac)
    det = np.maximum(d00 * d11 - d01 * d01, 1e-30)
    bv = (d11 * r0 - d01 * r1) / det
    bw = (d00 * r1 - d01 * r0) / det
    bu = 1.0 - bv - bw
    n = (
        bu[:, None] * vn[f[face_idx, 0]]
        + bv[:, None] * vn[f[face_idx, 1]]
        + bw[:, None] * vn[f[face_idx, 2]]
    )
    diff = pts - u
    dist = np.linalg.norm(diff, axis=1)
    sign = np.where(np.einsum("ij,ij->i", n, diff) >= 0, 1.0, -1.0)
    return sign * dist, u, face_idx


def integrate_complete_mesh(vol: TsdfVolume, mesh: TriMesh, warp=None, chunk: int = 200000) -> None:
    """Blend a watertight mesh into the volume.

    Per-voxel signed distance comes from the exact nearest surface point with
    a pseudonormal sign (outside positive); the update weight is 1/(1+N(v))
    with N the count of already observed 26-neighbors.
    """
    if not mesh.is_watertight():
        raise InvalidMeshError("complete mesh must be closed and manifold")
    n_occupied = _neighbor_counts(vol.w > 0)
    w_new = 1.0 / (1.0 + n_occupied.ravel())

    total = int(np.prod(vol.dims))
    d_flat = vol.d.ravel()
    wt_flat = vol.w.ravel()
    col_flat = vol.color.reshape(-1, 3)
    mesh_colors = mesh.colors
    f = mesh.faces
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        pts = vol.voxel_centers(idx)
        if warp is not None:
            pts = warp(pts)
        sd, u, face_idx = mesh_signed_distance(mesh, pts)
        dist = np.abs(sd)
        sdf = np.clip(sd / vol.mu, -1.0, 1.0)
        keep = dist <= vol.mu  # blend only inside the band
        if not keep.any():
            continue
        j = idx[keep]
        wv = w_new[j]
        denom = wt_flat[j] + wv
        d_flat[j] = (d_flat[j] * wt_flat[j] + sdf[keep] * wv) / denom
        if mesh_colors is not None:
            cols = mesh_colors[f[face_idx[keep], 0]]
            for k in range(3):
                col_flat[j, k] = (col_flat[j, k] * wt_flat[j] + cols[:, k] * wv) / denom
        wt_flat[j] = np.minimum(wt_flat[j] + wv, vol.w_max)


def _neighbor_counts(occ: np.ndarray) -> np.ndarray:
    """Number of occupied voxels in the 26-neighborhood of each voxel."""
    padded = np.pad(occ.astype(np.int32), 1)
    out = np.zeros(occ.shape, dtype=np.int32)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                out += padded[
                    1 + dx : 1 + dx + occ.shape[0],
                    1 + dy : 1 + dy + occ.shape[1],
                    1 + dz : 1 + dz + occ.shape[2],
                ]
    return out


def extract_mesh(vol: TsdfVolume) -> TriMesh:
    """Marching-cubes zero surface over observed voxels, with vertex colors."""
    mask = vol.w > 0
    if not mask.any() or vol.d[mask].min() > 0 or vol.d[mask].max() < 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # Sign-extended sentinels: unobserved voxels copy the sign of their
    # nearest observed voxel, so band edges never cross the zero level
    # (skimage marches cubes that touch the mask with a single corner).
    _, nearest = ndimage.distance_transform_edt(~mask, return_indices=True)
    field = np.where(mask, vol.d, np.sign(vol.d[nearest[0], nearest[1], nearest[2]]) + 0.0)
    field[~mask & (field == 0.0)] = 1.0
    try:
        verts, faces, norms, _ = measure.marching_cubes(field, level=0.0, mask=mask)
    except (ValueError, RuntimeError):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    world = vol.origin[None, :] + verts * vol.voxel_size
    mesh = TriMesh(world, faces.astype(np.int64), None)
    if len(faces) and mesh.signed_volume() < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    mesh.normals = None
    mesh.vertex_normals()
    mesh.colors = np.clip(sample_color(vol, world), 0.0, 1.0)
    return mesh

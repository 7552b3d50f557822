"""Embedded-deformation motion field over sparse mesh-sampled nodes.

Each node carries a unit dual quaternion; points are warped by blending the
four nearest nodes with Gaussian influence weights. The solver updates nodes
with left-composed twist increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .geometry import (
    DualQuat,
    RigidTransform,
    quat_mul,
    quat_to_matrix,
    se3_exp,
    skew,
)


class InsufficientGraphError(ValueError):
    """Fewer nodes than the blending neighborhood requires."""


KNN_WARP = 4  # blend neighborhood for warping
KNN_GRAPH = 8  # adjacency neighborhood for regularization


@dataclass
class EdGraph:
    nodes: np.ndarray  # (N, 3) canonical positions
    qr: np.ndarray  # (N, 4) real parts
    qd: np.ndarray  # (N, 4) dual parts
    edges: np.ndarray  # (E, 2) directed, symmetric as a set
    radius: float = 0.075  # influence radius r_k
    skin_weights: np.ndarray | None = None  # (N, K)
    labels: np.ndarray | None = None  # (N,)
    _tree: cKDTree | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.nodes)
        return self._tree

    def transforms(self) -> list[RigidTransform]:
        return [DualQuat(self.qr[j], self.qd[j]).to_transform() for j in range(self.n_nodes)]

    def node_transform(self, j: int) -> RigidTransform:
        return DualQuat(self.qr[j], self.qd[j]).to_transform()

    def warped_nodes(self) -> np.ndarray:
        """Live positions of the nodes under their own transforms."""
        out = np.empty_like(self.nodes)
        for j in range(self.n_nodes):
            out[j] = self.node_transform(j).apply(self.nodes[j])
        return out

    def set_identity(self) -> None:
        self.qr = np.tile([1.0, 0.0, 0.0, 0.0], (self.n_nodes, 1))
        self.qd = np.zeros((self.n_nodes, 4))

    def apply_increments(self, delta: np.ndarray) -> None:
        """Left-compose exp(delta_j) onto each node transform ((N,6) twists)."""
        delta = delta.reshape(self.n_nodes, 6)
        for j in range(self.n_nodes):
            inc = DualQuat.from_transform(se3_exp(delta[j]))
            cur = DualQuat(self.qr[j], self.qd[j])
            new = inc.mul(cur).normalized()
            self.qr[j] = new.real
            self.qd[j] = new.dual

    def copy(self) -> "EdGraph":
        return EdGraph(
            self.nodes.copy(),
            self.qr.copy(),
            self.qd.copy(),
            self.edges.copy(),
            self.radius,
            None if self.skin_weights is None else self.skin_weights.copy(),
            None if self.labels is None else self.labels.copy(),
        )

    def dump(self, path) -> None:
        """Debug listing: index, position, label, adjacency."""
        adj = {j: [] for j in range(self.n_nodes)}
        for a, b in self.edges:
            adj[a].append(b)
        with open(path, "w") as fh:
            for j in range(self.n_nodes):
                lbl = -1 if self.labels is None else int(self.labels[j])
                n = " ".join(str(x) for x in sorted(adj[j]))
                fh.write(
                    f"{j} {self.nodes[j,0]:.6f} {self.nodes[j,1]:.6f} {self.nodes[j,2]:.6f} {lbl} {n}\n"
                )


def sample_nodes(vertices: np.ndarray, radius: float) -> np.ndarray:
    """Greedy Poisson-disk sampling over vertices in index order.

    A vertex is kept iff no previously kept node lies within radius, so every
    vertex ends up within radius of some node and node spacing is >= radius.
    """
    vertices = np.asarray(vertices, dtype=float)
    if len(vertices) == 0:
        raise ValueError("empty mesh")
    cap = 256
    buf = np.empty((cap, 3))
    n = 0
    r2 = radius * radius
    for v in vertices:
        if n:
            diff = buf[:n] - v
            if np.min(np.einsum("ij,ij->i", diff, diff)) < r2:
                continue
        if n == cap:
            cap *= 2
            grown = np.empty((cap, 3))
            grown[:n] = buf[:n]
            buf = grown
        buf[n] = v
        n += 1
    return buf[:n].copy()


def build_graph(nodes: np.ndarray, radius: float = 0.075) -> EdGraph:
    """Graph with 8-NN adjacency, symmetrized, identity motion."""
    n = len(nodes)
    if n < KNN_WARP:
        raise InsufficientGraphError(f"need at least {KNN_WARP} nodes, got {n}")
    tree = cKDTree(nodes)
    k = min(KNN_GRAPH + 1, n)
    _, idx = tree.query(nodes, k=k)
    pairs = set()
    for i in range(n):
        for j in idx[i, 1:]:
            pairs.add((i, int(j)))
            pairs.add((int(j), i))
    edges = np.array(sorted(pairs), dtype=np.int64)
    g = EdGraph(
        nodes=np.asarray(nodes, dtype=float),
        qr=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        qd=np.zeros((n, 4)),
        edges=edges,
        radius=radius,
    )
    return g


def influence_weights(
    g: EdGraph, pts: np.ndarray, normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """4-NN node indices and Gaussian influence weights for each point.

    Weights use exp(-|v-x|^2 / (2 r_k^2)); normalized to unit sum by default
    (raw weights otherwise).
    """
    pts = np.atleast_2d(pts)
    if g.n_nodes < KNN_WARP:
        raise InsufficientGraphError("graph has fewer nodes than the blend neighborhood")
    d, idx = g.tree().query(pts, k=KNN_WARP)
    w = np.exp(-(d**2) / (2.0 * g.radius**2))
    if normalize:
        s = w.sum(axis=1, keepdims=True)
        # all-negligible weights degrade to uniform over the 4-NN
        w = np.where(s > 1e-30, w / np.maximum(s, 1e-30), 0.25)
    return idx.astype(np.int64), w


def warp_points(
    g: EdGraph, pts: np.ndarray, normals: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """DQB-warp points (and optionally rotate normals) through the field."""
    idx, w = influence_weights(g, pts)
    out, nout, valid = kernels.dqb_warp(
        np.ascontiguousarray(g.qr),
        np.ascontiguousarray(g.qd),
        np.ascontiguousarray(idx),
        np.ascontiguousarray(w),
        np.ascontiguousarray(pts, dtype=float),
        None if normals is None else np.ascontiguousarray(normals, dtype=float),
    )
    if not valid.all():
        raise ValueError("degenerate dual-quaternion blend")
    return out, nout


def make_warp_fn(g: EdGraph):
    def warp(pts):
        return warp_points(g, pts)[0]

    return warp


def warp_jacobian(g: EdGraph, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Warped points plus d(warped)/d(node twist increments) at delta = 0.

    Returns (warped (M,3), idx (M,4), jac (M,3,4,6)) where jac[m,:,k,:] is the
    derivative w.r.t. the twist [angular; linear] of neighbor k of point m.
    """
    from .geometry import dqb_apply_with_jacobian

    idx, w = influence_weights(g, pts)
    m = len(pts)
    warped = np.empty((m, 3))
    jac = np.zeros((m, 3, KNN_WARP, 6))
    basis = np.eye(4)
    for i in range(m):
        ref = g.qr[idx[i, 0]]
        a = np.zeros(4)
        b = np.zeros(4)
        signs = np.empty(KNN_WARP)
        for k in range(KNN_WARP):
            j = idx[i, k]
            s = -1.0 if np.dot(g.qr[j], ref) < 0 else 1.0
            signs[k] = s
            a += w[i, k] * s * g.qr[j]
            b += w[i, k] * s * g.qd[j]
        v_out, da, db = dqb_apply_with_jacobian(a, b, pts[i])
        warped[i] = v_out
        for k in range(KNN_WARP):
            j = idx[i, k]
            ws = w[i, k] * signs[k]
            # left increment exp(delta) x dq: d(real)/dw = 0.5 e_i x qr,
            # d(dual)/dw = 0.5 e_i x qd, d(dual)/dv = 0.5 e_i x qr
            for axis in range(3):
                e = basis[axis + 1]
                d_real = 0.5 * quat_mul(e, g.qr[j]) * ws
                d_dual = 0.5 * quat_mul(e, g.qd[j]) * ws
                jac[i, :, k, axis] = da @ d_real + db @ d_dual
                d_dual_v = 0.5 * quat_mul(e, g.qr[j]) * ws
                jac[i, :, k, 3 + axis] = db @ d_dual_v
    return warped, idx, jac


def arap_residuals(g: EdGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-edge rigidity residuals T_i(x_j) - T_j(x_j) with twist Jacobians.

    Returns (residuals (E,3), d/d(delta_i) (E,3,6), d/d(delta_j) (E,3,6)).
    """
    transforms = g.transforms()
    e = len(g.edges)
    r = np.empty((e, 3))
    ji = np.zeros((e, 3, 6))
    jj = np.zeros((e, 3, 6))
    for n, (i, j) in enumerate(g.edges):
        xj = g.nodes[j]
        pi = transforms[i].apply(xj)
        pj = transforms[j].apply(xj)
        r[n] = pi - pj
        ji[n, :, :3] = -skew(pi)
        ji[n, :, 3:] = np.eye(3)
        jj[n, :, :3] = skew(pj)
        jj[n, :, 3:] = -np.eye(3)
    return r, ji, jj


def transfer_skinning_to_nodes(
    body_vertices: np.ndarray, body_weights: np.ndarray, g: EdGraph
) -> np.ndarray:
    """Influence-weighted average of the nearest body vertices' skinning rows.

    Nodes with no body vertex within 4 r_k fall back to the single nearest
    vertex row (orphan nodes).
    """
    tree = cKDTree(body_vertices)
    k = min(KNN_WARP, len(body_vertices))
    d, idx = tree.query(g.nodes, k=k)
    d = d.reshape(len(g.nodes), k)
    idx = idx.reshape(len(g.nodes), k)
    w = np.exp(-(d**2) / (2.0 * g.radius**2))
    orphan = d[:, 0] > 4.0 * g.radius
    out = np.einsum("nk,nkj->nj", w, body_weights[idx])
    s = out.sum(axis=1, keepdims=True)
    out = out / np.maximum(s, 1e-30)
    out[orphan] = body_weights[idx[orphan, 0]]
    return out


def lift_skinning(g: EdGraph, pts: np.ndarray) -> np.ndarray:
    """Skinning weights for arbitrary points from their 4-NN nodes."""
    if g.skin_weights is None:
        raise ValueError("graph has no skinning weights")
    idx, w = influence_weights(g, pts)
    out = np.einsum("nk,nkj->nj", w, g.skin_weights[idx])
    return out / np.maximum(out.sum(axis=1, keepdims=True), 1e-30)


class FrozenInverseWarp:
    """Approximate live-to-canonical warp frozen at construction time.

    Blends the inverse node transforms with weights from distances to the
    live node positions; used as a fixed association inside one solver
    iteration (like ICP correspondences).
    """

    def __init__(self, g: EdGraph):
        self.live_nodes = g.warped_nodes()
        self.tree = cKDTree(self.live_nodes)
        self.radius = g.radius
        self.inv_r = np.empty_like(g.qr)
        self.inv_d = np.empty_like(g.qd)
        for j in range(g.n_nodes):
            inv = DualQuat.from_transform(g.node_transform(j).inverse())
            self.inv_r[j] = inv.real
            self.inv_d[j] = inv.dual

    def apply(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map live points to canonical; also returns the blended rotations."""
        pts = np.atleast_2d(pts)
        k = min(KNN_WARP, len(self.live_nodes))
        d, idx = self.tree.query(pts, k=k)
        d = d.reshape(len(pts), k)
        idx = idx.reshape(len(pts), k).astype(np.int64)
        w = np.exp(-(d**2) / (2.0 * self.radius**2))
        s = w.sum(axis=1, keepdims=True)
        w = np.where(s > 1e-30, w / np.maximum(s, 1e-30), 1.0 / k)
        out, _, valid = kernels.dqb_warp(self.inv_r, self.inv_d, idx, w, pts)
        rots = np.empty((len(pts), 3, 3))
        for i in range(len(pts)):
            a = np.zeros(4)
            ref = self.inv_r[idx[i, 0]]
            for kk in range(k):
                j = idx[i, kk]
                sgn = -1.0 if np.dot(self.inv_r[j], ref) < 0 else 1.0
                a += w[i, kk] * sgn * self.inv_r[j]
            a = a / np.linalg.norm(a)
            rots[i] = quat_to_matrix(a)
        return out, rots

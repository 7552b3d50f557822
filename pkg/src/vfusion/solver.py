"""Nonlinear least squares: robust kernels, PCG, Levenberg-Marquardt, search.

A solve works on an opaque state with a user retraction; residual terms
report (r, J) with J taken w.r.t. the local increment at the current state.
Robust terms are handled by iteratively reweighted least squares with the
exact robustified energy deciding step acceptance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import Camera, PointCloud, project_many


@dataclass(frozen=True)
class SolverConfig:
    icp_iters: int = 4
    lm_iters: int = 3
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    pcg_max_iters: int = 64
    pcg_tol: float = 1e-6
    max_rejects: int = 6
    correspondence_dist: float = 0.05
    correspondence_angle_deg: float = 60.0

    def __post_init__(self):
        if min(self.icp_iters, self.lm_iters, self.pcg_max_iters) <= 0:
            raise ValueError("iteration counts must be positive")


def geman_mcclure(r: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounded robust loss rho = r^2/(r^2+c^2) and IRLS weight (1 at r=0)."""
    if c <= 0:
        raise ValueError("robust scale must be positive")
    r2 = np.square(r)
    denom = r2 + c * c
    rho = r2 / denom
    weight = (c * c / denom) ** 2
    return rho, weight


class Term:
    """Residual block: evaluate(state) -> (r, J); robust_c None means plain L2."""

    def __init__(self, name: str, weight: float, evaluate, robust_c: float | None = None):
        self.name = name
        self.weight = weight
        self.evaluate = evaluate
        self.robust_c = robust_c

    def energy(self, r: np.ndarray) -> float:
        if self.robust_c is None:
            return self.weight * float(np.sum(np.square(r)))
        rho, _ = geman_mcclure(r, self.robust_c)
        return self.weight * float(np.sum(rho))

    def irls_weights(self, r: np.ndarray) -> np.ndarray:
        if self.robust_c is None:
            return np.full(len(r), self.weight)
        _, w = geman_mcclure(r, self.robust_c)
        return self.weight * w


class QuadTerm:
    """Scalar energy block: evaluate(state) -> (E, grad, PSD Hessian)."""

    def __init__(self, name: str, weight: float, evaluate):
        self.name = name
        self.weight = weight
        self.evaluate = evaluate


@dataclass
class SolveReport:
    iterations: list[dict] = field(default_factory=list)
    converged: bool = False
    final_energy: float = float("nan")
    pcg_warnings: int = 0

    def to_csv(self) -> str:
        lines = ["iteration,energy,damping,pcg_iters,step_norm"]
        for row in self.iterations:
            lines.append(
                f"{row['iteration']},{row['energy']!r},{row['damping']!r},"
                f"{row['pcg_iters']},{row['step_norm']!r}"
            )
        return "\n".join(lines) + "\n"


def pcg(apply_op, rhs: np.ndarray, precond_solve, max_iters: int, tol: float):
    """Preconditioned conjugate gradients on an SPD operator (matrix-free).

    Stops at relative residual <= tol or the iteration cap; raises on
    non-finite intermediates.
    """
    x = np.zeros_like(rhs)
    r = rhs.copy()
    norm0 = float(np.linalg.norm(r))
    if norm0 == 0.0:
        return x, 0, True
    z = precond_solve(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        ap = apply_op(p)
        if not np.all(np.isfinite(ap)):
            raise FloatingPointError("non-finite operator application in PCG")
        alpha = rz / max(float(p @ ap), 1e-300)
        x += alpha * p
        r -= alpha * ap
        if float(np.linalg.norm(r)) <= tol * norm0:
            return x, it, True
        z = precond_solve(r)
        rz_new = float(r @ z)
        beta = rz_new / max(rz, 1e-300)
        rz = rz_new
        p = z + beta * p
    return x, max_iters, False


def lm_solve(
    state,
    terms: list,
    retract,
    n_params: int,
    blocks: list[tuple[int, int]],
    cfg: SolverConfig,
    lm_iters: int | None = None,
):
    """Levenberg-Marquardt with IRLS robustification and block-Jacobi PCG.

    retract(state, delta) -> new state. blocks are (offset, size) parameter
    groups for the preconditioner. Accepted steps never increase the exact
    robustified energy.
    """
    report = SolveReport()
    damping = cfg.damping_init
    iters = cfg.lm_iters if lm_iters is None else lm_iters

    def total_energy(s) -> float:
        e = 0.0
        for t in terms:
            if isinstance(t, QuadTerm):
                e += t.weight * t.evaluate(s)[0]
            else:
                r, _ = t.evaluate(s)
                e += t.energy(r)
        return e

    energy = total_energy(state)
    if not np.isfinite(energy):
        raise ValueError("non-finite energy at solver start")
    report.final_energy = energy

    for it in range(iters):
        mats = []  # (J, irls_row_weights) pairs
        grad = np.zeros(n_params)
        extra_hess = []
        for t in terms:
            if isinstance(t, QuadTerm):
                _, g, h = t.evaluate(state)
                grad += t.weight * g
                extra_hess.append(t.weight * h)
                continue
            r, J = t.evaluate(state)
            if len(r) == 0:
                continue
            w = t.irls_weights(r)
            if sp.issparse(J):
                J = J.tocsr()
            mats.append((J, w))
            grad += J.T @ (w * r)
        gnorm = float(np.max(np.abs(grad))) if n_params else 0.0
        if gnorm < 1e-14:
            report.converged = True
            break

        diag = np.zeros(n_params)
        for J, w in mats:
            if sp.issparse(J):
                diag += np.asarray(J.power(2).T @ w).ravel()
            else:
                diag += (J * J).T @ w
        for h in extra_hess:
            diag += np.diag(h)
        diag = np.maximum(diag, 1e-12)

        def apply_op(v, _damp=None):
            out = (_damp if _damp is not None else damping) * diag * v
            for J, w in mats:
                out = out + J.T @ (w * (J @ v))
            for h in extra_hess:
                out = out + h @ v
            return out

        accepted = False
        rejects = 0
        while not accepted and rejects <= cfg.max_rejects:
            # block-Jacobi preconditioner of the damped normal matrix
            precond = _block_jacobi(mats, extra_hess, diag, damping, blocks, n_params)
            step, pcg_iters, ok = pcg(
                lambda v: apply_op(v, damping), -grad, precond, cfg.pcg_max_iters, cfg.pcg_tol
            )
            if not ok:
                report.pcg_warnings += 1
            trial = retract(state, step)
            trial_energy = total_energy(trial)
            if np.isfinite(trial_energy) and trial_energy < energy:
                state = trial
                energy = trial_energy
                damping = max(damping / cfg.damping_down, 1e-12)
                accepted = True
                report.iterations.append(
                    {
                        "iteration": it,
                        "energy": energy,
                        "damping": damping,
                        "pcg_iters": pcg_iters,
                        "step_norm": float(np.linalg.norm(step)),
                    }
                )
            else:
                damping *= cfg.damping_up
                rejects += 1
        if not accepted:
            report.converged = True
            break
    report.final_energy = energy
    return state, report


def _block_jacobi(mats, extra_hess, diag, damping, blocks, n_params):
    inv_blocks = []
    for off, size in blocks:
        H = np.zeros((size, size))
        for J, w in mats:
            Jb = J[:, off : off + size]
            if sp.issparse(Jb):
                Jb = Jb.toarray()
            H += Jb.T @ (w[:, None] * Jb)
        for h in extra_hess:
            H += h[off : off + size, off : off + size]
        H[np.diag_indices(size)] += damping * diag[off : off + size]
        try:
            inv_blocks.append((off, size, np.linalg.inv(H)))
        except np.linalg.LinAlgError:
            inv_blocks.append((off, size, np.diag(1.0 / np.diag(H))))

    def solve(v):
        out = np.empty_like(v)
        for off, size, inv in inv_blocks:
            out[off : off + size] = inv @ v[off : off + size]
        return out

    return solve


@dataclass
class CorrespondenceSet:
    source_idx: np.ndarray  # indices into the source point set
    targets: np.ndarray  # (M, 3)
    target_normals: np.ndarray  # (M, 3) unit
    search: str = "projective"

    def __len__(self) -> int:
        return len(self.source_idx)


def find_projective(
    points: np.ndarray,
    normals: np.ndarray | None,
    depth: np.ndarray,
    depth_points: np.ndarray,
    depth_normals_img: np.ndarray,
    cam: Camera,
    max_dist: float = 0.05,
    max_angle_deg: float = 60.0,
) -> CorrespondenceSet:
    """Pair warped points with the depth pixels they project onto.

    depth_points/depth_normals_img are the precomputed (H,W,3) backprojection
    and normal maps. Pairs beyond the distance or normal-angle gates drop out.
    """
    uv, valid = project_many(cam, points)
    ui = np.floor(uv[:, 0] + 0.5).astype(int)
    vi = np.floor(uv[:, 1] + 0.5).astype(int)
    h, w = depth.shape
    valid &= (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    uic = np.clip(ui, 0, w - 1)
    vic = np.clip(vi, 0, h - 1)
    valid &= depth[vic, uic] > 0
    targets = depth_points[vic, uic]
    tnormals = depth_normals_img[vic, uic]
    valid &= np.einsum("ij,ij->i", tnormals, tnormals) > 0.5
    dist = np.linalg.norm(points - targets, axis=1)
    valid &= dist <= max_dist
    if normals is not None:
        cosang = np.einsum("ij,ij->i", normals, tnormals)
        valid &= cosang >= np.cos(np.deg2rad(max_angle_deg))
    idx = np.nonzero(valid)[0]
    return CorrespondenceSet(idx, targets[idx], tnormals[idx], "projective")


def find_closest(
    source: np.ndarray, target: PointCloud, max_dist: float | None = None
) -> CorrespondenceSet:
    """Nearest target point per source point (KD-tree, exact)."""
    if len(target.points) == 0:
        raise ValueError("empty target cloud")
    tree = cKDTree(target.points)
    d, idx = tree.query(source)
    keep = np.ones(len(source), dtype=bool) if max_dist is None else d <= max_dist
    src = np.nonzero(keep)[0]
    return CorrespondenceSet(
        src, target.points[idx[keep]], target.normals[idx[keep]], "closest"
    )

"""Pure-numpy implementations of the hot kernels.

These mirror the compiled extension exactly: same arithmetic, same operation
order, same tie-breaking, so the two backends produce bit-identical results.
All grids are float64; volume arrays are indexed (x, y, z).
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def set_num_threads(n: int) -> None:  # noqa: ARG001 - serial backend
    pass


def sample_trilinear(d, w, origin, voxel_size, pts):
    """Trilinear sample of d at pts; invalid where outside or any corner W=0."""
    pts = np.asarray(pts, dtype=float)
    g = (pts - origin[None, :]) / voxel_size
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    dims = np.array(d.shape)
    valid = np.all(i0 >= 0, axis=1) & np.all(i0 + 1 <= dims[None, :] - 1, axis=1)
    i0c = np.clip(i0, 0, dims[None, :] - 2)
    x, y, z = i0c[:, 0], i0c[:, 1], i0c[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    wmin = w[x, y, z]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wmin = np.minimum(wmin, w[x + dx, y + dy, z + dz])
    valid &= wmin > 0

    c00 = d[x, y, z] * (1.0 - fx) + d[x + 1, y, z] * fx
    c10 = d[x, y + 1, z] * (1.0 - fx) + d[x + 1, y + 1, z] * fx
    c01 = d[x, y, z + 1] * (1.0 - fx) + d[x + 1, y, z + 1] * fx
    c11 = d[x, y + 1, z + 1] * (1.0 - fx) + d[x + 1, y + 1, z + 1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    vals = c0 * (1.0 - fz) + c1 * fz
    vals = np.where(valid, vals, 0.0)
    return vals, valid


def trilinear_gradient(d, w, origin, voxel_size, pts):
    """Central-difference gradient of the trilinear field, step one voxel."""
    pts = np.asarray(pts, dtype=float)
    grads = np.zeros_like(pts)
    valid = np.ones(len(pts), dtype=bool)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = voxel_size
        vp, okp = sample_trilinear(d, w, origin, voxel_size, pts + step[None, :])
        vm, okm = sample_trilinear(d, w, origin, voxel_size, pts - step[None, :])
        grads[:, axis] = (vp - vm) / (2.0 * voxel_size)
        valid &= okp & okm
    grads[~valid] = 0.0
    return grads, valid


def integrate_projective(
    d, w, col, idx, pts, weights, depth, normals, color_img, fx, fy, cx, cy, mu, w_max
):
    """Projective TSDF update of the selected voxels (in place).

    d, w are flat (X*Y*Z) views; col is flat (X*Y*Z, 3) running-average color
    (ignored when color_img is None). idx are unique linear voxel indices,
    pts their warped centers. Voxels behind the truncation band are skipped;
    the front side clamps to +1.
    """
    pts = np.asarray(pts, dtype=float)
    weights = np.asarray(weights, dtype=float)
    h, wimg = depth.shape
    z = pts[:, 2]
    ok = (z > 1e-9) & (weights > 0)
    zs = np.where(ok, z, 1.0)
    u = fx * pts[:, 0] / zs + cx
    v = fy * pts[:, 1] / zs + cy
    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    ok &= (ui >= 0) & (ui < wimg) & (vi >= 0) & (vi < h)
    uic = np.clip(ui, 0, wimg - 1)
    vic = np.clip(vi, 0, h - 1)
    dz = depth[vic, uic]
    ok &= dz > 0
    n = normals[vic, uic]
    ok &= np.sum(n * n, axis=1) > 0.0

    px = (uic - cx) * dz / fx
    py = (vic - cy) * dz / fy
    dx = pts[:, 0] - px
    dy = pts[:, 1] - py
    dzz = pts[:, 2] - dz
    dist = np.sqrt(dx * dx + dy * dy + dzz * dzz)
    dot = n[:, 0] * dx + n[:, 1] * dy + n[:, 2] * dzz
    sdf = np.where(dot >= 0.0, dist, -dist) / mu
    ok &= sdf >= -1.0
    sdf = np.minimum(sdf, 1.0)

    sel = np.nonzero(ok)[0]
    if len(sel) == 0:
        return
    j = idx[sel]
    wv = weights[sel]
    denom = w[j] + wv
    d[j] = (d[j] * w[j] + sdf[sel] * wv) / denom
    if color_img is not None:
        c = color_img[vic[sel], uic[sel]].astype(float)
        for k in range(3):
            col[j, k] = (col[j, k] * w[j] + c[:, k] * wv) / denom
    w[j] = np.minimum(w[j] + wv, w_max)


def dqb_warp(qr, qd, idx, wts, pts, normals=None):
    """Blend per-node dual quaternions over idx/wts and apply to pts.

    Real parts are sign-aligned to each point's first neighbor. Returns the
    warped points, the rotated (renormalized) normals when given, and a valid
    mask (false where the blended real part collapses).
    """
    pts = np.asarray(pts, dtype=float)
    a_sel = qr[idx]  # (M, K, 4)
    b_sel = qd[idx]
    ref = a_sel[:, 0, :]
    sign = np.where(np.sum(a_sel * ref[:, None, :], axis=2) < 0.0, -1.0, 1.0)
    ws = wts * sign
    a = np.sum(ws[:, :, None] * a_sel, axis=1)
    b = np.sum(ws[:, :, None] * b_sel, axis=1)

    s = np.sum(a * a, axis=1)
    valid = s > 1e-18
    ss = np.where(valid, s, 1.0)
    w0, u = a[:, 0], a[:, 1:]
    bw, bu = b[:, 0], b[:, 1:]
    uv = np.cross(u, pts)
    udotv = np.sum(u * pts, axis=1)
    f = (
        (w0 * w0 - np.sum(u * u, axis=1))[:, None] * pts
        + 2.0 * udotv[:, None] * u
        + 2.0 * w0[:, None] * uv
    )
    g = 2.0 * (-bw[:, None] * u + w0[:, None] * bu + np.cross(u, bu))
    out = (f + g) / ss[:, None]

    nout = None
    if normals is not None:
        normals = np.asarray(normals, dtype=float)
        un = np.cross(u, normals)
        udotn = np.sum(u * normals, axis=1)
        fn = (
            (w0 * w0 - np.sum(u * u, axis=1))[:, None] * normals
            + 2.0 * udotn[:, None] * u
            + 2.0 * w0[:, None] * un
        )
        nout = fn / ss[:, None]
        nn = np.sqrt(np.sum(nout * nout, axis=1))
        nout = nout / np.where(nn > 1e-12, nn, 1.0)[:, None]
    return out, nout, valid


def raster_mesh(verts, faces, fx, fy, cx, cy, height, width):
    """Z-buffer triangle rasterization at pixel centers.

    Returns (zbuf, faceid, bary): zbuf is +inf where empty, faceid -1,
    bary the perspective-correct barycentric weights of the winning face.
    Faces are processed in order with a strict z < test, so earlier faces
    win ties.
    """
    zbuf = np.full((height, width), np.inf)
    faceid = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    verts = np.asarray(verts, dtype=float)
    z = verts[:, 2]
    u_all = np.empty(len(verts))
    v_all = np.empty(len(verts))
    behind = z <= 1e-9
    zsafe = np.where(behind, 1.0, z)
    u_all[:] = fx * verts[:, 0] / zsafe + cx
    v_all[:] = fy * verts[:, 1] / zsafe + cy

    for f in range(len(faces)):
        i0, i1, i2 = faces[f]
        if behind[i0] or behind[i1] or behind[i2]:
            continue
        x0, y0 = u_all[i0], v_all[i0]
        x1, y1 = u_all[i1], v_all[i1]
        x2, y2 = u_all[i2], v_all[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2))), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2))), width - 1)
        ymin = max(int(np.floor(min(y0, y1, y2))), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2))), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        xs = np.arange(xmin, xmax + 1, dtype=float)
        ys = np.arange(ymin, ymax + 1, dtype=float)
        px, py = np.meshgrid(xs, ys)
        w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
        w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        izp = w0 / verts[i0, 2] + w1 / verts[i1, 2] + w2 / verts[i2, 2]
        zp = 1.0 / izp
        sub = zbuf[ymin : ymax + 1, xmin : xmax + 1]
        win = inside & (zp < sub)
        if not win.any():
            continue
        sub[win] = zp[win]
        faceid[ymin : ymax + 1, xmin : xmax + 1][win] = f
        # perspective-correct vertex weights
        bw0 = (w0 / verts[i0, 2]) * zp
        bw1 = (w1 / verts[i1, 2]) * zp
        bw2 = 1.0 - bw0 - bw1
        bsub = bary[ymin : ymax + 1, xmin : xmax + 1]
        bsub[win, 0] = bw0[win]
        bsub[win, 1] = bw1[win]
        bsub[win, 2] = bw2[win]
    return zbuf, faceid, bary


def splat_points(pts, fx, fy, cx, cy, height, width, radius):
    """Z-buffer point splatting with a square footprint of the given radius."""
    zbuf = np.full((height, width), np.inf)
    pts = np.asarray(pts, dtype=float)
    order = np.arange(len(pts))
    for i in order:
        z = pts[i, 2]
        if z <= 1e-9:
            continue
        u = fx * pts[i, 0] / z + cx
        v = fy * pts[i, 1] / z + cy
        ui = int(np.floor(u + 0.5))
        vi = int(np.floor(v + 0.5))
        for dv in range(-radius, radius + 1):
            for du in range(-radius, radius + 1):
                x = ui + du
                y = vi + dv
                if 0 <= x < width and 0 <= y < height and z < zbuf[y, x]:
                    zbuf[y, x] = z
    return zbuf

# Compiled kernel core. Mirrors _numpy.py operation for operation; keep the
# two in lockstep (the test suite asserts bit-identical outputs).

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport sqrt, floor, ceil, INFINITY

cnp.import_array()

BACKEND = "compiled"

cdef int _num_threads = 1


def set_num_threads(n):
    global _num_threads
    _num_threads = max(1, int(n))


@cython.boundscheck(False)
@cython.wraparound(False)
cdef inline double _tri_sample(const double[:, :, ::1] d, const double[:, :, ::1] w,
                               double ox, double oy, double oz, double voxel,
                               double px, double py, double pz, int* ok) nogil:
    cdef double gx = (px - ox) / voxel
    cdef double gy = (py - oy) / voxel
    cdef double gz = (pz - oz) / voxel
    cdef long x = <long>floor(gx)
    cdef long y = <long>floor(gy)
    cdef long z = <long>floor(gz)
    cdef double fx = gx - x
    cdef double fy = gy - y
    cdef double fz = gz - z
    if x < 0 or y < 0 or z < 0 or x + 1 > d.shape[0] - 1 or y + 1 > d.shape[1] - 1 or z + 1 > d.shape[2] - 1:
        ok[0] = 0
        return 0.0
    if (w[x, y, z] <= 0 or w[x + 1, y, z] <= 0 or w[x, y + 1, z] <= 0 or
            w[x + 1, y + 1, z] <= 0 or w[x, y, z + 1] <= 0 or w[x + 1, y, z + 1] <= 0 or
            w[x, y + 1, z + 1] <= 0 or w[x + 1, y + 1, z + 1] <= 0):
        ok[0] = 0
        return 0.0
    ok[0] = 1
    cdef double c00 = d[x, y, z] * (1.0 - fx) + d[x + 1, y, z] * fx
    cdef double c10 = d[x, y + 1, z] * (1.0 - fx) + d[x + 1, y + 1, z] * fx
    cdef double c01 = d[x, y, z + 1] * (1.0 - fx) + d[x + 1, y, z + 1] * fx
    cdef double c11 = d[x, y + 1, z + 1] * (1.0 - fx) + d[x + 1, y + 1, z + 1] * fx
    cdef double c0 = c00 * (1.0 - fy) + c10 * fy
    cdef double c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


@cython.boundscheck(False)
@cython.wraparound(False)
def sample_trilinear(double[:, :, ::1] d, double[:, :, ::1] w, origin, double voxel_size, pts):
    cdef cnp.ndarray[double, ndim=2] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    cdef cnp.ndarray[double, ndim=1] vals = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(n, dtype=np.uint8)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef Py_ssize_t i
    cdef int ok
    cdef double[:, ::1] pv = p
    cdef double[::1] vv = vals
    cdef cnp.uint8_t[::1] okv = valid
    for i in prange(n, nogil=True, num_threads=_num_threads):
        ok = 0
        vv[i] = _tri_sample(d, w, ox, oy, oz, voxel_size, pv[i, 0], pv[i, 1], pv[i, 2], &ok)
        okv[i] = ok
    return vals, valid.astype(bool)


@cython.boundscheck(False)
@cython.wraparound(False)
def trilinear_gradient(double[:, :, ::1] d, double[:, :, ::1] w, origin, double voxel_size, pts):
    cdef cnp.ndarray[double, ndim=2] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    cdef cnp.ndarray[double, ndim=2] grads = np.zeros((n, 3), dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.ones(n, dtype=np.uint8)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef Py_ssize_t i
    cdef int axis, okp, okm
    cdef double vp, vm, sx, sy, sz
    cdef double[:, ::1] pv = p
    cdef double[:, ::1] gv = grads
    cdef cnp.uint8_t[::1] okv = valid
    for i in prange(n, nogil=True, num_threads=_num_threads):
        for axis in range(3):
            sx = voxel_size if axis == 0 else 0.0
            sy = voxel_size if axis == 1 else 0.0
            sz = voxel_size if axis == 2 else 0.0
            okp = 0
            okm = 0
            vp = _tri_sample(d, w, ox, oy, oz, voxel_size,
                             pv[i, 0] + sx, pv[i, 1] + sy, pv[i, 2] + sz, &okp)
            vm = _tri_sample(d, w, ox, oy, oz, voxel_size,
                             pv[i, 0] - sx, pv[i, 1] - sy, pv[i, 2] - sz, &okm)
            gv[i, axis] = (vp - vm) / (2.0 * voxel_size)
            if okp == 0 or okm == 0:
                okv[i] = 0
        if okv[i] == 0:
            gv[i, 0] = 0.0
            gv[i, 1] = 0.0
            gv[i, 2] = 0.0
    return grads, valid.astype(bool)


@cython.boundscheck(False)
@cython.wraparound(False)
def integrate_projective(double[::1] d, double[::1] w, double[:, ::1] col,
                         long[::1] idx, pts, weights,
                         double[:, ::1] depth, double[:, :, ::1] normals,
                         color_img, double fx, double fy, double cx, double cy,
                         double mu, double w_max):
    cdef cnp.ndarray[double, ndim=2] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] wv_arr = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, ::1] pv = p
    cdef double[::1] wv = wv_arr
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t h = depth.shape[0]
    cdef Py_ssize_t wimg = depth.shape[1]
    cdef int has_color = color_img is not None
    cdef double[:, :, ::1] cimg
    if has_color:
        cimg = np.ascontiguousarray(color_img, dtype=np.float64)
    else:
        cimg = np.zeros((1, 1, 3), dtype=np.float64)
    cdef Py_ssize_t i
    cdef long ui, vi, j
    cdef double z, u, v, dz, nx, ny, nz, px, py, ddx, ddy, ddz, dist, dot, sdf, wt, denom
    for i in prange(n, nogil=True, num_threads=_num_threads):
        z = pv[i, 2]
        wt = wv[i]
        if z <= 1e-9 or wt <= 0:
            continue
        u = fx * pv[i, 0] / z + cx
        v = fy * pv[i, 1] / z + cy
        ui = <long>floor(u + 0.5)
        vi = <long>floor(v + 0.5)
        if ui < 0 or ui >= wimg or vi < 0 or vi >= h:
            continue
        dz = depth[vi, ui]
        if dz <= 0:
            continue
        nx = normals[vi, ui, 0]
        ny = normals[vi, ui, 1]
        nz = normals[vi, ui, 2]
        if nx * nx + ny * ny + nz * nz <= 0.0:
            continue
        px = (ui - cx) * dz / fx
        py = (vi - cy) * dz / fy
        ddx = pv[i, 0] - px
        ddy = pv[i, 1] - py
        ddz = pv[i, 2] - dz
        dist = sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
        dot = nx * ddx + ny * ddy + nz * ddz
        if dot >= 0.0:
            sdf = dist / mu
        else:
            sdf = -dist / mu
        if sdf < -1.0:
            continue
        if sdf > 1.0:
            sdf = 1.0
        j = idx[i]
        denom = w[j] + wt
        d[j] = (d[j] * w[j] + sdf * wt) / denom
        if has_color:
            col[j, 0] = (col[j, 0] * w[j] + cimg[vi, ui, 0] * wt) / denom
            col[j, 1] = (col[j, 1] * w[j] + cimg[vi, ui, 1] * wt) / denom
            col[j, 2] = (col[j, 2] * w[j] + cimg[vi, ui, 2] * wt) / denom
        if w[j] + wt < w_max:
            w[j] = w[j] + wt
        else:
            w[j] = w_max


@cython.boundscheck(False)
@cython.wraparound(False)
def dqb_warp(double[:, ::1] qr, double[:, ::1] qd, long[:, ::1] idx, double[:, ::1] wts,
             pts, normals=None):
    cdef cnp.ndarray[double, ndim=2] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t kk = idx.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((n, 3), dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(n, dtype=np.uint8)
    cdef int has_n = normals is not None
    cdef cnp.ndarray[double, ndim=2] nrm
    cdef cnp.ndarray[double, ndim=2] nout_arr
    if has_n:
        nrm = np.ascontiguousarray(normals, dtype=np.float64)
        nout_arr = np.zeros((n, 3), dtype=np.float64)
    else:
        nrm = np.zeros((1, 3), dtype=np.float64)
        nout_arr = np.zeros((1, 3), dtype=np.float64)
    cdef double[:, ::1] pv = p
    cdef double[:, ::1] nv = nrm
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] nov = nout_arr
    cdef cnp.uint8_t[::1] okv = valid
    cdef Py_ssize_t i, k
    cdef long j, j0
    cdef double a0, a1, a2, a3, b0, b1, b2, b3, s, wk, dotr
    cdef double w0, u1, u2, u3, bw, bu1, bu2, bu3
    cdef double vx, vy, vz, uxv1, uxv2, uxv3, udv, coef
    cdef double f1, f2, f3, g1, g2, g3, nn
    for i in prange(n, nogil=True, num_threads=_num_threads):
        j0 = idx[i, 0]
        a0 = 0.0; a1 = 0.0; a2 = 0.0; a3 = 0.0
        b0 = 0.0; b1 = 0.0; b2 = 0.0; b3 = 0.0
        for k in range(kk):
            j = idx[i, k]
            dotr = (qr[j, 0] * qr[j0, 0] + qr[j, 1] * qr[j0, 1] +
                    qr[j, 2] * qr[j0, 2] + qr[j, 3] * qr[j0, 3])
            if dotr < 0.0:
                wk = -wts[i, k]
            else:
                wk = wts[i, k]
            a0 = a0 + wk * qr[j, 0]
            a1 = a1 + wk * qr[j, 1]
            a2 = a2 + wk * qr[j, 2]
            a3 = a3 + wk * qr[j, 3]
            b0 = b0 + wk * qd[j, 0]
            b1 = b1 + wk * qd[j, 1]
            b2 = b2 + wk * qd[j, 2]
            b3 = b3 + wk * qd[j, 3]
        s = a0 * a0 + a1 * a1 + a2 * a2 + a3 * a3
        if s <= 1e-18:
            okv[i] = 0
            continue
        okv[i] = 1
        w0 = a0; u1 = a1; u2 = a2; u3 = a3
        bw = b0; bu1 = b1; bu2 = b2; bu3 = b3
        vx = pv[i, 0]; vy = pv[i, 1]; vz = pv[i, 2]
        uxv1 = u2 * vz - u3 * vy
        uxv2 = u3 * vx - u1 * vz
        uxv3 = u1 * vy - u2 * vx
        udv = u1 * vx + u2 * vy + u3 * vz
        coef = w0 * w0 - (u1 * u1 + u2 * u2 + u3 * u3)
        f1 = coef * vx + 2.0 * udv * u1 + 2.0 * w0 * uxv1
        f2 = coef * vy + 2.0 * udv * u2 + 2.0 * w0 * uxv2
        f3 = coef * vz + 2.0 * udv * u3 + 2.0 * w0 * uxv3
        g1 = 2.0 * (-bw * u1 + w0 * bu1 + (u2 * bu3 - u3 * bu2))
        g2 = 2.0 * (-bw * u2 + w0 * bu2 + (u3 * bu1 - u1 * bu3))
        g3 = 2.0 * (-bw * u3 + w0 * bu3 + (u1 * bu2 - u2 * bu1))
        ov[i, 0] = (f1 + g1) / s
        ov[i, 1] = (f2 + g2) / s
        ov[i, 2] = (f3 + g3) / s
        if has_n:
            vx = nv[i, 0]; vy = nv[i, 1]; vz = nv[i, 2]
            uxv1 = u2 * vz - u3 * vy
            uxv2 = u3 * vx - u1 * vz
            uxv3 = u1 * vy - u2 * vx
            udv = u1 * vx + u2 * vy + u3 * vz
            f1 = coef * vx + 2.0 * udv * u1 + 2.0 * w0 * uxv1
            f2 = coef * vy + 2.0 * udv * u2 + 2.0 * w0 * uxv2
            f3 = coef * vz + 2.0 * udv * u3 + 2.0 * w0 * uxv3
            f1 = f1 / s
            f2 = f2 / s
            f3 = f3 / s
            nn = sqrt(f1 * f1 + f2 * f2 + f3 * f3)
            if nn > 1e-12:
                nov[i, 0] = f1 / nn
                nov[i, 1] = f2 / nn
                nov[i, 2] = f3 / nn
            else:
                nov[i, 0] = f1
                nov[i, 1] = f2
                nov[i, 2] = f3
    if has_n:
        return out, nout_arr, valid.astype(bool)
    return out, None, valid.astype(bool)


@cython.boundscheck(False)
@cython.wraparound(False)
def raster_mesh(verts, faces, double fx, double fy, double cx, double cy,
                Py_ssize_t height, Py_ssize_t width):
    cdef cnp.ndarray[double, ndim=2] v_arr = np.ascontiguousarray(verts, dtype=np.float64)
    cdef cnp.ndarray[long, ndim=2] f_arr = np.ascontiguousarray(faces, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=2] zbuf = np.full((height, width), np.inf)
    cdef cnp.ndarray[long, ndim=2] faceid = np.full((height, width), -1, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=3] bary = np.zeros((height, width, 3))
    cdef double[:, ::1] vv = v_arr
    cdef long[:, ::1] fv = f_arr
    cdef double[:, ::1] zv = zbuf
    cdef long[:, ::1] idv = faceid
    cdef double[:, :, ::1] bv = bary
    cdef Py_ssize_t nf = f_arr.shape[0]
    cdef Py_ssize_t nv = v_arr.shape[0]
    cdef cnp.ndarray[double, ndim=1] u_all = np.empty(nv)
    cdef cnp.ndarray[double, ndim=1] v_all = np.empty(nv)
    cdef double[::1] ua = u_all
    cdef double[::1] va = v_all
    cdef Py_ssize_t i, f
    cdef long i0, i1, i2, xmin, xmax, ymin, ymax, px, py
    cdef double x0, y0, x1, y1, x2, y2, area, w0, w1, w2, izp, zp, bw0, bw1
    cdef double mnx, mxx, mny, mxy
    with nogil:
        for i in range(nv):
            if vv[i, 2] <= 1e-9:
                ua[i] = 0.0
                va[i] = 0.0
            else:
                ua[i] = fx * vv[i, 0] / vv[i, 2] + cx
                va[i] = fy * vv[i, 1] / vv[i, 2] + cy
        for f in range(nf):
            i0 = fv[f, 0]; i1 = fv[f, 1]; i2 = fv[f, 2]
            if vv[i0, 2] <= 1e-9 or vv[i1, 2] <= 1e-9 or vv[i2, 2] <= 1e-9:
                continue
            x0 = ua[i0]; y0 = va[i0]
            x1 = ua[i1]; y1 = va[i1]
            x2 = ua[i2]; y2 = va[i2]
            area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            if area == 0.0:
                continue
            mnx = x0
            if x1 < mnx: mnx = x1
            if x2 < mnx: mnx = x2
            mxx = x0
            if x1 > mxx: mxx = x1
            if x2 > mxx: mxx = x2
            mny = y0
            if y1 < mny: mny = y1
            if y2 < mny: mny = y2
            mxy = y0
            if y1 > mxy: mxy = y1
            if y2 > mxy: mxy = y2
            xmin = <long>floor(mnx)
            if xmin < 0: xmin = 0
            xmax = <long>ceil(mxx)
            if xmax > width - 1: xmax = width - 1
            ymin = <long>floor(mny)
            if ymin < 0: ymin = 0
            ymax = <long>ceil(mxy)
            if ymax > height - 1: ymax = height - 1
            if xmin > xmax or ymin > ymax:
                continue
            for py in range(ymin, ymax + 1):
                for px in range(xmin, xmax + 1):
                    w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
                    w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
                    w2 = 1.0 - w0 - w1
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                    izp = w0 / vv[i0, 2] + w1 / vv[i1, 2] + w2 / vv[i2, 2]
                    zp = 1.0 / izp
                    if zp < zv[py, px]:
                        zv[py, px] = zp
                        idv[py, px] = f
                        bw0 = (w0 / vv[i0, 2]) * zp
                        bw1 = (w1 / vv[i1, 2]) * zp
                        bv[py, px, 0] = bw0
                        bv[py, px, 1] = bw1
                        bv[py, px, 2] = 1.0 - bw0 - bw1
    return zbuf, faceid, bary


@cython.boundscheck(False)
@cython.wraparound(False)
def splat_points(pts, double fx, double fy, double cx, double cy,
                 Py_ssize_t height, Py_ssize_t width, long radius):
    cdef cnp.ndarray[double, ndim=2] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] zbuf = np.full((height, width), np.inf)
    cdef double[:, ::1] pv = p
    cdef double[:, ::1] zv = zbuf
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef long ui, vi, du, dv, x, y
    cdef double z, u, v
    with nogil:
        for i in range(n):
            z = pv[i, 2]
            if z <= 1e-9:
                continue
            u = fx * pv[i, 0] / z + cx
            v = fy * pv[i, 1] / z + cy
            ui = <long>floor(u + 0.5)
            vi = <long>floor(v + 0.5)
            for dv in range(-radius, radius + 1):
                for du in range(-radius, radius + 1):
                    x = ui + du
                    y = vi + dv
                    if 0 <= x < width and 0 <= y < height and z < zv[y, x]:
                        zv[y, x] = z
    return zbuf

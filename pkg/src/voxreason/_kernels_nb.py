"""Numba @njit implementations of the hot kernels (see _kernels_np.py).

Loop-level twins of the numpy reference; single-threaded on purpose so that
accumulation order (and hence bit-level output) is fixed.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def _softplus1(x):
    if x > 30.0:
        return x
    return np.log1p(np.exp(x))


@njit(cache=True, fastmath=False)
def _sigmoid1(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, fastmath=False)
def _corner_setup(dims0, dims1, dims2, ox, oy, oz, h, px, py, pz):
    """Returns (i0,j0,k0, fx,fy,fz, inside) for one point."""
    inside = (
        px >= ox
        and py >= oy
        and pz >= oz
        and px <= ox + dims0 * h
        and py <= oy + dims1 * h
        and pz <= oz + dims2 * h
    )
    ux = (px - ox) / h - 0.5
    uy = (py - oy) / h - 0.5
    uz = (pz - oz) / h - 0.5
    i0 = int(np.floor(ux))
    j0 = int(np.floor(uy))
    k0 = int(np.floor(uz))
    i0 = min(max(i0, 0), dims0 - 2)
    j0 = min(max(j0, 0), dims1 - 2)
    k0 = min(max(k0, 0), dims2 - 2)
    fx = min(max(ux - i0, 0.0), 1.0)
    fy = min(max(uy - j0, 0.0), 1.0)
    fz = min(max(uz - k0, 0.0), 1.0)
    return i0, j0, k0, fx, fy, fz, inside


@njit(cache=True, fastmath=False)
def trilinear_gather(values, origin, h, pts):
    n = pts.shape[0]
    C = values.shape[3]
    out = np.zeros((n, C))
    inside = np.zeros(n, dtype=np.bool_)
    for p in range(n):
        i0, j0, k0, fx, fy, fz, ok = _corner_setup(
            values.shape[0], values.shape[1], values.shape[2],
            origin[0], origin[1], origin[2], h, pts[p, 0], pts[p, 1], pts[p, 2],
        )
        inside[p] = ok
        if not ok:
            continue
        for c in range(C):
            v000 = values[i0, j0, k0, c]
            v001 = values[i0, j0, k0 + 1, c]
            v010 = values[i0, j0 + 1, k0, c]
            v011 = values[i0, j0 + 1, k0 + 1, c]
            v100 = values[i0 + 1, j0, k0, c]
            v101 = values[i0 + 1, j0, k0 + 1, c]
            v110 = values[i0 + 1, j0 + 1, k0, c]
            v111 = values[i0 + 1, j0 + 1, k0 + 1, c]
            c00 = v000 * (1 - fz) + v001 * fz
            c01 = v010 * (1 - fz) + v011 * fz
            c10 = v100 * (1 - fz) + v101 * fz
            c11 = v110 * (1 - fz) + v111 * fz
            c0 = c00 * (1 - fy) + c01 * fy
            c1 = c10 * (1 - fy) + c11 * fy
            out[p, c] = c0 * (1 - fx) + c1 * fx
    return out, inside


@njit(cache=True, fastmath=False)
def trilinear_scatter(grad_grid, origin, h, pts, upstream):
    n = pts.shape[0]
    C = grad_grid.shape[3]
    for p in range(n):
        i0, j0, k0, fx, fy, fz, ok = _corner_setup(
            grad_grid.shape[0], grad_grid.shape[1], grad_grid.shape[2],
            origin[0], origin[1], origin[2], h, pts[p, 0], pts[p, 1], pts[p, 2],
        )
        if not ok:
            continue
        for c in range(C):
            u = upstream[p, c]
            grad_grid[i0, j0, k0, c] += u * (1 - fx) * (1 - fy) * (1 - fz)
            grad_grid[i0, j0, k0 + 1, c] += u * (1 - fx) * (1 - fy) * fz
            grad_grid[i0, j0 + 1, k0, c] += u * (1 - fx) * fy * (1 - fz)
            grad_grid[i0, j0 + 1, k0 + 1, c] += u * (1 - fx) * fy * fz
            grad_grid[i0 + 1, j0, k0, c] += u * fx * (1 - fy) * (1 - fz)
            grad_grid[i0 + 1, j0, k0 + 1, c] += u * fx * (1 - fy) * fz
            grad_grid[i0 + 1, j0 + 1, k0, c] += u * fx * fy * (1 - fz)
            grad_grid[i0 + 1, j0 + 1, k0 + 1, c] += u * fx * fy * fz
    return grad_grid


@njit(cache=True, fastmath=False)
def _gather_one(values, origin, h, px, py, pz, out):
    """Gather one point into out (C,); returns inside flag."""
    i0, j0, k0, fx, fy, fz, ok = _corner_setup(
        values.shape[0], values.shape[1], values.shape[2],
        origin[0], origin[1], origin[2], h, px, py, pz,
    )
    if not ok:
        for c in range(values.shape[3]):
            out[c] = 0.0
        return False
    for c in range(values.shape[3]):
        c00 = values[i0, j0, k0, c] * (1 - fz) + values[i0, j0, k0 + 1, c] * fz
        c01 = values[i0, j0 + 1, k0, c] * (1 - fz) + values[i0, j0 + 1, k0 + 1, c] * fz
        c10 = values[i0 + 1, j0, k0, c] * (1 - fz) + values[i0 + 1, j0, k0 + 1, c] * fz
        c11 = values[i0 + 1, j0 + 1, k0, c] * (1 - fz) + values[i0 + 1, j0 + 1, k0 + 1, c] * fz
        c0 = c00 * (1 - fy) + c01 * fy
        c1 = c10 * (1 - fy) + c11 * fy
        out[c] = c0 * (1 - fx) + c1 * fx
    return True


@njit(cache=True, fastmath=False)
def _scatter_one(grid, origin, h, px, py, pz, up):
    i0, j0, k0, fx, fy, fz, ok = _corner_setup(
        grid.shape[0], grid.shape[1], grid.shape[2],
        origin[0], origin[1], origin[2], h, px, py, pz,
    )
    if not ok:
        return
    for c in range(grid.shape[3]):
        u = up[c]
        grid[i0, j0, k0, c] += u * (1 - fx) * (1 - fy) * (1 - fz)
        grid[i0, j0, k0 + 1, c] += u * (1 - fx) * (1 - fy) * fz
        grid[i0, j0 + 1, k0, c] += u * (1 - fx) * fy * (1 - fz)
        grid[i0, j0 + 1, k0 + 1, c] += u * (1 - fx) * fy * fz
        grid[i0 + 1, j0, k0, c] += u * fx * (1 - fy) * (1 - fz)
        grid[i0 + 1, j0, k0 + 1, c] += u * fx * (1 - fy) * fz
        grid[i0 + 1, j0 + 1, k0, c] += u * fx * fy * (1 - fz)
        grid[i0 + 1, j0 + 1, k0 + 1, c] += u * fx * fy * fz


@njit(cache=True, fastmath=False)
def _nearest_one(values, origin, h, px, py, pz, out):
    """Nearest-voxel gather of one point into out (C,); returns inside flag."""
    d0, d1, d2 = values.shape[0], values.shape[1], values.shape[2]
    inside = (
        px >= origin[0] and py >= origin[1] and pz >= origin[2]
        and px <= origin[0] + d0 * h and py <= origin[1] + d1 * h
        and pz <= origin[2] + d2 * h
    )
    if not inside:
        for c in range(values.shape[3]):
            out[c] = 0.0
        return False
    i = min(max(int(np.floor((px - origin[0]) / h)), 0), d0 - 1)
    j = min(max(int(np.floor((py - origin[1]) / h)), 0), d1 - 1)
    k = min(max(int(np.floor((pz - origin[2]) / h)), 0), d2 - 1)
    for c in range(values.shape[3]):
        out[c] = values[i, j, k, c]
    return True


@njit(cache=True, fastmath=False)
def render_forward(dgrid, cgrid, origin, h, ro, rd, t0, t1, jit, bg, act, sigma_scale):
    R, K = jit.shape
    rgb = np.zeros((R, 3))
    wsum = np.zeros(R)
    dbuf = np.zeros(1)
    cbuf = np.zeros(3)
    dg = dgrid.reshape(dgrid.shape[0], dgrid.shape[1], dgrid.shape[2], 1)
    for r in range(R):
        span = t1[r] - t0[r]
        if not span > 0.0:
            rgb[r, 0] = bg[0]
            rgb[r, 1] = bg[1]
            rgb[r, 2] = bg[2]
            continue
        T = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        ws = 0.0
        tprev = 0.0
        for j in range(K):
            tj = t0[r] + (j + jit[r, j]) * span / K
            if j + 1 < K:
                tnext = t0[r] + (j + 1 + jit[r, j + 1]) * span / K
            else:
                tnext = t1[r]
            delta = max(tnext - tj, 0.0)
            px = ro[r, 0] + tj * rd[r, 0]
            py = ro[r, 1] + tj * rd[r, 1]
            pz = ro[r, 2] + tj * rd[r, 2]
            if act == 1:
                ok = _gather_one(dg, origin, h, px, py, pz, dbuf)
                _gather_one(cgrid, origin, h, px, py, pz, cbuf)
                sig = _softplus1(dbuf[0])
                c0 = _sigmoid1(cbuf[0])
                c1 = _sigmoid1(cbuf[1])
                c2 = _sigmoid1(cbuf[2])
            else:
                ok = _nearest_one(dg, origin, h, px, py, pz, dbuf)
                _nearest_one(cgrid, origin, h, px, py, pz, cbuf)
                sig = max(dbuf[0], 0.0) * sigma_scale
                c0 = min(max(cbuf[0], 0.0), 1.0)
                c1 = min(max(cbuf[1], 0.0), 1.0)
                c2 = min(max(cbuf[2], 0.0), 1.0)
            if not ok:
                sig = 0.0
            alpha = 1.0 - np.exp(-sig * delta)
            w = T * alpha
            acc0 += w * c0
            acc1 += w * c1
            acc2 += w * c2
            ws += w
            T *= 1.0 - alpha
        rgb[r, 0] = acc0 + (1.0 - ws) * bg[0]
        rgb[r, 1] = acc1 + (1.0 - ws) * bg[1]
        rgb[r, 2] = acc2 + (1.0 - ws) * bg[2]
        wsum[r] = ws
    return rgb, wsum


@njit(cache=True, fastmath=False)
def fit_photometric(dgrid, cgrid, origin, h, ro, rd, t0, t1, jit, gt, bg, gd, gc, gscale):
    R, K = jit.shape
    loss_sum = 0.0
    dg = dgrid.reshape(dgrid.shape[0], dgrid.shape[1], dgrid.shape[2], 1)
    gd4 = gd.reshape(gd.shape[0], gd.shape[1], gd.shape[2], 1)
    dbuf = np.zeros(1)
    cbuf = np.zeros(3)
    ts = np.zeros(K)
    deltas = np.zeros(K)
    sig = np.zeros(K)
    draw = np.zeros(K)
    col = np.zeros((K, 3))
    craw = np.zeros((K, 3))
    Tj = np.zeros(K)
    w = np.zeros(K)
    okv = np.zeros(K, dtype=np.bool_)
    up1 = np.zeros(1)
    up3 = np.zeros(3)
    for r in range(R):
        span = t1[r] - t0[r]
        if not span > 0.0:
            continue
        T = 1.0
        ws = 0.0
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for j in range(K):
            tj = t0[r] + (j + jit[r, j]) * span / K
            ts[j] = tj
        for j in range(K):
            tnext = t1[r] if j + 1 >= K else ts[j + 1]
            deltas[j] = max(tnext - ts[j], 0.0)
            px = ro[r, 0] + ts[j] * rd[r, 0]
            py = ro[r, 1] + ts[j] * rd[r, 1]
            pz = ro[r, 2] + ts[j] * rd[r, 2]
            ok = _gather_one(dg, origin, h, px, py, pz, dbuf)
            _gather_one(cgrid, origin, h, px, py, pz, cbuf)
            okv[j] = ok
            draw[j] = dbuf[0]
            s = _softplus1(dbuf[0])
            if not ok:
                s = 0.0
            sig[j] = s
            for c in range(3):
                craw[j, c] = cbuf[c]
                col[j, c] = _sigmoid1(cbuf[c])
            alpha = 1.0 - np.exp(-s * deltas[j])
            Tj[j] = T
            w[j] = T * alpha
            ws += w[j]
            a0 += w[j] * col[j, 0]
            a1 += w[j] * col[j, 1]
            a2 += w[j] * col[j, 2]
            T *= 1.0 - alpha
        e0 = a0 + (1.0 - ws) * bg[0] - gt[r, 0]
        e1 = a1 + (1.0 - ws) * bg[1] - gt[r, 1]
        e2 = a2 + (1.0 - ws) * bg[2] - gt[r, 2]
        loss_sum += e0 * e0 + e1 * e1 + e2 * e2
        # suffix accumulation of D_m * w_m for the density gradient
        suffix = 0.0
        for j in range(K - 1, -1, -1):
            Dj = 2.0 * (
                e0 * (col[j, 0] - bg[0])
                + e1 * (col[j, 1] - bg[1])
                + e2 * (col[j, 2] - bg[2])
            )
            expneg = np.exp(-sig[j] * deltas[j])
            dldsig = Tj[j] * deltas[j] * expneg * Dj - deltas[j] * suffix
            suffix += Dj * w[j]
            if not okv[j]:
                continue
            px = ro[r, 0] + ts[j] * rd[r, 0]
            py = ro[r, 1] + ts[j] * rd[r, 1]
            pz = ro[r, 2] + ts[j] * rd[r, 2]
            up1[0] = dldsig * _sigmoid1(draw[j]) * gscale
            _scatter_one(gd4, origin, h, px, py, pz, up1)
            for c in range(3):
                up3[c] = 2.0 * (e0 if c == 0 else (e1 if c == 1 else e2)) * w[j]
                up3[c] *= col[j, c] * (1.0 - col[j, c]) * gscale
            _scatter_one(gc, origin, h, px, py, pz, up3)
    return loss_sum


@njit(cache=True, fastmath=False)
def fit_features(dgrid, fgrid, origin, h, ro, rd, t0, t1, jit, teacher, gf, gscale):
    R, K = jit.shape
    D = fgrid.shape[3]
    loss_sum = 0.0
    dg = dgrid.reshape(dgrid.shape[0], dgrid.shape[1], dgrid.shape[2], 1)
    dbuf = np.zeros(1)
    fbuf = np.zeros(D)
    up = np.zeros(D)
    for r in range(R):
        span = t1[r] - t0[r]
        if not span > 0.0:
            continue
        T = 1.0
        for j in range(K):
            tj = t0[r] + (j + jit[r, j]) * span / K
            tnext = t1[r] if j + 1 >= K else t0[r] + (j + 1 + jit[r, j + 1]) * span / K
            delta = max(tnext - tj, 0.0)
            px = ro[r, 0] + tj * rd[r, 0]
            py = ro[r, 1] + tj * rd[r, 1]
            pz = ro[r, 2] + tj * rd[r, 2]
            ok = _gather_one(dg, origin, h, px, py, pz, dbuf)
            s = _softplus1(dbuf[0]) if ok else 0.0
            alpha = 1.0 - np.exp(-s * delta)
            w = T * alpha
            T *= 1.0 - alpha
            if w == 0.0:
                continue
            okf = _gather_one(fgrid, origin, h, px, py, pz, fbuf)
            l1 = 0.0
            for c in range(D):
                resid = fbuf[c] - teacher[r, c]
                l1 += abs(resid)
                if resid > 0.0:
                    up[c] = w * gscale
                elif resid < 0.0:
                    up[c] = -w * gscale
                else:
                    up[c] = 0.0
            loss_sum += w * l1
            if okf:
                _scatter_one(gf, origin, h, px, py, pz, up)
    return loss_sum


@njit(cache=True, fastmath=False)
def dda_first_hit(occ, origin, h, ro, rd, t0, t1):
    R = ro.shape[0]
    idx_out = np.full((R, 3), -1, dtype=np.int64)
    t_out = np.full(R, np.inf)
    dims0, dims1, dims2 = occ.shape
    for r in range(R):
        if not t1[r] > t0[r]:
            continue
        t = t0[r] + 1e-9
        ijk = np.empty(3, dtype=np.int64)
        step = np.empty(3, dtype=np.int64)
        tmax = np.empty(3)
        tdelta = np.empty(3)
        for a in range(3):
            p = ro[r, a] + t * rd[r, a]
            v = int(np.floor((p - origin[a]) / h))
            lim = occ.shape[a] - 1
            ijk[a] = min(max(v, 0), lim)
            if rd[r, a] > 0.0:
                step[a] = 1
                tdelta[a] = h / rd[r, a]
                tmax[a] = (origin[a] + (ijk[a] + 1) * h - ro[r, a]) / rd[r, a]
            elif rd[r, a] < 0.0:
                step[a] = -1
                tdelta[a] = -h / rd[r, a]
                tmax[a] = (origin[a] + ijk[a] * h - ro[r, a]) / rd[r, a]
            else:
                step[a] = 0
                tdelta[a] = np.inf
                tmax[a] = np.inf
        t_enter = t0[r]
        while True:
            if occ[ijk[0], ijk[1], ijk[2]]:
                idx_out[r, 0] = ijk[0]
                idx_out[r, 1] = ijk[1]
                idx_out[r, 2] = ijk[2]
                t_out[r] = t_enter
                break
            ax = 0
            if tmax[1] < tmax[ax]:
                ax = 1
            if tmax[2] < tmax[ax]:
                ax = 2
            t_enter = tmax[ax]
            if t_enter > t1[r]:
                break
            ijk[ax] += step[ax]
            if ijk[ax] < 0 or (ax == 0 and ijk[ax] >= dims0) or (ax == 1 and ijk[ax] >= dims1) or (ax == 2 and ijk[ax] >= dims2):
                break
            tmax[ax] += tdelta[ax]
    return idx_out, t_out


@njit(cache=True, fastmath=False)
def conv3d_forward(x, w, b, stride):
    Cin, X, Y, Z = x.shape
    Cout = w.shape[0]
    ox = (X - 1) // stride + 1
    oy = (Y - 1) // stride + 1
    oz = (Z - 1) // stride + 1
    y = np.zeros((Cout, ox, oy, oz))
    for co in range(Cout):
        for i in range(ox):
            for j in range(oy):
                for k in range(oz):
                    acc = b[co]
                    for ci in range(Cin):
                        for kx in range(3):
                            xi = i * stride - 1 + kx
                            if xi < 0 or xi >= X:
                                continue
                            for ky in range(3):
                                yj = j * stride - 1 + ky
                                if yj < 0 or yj >= Y:
                                    continue
                                for kz in range(3):
                                    zk = k * stride - 1 + kz
                                    if zk < 0 or zk >= Z:
                                        continue
                                    acc += x[ci, xi, yj, zk] * w[co, ci, kx, ky, kz]
                    y[co, i, j, k] = acc
    return y


@njit(cache=True, fastmath=False)
def conv3d_backward(x, w, dy, stride):
    Cin, X, Y, Z = x.shape
    Cout = w.shape[0]
    ox, oy, oz = dy.shape[1], dy.shape[2], dy.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(Cout)
    for co in range(Cout):
        for i in range(ox):
            for j in range(oy):
                for k in range(oz):
                    g = dy[co, i, j, k]
                    db[co] += g
                    for ci in range(Cin):
                        for kx in range(3):
                            xi = i * stride - 1 + kx
                            if xi < 0 or xi >= X:
                                continue
                            for ky in range(3):
                                yj = j * stride - 1 + ky
                                if yj < 0 or yj >= Y:
                                    continue
                                for kz in range(3):
                                    zk = k * stride - 1 + kz
                                    if zk < 0 or zk >= Z:
                                        continue
                                    dw[co, ci, kx, ky, kz] += g * x[ci, xi, yj, zk]
                                    dx[ci, xi, yj, zk] += g * w[co, ci, kx, ky, kz]
    return dx, dw, db


@njit(cache=True, fastmath=False)
def l1_neighbors(pts, eps):
    n = pts.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = abs(pts[i, 0] - pts[j, 0]) + abs(pts[i, 1] - pts[j, 1]) + abs(pts[i, 2] - pts[j, 2])
            if d <= eps:
                counts[i] += 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        indptr[i + 1] = indptr[i] + counts[i]
    indices = np.zeros(indptr[n], dtype=np.int64)
    fill = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = abs(pts[i, 0] - pts[j, 0]) + abs(pts[i, 1] - pts[j, 1]) + abs(pts[i, 2] - pts[j, 2])
            if d <= eps:
                indices[indptr[i] + fill[i]] = j
                fill[i] += 1
    return indptr, indices

"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in _kernels_nb.py with identical
signature and semantics; tests assert agreement. This module is the
fallback backend (VOXREASON_BACKEND=numpy) and the ground truth for the
benchmark script.
"""

import numpy as np


def _softplus(x):
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _corner_data(dims, origin, h, pts):
    """Base corner index, fractions, and inside mask for trilinear ops."""
    u = (pts - origin[None, :]) / h - 0.5
    hi = origin[None, :] + np.asarray(dims)[None, :] * h
    inside = np.all((pts >= origin[None, :]) & (pts <= hi), axis=1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.asarray(dims)[None, :] - 2)
    f = np.clip(u - i0, 0.0, 1.0)
    return i0, f, inside


def _corner_weights(f):
    """(N, 8) trilinear weights, corner order: (dx, dy, dz) bits of 0..7."""
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    w = np.empty((f.shape[0], 8))
    for c in range(8):
        dx, dy, dz = (c >> 2) & 1, (c >> 1) & 1, c & 1
        w[:, c] = (
            (fx if dx else 1.0 - fx)
            * (fy if dy else 1.0 - fy)
            * (fz if dz else 1.0 - fz)
        )
    return w


def _corner_flat_indices(i0, dims):
    X, Y, Z = dims
    base = (i0[:, 0] * Y + i0[:, 1]) * Z + i0[:, 2]
    offs = np.empty(8, dtype=np.int64)
    for c in range(8):
        dx, dy, dz = (c >> 2) & 1, (c >> 1) & 1, c & 1
        offs[c] = (dx * Y + dy) * Z + dz
    return base[:, None] + offs[None, :]


def trilinear_gather(values, origin, h, pts):
    """Interpolate values (X,Y,Z,C) at pts (N,3) -> (out (N,C), inside (N,))."""
    dims = values.shape[:3]
    C = values.shape[3]
    i0, f, inside = _corner_data(dims, origin, h, pts)
    w = _corner_weights(f)
    flat = values.reshape(-1, C)
    idx = _corner_flat_indices(i0, dims)
    out = np.einsum("nc,ncv->nv", w, flat[idx])
    out[~inside] = 0.0
    return out, inside


def trilinear_scatter(grad_grid, origin, h, pts, upstream):
    """Accumulate upstream (N,C) into grad_grid (X,Y,Z,C) with trilinear weights."""
    dims = grad_grid.shape[:3]
    C = grad_grid.shape[3]
    i0, f, inside = _corner_data(dims, origin, h, pts)
    w = _corner_weights(f)
    idx = _corner_flat_indices(i0, dims)
    flat = grad_grid.reshape(-1, C)
    contrib = w[inside][:, :, None] * upstream[inside][:, None, :]
    np.add.at(flat, idx[inside].ravel(), contrib.reshape(-1, C))
    return grad_grid


def _sample_ts(t0, t1, jit):
    K = jit.shape[1]
    span = (t1 - t0)[:, None]
    ts = t0[:, None] + (np.arange(K)[None, :] + jit) * span / K
    deltas = np.empty_like(ts)
    deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
    deltas[:, -1] = t1 - ts[:, -1]
    return ts, np.maximum(deltas, 0.0)


def _nearest_gather(values, origin, h, pts):
    """Piecewise-constant (voxel) sampling; used for ground-truth grids."""
    dims = np.asarray(values.shape[:3])
    hi = origin[None, :] + dims[None, :] * h
    inside = np.all((pts >= origin[None, :]) & (pts <= hi), axis=1)
    idx = np.clip(np.floor((pts - origin[None, :]) / h).astype(np.int64), 0, dims - 1)
    out = values[idx[:, 0], idx[:, 1], idx[:, 2]]
    out[~inside] = 0.0
    return out, inside


def _gather_sigma_color(dgrid, cgrid, origin, h, pts_flat, act, sigma_scale):
    if act == 1:
        draw, inside = trilinear_gather(dgrid[..., None], origin, h, pts_flat)
        craw, _ = trilinear_gather(cgrid, origin, h, pts_flat)
        draw = draw[:, 0]
        sig = _softplus(draw)
        col = _sigmoid(craw)
    else:
        # ground truth renders sharp: nearest-voxel density and color
        draw, inside = _nearest_gather(dgrid[..., None], origin, h, pts_flat)
        craw, _ = _nearest_gather(cgrid, origin, h, pts_flat)
        draw = draw[:, 0]
        sig = np.maximum(draw, 0.0) * sigma_scale
        col = np.clip(craw, 0.0, 1.0)
    sig[~inside] = 0.0
    return sig, col, draw, craw, inside


def render_forward(dgrid, cgrid, origin, h, ro, rd, t0, t1, jit, bg, act, sigma_scale):
    """Quadrature-render a batch of rays -> (rgb (R,3), wsum (R,)).

    act=1: model grids (softplus density, logistic color).
    act=0: ground-truth grids (relu*sigma_scale density, clipped color).
    """
    R, K = jit.shape
    ts, deltas = _sample_ts(t0, t1, jit)
    pts = ro[:, None, :] + ts[:, :, None] * rd[:, None, :]
    sig, col, _, _, _ = _gather_sigma_color(
        dgrid, cgrid, origin, h, pts.reshape(-1, 3), act, sigma_scale
    )
    sig = sig.reshape(R, K)
    col = col.reshape(R, K, 3)
    bad = ~((t1 - t0) > 0)
    sig[bad] = 0.0
    sd = sig * deltas
    T = np.exp(-np.cumsum(sd, axis=1) + sd)  # T_j = exp(-sum_{m<j} sd_m)
    alpha = 1.0 - np.exp(-sd)
    w = T * alpha
    wsum = w.sum(axis=1)
    rgb = np.einsum("rk,rkc->rc", w, col) + (1.0 - wsum)[:, None] * bg[None, :]
    return rgb, wsum


def fit_photometric(dgrid, cgrid, origin, h, ro, rd, t0, t1, jit, gt, bg, gd, gc, gscale):
    """Photometric forward+backward; accumulates grads in gd/gc, returns loss sum.

    Loss per ray = sum over channels of (rgb - gt)^2; model activations fixed
    to softplus/logistic.
    """
    R, K = jit.shape
    ts, deltas = _sample_ts(t0, t1, jit)
    pts = (ro[:, None, :] + ts[:, :, None] * rd[:, None, :]).reshape(-1, 3)
    sig, col, draw, craw, inside = _gather_sigma_color(dgrid, cgrid, origin, h, pts, 1, 1.0)
    sig = sig.reshape(R, K)
    col = col.reshape(R, K, 3)
    sd = sig * deltas
    T = np.exp(-np.cumsum(sd, axis=1) + sd)
    expneg = np.exp(-sd)
    alpha = 1.0 - expneg
    w = T * alpha
    wsum = w.sum(axis=1)
    rgb = np.einsum("rk,rkc->rc", w, col) + (1.0 - wsum)[:, None] * bg[None, :]
    e = rgb - gt
    e[~((t1 - t0) > 0)] = 0.0  # rays that miss the grid carry no loss
    loss_sum = float(np.sum(e * e))

    # backward
    dldw = np.einsum("rc,rkc->rk", 2.0 * e, col - bg[None, None, :])
    dw = dldw * w
    suffix = np.cumsum(dw[:, ::-1], axis=1)[:, ::-1] - dw  # sum over m > j
    dldsig = T * deltas * expneg * dldw - deltas * suffix
    dldcol = 2.0 * e[:, None, :] * w[:, :, None]

    sig_flat = sig.reshape(-1)
    dsig_draw = _sigmoid(draw)
    dsig_draw[~inside] = 0.0
    up_d = (dldsig.reshape(-1) * dsig_draw * gscale)[:, None]
    col_flat = col.reshape(-1, 3)
    up_c = dldcol.reshape(-1, 3) * col_flat * (1.0 - col_flat) * gscale
    trilinear_scatter(gd[..., None], origin, h, pts, up_d)
    trilinear_scatter(gc, origin, h, pts, up_c)
    return loss_sum


def fit_features(dgrid, fgrid, origin, h, ro, rd, t0, t1, jit, teacher, gf, gscale):
    """Alignment-loss forward+backward over frozen density; returns loss sum.

    Per ray: sum_j w_j * ||f_j - F||_1 with w from the frozen density grid.
    Gradient accumulates into gf only.
    """
    R, K = jit.shape
    D = fgrid.shape[3]
    ts, deltas = _sample_ts(t0, t1, jit)
    pts = (ro[:, None, :] + ts[:, :, None] * rd[:, None, :]).reshape(-1, 3)
    draw, inside = trilinear_gather(dgrid[..., None], origin, h, pts)
    sig = _softplus(draw[:, 0])
    sig[~inside] = 0.0
    sig = sig.reshape(R, K)
    sd = sig * deltas
    T = np.exp(-np.cumsum(sd, axis=1) + sd)
    w = T * (1.0 - np.exp(-sd))

    feats, _ = trilinear_gather(fgrid, origin, h, pts)
    resid = feats.reshape(R, K, D) - teacher[:, None, :]
    loss_sum = float(np.sum(w * np.abs(resid).sum(axis=2)))
    up = (w[:, :, None] * np.sign(resid) * gscale).reshape(-1, D)
    trilinear_scatter(gf, origin, h, pts, up)
    return loss_sum


def dda_first_hit(occ, origin, h, ro, rd, t0, t1):
    """March rays through an occupancy grid -> (hit voxel (R,3) or -1, t_hit).

    Pure-python voxel traversal; the numba twin is the fast path.
    """
    R = ro.shape[0]
    dims = occ.shape
    idx_out = np.full((R, 3), -1, dtype=np.int64)
    t_out = np.full(R, np.inf)
    for r in range(R):
        if not t1[r] > t0[r]:
            continue
        t = t0[r] + 1e-9
        p = ro[r] + t * rd[r]
        ijk = np.floor((p - origin) / h).astype(np.int64)
        ijk = np.clip(ijk, 0, np.array(dims) - 1)
        step = np.where(rd[r] > 0, 1, -1)
        with np.errstate(divide="ignore"):
            tdelta = np.where(rd[r] != 0, h / np.abs(rd[r]), np.inf)
            nxt = origin + (ijk + (step > 0)) * h
            tmax = np.where(rd[r] != 0, (nxt - ro[r]) / rd[r], np.inf)
        t_enter = t0[r]
        while True:
            if occ[ijk[0], ijk[1], ijk[2]]:
                idx_out[r] = ijk
                t_out[r] = t_enter
                break
            ax = int(np.argmin(tmax))
            t_enter = tmax[ax]
            if t_enter > t1[r]:
                break
            ijk[ax] += step[ax]
            if ijk[ax] < 0 or ijk[ax] >= dims[ax]:
                break
            tmax[ax] += tdelta[ax]
    return idx_out, t_out


def _conv_index_grids(ox, oy, oz, stride):
    """Index grids into the padded input, shape (ox,oy,oz,3,3,3) each."""
    k = np.arange(3)
    gx = (np.arange(ox) * stride)[:, None, None, None, None, None] + k[None, None, None, :, None, None]
    gy = (np.arange(oy) * stride)[None, :, None, None, None, None] + k[None, None, None, None, :, None]
    gz = (np.arange(oz) * stride)[None, None, :, None, None, None] + k[None, None, None, None, None, :]
    b = np.broadcast_arrays(gx, gy, gz)
    return b[0], b[1], b[2]


def conv3d_forward(x, w, b, stride):
    """3D convolution, kernel 3, padding 1 -> y (Cout, OX, OY, OZ)."""
    Cin, X, Y, Z = x.shape
    Cout = w.shape[0]
    ox = (X - 1) // stride + 1
    oy = (Y - 1) // stride + 1
    oz = (Z - 1) // stride + 1
    xp = np.zeros((Cin, X + 2, Y + 2, Z + 2))
    xp[:, 1:-1, 1:-1, 1:-1] = x
    gx, gy, gz = _conv_index_grids(ox, oy, oz, stride)
    cols = xp[:, gx, gy, gz]  # (Cin, ox, oy, oz, 3, 3, 3)
    cols = cols.reshape(Cin, ox * oy * oz, 27).transpose(0, 2, 1).reshape(Cin * 27, -1)
    y = (w.reshape(Cout, -1) @ cols + b[:, None]).reshape(Cout, ox, oy, oz)
    return y


def conv3d_backward(x, w, dy, stride):
    """Gradients of conv3d_forward -> (dx, dw, db)."""
    Cin, X, Y, Z = x.shape
    Cout = w.shape[0]
    ox, oy, oz = dy.shape[1:]
    xp = np.zeros((Cin, X + 2, Y + 2, Z + 2))
    xp[:, 1:-1, 1:-1, 1:-1] = x
    dy_flat = dy.reshape(Cout, -1)
    db = dy_flat.sum(axis=1)
    gx, gy, gz = _conv_index_grids(ox, oy, oz, stride)
    cols = xp[:, gx, gy, gz].reshape(Cin, ox * oy * oz, 27).transpose(0, 2, 1).reshape(Cin * 27, -1)
    dw = (dy_flat @ cols.T).reshape(w.shape)
    dcols = (w.reshape(Cout, -1).T @ dy_flat)  # (Cin*27, P)
    dcols = dcols.reshape(Cin, 27, ox * oy * oz).transpose(0, 2, 1).reshape(Cin, ox, oy, oz, 3, 3, 3)
    dxp = np.zeros_like(xp)
    np.add.at(dxp, (slice(None), gx, gy, gz), dcols)
    dx = dxp[:, 1:-1, 1:-1, 1:-1]
    return dx, dw, db


def l1_neighbors(pts, eps):
    """Brute-force L1 neighbor lists (self excluded) -> CSR (indptr, indices)."""
    n = pts.shape[0]
    indptr = np.zeros(n + 1, dtype=np.int64)
    chunks = []
    step = max(1, int(2e7 / max(n, 1)))
    for s in range(0, n, step):
        e = min(n, s + step)
        d = np.abs(pts[s:e, None, :] - pts[None, :, :]).sum(axis=2)
        for i in range(s, e):
            row = np.nonzero(d[i - s] <= eps)[0]
            row = row[row != i]
            chunks.append(row)
            indptr[i + 1] = indptr[i] + row.size
    if chunks:
        indices = np.concatenate(chunks).astype(np.int64)
    else:
        indices = np.zeros(0, dtype=np.int64)
    return indptr, indices

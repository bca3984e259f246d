"""
Compiled per-ray marching kernels.

Each ray is processed sequentially with O(1) transient state; the backward
kernel re-marches the ray instead of storing per-sample values, using the
final color and transmittance recorded by the forward pass. Sample i of a
ray sits at distance ``(i + offset) * step`` from the origin, so sample
positions move smoothly with the ray and spacings are constant.
"""

import math

import numpy as np
from numba import njit

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2_XY = 1.0925484305920792
C2_ZZ = 0.31539156525252005
C2_XX_YY = 0.5462742152960396


@njit(cache=True)
def ray_interval(o, d, bmin, bmax):
    """Clipped [t0, t1] of the ray inside the box; t0 > t1 when it misses."""
    t0 = 0.0
    t1 = np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < bmin[a] or o[a] > bmax[a]:
                return 1.0, 0.0
        else:
            inv = 1.0 / d[a]
            ta = (bmin[a] - o[a]) * inv
            tb = (bmax[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def sample_range(t0, t1, step, offset):
    """Half-open index range [k0, k1) of lattice samples within [t0, t1]."""
    if t0 > t1:
        return 0, 0
    k0 = int(math.ceil(t0 / step - offset))
    k1 = int(math.floor(t1 / step - offset)) + 1
    # guard the rounding at both ends
    while (k0 + offset) * step < t0:
        k0 += 1
    while k1 > k0 and (k1 - 1 + offset) * step > t1:
        k1 -= 1
    if k1 < k0:
        k1 = k0
    return k0, k1


@njit(cache=True)
def _locate(x, bmin, bmax, vsize, dims, idx, frac):
    for a in range(3):
        if x[a] < bmin[a] or x[a] > bmax[a]:
            return False
    for a in range(3):
        u = (x[a] - bmin[a]) / vsize[a]
        i = int(math.floor(u))
        if i > dims[a] - 2:
            i = dims[a] - 2
        if i < 0:
            i = 0
        idx[a] = i
        frac[a] = u - i
    return True


@njit(cache=True)
def _sh_eval(d, out):
    x = d[0]
    y = d[1]
    z = d[2]
    out[0] = C0
    out[1] = C1 * y
    out[2] = C1 * z
    out[3] = C1 * x
    out[4] = C2_XY * x * y
    out[5] = C2_XY * y * z
    out[6] = C2_ZZ * (2.0 * z * z - x * x - y * y)
    out[7] = C2_XY * x * z
    out[8] = C2_XX_YY * (x * x - y * y)


@njit(cache=True)
def _sh_jacobian(d, jac):
    # jac[b, a] = d Y_b / d d_a
    x = d[0]
    y = d[1]
    z = d[2]
    jac[:, :] = 0.0
    jac[1, 1] = C1
    jac[2, 2] = C1
    jac[3, 0] = C1
    jac[4, 0] = C2_XY * y
    jac[4, 1] = C2_XY * x
    jac[5, 1] = C2_XY * z
    jac[5, 2] = C2_XY * y
    jac[6, 0] = -2.0 * C2_ZZ * x
    jac[6, 1] = -2.0 * C2_ZZ * y
    jac[6, 2] = 4.0 * C2_ZZ * z
    jac[7, 0] = C2_XY * z
    jac[7, 2] = C2_XY * x
    jac[8, 0] = 2.0 * C2_XX_YY * x
    jac[8, 1] = -2.0 * C2_XX_YY * y


@njit(cache=True)
def _corner_weights(frac, w, dw, vsize):
    # corner c = 4*dx + 2*dy + dz; dw[c, a] = d w_c / d x_a
    for c in range(8):
        ox = (c >> 2) & 1
        oy = (c >> 1) & 1
        oz = c & 1
        wx = frac[0] if ox == 1 else 1.0 - frac[0]
        wy = frac[1] if oy == 1 else 1.0 - frac[1]
        wz = frac[2] if oz == 1 else 1.0 - frac[2]
        sx = 1.0 if ox == 1 else -1.0
        sy = 1.0 if oy == 1 else -1.0
        sz = 1.0 if oz == 1 else -1.0
        w[c] = wx * wy * wz
        dw[c, 0] = sx * wy * wz / vsize[0]
        dw[c, 1] = wx * sy * wz / vsize[1]
        dw[c, 2] = wx * wy * sz / vsize[2]


@njit(cache=True)
def render_forward(density, sh, occ, bmin, bmax, vsize, origins, dirs, offsets,
                   step, term_thresh, bg, out_rgb, out_t, out_n, out_sparse, out_w):
    nx, ny, nz = density.shape
    dims = np.array([nx, ny, nz])
    idx = np.zeros(3, np.int64)
    frac = np.zeros(3)
    w = np.zeros(8)
    dw = np.zeros((8, 3))
    basis = np.zeros(9)
    x = np.zeros(3)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        _sh_eval(d, basis)
        t0, t1 = ray_interval(o, d, bmin, bmax)
        k0, k1 = sample_range(t0, t1, step, offsets[r])
        trans = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        n = 0
        sparse = 0.0
        for k in range(k0, k1):
            s = (k + offsets[r]) * step
            for a in range(3):
                x[a] = o[a] + s * d[a]
            if not _locate(x, bmin, bmax, vsize, dims, idx, frac):
                continue
            _corner_weights(frac, w, dw, vsize)
            raw = 0.0
            live = False
            for c in range(8):
                i = idx[0] + ((c >> 2) & 1)
                j = idx[1] + ((c >> 1) & 1)
                l = idx[2] + (c & 1)
                if occ[i, j, l]:
                    live = True
                    raw += w[c] * density[i, j, l]
            if not live:
                continue
            n += 1
            sigma = raw if raw > 0.0 else 0.0
            sparse += math.log(1.0 + 2.0 * sigma * sigma)
            if sigma == 0.0:
                if n <= out_w.shape[1]:
                    out_w[r, n - 1] = 0.0
                continue
            col0 = 0.5
            col1 = 0.5
            col2 = 0.5
            for c in range(8):
                i = idx[0] + ((c >> 2) & 1)
                j = idx[1] + ((c >> 1) & 1)
                l = idx[2] + (c & 1)
                wc = w[c]
                for b in range(9):
                    yb = wc * basis[b]
                    col0 += yb * sh[i, j, l, b]
                    col1 += yb * sh[i, j, l, 9 + b]
                    col2 += yb * sh[i, j, l, 18 + b]
            col0 = min(max(col0, 0.0), 1.0)
            col1 = min(max(col1, 0.0), 1.0)
            col2 = min(max(col2, 0.0), 1.0)
            att = math.exp(-sigma * step)
            weight = trans * (1.0 - att)
            if n <= out_w.shape[1]:
                out_w[r, n - 1] = weight
            cr += weight * col0
            cg += weight * col1
            cb += weight * col2
            trans *= att
            if trans < term_thresh:
                break
        out_rgb[r, 0] = cr + trans * bg[0]
        out_rgb[r, 1] = cg + trans * bg[1]
        out_rgb[r, 2] = cb + trans * bg[2]
        out_t[r] = trans
        out_n[r] = n
        out_sparse[r] = sparse


@njit(cache=True)
def render_backward(density, sh, occ, bmin, bmax, vsize, origins, dirs, offsets,
                    step, term_thresh, rgb, grad_rgb, sparse_coef, want_pose,
                    g_density, g_sh, g_origin, g_dir):
    nx, ny, nz = density.shape
    dims = np.array([nx, ny, nz])
    idx = np.zeros(3, np.int64)
    frac = np.zeros(3)
    w = np.zeros(8)
    dw = np.zeros((8, 3))
    basis = np.zeros(9)
    sh_jac = np.zeros((9, 3))
    x = np.zeros(3)
    shi = np.zeros(27)
    col = np.zeros(3)
    gcol = np.zeros(3)
    acc_basis = np.zeros(9)
    for r in range(origins.shape[0]):
        gr0 = grad_rgb[r, 0]
        gr1 = grad_rgb[r, 1]
        gr2 = grad_rgb[r, 2]
        if gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0 and sparse_coef == 0.0:
            continue
        o = origins[r]
        d = dirs[r]
        _sh_eval(d, basis)
        t0, t1 = ray_interval(o, d, bmin, bmax)
        k0, k1 = sample_range(t0, t1, step, offsets[r])
        trans = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        go0 = 0.0
        go1 = 0.0
        go2 = 0.0
        gd0 = 0.0
        gd1 = 0.0
        gd2 = 0.0
        acc_basis[:] = 0.0
        for k in range(k0, k1):
            s = (k + offsets[r]) * step
            for a in range(3):
                x[a] = o[a] + s * d[a]
            if not _locate(x, bmin, bmax, vsize, dims, idx, frac):
                continue
            _corner_weights(frac, w, dw, vsize)
            raw = 0.0
            live = False
            for c in range(8):
                i = idx[0] + ((c >> 2) & 1)
                j = idx[1] + ((c >> 1) & 1)
                l = idx[2] + (c & 1)
                if occ[i, j, l]:
                    live = True
                    raw += w[c] * density[i, j, l]
            if not live:
                continue
            sigma = raw if raw > 0.0 else 0.0
            g_sigma = sparse_coef * 4.0 * sigma / (1.0 + 2.0 * sigma * sigma)
            if sigma > 0.0:
                shi[:] = 0.0
                for c in range(8):
                    i = idx[0] + ((c >> 2) & 1)
                    j = idx[1] + ((c >> 1) & 1)
                    l = idx[2] + (c & 1)
                    wc = w[c]
                    for q in range(27):
                        shi[q] += wc * sh[i, j, l, q]
                for ch in range(3):
                    v = 0.5
                    for b in range(9):
                        v += basis[b] * shi[ch * 9 + b]
                    col[ch] = min(max(v, 0.0), 1.0)
                    # clamp passes gradient only strictly inside (0, 1)
                    gcol[ch] = 1.0 if (v > 0.0 and v < 1.0) else 0.0
                att = math.exp(-sigma * step)
                weight = trans * (1.0 - att)
                t_next = trans * att
                acc0 += weight * col[0]
                acc1 += weight * col[1]
                acc2 += weight * col[2]
                g_sigma += step * (gr0 * (t_next * col[0] - (rgb[r, 0] - acc0))
                                   + gr1 * (t_next * col[1] - (rgb[r, 1] - acc1))
                                   + gr2 * (t_next * col[2] - (rgb[r, 2] - acc2)))
                gcol[0] *= gr0 * weight
                gcol[1] *= gr1 * weight
                gcol[2] *= gr2 * weight
            else:
                att = 1.0
                t_next = trans
                gcol[0] = 0.0
                gcol[1] = 0.0
                gcol[2] = 0.0
            g_raw = g_sigma if raw > 0.0 else 0.0
            for c in range(8):
                i = idx[0] + ((c >> 2) & 1)
                j = idx[1] + ((c >> 1) & 1)
                l = idx[2] + (c & 1)
                wc = w[c]
                if occ[i, j, l]:
                    g_density[i, j, l] += wc * g_raw
                for ch in range(3):
                    if gcol[ch] != 0.0:
                        gw = wc * gcol[ch]
                        for b in range(9):
                            g_sh[i, j, l, ch * 9 + b] += gw * basis[b]
            if want_pose:
                gx0 = 0.0
                gx1 = 0.0
                gx2 = 0.0
                for c in range(8):
                    i = idx[0] + ((c >> 2) & 1)
                    j = idx[1] + ((c >> 1) & 1)
                    l = idx[2] + (c & 1)
                    qc = 0.0
                    if occ[i, j, l]:
                        qc = g_raw * density[i, j, l]
                    for ch in range(3):
                        if gcol[ch] != 0.0:
                            dot = 0.0
                            for b in range(9):
                                dot += basis[b] * sh[i, j, l, ch * 9 + b]
                            qc += gcol[ch] * dot
                    gx0 += dw[c, 0] * qc
                    gx1 += dw[c, 1] * qc
                    gx2 += dw[c, 2] * qc
                go0 += gx0
                go1 += gx1
                go2 += gx2
                gd0 += s * gx0
                gd1 += s * gx1
                gd2 += s * gx2
                for ch in range(3):
                    if gcol[ch] != 0.0:
                        for b in range(9):
                            acc_basis[b] += gcol[ch] * shi[ch * 9 + b]
            trans = t_next
            if trans < term_thresh:
                break
        if want_pose:
            _sh_jacobian(d, sh_jac)
            for a in range(3):
                extra = 0.0
                for b in range(9):
                    extra += acc_basis[b] * sh_jac[b, a]
                if a == 0:
                    gd0 += extra
                elif a == 1:
                    gd1 += extra
                else:
                    gd2 += extra
            g_origin[r, 0] = go0
            g_origin[r, 1] = go1
            g_origin[r, 2] = go2
            g_dir[r, 0] = gd0
            g_dir[r, 1] = gd1
            g_dir[r, 2] = gd2

"""Sequential numba kernels behind the renderer, regularizers, and optimizer.

Everything here is deterministic: batches are processed in a fixed order on a
single thread, so repeated runs give bit-identical results. Data tables are
float64 (rows, 28) with opacity in column 0 and the 27 SH coefficients in
columns 1..27 (channel-major, see sh.py). `links` is the dense int32 lattice
of row pointers, -1 meaning empty.

Sampling convention: lattice point (i, j, k) sits at
aabb_min + (i, j, k) * extent / (dims - 1); a ray is clipped to the AABB and
sampled at uniform spacing `step` starting at the entry point, the last
interval shortened so the intervals exactly tile the chord.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .sh import SH_C0, SH_C1, SH_C2_0, SH_C2_2, SH_C2_4

EMPTY = -1


@njit(cache=True, inline="always")
def _sh_basis9(x, y, z, out):
    out[0] = SH_C0
    out[1] = -SH_C1 * y
    out[2] = SH_C1 * z
    out[3] = -SH_C1 * x
    out[4] = SH_C2_0 * x * y
    out[5] = -SH_C2_0 * y * z
    out[6] = SH_C2_2 * (2.0 * z * z - x * x - y * y)
    out[7] = -SH_C2_0 * x * z
    out[8] = SH_C2_4 * (x * x - y * y)


@njit(cache=True, inline="always")
def _ray_aabb(ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz):
    """Clip a ray to the AABB; returns (t0, t1) with t0 >= 0. Miss iff t1 <= t0."""
    t0 = 0.0
    t1 = math.inf
    if abs(dx) < 1e-15:
        if ox < lx or ox > hx:
            return 1.0, 0.0
    else:
        ta = (lx - ox) / dx
        tb = (hx - ox) / dx
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if abs(dy) < 1e-15:
        if oy < ly or oy > hy:
            return 1.0, 0.0
    else:
        ta = (ly - oy) / dy
        tb = (hy - oy) / dy
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if abs(dz) < 1e-15:
        if oz < lz or oz > hz:
            return 1.0, 0.0
    else:
        ta = (lz - oz) / dz
        tb = (hz - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return t0, t1


@njit(cache=True, inline="always")
def _stencil(gx, gy, gz, links, nearest, rows, ws):
    """Fill interpolation stencil (row ids + weights) at lattice coords g."""
    Dx, Dy, Dz = links.shape
    if nearest:
        i = int(gx + 0.5)
        j = int(gy + 0.5)
        k = int(gz + 0.5)
        if i > Dx - 1:
            i = Dx - 1
        if j > Dy - 1:
            j = Dy - 1
        if k > Dz - 1:
            k = Dz - 1
        rows[0] = links[i, j, k]
        ws[0] = 1.0
        return 1
    i0 = int(gx)
    j0 = int(gy)
    k0 = int(gz)
    if i0 > Dx - 2:
        i0 = Dx - 2
    if j0 > Dy - 2:
        j0 = Dy - 2
    if k0 > Dz - 2:
        k0 = Dz - 2
    fx = gx - i0
    fy = gy - j0
    fz = gz - k0
    n = 0
    for di in range(2):
        wx = fx if di == 1 else 1.0 - fx
        for dj in range(2):
            wy = fy if dj == 1 else 1.0 - fy
            for dk in range(2):
                wz = fz if dk == 1 else 1.0 - fz
                rows[n] = links[i0 + di, j0 + dj, k0 + dk]
                ws[n] = wx * wy * wz
                n += 1
    return 8


@njit(cache=True, inline="always")
def _sigma_at(table, rows, ws, n):
    s = 0.0
    occ = False
    for q in range(n):
        r = rows[q]
        if r >= 0:
            occ = True
            s += ws[q] * table[r, 0]
    return s, occ


@njit(cache=True, inline="always")
def _color_at(table, rows, ws, n, basis, out3):
    out3[0] = 0.0
    out3[1] = 0.0
    out3[2] = 0.0
    for q in range(n):
        r = rows[q]
        if r >= 0:
            w = ws[q]
            for ch in range(3):
                acc = 0.0
                base = 1 + 9 * ch
                for b in range(9):
                    acc += basis[b] * table[r, base + b]
                out3[ch] += w * acc


@njit(cache=True, inline="always")
def _touch(row, tmask, tids, tcnt):
    if tmask[row] == 0:
        tmask[row] = 1
        tids[tcnt[0]] = row
        tcnt[0] += 1


@njit(cache=True, inline="always")
def _clamp_coord(p, lo, scale, dmax):
    g = (p - lo) * scale
    if g < 0.0:
        g = 0.0
    if g > dmax:
        g = dmax
    return g


@njit(cache=True)
def render_forward(links, table, lo, hi, scale, dmax, step,
                   origins, dirs, viewdirs, bg, stop_thresh,
                   nearest, absolute, jitter_t,
                   out_rgb, out_trans, out_wsum):
    """Batch forward render. `absolute` selects the clipped-alpha-sum formula
    instead of the default relative-transmittance compositing."""
    nray = origins.shape[0]
    rows = np.empty(8, np.int64)
    ws = np.empty(8, np.float64)
    basis = np.empty(9, np.float64)
    col = np.empty(3, np.float64)
    for ri in range(nray):
        ox, oy, oz = origins[ri, 0], origins[ri, 1], origins[ri, 2]
        dx, dy, dz = dirs[ri, 0], dirs[ri, 1], dirs[ri, 2]
        _sh_basis9(viewdirs[ri, 0], viewdirs[ri, 1], viewdirs[ri, 2], basis)
        t0, t1 = _ray_aabb(ox, oy, oz, dx, dy, dz,
                           lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        cr = 0.0
        cg = 0.0
        cb = 0.0
        T = 1.0
        asum = 0.0
        wsum = 0.0
        t0 = t0 + jitter_t[ri] * step
        L = t1 - t0
        if L > 0.0:
            nsamp = int(math.ceil(L / step - 1e-9))
            if nsamp < 1:
                nsamp = 1
            for si in range(nsamp):
                t = t0 + si * step
                dlt = step if si < nsamp - 1 else L - step * (nsamp - 1)
                gx = _clamp_coord(ox + t * dx, lo[0], scale[0], dmax[0])
                gy = _clamp_coord(oy + t * dy, lo[1], scale[1], dmax[1])
                gz = _clamp_coord(oz + t * dz, lo[2], scale[2], dmax[2])
                n = _stencil(gx, gy, gz, links, nearest, rows, ws)
                sig, occ = _sigma_at(table, rows, ws, n)
                if not occ or sig <= 0.0:
                    continue
                att = math.exp(-sig * dlt)
                if absolute:
                    Tn = 1.0 - (asum + (1.0 - att))
                    if Tn < 0.0:
                        Tn = 0.0
                    w = T - Tn
                    asum += 1.0 - att
                else:
                    Tn = T * att
                    w = T - Tn
                _color_at(table, rows, ws, n, basis, col)
                if col[0] > 0.0:
                    cr += w * col[0]
                if col[1] > 0.0:
                    cg += w * col[1]
                if col[2] > 0.0:
                    cb += w * col[2]
                wsum += w
                T = Tn
                if T < stop_thresh:
                    break
        out_rgb[ri, 0] = cr + T * bg[0]
        out_rgb[ri, 1] = cg + T * bg[1]
        out_rgb[ri, 2] = cb + T * bg[2]
        out_trans[ri] = T
        out_wsum[ri] = wsum


@njit(cache=True)
def render_backward(links, table, lo, hi, scale, dmax, step,
                    origins, dirs, viewdirs, bg, stop_thresh,
                    nearest, absolute, jitter_t,
                    target, mse_mode, up_scale, lam_cauchy,
                    grad, tmask, tids, tcnt,
                    out_rgb,
                    s_t, s_dlt, s_sig, s_T, s_w, s_cpre):
    """Fused forward + analytic reverse pass for a ray batch.

    With mse_mode, `target` holds ground-truth colors and the upstream
    derivative per ray is up_scale * (render - target); otherwise `target`
    is interpreted as the upstream derivative itself. Gradients are scattered
    into `grad` (rows touched are tracked via tmask/tids/tcnt). Cauchy
    sparsity gradients (lam_cauchy * 4 s / (1 + 2 s^2) per sample opacity)
    are folded in when lam_cauchy > 0.

    Returns (sum of squared color errors, raw cauchy sum).
    """
    nray = origins.shape[0]
    rows = np.empty(8, np.int64)
    ws = np.empty(8, np.float64)
    basis = np.empty(9, np.float64)
    col = np.empty(3, np.float64)
    mse_sum = 0.0
    cauchy_sum = 0.0
    for ri in range(nray):
        ox, oy, oz = origins[ri, 0], origins[ri, 1], origins[ri, 2]
        dx, dy, dz = dirs[ri, 0], dirs[ri, 1], dirs[ri, 2]
        _sh_basis9(viewdirs[ri, 0], viewdirs[ri, 1], viewdirs[ri, 2], basis)
        t0, t1 = _ray_aabb(ox, oy, oz, dx, dy, dz,
                           lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        cr = 0.0
        cg = 0.0
        cb = 0.0
        T = 1.0
        asum = 0.0
        m = 0
        t0 = t0 + jitter_t[ri] * step
        L = t1 - t0
        if L > 0.0:
            nsamp = int(math.ceil(L / step - 1e-9))
            if nsamp < 1:
                nsamp = 1
            for si in range(nsamp):
                t = t0 + si * step
                dlt = step if si < nsamp - 1 else L - step * (nsamp - 1)
                gx = _clamp_coord(ox + t * dx, lo[0], scale[0], dmax[0])
                gy = _clamp_coord(oy + t * dy, lo[1], scale[1], dmax[1])
                gz = _clamp_coord(oz + t * dz, lo[2], scale[2], dmax[2])
                n = _stencil(gx, gy, gz, links, nearest, rows, ws)
                sig, occ = _sigma_at(table, rows, ws, n)
                if not occ or sig < 0.0:
                    continue
                att = math.exp(-sig * dlt)
                if absolute:
                    Tn = 1.0 - (asum + (1.0 - att))
                    if Tn < 0.0:
                        Tn = 0.0
                    w = T - Tn
                    asum += 1.0 - att
                else:
                    Tn = T * att
                    w = T - Tn
                _color_at(table, rows, ws, n, basis, col)
                if col[0] > 0.0:
                    cr += w * col[0]
                if col[1] > 0.0:
                    cg += w * col[1]
                if col[2] > 0.0:
                    cb += w * col[2]
                s_t[m] = t
                s_dlt[m] = dlt
                s_sig[m] = sig
                s_T[m] = T
                s_w[m] = w
                s_cpre[m, 0] = col[0]
                s_cpre[m, 1] = col[1]
                s_cpre[m, 2] = col[2]
                m += 1
                T = Tn
                if T < stop_thresh:
                    break
        rr_ = cr + T * bg[0]
        rg_ = cg + T * bg[1]
        rb_ = cb + T * bg[2]
        out_rgb[ri, 0] = rr_
        out_rgb[ri, 1] = rg_
        out_rgb[ri, 2] = rb_
        if mse_mode:
            er = rr_ - target[ri, 0]
            eg = rg_ - target[ri, 1]
            eb = rb_ - target[ri, 2]
            mse_sum += er * er + eg * eg + eb * eb
            upr = up_scale * er
            upg = up_scale * eg
            upb = up_scale * eb
        else:
            upr = target[ri, 0]
            upg = target[ri, 1]
            upb = target[ri, 2]

        # Reverse sweep: suffix accumulators turn the per-sample opacity
        # derivative into O(1) work per sample.
        if absolute:
            bend = 1.0 if T > 0.0 else 0.0
            sfr = -bg[0] * bend
            sfg = -bg[1] * bend
            sfb = -bg[2] * bend
        else:
            sfr = T * bg[0]
            sfg = T * bg[1]
            sfb = T * bg[2]
        for idx in range(m - 1, -1, -1):
            sig = s_sig[idx]
            dlt = s_dlt[idx]
            Ti = s_T[idx]
            w = s_w[idx]
            c0 = s_cpre[idx, 0]
            c1 = s_cpre[idx, 1]
            c2 = s_cpre[idx, 2]
            ccr = c0 if c0 > 0.0 else 0.0
            ccg = c1 if c1 > 0.0 else 0.0
            ccb = c2 if c2 > 0.0 else 0.0
            att = math.exp(-sig * dlt)
            if absolute:
                Tn = Ti - w
                bn = 1.0 if Tn > 0.0 else 0.0
                bi = 1.0 if Ti > 0.0 else 0.0
                galpha = (upr * (ccr * bn + sfr)
                          + upg * (ccg * bn + sfg)
                          + upb * (ccb * bn + sfb))
                gsig = galpha * dlt * att
                sfr += ccr * (bn - bi)
                sfg += ccg * (bn - bi)
                sfb += ccb * (bn - bi)
            else:
                gsig = dlt * (upr * (Ti * att * ccr - sfr)
                              + upg * (Ti * att * ccg - sfg)
                              + upb * (Ti * att * ccb - sfb))
                sfr += w * ccr
                sfg += w * ccg
                sfb += w * ccb
            if lam_cauchy > 0.0:
                cauchy_sum += math.log(1.0 + 2.0 * sig * sig)
                gsig += lam_cauchy * 4.0 * sig / (1.0 + 2.0 * sig * sig)
            gcr = upr * w if c0 > 0.0 else 0.0
            gcg = upg * w if c1 > 0.0 else 0.0
            gcb = upb * w if c2 > 0.0 else 0.0
            t = s_t[idx]
            gx = _clamp_coord(ox + t * dx, lo[0], scale[0], dmax[0])
            gy = _clamp_coord(oy + t * dy, lo[1], scale[1], dmax[1])
            gz = _clamp_coord(oz + t * dz, lo[2], scale[2], dmax[2])
            n = _stencil(gx, gy, gz, links, nearest, rows, ws)
            for q in range(n):
                rw = rows[q]
                if rw < 0:
                    continue
                wq = ws[q]
                _touch(rw, tmask, tids, tcnt)
                grad[rw, 0] += wq * gsig
                if gcr != 0.0:
                    for b in range(9):
                        grad[rw, 1 + b] += wq * gcr * basis[b]
                if gcg != 0.0:
                    for b in range(9):
                        grad[rw, 10 + b] += wq * gcg * basis[b]
                if gcb != 0.0:
                    for b in range(9):
                        grad[rw, 19 + b] += wq * gcb * basis[b]
    return mse_sum, cauchy_sum


@njit(cache=True)
def max_weight_accum(links, table, lo, hi, scale, dmax, step,
                     origins, dirs, stop_thresh, nearest, out_w):
    """Track, per data row, the maximum sample weight T*(1-exp(-sig*dlt))
    over all rays; each sample attributes its weight to every row in its
    interpolation stencil."""
    nray = origins.shape[0]
    rows = np.empty(8, np.int64)
    ws = np.empty(8, np.float64)
    for ri in range(nray):
        ox, oy, oz = origins[ri, 0], origins[ri, 1], origins[ri, 2]
        dx, dy, dz = dirs[ri, 0], dirs[ri, 1], dirs[ri, 2]
        t0, t1 = _ray_aabb(ox, oy, oz, dx, dy, dz,
                           lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        L = t1 - t0
        if L <= 0.0:
            continue
        T = 1.0
        nsamp = int(math.ceil(L / step - 1e-9))
        if nsamp < 1:
            nsamp = 1
        for si in range(nsamp):
            t = t0 + si * step
            dlt = step if si < nsamp - 1 else L - step * (nsamp - 1)
            gx = _clamp_coord(ox + t * dx, lo[0], scale[0], dmax[0])
            gy = _clamp_coord(oy + t * dy, lo[1], scale[1], dmax[1])
            gz = _clamp_coord(oz + t * dz, lo[2], scale[2], dmax[2])
            n = _stencil(gx, gy, gz, links, nearest, rows, ws)
            sig, occ = _sigma_at(table, rows, ws, n)
            if not occ or sig <= 0.0:
                continue
            att = math.exp(-sig * dlt)
            w = T * (1.0 - att)
            for q in range(n):
                r = rows[q]
                if r >= 0 and w > out_w[r]:
                    out_w[r] = w
            T *= att
            if T < stop_thresh:
                break


@njit(cache=True)
def tv_grid(links, table, cells, fac_x, fac_y, fac_z, eps,
            f_sigma, f_sh, wrap_x, wrap_y, wrap_z,
            grad, tmask, tids, tcnt, with_grad):
    """Total variation over +1 neighbor differences at the selected cells.

    fac_* is the per-axis resolution normalization (D_axis / 256) applied to
    each difference. Opacity treats missing neighbors (empty or off-lattice)
    as value 0; SH channels treat them as equal-valued (zero difference).
    f_sigma / f_sh are gradient prefactors (lambda / n_cells). Returns the
    raw, unweighted (sigma_sum, sh_sum).
    """
    Dx, Dy, Dz = links.shape
    sig_sum = 0.0
    sh_sum = 0.0
    e2 = eps * eps
    for ci in range(cells.shape[0]):
        cid = cells[ci]
        i = cid // (Dy * Dz)
        rem = cid % (Dy * Dz)
        j = rem // Dz
        k = rem % Dz
        r0 = links[i, j, k]

        ii = i + 1
        hx = True
        if ii >= Dx:
            if wrap_x:
                ii = 0
            else:
                hx = False
        jj = j + 1
        hy = True
        if jj >= Dy:
            if wrap_y:
                jj = 0
            else:
                hy = False
        kk = k + 1
        hz = True
        if kk >= Dz:
            if wrap_z:
                kk = 0
            else:
                hz = False
        rx = links[ii, j, k] if hx else -1
        ry = links[i, jj, k] if hy else -1
        rz = links[i, j, kk] if hz else -1

        # opacity: empty / off-lattice values read as 0
        s0 = table[r0, 0] if r0 >= 0 else 0.0
        sx = table[rx, 0] if rx >= 0 else 0.0
        sy = table[ry, 0] if ry >= 0 else 0.0
        sz = table[rz, 0] if rz >= 0 else 0.0
        dxv = (sx - s0) * fac_x
        dyv = (sy - s0) * fac_y
        dzv = (sz - s0) * fac_z
        val = math.sqrt(dxv * dxv + dyv * dyv + dzv * dzv + e2)
        sig_sum += val
        if with_grad and val > 0.0:
            inv = f_sigma / val
            g0 = 0.0
            if rx >= 0:
                _touch(rx, tmask, tids, tcnt)
                grad[rx, 0] += dxv * fac_x * inv
            g0 -= dxv * fac_x * inv
            if ry >= 0:
                _touch(ry, tmask, tids, tcnt)
                grad[ry, 0] += dyv * fac_y * inv
            g0 -= dyv * fac_y * inv
            if rz >= 0:
                _touch(rz, tmask, tids, tcnt)
                grad[rz, 0] += dzv * fac_z * inv
            g0 -= dzv * fac_z * inv
            if r0 >= 0 and g0 != 0.0:
                _touch(r0, tmask, tids, tcnt)
                grad[r0, 0] += g0

        # SH: differences only between pairs of occupied cells
        if r0 >= 0:
            okx = rx >= 0
            oky = ry >= 0
            okz = rz >= 0
            if okx or oky or okz:
                for d in range(1, 28):
                    v0 = table[r0, d]
                    ax = (table[rx, d] - v0) * fac_x if okx else 0.0
                    ay = (table[ry, d] - v0) * fac_y if oky else 0.0
                    az = (table[rz, d] - v0) * fac_z if okz else 0.0
                    val = math.sqrt(ax * ax + ay * ay + az * az + e2)
                    sh_sum += val
                    if with_grad and val > 0.0:
                        inv = f_sh / val
                        g0 = 0.0
                        if okx:
                            _touch(rx, tmask, tids, tcnt)
                            grad[rx, d] += ax * fac_x * inv
                            g0 -= ax * fac_x * inv
                        if oky:
                            _touch(ry, tmask, tids, tcnt)
                            grad[ry, d] += ay * fac_y * inv
                            g0 -= ay * fac_y * inv
                        if okz:
                            _touch(rz, tmask, tids, tcnt)
                            grad[rz, d] += az * fac_z * inv
                            g0 -= az * fac_z * inv
                        if g0 != 0.0:
                            _touch(r0, tmask, tids, tcnt)
                            grad[r0, d] += g0
            else:
                sh_sum += 27.0 * eps
        else:
            sh_sum += 27.0 * eps
    return sig_sum, sh_sum


@njit(cache=True)
def opt_step(table, v, grad, tids, nt, lr_first, lr_rest, beta, eps, rmsprop):
    """Sparse optimizer update over the touched rows. Column 0 uses lr_first
    (opacity), all other columns lr_rest. Entries with zero gradient keep
    stale second-moment state."""
    ncol = table.shape[1]
    for q in range(nt):
        r = tids[q]
        for c in range(ncol):
            g = grad[r, c]
            if g == 0.0:
                continue
            lr = lr_first if c == 0 else lr_rest
            if rmsprop:
                nv = beta * v[r, c] + (1.0 - beta) * g * g
                v[r, c] = nv
                table[r, c] -= lr * g / (math.sqrt(nv) + eps)
            else:
                table[r, c] -= lr * g


@njit(cache=True)
def clear_grad(grad, tmask, tids, tcnt):
    for q in range(tcnt[0]):
        r = tids[q]
        tmask[r] = 0
        for c in range(grad.shape[1]):
            grad[r, c] = 0.0
    tcnt[0] = 0


# ---------------------------------------------------------------------------
# Multi-sphere background (equirectangular layers over inverse radius)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _bg_stencil(bgdata, px, py, pz, idx4, w4):
    """Bilinear stencil within one layer at the sphere angles of p.

    Texels sit at half-texel centers; phi wraps, theta clamps at the poles.
    idx4 receives flat (theta_row * W + phi_col) texel ids.
    """
    H = bgdata.shape[1]
    W = bgdata.shape[2]
    r = math.sqrt(px * px + py * py + pz * pz)
    phi = math.atan2(py, px)
    ct = pz / r
    if ct > 1.0:
        ct = 1.0
    if ct < -1.0:
        ct = -1.0
    theta = math.acos(ct)
    u = (phi + math.pi) / (2.0 * math.pi) * W - 0.5
    u = u - math.floor(u / W) * W
    vv = theta / math.pi * H - 0.5
    if vv < 0.0:
        vv = 0.0
    if vv > H - 1.0:
        vv = H - 1.0
    i0 = int(u)
    if i0 > W - 1:
        i0 = W - 1
    fu = u - i0
    i1 = i0 + 1
    if i1 >= W:
        i1 = 0
    j0 = int(vv)
    if j0 > H - 2:
        j0 = H - 2
    fv = vv - j0
    idx4[0] = j0 * W + i0
    idx4[1] = j0 * W + i1
    idx4[2] = (j0 + 1) * W + i0
    idx4[3] = (j0 + 1) * W + i1
    w4[0] = (1.0 - fu) * (1.0 - fv)
    w4[1] = fu * (1.0 - fv)
    w4[2] = (1.0 - fu) * fv
    w4[3] = fu * fv


@njit(cache=True, inline="always")
def _bg_fetch(bgdata, layer, idx4, w4, out4):
    W = bgdata.shape[2]
    for c in range(4):
        out4[c] = 0.0
    for q in range(4):
        j = idx4[q] // W
        i = idx4[q] % W
        w = w4[q]
        for c in range(4):
            out4[c] += w * bgdata[layer, j, i, c]


@njit(cache=True)
def render_backward_360(links, table, lo, hi, scale, dmax, step,
                        bgdata, radii,
                        origins, dirs, stop_thresh, nearest,
                        target, mse_mode, up_scale,
                        lam_cauchy, lam_beta, beta_eps,
                        grad, tmask, tids, tcnt,
                        bg_grad, bg_tmask, bg_tids, bg_tcnt,
                        out_rgb, out_tfg, out_trans,
                        s_t, s_dlt, s_sig, s_T, s_w, s_cpre, s_layer,
                        with_grad):
    """Foreground grid + sphere-layer background composite, forward and
    (optionally) backward. The background is sampled once per layer crossing
    beyond the foreground exit; the final residual composites over black.

    Returns (mse_sum, raw cauchy sum over foreground samples, raw beta sum).
    """
    nray = origins.shape[0]
    nlayer = bgdata.shape[0]
    rows = np.empty(8, np.int64)
    ws = np.empty(8, np.float64)
    basis = np.empty(9, np.float64)
    col = np.empty(3, np.float64)
    idx4 = np.empty(4, np.int64)
    w4 = np.empty(4, np.float64)
    out4 = np.empty(4, np.float64)
    xs_t = np.empty(nlayer, np.float64)
    xs_l = np.empty(nlayer, np.int64)
    mse_sum = 0.0
    cauchy_sum = 0.0
    beta_sum = 0.0
    for ri in range(nray):
        ox, oy, oz = origins[ri, 0], origins[ri, 1], origins[ri, 2]
        dx, dy, dz = dirs[ri, 0], dirs[ri, 1], dirs[ri, 2]
        _sh_basis9(dx, dy, dz, basis)
        t0, t1 = _ray_aabb(ox, oy, oz, dx, dy, dz,
                           lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        cr = 0.0
        cg = 0.0
        cb = 0.0
        T = 1.0
        m = 0
        # foreground
        L = t1 - t0
        if L > 0.0:
            nsamp = int(math.ceil(L / step - 1e-9))
            if nsamp < 1:
                nsamp = 1
            for si in range(nsamp):
                t = t0 + si * step
                dlt = step if si < nsamp - 1 else L - step * (nsamp - 1)
                gx = _clamp_coord(ox + t * dx, lo[0], scale[0], dmax[0])
                gy = _clamp_coord(oy + t * dy, lo[1], scale[1], dmax[1])
                gz = _clamp_coord(oz + t * dz, lo[2], scale[2], dmax[2])
                n = _stencil(gx, gy, gz, links, nearest, rows, ws)
                sig, occ = _sigma_at(table, rows, ws, n)
                if not occ or sig < 0.0:
                    continue
                att = math.exp(-sig * dlt)
                Tn = T * att
                w = T - Tn
                _color_at(table, rows, ws, n, basis, col)
                if col[0] > 0.0:
                    cr += w * col[0]
                if col[1] > 0.0:
                    cg += w * col[1]
                if col[2] > 0.0:
                    cb += w * col[2]
                s_t[m] = t
                s_dlt[m] = dlt
                s_sig[m] = sig
                s_T[m] = T
                s_w[m] = w
                s_cpre[m, 0] = col[0]
                s_cpre[m, 1] = col[1]
                s_cpre[m, 2] = col[2]
                s_layer[m] = -1
                m += 1
                T = Tn
                if T < stop_thresh:
                    break
        tfg = T
        mfg = m
        out_tfg[ri] = tfg
        # background: one sample per sphere crossing past the foreground exit
        t_exit = t1 if t1 > 0.0 else 0.0
        if T >= stop_thresh:
            bdot = ox * dx + oy * dy + oz * dz
            c0n = ox * ox + oy * oy + oz * oz
            nx = 0
            for l in range(nlayer - 1):
                rad = radii[l]
                disc = bdot * bdot - c0n + rad * rad
                if disc <= 0.0:
                    continue
                tl = -bdot + math.sqrt(disc)
                if tl < t_exit:
                    continue
                xs_t[nx] = tl
                xs_l[nx] = l
                nx += 1
            for q in range(nx):
                if q + 1 < nx:
                    dlt = xs_t[q + 1] - xs_t[q]
                elif q >= 1:
                    dlt = xs_t[q] - xs_t[q - 1]
                else:
                    dlt = 1.0
                t = xs_t[q]
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                _bg_stencil(bgdata, px, py, pz, idx4, w4)
                _bg_fetch(bgdata, xs_l[q], idx4, w4, out4)
                sig = out4[0]
                if sig < 0.0:
                    continue
                att = math.exp(-sig * dlt)
                Tn = T * att
                w = T - Tn
                if out4[1] > 0.0:
                    cr += w * out4[1]
                if out4[2] > 0.0:
                    cg += w * out4[2]
                if out4[3] > 0.0:
                    cb += w * out4[3]
                s_t[m] = t
                s_dlt[m] = dlt
                s_sig[m] = sig
                s_T[m] = T
                s_w[m] = w
                s_cpre[m, 0] = out4[1]
                s_cpre[m, 1] = out4[2]
                s_cpre[m, 2] = out4[3]
                s_layer[m] = xs_l[q]
                m += 1
                T = Tn
                if T < stop_thresh:
                    break
        out_rgb[ri, 0] = cr
        out_rgb[ri, 1] = cg
        out_rgb[ri, 2] = cb
        out_trans[ri] = T
        if mse_mode:
            er = cr - target[ri, 0]
            eg = cg - target[ri, 1]
            eb = cb - target[ri, 2]
            mse_sum += er * er + eg * eg + eb * eb
            upr = up_scale * er
            upg = up_scale * eg
            upb = up_scale * eb
        else:
            upr = target[ri, 0]
            upg = target[ri, 1]
            upb = target[ri, 2]

        tc = tfg
        if tc < beta_eps:
            tc = beta_eps
        if tc > 1.0 - beta_eps:
            tc = 1.0 - beta_eps
        if lam_beta > 0.0:
            beta_sum += math.log(tc) + math.log(1.0 - tc)
        bup = 0.0
        if lam_beta > 0.0 and beta_eps < tfg < 1.0 - beta_eps:
            bup = lam_beta * (1.0 / tc - 1.0 / (1.0 - tc))

        if not with_grad:
            continue
        # reverse sweep over the concatenated foreground + background samples
        sfr = 0.0
        sfg = 0.0
        sfb = 0.0
        for idx in range(m - 1, -1, -1):
            sig = s_sig[idx]
            dlt = s_dlt[idx]
            Ti = s_T[idx]
            w = s_w[idx]
            c0 = s_cpre[idx, 0]
            c1 = s_cpre[idx, 1]
            c2 = s_cpre[idx, 2]
            ccr = c0 if c0 > 0.0 else 0.0
            ccg = c1 if c1 > 0.0 else 0.0
            ccb = c2 if c2 > 0.0 else 0.0
            att = math.exp(-sig * dlt)
            gsig = dlt * (upr * (Ti * att * ccr - sfr)
                          + upg * (Ti * att * ccg - sfg)
                          + upb * (Ti * att * ccb - sfb))
            sfr += w * ccr
            sfg += w * ccg
            sfb += w * ccb
            lay = s_layer[idx]
            if lay < 0:
                if lam_cauchy > 0.0:
                    cauchy_sum += math.log(1.0 + 2.0 * sig * sig)
                    gsig += lam_cauchy * 4.0 * sig / (1.0 + 2.0 * sig * sig)
                if bup != 0.0:
                    gsig += bup * (-dlt * tfg)
                gcr = upr * w if c0 > 0.0 else 0.0
                gcg = upg * w if c1 > 0.0 else 0.0
                gcb = upb * w if c2 > 0.0 else 0.0
                t = s_t[idx]
                gx = _clamp_coord(ox + t * dx, lo[0], scale[0], dmax[0])
                gy = _clamp_coord(oy + t * dy, lo[1], scale[1], dmax[1])
                gz = _clamp_coord(oz + t * dz, lo[2], scale[2], dmax[2])
                n = _stencil(gx, gy, gz, links, nearest, rows, ws)
                for q in range(n):
                    rw = rows[q]
                    if rw < 0:
                        continue
                    wq = ws[q]
                    _touch(rw, tmask, tids, tcnt)
                    grad[rw, 0] += wq * gsig
                    if gcr != 0.0:
                        for b in range(9):
                            grad[rw, 1 + b] += wq * gcr * basis[b]
                    if gcg != 0.0:
                        for b in range(9):
                            grad[rw, 10 + b] += wq * gcg * basis[b]
                    if gcb != 0.0:
                        for b in range(9):
                            grad[rw, 19 + b] += wq * gcb * basis[b]
            else:
                t = s_t[idx]
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                _bg_stencil(bgdata, px, py, pz, idx4, w4)
                H = bgdata.shape[1]
                W = bgdata.shape[2]
                for q in range(4):
                    flat = lay * H * W + idx4[q]
                    wq = w4[q]
                    _touch(flat, bg_tmask, bg_tids, bg_tcnt)
                    bg_grad[flat, 0] += wq * gsig
                    if c0 > 0.0:
                        bg_grad[flat, 1] += wq * upr * w
                    if c1 > 0.0:
                        bg_grad[flat, 2] += wq * upg * w
                    if c2 > 0.0:
                        bg_grad[flat, 3] += wq * upb * w
    return mse_sum, cauchy_sum, beta_sum


@njit(cache=True)
def tv_bg(bgdata, cells, eps, f_sigma, f_rgb,
          grad, tmask, tids, tcnt, with_grad):
    """TV over the background layers: axes (layer, theta, phi) with phi
    wrapping around the equirectangular seam. Opacity uses zero-valued edge
    neighbors, color uses equal-valued ones. Normalization is D/256 per axis.

    Returns raw (sigma_sum, rgb_sum)."""
    L, H, W, _ = bgdata.shape
    fl = L / 256.0
    fh = H / 256.0
    fw = W / 256.0
    e2 = eps * eps
    sig_sum = 0.0
    rgb_sum = 0.0
    for ci in range(cells.shape[0]):
        cid = cells[ci]
        l = cid // (H * W)
        rem = cid % (H * W)
        j = rem // W
        i = rem % W
        hl = l + 1 < L
        hj = j + 1 < H
        iw = i + 1 if i + 1 < W else 0  # phi wraps
        for c in range(4):
            v0 = bgdata[l, j, i, c]
            fac = f_sigma if c == 0 else f_rgb
            if c == 0:
                vl = bgdata[l + 1, j, i, c] if hl else 0.0
                vj = bgdata[l, j + 1, i, c] if hj else 0.0
            else:
                vl = bgdata[l + 1, j, i, c] if hl else v0
                vj = bgdata[l, j + 1, i, c] if hj else v0
            vi = bgdata[l, j, iw, c]
            da = (vl - v0) * fl
            db = (vj - v0) * fh
            dc = (vi - v0) * fw
            val = math.sqrt(da * da + db * db + dc * dc + e2)
            if c == 0:
                sig_sum += val
            else:
                rgb_sum += val
            if with_grad and val > 0.0:
                inv = fac / val
                g0 = 0.0
                if hl:
                    flat = (l + 1) * H * W + j * W + i
                    _touch(flat, tmask, tids, tcnt)
                    grad[flat, c] += da * fl * inv
                    g0 -= da * fl * inv
                elif c == 0:
                    g0 -= da * fl * inv
                if hj:
                    flat = l * H * W + (j + 1) * W + i
                    _touch(flat, tmask, tids, tcnt)
                    grad[flat, c] += db * fh * inv
                    g0 -= db * fh * inv
                elif c == 0:
                    g0 -= db * fh * inv
                flat = l * H * W + j * W + iw
                _touch(flat, tmask, tids, tcnt)
                grad[flat, c] += dc * fw * inv
                g0 -= dc * fw * inv
                if g0 != 0.0:
                    flat = l * H * W + j * W + i
                    _touch(flat, tmask, tids, tcnt)
                    grad[flat, c] += g0
    return sig_sum, rgb_sum

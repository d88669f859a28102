"""numba-compiled kernels. Signatures mirror :mod:`._numpy`."""
import numpy as np
from numba import njit


@njit(cache=True)
def carve_free(start, t_max, t_delta, remaining, step, shape):
    nx, ny, nz = shape
    free = np.zeros(nx * ny * nz, dtype=np.bool_)
    n = start.shape[0]
    for r in range(n):
        c0, c1, c2 = start[r, 0], start[r, 1], start[r, 2]
        tm0, tm1, tm2 = t_max[r, 0], t_max[r, 1], t_max[r, 2]
        k0, k1, k2 = remaining[r, 0], remaining[r, 1], remaining[r, 2]
        while k0 + k1 + k2 > 0:
            free[(c0 * ny + c1) * nz + c2] = True
            # first minimum wins, matching np.argmin
            best = -1
            bval = np.inf
            if k0 > 0 and tm0 < bval:
                best = 0
                bval = tm0
            if k1 > 0 and tm1 < bval:
                best = 1
                bval = tm1
            if k2 > 0 and tm2 < bval:
                best = 2
                bval = tm2
            if best == -1:
                # all remaining axes have infinite t_max; np.argmin picks the first
                if k0 > 0:
                    best = 0
                elif k1 > 0:
                    best = 1
                else:
                    best = 2
            if best == 0:
                c0 += step[r, 0]
                tm0 += t_delta[r, 0]
                k0 -= 1
            elif best == 1:
                c1 += step[r, 1]
                tm1 += t_delta[r, 1]
                k1 -= 1
            else:
                c2 += step[r, 2]
                tm2 += t_delta[r, 2]
                k2 -= 1
    return free


@njit(cache=True)
def lookup_states(states, origin, voxel, points):
    n = points.shape[0]
    out = np.empty(n, dtype=np.int8)
    nx, ny, nz = states.shape
    for p in range(n):
        i = np.int64(np.floor((points[p, 0] - origin[0]) / voxel))
        j = np.int64(np.floor((points[p, 1] - origin[1]) / voxel))
        k = np.int64(np.floor((points[p, 2] - origin[2]) / voxel))
        if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
            out[p] = states[i, j, k]
        else:
            out[p] = -1
    return out


@njit(cache=True)
def _flush(H, g, cols, row, d, Hb, gb):
    for i in range(d):
        ci = cols[row, i]
        if ci < 0:
            continue
        g[ci] += gb[i]
        for j in range(d):
            cj = cols[row, j]
            if cj >= 0:
                H[ci, cj] += Hb[i, j] if j >= i else Hb[j, i]


@njit(cache=True)
def accumulate_normal(H, g, J, cols, r):
    # consecutive rows with identical columns are summed locally before scattering
    m, kdim, d = J.shape
    Hb = np.zeros((d, d))
    gb = np.zeros(d)
    start = 0
    for row in range(m):
        if row > start:
            same = True
            for i in range(d):
                if cols[row, i] != cols[start, i]:
                    same = False
                    break
            if not same:
                _flush(H, g, cols, start, d, Hb, gb)
                Hb[:, :] = 0.0
                gb[:] = 0.0
                start = row
        for k in range(kdim):
            rk = r[row, k]
            for i in range(d):
                ji = J[row, k, i]
                gb[i] += ji * rk
                for j in range(i, d):
                    Hb[i, j] += ji * J[row, k, j]
    if m > 0:
        _flush(H, g, cols, start, d, Hb, gb)
    return H


@njit(cache=True)
def _cross(a0, a1, a2, b0, b1, b2):
    return a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0


@njit(cache=True)
def point_to_plane(R, t, src, dst, Re, te, p, y, n, with_jac):
    m = p.shape[0]
    e = np.empty(m)
    J = np.zeros((m, 18)) if with_jac else np.zeros((0, 18))
    for r in range(m):
        i = src[r]
        j = dst[r]
        px, py, pz = p[r, 0], p[r, 1], p[r, 2]
        s0 = Re[0, 0] * px + Re[0, 1] * py + Re[0, 2] * pz + te[0]
        s1 = Re[1, 0] * px + Re[1, 1] * py + Re[1, 2] * pz + te[1]
        s2 = Re[2, 0] * px + Re[2, 1] * py + Re[2, 2] * pz + te[2]
        d0 = R[i, 0, 0] * s0 + R[i, 0, 1] * s1 + R[i, 0, 2] * s2 + t[i, 0] - t[j, 0]
        d1 = R[i, 1, 0] * s0 + R[i, 1, 1] * s1 + R[i, 1, 2] * s2 + t[i, 1] - t[j, 1]
        d2 = R[i, 2, 0] * s0 + R[i, 2, 1] * s1 + R[i, 2, 2] * s2 + t[i, 2] - t[j, 2]
        c0 = R[j, 0, 0] * d0 + R[j, 1, 0] * d1 + R[j, 2, 0] * d2
        c1 = R[j, 0, 1] * d0 + R[j, 1, 1] * d1 + R[j, 2, 1] * d2
        c2 = R[j, 0, 2] * d0 + R[j, 1, 2] * d1 + R[j, 2, 2] * d2
        u0, u1, u2 = c0 - te[0], c1 - te[1], c2 - te[2]
        q0 = Re[0, 0] * u0 + Re[1, 0] * u1 + Re[2, 0] * u2
        q1 = Re[0, 1] * u0 + Re[1, 1] * u1 + Re[2, 1] * u2
        q2 = Re[0, 2] * u0 + Re[1, 2] * u1 + Re[2, 2] * u2
        n0, n1, n2 = n[r, 0], n[r, 1], n[r, 2]
        e[r] = n0 * (q0 - y[r, 0]) + n1 * (q1 - y[r, 1]) + n2 * (q2 - y[r, 2])
        if not with_jac:
            continue
        b0 = Re[0, 0] * n0 + Re[0, 1] * n1 + Re[0, 2] * n2
        b1 = Re[1, 0] * n0 + Re[1, 1] * n1 + Re[1, 2] * n2
        b2 = Re[2, 0] * n0 + Re[2, 1] * n1 + Re[2, 2] * n2
        v0 = R[j, 0, 0] * b0 + R[j, 0, 1] * b1 + R[j, 0, 2] * b2
        v1 = R[j, 1, 0] * b0 + R[j, 1, 1] * b1 + R[j, 1, 2] * b2
        v2 = R[j, 2, 0] * b0 + R[j, 2, 1] * b1 + R[j, 2, 2] * b2
        a0 = R[i, 0, 0] * v0 + R[i, 1, 0] * v1 + R[i, 2, 0] * v2
        a1 = R[i, 0, 1] * v0 + R[i, 1, 1] * v1 + R[i, 2, 1] * v2
        a2 = R[i, 0, 2] * v0 + R[i, 1, 2] * v1 + R[i, 2, 2] * v2
        e0 = Re[0, 0] * a0 + Re[1, 0] * a1 + Re[2, 0] * a2
        e1 = Re[0, 1] * a0 + Re[1, 1] * a1 + Re[2, 1] * a2
        e2 = Re[0, 2] * a0 + Re[1, 2] * a1 + Re[2, 2] * a2
        x0, x1, x2 = _cross(a0, a1, a2, s0, s1, s2)
        J[r, 0], J[r, 1], J[r, 2] = -x0, -x1, -x2
        J[r, 3], J[r, 4], J[r, 5] = a0, a1, a2
        x0, x1, x2 = _cross(b0, b1, b2, c0, c1, c2)
        J[r, 6], J[r, 7], J[r, 8] = x0, x1, x2
        J[r, 9], J[r, 10], J[r, 11] = -b0, -b1, -b2
        x0, x1, x2 = _cross(n0, n1, n2, q0, q1, q2)
        z0, z1, z2 = _cross(e0, e1, e2, px, py, pz)
        J[r, 12], J[r, 13], J[r, 14] = x0 - z0, x1 - z1, x2 - z2
        J[r, 15], J[r, 16], J[r, 17] = e0 - n0, e1 - n1, e2 - n2
    return e, J

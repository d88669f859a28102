"""Vectorised numpy versions of the kernels in :mod:`._numba`."""
import numpy as np


def carve_free(start, t_max, t_delta, remaining, step, shape):
    """Mark every voxel a 3D-DDA walk passes through before its end cell.

    Parameters
    ----------
    start : (n, 3) int64
        Cell index where each ray starts.
    t_max : (n, 3) float64
        Ray parameter at which the walk crosses the next boundary per axis.
    t_delta : (n, 3) float64
        Ray-parameter increment per voxel along each axis.
    remaining : (n, 3) int64
        Number of steps left per axis until the end cell is reached.
    step : (n, 3) int64
        Step direction (-1, 0, +1) per axis.
    shape : tuple of 3 ints
        Grid shape.

    Returns
    -------
    free : (nx*ny*nz,) bool
    """
    nx, ny, nz = shape
    free = np.zeros(nx * ny * nz, dtype=bool)
    cur = np.array(start, dtype=np.int64, copy=True)
    tm = np.array(t_max, dtype=np.float64, copy=True)
    td = np.asarray(t_delta, dtype=np.float64)
    rem = np.array(remaining, dtype=np.int64, copy=True)
    st = np.asarray(step, dtype=np.int64)

    active = np.nonzero(rem.sum(axis=1) > 0)[0]
    while active.size:
        c = cur[active]
        free[(c[:, 0] * ny + c[:, 1]) * nz + c[:, 2]] = True
        masked = np.where(rem[active] > 0, tm[active], np.inf)
        axis = np.argmin(masked, axis=1)
        cur[active, axis] += st[active, axis]
        tm[active, axis] += td[active, axis]
        rem[active, axis] -= 1
        active = active[rem[active].sum(axis=1) > 0]
    return free


def lookup_states(states, origin, voxel, points):
    """Cell state at each point, -1 for points outside the grid."""
    idx = np.floor((np.asarray(points, dtype=np.float64) - origin) / voxel).astype(np.int64)
    shape = np.array(states.shape)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    out = np.full(len(idx), -1, dtype=np.int8)
    ii = idx[inside]
    out[inside] = states[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


def accumulate_normal(H, g, J, cols, r, chunk=8192):
    """In place: ``H += J^T J`` and ``g += J^T r`` row by row, skipping negative columns.

    ``J`` is ``(m, k, d)``, ``cols`` maps its ``d`` columns into ``H`` per row.
    """
    n = H.shape[1]
    for s in range(0, len(J), chunk):
        Jc, cc, rc = J[s : s + chunk], cols[s : s + chunk], r[s : s + chunk]
        valid = cc >= 0
        gw = np.einsum("mki,mk->mi", Jc, rc)
        g += np.bincount(np.where(valid, cc, 0).ravel(), weights=np.where(valid, gw, 0.0).ravel(), minlength=len(g))
        blocks = np.einsum("mki,mkj->mij", Jc, Jc)
        pair = valid[:, :, None] & valid[:, None, :]
        flat = np.where(pair, cc[:, :, None] * n + cc[:, None, :], 0).ravel()
        H.ravel()[:] += np.bincount(flat, weights=np.where(pair, blocks, 0.0).ravel(), minlength=H.size)
    return H


def point_to_plane(R, t, src, dst, Re, te, p, y, n, with_jac):
    """Signed distances ``n^T (T_e^-1 T_dst^-1 T_src T_e p - y)`` and their ``(m, 18)`` Jacobian.

    Columns are the twists of the source pose, the target pose and the extrinsic.
    """
    Ri, Rj = R[src], R[dst]
    s = p @ Re.T + te
    w = np.matmul(Ri, s[:, :, None])[:, :, 0] + t[src]
    cj = np.matmul((w - t[dst])[:, None, :], Rj)[:, 0, :]
    q = (cj - te) @ Re
    e = np.sum(n * (q - y), axis=1)
    if not with_jac:
        return e, np.zeros((0, 18))
    b = n @ Re.T
    a = np.matmul(np.matmul(Rj, b[:, :, None])[:, :, 0][:, None, :], Ri)[:, 0, :]
    ae = a @ Re
    J = np.concatenate([-np.cross(a, s), a, np.cross(b, cj), -b, np.cross(n, q) - np.cross(ae, p), ae - n], axis=1)
    return e, J

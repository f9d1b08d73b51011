"""Compiled inner loops for feature interpolation and the sparse Adam step.

Each kernel repeats the numpy reference arithmetic operation for operation so
results are bit-identical (checked in the tests).
"""
import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _cell(pts, p, origin, h, E, i0, fr):
    for a in range(3):
        u = (pts[p, a] - origin[a]) / h - 0.5
        i = np.int64(np.floor(u))
        if i < 0:
            i = 0
        elif i > E - 2:
            i = E - 2
        f = u - i
        if f < 0.0:
            f = 0.0
        elif f > 1.0:
            f = 1.0
        i0[a] = i
        fr[a] = f


@numba.njit(cache=True, nogil=True)
def interp_level(pts, origin, h, base, feats, out, col):
    """Trilinear blend of one level into ``out[:, col:col + D]``.

    Weights are products in float64 cast to the feature dtype; corners are
    accumulated in (x, y, z) lexicographic order.
    """
    E = feats.shape[0]
    D = feats.shape[3]
    i0 = np.empty(3, np.int64)
    fr = np.empty(3, np.float64)
    lo = np.empty(3, np.int64)
    up = np.empty(3, np.int64)
    for p in range(pts.shape[0]):
        _cell(pts, p, origin, h, E, i0, fr)
        for a in range(3):  # one modulo per axis; the upper corner wraps by hand
            lo[a] = (i0[a] + base[a]) % E
            up[a] = lo[a] + 1 if lo[a] + 1 < E else 0
        for d in range(D):
            out[p, col + d] = 0
        for k in range(8):
            ox = (k >> 2) & 1
            oy = (k >> 1) & 1
            oz = k & 1
            wx = fr[0] if ox else 1.0 - fr[0]
            wy = fr[1] if oy else 1.0 - fr[1]
            wz = fr[2] if oz else 1.0 - fr[2]
            w = feats.dtype.type(wx * wy * wz)
            sx = up[0] if ox else lo[0]
            sy = up[1] if oy else lo[1]
            sz = up[2] if oz else lo[2]
            for d in range(D):
                out[p, col + d] += w * feats[sx, sy, sz, d]


@numba.njit(cache=True, nogil=True)
def mark_dilated(g, base, E, r, observed):
    """Set ``observed`` (E, E, E, toroidal) for every voxel within ``r`` (Chebyshev) of a
    global leaf index in ``g``; voxels outside ``[base, base + E)`` are ignored."""
    for p in range(g.shape[0]):
        for dx in range(-r, r + 1):
            x = g[p, 0] + dx
            if x < base[0] or x >= base[0] + E:
                continue
            for dy in range(-r, r + 1):
                y = g[p, 1] + dy
                if y < base[1] or y >= base[1] + E:
                    continue
                for dz in range(-r, r + 1):
                    z = g[p, 2] + dz
                    if z < base[2] or z >= base[2] + E:
                        continue
                    observed[x % E, y % E, z % E] = True


@numba.njit(cache=True, nogil=True)
def interp_level_cached(pts, origin, h, base, feats, out, col, slots, weights):
    """``interp_level`` that also records flat corner slots and weights for backward."""
    E = feats.shape[0]
    D = feats.shape[3]
    i0 = np.empty(3, np.int64)
    fr = np.empty(3, np.float64)
    for p in range(pts.shape[0]):
        _cell(pts, p, origin, h, E, i0, fr)
        for d in range(D):
            out[p, col + d] = 0
        for k in range(8):
            ox = (k >> 2) & 1
            oy = (k >> 1) & 1
            oz = k & 1
            wx = fr[0] if ox else 1.0 - fr[0]
            wy = fr[1] if oy else 1.0 - fr[1]
            wz = fr[2] if oz else 1.0 - fr[2]
            w = feats.dtype.type(wx * wy * wz)
            sx = (i0[0] + base[0] + ox) % E
            sy = (i0[1] + base[1] + oy) % E
            sz = (i0[2] + base[2] + oz) % E
            slots[p, k] = (sx * E + sy) * E + sz
            weights[p, k] = w
            for d in range(D):
                out[p, col + d] += w * feats[sx, sy, sz, d]


@numba.njit(cache=True, nogil=True)
def sparse_adam(slots, order, contrib, feat, m, v, t, lr, bc1_tab, bc2_tab, b1, omb1, b2, omb2, eps):
    """Sum contributions per slot (in ``order``) and apply one Adam step per touched slot.

    ``slots[order]`` must be sorted. ``lr, b1, omb1, b2, omb2, eps`` are in the
    feature dtype; ``bc*_tab[t]`` hold the float64 bias corrections ``1 - beta**t``
    (tabulated by numpy, whose pow differs from libm in the last ulp).
    Returns the number of touched slots.
    """
    n = order.shape[0]
    D = feat.shape[1]
    g = np.empty(D, feat.dtype)
    touched = 0
    i = 0
    while i < n:
        s = slots[order[i]]
        for d in range(D):
            g[d] = contrib[order[i], d]
        j = i + 1
        while j < n and slots[order[j]] == s:
            for d in range(D):
                g[d] += contrib[order[j], d]
            j += 1
        tt = t[s] + 1
        t[s] = tt
        bc1 = feat.dtype.type(bc1_tab[tt])
        bc2 = feat.dtype.type(bc2_tab[tt])
        for d in range(D):
            mm = m[s, d] * b1
            mm += omb1 * g[d]
            vv = v[s, d] * b2
            vv += omb2 * g[d] * g[d]
            m[s, d] = mm
            v[s, d] = vv
            feat[s, d] -= lr * (mm / bc1) / (np.sqrt(vv / bc2) + eps)
        touched += 1
        i = j
    return touched

"""Pure numpy versions of the raster kernels in ``_kernels.pyx``.

Both backends take pre-floored integer pixel coordinates and must produce
identical arrays for identical inputs; ``tests/test_kernels.py`` enforces it.
"""

import numpy as np


def rasterize_min(cols, rows, depth, height, width):
    out = np.zeros((height, width), dtype=np.float64)
    win = np.full((height, width), -1, dtype=np.int64)
    keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return out, win
    flat = rows[idx] * width + cols[idx]
    # nearest depth first, ties broken by input order
    order = np.lexsort((idx, depth[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    chosen = idx[order[first]]
    out.flat[flat_sorted[first]] = depth[chosen]
    win.flat[flat_sorted[first]] = chosen
    return out, win


def fill_columns(cols, row_lo, row_hi, depth, height, width):
    out = np.full((height, width), np.inf)
    for c, r0, r1, d in zip(cols.tolist(), row_lo.tolist(), row_hi.tolist(), depth.tolist()):
        if c < 0 or c >= width:
            continue
        r0 = max(r0, 0)
        r1 = min(r1, height - 1)
        if r1 < r0:
            continue
        seg = out[r0:r1 + 1, c]
        np.minimum(seg, d, out=seg)
    out[np.isinf(out)] = 0.0
    return out


def splat_mer(cols, rows, depth, height, width, inv_su2, inv_sv2, qmax, rad_u, rad_v):
    nch = len(qmax)
    out = np.full((nch, height, width), np.inf)
    du = np.arange(-rad_u, rad_u + 1, dtype=np.float64)
    dv = np.arange(-rad_v, rad_v + 1, dtype=np.float64)
    q = (du * du * inv_su2)[None, :] + (dv * dv * inv_sv2)[:, None]
    masks = [q <= qm for qm in qmax]
    for c0, r0, d in zip(cols.tolist(), rows.tolist(), depth.tolist()):
        ra, rb = max(r0 - rad_v, 0), min(r0 + rad_v + 1, height)
        ca, cb = max(c0 - rad_u, 0), min(c0 + rad_u + 1, width)
        if ra >= rb or ca >= cb:
            continue
        wr = slice(ra - (r0 - rad_v), rb - (r0 - rad_v))
        wc = slice(ca - (c0 - rad_u), cb - (c0 - rad_u))
        for j in range(nch):
            region = out[j, ra:rb, ca:cb]
            np.minimum(region, np.where(masks[j][wr, wc], d, np.inf), out=region)
    out[np.isinf(out)] = 0.0
    return out

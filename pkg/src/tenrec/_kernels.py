"""Numba inner loops for the block solver.

The factor matrices of all modes live in one concatenated array `bcat` of
shape (sum of mode sizes, r); `gidx` holds entry indices pre-shifted by each
mode's row offset so bcat[gidx[e, l]] is entry e's effective factor row in
mode l.  Accumulation walks entries in storage order, which keeps results
bit-reproducible for a fixed chunking.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def accumulate_block(gidx, subj, agg, y, bcat, k, offrows, n_agg, start, end):
    """Normal-equation pieces for one mode-k block update over entries
    [start, end).

    subj: per-entry 0-based subject code in mode k (indexes offrows).
    agg: per-entry 0-based accumulation group (subject for latent updates,
    subgroup for nested ones).
    offrows: the per-subject factor rows held fixed during this update (the
    expanded nested rows for a latent update, the latent rows for a nested
    one); the response is reduced by design @ offrow before accumulating.

    Returns (ata, atb, rss): per-group Z'Z, Z'resid and resid'resid.
    """
    d = gidx.shape[1]
    r = bcat.shape[1]
    ata = np.zeros((n_agg, r, r))
    atb = np.zeros((n_agg, r))
    rss = np.zeros(n_agg)
    z = np.empty(r)
    for e in range(start, end):
        for j in range(r):
            z[j] = 1.0
        for l in range(d):
            if l != k:
                row = bcat[gidx[e, l]]
                for j in range(r):
                    z[j] *= row[j]
        off = offrows[subj[e]]
        resid = y[e]
        for j in range(r):
            resid -= z[j] * off[j]
        a = agg[e]
        rss[a] += resid * resid
        b_a = atb[a]
        A_a = ata[a]
        for j in range(r):
            zj = z[j]
            b_a[j] += zj * resid
            A_j = A_a[j]
            for j2 in range(j, r):
                A_j[j2] += zj * z[j2]
    for g in range(n_agg):
        for j in range(r):
            for j2 in range(j + 1, r):
                ata[g, j2, j] = ata[g, j, j2]
    return ata, atb, rss


@njit(cache=True, nogil=True)
def accumulate_block3(gidx, subj, agg, y, bcat, k, offrows, n_agg, start, end):
    """Rank-3 specialization of accumulate_block, bit-identical to it.

    The fully unrolled scalar form runs several times faster than the
    generic loops, and r=3 is the rank every large experiment uses.
    """
    d = gidx.shape[1]
    ata = np.zeros((n_agg, 3, 3))
    atb = np.zeros((n_agg, 3))
    rss = np.zeros(n_agg)
    for e in range(start, end):
        z0 = 1.0
        z1 = 1.0
        z2 = 1.0
        for l in range(d):
            if l != k:
                g = gidx[e, l]
                z0 *= bcat[g, 0]
                z1 *= bcat[g, 1]
                z2 *= bcat[g, 2]
        s = subj[e]
        resid = (y[e] - z0 * offrows[s, 0] - z1 * offrows[s, 1]
                 - z2 * offrows[s, 2])
        a = agg[e]
        rss[a] += resid * resid
        atb[a, 0] += z0 * resid
        atb[a, 1] += z1 * resid
        atb[a, 2] += z2 * resid
        ata[a, 0, 0] += z0 * z0
        ata[a, 0, 1] += z0 * z1
        ata[a, 0, 2] += z0 * z2
        ata[a, 1, 1] += z1 * z1
        ata[a, 1, 2] += z1 * z2
        ata[a, 2, 2] += z2 * z2
    for g in range(n_agg):
        ata[g, 1, 0] = ata[g, 0, 1]
        ata[g, 2, 0] = ata[g, 0, 2]
        ata[g, 2, 1] = ata[g, 1, 2]
    return ata, atb, rss


def accumulate(gidx, subj, agg, y, bcat, k, offrows, n_agg, start, end):
    """Dispatch to the rank-3 kernel when it applies."""
    if bcat.shape[1] == 3:
        return accumulate_block3(gidx, subj, agg, y, bcat, k, offrows, n_agg,
                                 start, end)
    return accumulate_block(gidx, subj, agg, y, bcat, k, offrows, n_agg,
                            start, end)


@njit(cache=True, nogil=True)
def full_sse3(gidx, y, bcat):
    d = gidx.shape[1]
    total = 0.0
    for e in range(gidx.shape[0]):
        z0 = 1.0
        z1 = 1.0
        z2 = 1.0
        for l in range(d):
            g = gidx[e, l]
            z0 *= bcat[g, 0]
            z1 *= bcat[g, 1]
            z2 *= bcat[g, 2]
        resid = y[e] - (z0 + z1 + z2)
        total += resid * resid
    return total


@njit(cache=True, nogil=True)
def full_sse(gidx, y, bcat, r):
    """Sum of squared residuals of the current model over all entries."""
    d = gidx.shape[1]
    total = 0.0
    z = np.empty(r)
    for e in range(gidx.shape[0]):
        for j in range(r):
            z[j] = 1.0
        for l in range(d):
            row = bcat[gidx[e, l]]
            for j in range(r):
                z[j] *= row[j]
        pred = 0.0
        for j in range(r):
            pred += z[j]
        resid = y[e] - pred
        total += resid * resid
    return total


def sse(gidx, y, bcat, r):
    """Dispatch to the rank-3 kernel when it applies."""
    if r == 3:
        return full_sse3(gidx, y, bcat)
    return full_sse(gidx, y, bcat, r)

"""Independent naive reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way — per-pixel
Python loops, all-triangles ray scans — with no code shared with the
library. Tests compare the fast implementations against these.
"""

from __future__ import annotations

import math

import numpy as np

# widened barycentric bounds are part of the intersection contract: a ray
# crossing a shared edge must hit at least one of its triangles
BARY_EPS = 1e-12


def brute_force_closest_hit(origin, direction, t_low, v0, e1, e2):
    """All-triangles closest hit for one ray.

    Scans triangle ids in ascending order keeping strictly smaller t, so
    ties resolve to the lowest id. Returns ``(t, tri_id)``; misses are
    ``(inf, -1)``.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    p = np.cross(d, e2)
    det = (e1 * p).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tv = o - v0
        u = (tv * p).sum(axis=1) * inv
        q = np.cross(tv, e1)
        v = (d[None, :] * q).sum(axis=1) * inv
        t = ((e2 * q).sum(axis=1)) * inv
    ok = (
        (det != 0.0)
        & (u >= -BARY_EPS)
        & (u <= 1.0 + BARY_EPS)
        & (v >= -BARY_EPS)
        & (u + v <= 1.0 + BARY_EPS)
        & (t >= t_low)
    )
    if not ok.any():
        return np.inf, -1
    ts = np.where(ok, t, np.inf)
    idx = int(np.argmin(ts))  # first minimum = lowest triangle id
    return float(ts[idx]), idx


def naive_structure_loss(disparity, mask, epsilon):
    hi = lo = 0.0
    n_in = n_out = 0
    rows, cols = disparity.shape
    for i in range(rows):
        for j in range(cols):
            if mask[i, j]:
                hi += disparity[i, j]
                n_in += 1
            else:
                lo += disparity[i, j]
                n_out += 1
    inside = hi / (n_in + epsilon)
    outside = lo / (n_out + epsilon)
    return max(0.0, inside - outside)


def naive_adse(disparity, mask, epsilon, tol=0.0):
    """Returns (r_in_lumen, z, d_min, mean_in, mean_out, sigma_out)."""
    rows, cols = disparity.shape
    d_min = min(disparity[i, j] for i in range(rows) for j in range(cols))
    n_min = n_min_in = 0
    vals_in, vals_out = [], []
    for i in range(rows):
        for j in range(cols):
            v = disparity[i, j]
            if v <= d_min + tol:
                n_min += 1
                if mask[i, j]:
                    n_min_in += 1
            if mask[i, j]:
                vals_in.append(v)
            else:
                vals_out.append(v)
    r = n_min_in / (n_min + epsilon)
    mean_in = sum(vals_in) / len(vals_in)
    mean_out = sum(vals_out) / len(vals_out)
    var = sum((v - mean_out) ** 2 for v in vals_out) / len(vals_out)
    sigma = math.sqrt(var)
    z = (mean_in - mean_out) / (sigma + epsilon)
    return r, z, d_min, mean_in, mean_out, sigma


def naive_median(values):
    s = sorted(values)
    n = len(s)
    if n % 2 == 1:
        return s[n // 2]
    return (s[n // 2 - 1] + s[n // 2]) / 2.0


def naive_median_align(pred, gt, valid=None):
    rows, cols = pred.shape
    pv, gv = [], []
    for i in range(rows):
        for j in range(cols):
            if valid is None or valid[i, j]:
                pv.append(pred[i, j])
                gv.append(gt[i, j])
    scale = naive_median(gv) / naive_median(pv)
    aligned = [[pred[i, j] * scale for j in range(cols)] for i in range(rows)]
    return np.array(aligned), scale


def naive_classical(pred, gt, valid=None):
    """Returns (abs_rel, sq_rel, rmse, rmse_log, delta, n_excluded)."""
    rows, cols = pred.shape
    ar, sr, se = [], [], []
    logs, deltas = [], []
    excluded = 0
    for i in range(rows):
        for j in range(cols):
            if valid is not None and not valid[i, j]:
                continue
            p, g = pred[i, j], gt[i, j]
            ar.append(abs(p - g) / g)
            sr.append((p - g) ** 2 / g)
            se.append((p - g) ** 2)
            if p <= 0:
                excluded += 1
                continue
            logs.append((math.log(p) - math.log(g)) ** 2)
            deltas.append(1.0 if max(p / g, g / p) < 1.25 else 0.0)
    abs_rel = sum(ar) / len(ar)
    sq_rel = sum(sr) / len(sr)
    rmse = math.sqrt(sum(se) / len(se))
    rmse_log = math.sqrt(sum(logs) / len(logs)) if logs else 0.0
    delta = sum(deltas) / len(deltas) if deltas else 0.0
    return abs_rel, sq_rel, rmse, rmse_log, delta, excluded


def segment_distance_exact(p1, q1, p2, q2):
    """Minimum distance between segments via candidate enumeration.

    ``|A(s) - B(t)|^2`` is quadratic over the unit square, so the minimum
    sits at the interior stationary point or on one of the four clamped
    edges; evaluate every candidate and take the smallest.
    """
    p1, q1, p2, q2 = (np.asarray(x, dtype=np.float64) for x in (p1, q1, p2, q2))
    u, v, r = q1 - p1, q2 - p2, p1 - p2
    uu, vv, uv = u @ u, v @ v, u @ v
    ru, rv = r @ u, r @ v
    cands = []
    det = uu * vv - uv * uv
    if det > 0.0:
        s = (-ru * vv + rv * uv) / det
        t = (-ru * uv + rv * uu) / det
        if 0.0 <= s <= 1.0 and 0.0 <= t <= 1.0:
            cands.append((s, t))
    if vv > 0.0:
        cands.append((0.0, min(max(rv / vv, 0.0), 1.0)))
        cands.append((1.0, min(max((rv + uv) / vv, 0.0), 1.0)))
    if uu > 0.0:
        cands.append((min(max(-ru / uu, 0.0), 1.0), 0.0))
        cands.append((min(max((-ru + uv) / uu, 0.0), 1.0), 1.0))
    cands.extend([(0.0, 0.0), (1.0, 1.0), (0.0, 1.0), (1.0, 0.0)])
    best = math.inf
    for s, t in cands:
        d = r + s * u - t * v
        best = min(best, d @ d)
    return math.sqrt(best)


def min_angle_for_clearance(d_a, d_b, l_a, l_b, margin):
    """Smallest branching angle (degrees) at which two daughters placed at
    ±φ about the parent axis keep their straight axes ``margin·(d_a+d_b)/2``
    apart. Same placement convention as the sampler — start at
    ``(±r·tan(φ/2), 0, r)``, direction ``(±sin φ, 0, cos φ)`` — with an
    independent distance formulation and bisection."""
    thresh = margin * 0.5 * (d_a + d_b)
    r_a, r_b = d_a / 2.0, d_b / 2.0

    def clearance(phi_deg):
        phi = math.radians(phi_deg)
        pa = np.array([r_a * math.tan(phi / 2), 0.0, r_a])
        da = np.array([math.sin(phi), 0.0, math.cos(phi)])
        pb = np.array([-r_b * math.tan(phi / 2), 0.0, r_b])
        db = np.array([-math.sin(phi), 0.0, math.cos(phi)])
        return segment_distance_exact(pa, pa + l_a * da, pb, pb + l_b * db)

    lo, hi = 1e-6, 170.0
    if clearance(lo) >= thresh:
        return lo
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if clearance(mid) >= thresh:
            hi = mid
        else:
            lo = mid
    return hi


def segment_pair_distance(p1, q1, p2, q2):
    """Minimum distance between 3-D segments p1-q1 and p2-q2 (grid scan
    plus local refinement; independent of any closed-form solver)."""
    p1, q1, p2, q2 = (np.asarray(x, dtype=np.float64) for x in (p1, q1, p2, q2))
    ts = np.linspace(0.0, 1.0, 129)
    a = p1[None, :] + ts[:, None] * (q1 - p1)[None, :]
    b = p2[None, :] + ts[:, None] * (q2 - p2)[None, :]
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    lo_s, hi_s = max(ts[i] - 0.02, 0.0), min(ts[i] + 0.02, 1.0)
    lo_t, hi_t = max(ts[j] - 0.02, 0.0), min(ts[j] + 0.02, 1.0)
    for _ in range(24):
        ss = np.linspace(lo_s, hi_s, 9)
        tt = np.linspace(lo_t, hi_t, 9)
        a = p1[None, :] + ss[:, None] * (q1 - p1)[None, :]
        b = p2[None, :] + tt[:, None] * (q2 - p2)[None, :]
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        span_s, span_t = (hi_s - lo_s) / 4, (hi_t - lo_t) / 4
        lo_s, hi_s = max(ss[i] - span_s, 0.0), min(ss[i] + span_s, 1.0)
        lo_t, hi_t = max(tt[j] - span_t, 0.0), min(tt[j] + span_t, 1.0)
    return float(d[i, j])

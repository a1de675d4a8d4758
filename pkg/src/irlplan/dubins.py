"""Shortest Dubins paths between oriented poses.

Closed-form solutions for all six word types (LSL, RSR, LSR, RSL, RLR, LRL)
with a fixed turning radius, plus arclength sampling of the winning path.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import wrap_angle

_WORDS = ("LSL", "RSR", "LSR", "RSL", "RLR", "LRL")


def _mod2pi(theta: float) -> float:
    return theta % (2.0 * math.pi)


def _lsl(alpha, beta, d):
    ca, sa, cb, sb = math.cos(alpha), math.sin(alpha), math.cos(beta), math.sin(beta)
    p_sq = 2 + d * d - 2 * math.cos(alpha - beta) + 2 * d * (sa - sb)
    if p_sq < 0:
        if p_sq < -1e-9:
            return None
        p_sq = 0.0
    tmp = math.atan2(cb - ca, d + sa - sb)
    t = _mod2pi(tmp - alpha)
    p = math.sqrt(p_sq)
    q = _mod2pi(beta - tmp)
    return t, p, q


def _rsr(alpha, beta, d):
    ca, sa, cb, sb = math.cos(alpha), math.sin(alpha), math.cos(beta), math.sin(beta)
    p_sq = 2 + d * d - 2 * math.cos(alpha - beta) + 2 * d * (sb - sa)
    if p_sq < 0:
        if p_sq < -1e-9:
            return None
        p_sq = 0.0
    tmp = math.atan2(ca - cb, d - sa + sb)
    t = _mod2pi(alpha - tmp)
    p = math.sqrt(p_sq)
    q = _mod2pi(tmp - beta)
    return t, p, q


def _lsr(alpha, beta, d):
    ca, sa, cb, sb = math.cos(alpha), math.sin(alpha), math.cos(beta), math.sin(beta)
    p_sq = -2 + d * d + 2 * math.cos(alpha - beta) + 2 * d * (sa + sb)
    if p_sq < 0:
        if p_sq < -1e-9:
            return None
        p_sq = 0.0
    p = math.sqrt(p_sq)
    tmp = math.atan2(-ca - cb, d + sa + sb) - math.atan2(-2.0, p)
    t = _mod2pi(tmp - alpha)
    q = _mod2pi(tmp - _mod2pi(beta))
    return t, p, q


def _rsl(alpha, beta, d):
    ca, sa, cb, sb = math.cos(alpha), math.sin(alpha), math.cos(beta), math.sin(beta)
    p_sq = -2 + d * d + 2 * math.cos(alpha - beta) - 2 * d * (sa + sb)
    if p_sq < 0:
        if p_sq < -1e-9:
            return None
        p_sq = 0.0
    p = math.sqrt(p_sq)
    tmp = math.atan2(ca + cb, d - sa - sb) - math.atan2(2.0, p)
    t = _mod2pi(alpha - tmp)
    q = _mod2pi(beta - tmp)
    return t, p, q


def _rlr(alpha, beta, d):
    ca, sa, cb, sb = math.cos(alpha), math.sin(alpha), math.cos(beta), math.sin(beta)
    tmp = (6.0 - d * d + 2 * math.cos(alpha - beta) + 2 * d * (sa - sb)) / 8.0
    if abs(tmp) > 1.0:
        return None
    p = _mod2pi(2 * math.pi - math.acos(tmp))
    t = _mod2pi(alpha - math.atan2(ca - cb, d - sa + sb) + p / 2.0)
    q = _mod2pi(alpha - beta - t + p)
    return t, p, q


def _lrl(alpha, beta, d):
    ca, sa, cb, sb = math.cos(alpha), math.sin(alpha), math.cos(beta), math.sin(beta)
    tmp = (6.0 - d * d + 2 * math.cos(alpha - beta) + 2 * d * (sb - sa)) / 8.0
    if abs(tmp) > 1.0:
        return None
    p = _mod2pi(2 * math.pi - math.acos(tmp))
    t = _mod2pi(-alpha + math.atan2(cb - ca, d + sa - sb) + p / 2.0)
    q = _mod2pi(_mod2pi(beta) - alpha - t + _mod2pi(p))
    return t, p, q


_SOLVERS = {"LSL": _lsl, "RSR": _rsr, "LSR": _lsr, "RSL": _rsl,
            "RLR": _rlr, "LRL": _lrl}


def solve_dubins(start_pose, end_pose, radius: float):
    """Shortest Dubins path between two poses at the given turning radius.

    Returns (word, (t, p, q), length_m) with segment lengths t, p, q in the
    normalized (radius = 1) frame, or None when no word admits a solution.
    """
    if radius <= 0:
        raise ValueError("turning radius must be positive")
    x0, y0, th0 = start_pose
    x1, y1, th1 = end_pose
    dx, dy = x1 - x0, y1 - y0
    big_d = math.hypot(dx, dy)
    d = big_d / radius
    phi = math.atan2(dy, dx) if big_d > 1e-12 else 0.0
    alpha = _mod2pi(th0 - phi)
    beta = _mod2pi(th1 - phi)

    best = None
    for word in _WORDS:
        sol = _SOLVERS[word](alpha, beta, d)
        if sol is None:
            continue
        length = sum(sol) * radius
        if best is not None and length >= best[2]:
            continue
        # reject words whose closed form went degenerate
        ex, ey, eth = _pose_along(x0, y0, th0, word,
                                  [seg * radius for seg in sol], radius, length)
        if math.hypot(ex - x1, ey - y1) > 1e-6 or abs(wrap_angle(eth - th1)) > 1e-6:
            continue
        best = (word, sol, length)
    return best


def solve_dubins_to_targets(start_pose, targets: np.ndarray, radius: float,
                            max_length: float):
    """Shortest verified Dubins path from one pose to any of N target poses.

    Vectorizes the six word closed forms across all targets, then verifies
    candidates in ascending-length order (ties broken by target index, then
    word order) with the exact endpoint check used by solve_dubins.  Returns
    (word, (t, p, q), target_index, length_m) or None when nothing qualifies
    within max_length.
    """
    if radius <= 0:
        raise ValueError("turning radius must be positive")
    x0, y0, th0 = start_pose
    targets = np.asarray(targets, dtype=float)
    dx = targets[:, 0] - x0
    dy = targets[:, 1] - y0
    big_d = np.hypot(dx, dy)
    d = big_d / radius
    phi = np.where(big_d > 1e-12, np.arctan2(dy, dx), 0.0)
    alpha = (th0 - phi) % (2.0 * math.pi)
    beta = (targets[:, 2] - phi) % (2.0 * math.pi)
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cab = np.cos(alpha - beta)
    two_pi = 2.0 * math.pi

    sols = []  # (t, p, q, valid) per word, arrays over targets
    # LSL
    p_sq = 2 + d * d - 2 * cab + 2 * d * (sa - sb)
    ok = p_sq >= -1e-9
    p_sq = np.maximum(p_sq, 0.0)
    tmp = np.arctan2(cb - ca, d + sa - sb)
    sols.append(((tmp - alpha) % two_pi, np.sqrt(p_sq), (beta - tmp) % two_pi, ok))
    # RSR
    p_sq = 2 + d * d - 2 * cab + 2 * d * (sb - sa)
    ok = p_sq >= -1e-9
    p_sq = np.maximum(p_sq, 0.0)
    tmp = np.arctan2(ca - cb, d - sa + sb)
    sols.append(((alpha - tmp) % two_pi, np.sqrt(p_sq), (tmp - beta) % two_pi, ok))
    # LSR
    p_sq = -2 + d * d + 2 * cab + 2 * d * (sa + sb)
    ok = p_sq >= -1e-9
    p = np.sqrt(np.maximum(p_sq, 0.0))
    tmp = np.arctan2(-ca - cb, d + sa + sb) - np.arctan2(-2.0, p)
    sols.append(((tmp - alpha) % two_pi, p, (tmp - beta % two_pi) % two_pi, ok))
    # RSL
    p_sq = -2 + d * d + 2 * cab - 2 * d * (sa + sb)
    ok = p_sq >= -1e-9
    p = np.sqrt(np.maximum(p_sq, 0.0))
    tmp = np.arctan2(ca + cb, d - sa - sb) - np.arctan2(2.0, p)
    sols.append(((alpha - tmp) % two_pi, p, (beta - tmp) % two_pi, ok))
    # RLR
    tmp = (6.0 - d * d + 2 * cab + 2 * d * (sa - sb)) / 8.0
    ok = np.abs(tmp) <= 1.0
    p = (two_pi - np.arccos(np.clip(tmp, -1.0, 1.0))) % two_pi
    t = (alpha - np.arctan2(ca - cb, d - sa + sb) + p / 2.0) % two_pi
    sols.append((t, p, (alpha - beta - t + p) % two_pi, ok))
    # LRL
    tmp = (6.0 - d * d + 2 * cab + 2 * d * (sb - sa)) / 8.0
    ok = np.abs(tmp) <= 1.0
    p = (two_pi - np.arccos(np.clip(tmp, -1.0, 1.0))) % two_pi
    t = (-alpha + np.arctan2(cb - ca, d + sa - sb) + p / 2.0) % two_pi
    sols.append((t, p, ((beta % two_pi) - alpha - t + (p % two_pi)) % two_pi, ok))

    n = len(targets)
    t_all = np.stack([s[0] for s in sols])  # (6, N)
    p_all = np.stack([s[1] for s in sols])
    q_all = np.stack([s[2] for s in sols])
    ok_all = np.stack([s[3] for s in sols])
    lengths = (t_all + p_all + q_all) * radius
    usable = ok_all & (lengths <= max_length)
    if not usable.any():
        return None
    flat = np.where(usable.ravel(), lengths.ravel(), np.inf)
    w_grid, n_grid = np.divmod(np.arange(6 * n), n)
    # ascending length with (target, word) tie-break
    order = np.lexsort((w_grid, n_grid, flat))
    for k in order:
        if not np.isfinite(flat[k]):
            break
        wi, ni = int(w_grid[k]), int(n_grid[k])
        sol = (float(t_all[wi, ni]), float(p_all[wi, ni]), float(q_all[wi, ni]))
        word = _WORDS[wi]
        length = float(lengths[wi, ni])
        ex, ey, eth = _pose_along(x0, y0, th0, word,
                                  [seg * radius for seg in sol], radius, length)
        tx, ty, tth = targets[ni]
        if math.hypot(ex - tx, ey - ty) <= 1e-6 and abs(wrap_angle(eth - tth)) <= 1e-6:
            return word, sol, ni, length
    return None


def sample_dubins(start_pose, word: str, lengths, radius: float, step: float = 0.1):
    """Sample (x, y, theta) along a Dubins word at ~`step` m spacing.

    Returns (arclengths, poses) where poses is an (N, 3) array; the final
    sample lands exactly on the path endpoint.
    """
    x, y, th = start_pose
    seg_arcs = np.array([seg * radius for seg in lengths])
    total = float(seg_arcs.sum())
    n = max(2, int(math.ceil(total / step)) + 1)
    s_samples = np.linspace(0.0, total, n)
    bounds = np.concatenate(([0.0], np.cumsum(seg_arcs)))
    poses = np.empty((n, 3))
    # segment start poses via the exact scalar advance
    seg_starts = [(x, y, th)]
    for letter, arc in zip(word, seg_arcs):
        seg_starts.append(_pose_along(*seg_starts[-1], letter, [arc], radius, arc))
    for k, letter in enumerate(word):
        lo, hi = bounds[k], bounds[k + 1]
        inside = (s_samples >= lo) & ((s_samples < hi) if k < 2 else (s_samples <= hi + 1e-12))
        if k > 0:
            inside &= s_samples >= bounds[k]
        if not inside.any():
            continue
        ds = s_samples[inside] - lo
        xk, yk, thk = seg_starts[k]
        if letter == "S":
            poses[inside, 0] = xk + ds * math.cos(thk)
            poses[inside, 1] = yk + ds * math.sin(thk)
            poses[inside, 2] = thk
        else:
            sign = 1.0 if letter == "L" else -1.0
            dth = sign * ds / radius
            poses[inside, 0] = xk + radius * (np.sin(thk + dth) - math.sin(thk)) * sign
            poses[inside, 1] = yk + radius * (math.cos(thk) - np.cos(thk + dth)) * sign
            poses[inside, 2] = thk + dth
    poses[:, 2] = np.arctan2(np.sin(poses[:, 2]), np.cos(poses[:, 2]))
    return s_samples, poses


def _pose_along(x, y, th, word, seg_arcs, radius, s):
    remaining = s
    for letter, arc in zip(word, seg_arcs):
        ds = min(remaining, arc)
        if letter == "S":
            x += ds * math.cos(th)
            y += ds * math.sin(th)
        else:
            sign = 1.0 if letter == "L" else -1.0
            dth = sign * ds / radius
            # exact arc advance about the turn center
            x += radius * (math.sin(th + dth) - math.sin(th)) * sign
            y += radius * (math.cos(th) - math.cos(th + dth)) * sign
            th = th + dth
        remaining -= ds
        if remaining <= 1e-12:
            break
    return x, y, wrap_angle(th)

"""Independent reference computations shared by unit and acceptance tests."""
import numpy as np
from scipy import optimize, stats


def _best_m3(m1, m2, M, N3, lo_ratio, hi_ratio):
    """Best m3 for fixed (m1, m2), with lo_ratio <= m3 (M - m1 - m2 - m3) / (m1 m2) <= hi_ratio.

    f(m3) = m3 (A - m3) is a downward parabola, so the feasible set is at most
    two intervals; the concave objective is maximised by clipping N3 into each.
    """
    A = M - m1 - m2
    out = np.full(m1.shape, np.nan)
    val = np.full(m1.shape, -np.inf)
    valid = A > 0
    lo_b, hi_b = lo_ratio * m1 * m2, hi_ratio * m1 * m2
    disc_lo = A * A - 4 * lo_b
    disc_hi = A * A - 4 * hi_b
    ok = valid & (disc_lo >= 0)
    # f >= lo_b  <=>  m3 in [r1, r2]; f <= hi_b removes (s1, s2) when disc_hi > 0
    r1 = np.where(ok, (A - np.sqrt(np.maximum(disc_lo, 0))) / 2, np.nan)
    r2 = np.where(ok, (A + np.sqrt(np.maximum(disc_lo, 0))) / 2, np.nan)
    cut = disc_hi > 0
    s1 = np.where(cut, (A - np.sqrt(np.maximum(disc_hi, 0))) / 2, np.nan)
    s2 = np.where(cut, (A + np.sqrt(np.maximum(disc_hi, 0))) / 2, np.nan)
    pieces = [
        (r1, np.where(cut, s1, r2)),
        (np.where(cut, s2, np.nan), np.where(cut, r2, np.nan)),
    ]
    for a, b in pieces:
        good = ok & np.isfinite(a) & np.isfinite(b) & (b >= a) & (b > 0)
        a = np.maximum(a, 1e-300)
        m3 = np.clip(N3, a, b)
        v = np.where(good, N3 * np.log(np.maximum(m3, 1e-300)) - m3, -np.inf)
        better = v > val
        out = np.where(better, m3, out)
        val = np.where(better, v, val)
    return out, val


def k2_profile_oracle(N, M, log_lo, log_hi, span=6.0, n=201, zooms=12):
    """Max of sum(N log m - m) over m1..m3 with log OR in [log_lo, log_hi] and m0 = M - sum(m).

    Exhaustive search on a log lattice for (m1, m2), zooming around the best
    point. Returns the maximised criterion (without the constant terms).
    """
    N1, N2, N3 = (float(x) for x in N)
    c1, c2 = np.log(max(N1, 0.5)), np.log(max(N2, 0.5))
    h = span
    best = -np.inf
    for _ in range(zooms):
        g1 = np.linspace(c1 - h, c1 + h, n)
        g2 = np.linspace(c2 - h, c2 + h, n)
        U1, U2 = np.meshgrid(g1, g2, indexing="ij")
        m1, m2 = np.exp(U1), np.exp(U2)
        _, v3 = _best_m3(m1, m2, M, N3, np.exp(log_lo), np.exp(log_hi))
        tot = N1 * U1 - m1 + N2 * U2 - m2 + v3
        i = np.unravel_index(np.argmax(tot), tot.shape)
        if tot[i] > best:
            best = float(tot[i])
        c1, c2 = g1[i[0]], g2[i[1]]
        h = max(h / 4, 8 * (2 * h / (n - 1)))
        if h < 1e-7:
            break
    return best


def k2_lr_oracle(N, M, log_lo, log_hi):
    N = np.asarray(N, dtype=float)
    pos = N > 0
    ref = float(np.sum(N[pos] * np.log(N[pos]) - N[pos]))
    # the unrestricted optimum m = N is feasible for M on the identification interval
    ratio = N[0] * N[1] / N[2] if N[2] > 0 else np.inf
    lo_M = N.sum() + np.exp(log_lo) * ratio
    hi_M = N.sum() + np.exp(log_hi) * ratio
    if lo_M <= M <= hi_M:
        return 0.0
    val = k2_profile_oracle(N, M, log_lo, log_hi)
    return max(0.0, 2.0 * (ref - val))


def slsqp_pairwise(N, M, constraints, k=3, starts=8, seed=0):
    """Profile criterion under odds-ratio bounds via SLSQP from several starts."""
    from crcbounds.tables import pair_groups

    N = np.asarray(N, dtype=float)
    groups = []
    for r, t, eta, xi in constraints:
        g = pair_groups(k, r, t)
        groups.append((g == 3, g == 2, g == 1, eta, xi))

    def log_or(u):
        m = np.exp(u)
        out = []
        for a, b, c, _, _ in groups:
            A, B, C = m[a].sum(), m[b].sum(), m[c].sum()
            out.append(np.log(A) + np.log(max(M - A - B - C, 1e-300)) - np.log(B) - np.log(C))
        return np.array(out)

    cons = [
        {"type": "ineq", "fun": lambda u: log_or(u) - np.log([g[3] for g in groups])},
        {"type": "ineq", "fun": lambda u: np.log([g[4] for g in groups]) - log_or(u)},
        {"type": "ineq", "fun": lambda u: M - np.exp(u).sum() - 1e-9},
    ]
    rng = np.random.default_rng(seed)
    best = -np.inf
    with np.errstate(all="ignore"):
        return _slsqp_runs(N, cons, rng, starts, best)


def _slsqp_runs(N, cons, rng, starts, best):
    for s in range(starts):
        u0 = np.log(np.maximum(N, 0.5)) + (0 if s == 0 else rng.normal(0, 0.3, N.size))
        res = optimize.minimize(lambda u: -(N @ u - np.exp(u).sum()), u0, method="SLSQP",
                                constraints=cons, options={"maxiter": 500, "ftol": 1e-12})
        if res.success and np.all(cons[0]["fun"](res.x) > -1e-7) and np.all(cons[1]["fun"](res.x) > -1e-7):
            best = max(best, -res.fun)
    return best


CHI2_95 = float(stats.chi2.ppf(0.95, 1))

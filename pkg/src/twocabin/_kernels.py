"""Compiled inner loops shared by the market, solver and mechanism modules."""

import math

import numpy as np
from numba import njit
from numpy.polynomial.legendre import leggauss

SQRT2 = math.sqrt(2.0)
INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

GL_X, GL_W = leggauss(16)

# break the value axis where the normal density and the premium tail change shape
Z_CUTS = np.array([-8.0, -6.0, -4.0, -3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0])
U_CUTS = np.array([60.0, 25.0, 10.0, 5.0, 2.5, 1.0, 0.4, 0.1])
U_CUTS_GAP = np.array([60.0, 25.0, 10.0, 5.0, 2.5, 1.0, 0.4, 0.15, 0.05])

# regime codes
BOTH, ECON, FIRST, CLOSED = 0, 1, 2, 3


@njit(cache=True)
def norm_sf(z):
    return 0.5 * math.erfc(z / SQRT2)


@njit(cache=True)
def tn_sf(x, mu, sigma):
    """P(V >= x) for the zero-truncated normal."""
    if x <= 0.0:
        return 1.0
    return norm_sf((x - mu) / sigma) / norm_sf(-mu / sigma)


@njit(cache=True)
def premium_tail(x, m):
    if x <= 1.0:
        return 1.0
    return math.exp(-(x - 1.0) / m)


@njit(cache=True)
def _breakpoints(mu, sigma, m, pe, pf, lo, hi):
    pts = np.empty(4 + Z_CUTS.size + U_CUTS.size + U_CUTS_GAP.size)
    n = 0
    pts[n] = lo
    n += 1
    pts[n] = hi
    n += 1
    for c in (pe, pf):
        if lo < c < hi:
            pts[n] = c
            n += 1
    for z in Z_CUTS:
        c = mu + z * sigma
        if lo < c < hi:
            pts[n] = c
            n += 1
    for u in U_CUTS:
        c = pf / (1.0 + m * u)
        if lo < c < hi:
            pts[n] = c
            n += 1
    gap = pf - pe
    if gap > 0.0:
        for u in U_CUTS_GAP:
            c = gap / (m * u)
            if lo < c < hi:
                pts[n] = c
                n += 1
    out = np.sort(pts[:n])
    return out


@njit(cache=True)
def type_probs(mu, sigma, m, pe, pf):
    """Per-arrival purchase probabilities for one passenger type.

    Returns (econ | both open, first | both open, econ | economy only,
    first | first only).
    """
    lo = max(0.0, mu - 10.0 * sigma)
    hi = mu + 10.0 * sigma
    zmass = norm_sf(-mu / sigma)
    norm = INV_SQRT2PI / (sigma * zmass)
    pts = _breakpoints(mu, sigma, m, pe, pf, lo, hi)
    a_both = 0.0
    f_both = 0.0
    f_only = 0.0
    gap = pf - pe
    for s in range(pts.size - 1):
        a = pts[s]
        b = pts[s + 1]
        if b <= a:
            continue
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        for k in range(GL_X.size):
            v = mid + half * GL_X[k]
            if v <= 0.0:
                continue
            z = (v - mu) / sigma
            dens = GL_W[k] * half * norm * math.exp(-0.5 * z * z)
            fo = premium_tail(pf / v, m)
            f_only += fo * dens
            if v >= pe:
                tb = premium_tail(1.0 + gap / v, m)
                f_both += tb * dens
                a_both += (1.0 - tb) * dens
            else:
                f_both += fo * dens
    e_only = tn_sf(pe, mu, sigma)
    return (min(max(a_both, 0.0), 1.0), min(max(f_both, 0.0), 1.0),
            min(max(e_only, 0.0), 1.0), min(max(f_only, 0.0), 1.0))


@njit(cache=True)
def pooled_probs(theta, mu_l, sig_l, mu_b, sig_b, m, pe_l, pf_l, pe_b, pf_b, ce, cf, rechoice):
    """Type-pooled regime probabilities and expected per-arrival margins.

    Returns (alpha, beta, delta, gamma, r_both, r_econ, r_first) where alpha and
    beta are economy/first purchase probabilities with both cabins open, delta
    the economy probability with first exhausted, gamma the first probability
    with economy exhausted, and r_* the expected fare-minus-cost per arrival in
    each regime.
    """
    al = 0.0
    be = 0.0
    de = 0.0
    ga = 0.0
    rb = 0.0
    re = 0.0
    rf = 0.0
    for typ in range(2):
        if typ == 0:
            w = 1.0 - theta
            mu, sig, pe, pf = mu_l, sig_l, pe_l, pf_l
        else:
            w = theta
            mu, sig, pe, pf = mu_b, sig_b, pe_b, pf_b
        if w <= 0.0:
            continue
        a, b, d, g = type_probs(mu, sig, m, pe, pf)
        if not rechoice:
            d = a
            g = b
        al += w * a
        be += w * b
        de += w * d
        ga += w * g
        rb += w * (a * (pe - ce) + b * (pf - cf))
        re += w * d * (pe - ce)
        rf += w * g * (pf - cf)
    return al, be, de, ga, rb, re, rf


@njit(cache=True)
def survival(w):
    """P(N > i) for i = 0..n_max from renormalized Poisson weights."""
    n = w.size
    out = np.zeros(n)
    acc = 0.0
    for i in range(n - 1, -1, -1):
        out[i] = acc
        acc += w[i]
    return out


@njit(cache=True)
def _regime(a, b, qe, qf, qt):
    e_open = a < qe and a + b < qt
    f_open = b < qf and a + b < qt
    if e_open and f_open:
        return BOTH
    if e_open:
        return ECON
    if f_open:
        return FIRST
    return CLOSED


@njit(cache=True)
def _cell_probs(a, b, qe, qf, qt, alpha, beta, delta, gamma):
    reg = _regime(a, b, qe, qf, qt)
    if reg == BOTH:
        return alpha, beta
    if reg == ECON:
        return delta, 0.0
    if reg == FIRST:
        return 0.0, gamma
    return 0.0, 0.0


@njit(cache=True)
def pair_value(alpha, beta, delta, gamma, r_both, r_econ, r_first, qe, qf, ke, kf, w, surv, V, qt):
    """Expected period margin plus continuation for one release pair.

    ``qt`` caps total sales across cabins; pass ``qe + qf`` for no pooled cap.
    """
    nmax = w.size - 1
    D = np.zeros((qe + 1, qf + 1))
    Dn = np.zeros((qe + 1, qf + 1))
    D[0, 0] = 1.0
    profit = 0.0
    cont = 0.0
    for i in range(nmax + 1):
        wi = w[i]
        si = surv[i]
        for a in range(min(i, qe) + 1):
            for b in range(min(i - a, qf) + 1):
                d = D[a, b]
                if d == 0.0:
                    continue
                cont += wi * d * V[ke - a, kf - b]
                reg = _regime(a, b, qe, qf, qt)
                if reg == BOTH:
                    profit += si * d * r_both
                elif reg == ECON:
                    profit += si * d * r_econ
                elif reg == FIRST:
                    profit += si * d * r_first
        if i == nmax:
            break
        Dn[:, :] = 0.0
        for a in range(min(i, qe) + 1):
            for b in range(min(i - a, qf) + 1):
                d = D[a, b]
                if d == 0.0:
                    continue
                pe_, pf_ = _cell_probs(a, b, qe, qf, qt, alpha, beta, delta, gamma)
                Dn[a, b] += d * (1.0 - pe_ - pf_)
                if pe_ > 0.0:
                    Dn[a + 1, b] += d * pe_
                if pf_ > 0.0:
                    Dn[a, b + 1] += d * pf_
        D, Dn = Dn, D
    return profit + cont


@njit(cache=True)
def all_release_values(alpha, beta, delta, gamma, r_both, r_econ, r_first, ke, kf, w, surv, V,
                       qe_max, qf_max, qf_mask):
    """Values of every release pair (Qe <= qe_max, Qf <= qf_max) at fixed prices.

    For a fixed first-class cap the chain with an unbounded economy cap is run
    once; the mass that crosses each economy cap is diverted into a
    first-class-only line for that cap. Row ``Qe`` of the result combines the
    unbounded chain restricted to ``a < Qe`` with line ``Qe``.
    """
    nmax = w.size - 1
    out = np.full((qe_max + 1, qf_max + 1), -np.inf)
    nrow = max(qe_max, 1)
    X = np.zeros((nrow, qf_max + 1))
    Xn = np.zeros((nrow, qf_max + 1))
    L = np.zeros((qe_max + 1, qf_max + 1))
    Ln = np.zeros((qe_max + 1, qf_max + 1))
    RX = np.zeros(nrow)
    RL = np.zeros(qe_max + 1)
    for Qf in range(qf_max + 1):
        if not qf_mask[Qf]:
            continue
        X[:, :] = 0.0
        L[:, :] = 0.0
        RX[:] = 0.0
        RL[:] = 0.0
        if qe_max >= 1:
            X[0, 0] = 1.0
        L[0, 0] = 1.0
        for i in range(nmax + 1):
            wi = w[i]
            si = surv[i]
            for a in range(min(i, qe_max - 1) + 1):
                for b in range(min(i - a, Qf) + 1):
                    d = X[a, b]
                    if d == 0.0:
                        continue
                    RX[a] += wi * d * V[ke - a, kf - b]
                    RX[a] += si * d * (r_both if b < Qf else r_econ)
            for Qe in range(min(i, qe_max) + 1):
                for b in range(min(i - Qe, Qf) + 1):
                    d = L[Qe, b]
                    if d == 0.0:
                        continue
                    RL[Qe] += wi * d * V[ke - Qe, kf - b]
                    if b < Qf:
                        RL[Qe] += si * d * r_first
            if i == nmax:
                break
            Xn[:, : Qf + 1] = 0.0
            Ln[:, : Qf + 1] = 0.0
            for a in range(min(i, qe_max - 1) + 1):
                for b in range(min(i - a, Qf) + 1):
                    d = X[a, b]
                    if d == 0.0:
                        continue
                    if b < Qf:
                        pe_ = alpha
                        pf_ = beta
                        Xn[a, b + 1] += d * pf_
                    else:
                        pe_ = delta
                        pf_ = 0.0
                    Xn[a, b] += d * (1.0 - pe_ - pf_)
                    flux = d * pe_
                    if a + 1 < qe_max:
                        Xn[a + 1, b] += flux
                    Ln[a + 1, b] += flux
            for Qe in range(min(i, qe_max) + 1):
                for b in range(min(i - Qe, Qf) + 1):
                    d = L[Qe, b]
                    if d == 0.0:
                        continue
                    if b < Qf:
                        Ln[Qe, b] += d * (1.0 - gamma)
                        Ln[Qe, b + 1] += d * gamma
                    else:
                        Ln[Qe, b] += d
            X, Xn = Xn, X
            L, Ln = Ln, L
        acc = 0.0
        for Qe in range(qe_max + 1):
            out[Qe, Qf] = acc + RL[Qe]
            if Qe < qe_max:
                acc += RX[Qe]
    return out


@njit(cache=True)
def sales_chain(e_prob, f_prob, type_w, fares, qe, qf, w, qt):
    """Exact (sales_e, sales_f) pmf with type-split revenue accumulators.

    ``e_prob[typ, regime]`` and ``f_prob[typ, regime]`` are per-arrival purchase
    probabilities; ``fares[typ, cabin]`` the fares paid. Returns the pmf and
    ``rev[typ, a, b] = E[revenue from typ ; final sales = (a, b)]``.
    """
    nmax = w.size - 1
    D = np.zeros((qe + 1, qf + 1))
    Dn = np.zeros((qe + 1, qf + 1))
    A = np.zeros((2, qe + 1, qf + 1))
    An = np.zeros((2, qe + 1, qf + 1))
    P = np.zeros((qe + 1, qf + 1))
    R = np.zeros((2, qe + 1, qf + 1))
    D[0, 0] = 1.0
    for i in range(nmax + 1):
        wi = w[i]
        for a in range(min(i, qe) + 1):
            for b in range(min(i - a, qf) + 1):
                P[a, b] += wi * D[a, b]
                R[0, a, b] += wi * A[0, a, b]
                R[1, a, b] += wi * A[1, a, b]
        if i == nmax:
            break
        Dn[:, :] = 0.0
        An[:, :, :] = 0.0
        for a in range(min(i, qe) + 1):
            for b in range(min(i - a, qf) + 1):
                d = D[a, b]
                reg = _regime(a, b, qe, qf, qt)
                pe_ = 0.0
                pf_ = 0.0
                for typ in range(2):
                    pe_ += type_w[typ] * e_prob[typ, reg]
                    pf_ += type_w[typ] * f_prob[typ, reg]
                stay = 1.0 - pe_ - pf_
                Dn[a, b] += d * stay
                for typ in range(2):
                    An[typ, a, b] += A[typ, a, b] * stay
                if pe_ > 0.0:
                    Dn[a + 1, b] += d * pe_
                    for typ in range(2):
                        An[typ, a + 1, b] += A[typ, a, b] * pe_ + d * type_w[typ] * e_prob[typ, reg] * fares[typ, 0]
                if pf_ > 0.0:
                    Dn[a, b + 1] += d * pf_
                    for typ in range(2):
                        An[typ, a, b + 1] += A[typ, a, b] * pf_ + d * type_w[typ] * f_prob[typ, reg] * fares[typ, 1]
        D, Dn = Dn, D
        A, An = An, A
    return P, R


@njit(cache=True)
def ration(types, v, xi, lo, hi, pe_l, pf_l, pe_b, pf_b, qe, qf, qt, rechoice, cabin):
    """Sequential random rationing of arrivals ``lo..hi-1`` in arrival order.

    Writes the cabin of each arrival into ``cabin`` (-1 none, 0 economy,
    1 first) and returns (sales_e, sales_f, turned_away).
    """
    se = 0
    sf = 0
    away = 0
    for j in range(lo, hi):
        if types[j] == 1:
            pe = pe_b
            pf = pf_b
        else:
            pe = pe_l
            pf = pf_l
        ue = v[j] - pe
        uf = v[j] * xi[j] - pf
        if uf >= 0.0 and uf >= ue:
            pref = 1
        elif ue >= 0.0:
            pref = 0
        else:
            pref = -1
        e_open = se < qe and se + sf < qt
        f_open = sf < qf and se + sf < qt
        choice = -1
        if e_open and f_open:
            choice = pref
        elif rechoice:
            if f_open:
                if uf >= 0.0:
                    choice = 1
            elif e_open:
                if ue >= 0.0:
                    choice = 0
        else:
            if pref == 1 and f_open:
                choice = 1
            elif pref == 0 and e_open:
                choice = 0
        cabin[j] = choice
        if choice == 0:
            se += 1
        elif choice == 1:
            sf += 1
        elif pref != -1:
            away += 1
    return se, sf, away


@njit(cache=True)
def simulate_flights(offsets, types, v, xi, pe_l, pf_l, pe_b, pf_b, q_e, q_f, q_t, ke0, kf0, ce, cf,
                     rechoice, cabin, fare, period_of):
    """Simulate flights under a stored policy table.

    ``offsets[r, t]`` indexes the flat arrival arrays; policy arrays are indexed
    ``[t, k_e, k_f]``. Returns per-replication (ps, cs_business, cs_leisure,
    sold_e, sold_f) and fills per-arrival ``cabin``, ``fare`` and ``period_of``.
    """
    R = offsets.shape[0]
    T = offsets.shape[1] - 1
    out = np.zeros((R, 5))
    for r in range(R):
        ke = ke0
        kf = kf0
        ps = 0.0
        csb = 0.0
        csl = 0.0
        for t in range(T):
            lo = offsets[r, t]
            hi = offsets[r, t + 1]
            for j in range(lo, hi):
                period_of[j] = t
            pl_e = pe_l[t, ke, kf]
            pl_f = pf_l[t, ke, kf]
            pb_e = pe_b[t, ke, kf]
            pb_f = pf_b[t, ke, kf]
            se, sf, _ = ration(types, v, xi, lo, hi, pl_e, pl_f, pb_e, pb_f,
                               q_e[t, ke, kf], q_f[t, ke, kf], q_t[t, ke, kf], rechoice, cabin)
            for j in range(lo, hi):
                c = cabin[j]
                if c < 0:
                    fare[j] = 0.0
                    continue
                if c == 0:
                    p = pb_e if types[j] == 1 else pl_e
                    val = v[j]
                    ps += p - ce
                else:
                    p = pb_f if types[j] == 1 else pl_f
                    val = v[j] * xi[j]
                    ps += p - cf
                fare[j] = p
                if types[j] == 1:
                    csb += val - p
                else:
                    csl += val - p
            ke -= se
            kf -= sf
        out[r, 0] = ps
        out[r, 1] = csb
        out[r, 2] = csl
        out[r, 3] = ke0 - ke
        out[r, 4] = kf0 - kf
    return out


@njit(cache=True)
def assignment_table(ve, vf, lo, hi, xe_max, xf_max, skip):
    """Exact-count assignment DP over arrivals ``lo..hi-1``.

    ``G[x_e, x_f]`` is the best total net value using exactly ``x_e`` economy and
    ``x_f`` first seats (``-inf`` if infeasible). Arrival ``skip`` is excluded.
    ``choice[j, x_e, x_f]`` records the decision for traceback.
    """
    n = hi - lo
    G = np.full((xe_max + 1, xf_max + 1), -np.inf)
    G[0, 0] = 0.0
    choice = np.zeros((n, xe_max + 1, xf_max + 1), dtype=np.int8)
    for jj in range(n):
        j = lo + jj
        if j == skip:
            continue
        for xe in range(xe_max, -1, -1):
            for xf in range(xf_max, -1, -1):
                best = G[xe, xf]
                c = 0
                if xe > 0 and G[xe - 1, xf] + ve[j] > best:
                    best = G[xe - 1, xf] + ve[j]
                    c = 1
                if xf > 0 and G[xe, xf - 1] + vf[j] > best:
                    best = G[xe, xf - 1] + vf[j]
                    c = 2
                G[xe, xf] = best
                choice[jj, xe, xf] = c
    return G, choice


@njit(cache=True)
def best_with_continuation(G, Vn, ke, kf):
    """argmax over (x_e, x_f) of G[x] + Vn[ke - x_e, kf - x_f]."""
    best = -np.inf
    be = 0
    bf = 0
    for xe in range(min(ke, G.shape[0] - 1) + 1):
        for xf in range(min(kf, G.shape[1] - 1) + 1):
            g = G[xe, xf]
            if g == -np.inf:
                continue
            val = g + Vn[ke - xe, kf - xf]
            if val > best:
                best = val
                be = xe
                bf = xf
    return best, be, bf


@njit(cache=True)
def traceback(choice, lo, hi, xe, xf, skip, cabin):
    n = hi - lo
    for jj in range(n - 1, -1, -1):
        j = lo + jj
        if j == skip:
            cabin[j] = -1
            continue
        c = choice[jj, xe, xf]
        if c == 1:
            cabin[j] = 0
            xe -= 1
        elif c == 2:
            cabin[j] = 1
            xf -= 1
        else:
            cabin[j] = -1


@njit(cache=True)
def fd_value_table(batch_off, ve, vf, Vn, Ke, Kf):
    """Batch-averaged first-degree value table for one period."""
    M = batch_off.size - 1
    V = np.zeros((Ke + 1, Kf + 1))
    for mb in range(M):
        lo = batch_off[mb]
        hi = batch_off[mb + 1]
        n = hi - lo
        G, _ = assignment_table(ve, vf, lo, hi, min(n, Ke), min(n, Kf), -1)
        for ke in range(Ke + 1):
            for kf in range(Kf + 1):
                best, _, _ = best_with_continuation(G, Vn, ke, kf)
                V[ke, kf] += best
    return V / M


@njit(cache=True)
def simulate_first_degree(offsets, types, v, xi, ve, vf, VFD, Ke0, Kf0, vcg, cabin, pay):
    """Efficient within-period assignment against continuation values.

    ``VFD[t]`` is the continuation table used in period ``t`` (index ``T`` is
    zero). With ``vcg`` the VCG payment of each winner is written to ``pay``;
    otherwise winners pay their valuation.
    """
    R = offsets.shape[0]
    T = offsets.shape[1] - 1
    out = np.zeros((R, 5))
    for r in range(R):
        ke = Ke0
        kf = Kf0
        for t in range(T):
            lo = offsets[r, t]
            hi = offsets[r, t + 1]
            n = hi - lo
            Vn = VFD[t + 1]
            xe_max = min(n, ke)
            xf_max = min(n, kf)
            G, ch = assignment_table(ve, vf, lo, hi, xe_max, xf_max, -1)
            wstar, xe, xf = best_with_continuation(G, Vn, ke, kf)
            traceback(ch, lo, hi, xe, xf, -1, cabin)
            for j in range(lo, hi):
                c = cabin[j]
                pay[j] = 0.0
                if c < 0:
                    continue
                val = v[j] if c == 0 else v[j] * xi[j]
                if vcg:
                    Gm, _ = assignment_table(ve, vf, lo, hi, xe_max, xf_max, j)
                    wminus, _, _ = best_with_continuation(Gm, Vn, ke, kf)
                    pay[j] = val - (wstar - wminus)
                else:
                    pay[j] = val
            for j in range(lo, hi):
                c = cabin[j]
                if c < 0:
                    continue
                val = v[j] if c == 0 else v[j] * xi[j]
                cost = val - (ve[j] if c == 0 else vf[j])
                out[r, 0] += pay[j] - cost
                if types[j] == 1:
                    out[r, 1] += val - pay[j]
                else:
                    out[r, 2] += val - pay[j]
            ke -= xe
            kf -= xf
        out[r, 3] = Ke0 - ke
        out[r, 4] = Kf0 - kf
    return out


@njit(cache=True)
def first_best(offsets, ve, vf, Ke, Kf, cabin):
    """Offline assignment of each replication's pooled arrivals to seats."""
    R = offsets.shape[0]
    T = offsets.shape[1] - 1
    ts = np.zeros(R)
    for r in range(R):
        lo = offsets[r, 0]
        hi = offsets[r, T]
        n = hi - lo
        # at-most-capacity DP
        F = np.zeros((Ke + 1, Kf + 1))
        choice = np.zeros((n, Ke + 1, Kf + 1), dtype=np.int8)
        for jj in range(n):
            j = lo + jj
            a = ve[j]
            b = vf[j]
            if a <= 0.0 and b <= 0.0:
                continue
            for e in range(Ke, -1, -1):
                for f in range(Kf, -1, -1):
                    best = F[e, f]
                    c = 0
                    if e > 0 and F[e - 1, f] + a > best:
                        best = F[e - 1, f] + a
                        c = 1
                    if f > 0 and F[e, f - 1] + b > best:
                        best = F[e, f - 1] + b
                        c = 2
                    F[e, f] = best
                    choice[jj, e, f] = c
        ts[r] = F[Ke, Kf]
        e = Ke
        f = Kf
        for jj in range(n - 1, -1, -1):
            j = lo + jj
            c = choice[jj, e, f]
            if c == 1:
                cabin[j] = 0
                e -= 1
            elif c == 2:
                cabin[j] = 1
                f -= 1
            else:
                cabin[j] = -1
    return ts


@njit(cache=True)
def product_density(wv, mu, sigma, m):
    """Density of v * xi at ``wv`` for v zero-truncated normal, xi = 1 + Exp(m)."""
    out = np.zeros(wv.size)
    zmass = norm_sf(-mu / sigma)
    norm = INV_SQRT2PI / (sigma * zmass)
    for i in range(wv.size):
        w = wv[i]
        if w <= 0.0:
            continue
        lo = max(0.0, mu - 10.0 * sigma)
        hi = min(mu + 10.0 * sigma, w)
        if hi <= lo:
            continue
        pts = _breakpoints(mu, sigma, m, w, w, lo, hi)
        acc = 0.0
        for s in range(pts.size - 1):
            a = pts[s]
            b = pts[s + 1]
            if b <= a:
                continue
            half = 0.5 * (b - a)
            mid = 0.5 * (a + b)
            for k in range(GL_X.size):
                v = mid + half * GL_X[k]
                if v <= 0.0:
                    continue
                z = (v - mu) / sigma
                acc += GL_W[k] * half * norm * math.exp(-0.5 * z * z) * math.exp(-(w / v - 1.0) / m) / (m * v)
        out[i] = acc
    return out


@njit(cache=True)
def ration_batch(offsets, types, v, xi, pe_l, pf_l, pe_b, pf_b, qe, qf, qt, rechoice, cabin):
    """Ration each replication's arrivals under one policy entry."""
    R = offsets.size - 1
    out = np.zeros((R, 3), dtype=np.int64)
    for r in range(R):
        se, sf, away = ration(types, v, xi, offsets[r], offsets[r + 1], pe_l, pf_l, pe_b, pf_b,
                              qe, qf, qt, rechoice, cabin)
        out[r, 0] = se
        out[r, 1] = sf
        out[r, 2] = away
    return out

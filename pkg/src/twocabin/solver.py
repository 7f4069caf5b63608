"""Backward induction over (period, unsold seats) with release enumeration and price search."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from . import _container
from . import _kernels as K
from .demand import FlightParams, arrival_rate, business_share, expected_demand, price_upper_bound
from .market import CabinState, PolicyEntry, regime_tables
from .numerics import DEFAULT_EPS, DomainError, poisson_weights

__all__ = [
    "SolverConfig",
    "SolvedModel",
    "SolverError",
    "ShadowCostReport",
    "solve",
    "solve_uniform_price",
    "solve_third_degree",
    "optimize_prices",
    "shadow_costs",
    "save",
    "load",
    "regularity_diagnostic",
]

log = logging.getLogger(__name__)

PRICING_SCHEMES = ("discriminate", "uniform", "third_degree")
RELEASE_MODES = ("auto", "full", "window", "all_remaining")


class SolverError(RuntimeError):
    """Price search failed at a particular period and state."""

    def __init__(self, t: int, state, message: str = "no finite objective"):
        super().__init__(f"solver failed at t={t}, state={tuple(state)}: {message}")
        self.t = t
        self.state = tuple(state)


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings of the backward induction.

    ``release_mode``: ``full`` enumerates every release pair, ``window`` a
    window of small caps plus demand quantiles plus all-remaining,
    ``all_remaining`` fixes releases at the unsold seats, and ``auto`` picks
    ``full`` when ``k_e * k_f <= full_limit``. ``pricing`` selects the price
    vector: two cabin prices, one uniform price, or four type-specific prices.
    ``pooled_release`` replaces the per-cabin caps by one cap on total sales.
    """

    release_mode: str = "auto"
    window: int = 16
    full_limit: int = 512
    pricing: str = "discriminate"
    n_refine: int = 3
    max_alternations: int = 3
    xtol: float = 1e-3
    ftol: float = 1e-7
    max_fev: int = 1000
    price_lower: float | None = None
    price_upper: float | None = None
    eps: float = DEFAULT_EPS
    warm_start: bool = True
    rechoice: bool = True
    pooled_release: bool = False

    def __post_init__(self):
        if self.release_mode not in RELEASE_MODES:
            raise DomainError(f"release_mode must be one of {RELEASE_MODES}")
        if self.pricing not in PRICING_SCHEMES:
            raise DomainError(f"pricing must be one of {PRICING_SCHEMES}")
        if self.window < 1:
            raise DomainError("window must be >= 1")
        for b in (self.price_lower, self.price_upper):
            if b is not None and not (np.isfinite(b) and b > 0):
                raise DomainError("price bounds must be positive and finite")
        if self.n_refine < 1:
            raise DomainError("n_refine must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DomainError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SolvedModel:
    """Value and policy tables indexed ``[t - 1, k_e, k_f]``.

    ``value`` has ``T + 1`` slices, the last being the zero terminal value.
    """

    params: FlightParams
    initial: CabinState
    cfg: SolverConfig
    value: np.ndarray
    p_e: np.ndarray
    p_f: np.ndarray
    p_e_b: np.ndarray
    p_f_b: np.ndarray
    q_e: np.ndarray
    q_f: np.ndarray
    q_t: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.params.T

    def V(self, t: int, state) -> float:
        ke, kf = state
        return float(self.value[t - 1, ke, kf])

    def policy(self, t: int, state) -> PolicyEntry:
        ke, kf = state
        i = (t - 1, ke, kf)
        pe_b = None if self.cfg.pricing != "third_degree" else float(self.p_e_b[i])
        pf_b = None if self.cfg.pricing != "third_degree" else float(self.p_f_b[i])
        q_t = int(self.q_t[i]) if self.cfg.pooled_release else None
        return PolicyEntry(float(self.p_e[i]), float(self.p_f[i]), int(self.q_e[i]), int(self.q_f[i]),
                           pe_b, pf_b, q_t)

    def arrays(self) -> dict:
        return {"value": self.value, "p_e": self.p_e, "p_f": self.p_f, "p_e_b": self.p_e_b,
                "p_f_b": self.p_f_b, "q_e": self.q_e, "q_f": self.q_f, "q_t": self.q_t}

    def header(self) -> dict:
        return {"params": self.params.to_dict(), "initial": list(map(int, self.initial)),
                "cfg": self.cfg.to_dict()}

    @property
    def params_hash(self) -> str:
        return _container.digest(self.params.to_dict())

    @property
    def content_hash(self) -> str:
        arrs = self.arrays()
        return _container.digest(self.header(), *[np.ascontiguousarray(arrs[k]).tobytes() for k in sorted(arrs)])


# --- per-period evaluation -------------------------------------------------


class _Period:
    """Quantities shared by all states of one period."""

    def __init__(self, params: FlightParams, t: int, cfg: SolverConfig, v_next: np.ndarray):
        self.params = params
        self.t = t
        self.cfg = cfg
        self.lam = arrival_rate(params, t)
        self.theta = business_share(params, t)
        pw = poisson_weights(self.lam, cfg.eps)
        self.w = pw.weights
        self.nmax = pw.n_max
        self.surv = K.survival(self.w)
        self.v_next = np.ascontiguousarray(v_next, dtype=float)
        p = params
        self._consts = (p.mu_l, p.sigma_l, p.mu_b, p.sigma_b, p.mu_xi)
        self.lower, self.upper = _price_bounds(params, cfg)

    def probs(self, prices4):
        mu_l, s_l, mu_b, s_b, m = self._consts
        return K.pooled_probs(self.theta, mu_l, s_l, mu_b, s_b, m, prices4[0], prices4[1], prices4[2],
                              prices4[3], self.params.c_e, self.params.c_f, self.cfg.rechoice)

    def eff(self, q: int) -> int:
        return min(int(q), self.nmax + 1)

    def pair(self, prices4, qe, qf, ke, kf, qt=None) -> float:
        pr = self.probs(prices4)
        qe, qf = self.eff(qe), self.eff(qf)
        qt = qe + qf if qt is None else min(int(qt), qe + qf)
        return K.pair_value(*pr, qe, qf, ke, kf, self.w, self.surv, self.v_next, qt)

    def all_q(self, prices4, ke, kf, qf_mask):
        pr = self.probs(prices4)
        return K.all_release_values(*pr, ke, kf, self.w, self.surv, self.v_next,
                                    self.eff(ke), self.eff(kf), qf_mask)


def _price_bounds(params: FlightParams, cfg: SolverConfig):
    hi = cfg.price_upper if cfg.price_upper is not None else price_upper_bound(params)
    if cfg.price_lower is not None:
        lo_e = lo_f = cfg.price_lower
    else:
        lo_e, lo_f = params.c_e, params.c_f
    lo = {"discriminate": [lo_e, lo_f], "uniform": [lo_e], "third_degree": [lo_e, lo_f, lo_e, lo_f]}
    return np.array(lo[cfg.pricing], dtype=float), hi


def _prices4(scheme: str, z) -> tuple:
    if scheme == "discriminate":
        return (z[0], z[1], z[0], z[1])
    if scheme == "uniform":
        return (z[0], z[0], z[0], z[0])
    return (z[0], z[1], z[2], z[3])


def _from_prices4(scheme: str, p4) -> np.ndarray:
    if scheme == "discriminate":
        return np.array([p4[0], p4[1]], dtype=float)
    if scheme == "uniform":
        return np.array([0.5 * (p4[0] + p4[1])], dtype=float)
    return np.array(p4, dtype=float)


def _active(scheme: str, qe: int, qf: int, theta: float, rechoice: bool) -> np.ndarray:
    e_on = qe > 0 or (not rechoice and qf > 0)
    f_on = qf > 0 or (not rechoice and qe > 0)
    if scheme == "discriminate":
        return np.array([e_on, f_on])
    if scheme == "uniform":
        return np.array([qe > 0 or qf > 0])
    lei, bus = theta < 1.0, theta > 0.0
    return np.array([e_on and lei, f_on and lei, e_on and bus, f_on and bus])


def _canonical(scheme: str, z, active, lower) -> np.ndarray:
    """Replace prices that cannot affect the outcome by a fixed representative."""
    z = np.array(z, dtype=float)
    if scheme == "third_degree":
        for c in (0, 1):
            lei, bus = c, c + 2
            if not active[lei] and active[bus]:
                z[lei] = z[bus]
            elif not active[bus] and active[lei]:
                z[bus] = z[lei]
            elif not active[lei] and not active[bus]:
                z[lei] = z[bus] = lower[c]
        return z
    return np.where(active, z, lower)


def optimize_prices(params: FlightParams, t: int, state, q_e: int, q_f: int, v_next: np.ndarray,
                    cfg: SolverConfig = SolverConfig(), starts=None):
    """Best prices for fixed releases by multistart Nelder-Mead.

    Returns ``(p_e, p_f, value)`` for two-price schemes; under
    ``third_degree`` the first two entries are the leisure prices and the
    business prices are available through :func:`optimize_price_vector`.
    """
    z, val = optimize_price_vector(params, t, state, q_e, q_f, v_next, cfg, starts)
    p4 = _prices4(cfg.pricing, z)
    return float(p4[0]), float(p4[1]), float(val)


def optimize_price_vector(params, t, state, q_e, q_f, v_next, cfg=SolverConfig(), starts=None):
    ke, kf = state
    if q_e > ke or q_f > kf or q_e < 0 or q_f < 0:
        raise DomainError("releases must be feasible for the state")
    per = _Period(params, t, cfg, v_next)
    seeds = [np.asarray(s, dtype=float) for s in (starts or [])]
    seeds += _static_seeds(per)
    best = None
    for z0 in seeds:
        z, val = _local(per, ke, kf, (q_e, q_f, q_e + q_f), z0)
        if best is None or val > best[1]:
            best = (z, val)
    if best is None or not np.isfinite(best[1]):
        raise SolverError(t, state, "all starts failed")
    return best


def _local(per: _Period, ke, kf, key, z0):
    qe, qf, qt = key
    cfg = per.cfg
    scheme = cfg.pricing
    lower, upper = per.lower, per.upper
    act = _active(scheme, min(qe, qt), min(qf, qt), per.theta, cfg.rechoice)
    z0 = np.clip(np.asarray(z0, dtype=float), lower, upper)
    z0 = _canonical(scheme, z0, act, lower)
    base = per.pair(_prices4(scheme, z0), qe, qf, ke, kf, qt)
    if not act.any():
        return z0, base
    idx = np.flatnonzero(act)

    def negval(y):
        z = z0.copy()
        z[idx] = y
        return -per.pair(_prices4(scheme, _canonical(scheme, z, act, lower)), qe, qf, ke, kf, qt)

    y0 = z0[idx]
    lo, hi = lower[idx], np.full(idx.size, upper)
    simplex = [y0]
    for i in range(idx.size):
        step = max(0.08 * abs(y0[i]), 20.0)
        y = y0.copy()
        y[i] = y0[i] + step if y0[i] + step <= hi[i] else y0[i] - step
        simplex.append(y)
    res = optimize.minimize(negval, y0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                            options={"xatol": cfg.xtol, "fatol": cfg.ftol, "maxfev": cfg.max_fev,
                                     "initial_simplex": np.array(simplex)})
    if np.isfinite(res.fun) and -res.fun > base:
        z = z0.copy()
        z[idx] = np.clip(res.x, lo, hi)
        z = _canonical(scheme, z, act, lower)
        return z, per.pair(_prices4(scheme, z), qe, qf, ke, kf, qt)
    return z0, base


def _static_seeds(per: _Period):
    """Prices maximizing the one-period margin per arrival, ignoring capacity."""
    cache = getattr(per, "_static", None)
    if cache is not None:
        return cache
    p = per.params
    scheme = per.cfg.pricing
    guess = {"discriminate": [p.mu_l, p.mu_l * (1 + p.mu_xi) * 1.2],
             "uniform": [p.mu_l],
             "third_degree": [p.mu_l, p.mu_l * (1 + p.mu_xi) * 1.2, p.mu_b, p.mu_b * (1 + p.mu_xi) * 1.2]}
    z0 = np.clip(np.array(guess[scheme], dtype=float), per.lower, per.upper)
    act = _active(scheme, 1, 1, per.theta, per.cfg.rechoice)
    idx = np.flatnonzero(act)

    def neg(y):
        z = z0.copy()
        z[idx] = y
        pr = per.probs(_prices4(scheme, _canonical(scheme, z, act, per.lower)))
        return -pr[4]

    res = optimize.minimize(neg, z0[idx], method="Nelder-Mead",
                            bounds=list(zip(per.lower[idx], np.full(idx.size, per.upper))),
                            options={"xatol": 0.01, "fatol": 1e-9, "maxfev": 2000})
    z = z0.copy()
    z[idx] = res.x
    z = _canonical(scheme, z, act, per.lower)
    seeds = [np.clip(z * f, per.lower, per.upper) for f in (1.0, 1.6, 2.5)]
    per._static = seeds
    return seeds


# --- backward induction -----------------------------------------------------


def _release_mask(per: _Period, ke: int, kf: int, mode: str, window: int, full_limit: int):
    qe_max, qf_max = per.eff(ke), per.eff(kf)
    if mode == "auto":
        mode = "full" if ke * kf <= full_limit else "window"
    mask = np.zeros((qe_max + 1, qf_max + 1), dtype=bool)
    if mode == "full":
        mask[:, :] = True
    elif mode == "all_remaining":
        mask[qe_max, qf_max] = True
    else:
        levels = (0.5, 0.75, 0.9, 0.97, 0.99, 0.999)
        quant = stats.poisson.ppf(levels, per.lam).astype(int) if per.lam > 0 else np.zeros(1, int)

        def axis(k, kmax):
            keep = np.zeros(kmax + 1, dtype=bool)
            keep[: min(window, kmax) + 1] = True
            keep[kmax] = True
            keep[np.clip(quant, 0, kmax)] = True
            return keep

        mask = np.outer(axis(ke, qe_max), axis(kf, qf_max))
    return mask, mode


class _StateScan:
    """Candidate release keys ``(q_e, q_f, q_t)`` of one state and their values at given prices.

    Keys hold effective caps: caps above the Poisson support are stored as
    ``n_max + 1``. Without pooling ``q_t = q_e + q_f`` never binds.
    """

    def __init__(self, per: _Period, ke: int, kf: int):
        cfg = per.cfg
        self.per, self.ke, self.kf = per, ke, kf
        self.pooled = cfg.pooled_release
        self.qe_max, self.qf_max = per.eff(ke), per.eff(kf)
        mask, self.mode = _release_mask(per, ke, kf, cfg.release_mode, cfg.window, cfg.full_limit)
        if self.pooled:
            self.qt_max = min(self.qe_max + self.qf_max, per.nmax + 1)
            tmask = np.zeros(self.qt_max + 1, dtype=bool)
            if self.mode == "all_remaining":
                tmask[self.qt_max] = True
            else:
                rows = np.flatnonzero(mask.any(axis=1))
                cols = np.flatnonzero(mask.any(axis=0))
                tmask[np.clip(np.add.outer(rows, cols).ravel(), 0, self.qt_max)] = True
            self.mask = tmask
        else:
            self.mask = mask

    def key(self, qe: int, qf: int, qt: int | None = None) -> tuple:
        qe, qf = min(self.per.eff(qe), self.qe_max), min(self.per.eff(qf), self.qf_max)
        if self.pooled:
            qt = qe + qf if qt is None else qt
            return (self.qe_max, self.qf_max, int(min(qt, self.qt_max)))
        if self.mode == "all_remaining":
            return (self.qe_max, self.qf_max, self.qe_max + self.qf_max)
        return (int(qe), int(qf), int(qe + qf))

    def allow(self, key):
        if self.pooled:
            self.mask[key[2]] = True
        else:
            self.mask[key[0], key[1]] = True

    def scan(self, prices4):
        """(keys, values) over all allowed release keys."""
        per = self.per
        if self.pooled:
            ts = np.flatnonzero(self.mask)
            vals = np.array([per.pair(prices4, self.qe_max, self.qf_max, self.ke, self.kf, int(q)) for q in ts])
            return [(self.qe_max, self.qf_max, int(q)) for q in ts], vals
        M = per.all_q(prices4, self.ke, self.kf, self.mask.any(axis=0))
        a, b = np.nonzero(self.mask)
        return [(int(i), int(j), int(i + j)) for i, j in zip(a, b)], M[a, b]

    def stored(self, key) -> tuple:
        nmax = self.per.nmax
        qe = self.ke if key[0] > nmax else key[0]
        qf = self.kf if key[1] > nmax else key[1]
        qt = self.ke + self.kf if key[2] > nmax else key[2]
        return qe, qf, min(qt, qe + qf)


def _solve_period(per: _Period, Ke: int, Kf: int, out: dict, prev: dict | None, seed_model, t: int):
    cfg = per.cfg
    scheme = cfg.pricing
    i_t = t - 1
    for ke in range(Ke + 1):
        for kf in range(Kf + 1):
            if ke == 0 and kf == 0:
                z = _canonical(scheme, per.lower.copy(), np.zeros(per.lower.size, bool), per.lower)
                _store(out, i_t, ke, kf, z, (0, 0, 0), float(per.v_next[0, 0]), scheme)
                continue
            st = _StateScan(per, ke, kf)
            fixed = []  # (z, key) candidates whose exact value is always considered
            seeds = []
            if cfg.warm_start:
                for nke, nkf in ((ke - 1, kf), (ke, kf - 1)):
                    if nke >= 0 and nkf >= 0:
                        fixed.append((out["z"][nke, nkf], st.key(out["q_e"][i_t, nke, nkf],
                                                                 out["q_f"][i_t, nke, nkf],
                                                                 out["q_t"][i_t, nke, nkf])))
                if prev is not None:
                    seeds.append(prev["z"][ke, kf])
            if seed_model is not None:
                pol = seed_model.policy(t, (ke, kf))
                fixed.append((_from_prices4(scheme, pol.prices()), st.key(pol.q_e, pol.q_f, pol.total_cap())))
            for z, key in fixed:
                st.allow(key)
                seeds.append(z)
            seeds += _static_seeds(per)
            seeds = _dedupe(seeds)
            cands: dict[tuple, tuple] = {}

            def consider(key, z, val):
                cur = cands.get(key)
                if cur is None or val > cur[1]:
                    cands[key] = (np.asarray(z, dtype=float), float(val))

            for z in seeds:
                keys, vals = st.scan(_prices4(scheme, z))
                for j in np.argsort(-vals, kind="stable")[: cfg.n_refine]:
                    if np.isfinite(vals[j]):
                        consider(keys[j], z, vals[j])
            for z, key in fixed:
                consider(key, z, per.pair(_prices4(scheme, z), *key[:2], ke, kf, key[2]))
            ranked = sorted(cands.items(), key=lambda kv: (-kv[1][1], kv[0]))[: cfg.n_refine]
            refined = dict(cands)
            for key, (z, _) in ranked:
                zz, vv = _local(per, ke, kf, key, z)
                if vv > refined[key][1]:
                    refined[key] = (zz, vv)
            best_key, (best_z, best_v) = _pick(refined)
            for _ in range(cfg.max_alternations):
                keys, vals = st.scan(_prices4(scheme, best_z))
                j = int(np.argmax(vals))
                key = keys[j]
                if key == best_key or not vals[j] > best_v + 1e-9 * max(1.0, abs(best_v)):
                    break
                zz, vv = _local(per, ke, kf, key, best_z)
                cur = refined.get(key)
                if cur is None or vv > cur[1]:
                    refined[key] = (zz, vv)
                best_key, (best_z, best_v) = _pick(refined)
            if not np.isfinite(best_v):
                raise SolverError(t, (ke, kf))
            _store(out, i_t, ke, kf, best_z, st.stored(best_key), best_v, scheme)


def _pick(refined):
    # highest value, then smallest releases, then lowest prices
    return min(refined.items(), key=lambda kv: (-kv[1][1], kv[0], tuple(kv[1][0])))


def _dedupe(seeds):
    out, seen = [], set()
    for s in seeds:
        key = tuple(np.round(np.asarray(s, dtype=float), 6))
        if key not in seen:
            seen.add(key)
            out.append(np.asarray(s, dtype=float))
    return out


def _store(out, i_t, ke, kf, z, q, val, scheme):
    p4 = _prices4(scheme, z)
    out["z"][ke, kf] = z
    out["p_e"][i_t, ke, kf], out["p_f"][i_t, ke, kf] = p4[0], p4[1]
    out["p_e_b"][i_t, ke, kf], out["p_f_b"][i_t, ke, kf] = p4[2], p4[3]
    out["q_e"][i_t, ke, kf], out["q_f"][i_t, ke, kf], out["q_t"][i_t, ke, kf] = q
    out["value"][i_t, ke, kf] = val


def solve(params: FlightParams, initial, cfg: SolverConfig = SolverConfig(),
          seed_model: SolvedModel | None = None) -> SolvedModel:
    """Solve the finite-horizon pricing and seat-release problem.

    Every state ``(k_e, k_f) <= initial`` is solved in every period. A
    ``seed_model`` solved under a coarser price scheme contributes its policy
    as an exactly evaluated candidate, so the result weakly dominates it.
    """
    initial = CabinState(int(initial[0]), int(initial[1]))
    if initial.k_e < 0 or initial.k_f < 0:
        raise DomainError("initial capacities must be >= 0")
    Ke, Kf = initial
    T = params.T
    shape = (T, Ke + 1, Kf + 1)
    dim = {"discriminate": 2, "uniform": 1, "third_degree": 4}[cfg.pricing]
    out = {"value": np.zeros((T + 1, Ke + 1, Kf + 1)),
           "p_e": np.zeros(shape), "p_f": np.zeros(shape), "p_e_b": np.zeros(shape), "p_f_b": np.zeros(shape),
           "q_e": np.zeros(shape, dtype=np.int64), "q_f": np.zeros(shape, dtype=np.int64),
           "q_t": np.zeros(shape, dtype=np.int64)}
    prev = None
    for t in range(T, 0, -1):
        out["z"] = np.zeros((Ke + 1, Kf + 1, dim))
        per = _Period(params, t, cfg, out["value"][t])
        _solve_period(per, Ke, Kf, out, prev, seed_model, t)
        prev = {"z": out["z"]}
        log.debug("solved period %d: V(initial)=%.4f", t, out["value"][t - 1, Ke, Kf])
    out.pop("z")
    return SolvedModel(params, initial, cfg, **out)


def solve_uniform_price(params: FlightParams, initial, cfg: SolverConfig = SolverConfig()) -> SolvedModel:
    """Solve with one price shared by both cabins; releases stay per cabin.

    With re-choice and one cabin empty the other cabin's price is the only
    one that matters, so the problem is the two-price one with the irrelevant
    price tied to it, and the values agree exactly.
    """
    ucfg = replace(cfg, pricing="uniform")
    ke, kf = int(initial[0]), int(initial[1])
    if not (cfg.rechoice and (ke == 0 or kf == 0)):
        return solve(params, initial, ucfg)
    m = solve(params, initial, replace(cfg, pricing="discriminate"))
    p = m.p_e if kf == 0 else m.p_f
    return replace(m, cfg=ucfg, p_e=p.copy(), p_f=p.copy(), p_e_b=p.copy(), p_f_b=p.copy())


def solve_third_degree(params: FlightParams, initial, cfg: SolverConfig = SolverConfig(),
                       seed_model: SolvedModel | None = None) -> SolvedModel:
    """Solve with separate business and leisure prices and shared releases."""
    return solve(params, initial, replace(cfg, pricing="third_degree"), seed_model=seed_model)


# --- reporting --------------------------------------------------------------


@dataclass
class ShadowCostReport:
    """Seat opportunity costs and state visitation.

    ``opportunity_e[t-1, k_e, k_f] = V_{t+1}(k_e, k_f) - V_{t+1}(k_e - 1, k_f)``
    (NaN when no economy seat is left); ``marginal_*`` adds the peanut cost.
    ``visitation[t-1]`` is the distribution of the state at the start of
    period ``t`` under the optimal policy. ``dcont_dp*`` hold the derivative of
    the expected continuation value with respect to each posted price, a
    price-side notion of shadow cost reported alongside.
    """

    opportunity_e: np.ndarray
    opportunity_f: np.ndarray
    marginal_e: np.ndarray
    marginal_f: np.ndarray
    visitation: np.ndarray
    dcont_dpe: np.ndarray
    dcont_dpf: np.ndarray

    def rows(self, min_prob: float = 0.0):
        T, E, F = self.visitation.shape
        for i in range(T):
            for ke in range(E):
                for kf in range(F):
                    p = self.visitation[i, ke, kf]
                    if p > min_prob:
                        yield {"t": i + 1, "k_e": ke, "k_f": kf, "prob": p,
                               "opportunity_e": self.opportunity_e[i, ke, kf],
                               "opportunity_f": self.opportunity_f[i, ke, kf],
                               "marginal_e": self.marginal_e[i, ke, kf],
                               "marginal_f": self.marginal_f[i, ke, kf],
                               "dcont_dpe": self.dcont_dpe[i, ke, kf],
                               "dcont_dpf": self.dcont_dpf[i, ke, kf]}


def _policy_pmf(model: SolvedModel, t: int, ke: int, kf: int, pol: PolicyEntry | None = None):
    params = model.params
    pol = pol or model.policy(t, (ke, kf))
    pw = poisson_weights(arrival_rate(params, t), model.cfg.eps)
    theta = business_share(params, t)
    e_prob, f_prob, fares = regime_tables(params, t, pol, model.cfg.rechoice)
    qe = min(pol.q_e, pw.n_max + 1)
    qf = min(pol.q_f, pw.n_max + 1)
    P, _ = K.sales_chain(e_prob, f_prob, np.array([1.0 - theta, theta]), fares, qe, qf, pw.weights,
                         min(pol.total_cap(), qe + qf))
    return P


def _expected_next(model, t, ke, kf, pol):
    P = _policy_pmf(model, t, ke, kf, pol)
    Vn = model.value[t]
    a = np.arange(P.shape[0])[:, None]
    b = np.arange(P.shape[1])[None, :]
    return float((P * Vn[ke - a, kf - b]).sum())


def shadow_costs(model: SolvedModel, min_prob: float = 1e-14) -> ShadowCostReport:
    """Seat opportunity costs per (t, state) and forward state visitation."""
    params = model.params
    T = params.T
    Ke, Kf = model.initial
    V = model.value
    oc_e = np.full((T, Ke + 1, Kf + 1), np.nan)
    oc_f = np.full((T, Ke + 1, Kf + 1), np.nan)
    oc_e[:, 1:, :] = V[1:, 1:, :] - V[1:, :-1, :]
    oc_f[:, :, 1:] = V[1:, :, 1:] - V[1:, :, :-1]
    visit = np.zeros((T, Ke + 1, Kf + 1))
    visit[0, Ke, Kf] = 1.0
    d_e = np.full((T, Ke + 1, Kf + 1), np.nan)
    d_f = np.full((T, Ke + 1, Kf + 1), np.nan)
    for t in range(1, T + 1):
        for ke, kf in zip(*np.nonzero(visit[t - 1] > min_prob)):
            ke, kf = int(ke), int(kf)
            pol = model.policy(t, (ke, kf))
            P = _policy_pmf(model, t, ke, kf, pol)
            if t < T:
                a, b = np.nonzero(P)
                np.add.at(visit[t], (ke - a, kf - b), visit[t - 1, ke, kf] * P[a, b])
            for arr, attr in ((d_e, "p_e"), (d_f, "p_f")):
                h = max(1e-3 * getattr(pol, attr), 0.5)
                up = replace(pol, **{attr: getattr(pol, attr) + h})
                dn = replace(pol, **{attr: max(getattr(pol, attr) - h, 0.0)})
                step = getattr(up, attr) - getattr(dn, attr)
                arr[t - 1, ke, kf] = (_expected_next(model, t, ke, kf, up)
                                      - _expected_next(model, t, ke, kf, dn)) / step
    return ShadowCostReport(oc_e, oc_f, oc_e + params.c_e, oc_f + params.c_f, visit, d_e, d_f)


def regularity_diagnostic(params: FlightParams, t: int, grid_e=None, grid_f=None, h: float = 1.0):
    """Finite-difference check of downward, concave and cross-curvature demand.

    Returns a list of violations, each a dict naming the condition and the
    price pair; an empty list means the conditions hold on the grid.
    """
    if grid_e is None:
        grid_e = np.linspace(params.c_e + 2 * h, params.mu_l * 2, 8)
    if grid_f is None:
        grid_f = np.linspace(params.c_f + 2 * h, params.mu_b * (1 + params.mu_xi) * 2, 8)

    def q(pe, pf):
        return np.array(expected_demand(params, t, pe, pf))

    out = []
    for pe in grid_e:
        for pf in grid_f:
            q0 = q(pe, pf)
            qpe, qme = q(pe + h, pf), q(pe - h, pf)
            qpf, qmf = q(pe, pf + h), q(pe, pf - h)
            dqe_dpe = (qpe[0] - qme[0]) / (2 * h)
            dqf_dpf = (qpf[1] - qmf[1]) / (2 * h)
            d2qe_dpe2 = (qpe[0] - 2 * q0[0] + qme[0]) / h ** 2
            d2qf_dpf2 = (qpf[1] - 2 * q0[1] + qmf[1]) / h ** 2
            d2qe_dpf2 = (qpf[0] - 2 * q0[0] + qmf[0]) / h ** 2
            d2qf_dpe2 = (qpe[1] - 2 * q0[1] + qme[1]) / h ** 2
            cross_e = ((q(pe + h, pf + h)[0] - q(pe + h, pf - h)[0] - q(pe - h, pf + h)[0]
                        + q(pe - h, pf - h)[0]) / (4 * h * h))
            cross_f = ((q(pe + h, pf + h)[1] - q(pe + h, pf - h)[1] - q(pe - h, pf + h)[1]
                        + q(pe - h, pf - h)[1]) / (4 * h * h))
            checks = {
                "downward_demand": dqe_dpe <= 0 and dqf_dpf <= 0,
                "concave_demand": d2qe_dpe2 < cross_e <= 0 and d2qf_dpf2 < cross_f <= 0,
                "cross_price_curvature": d2qe_dpf2 < 0 and d2qf_dpe2 < 0,
            }
            for name, ok in checks.items():
                if not ok:
                    out.append({"condition": name, "t": t, "p_e": float(pe), "p_f": float(pf)})
    return out


# --- persistence ------------------------------------------------------------


def save(model: SolvedModel, path) -> str:
    """Write ``model`` to ``path``; returns the content hash stored in the header."""
    meta = model.header()
    meta["params_hash"] = model.params_hash
    meta["content_hash"] = model.content_hash
    meta["extra"] = model.meta
    _container.write(path, "solved_model", meta, model.arrays())
    return meta["content_hash"]


def load(path) -> SolvedModel:
    """Read a model written by :func:`save`, verifying checksum and hashes."""
    meta, arrays = _container.read(path, kind="solved_model")
    params = FlightParams(**meta["params"])
    if _container.digest(params.to_dict()) != meta["params_hash"]:
        raise _container.ChecksumError(f"{path}: params hash mismatch")
    model = SolvedModel(params, CabinState(*meta["initial"]), SolverConfig.from_dict(meta["cfg"]),
                        meta=meta.get("extra", {}), **arrays)
    if model.content_hash != meta["content_hash"]:
        raise _container.ChecksumError(f"{path}: content hash mismatch")
    return model

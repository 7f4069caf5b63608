"""Within-period demand realization: rationing simulator, exact sales pmf, kernels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import _kernels as K
from .demand import AvailabilityRegime, FlightParams, arrival_rate, business_share
from .numerics import DEFAULT_EPS, DomainError, RandomStream, _trunc_normal_ppf, poisson_weights

__all__ = [
    "CabinState",
    "PolicyEntry",
    "Passenger",
    "PeriodOutcome",
    "SalesPmf",
    "draw_arrivals",
    "simulate_period",
    "simulate_period_batch",
    "sales_pmf",
    "transition_kernel",
    "single_cabin_kernel",
    "expected_flow_profit",
]

LEISURE, BUSINESS = 0, 1


class CabinState(NamedTuple):
    """Unsold economy and first-class seats."""

    k_e: int
    k_f: int


@dataclass(frozen=True)
class PolicyEntry:
    """Posted prices and seat-release caps for one period and state.

    ``p_e_b``/``p_f_b`` are business-traveller prices under third-degree
    discrimination; ``None`` means business travellers see the posted prices.
    ``q_t`` optionally caps total sales across both cabins (pooled release).
    """

    p_e: float
    p_f: float
    q_e: int
    q_f: int
    p_e_b: float | None = None
    p_f_b: float | None = None
    q_t: int | None = None

    def __post_init__(self):
        if self.q_e < 0 or self.q_f < 0 or (self.q_t is not None and self.q_t < 0):
            raise DomainError("releases must be >= 0")
        for p in self.prices():
            if not p >= 0:
                raise DomainError("prices must be >= 0")

    def prices(self) -> tuple[float, float, float, float]:
        """(p_e leisure, p_f leisure, p_e business, p_f business)."""
        pe_b = self.p_e if self.p_e_b is None else self.p_e_b
        pf_b = self.p_f if self.p_f_b is None else self.p_f_b
        return float(self.p_e), float(self.p_f), float(pe_b), float(pf_b)

    def total_cap(self) -> int:
        return self.q_e + self.q_f if self.q_t is None else min(self.q_t, self.q_e + self.q_f)

    def check(self, state: CabinState):
        if self.q_e > state.k_e or self.q_f > state.k_f:
            raise DomainError(f"releases ({self.q_e}, {self.q_f}) exceed state {tuple(state)}")


class Passenger(NamedTuple):
    type: str
    v: float
    xi: float
    cabin: str
    fare: float


@dataclass(frozen=True)
class PeriodOutcome:
    sales_e: int
    sales_f: int
    served: list = field(default_factory=list)
    turned_away: int = 0


@dataclass(frozen=True)
class SalesPmf:
    """Exact distribution of period sales with type-split revenue.

    ``prob[a, b]`` is P(sales = (a, b)); ``revenue[typ, a, b]`` is the expected
    fare revenue from type ``typ`` (0 leisure, 1 business) on the event
    sales = (a, b).
    """

    prob: np.ndarray
    revenue: np.ndarray
    q_e: int
    q_f: int
    n_max: int

    def marginal_e(self) -> np.ndarray:
        return self.prob.sum(axis=1)

    def marginal_f(self) -> np.ndarray:
        return self.prob.sum(axis=0)

    def mean_sales(self) -> tuple[float, float]:
        a = np.arange(self.prob.shape[0])
        b = np.arange(self.prob.shape[1])
        return float(a @ self.marginal_e()), float(b @ self.marginal_f())


def draw_arrivals(s: RandomStream, params: FlightParams, t: int, n_reps: int | None = None):
    """Draw one period of arrivals.

    Returns ``(offsets, types, v, xi)``; arrivals of replication ``r`` occupy
    ``offsets[r]:offsets[r + 1]`` in arrival order. Each arrival consumes three
    uniforms (type, valuation, premium), so draws are aligned across policies.
    """
    lam = arrival_rate(params, t)
    theta = business_share(params, t)
    reps = 1 if n_reps is None else int(n_reps)
    counts = s.poisson(lam, reps) if lam > 0 else np.zeros(reps, dtype=np.int64)
    offsets = np.zeros(reps + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    u = s.uniform((3, total))
    types = (u[0] < theta).astype(np.int8)
    v = np.empty(total)
    for typ, dist in ((LEISURE, params.leisure()), (BUSINESS, params.business())):
        mask = types == typ
        if mask.any():
            v[mask] = _trunc_normal_ppf(u[1][mask], dist)
    xi = params.premium().ppf(u[2])
    return offsets, types, v, xi


def _ration(offsets, types, v, xi, pol: PolicyEntry, rechoice: bool):
    pe_l, pf_l, pe_b, pf_b = pol.prices()
    cabin = np.full(types.size, -1, dtype=np.int64)
    res = K.ration_batch(offsets, types, v, xi, pe_l, pf_l, pe_b, pf_b,
                         int(pol.q_e), int(pol.q_f), int(pol.total_cap()), bool(rechoice), cabin)
    return res, cabin


def simulate_period(s: RandomStream, params: FlightParams, t: int, state: CabinState,
                    pol: PolicyEntry, rechoice: bool = True) -> PeriodOutcome:
    """One realization of period-``t`` demand under sequential random rationing."""
    state = CabinState(*state)
    pol.check(state)
    offsets, types, v, xi = draw_arrivals(s, params, t)
    res, cabin = _ration(offsets, types, v, xi, pol, rechoice)
    pe_l, pf_l, pe_b, pf_b = pol.prices()
    served = []
    for j in range(types.size):
        if cabin[j] < 0:
            continue
        bus = types[j] == BUSINESS
        if cabin[j] == 0:
            fare = pe_b if bus else pe_l
        else:
            fare = pf_b if bus else pf_l
        served.append(Passenger("B" if bus else "L", float(v[j]), float(xi[j]),
                                "E" if cabin[j] == 0 else "F", fare))
    return PeriodOutcome(int(res[0, 0]), int(res[0, 1]), served, int(res[0, 2]))


def simulate_period_batch(s: RandomStream, params: FlightParams, t: int, state: CabinState,
                          pol: PolicyEntry, n_reps: int, rechoice: bool = True) -> np.ndarray:
    """``n_reps`` independent period realizations; rows are (sales_e, sales_f, turned_away)."""
    pol.check(CabinState(*state))
    offsets, types, v, xi = draw_arrivals(s, params, t, n_reps)
    res, _ = _ration(offsets, types, v, xi, pol, rechoice)
    return res


def regime_tables(params: FlightParams, t: int, pol: PolicyEntry, rechoice: bool = True):
    """Per-type, per-regime purchase probabilities for the chain kernels."""
    pe_l, pf_l, pe_b, pf_b = pol.prices()
    e_prob = np.zeros((2, 4))
    f_prob = np.zeros((2, 4))
    specs = ((LEISURE, params.mu_l, params.sigma_l, pe_l, pf_l),
             (BUSINESS, params.mu_b, params.sigma_b, pe_b, pf_b))
    for typ, mu, sig, pe, pf in specs:
        a, b, d, g = K.type_probs(mu, sig, params.mu_xi, pe, pf)
        if not rechoice:
            d, g = a, b
        e_prob[typ, K.BOTH], f_prob[typ, K.BOTH] = a, b
        e_prob[typ, K.ECON] = d
        f_prob[typ, K.FIRST] = g
    fares = np.array([[pe_l, pf_l], [pe_b, pf_b]])
    return e_prob, f_prob, fares


def sales_pmf(params: FlightParams, t: int, state: CabinState, pol: PolicyEntry,
              eps: float = DEFAULT_EPS, rechoice: bool = True) -> SalesPmf:
    """Exact distribution of (sales_e, sales_f) in period ``t``.

    Conditions on the number of arrivals through truncated Poisson weights and
    runs an arrival-by-arrival chain over sold counts whose per-arrival choice
    probabilities follow the current availability regime.
    """
    state = CabinState(*state)
    pol.check(state)
    lam = arrival_rate(params, t)
    pw = poisson_weights(lam, eps)
    theta = business_share(params, t)
    e_prob, f_prob, fares = regime_tables(params, t, pol, rechoice)
    qe = min(int(pol.q_e), pw.n_max + 1)
    qf = min(int(pol.q_f), pw.n_max + 1)
    qt = min(pol.total_cap(), qe + qf)
    P, R = K.sales_chain(e_prob, f_prob, np.array([1.0 - theta, theta]), fares, qe, qf, pw.weights, qt)
    prob = np.zeros((pol.q_e + 1, pol.q_f + 1))
    rev = np.zeros((2, pol.q_e + 1, pol.q_f + 1))
    prob[: qe + 1, : qf + 1] = P
    rev[:, : qe + 1, : qf + 1] = R
    return SalesPmf(prob, rev, int(pol.q_e), int(pol.q_f), pw.n_max)


def transition_kernel(params: FlightParams, t: int, state: CabinState, pol: PolicyEntry,
                      eps: float = DEFAULT_EPS, rechoice: bool = True) -> dict[CabinState, float]:
    """Distribution of next period's unsold seats."""
    state = CabinState(*state)
    pmf = sales_pmf(params, t, state, pol, eps, rechoice)
    out = {}
    for a, b in zip(*np.nonzero(pmf.prob)):
        out[CabinState(state.k_e - int(a), state.k_f - int(b))] = float(pmf.prob[a, b])
    return out


def single_cabin_kernel(lambda_t: float, buy_prob: float, m: int) -> dict[int, float]:
    """Seats-remaining transition for one uncensored cabin.

    Sales are Poisson with mean ``lambda_t * buy_prob``; the mass of demand at or
    above ``m`` is pooled at sell-out.
    """
    if lambda_t < 0 or not 0 <= buy_prob <= 1 or m < 0:
        raise DomainError("need lambda_t >= 0, buy_prob in [0,1], m >= 0")
    rate = lambda_t * buy_prob
    d = np.arange(m + 1)
    probs = stats.poisson.pmf(d, rate) if rate > 0 else (d == 0).astype(float)
    probs = np.asarray(probs, dtype=float)
    probs[m] = 1.0 - probs[:m].sum() if m > 0 else 1.0
    return {m - int(k): float(p) for k, p in zip(d, probs) if p > 0 or k == 0}


def expected_flow_profit(params: FlightParams, t: int, state: CabinState, pol: PolicyEntry,
                         costs: tuple[float, float] | None = None, eps: float = DEFAULT_EPS,
                         rechoice: bool = True) -> float:
    """Expected period revenue net of peanut costs."""
    c_e, c_f = costs if costs is not None else (params.c_e, params.c_f)
    pmf = sales_pmf(params, t, state, pol, eps, rechoice)
    se, sf = pmf.mean_sales()
    return float(pmf.revenue.sum() - c_e * se - c_f * sf)

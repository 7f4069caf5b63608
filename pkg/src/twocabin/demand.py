"""Flight-level demand primitives and choice probabilities."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import special

from . import _kernels as K
from .numerics import DomainError, PremiumDist, TruncNormal

__all__ = [
    "PARAM_NAMES",
    "TABLE_LABELS",
    "FlightParams",
    "AvailabilityRegime",
    "TypeProbs",
    "ChoiceProbs",
    "arrival_rate",
    "business_share",
    "choice_probs",
    "expected_demand",
    "wtp_density",
    "price_upper_bound",
]

# order of the eight demand primitives in vectors, boxes and reports
PARAM_NAMES = ("mu_l", "cv_l", "delta_b", "cv_b", "mu_xi", "lambda0", "d_lambda", "d_theta")
TABLE_LABELS = ("mu_l", "cv_l", "delta_b", "cv_b", "mu_xi", "lambda", "d_lambda", "d_theta")


@dataclass(frozen=True)
class FlightParams:
    """Demand primitives of one flight, peanut costs and horizon.

    Valuation scales enter as coefficients of variation: ``sigma_l = cv_l * mu_l``
    and ``sigma_b = cv_b * mu_b`` with ``mu_b = mu_l * (1 + delta_b)``.
    """

    mu_l: float
    cv_l: float
    delta_b: float
    cv_b: float
    mu_xi: float
    lambda0: float
    d_lambda: float
    d_theta: float
    T: int = 8
    c_e: float = 14.0
    c_f: float = 40.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not np.isfinite(val):
                raise DomainError(f"{f.name} must be finite")
        if self.mu_l <= 0:
            raise DomainError("mu_l must be positive")
        if self.cv_l <= 0 or self.cv_b <= 0:
            raise DomainError("cv_l and cv_b must be positive")
        if self.delta_b < 0:
            raise DomainError("delta_b must be >= 0")
        if self.mu_xi <= 0:
            raise DomainError("mu_xi must be positive")
        if self.lambda0 < 0:
            raise DomainError("lambda0 must be >= 0")
        if self.d_theta < 0:
            raise DomainError("d_theta must be >= 0")
        if int(self.T) != self.T or self.T < 1:
            raise DomainError("T must be a positive integer")
        if not 0 <= self.c_e <= self.c_f:
            raise DomainError("need 0 <= c_e <= c_f")
        object.__setattr__(self, "T", int(self.T))

    @property
    def mu_b(self) -> float:
        return self.mu_l * (1.0 + self.delta_b)

    @property
    def sigma_l(self) -> float:
        return self.cv_l * self.mu_l

    @property
    def sigma_b(self) -> float:
        return self.cv_b * self.mu_b

    def leisure(self) -> TruncNormal:
        return TruncNormal(self.mu_l, self.sigma_l)

    def business(self) -> TruncNormal:
        return TruncNormal(self.mu_b, self.sigma_b)

    def premium(self) -> PremiumDist:
        return PremiumDist(self.mu_xi)

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_vector(cls, x, **fixed) -> "FlightParams":
        return cls(**dict(zip(PARAM_NAMES, map(float, x))), **fixed)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "FlightParams":
        d = self.to_dict()
        d.update(changes)
        return FlightParams(**d)


class AvailabilityRegime(enum.IntEnum):
    BOTH_OPEN = K.BOTH
    ECONOMY_ONLY = K.ECON
    FIRST_ONLY = K.FIRST
    CLOSED = K.CLOSED

    @classmethod
    def of(cls, econ_open: bool, first_open: bool) -> "AvailabilityRegime":
        if econ_open and first_open:
            return cls.BOTH_OPEN
        if econ_open:
            return cls.ECONOMY_ONLY
        if first_open:
            return cls.FIRST_ONLY
        return cls.CLOSED


@dataclass(frozen=True)
class TypeProbs:
    p_buy_e: float
    p_buy_f: float

    @property
    def p_out(self) -> float:
        return max(0.0, 1.0 - self.p_buy_e - self.p_buy_f)


@dataclass(frozen=True)
class ChoiceProbs:
    """Purchase probabilities of one arrival, pooled over types and per type."""

    p_buy_e: float
    p_buy_f: float
    p_out: float
    e_rev_price_e: float
    e_rev_price_f: float
    business: TypeProbs
    leisure: TypeProbs


def _check_t(params: FlightParams, t: int):
    if not 1 <= t <= params.T:
        raise DomainError(f"period {t} outside 1..{params.T}")


def arrival_rate(params: FlightParams, t: int) -> float:
    """Poisson arrival rate of period ``t``, linear in ``t`` and clamped at zero."""
    _check_t(params, t)
    return max(0.0, params.lambda0 + params.d_lambda * (t - 1))


def business_share(params: FlightParams, t: int) -> float:
    """Share of business travellers among period-``t`` arrivals, capped at one."""
    _check_t(params, t)
    return min(params.d_theta * (t - 1), 1.0)


def _type_regime_probs(mu, sigma, m, pe, pf, regime):
    if regime == AvailabilityRegime.CLOSED:
        return 0.0, 0.0
    a, b, d, g = K.type_probs(mu, sigma, m, float(pe), float(pf))
    if regime == AvailabilityRegime.BOTH_OPEN:
        return a, b
    if regime == AvailabilityRegime.ECONOMY_ONLY:
        return d, 0.0
    return 0.0, g


def choice_probs(params: FlightParams, t: int, p_e: float, p_f: float,
                 regime: AvailabilityRegime = AvailabilityRegime.BOTH_OPEN,
                 business_prices: tuple[float, float] | None = None) -> ChoiceProbs:
    """Purchase probabilities of a period-``t`` arrival facing ``regime``.

    ``business_prices`` lets business travellers face their own (p_e, p_f);
    by default both types see the posted prices.
    """
    if p_e < 0 or p_f < 0 or math.isnan(p_e) or math.isnan(p_f):
        raise DomainError("prices must be >= 0")
    regime = AvailabilityRegime(regime)
    theta = business_share(params, t)
    pb_e, pb_f = business_prices if business_prices is not None else (p_e, p_f)
    m = params.mu_xi
    le = TypeProbs(*_type_regime_probs(params.mu_l, params.sigma_l, m, p_e, p_f, regime))
    bu = TypeProbs(*_type_regime_probs(params.mu_b, params.sigma_b, m, pb_e, pb_f, regime))
    pe_ = theta * bu.p_buy_e + (1.0 - theta) * le.p_buy_e
    pf_ = theta * bu.p_buy_f + (1.0 - theta) * le.p_buy_f
    rev_e = theta * bu.p_buy_e * pb_e + (1.0 - theta) * le.p_buy_e * p_e
    rev_f = theta * bu.p_buy_f * pb_f + (1.0 - theta) * le.p_buy_f * p_f
    if regime == AvailabilityRegime.CLOSED and (rev_e != 0.0 or rev_f != 0.0):
        raise RuntimeError("closed regime produced revenue")
    fare_e = rev_e / pe_ if pe_ > 0 else float(p_e)
    fare_f = rev_f / pf_ if pf_ > 0 else float(p_f)
    return ChoiceProbs(pe_, pf_, max(0.0, 1.0 - pe_ - pf_), fare_e, fare_f, bu, le)


def expected_demand(params: FlightParams, t: int, p_e: float, p_f: float) -> tuple[float, float]:
    """Uncensored expected demand for each cabin with both cabins open."""
    lam = arrival_rate(params, t)
    if lam == 0.0:
        return 0.0, 0.0
    cp = choice_probs(params, t, p_e, p_f, AvailabilityRegime.BOTH_OPEN)
    return lam * cp.p_buy_e, lam * cp.p_buy_f


def price_upper_bound(params: FlightParams) -> float:
    """Top of the highest-valuation type times the 99.9th premium percentile."""
    top = max(params.mu_b + 10 * params.sigma_b, params.mu_l + 10 * params.sigma_l)
    return top * float(params.premium().ppf(0.999))


def wtp_density(params: FlightParams, t: int, cabin: str, grid=None, n: int = 16001):
    """Willingness-to-pay density for a seat in ``cabin`` during period ``t``.

    Economy mixes the two valuation densities with weights (theta_t, 1 - theta_t);
    first class uses the density of v * xi under the same mixture. Returns
    ``(grid, density)``.
    """
    if cabin not in ("economy", "first", "E", "F"):
        raise DomainError(f"unknown cabin {cabin!r}")
    theta = business_share(params, t)
    first = cabin in ("first", "F")
    if grid is None:
        top = max(params.mu_b + 10 * params.sigma_b, params.mu_l + 10 * params.sigma_l)
        if first:
            top *= float(params.premium().ppf(1 - 1e-12))
        grid = np.linspace(0.0, top, n)
    grid = np.asarray(grid, dtype=float)
    out = np.zeros_like(grid)
    for w, d in ((theta, params.business()), (1.0 - theta, params.leisure())):
        if w == 0.0:
            continue
        if first:
            out += w * K.product_density(grid, d.mu, d.sigma, params.mu_xi)
            # right limit at zero: f_v(0) * E[1 / xi]
            m = params.mu_xi
            inv_xi = math.exp(1.0 / m) * special.exp1(1.0 / m) / m if m > 2e-3 else 1.0
            out[grid == 0.0] += w * float(d.pdf(0.0)) * inv_xi
        else:
            out += w * d.pdf(grid)
    return grid, out

"""Distribution kernels, quadrature and reproducible random streams."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special, stats

__all__ = [
    "DomainError",
    "NumericalError",
    "TruncNormal",
    "PremiumDist",
    "RandomStream",
    "PoissonWeights",
    "trunc_normal_cdf",
    "trunc_normal_sample",
    "premium_tail",
    "premium_sample",
    "poisson_weights",
    "integrate_v",
]

DEFAULT_EPS = 1e-10
DEFAULT_TOL = 1e-8


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericalError(RuntimeError):
    """Numerical routine failed to reach its tolerance.

    Attributes
    ----------
    bound : float
        Error bound that was achieved before giving up.
    """

    def __init__(self, message: str, bound: float):
        super().__init__(f"{message} (achieved error bound {bound:.3g})")
        self.bound = bound


@dataclass(frozen=True)
class TruncNormal:
    """Normal law with location ``mu`` and scale ``sigma`` left-truncated at ``lower``.

    ``mu`` is the pre-truncation location, not the mean of the truncated law.
    """

    mu: float
    sigma: float
    lower: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma)):
            raise DomainError("TruncNormal needs finite mu and sigma")
        if self.sigma <= 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.lower != 0.0:
            raise DomainError("only truncation at zero is supported")

    @property
    def mass(self) -> float:
        """Probability mass of the parent normal above the truncation point."""
        return float(special.ndtr(self.mu / self.sigma))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mu) / self.sigma
        dens = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi) * self.mass)
        return np.where(x >= 0.0, dens, 0.0)

    def sf(self, x):
        return 1.0 - trunc_normal_cdf(x, self)

    def mean(self) -> float:
        a = -self.mu / self.sigma
        return float(stats.truncnorm.mean(a, np.inf, loc=self.mu, scale=self.sigma))

    def upper(self, k: float = 10.0) -> float:
        return self.mu + k * self.sigma


@dataclass(frozen=True)
class PremiumDist:
    """First-class premium multiplier: one plus an exponential with mean ``mu_xi``."""

    mu_xi: float

    def __post_init__(self):
        if not (np.isfinite(self.mu_xi) and self.mu_xi > 0):
            raise DomainError(f"mu_xi must be positive, got {self.mu_xi}")

    def mean(self) -> float:
        return 1.0 + self.mu_xi

    def tail(self, x):
        return premium_tail(x, self)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return 1.0 - self.mu_xi * np.log1p(-u)


@dataclass
class RandomStream:
    """Independent, reproducible stream of draws keyed by ``(seed, stream_id)``.

    Streams with the same key produce identical sequences. Child streams are
    derived through :class:`numpy.random.SeedSequence` spawn keys, so distinct
    ids are statistically independent.
    """

    seed: int
    stream_id: int | tuple = 0
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False)

    @property
    def key(self) -> tuple:
        sid = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return tuple(int(s) for s in sid)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.key)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *ids: int) -> "RandomStream":
        return RandomStream(self.seed, self.key + tuple(int(i) for i in ids))

    def uniform(self, size=None):
        return self.generator.random(size)

    def poisson(self, lam, size=None):
        return self.generator.poisson(lam, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)


def _check_finite(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("argument must be finite")
    return arr


def trunc_normal_cdf(x, d: TruncNormal):
    """P(V <= x) for V ~ ``d``. Zero for ``x <= 0``."""
    arr = _check_finite(x)
    mu, sigma = d.mu, d.sigma
    z_mass = special.ndtr(mu / sigma)
    lo = (special.ndtr((arr - mu) / sigma) - special.ndtr(-mu / sigma)) / z_mass
    hi = 1.0 - special.ndtr((mu - arr) / sigma) / z_mass
    out = np.where(arr <= mu, lo, hi)
    out = np.clip(np.where(arr <= 0.0, 0.0, out), 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def _trunc_normal_ppf(u, d: TruncNormal):
    u = np.asarray(u, dtype=float)
    ratio = d.mu / d.sigma
    if ratio < -5.0:
        out = stats.truncnorm.ppf(u, -ratio, np.inf, loc=d.mu, scale=d.sigma)
    else:
        # upper-tail form avoids cancellation when the truncated mass is small
        out = d.mu - d.sigma * special.ndtri((1.0 - u) * special.ndtr(ratio))
    return np.maximum(out, 0.0)


def trunc_normal_sample(s: RandomStream, d: TruncNormal, size=None):
    """Inverse-CDF draw(s) from ``d``; one uniform per variate."""
    out = _trunc_normal_ppf(s.uniform(size), d)
    return float(out) if size is None else out


def premium_tail(x, d: PremiumDist):
    """P(xi >= x): one for ``x <= 1``, else ``exp(-(x-1)/mu_xi)``."""
    arr = np.asarray(x, dtype=float)
    out = np.where(arr <= 1.0, 1.0, np.exp(-(np.maximum(arr, 1.0) - 1.0) / d.mu_xi))
    return float(out) if np.ndim(out) == 0 else out


def premium_sample(s: RandomStream, d: PremiumDist, size=None):
    out = d.ppf(s.uniform(size))
    return float(out) if size is None else out


class PoissonWeights(NamedTuple):
    weights: np.ndarray
    n_max: int
    tail_mass: float
    renormalized: bool


def poisson_weights(lam: float, eps: float = DEFAULT_EPS, renormalize: bool = True) -> PoissonWeights:
    """Poisson pmf on ``0..n_max`` with dropped upper tail at most ``eps``.

    With ``renormalize`` the retained weights are rescaled to sum to one and the
    returned ``tail_mass`` records what was dropped.
    """
    if not np.isfinite(lam) or lam < 0:
        raise DomainError(f"Poisson rate must be finite and >= 0, got {lam}")
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    if lam == 0.0:
        return PoissonWeights(np.ones(1), 0, 0.0, renormalize)
    n = int(max(stats.poisson.isf(eps, lam), 0))
    while stats.poisson.sf(n, lam) > eps:
        n += 1
    while n > 0 and stats.poisson.sf(n - 1, lam) <= eps:
        n -= 1
    w = stats.poisson.pmf(np.arange(n + 1), lam)
    tail = float(stats.poisson.sf(n, lam))
    if renormalize:
        w = w / w.sum()
    return PoissonWeights(w, n, tail, renormalize)


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = leggauss(n)
    return _GL_CACHE[n]


def _gl_segment(g, a, b, n):
    x, w = gauss_legendre(n)
    half = 0.5 * (b - a)
    return half * np.dot(w, g(0.5 * (a + b) + half * x))


def integrate_v(
    f: Callable[[np.ndarray], np.ndarray],
    d: TruncNormal,
    breakpoints: Sequence[float] = (),
    tol: float = DEFAULT_TOL,
    max_intervals: int = 4000,
) -> float:
    """Adaptive Gauss-Legendre estimate of the integral of ``f`` against ``d``.

    ``f`` must accept a numpy array. The range ``[0, mu + 10 sigma]`` is split
    at ``breakpoints``; the tail beyond is mapped onto ``[0, 1)`` through
    ``v = U + s / (1 - s)``. Intervals are bisected until the 10/21-point
    discrepancy sums below ``tol`` relative to the estimate.
    """
    upper = d.upper(10.0)

    def body(v):
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(np.asarray(f(v), dtype=float), v.shape) * d.pdf(v)

    def tail(s):
        v = upper + s / (1.0 - s)
        return body(v) / (1.0 - s) ** 2

    cuts = sorted({0.0, upper, *[float(b) for b in breakpoints if 0.0 < b < upper]})
    tail_cuts = sorted({0.0, 1.0, *[(b - upper) / (1.0 + b - upper) for b in breakpoints if b > upper]})
    pending = [(body, a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]
    pending += [(tail, a, b) for a, b in zip(tail_cuts[:-1], tail_cuts[1:]) if b > a]

    done = []
    for g, a, b in pending:
        coarse, fine = _gl_segment(g, a, b, 10), _gl_segment(g, a, b, 21)
        done.append((abs(fine - coarse), fine, g, a, b))
    while True:
        total = sum(item[1] for item in done)
        err = sum(item[0] for item in done)
        if err <= tol * max(abs(total), 1e-300) or err < 1e-300:
            return float(total)
        if len(done) >= max_intervals:
            raise NumericalError("integrate_v did not converge", err / max(abs(total), 1e-300))
        k = max(range(len(done)), key=lambda i: done[i][0])
        _, _, g, a, b = done.pop(k)
        m = 0.5 * (a + b)
        for lo, hi in ((a, m), (m, b)):
            coarse, fine = _gl_segment(g, lo, hi, 10), _gl_segment(g, lo, hi, 21)
            done.append((abs(fine - coarse), fine, g, lo, hi))

"""Simulated method of moments over flight-level demand heterogeneity.

Moments are decile summaries of per-flight fare, sales and traveller-mix
statistics. Candidate moments are simulated once per parameter draw from a
uniform proposal on a box; a truncated normal mixing density is fitted by
reweighting that fixed library.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import optimize, stats
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator

from . import _container
from .demand import PARAM_NAMES, TABLE_LABELS, FlightParams
from .market import CabinState
from .mechanisms import ArrivalDraw, run_policy
from .numerics import DomainError, NumericalError, RandomStream
from .solver import SolvedModel, SolverConfig, SolverError, solve

__all__ = [
    "DataError",
    "Box",
    "DEFAULT_BOX",
    "TicketRecord",
    "TicketTable",
    "MomentVector",
    "MixingDensity",
    "MomentLibrary",
    "FitConfig",
    "FitResult",
    "PooledSummary",
    "read_tickets",
    "write_tickets",
    "simulate_tickets",
    "flight_statistics",
    "empirical_moments",
    "model_moments",
    "build_library",
    "mixture_weights",
    "mixture_moments",
    "objective",
    "fit",
    "pool_capacities",
    "bootstrap",
    "MixtureMomentEstimator",
]

log = logging.getLogger(__name__)

DECILES = tuple(float(q) for q in np.round(np.arange(1, 10) / 10, 1))
MIN_TICKETS = 10
TICKET_HEADER = ("flight_id", "market_id", "cap_econ", "cap_first", "period", "cabin", "fare", "reason")

# (name, uses periods 2..T)
FAMILIES = (
    ("fare_e", False),
    ("fare_f", False),
    ("dfare_e", True),
    ("dfare_f", True),
    ("share_sold", False),
    ("dshare_sold", True),
    ("fare_gap", False),
    ("business_share", False),
    ("load_factor", False),
)


class DataError(ValueError):
    """Malformed ticket data."""


class Box(NamedTuple):
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def of(cls, lo, hi) -> "Box":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != (len(PARAM_NAMES),) or hi.shape != lo.shape:
            raise DomainError(f"box bounds must have {len(PARAM_NAMES)} components")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("box bounds must be finite")
        bad = np.flatnonzero(lo >= hi)
        if bad.size:
            raise DomainError(f"box needs lo < hi for {PARAM_NAMES[bad[0]]}")
        return cls(lo, hi)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def check(self, x):
        x = np.asarray(x, dtype=float)
        for i, name in enumerate(PARAM_NAMES):
            if not self.lo[i] <= x[i] <= self.hi[i]:
                raise DomainError(f"{name}={x[i]} outside [{self.lo[i]}, {self.hi[i]}]")

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


DEFAULT_BOX = Box.of(
    [100.0, 0.05, 0.0, 0.05, 0.05, 2.0, -1.5, 0.0],
    [1000.0, 1.0, 1.5, 1.0, 1.0, 40.0, 1.5, 0.25],
)


# --- tickets ----------------------------------------------------------------------


@dataclass(frozen=True)
class TicketRecord:
    flight_id: int
    market_id: int
    cap_econ: int
    cap_first: int
    period: int
    cabin: str
    fare: float
    reason: str

    def __post_init__(self):
        if self.cabin not in ("E", "F"):
            raise DataError(f"cabin must be E or F, got {self.cabin!r}")
        if self.reason not in ("B", "L"):
            raise DataError(f"reason must be B or L, got {self.reason!r}")
        if not self.fare > 0:
            raise DataError("fare must be positive")
        if self.cap_econ < 0 or self.cap_first < 0 or self.cap_econ + self.cap_first <= 0:
            raise DataError("capacities must be positive")
        if self.period < 1:
            raise DataError("period must be >= 1")


@dataclass
class TicketTable:
    """Columnar ticket data; ``cabin`` is 0 economy / 1 first, ``business`` a bool."""

    flight_id: np.ndarray
    market_id: np.ndarray
    cap_e: np.ndarray
    cap_f: np.ndarray
    period: np.ndarray
    cabin: np.ndarray
    fare: np.ndarray
    business: np.ndarray

    def __post_init__(self):
        n = len(self.flight_id)
        for f in ("market_id", "cap_e", "cap_f", "period", "cabin", "fare", "business"):
            if len(getattr(self, f)) != n:
                raise DataError("ticket columns differ in length")

    def __len__(self) -> int:
        return len(self.flight_id)

    @classmethod
    def empty(cls) -> "TicketTable":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, z, np.zeros(0), np.zeros(0, dtype=bool))

    @classmethod
    def from_records(cls, records) -> "TicketTable":
        records = list(records)
        if not records:
            return cls.empty()
        cols = list(zip(*[(r.flight_id, r.market_id, r.cap_econ, r.cap_first, r.period,
                           r.cabin == "F", r.fare, r.reason == "B") for r in records]))
        i64 = lambda c: np.asarray(c, dtype=np.int64)  # noqa: E731
        return cls(i64(cols[0]), i64(cols[1]), i64(cols[2]), i64(cols[3]), i64(cols[4]), i64(cols[5]),
                   np.asarray(cols[6], dtype=float), np.asarray(cols[7], dtype=bool))

    def records(self):
        for i in range(len(self)):
            yield TicketRecord(int(self.flight_id[i]), int(self.market_id[i]), int(self.cap_e[i]),
                               int(self.cap_f[i]), int(self.period[i]), "F" if self.cabin[i] else "E",
                               float(self.fare[i]), "B" if self.business[i] else "L")

    def take(self, idx) -> "TicketTable":
        return TicketTable(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @staticmethod
    def concat(tables) -> "TicketTable":
        tables = list(tables)
        if not tables:
            return TicketTable.empty()
        return TicketTable(*(np.concatenate([getattr(t, f) for t in tables])
                             for f in TicketTable.__dataclass_fields__))

    def capacities(self) -> list[CabinState]:
        pairs = sorted(set(zip(self.cap_e.tolist(), self.cap_f.tolist())))
        return [CabinState(*p) for p in pairs]

    def group(self, omega1) -> "TicketTable":
        ke, kf = omega1
        return self.take((self.cap_e == ke) & (self.cap_f == kf))


def _as_table(tickets) -> TicketTable:
    return tickets if isinstance(tickets, TicketTable) else TicketTable.from_records(tickets)


def read_tickets(path, T: int | None = None) -> TicketTable:
    """Parse a ticket CSV; raises DataError naming the offending line."""
    recs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (line 1)") from None
        header = [h.strip() for h in header]
        missing = [h for h in TICKET_HEADER if h not in header]
        if missing:
            raise DataError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
        pos = {h: header.index(h) for h in TICKET_HEADER}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                get = {h: row[i].strip() for h, i in pos.items()}
                rec = TicketRecord(int(get["flight_id"]), int(get["market_id"]), int(get["cap_econ"]),
                                   int(get["cap_first"]), int(get["period"]), get["cabin"],
                                   float(get["fare"]), get["reason"])
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if T is not None and rec.period > T:
                raise DataError(f"{path}: line {lineno}: period {rec.period} > {T}")
            recs.append(rec)
    return TicketTable.from_records(recs)


def write_tickets(table: TicketTable, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TICKET_HEADER)
        for r in table.records():
            w.writerow([r.flight_id, r.market_id, r.cap_econ, r.cap_first, r.period, r.cabin,
                        repr(r.fare), r.reason])


def simulate_tickets(model: SolvedModel, seed: int, R: int, market_id: int = 0,
                     flight_start: int = 0) -> TicketTable:
    """Tickets sold on ``R`` simulated flights under the model's policy."""
    if R == 0:
        return TicketTable.empty()
    draw = ArrivalDraw.generate(model.params, seed, R)
    rep = run_policy(model, draw)
    cabin = rep.per_rep["cabin"]
    T = draw.T
    counts = np.diff(draw.offsets, axis=1)
    period = np.repeat(np.tile(np.arange(1, T + 1), R), counts.ravel())
    flight = np.repeat(np.arange(R), counts.sum(axis=1)) + flight_start
    sold = cabin >= 0
    n = int(sold.sum())
    ke, kf = model.initial
    return TicketTable(flight[sold].astype(np.int64), np.full(n, market_id, dtype=np.int64),
                       np.full(n, ke, dtype=np.int64), np.full(n, kf, dtype=np.int64),
                       period[sold].astype(np.int64), cabin[sold].astype(np.int64),
                       rep.per_rep["fare"][sold].copy(), draw.types[sold] == 1)


# --- moments ----------------------------------------------------------------------


@dataclass
class MomentVector:
    """Fixed-order moment values with the number of flights behind each entry."""

    values: np.ndarray
    names: tuple
    counts: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.values.size

    def family(self, name: str) -> np.ndarray:
        idx = [i for i, n in enumerate(self.names) if n.split(":")[0] == name]
        return self.values[idx]

    def to_rows(self):
        for n, v, c in zip(self.names, self.values, self.counts):
            yield {"moment": n, "value": float(v), "count": int(c)}


def moment_names(T: int) -> tuple:
    names = []
    for fam, diff in FAMILIES:
        for t in range(2 if diff else 1, T + 1):
            names += [f"{fam}:t{t}:q{int(round(q * 100))}" for q in DECILES]
    names += [f"max_gap:q{int(round(q * 100))}" for q in DECILES]
    names += [f"min_gap:q{int(round(q * 100))}" for q in DECILES]
    names.append("business_share:all")
    return tuple(names)


def flight_statistics(tickets, T: int, min_tickets: int = MIN_TICKETS) -> dict:
    """Per-flight, per-period statistics of one capacity group.

    Flights with fewer than ``min_tickets`` tickets are dropped. Missing
    cells (no sale in a cabin and period) are NaN.
    """
    tt = _as_table(tickets)
    flights, inv, n_tick = np.unique(tt.flight_id, return_inverse=True, return_counts=True)
    keep = n_tick >= min_tickets
    F = int(keep.sum())
    remap = np.full(flights.size, -1)
    remap[keep] = np.arange(F)
    row = remap[inv]
    m = row >= 0
    row, per, cab, fare, bus = row[m], tt.period[m] - 1, tt.cabin[m], tt.fare[m], tt.business[m]
    if np.any(per < 0) or np.any(per >= T):
        raise DataError(f"periods must lie in 1..{T}")
    cap = np.zeros(F)
    cap[row] = (tt.cap_e[m] + tt.cap_f[m])

    def tab(weights, mask):
        out = np.zeros((F, T))
        np.add.at(out, (row[mask], per[mask]), weights[mask])
        return out

    ones = np.ones(row.size)
    n_e, n_f = tab(ones, cab == 0), tab(ones, cab == 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fare_e = np.where(n_e > 0, tab(fare, cab == 0) / n_e, np.nan)
        fare_f = np.where(n_f > 0, tab(fare, cab == 1) / n_f, np.nan)
        sold = n_e + n_f
        share = sold / cap[:, None] if F else np.zeros((0, T))
        nb = tab(ones, bus)
        bshare = np.where(sold > 0, nb / sold, np.nan)
    gap = fare_f - fare_e
    load = np.cumsum(share, axis=1)
    allnan = np.all(np.isnan(gap), axis=1)
    filled = np.where(np.isnan(gap), -np.inf, gap)
    max_gap = np.where(allnan, np.nan, filled.max(axis=1) if F else np.zeros(0))
    filled = np.where(np.isnan(gap), np.inf, gap)
    min_gap = np.where(allnan, np.nan, filled.min(axis=1) if F else np.zeros(0))
    total = sold.sum()
    return {
        "fare_e": fare_e, "fare_f": fare_f,
        "dfare_e": fare_e[:, 1:] - fare_e[:, :-1], "dfare_f": fare_f[:, 1:] - fare_f[:, :-1],
        "share_sold": share, "dshare_sold": share[:, 1:] - share[:, :-1],
        "fare_gap": gap, "business_share": bshare, "load_factor": load,
        "max_gap": max_gap, "min_gap": min_gap,
        "business_share_all": float(nb.sum() / total) if total > 0 else np.nan,
        "n_flights": F, "n_dropped": int((~keep).sum()),
    }


def _deciles(x):
    x = x[~np.isnan(x)]
    if x.size == 0:
        return np.full(len(DECILES), np.nan), 0
    return np.quantile(x, DECILES), x.size


def _moments_from_stats(st: dict, T: int, meta: dict) -> MomentVector:
    vals, counts = [], []
    for fam, _ in FAMILIES:
        arr = st[fam]
        for j in range(arr.shape[1]):
            q, c = _deciles(arr[:, j])
            vals.append(q)
            counts += [c] * len(DECILES)
    for fam in ("max_gap", "min_gap"):
        q, c = _deciles(st[fam])
        vals.append(q)
        counts += [c] * len(DECILES)
    vals.append(np.array([st["business_share_all"]]))
    counts.append(st["n_flights"])
    meta = dict(meta, n_flights=st["n_flights"], n_dropped=st["n_dropped"], T=T,
                deciles=list(DECILES))
    return MomentVector(np.concatenate(vals), moment_names(T), np.asarray(counts, dtype=np.int64), meta)


def empirical_moments(tickets, omega1, T: int = 8, min_tickets: int = MIN_TICKETS) -> MomentVector:
    """Decile moments across the flights of capacity ``omega1``."""
    tt = _as_table(tickets).group(omega1)
    st = flight_statistics(tt, T, min_tickets)
    if st["n_flights"] == 0:
        raise DataError(f"no flight with capacity {tuple(omega1)} and >= {min_tickets} tickets")
    return _moments_from_stats(st, T, {"omega1": list(map(int, omega1))})


def model_moments(model: SolvedModel, seed: int, R: int, min_tickets: int = MIN_TICKETS) -> MomentVector:
    """The empirical moment pipeline applied to ``R`` simulated flights."""
    tt = simulate_tickets(model, seed, R)
    st = flight_statistics(tt, model.params.T, min_tickets)
    return _moments_from_stats(st, model.params.T, {"omega1": list(map(int, model.initial)), "R": R})


# --- library ----------------------------------------------------------------------


@dataclass
class MomentLibrary:
    """Simulated moments at parameter draws from a uniform proposal on ``box``."""

    box: Box
    omega1: CabinState
    draws: np.ndarray
    moments: np.ndarray
    log_g: np.ndarray
    names: tuple
    meta: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.moments.shape[1]

    def save(self, path):
        meta = {"box": self.box.to_dict(), "omega1": list(map(int, self.omega1)), "names": list(self.names),
                "extra": self.meta}
        _container.write(path, "moment_library", meta,
                         {"draws": self.draws, "moments": self.moments, "log_g": self.log_g})

    @classmethod
    def load(cls, path) -> "MomentLibrary":
        meta, arr = _container.read(path, kind="moment_library")
        return cls(Box.of(**meta["box"]), CabinState(*meta["omega1"]), arr["draws"], arr["moments"],
                   arr["log_g"], tuple(meta["names"]), meta["extra"])


def _library_draw(job):
    j, x, omega1, cfg_d, seed, R, fixed, min_tickets = job
    try:
        params = FlightParams.from_vector(x, **fixed)
        model = solve(params, omega1, SolverConfig.from_dict(cfg_d))
        mv = model_moments(model, RandomStream(seed, (3, j)).integers(0, 2**62), R, min_tickets)
        return j, mv.values, None
    except (SolverError, NumericalError, DomainError, FloatingPointError) as exc:
        return j, None, f"{type(exc).__name__}: {exc}"


def build_library(box: Box, S: int, omega1, cfg: SolverConfig = SolverConfig(), seed: int = 0, R: int = 500,
                  path=None, workers: int | None = None, checkpoint_every: int = 10,
                  fixed: dict | None = None, min_tickets: int = MIN_TICKETS) -> MomentLibrary:
    """Solve and simulate at ``S`` uniform draws from ``box``.

    With ``path`` the library is checkpointed there and a rerun resumes from
    the last checkpoint. Draws whose solve fails are dropped and logged.
    """
    if S < 1:
        raise DomainError("S must be >= 1")
    omega1 = CabinState(*omega1)
    fixed = dict(fixed or {})
    u = RandomStream(seed, (2,)).uniform((S, len(PARAM_NAMES)))
    X = box.lo + u * box.width
    T = int(fixed.get("T", 8))
    names = moment_names(T)
    done = np.zeros(S, dtype=bool)
    M = np.full((S, len(names)), np.nan)
    failed: dict[int, str] = {}
    cfg_d = cfg.to_dict()
    stamp = {"seed": seed, "S": S, "R": R, "cfg_hash": _container.digest(cfg_d), "cfg": cfg_d,
             "box_hash": _container.digest(box.to_dict()), "fixed": fixed, "min_tickets": min_tickets}
    ckpt = Path(str(path) + ".partial") if path is not None else None
    if ckpt is not None and ckpt.exists():
        meta, arr = _container.read(ckpt, kind="moment_library_partial")
        if meta["stamp"] == stamp:
            done, M = arr["done"].astype(bool), arr["moments"]
            failed = {int(k): v for k, v in meta["failed"].items()}
            log.info("resuming library: %d of %d draws done", int(done.sum()), S)

    def checkpoint():
        if ckpt is not None:
            _container.write(ckpt, "moment_library_partial",
                             {"stamp": stamp, "failed": {str(k): v for k, v in sorted(failed.items())}},
                             {"done": done.astype(np.uint8), "moments": M})

    jobs = [(j, X[j], omega1, cfg_d, seed, R, fixed, min_tickets) for j in range(S) if not done[j]]
    workers = workers or int(os.environ.get("TWOCABIN_WORKERS", "1"))

    def record(res):
        j, vals, err = res
        done[j] = True
        if err is None:
            M[j] = vals
        else:
            failed[j] = err
            log.warning("library draw %d failed: %s", j, err)
        if int(done.sum()) % checkpoint_every == 0:
            checkpoint()

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            for res in ex.map(_library_draw, jobs):
                record(res)
    else:
        for job in jobs:
            record(_library_draw(job))
    ok = np.array([j not in failed for j in range(S)])
    if not ok.any():
        raise SolverError(0, omega1, "every library draw failed")
    log_g = np.full(int(ok.sum()), -float(np.sum(np.log(box.width))))
    meta = dict(stamp, failed={str(k): v for k, v in sorted(failed.items())}, n_failed=len(failed),
                draw_index=np.flatnonzero(ok).tolist())
    lib = MomentLibrary(box, omega1, X[ok], M[ok], log_g, names, meta)
    if path is not None:
        lib.save(path)
        if ckpt.exists():
            ckpt.unlink()
    return lib


# --- mixing density -------------------------------------------------------------------


@dataclass(frozen=True)
class MixingDensity:
    """Normal density over the eight primitives truncated to ``box``.

    ``chol`` is the lower Cholesky factor of the covariance. ``flat`` marks
    the uniform density on the box (the infinite-variance limit).
    """

    mu: np.ndarray
    chol: np.ndarray
    box: Box
    flat: bool = False

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        L = np.asarray(self.chol, dtype=float)
        d = len(PARAM_NAMES)
        if mu.shape != (d,) or L.shape != (d, d):
            raise DomainError("mu must be 8-vector and chol 8x8")
        if not self.flat:
            if np.any(np.triu(L, 1) != 0):
                raise DomainError("chol must be lower triangular")
            if not np.all(np.diag(L) > 0) or not np.all(np.isfinite(L)):
                raise DomainError("chol must have a positive finite diagonal")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "chol", L)

    @classmethod
    def uniform(cls, box: Box) -> "MixingDensity":
        return cls(0.5 * (box.lo + box.hi), np.diag(box.width), box, flat=True)

    @classmethod
    def diagonal(cls, mu, sd, box: Box) -> "MixingDensity":
        return cls(np.asarray(mu, dtype=float), np.diag(np.asarray(sd, dtype=float)), box)

    @property
    def sigma(self) -> np.ndarray:
        return self.chol @ self.chol.T

    @property
    def is_diagonal(self) -> bool:
        return bool(np.all(np.tril(self.chol, -1) == 0))

    def log_kernel(self, X) -> np.ndarray:
        """Untruncated log density at the rows of ``X`` (constant when flat)."""
        X = np.atleast_2d(X)
        if self.flat:
            return np.zeros(X.shape[0])
        z = solve_triangular(self.chol, (X - self.mu).T, lower=True)
        return (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(self.chol)))
                - 0.5 * len(self.mu) * np.log(2 * np.pi))

    def sample(self, n: int, seed: int = 0, max_rounds: int = 1000) -> np.ndarray:
        """``n`` draws from the truncated density by rejection."""
        gen = np.random.Generator(np.random.PCG64(seed))
        if self.flat:
            return self.box.lo + gen.random((n, len(self.mu))) * self.box.width
        out, got = np.empty((n, len(self.mu))), 0
        for _ in range(max_rounds):
            z = gen.standard_normal((max(n, 1024), len(self.mu)))
            x = self.mu + z @ self.chol.T
            x = x[np.all((x >= self.box.lo) & (x <= self.box.hi), axis=1)]
            take = min(n - got, x.shape[0])
            out[got:got + take] = x[:take]
            got += take
            if got == n:
                return out
        raise NumericalError("truncated normal rejection sampling: box mass too small", bound=got / n)

    def truncated_mean(self, n: int = 200_000, seed: int = 0) -> np.ndarray:
        """Mean of the truncated density; exact for diagonal covariance, sampled otherwise."""
        if self.flat:
            return 0.5 * (self.box.lo + self.box.hi)
        if self.is_diagonal:
            sd = np.diag(self.chol)
            a, b = (self.box.lo - self.mu) / sd, (self.box.hi - self.mu) / sd
            return stats.truncnorm.mean(a, b, loc=self.mu, scale=sd)
        return self.sample(n, seed).mean(axis=0)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "chol": self.chol.tolist(), "box": self.box.to_dict(), "flat": self.flat}

    @classmethod
    def from_dict(cls, d) -> "MixingDensity":
        return cls(np.array(d["mu"]), np.array(d["chol"]), Box.of(**d["box"]), d.get("flat", False))


def mixture_weights(lib: MomentLibrary, h: MixingDensity) -> np.ndarray:
    """Self-normalized importance weights of the library draws under ``h``."""
    if not (np.array_equal(h.box.lo, lib.box.lo) and np.array_equal(h.box.hi, lib.box.hi)):
        raise DomainError("mixing density and library use different boxes")
    if h.flat:
        return np.full(lib.S, 1.0 / lib.S)
    lw = h.log_kernel(lib.draws) - lib.log_g
    top = np.max(lw)
    # every raw ratio h/g underflows: h puts its mass where the library has no draws
    if not np.isfinite(top) or np.exp(top) == 0.0:
        raise NumericalError("all importance weights are zero", bound=float(top))
    w = np.exp(lw - top)
    return w / w.sum()


def mixture_moments(lib: MomentLibrary, h: MixingDensity, return_ess: bool = False):
    """Importance-weighted average of the library moments; NaN entries are skipped per column."""
    w = mixture_weights(lib, h)
    M = lib.moments
    if h.flat:
        out = M.mean(axis=0)
        gaps = ~np.all(np.isfinite(M), axis=0)
        has = gaps & np.any(np.isfinite(M), axis=0)
        out[has] = np.nanmean(M[:, has], axis=0)
        out[gaps & ~has] = np.nan
    else:
        fin = np.isfinite(M)
        num = np.where(fin, M, 0.0).T @ w
        den = fin.T.astype(float) @ w
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(den > 0, num / den, np.nan)
    ess = 1.0 / float(np.sum(w * w))
    return (out, ess) if return_ess else out


def objective(lib: MomentLibrary, h: MixingDensity, rho_hat) -> float:
    """Unweighted sum of squared moment differences over entries defined on both sides."""
    rho = rho_hat.values if isinstance(rho_hat, MomentVector) else np.asarray(rho_hat, dtype=float)
    if rho.size != lib.dim:
        raise DomainError(f"moment dimension {rho.size} != library dimension {lib.dim}")
    m = mixture_moments(lib, h)
    ok = np.isfinite(m) & np.isfinite(rho)
    if not ok.any():
        return np.inf
    return float(np.sum((m[ok] - rho[ok]) ** 2))


# --- fitting ----------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Multistart Nelder-Mead settings.

    ``cov`` is ``diag``, ``lowrank`` (diagonal plus ``rank`` factors) or
    ``full`` (free lower Cholesky factor). Scales are relative to box width.
    """

    n_starts: int = 16
    cov: str = "diag"
    rank: int = 1
    maxfev: int = 6000
    xatol: float = 1e-5
    fatol: float = 1e-10
    start_scale: float = 0.3
    min_scale: float = 1e-3
    max_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.cov not in ("diag", "lowrank", "full"):
            raise DomainError("cov must be diag, lowrank or full")
        if self.n_starts < 1:
            raise DomainError("n_starts must be >= 1")


@dataclass
class FitResult:
    density: MixingDensity
    objective: float
    ess: float
    local_optima: list
    identified: bool
    n_evals: int


def _n_extra(cfg: FitConfig, d: int) -> int:
    if cfg.cov == "lowrank":
        return d * cfg.rank
    if cfg.cov == "full":
        return d * (d - 1) // 2
    return 0


def _unpack(theta, box: Box, cfg: FitConfig) -> MixingDensity:
    d = len(PARAM_NAMES)
    u, s, rest = theta[:d], theta[d:2 * d], theta[2 * d:]
    w = box.width
    if cfg.cov == "full":
        Lu = np.diag(np.exp(s))
        Lu[np.tril_indices(d, -1)] = rest
    elif cfg.cov == "lowrank":
        V = rest.reshape(d, cfg.rank)
        Lu = np.linalg.cholesky(np.diag(np.exp(2 * s)) + V @ V.T)
    else:
        Lu = np.diag(np.exp(s))
    return MixingDensity(box.lo + np.clip(u, 0, 1) * w, np.diag(w) @ Lu, box)


def fit(lib: MomentLibrary, rho_hat, cfg: FitConfig = FitConfig()) -> FitResult:
    """Least-squares fit of the mixing density by multistart Nelder-Mead.

    Starts are a scrambled Sobol set for the mean plus the single library
    draw whose moments are closest to ``rho_hat`` with a small spread.
    """
    rho = rho_hat.values if isinstance(rho_hat, MomentVector) else np.asarray(rho_hat, dtype=float)
    if rho.size != lib.dim:
        raise DomainError(f"moment dimension {rho.size} != library dimension {lib.dim}")
    d = len(PARAM_NAMES)
    box = lib.box
    extra = _n_extra(cfg, d)
    n_evals = 0

    def f(theta):
        nonlocal n_evals
        n_evals += 1
        try:
            val = objective(lib, _unpack(theta, box, cfg), rho)
        except (NumericalError, np.linalg.LinAlgError, DomainError):
            return 1e300
        return val if np.isfinite(val) else 1e300

    m = int(np.ceil(np.log2(max(cfg.n_starts - 1, 1))))
    sob = stats.qmc.Sobol(d, scramble=True, seed=cfg.seed).random_base2(m)
    starts = [np.concatenate([u, np.full(d, np.log(cfg.start_scale)), np.zeros(extra)])
              for u in sob[: cfg.n_starts - 1]]
    fin = np.isfinite(lib.moments) & np.isfinite(rho)
    dist = np.where(fin, (lib.moments - rho) ** 2, 0.0).sum(axis=1)
    j = int(np.argmin(dist))
    starts.append(np.concatenate([(lib.draws[j] - box.lo) / box.width, np.full(d, np.log(0.05)),
                                  np.zeros(extra)]))
    bounds = ([(0.0, 1.0)] * d + [(np.log(cfg.min_scale), np.log(cfg.max_scale))] * d
              + [(-cfg.max_scale, cfg.max_scale)] * extra)
    optima = []
    for x0 in starts:
        res = optimize.minimize(f, x0, method="Nelder-Mead", bounds=bounds,
                                options={"maxfev": cfg.maxfev, "xatol": cfg.xatol, "fatol": cfg.fatol,
                                         "adaptive": True})
        optima.append((float(res.fun), res.x))
    optima.sort(key=lambda o: o[0])
    best_val, best_x = optima[0]
    if not best_val < 1e300:
        raise NumericalError("no finite objective value found", bound=best_val)
    h = _unpack(best_x, box, cfg)
    _, ess = mixture_moments(lib, h, return_ess=True)
    vals = np.array([o[0] for o in optima])
    identified = lib.S > 1 and bool(np.ptp(vals) > 1e-12 * max(1.0, abs(best_val)) or len(optima) == 1)
    local = [{"objective": v, "mu": _unpack(x, box, cfg).mu.tolist()} for v, x in optima]
    return FitResult(h, best_val, ess, local, identified, n_evals)


# --- pooling and inference ----------------------------------------------------------


@dataclass
class PooledSummary:
    """Capacity-weighted marginal summary in the reporting order of ``labels``."""

    labels: tuple
    means: np.ndarray
    by_capacity: dict
    curves: dict

    def rows(self):
        for lab, m in zip(self.labels, self.means):
            yield {"parameter": lab, "mean": float(m)}


def pool_capacities(estimates: dict, weights: dict, n: int = 200_000, seed: int = 0,
                    bins: int = 60) -> PooledSummary:
    """Mixture over capacities of truncated normal mixing densities."""
    if set(estimates) != set(weights):
        raise DomainError("estimates and weights must share capacity keys")
    total = float(sum(weights.values()))
    if abs(total - 1.0) > 1e-9:
        raise DomainError(f"capacity weights sum to {total}, not 1")
    keys = sorted(estimates)
    by_cap = {k: estimates[k].truncated_mean(n, seed) for k in keys}
    means = sum(weights[k] * by_cap[k] for k in keys)
    box = estimates[keys[0]].box
    curves = {}
    samples = {k: estimates[k].sample(n, seed) for k in keys}
    for i, lab in enumerate(TABLE_LABELS):
        edges = np.linspace(box.lo[i], box.hi[i], bins + 1)
        dens = np.zeros(bins)
        for k in keys:
            h, _ = np.histogram(samples[k][:, i], bins=edges, density=True)
            dens += weights[k] * h
        curves[lab] = (0.5 * (edges[1:] + edges[:-1]), dens)
    return PooledSummary(TABLE_LABELS, np.asarray(means), by_cap, curves)


def bootstrap(tickets, lib: MomentLibrary, B: int, cfg: FitConfig = FitConfig(), seed: int = 0, T: int = 8,
              rng=None, min_tickets: int = MIN_TICKETS) -> dict:
    """Standard errors of the fitted mean from ticket resamples within capacity groups.

    ``rng`` may be any object with a numpy-style ``integers(low, high, size)``.
    """
    if B < 2:
        raise DomainError("B must be >= 2")
    tt = _as_table(tickets).group(lib.omega1)
    if len(tt) == 0:
        raise DataError(f"no tickets with capacity {tuple(lib.omega1)}")
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(seed))
    mus = []
    for _ in range(B):
        idx = np.asarray(rng.integers(0, len(tt), size=len(tt)))
        rho = empirical_moments(tt.take(idx), lib.omega1, T, min_tickets)
        mus.append(fit(lib, rho, cfg).density.mu)
    mus = np.array(mus)
    return {"labels": TABLE_LABELS, "se": mus.std(axis=0, ddof=1), "draws": mus}


class MixtureMomentEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(library, rho_hat)``, ``predict(library)`` gives mixture moments."""

    def __init__(self, n_starts=16, cov="diag", rank=1, maxfev=6000, seed=0):
        self.n_starts = n_starts
        self.cov = cov
        self.rank = rank
        self.maxfev = maxfev
        self.seed = seed

    def _cfg(self) -> FitConfig:
        return FitConfig(n_starts=self.n_starts, cov=self.cov, rank=self.rank, maxfev=self.maxfev, seed=self.seed)

    def fit(self, X: MomentLibrary, y):
        res = fit(X, y, self._cfg())
        self.density_ = res.density
        self.objective_ = res.objective
        self.ess_ = res.ess
        self.local_optima_ = res.local_optima
        self.identified_ = res.identified
        return self

    def predict(self, X: MomentLibrary) -> np.ndarray:
        if not hasattr(self, "density_"):
            raise AttributeError("estimator is not fitted")
        return mixture_moments(X, self.density_)

    def score(self, X: MomentLibrary, y) -> float:
        if not hasattr(self, "density_"):
            raise AttributeError("estimator is not fitted")
        return -objective(X, self.density_, y)

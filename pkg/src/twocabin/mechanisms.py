"""Pricing and allocation counterfactuals evaluated on common arrival draws."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .demand import FlightParams, arrival_rate, business_share
from .market import CabinState
from .numerics import RandomStream, _trunc_normal_ppf
from .solver import SolvedModel, SolverConfig, solve, solve_third_degree, solve_uniform_price

__all__ = [
    "ArrivalDraw",
    "WelfareReport",
    "FirstBestReport",
    "Comparison",
    "COLUMNS",
    "run_policy",
    "run_baseline",
    "run_uniform",
    "run_third_degree",
    "first_degree_values",
    "run_first_degree",
    "run_vcg",
    "run_first_best",
    "period_assignment",
    "compare",
]

COLUMNS = ("mechanism", "ps", "cs", "cs_business", "cs_leisure", "ts", "ts_se", "efficiency_ratio")

# stream ids: evaluation replications use (0, r); first-degree value batches use (1, t, m)
_EVAL, _FD = 0, 1


@dataclass(frozen=True)
class ArrivalDraw:
    """All arrivals of ``R`` flights, stored flat in arrival order.

    Arrivals of replication ``r`` in period ``t`` (1-based) occupy
    ``offsets[r, t - 1]:offsets[r, t]``. ``types`` is 1 for business.
    """

    offsets: np.ndarray
    types: np.ndarray
    v: np.ndarray
    xi: np.ndarray
    seed: int
    params: FlightParams

    @property
    def R(self) -> int:
        return self.offsets.shape[0]

    @property
    def T(self) -> int:
        return self.offsets.shape[1] - 1

    @classmethod
    def generate(cls, params: FlightParams, seed: int, R: int, stream: tuple = (_EVAL,)) -> "ArrivalDraw":
        """Replication ``r`` is drawn from its own stream: counts for all periods, then 3 uniforms per arrival."""
        T = params.T
        lams = np.array([arrival_rate(params, t) for t in range(1, T + 1)])
        thetas = np.array([business_share(params, t) for t in range(1, T + 1)])
        counts = np.zeros((R, T), dtype=np.int64)
        us = []
        for r in range(R):
            s = RandomStream(seed, stream + (r,))
            counts[r] = s.poisson(lams)
            us.append(s.uniform((int(counts[r].sum()), 3)))
        return cls._build(params, seed, counts, np.concatenate(us) if us else np.zeros((0, 3)), thetas)

    @classmethod
    def _build(cls, params, seed, counts, u, thetas):
        R, T = counts.shape
        offsets = np.zeros((R, T + 1), dtype=np.int64)
        flat = np.concatenate([[0], np.cumsum(counts.ravel())])
        offsets[:, :T] = flat[:-1].reshape(R, T)
        offsets[:, T] = flat[1:].reshape(R, T)[:, -1] if R else 0
        period = np.repeat(np.tile(np.arange(T), R), counts.ravel())
        types = (u[:, 0] < thetas[period]).astype(np.int8)
        v = np.empty(u.shape[0])
        for typ, dist in ((0, params.leisure()), (1, params.business())):
            m = types == typ
            if m.any():
                v[m] = _trunc_normal_ppf(u[m, 1], dist)
        xi = params.premium().ppf(u[:, 2]) if u.shape[0] else np.zeros(0)
        return cls(offsets, types, v, np.asarray(xi, dtype=float), seed, params)

    def net_values(self):
        """Per-arrival surplus net of peanut cost in economy and first class."""
        p = self.params
        return self.v - p.c_e, self.v * self.xi - p.c_f


@dataclass
class WelfareReport:
    """Replication means and Monte Carlo standard errors of surplus measures."""

    mechanism: str
    producer_surplus: float
    consumer_surplus: float
    cs_business: float
    cs_leisure: float
    total_surplus: float
    ps_se: float
    cs_se: float
    ts_se: float
    seats_sold: tuple
    load_factor: float
    R: int
    per_rep: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_reps(cls, name: str, ps, csb, csl, sold_e, sold_f, capacity: int) -> "WelfareReport":
        ps, csb, csl = (np.asarray(a, dtype=float) for a in (ps, csb, csl))
        cs = csb + csl
        ts = ps + cs
        R = ps.size

        def se(a):
            return float(a.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0

        lf = (np.asarray(sold_e) + np.asarray(sold_f)) / capacity if capacity > 0 else np.zeros(R)
        return cls(name, float(ps.mean()), float(cs.mean()), float(csb.mean()), float(csl.mean()),
                   float(ts.mean()), se(ps), se(cs), se(ts),
                   (float(np.mean(sold_e)), float(np.mean(sold_f))), float(np.mean(lf)), R,
                   {"ps": ps, "cs": cs, "cs_business": csb, "cs_leisure": csl, "ts": ts,
                    "sold_e": np.asarray(sold_e), "sold_f": np.asarray(sold_f)})

    def as_row(self, ts_ref: float | None = None) -> dict:
        ratio = self.total_surplus / ts_ref if ts_ref else float("nan")
        return {"mechanism": self.mechanism, "ps": self.producer_surplus, "cs": self.consumer_surplus,
                "cs_business": self.cs_business, "cs_leisure": self.cs_leisure, "ts": self.total_surplus,
                "ts_se": self.ts_se, "efficiency_ratio": ratio}


def _draw(params, seed, R, draw):
    if draw is None:
        return ArrivalDraw.generate(params, seed, R)
    if draw.params != params:
        raise ValueError("arrival draw was generated for different parameters")
    return draw


def run_policy(model: SolvedModel, draw: ArrivalDraw, name: str = "policy") -> WelfareReport:
    """Simulate ``draw`` under the stored policy tables of ``model``."""
    p = model.params
    Ke, Kf = model.initial
    n = draw.types.size
    cabin = np.full(n, -1, dtype=np.int64)
    fare = np.zeros(n)
    period = np.zeros(n, dtype=np.int64)
    qt = model.q_t if model.cfg.pooled_release else model.q_e + model.q_f
    out = K.simulate_flights(draw.offsets, draw.types, draw.v, draw.xi, model.p_e, model.p_f, model.p_e_b,
                             model.p_f_b, model.q_e, model.q_f, np.ascontiguousarray(qt), Ke, Kf,
                             p.c_e, p.c_f, model.cfg.rechoice, cabin, fare, period)
    rep = WelfareReport.from_reps(name, out[:, 0], out[:, 1], out[:, 2], out[:, 3], out[:, 4], Ke + Kf)
    rep.per_rep["ts_check"] = _served_value(draw, cabin)
    rep.per_rep["cabin"] = cabin
    rep.per_rep["fare"] = fare
    return rep


def _rep_index(draw: ArrivalDraw) -> np.ndarray:
    counts = draw.offsets[:, -1] - draw.offsets[:, 0]
    return np.repeat(np.arange(draw.R), counts)


def _served_value(draw: ArrivalDraw, cabin: np.ndarray, by_type: bool = False):
    ve, vf = draw.net_values()
    val = np.where(cabin == 0, ve, np.where(cabin == 1, vf, 0.0))
    rep = _rep_index(draw)
    if not by_type:
        return np.bincount(rep, weights=val, minlength=draw.R)
    bus = np.bincount(rep, weights=val * (draw.types == 1), minlength=draw.R)
    lei = np.bincount(rep, weights=val * (draw.types == 0), minlength=draw.R)
    return bus, lei


def run_baseline(model: SolvedModel, seed: int, R: int, draw: ArrivalDraw | None = None) -> WelfareReport:
    """Current practice: cabin prices and seat releases from the solved model (point C)."""
    return run_policy(model, _draw(model.params, seed, R, draw), "baseline")


def run_uniform(params: FlightParams, initial, cfg: SolverConfig, seed: int, R: int,
                draw: ArrivalDraw | None = None, model: SolvedModel | None = None) -> WelfareReport:
    """One price for both cabins, seat releases kept (point H)."""
    model = model or solve_uniform_price(params, initial, cfg)
    return run_policy(model, _draw(params, seed, R, draw), "uniform")


def run_third_degree(params: FlightParams, initial, cfg: SolverConfig, seed: int, R: int,
                     draw: ArrivalDraw | None = None, model: SolvedModel | None = None,
                     seed_model: SolvedModel | None = None) -> WelfareReport:
    """Prices conditioned on the reason for travel, shared seat releases (point D)."""
    model = model or solve_third_degree(params, initial, cfg, seed_model=seed_model)
    return run_policy(model, _draw(params, seed, R, draw), "third_degree")


# --- first-degree and VCG -----------------------------------------------------


def first_degree_values(params: FlightParams, initial, seed: int, M: int = 200) -> np.ndarray:
    """Continuation values of the period-by-period efficient allocation.

    Entry ``[t - 1, k_e, k_f]`` is the expected value from period ``t`` on;
    each period averages ``M`` independent arrival batches, the same batches
    for every state.
    """
    Ke, Kf = CabinState(*initial)
    T = params.T
    VFD = np.zeros((T + 1, Ke + 1, Kf + 1))
    for t in range(T, 0, -1):
        lam = arrival_rate(params, t)
        theta = business_share(params, t)
        counts = np.zeros((M, 1), dtype=np.int64)
        us = []
        for m in range(M):
            s = RandomStream(seed, (_FD, t, m))
            counts[m, 0] = s.poisson(lam)
            us.append(s.uniform((int(counts[m, 0]), 3)))
        batch = ArrivalDraw._build(params, seed, counts, np.concatenate(us), np.array([theta]))
        ve, vf = batch.net_values()
        bounds = np.append(batch.offsets[:, 0], batch.offsets[-1, 1])
        VFD[t - 1] = K.fd_value_table(bounds, ve, vf, VFD[t], Ke, Kf)
    return VFD


def _run_fd(params, initial, draw, VFD, vcg: bool, name: str):
    Ke, Kf = CabinState(*initial)
    n = draw.types.size
    cabin = np.full(n, -1, dtype=np.int64)
    pay = np.zeros(n)
    ve, vf = draw.net_values()
    out = K.simulate_first_degree(draw.offsets, draw.types, draw.v, draw.xi, ve, vf, VFD, Ke, Kf, vcg, cabin, pay)
    rep = WelfareReport.from_reps(name, out[:, 0], out[:, 1], out[:, 2], out[:, 3], out[:, 4], Ke + Kf)
    rep.per_rep["ts_check"] = _served_value(draw, cabin)
    rep.per_rep["cabin"] = cabin
    rep.per_rep["fare"] = pay
    return rep


def run_first_degree(params: FlightParams, initial, cfg: SolverConfig | None, seed: int, R: int,
                     draw: ArrivalDraw | None = None, M: int = 200, values: np.ndarray | None = None
                     ) -> WelfareReport:
    """Each period's arrivals are observed and charged their valuation (point E)."""
    draw = _draw(params, seed, R, draw)
    VFD = first_degree_values(params, initial, seed, M) if values is None else values
    return _run_fd(params, initial, draw, VFD, False, "first_degree")


def run_vcg(params: FlightParams, initial, cfg: SolverConfig | None, seed: int, R: int,
            draw: ArrivalDraw | None = None, M: int = 200, values: np.ndarray | None = None) -> WelfareReport:
    """Efficient period allocation with VCG payments (point G).

    The seller's seat cost is the peanut cost plus the continuation-value
    difference, so an arrival pays the welfare the others lose through it.
    """
    draw = _draw(params, seed, R, draw)
    VFD = first_degree_values(params, initial, seed, M) if values is None else values
    return _run_fd(params, initial, draw, VFD, True, "vcg")


def period_assignment(ve, vf, v_next, state, vcg: bool = False, costs=(0.0, 0.0)):
    """Efficient assignment of one batch of net values against a continuation table.

    Returns ``(cabin, payments, welfare)``; ``cabin`` is -1/0/1 per arrival
    and ``payments`` are VCG payments when ``vcg`` (else zeros). ``costs``
    are the peanut costs netted out of ``ve``/``vf``, added back to payments.
    """
    ve = np.ascontiguousarray(ve, dtype=float)
    vf = np.ascontiguousarray(vf, dtype=float)
    ke, kf = state
    n = ve.size
    Vn = np.ascontiguousarray(v_next, dtype=float)
    G, ch = K.assignment_table(ve, vf, 0, n, min(n, ke), min(n, kf), -1)
    w, xe, xf = K.best_with_continuation(G, Vn, ke, kf)
    cabin = np.full(n, -1, dtype=np.int64)
    K.traceback(ch, 0, n, xe, xf, -1, cabin)
    pay = np.zeros(n)
    if vcg:
        for j in np.flatnonzero(cabin >= 0):
            Gm, _ = K.assignment_table(ve, vf, 0, n, min(n, ke), min(n, kf), j)
            wm, _, _ = K.best_with_continuation(Gm, Vn, ke, kf)
            own = ve[j] if cabin[j] == 0 else vf[j]
            pay[j] = own + costs[cabin[j]] - (w - wm)
    return cabin, pay, float(w)


# --- first best -----------------------------------------------------------------


@dataclass
class FirstBestReport:
    """Offline efficient allocation; ``a`` extracts all surplus, ``b`` prices at peanut cost."""

    a: WelfareReport
    b: WelfareReport

    @property
    def total_surplus(self) -> float:
        return self.a.total_surplus


def run_first_best(params: FlightParams, initial, seed: int, R: int,
                   draw: ArrivalDraw | None = None) -> FirstBestReport:
    """Pool all arrivals of a flight and give seats to the highest net values."""
    draw = _draw(params, seed, R, draw)
    Ke, Kf = CabinState(*initial)
    ve, vf = draw.net_values()
    cabin = np.full(draw.types.size, -1, dtype=np.int64)
    ts = K.first_best(draw.offsets, ve, vf, Ke, Kf, cabin)
    bus, lei = _served_value(draw, cabin, by_type=True)
    se = np.bincount(_rep_index(draw), weights=(cabin == 0).astype(float), minlength=draw.R)
    sf = np.bincount(_rep_index(draw), weights=(cabin == 1).astype(float), minlength=draw.R)
    zero = np.zeros(draw.R)
    a = WelfareReport.from_reps("first_best_extract", ts, zero, zero, se, sf, Ke + Kf)
    b = WelfareReport.from_reps("first_best_peanut", zero, bus, lei, se, sf, Ke + Kf)
    a.per_rep["ts_check"] = ts
    b.per_rep["ts_check"] = bus + lei
    return FirstBestReport(a, b)


# --- comparison -----------------------------------------------------------------


@dataclass
class Comparison:
    """Welfare of every mechanism on one set of arrival draws.

    ``points`` maps the welfare-triangle labels to (consumer surplus,
    producer surplus): O origin, A/B first-best extremes, C current practice,
    D third-degree, E/F first-degree extremes, G VCG, H uniform price.
    """

    reports: dict
    points: dict
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        ts_ref = self.reports["first_best_extract"].total_surplus
        return [r.as_row(ts_ref) for r in self.reports.values()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"columns": list(COLUMNS), "rows": self.rows(),
               "points": {k: list(v) for k, v in self.points.items()}, "meta": self.meta}
        return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True)


def compare(params: FlightParams, initial, cfg: SolverConfig = SolverConfig(), seed: int = 0, R: int = 1000,
            M: int = 200, models: dict | None = None) -> Comparison:
    """Run every mechanism on shared draws.

    ``models`` may hold pre-solved ``uniform``, ``baseline`` and
    ``third_degree`` models. Otherwise they are solved in that order, each
    seeded with the previous one so their values nest.
    """
    initial = CabinState(*initial)
    models = dict(models or {})
    if "uniform" not in models:
        models["uniform"] = solve_uniform_price(params, initial, cfg)
    if "baseline" not in models:
        models["baseline"] = solve(params, initial, replace(cfg, pricing="discriminate"),
                                   seed_model=models["uniform"])
    if "third_degree" not in models:
        models["third_degree"] = solve_third_degree(params, initial, cfg, seed_model=models["baseline"])
    draw = ArrivalDraw.generate(params, seed, R)
    VFD = first_degree_values(params, initial, seed, M)
    reps = {}
    reps["baseline"] = run_policy(models["baseline"], draw, "baseline")
    reps["uniform"] = run_policy(models["uniform"], draw, "uniform")
    reps["third_degree"] = run_policy(models["third_degree"], draw, "third_degree")
    fd = _run_fd(params, initial, draw, VFD, False, "first_degree")
    reps["first_degree"] = fd
    bus, lei = _served_value(draw, fd.per_rep["cabin"], by_type=True)
    zero = np.zeros(draw.R)
    reps["first_degree_peanut"] = WelfareReport.from_reps("first_degree_peanut", zero, bus, lei,
                                                          fd.per_rep["sold_e"], fd.per_rep["sold_f"],
                                                          initial.k_e + initial.k_f)
    reps["first_degree_peanut"].per_rep["ts_check"] = bus + lei
    reps["vcg"] = _run_fd(params, initial, draw, VFD, True, "vcg")
    fb = run_first_best(params, initial, seed, R, draw=draw)
    reps["first_best_extract"] = fb.a
    reps["first_best_peanut"] = fb.b

    def pt(r):
        return (r.consumer_surplus, r.producer_surplus)

    points = {"O": (0.0, 0.0), "A": pt(fb.a), "B": pt(fb.b), "C": pt(reps["baseline"]),
              "D": pt(reps["third_degree"]), "E": pt(fd), "F": pt(reps["first_degree_peanut"]),
              "G": pt(reps["vcg"]), "H": pt(reps["uniform"])}
    meta = {"seed": seed, "R": R, "M": M, "initial": list(initial),
            "values": {k: float(m.V(1, initial)) for k, m in models.items()}}
    return Comparison(reps, points, meta)

import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from twocabin import estimation as E
from twocabin.demand import TABLE_LABELS, FlightParams
from twocabin.numerics import DomainError, NumericalError
from twocabin.solver import SolverConfig, solve

BOX = E.DEFAULT_BOX
TINY = FlightParams(413.234, 0.608, 0.226, 0.353, 0.230, 12.0, -0.5, 0.3, T=3)
CAP = (14, 3)


def synthetic_library(S, seed, dim=30):
    """Library whose moments are a smooth nonlinear function of the draw."""
    rng = np.random.default_rng(seed)
    X = BOX.lo + rng.random((S, 8)) * BOX.width
    A = rng.normal(size=(8, dim))
    moments = 100 * np.tanh(((X - BOX.lo) / BOX.width) @ A)
    log_g = np.full(S, -np.log(BOX.width).sum())
    return E.MomentLibrary(BOX, (20, 4), X, moments, log_g, tuple(f"m{i}" for i in range(dim)))


def flight_rows(fid, fares_e, fare_f=None, cap=(5, 1), reason="L", per_period=2):
    rows = []
    for t, f in enumerate(fares_e, start=1):
        for _ in range(per_period):
            rows.append(E.TicketRecord(fid, 0, cap[0], cap[1], t, "E", f, reason))
        if fare_f is not None:
            rows.append(E.TicketRecord(fid, 0, cap[0], cap[1], t, "F", fare_f, "B"))
    return rows


@pytest.fixture(scope="module")
def tiny_model():
    return solve(TINY, CAP)


def test_single_flight_degenerate_deciles():
    rows = flight_rows(1, [100.0, 120.0, 150.0], fare_f=400.0, cap=(6, 2))
    mv = E.empirical_moments(rows, (6, 2), T=3, min_tickets=1)
    assert mv.dim == len(E.moment_names(3))
    for t, f in enumerate([100.0, 120.0, 150.0]):
        q = mv.values[[i for i, n in enumerate(mv.names) if n.startswith(f"fare_e:t{t + 1}:")]]
        assert np.all(q == f)
    assert np.all(mv.family("max_gap") == 300.0)
    assert np.all(mv.family("min_gap") == 250.0)
    assert mv.names[-1] == "business_share:all" and mv.values[-1] == pytest.approx(3 / 9)


def test_two_flights_interpolate():
    rows = flight_rows(1, [100.0] * 3) + flight_rows(2, [200.0] * 3)
    mv = E.empirical_moments(rows, (5, 1), T=3, min_tickets=1)
    for t in range(1, 4):
        q = mv.values[[i for i, n in enumerate(mv.names) if n.startswith(f"fare_e:t{t}:")]]
        np.testing.assert_allclose(q, 100 + 100 * np.array(E.DECILES))
    # the first cabin never sold: those cells are skipped and counted as empty
    idx = [i for i, n in enumerate(mv.names) if n.startswith("fare_f:")]
    assert np.isnan(mv.values[idx]).all() and np.all(mv.counts[idx] == 0)


def test_short_flights_screened_and_empty_group():
    rows = flight_rows(1, [100.0] * 3) + flight_rows(2, [300.0] * 3, per_period=4)
    mv = E.empirical_moments(rows, (5, 1), T=3, min_tickets=10)
    assert mv.meta["n_flights"] == 1 and mv.meta["n_dropped"] == 1
    assert np.all(mv.family("fare_e") == 300.0)
    with pytest.raises(E.DataError):
        E.empirical_moments(rows, (9, 9), T=3)


def test_pipeline_symmetry(tiny_model):
    tickets = E.simulate_tickets(tiny_model, seed=4, R=60)
    a = E.model_moments(tiny_model, seed=4, R=60)
    b = E.empirical_moments(tickets, CAP, T=3)
    assert np.array_equal(a.values, b.values, equal_nan=True)
    assert np.array_equal(a.counts, b.counts)


def test_model_moments_single_flight(tiny_model):
    mv = E.model_moments(tiny_model, seed=11, R=1, min_tickets=1)
    fams = [f for f, _ in E.FAMILIES] + ["max_gap", "min_gap"]
    for fam in fams:
        for t in range(1, 4):
            idx = [i for i, n in enumerate(mv.names) if n.startswith(f"{fam}:t{t}:")]
            if idx:
                q = mv.values[idx]
                assert np.all(q == q[0]) or np.isnan(q).all()


def test_period_one_has_no_business(tiny_model):
    tt = E.simulate_tickets(tiny_model, seed=2, R=300)
    assert len(tt) > 0
    assert not tt.business[tt.period == 1].any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_flights=st.integers(1, 12))
def test_deciles_monotone(seed, n_flights):
    rng = np.random.default_rng(seed)
    rows = []
    for fid in range(n_flights):
        for t in range(1, 4):
            for _ in range(int(rng.integers(0, 5))):
                cab = "F" if rng.random() < 0.3 else "E"
                rows.append(E.TicketRecord(fid, 0, 16, 4, t, cab, float(rng.uniform(20, 900)),
                                           "B" if rng.random() < 0.4 else "L"))
    if not rows:
        return
    mv = E.empirical_moments(rows, (16, 4), T=3, min_tickets=1)
    q = mv.values[:-1].reshape(-1, len(E.DECILES))
    for block in q:
        if not np.isnan(block).any():
            assert np.all(np.diff(block) >= -1e-9)
    for fam in ("share_sold", "business_share", "load_factor"):
        v = mv.family(fam)
        v = v[~np.isnan(v)]
        assert np.all((v >= 0) & (v <= 1 + 1e-12))


def test_simulated_moments_monotone(tiny_model):
    mv = E.model_moments(tiny_model, seed=8, R=200)
    q = mv.values[:-1].reshape(-1, len(E.DECILES))
    for block in q[~np.isnan(q).any(axis=1)]:
        assert np.all(np.diff(block) >= -1e-9)


def test_ticket_csv_roundtrip(tmp_path, tiny_model):
    tt = E.simulate_tickets(tiny_model, seed=1, R=20)
    path = tmp_path / "t.csv"
    E.write_tickets(tt, path)
    back = E.read_tickets(path, T=3)
    for f in tt.__dataclass_fields__:
        assert np.array_equal(getattr(tt, f), getattr(back, f)), f
    empty = tmp_path / "e.csv"
    E.write_tickets(E.simulate_tickets(tiny_model, seed=1, R=0), empty)
    assert empty.read_text().strip() == ",".join(E.TICKET_HEADER)


def test_read_tickets_errors(tmp_path):
    path = tmp_path / "bad.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(E.TICKET_HEADER)
        w.writerow([1, 0, 5, 1, 1, "E", "120.0", "L"])
        w.writerow([1, 0, 5, 1, 2, "E", "", "L"])
    with pytest.raises(E.DataError, match="line 3"):
        E.read_tickets(path)
    nofare = tmp_path / "nofare.csv"
    nofare.write_text("flight_id,market_id,cap_econ,cap_first,period,cabin,reason\n1,0,5,1,1,E,L\n")
    with pytest.raises(E.DataError, match="line 1.*fare"):
        E.read_tickets(nofare)
    late = tmp_path / "late.csv"
    late.write_text(",".join(E.TICKET_HEADER) + "\n1,0,5,1,9,E,100,L\n")
    with pytest.raises(E.DataError, match="line 2"):
        E.read_tickets(late, T=8)


def test_empirical_matches_model_across_seeds(tiny_model):
    # independent simulated samples scatter around each other like Monte Carlo draws
    reps = np.array([E.model_moments(tiny_model, seed=100 + s, R=150).values for s in range(20)])
    emp = E.empirical_moments(E.simulate_tickets(tiny_model, seed=7, R=150), CAP, T=3).values
    names = E.moment_names(3)
    checked = 0
    for i, n in enumerate(names):
        if not (n.endswith(":q50") or n == "business_share:all"):
            continue
        col = reps[:, i]
        if np.isnan(col).any() or np.isnan(emp[i]):
            continue
        sd = col.std(ddof=1)
        assert abs(emp[i] - col.mean()) <= 4 * sd * np.sqrt(1 + 1 / col.size) + 1e-9, n
        checked += 1
    assert checked > 10


# --- mixture ----------------------------------------------------------------------


def test_uniform_density_gives_column_mean():
    lib = synthetic_library(50, 0)
    h = E.MixingDensity.uniform(BOX)
    w = E.mixture_weights(lib, h)
    assert np.all(w == w[0]) and w.sum() == pytest.approx(1.0, abs=1e-15)
    m, ess = E.mixture_moments(lib, h, return_ess=True)
    assert np.array_equal(m, lib.moments.mean(axis=0))
    assert ess == pytest.approx(lib.S)


def test_weights_normalized_for_random_densities():
    lib = synthetic_library(80, 1)
    rng = np.random.default_rng(2)
    for _ in range(20):
        h = E.MixingDensity.diagonal(BOX.lo + rng.random(8) * BOX.width,
                                     rng.uniform(0.05, 1.0, 8) * BOX.width, BOX)
        w = E.mixture_weights(lib, h)
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)
        m, ess = E.mixture_moments(lib, h, return_ess=True)
        np.testing.assert_allclose(m, w @ lib.moments, rtol=1e-12, atol=1e-12)
        assert 1.0 <= ess <= lib.S + 1e-9


def test_point_mass_limit_selects_draw():
    lib = synthetic_library(40, 3)
    for k in (0, 17, 39):
        for sd in (1e-2, 1e-3):
            h = E.MixingDensity.diagonal(lib.draws[k], sd * BOX.width, BOX)
            np.testing.assert_allclose(E.mixture_moments(lib, h), lib.moments[k], atol=1e-8)


def test_mixture_errors():
    lib = synthetic_library(10, 4)
    other = E.Box.of(BOX.lo, BOX.hi + 1)
    with pytest.raises(DomainError):
        E.mixture_weights(lib, E.MixingDensity.uniform(other))
    far = E.MixingDensity.diagonal(BOX.hi, 1e-9 * BOX.width, BOX)
    with pytest.raises(NumericalError):
        E.mixture_weights(lib, far)


def test_mixing_density_roundtrip_and_sampling():
    h = E.MixingDensity.diagonal(BOX.lo + 0.3 * BOX.width, 0.2 * BOX.width, BOX)
    back = E.MixingDensity.from_dict(h.to_dict())
    assert np.array_equal(back.mu, h.mu) and np.array_equal(back.chol, h.chol) and back.flat == h.flat
    x = h.sample(5000, seed=1)
    assert np.all(x >= BOX.lo) and np.all(x <= BOX.hi)
    assert np.array_equal(x, h.sample(5000, seed=1))


def test_single_draw_not_identified():
    lib = synthetic_library(1, 5)
    rho = lib.moments[0] + 1.0
    rng = np.random.default_rng(6)
    vals = {E.objective(lib, E.MixingDensity.diagonal(BOX.lo + rng.random(8) * BOX.width,
                                                      rng.uniform(0.1, 1, 8) * BOX.width, BOX), rho)
            for _ in range(5)}
    assert len(vals) == 1
    res = E.fit(lib, rho, E.FitConfig(n_starts=2, maxfev=200))
    assert res.identified is False
    assert res.objective == pytest.approx(vals.pop())


@pytest.mark.parametrize("seed", range(10))
def test_fit_self_recovery(seed):
    lib = synthetic_library(100, seed)
    rng = np.random.default_rng(100 + seed)
    h0 = E.MixingDensity.diagonal(BOX.lo + rng.uniform(0.2, 0.8, 8) * BOX.width,
                                  rng.uniform(0.1, 0.4, 8) * BOX.width, BOX)
    rho = E.mixture_moments(lib, h0)
    scale = float(np.sum(rho ** 2))
    res = E.fit(lib, rho, E.FitConfig(n_starts=8, maxfev=4000, seed=seed))
    # h0 attains zero; the optimizer must get there to within its tolerance
    assert res.objective <= E.objective(lib, h0, rho) + 1e-4 * scale
    fitted = E.mixture_moments(lib, res.density)
    assert np.linalg.norm(fitted - rho) <= 1e-2 * np.linalg.norm(rho)
    assert len(res.local_optima) >= 1 and res.identified


def test_fit_deterministic():
    lib = synthetic_library(60, 9)
    rho = lib.moments[:10].mean(axis=0)
    cfg = E.FitConfig(n_starts=3, maxfev=500, seed=4)
    a, b = E.fit(lib, rho, cfg), E.fit(lib, rho, cfg)
    assert np.array_equal(a.density.mu, b.density.mu) and a.objective == b.objective


def test_sklearn_wrapper():
    lib = synthetic_library(60, 10)
    rho = lib.moments[:5].mean(axis=0)
    est = E.MixtureMomentEstimator(n_starts=2, maxfev=400, seed=1)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(AttributeError):
        est.predict(lib)
    est.fit(lib, rho)
    np.testing.assert_array_equal(est.predict(lib), E.mixture_moments(lib, est.density_))
    assert est.score(lib, rho) == pytest.approx(-est.objective_)


# --- pooling and bootstrap -----------------------------------------------------


def test_pool_single_capacity_is_identity():
    h = E.MixingDensity.diagonal(BOX.lo + 0.4 * BOX.width, 0.3 * BOX.width, BOX)
    out = E.pool_capacities({(20, 4): h}, {(20, 4): 1.0}, n=50_000)
    assert out.labels == TABLE_LABELS
    np.testing.assert_array_equal(out.means, h.truncated_mean(50_000, 0))
    assert [r["parameter"] for r in out.rows()] == list(TABLE_LABELS)
    with pytest.raises(DomainError):
        E.pool_capacities({(20, 4): h}, {(20, 4): 0.9})


def test_pool_two_capacities_matches_sampling():
    h1 = E.MixingDensity.diagonal(BOX.lo + 0.1 * BOX.width, 0.3 * BOX.width, BOX)
    h2 = E.MixingDensity.diagonal(BOX.lo + 0.8 * BOX.width, 0.2 * BOX.width, BOX)
    out = E.pool_capacities({(20, 4): h1, (115, 14): h2}, {(20, 4): 0.5, (115, 14): 0.5}, n=200_000)
    # independent oracle: 10^6 draws from the pooled mixture by rejection
    rng = np.random.default_rng(77)
    pick = rng.random(1_000_000) < 0.5
    draws = []
    for h, sel in ((h1, pick), (h2, ~pick)):
        need = int(sel.sum())
        got = np.empty((0, 8))
        while got.shape[0] < need:
            z = h.mu + rng.standard_normal((need, 8)) * np.diag(h.chol)
            z = z[np.all((z >= BOX.lo) & (z <= BOX.hi), axis=1)]
            got = np.vstack([got, z])
        draws.append(got[:need])
    oracle = np.vstack(draws)
    se = oracle.std(axis=0) / np.sqrt(oracle.shape[0]) + np.sqrt(
        0.25 * (h1.truncated_mean(200_000, 0) - h2.truncated_mean(200_000, 0)) ** 2 / 200_000)
    assert np.all(np.abs(out.means - oracle.mean(axis=0)) <= 6 * se + 1e-3 * BOX.width)
    plain = 0.5 * (h1.mu + h2.mu)
    assert np.any(np.abs(out.means - plain) > 10 * se)  # truncation shifts the mean
    for lab in TABLE_LABELS:
        x, d = out.curves[lab]
        assert np.sum(d) * (x[1] - x[0]) == pytest.approx(1.0, rel=1e-6)


class _Constant:
    """RNG stand-in whose resamples are always the identity permutation."""

    def integers(self, low, high, size):
        return np.arange(size) % high


def test_bootstrap(tiny_model):
    tickets = E.simulate_tickets(tiny_model, seed=3, R=80)
    lib = E.MomentLibrary(
        BOX, CAP, BOX.lo + np.random.default_rng(0).random((12, 8)) * BOX.width,
        np.nan_to_num(np.array([E.model_moments(tiny_model, seed=s, R=40).values for s in range(12)])),
        np.zeros(12), E.moment_names(3))
    cfg = E.FitConfig(n_starts=2, maxfev=200, seed=0)
    out = E.bootstrap(tickets, lib, 2, cfg, T=3, rng=_Constant())
    assert out["labels"] == TABLE_LABELS and np.all(out["se"] == 0)
    with pytest.raises(DomainError):
        E.bootstrap(tickets, lib, 1, cfg, T=3)
    a = E.bootstrap(tickets, lib, 2, cfg, seed=5, T=3)
    b = E.bootstrap(tickets, lib, 2, cfg, seed=5, T=3)
    assert np.array_equal(a["se"], b["se"])


# --- library ----------------------------------------------------------------------

LIB_BOX = E.Box.of([300, 0.3, 0.1, 0.2, 0.1, 4.0, -0.5, 0.0], [500, 0.7, 0.4, 0.5, 0.4, 8.0, 0.0, 0.3])


def test_library_deterministic_and_resumable(tmp_path):
    cfg = SolverConfig()
    kw = dict(S=4, omega1=(3, 1), cfg=cfg, seed=2, R=30, fixed={"T": 2})
    a = E.build_library(LIB_BOX, path=tmp_path / "a.lib", **kw)
    b = E.build_library(LIB_BOX, path=tmp_path / "b.lib", **kw)
    assert (tmp_path / "a.lib").read_bytes() == (tmp_path / "b.lib").read_bytes()
    assert a.S == 4 and a.dim == len(E.moment_names(2)) and a.meta["n_failed"] == 0
    assert np.all((a.draws >= LIB_BOX.lo) & (a.draws <= LIB_BOX.hi))
    back = E.MomentLibrary.load(tmp_path / "a.lib")
    assert np.array_equal(back.moments, a.moments, equal_nan=True)
    # interrupt after two draws, then resume
    calls = []
    real = E._library_draw

    def flaky(job):
        if len(calls) == 2:
            raise KeyboardInterrupt
        calls.append(job[0])
        return real(job)

    E._library_draw = flaky
    try:
        with pytest.raises(KeyboardInterrupt):
            E.build_library(LIB_BOX, path=tmp_path / "c.lib", checkpoint_every=1, **kw)
    finally:
        E._library_draw = real
    assert (tmp_path / "c.lib.partial").exists()
    resumed = []

    def counting(job):
        resumed.append(job[0])
        return real(job)

    E._library_draw = counting
    try:
        E.build_library(LIB_BOX, path=tmp_path / "c.lib", checkpoint_every=1, **kw)
    finally:
        E._library_draw = real
    assert resumed == [2, 3]
    assert (tmp_path / "c.lib").read_bytes() == (tmp_path / "a.lib").read_bytes()
    assert not (tmp_path / "c.lib.partial").exists()


def test_library_single_draw_and_failures(monkeypatch):
    lib = E.build_library(LIB_BOX, 1, (3, 1), seed=1, R=20, fixed={"T": 2})
    rng = np.random.default_rng(0)
    h = E.MixingDensity.diagonal(LIB_BOX.lo + rng.random(8) * LIB_BOX.width, 0.1 * LIB_BOX.width, LIB_BOX)
    np.testing.assert_array_equal(E.mixture_moments(lib, h), lib.moments[0])
    real = E._library_draw

    def fail_first(job):
        if job[0] == 0:
            return job[0], None, "SolverError: forced"
        return real(job)

    monkeypatch.setattr(E, "_library_draw", fail_first)
    lib2 = E.build_library(LIB_BOX, 3, (3, 1), seed=1, R=20, fixed={"T": 2})
    assert lib2.S == 2 and lib2.meta["n_failed"] == 1 and lib2.meta["draw_index"] == [1, 2]

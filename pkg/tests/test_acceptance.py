"""Acceptance experiments.

Each test prints one ``criterion N: PASS|FAIL`` line (collected again in the
terminal summary) and then asserts the same verdict.
"""

import json
import math
import time

import numpy as np
import pytest

from _oracles import chi2_pvalue, grid_dp
from twocabin import estimation as E
from twocabin import mechanisms as M
from twocabin.cli import main as cli_main
from twocabin.demand import AvailabilityRegime, FlightParams, arrival_rate, choice_probs
from twocabin.market import PolicyEntry, sales_pmf, simulate_period_batch, single_cabin_kernel
from twocabin.numerics import RandomStream
from twocabin.solver import SolverConfig, solve

TABLE_1 = FlightParams(413.234, 0.608, 0.226, 0.353, 0.230, 23.318, -0.071, 0.077)
TABLE_2 = FlightParams(508.054, 0.247, 0.116, 0.371, 0.267, 18.119, -0.052, 0.071)

pytestmark = pytest.mark.slow


# --- 1. kernel oracle ---------------------------------------------------------------


def random_kernel_case(rng):
    box = E.DEFAULT_BOX
    x = box.lo + rng.random(8) * box.width
    params = FlightParams.from_vector(x)
    t = int(rng.integers(1, 9))
    ke, kf = int(rng.integers(0, 25)), int(rng.integers(0, 6))
    qe, qf = int(rng.integers(0, ke + 1)), int(rng.integers(0, kf + 1))
    pe = float(rng.uniform(14, 1.5 * params.mu_l))
    pf = float(pe * rng.uniform(0.9, 2.5))
    if rng.random() < 0.3:
        pol = PolicyEntry(pe, pf, qe, qf, p_e_b=pe * rng.uniform(1, 1.5), p_f_b=pf * rng.uniform(1, 1.5))
    else:
        pol = PolicyEntry(pe, pf, qe, qf)
    return params, t, (ke, kf), pol


def closed_form_single_cabin(rate, m):
    """Seats-remaining law when sales are Poisson(rate) censored at m."""
    p = [math.exp(-rate) * rate ** k / math.factorial(k) for k in range(m)]
    return {m - k: v for k, v in enumerate(p)} | {0: 1.0 - sum(p)}


def test_criterion_1_kernel_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    pvals = []
    for i in range(25):
        params, t, state, pol = random_kernel_case(rng)
        pmf = sales_pmf(params, t, state, pol)
        res = simulate_period_batch(RandomStream(11, (i,)), params, t, state, pol, 100_000)
        counts = np.zeros_like(pmf.prob)
        np.add.at(counts, (res[:, 0], res[:, 1]), 1)
        pvals.append(chi2_pvalue(counts, pmf.prob))
    worst = 0.0
    for params, t, m, pe in ((TABLE_1, 4, 6, 390.0), (TABLE_2, 7, 20, 450.0), (TABLE_1, 1, 1, 100.0),
                             (TABLE_2, 3, 40, 700.0)):
        pmf = sales_pmf(params, t, (m, 0), PolicyEntry(pe, 1e4, m, 0), eps=1e-10)
        buy = choice_probs(params, t, pe, 1e4, AvailabilityRegime.ECONOMY_ONLY).p_buy_e
        closed = closed_form_single_cabin(arrival_rate(params, t) * buy, m)
        kern = single_cabin_kernel(arrival_rate(params, t), buy, m)
        for a in range(m + 1):
            worst = max(worst, abs(pmf.prob[a, 0] - closed[m - a]), abs(kern.get(m - a, 0.0) - closed[m - a]))
    # the first cabin alone uses its own regime
    for params, t, m, pf in ((TABLE_2, 5, 4, 800.0), (TABLE_1, 8, 9, 1200.0)):
        pmf = sales_pmf(params, t, (0, m), PolicyEntry(1e4, pf, 0, m), eps=1e-10)
        buy = choice_probs(params, t, 1e4, pf, AvailabilityRegime.FIRST_ONLY).p_buy_f
        closed = closed_form_single_cabin(arrival_rate(params, t) * buy, m)
        for b in range(m + 1):
            worst = max(worst, abs(pmf.prob[0, b] - closed[m - b]))
    elapsed = time.perf_counter() - t0
    n_pass = sum(p >= 0.01 for p in pvals)
    ok = n_pass == 25 and worst <= 1e-10 and elapsed < 300
    verdict(1, ok, f"chi2 at 1%: {n_pass}/25 configs pass (min p={min(pvals):.4f}); single-cabin max "
                   f"|diff|={worst:.2e} (tol 1e-10); {elapsed:.0f}s (limit 300s)")
    assert ok


# --- 2. DP oracle --------------------------------------------------------------------


def test_criterion_2_dp_oracle(verdict):
    t0 = time.perf_counter()
    ge = np.linspace(14, 1400, 50)
    gf = np.linspace(40, 2400, 50)
    base = FlightParams(413.234, 0.608, 0.226, 0.353, 0.230, 2.0, -0.2, 0.15, T=1)
    cases = [
        (base, (2, 1)),
        (base.replace(T=2, lambda0=2.5, d_lambda=-0.4, d_theta=0.3), (2, 1)),
        (base.replace(T=3, lambda0=1.5, d_lambda=0.3, d_theta=0.2), (2, 1)),
        (TABLE_2.replace(T=3, lambda0=2.0, d_lambda=-0.3), (1, 1)),
        (TABLE_2.replace(T=2, lambda0=3.0, d_lambda=0.0), (2, 0)),
    ]
    worst_gap, worst_price, checked, bad = 0.0, 0.0, 0, []
    for params, k in cases:
        V, pol, res = grid_dp(params, k, ge, gf)
        m = solve(params, k, SolverConfig(release_mode="full"))
        for t in range(1, params.T + 1):
            for s, gv in V[t].items():
                gap = m.V(t, s) - gv
                if not -1e-7 <= gap <= res[t][s]:
                    bad.append((params.T, t, s, gap, res[t][s]))
                worst_gap = max(worst_gap, abs(gap))
                got, ref = m.policy(t, s), pol[t][s]
                if (got.q_e, got.q_f) == ref[2:]:
                    checked += 1
                    if got.q_e > 0:
                        d = abs(got.p_e - ref[0]) / (ge[1] - ge[0])
                        worst_price = max(worst_price, d)
                        if d > 1:
                            bad.append(("p_e", t, s, got.p_e, ref[0]))
                    if got.q_f > 0:
                        d = abs(got.p_f - ref[1]) / (gf[1] - gf[0])
                        worst_price = max(worst_price, d)
                        if d > 1:
                            bad.append(("p_f", t, s, got.p_f, ref[1]))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 600
    verdict(2, ok, f"{len(cases)} instances; value within grid resolution (max |gap|={worst_gap:.3f}); "
                   f"prices within {worst_price:.2f} grid steps on {checked} matching releases; "
                   f"{len(bad)} violations; {elapsed:.0f}s (limit 600s)")
    assert ok, bad[:5]


# --- 3. solver / simulator consistency ----------------------------------------------


def test_criterion_3_value_matches_simulation(verdict):
    t0 = time.perf_counter()
    model = solve(TABLE_1, (20, 4))
    draw = M.ArrivalDraw.generate(TABLE_1, 31, 20_000)
    rep = M.run_policy(model, draw, "baseline")
    V1 = model.V(1, (20, 4))
    z = (rep.producer_surplus - V1) / rep.ps_se
    elapsed = time.perf_counter() - t0
    ok = abs(z) <= 4 and elapsed < 1800
    verdict(3, ok, f"V_1={V1:.2f}, simulated PS={rep.producer_surplus:.2f} (SE {rep.ps_se:.2f}, "
                   f"z={z:+.2f}, limit 4); {elapsed:.0f}s (limit 1800s)")
    assert ok


# --- 4. welfare orderings -------------------------------------------------------------


def paired_geq(a, b):
    d = a - b
    se = d.std(ddof=1) / math.sqrt(d.size)
    return d.mean() >= -4 * se, d.mean(), se


def test_criterion_4_welfare_orderings(verdict):
    t0 = time.perf_counter()
    cmp = M.compare(TABLE_2, (115, 14), SolverConfig(release_mode="window"), seed=5, R=5000, M=100)
    r = {k: v.per_rep for k, v in cmp.reports.items()}
    rep = cmp.reports
    checks = {}
    fb = r["first_best_extract"]["ts"]
    for name in ("baseline", "uniform", "third_degree", "first_degree", "vcg"):
        checks[f"pathwise TS(FB)>=TS({name})"] = bool(np.all(fb >= r[name]["ts"] - 1e-6))
    checks["pathwise TS(VCG)=TS(FD)"] = bool(np.allclose(r["vcg"]["ts"], r["first_degree"]["ts"], atol=1e-6))
    for name in ("baseline", "uniform", "third_degree"):
        checks[f"E TS(FD)>=TS({name})"] = paired_geq(r["first_degree"]["ts"], r[name]["ts"])[0]
    detail = []
    for a, b in (("first_degree", "third_degree"), ("third_degree", "baseline"), ("baseline", "uniform")):
        ok_ab, mean, se = paired_geq(r[a]["ps"], r[b]["ps"])
        checks[f"E PS({a})>=PS({b})"] = ok_ab
        detail.append(f"PS {a}-{b}={mean:.1f}+-{se:.1f}")
    ratio = rep["baseline"].total_surplus / rep["first_best_extract"].total_surplus
    checks["TS(baseline)/TS(FB) in (0.7,1)"] = 0.7 < ratio < 1.0
    checks["CS(VCG)>CS(baseline)"] = rep["vcg"].consumer_surplus > rep["baseline"].consumer_surplus
    checks["CS(FD)==0"] = bool(np.all(r["first_degree"]["cs"] == 0.0)) and rep["first_degree"].consumer_surplus == 0.0
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 7200
    verdict(4, ok, f"{len(checks) - len(failed)}/{len(checks)} orderings hold; TS ratio={ratio:.3f}; "
                   f"CS VCG={rep['vcg'].consumer_surplus:.0f} vs baseline={rep['baseline'].consumer_surplus:.0f}; "
                   f"{'; '.join(detail)}; failed={failed}; {elapsed:.0f}s (limit 7200s)")
    assert ok


# --- 5. estimation self-recovery ----------------------------------------------------


def test_criterion_5_self_recovery(verdict, tmp_path):
    t0 = time.perf_counter()
    box = E.DEFAULT_BOX
    truth = TABLE_1
    psi = truth.to_vector()
    model = solve(truth, (20, 4))
    tickets = E.simulate_tickets(model, seed=77, R=400)
    rho = E.empirical_moments(tickets, (20, 4))
    lib = E.build_library(box, 200, (20, 4), SolverConfig(), seed=0, R=500, path=tmp_path / "lib.bin")
    t_lib = time.perf_counter() - t0
    h0 = E.MixingDensity.diagonal(psi, 0.02 * box.width, box)
    obj_h0 = E.objective(lib, h0, rho)
    res = E.fit(lib, rho)
    err = np.abs(res.density.mu - psi) / box.width
    elapsed = time.perf_counter() - t0
    within = err <= 0.10
    ok = bool(within.all()) and res.objective < obj_h0 and elapsed < 4 * 3600
    per = ", ".join(f"{n}={e:.3f}" for n, e in zip(E.PARAM_NAMES, err))
    verdict(5, ok, f"|mu-psi*|/width: {per} (limit 0.10, {int(within.sum())}/8 within); objective "
                   f"{res.objective:.4g} vs h0 {obj_h0:.4g}; ESS={res.ess:.1f}; library S={lib.S} "
                   f"({lib.meta['n_failed']} failed, {t_lib:.0f}s); {elapsed:.0f}s (limit 14400s)")
    assert ok


# --- 6. mixture identities ---------------------------------------------------------------


def test_criterion_6_mixture_identities(verdict):
    t0 = time.perf_counter()
    small_box = E.Box.of([300, 0.3, 0.1, 0.2, 0.1, 4.0, -0.5, 0.0], [500, 0.7, 0.4, 0.5, 0.4, 8.0, 0.0, 0.3])
    lib = E.build_library(small_box, 8, (6, 2), seed=3, R=40, fixed={"T": 2}, min_tickets=1)
    Mx = lib.moments
    h = E.MixingDensity.uniform(small_box)
    got = E.mixture_moments(lib, h)
    full = np.all(np.isfinite(Mx), axis=0)
    some = ~full & np.any(np.isfinite(Mx), axis=0)
    with np.errstate(invalid="ignore"):
        ref = np.where(full, Mx.mean(axis=0), np.nan)
        ref[some] = np.nanmean(Mx[:, some], axis=0)
    identity = np.array_equal(got, ref, equal_nan=True)
    rng = np.random.default_rng(8)
    sums = []
    for _ in range(50):
        hh = E.MixingDensity.diagonal(small_box.lo + rng.random(8) * small_box.width,
                                      rng.uniform(0.05, 1.0, 8) * small_box.width, small_box)
        sums.append(abs(E.mixture_weights(lib, hh).sum() - 1.0))
    sums.append(abs(E.mixture_weights(lib, h).sum() - 1.0))
    limit_err = 0.0
    for k in range(lib.S):
        for sd in (1e-2, 1e-3, 1e-4):
            m = E.mixture_moments(lib, E.MixingDensity.diagonal(lib.draws[k], sd * small_box.width, small_box))
            fin = np.isfinite(Mx[k])
            limit_err = max(limit_err, float(np.max(np.abs(m[fin] - Mx[k, fin]))))
    _, ess = E.mixture_moments(lib, h, return_ess=True)
    elapsed = time.perf_counter() - t0
    ok = identity and max(sums) <= 1e-12 and limit_err <= 1e-8 and abs(ess - lib.S) < 1e-9 and elapsed < 60
    verdict(6, ok, f"uniform mixture equals column mean bitwise: {identity}; max |sum w - 1|={max(sums):.1e}; "
                   f"point-mass max |diff|={limit_err:.1e}; ESS={ess:.1f} of S={lib.S}; {elapsed:.0f}s (limit 60s)")
    assert ok


# --- 7. determinism ----------------------------------------------------------------------


def test_criterion_7_cli_determinism(verdict, tmp_path):
    box = {"lo": [300, 0.3, 0.1, 0.2, 0.1, 8.0, -1.0, 0.0], "hi": [500, 0.7, 0.4, 0.5, 0.4, 16.0, 0.0, 0.3]}
    params = {"mu_l": 413.234, "cv_l": 0.608, "delta_b": 0.226, "cv_b": 0.353, "mu_xi": 0.23,
              "lambda0": 12.0, "d_lambda": -0.5, "d_theta": 0.2, "T": 2}
    out = tmp_path / "out"
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "params": params, "initial": [6, 2], "box": box, "output_dir": str(out),
        "simulate": {"R": 40, "price_paths": True},
        "estimation": {"S": 4, "R": 20, "B": 2, "T": 2, "min_tickets": 3, "fit": {"n_starts": 2, "maxfev": 150}},
        "counterfactual": {"R": 200, "M": 10},
    }))
    tickets = str(out / "tickets.csv")
    commands = (["solve"], ["simulate"], ["moments", "--tickets", tickets], ["estimate", "--tickets", tickets],
                ["counterfactual"], ["report"])
    snaps, codes = [], []
    for _ in range(2):
        for c in commands:
            codes.append(cli_main([c[0], str(cfg), "--force"] + c[1:]))
        snaps.append({p.name: p.read_bytes() for p in sorted(out.iterdir())
                      if p.is_file() and not p.name.endswith(".meta.json")})
    same = [n for n in snaps[0] if snaps[1].get(n) == snaps[0][n]]
    ok = all(c == 0 for c in codes) and snaps[0].keys() == snaps[1].keys() and len(same) == len(snaps[0])
    verdict(7, ok, f"{len(commands)} commands rerun with --force: {len(same)}/{len(snaps[0])} numeric outputs "
                   f"byte-identical (sidecars carry runtimes and are excluded)")
    assert ok

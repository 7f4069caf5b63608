"""Command-line front end.

Every command reads one JSON config, writes a resolved snapshot of it next to
its outputs and a ``.meta.json`` sidecar beside each CSV. Exit codes: 0 ok,
2 config error, 3 solver error, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__, _container
from . import estimation as est
from . import mechanisms as mech
from . import solver as slv
from .demand import TABLE_LABELS, FlightParams
from .market import CabinState
from .numerics import DomainError, NumericalError

log = logging.getLogger("twocabin")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DATA = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


SECTIONS = {
    "params": None,
    "box": {"lo", "hi"},
    "initial": None,
    "solver": {f.name for f in fields(slv.SolverConfig)},
    "simulate": {"R", "seed", "market_id", "price_paths"},
    "estimation": {"tickets", "S", "R", "B", "seed", "fit", "capacity_weights", "min_tickets", "T"},
    "counterfactual": {"R", "M", "seed", "estimates", "draws"},
    "output_dir": None,
}
PARAM_FIELDS = {f.name for f in fields(FlightParams)}
FIT_FIELDS = {f.name for f in fields(est.FitConfig)}

DEFAULTS = {
    "box": est.DEFAULT_BOX.to_dict(),
    "initial": [20, 4],
    "solver": {},
    "simulate": {"R": 400, "seed": 0, "market_id": 0, "price_paths": False},
    "estimation": {"tickets": None, "S": 200, "R": 500, "B": 0, "seed": 0, "fit": {}, "capacity_weights": None,
                   "min_tickets": est.MIN_TICKETS, "T": 8},
    "counterfactual": {"R": 1000, "M": 200, "seed": 0, "estimates": None, "draws": 20},
    "output_dir": "twocabin_out",
}


def _reject_unknown(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def resolve_config(raw: dict, overrides: dict | None = None) -> dict:
    """Validate ``raw``, fill defaults and apply environment and flag overrides."""
    _reject_unknown(raw, SECTIONS, "config")
    cfg = json.loads(json.dumps(DEFAULTS))
    for k, v in raw.items():
        if isinstance(cfg.get(k), dict) and k not in ("box",):
            _reject_unknown(v, SECTIONS[k], k)
            cfg[k].update(v)
        else:
            cfg[k] = v
    env_out = os.environ.get("TWOCABIN_OUTPUT_DIR")
    if env_out:
        cfg["output_dir"] = env_out
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        sec, _, name = key.partition(".")
        if name:
            cfg[sec][name] = val
        else:
            cfg[sec] = val
    try:
        box = est.Box.of(cfg["box"]["lo"], cfg["box"]["hi"])
    except (KeyError, TypeError, DomainError) as exc:
        raise ConfigError(f"box: {exc}") from None
    if "params" in cfg:
        p = cfg["params"]
        _reject_unknown(p, PARAM_FIELDS, "params")
        try:
            params = FlightParams(**p)
        except (TypeError, DomainError) as exc:
            raise ConfigError(f"params: {exc}") from None
        try:
            box.check(params.to_vector())
        except DomainError as exc:
            raise ConfigError(f"params: {exc}") from None
        cfg["params"] = params.to_dict()
    init = cfg["initial"]
    if not (isinstance(init, list) and len(init) == 2 and all(isinstance(i, int) and i >= 0 for i in init)):
        raise ConfigError("initial must be two non-negative integers")
    try:
        cfg["solver"] = slv.SolverConfig.from_dict(cfg["solver"]).to_dict()
    except (TypeError, DomainError) as exc:
        raise ConfigError(f"solver: {exc}") from None
    _reject_unknown(cfg["estimation"]["fit"], FIT_FIELDS, "estimation.fit")
    try:
        est.FitConfig(**cfg["estimation"]["fit"])
    except DomainError as exc:
        raise ConfigError(f"estimation.fit: {exc}") from None
    for sec, keys in (("simulate", ("R",)), ("estimation", ("S", "R", "B", "min_tickets")),
                      ("counterfactual", ("R", "M", "draws"))):
        for k in keys:
            v = cfg[sec][k]
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"{sec}.{k} must be a non-negative integer")
    if not isinstance(cfg["estimation"]["T"], int) or cfg["estimation"]["T"] < 1:
        raise ConfigError("estimation.T must be a positive integer")
    return cfg


def config_hash(cfg: dict) -> str:
    return _container.digest(cfg)


class _Run:
    """Output bookkeeping for one command."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)
        self.t0 = time.perf_counter()
        snap = self.out / f"resolved_config.{command}.json"
        snap.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")

    def sidecar(self, path: Path, extra: dict | None = None):
        meta = {"command": self.command, "config_hash": self.hash, "version": __version__,
                "runtime_seconds": round(time.perf_counter() - self.t0, 3), "file": path.name}
        meta.update(extra or {})
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    def write_csv(self, name: str, header, rows, extra: dict | None = None) -> Path:
        path = self.out / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(x) for x in r])
        self.sidecar(path, extra)
        return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def _params(cfg) -> FlightParams:
    if "params" not in cfg:
        raise ConfigError("params are required for this command")
    return FlightParams(**cfg["params"])


def _solver_cfg(cfg) -> slv.SolverConfig:
    return slv.SolverConfig.from_dict(cfg["solver"])


def _model(run: _Run, force: bool, pricing: str | None = None, seed_model=None, name: str = "model.bin"):
    """Solve or reuse the cached model whose cache key matches."""
    cfg = run.cfg
    params, initial = _params(cfg), CabinState(*cfg["initial"])
    scfg = _solver_cfg(cfg)
    if pricing is not None:
        scfg = replace(scfg, pricing=pricing)
    key = _container.digest({"params": params.to_dict(), "initial": list(initial), "cfg": scfg.to_dict(),
                             "seeded": seed_model.content_hash if seed_model is not None else None})
    path = run.out / name
    if path.exists() and not force:
        try:
            m = slv.load(path)
            if m.meta.get("cache_key") == key:
                log.info("reusing cached %s", path)
                return m, True
        except _container.ContainerError:
            pass
    m = slv.solve(params, initial, scfg, seed_model=seed_model)
    m.meta = {"cache_key": key}
    slv.save(m, path)
    return m, False


# --- commands ----------------------------------------------------------------------


def cmd_solve(cfg: dict, force: bool = False) -> int:
    run = _Run(cfg, "solve")
    model, cached = _model(run, force)
    run.sidecar(run.out / "model.bin", {"content_hash": model.content_hash, "cached": cached})
    rep = slv.shadow_costs(model)
    T = model.T
    cost_rows, visit_rows = [], []
    for i in range(T):
        for ke in range(model.initial.k_e + 1):
            for kf in range(model.initial.k_f + 1):
                p = rep.visitation[i, ke, kf]
                if p > 0:
                    visit_rows.append((i + 1, ke, kf, p))
                    cost_rows.append((i + 1, ke, kf, p, rep.opportunity_e[i, ke, kf], rep.opportunity_f[i, ke, kf],
                                      rep.marginal_e[i, ke, kf], rep.marginal_f[i, ke, kf],
                                      rep.dcont_dpe[i, ke, kf], rep.dcont_dpf[i, ke, kf]))
    run.write_csv("shadow_costs.csv", ("t", "k_e", "k_f", "prob", "opportunity_e", "opportunity_f", "marginal_e",
                                       "marginal_f", "dcont_dpe", "dcont_dpf"), cost_rows,
                  {"note": "opportunity_* = seat-difference of next-period value; dcont_* = derivative of "
                           "expected continuation value with respect to the cabin price"})
    run.write_csv("visitation.csv", ("t", "k_e", "k_f", "prob"), visit_rows)
    pol_rows = []
    for i in range(T):
        for ke in range(model.initial.k_e + 1):
            for kf in range(model.initial.k_f + 1):
                e = model.policy(i + 1, (ke, kf))
                pe_l, pf_l, pe_b, pf_b = e.prices()
                pol_rows.append((i + 1, ke, kf, model.value[i, ke, kf], pe_l, pf_l, pe_b, pf_b, e.q_e, e.q_f,
                                 e.total_cap()))
    run.write_csv("policy.csv", ("t", "k_e", "k_f", "value", "p_e", "p_f", "p_e_business", "p_f_business",
                                 "q_e", "q_f", "q_total"), pol_rows)
    print(f"V_1{tuple(model.initial)} = {model.V(1, model.initial):.6f}")
    return EXIT_OK


def cmd_simulate(cfg: dict, force: bool = False) -> int:
    run = _Run(cfg, "simulate")
    sim = cfg["simulate"]
    model, _ = _model(run, force)
    tt = est.simulate_tickets(model, sim["seed"], sim["R"], market_id=sim["market_id"])
    path = run.out / "tickets.csv"
    est.write_tickets(tt, path)
    run.sidecar(path, {"n_tickets": len(tt), "R": sim["R"]})
    if sim["price_paths"]:
        run.write_csv("price_paths.csv", ("flight_id", "period", "cabin", "relative_fare"), _price_paths(tt))
    print(f"wrote {len(tt)} tickets for {sim['R']} flights")
    return EXIT_OK


def _price_paths(tt: est.TicketTable):
    """Mean fare per flight, period and cabin relative to the flight's first observed fare in that cabin."""
    rows = []
    for fid in np.unique(tt.flight_id):
        sub = tt.take(tt.flight_id == fid)
        for c, lab in ((0, "E"), (1, "F")):
            m = sub.cabin == c
            if not m.any():
                continue
            per, fares = sub.period[m], sub.fare[m]
            base = fares[per == per.min()].mean()
            for t in np.unique(per):
                rows.append((int(fid), int(t), lab, fares[per == t].mean() / base))
    return rows


def _tickets(cfg) -> est.TicketTable:
    path = cfg["estimation"]["tickets"]
    if not path:
        raise ConfigError("estimation.tickets (or --tickets) is required")
    if not Path(path).exists():
        raise est.DataError(f"{path}: no such file")
    return est.read_tickets(path)


def cmd_moments(cfg: dict, force: bool = False) -> int:
    run = _Run(cfg, "moments")
    tt = _tickets(cfg)
    rows = []
    for cap in tt.capacities():
        mv = est.empirical_moments(tt, cap, cfg["estimation"]["T"], cfg["estimation"]["min_tickets"])
        rows += [(cap.k_e, cap.k_f, r["moment"], r["value"], r["count"]) for r in mv.to_rows()]
    if not rows:
        raise est.DataError("no tickets")
    run.write_csv("moments.csv", ("cap_econ", "cap_first", "moment", "value", "count"), rows)
    return EXIT_OK


def cmd_estimate(cfg: dict, force: bool = False) -> int:
    run = _Run(cfg, "estimate")
    e = cfg["estimation"]
    T = e["T"]
    tt = _tickets(cfg)
    box = est.Box.of(cfg["box"]["lo"], cfg["box"]["hi"])
    fcfg = est.FitConfig(**e["fit"])
    scfg = _solver_cfg(cfg)
    caps = tt.capacities()
    weights = e["capacity_weights"]
    if weights is None:
        counts = {c: len(np.unique(tt.group(c).flight_id)) for c in caps}
        tot = sum(counts.values())
        weights = {c: counts[c] / tot for c in caps}
    else:
        weights = {CabinState(*map(int, k.split(","))): float(v) for k, v in weights.items()}
    estimates, doc = {}, {"capacities": []}
    for cap in caps:
        rho = est.empirical_moments(tt, cap, T, e["min_tickets"])
        lib_path = run.out / f"library_{cap.k_e}_{cap.k_f}.bin"
        lib = None
        want = {"seed": e["seed"], "S": e["S"], "R": e["R"], "cfg_hash": _container.digest(scfg.to_dict()),
                "box_hash": _container.digest(box.to_dict()), "fixed": {"T": T}, "min_tickets": e["min_tickets"]}
        if lib_path.exists() and not force:
            lib = est.MomentLibrary.load(lib_path)
            if any(lib.meta.get(k) != v for k, v in want.items()):
                lib = None
            else:
                log.info("reusing cached %s", lib_path)
        if lib is None:
            lib = est.build_library(box, e["S"], cap, scfg, e["seed"], e["R"], path=lib_path,
                                    workers=int(os.environ.get("TWOCABIN_WORKERS", "1")), fixed={"T": T},
                                    min_tickets=e["min_tickets"])
        res = est.fit(lib, rho, fcfg)
        estimates[cap] = res.density
        entry = {"capacity": list(cap), "density": res.density.to_dict(), "objective": res.objective,
                 "ess": res.ess, "identified": res.identified, "local_optima": res.local_optima,
                 "n_library": lib.S, "n_failed": lib.meta.get("n_failed", 0), "moment_dim": rho.dim}
        if e["B"] >= 2:
            bs = est.bootstrap(tt, lib, e["B"], fcfg, seed=e["seed"], T=T, min_tickets=e["min_tickets"])
            entry["bootstrap_se"] = bs["se"].tolist()
        doc["capacities"].append(entry)
    pooled = est.pool_capacities({c: estimates[c] for c in weights}, weights, seed=e["seed"])
    doc["pooled_mean"] = dict(zip(TABLE_LABELS, pooled.means.tolist()))
    doc["weights"] = {f"{c.k_e},{c.k_f}": w for c, w in weights.items()}
    path = run.out / "estimates.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    rows = []
    for i, lab in enumerate(TABLE_LABELS):
        row = [lab, pooled.means[i]]
        if e["B"] >= 2 and len(doc["capacities"]) == 1:
            row.append(doc["capacities"][0]["bootstrap_se"][i])
        rows.append(row)
    header = ["parameter", "mean"] + (["se"] if e["B"] >= 2 and len(doc["capacities"]) == 1 else [])
    run.write_csv("table5.csv", header, rows)
    run.write_csv("density_curves.csv", ("parameter", "x", "density"),
                  [(lab, x, d) for lab, (g, dens) in pooled.curves.items() for x, d in zip(g, dens)])
    return EXIT_OK


def cmd_counterfactual(cfg: dict, force: bool = False) -> int:
    run = _Run(cfg, "counterfactual")
    c = cfg["counterfactual"]
    scfg = _solver_cfg(cfg)
    if c["estimates"]:
        comps = _density_draws(cfg)
    else:
        comps = [(_params(cfg), CabinState(*cfg["initial"]))]
    results = []
    for params, cap in comps:
        models = None
        if len(comps) == 1:
            uni, _ = _model(run, force, "uniform", name="model_uniform.bin")
            base, _ = _model(run, force, "discriminate", seed_model=uni, name="model_baseline.bin")
            third, _ = _model(run, force, "third_degree", seed_model=base, name="model_third_degree.bin")
            models = {"uniform": uni, "baseline": base, "third_degree": third}
        results.append(mech.compare(params, cap, scfg, c["seed"], c["R"], c["M"], models=models))
    rows = _average_rows([r.rows() for r in results])
    run.write_csv("counterfactual.csv", mech.COLUMNS, [[r[k] for k in mech.COLUMNS] for r in rows])
    names = list(results[0].points)
    points = {k: list(np.mean([r.points[k] for r in results], axis=0)) for k in names}
    doc = {"columns": list(mech.COLUMNS), "rows": rows, "points": points, "n_parameter_draws": len(results),
           "axes": ["consumer_surplus", "producer_surplus"]}
    path = run.out / "counterfactual.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=float) + "\n")
    run.sidecar(path)
    return EXIT_OK


def _average_rows(tables):
    out = []
    for i, row in enumerate(tables[0]):
        avg = {"mechanism": row["mechanism"]}
        for k in mech.COLUMNS[1:]:
            vals = [t[i][k] for t in tables]
            avg[k] = float(np.mean(vals)) if k != "ts_se" else float(np.sqrt(np.sum(np.square(vals))) / len(vals))
        out.append(avg)
    ts_ref = next(r["ts"] for r in out if r["mechanism"] == "first_best_extract")
    for r in out:
        r["efficiency_ratio"] = r["ts"] / ts_ref if ts_ref > 0 else 0.0
    return out


def _density_draws(cfg):
    """Parameter draws from a fitted pooled density: capacity by weight, then the truncated normal."""
    c = cfg["counterfactual"]
    doc = json.loads(Path(c["estimates"]).read_text())
    caps = [CabinState(*e["capacity"]) for e in doc["capacities"]]
    dens = [est.MixingDensity.from_dict(e["density"]) for e in doc["capacities"]]
    w = np.array([doc["weights"][f"{k.k_e},{k.k_f}"] for k in caps])
    gen = np.random.Generator(np.random.PCG64(c["seed"]))
    pick = gen.choice(len(caps), size=c["draws"], p=w / w.sum())
    out = []
    for j, i in enumerate(pick):
        x = dens[i].sample(1, seed=int(c["seed"]) * 100003 + j)[0]
        out.append((FlightParams.from_vector(x), caps[i]))
    return out


def cmd_report(cfg: dict, force: bool = False) -> int:
    """Index every output in the directory with its sidecar metadata."""
    out = Path(cfg["output_dir"])
    if not out.exists():
        raise est.DataError(f"{out}: no outputs to report")
    entries = []
    for p in sorted(out.iterdir()):
        if p.name.endswith(".meta.json") or p.name.startswith("report."):
            continue
        side = Path(str(p) + ".meta.json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        entries.append({"file": p.name, "bytes": p.stat().st_size, "sha256": _container.digest(p.read_bytes()),
                        "command": meta.get("command"), "config_hash": meta.get("config_hash")})
    summary = {"version": __version__, "files": entries}
    cf = out / "counterfactual.json"
    if cf.exists():
        summary["welfare_points"] = json.loads(cf.read_text())["points"]
    ej = out / "estimates.json"
    if ej.exists():
        summary["pooled_mean"] = json.loads(ej.read_text())["pooled_mean"]
    (out / "report.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for e in entries:
        print(f"{e['file']:40s} {e['bytes']:>10d}  {e['command'] or '-'}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "moments": cmd_moments, "estimate": cmd_estimate,
            "counterfactual": cmd_counterfactual, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twocabin", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int, help="seed of the command's own section")
        p.add_argument("-R", "--replications", type=int)
        p.add_argument("--tickets", help="ticket CSV (moments, estimate)")
        p.add_argument("--workers", type=int)
        p.add_argument("--force", action="store_true", help="ignore cached solves and libraries")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


_SEED_SECTION = {"simulate": "simulate", "estimate": "estimation", "moments": "estimation",
                 "counterfactual": "counterfactual"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None:
        os.environ["TWOCABIN_WORKERS"] = str(args.workers)
    try:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        sec = _SEED_SECTION.get(args.command)
        overrides = {"output_dir": args.output_dir}
        if sec:
            overrides[f"{sec}.seed"] = args.seed
            if sec != "estimation":
                overrides[f"{sec}.R"] = args.replications
        if args.tickets:
            overrides["estimation.tickets"] = args.tickets
        cfg = resolve_config(raw, overrides)
        return COMMANDS[args.command](cfg, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except est.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (slv.SolverError, NumericalError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

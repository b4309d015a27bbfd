"""Command-line front end: scenario files, sweeps, presets and CSV output.

    gapcap run scenario.json [--out results.csv]
    gapcap preset example5 --naive
    gapcap preset validate --quick
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import jsonschema
import numpy as np

from . import mmpp as mm
from . import poisson_core as pc
from .distributions import DistributionError
from .distributions import from_dict as law_from_dict
from .impatience import is_trivial, policy_from_dict, service_impatient
from .simulator import SimConfig, simulate_capacity, simulate_queue

VEH_H = 3600.0
BEHAVIORS = ["B1", "B2", "B3"]

DEFAULTS = {
    "name": "",
    "behaviors": BEHAVIORS,
    "impatience": {"kind": "none"},
    "naive_variants": [1, 2],
    "mmpp_options": {"k0": 64, "k_max": 4096, "tol": 1e-4, "extrapolate": True},
    "series_tol": 1e-10,
    "simulation": {"replications": 10, "horizon": 100_000, "seed": 0},
    "units": "veh_h",
}


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


# ---------------------------------------------------------------------------
# loading and validation


def schema() -> dict:
    return json.loads(resources.files("gapcap").joinpath("scenario.schema.json").read_text(encoding="utf-8"))


def _path(err) -> str:
    return "/".join(str(p) for p in err.absolute_path)


def load(doc) -> list[dict]:
    """Validate a parsed scenario document and return resolved scenarios."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: e.path)
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ScenarioError(_path(err), err.message)
    raw = doc["scenarios"] if "scenarios" in doc else [doc]
    out = []
    for i, s in enumerate(raw):
        prefix = f"scenarios/{i}/" if "scenarios" in doc else ""
        out.append(resolve(s, prefix))
    return out


def resolve(s: dict, prefix: str = "") -> dict:
    """Fill defaults and check what the schema cannot express."""
    r = copy.deepcopy(DEFAULTS)
    for key, val in copy.deepcopy(s).items():
        if isinstance(val, dict) and isinstance(r.get(key), dict) and key not in ("impatience",):
            r[key].update(val)
        else:
            r[key] = val
    kind = r["analysis"]
    arr = r["arrivals"]
    is_mmpp = "mmpp" in arr
    has_lam = "lambda_veh_h" in r or "lambda_per_s" in r
    sweep = r.get("sweep")

    if "lambda_veh_h" in r and "lambda_per_s" in r:
        raise ScenarioError(prefix + "lambda_per_s", "give the minor-road rate once")
    if kind in ("capacity", "queue") and is_mmpp:
        raise ScenarioError(prefix + "arrivals", f"analysis '{kind}' needs Poisson arrivals (q_veh_h or q_per_s)")
    if kind in ("mmpp-capacity", "naive") and not is_mmpp:
        raise ScenarioError(prefix + "arrivals", f"analysis '{kind}' requires an mmpp arrival spec")
    if kind == "queue" and not has_lam and not (sweep and sweep["parameter"] == "lambda_veh_h"):
        raise ScenarioError(prefix + "lambda_veh_h", "queue analysis needs a minor-road rate")
    if kind == "mmpp-capacity" and not is_trivial(policy_from_dict(r["impatience"])):
        raise ScenarioError(prefix + "impatience", "impatience is not supported together with MMPP major traffic")
    if sweep:
        sweep.setdefault("scale", "linear")
        p = sweep["parameter"]
        if sweep["stop"] < sweep["start"]:
            raise ScenarioError(prefix + "sweep/stop", "stop must not be below start")
        if p == "q_veh_h" and is_mmpp:
            raise ScenarioError(prefix + "sweep/parameter", "q_veh_h sweeps need Poisson arrivals; use qbar_veh_h")
        if p == "mean_platoon_s" and not is_mmpp:
            raise ScenarioError(prefix + "sweep/parameter", "mean_platoon_s sweeps need an mmpp arrival spec")
        if p == "lambda_veh_h" and kind not in ("queue", "simulate"):
            raise ScenarioError(prefix + "sweep/parameter", "lambda_veh_h sweeps apply to queue or simulate")
    try:
        law_from_dict(r["headway"])
    except (DistributionError, ValueError) as exc:
        raise ScenarioError(prefix + "headway", str(exc)) from None
    try:
        policy_from_dict(r["impatience"])
    except (ValueError, TypeError) as exc:
        raise ScenarioError(prefix + "impatience", str(exc)) from None
    if is_mmpp:
        try:
            mm.from_dict(arr["mmpp"])
        except mm.MmppError as exc:
            raise ScenarioError(prefix + "arrivals/mmpp", str(exc)) from None
    return r


def sweep_values(s: dict) -> list[float | None]:
    sw = s.get("sweep")
    if not sw:
        return [None]
    n = sw["points"]
    if n == 1:
        return [float(sw["start"])]
    grid = np.geomspace if sw["scale"] == "log" else np.linspace
    return [float(x) for x in grid(sw["start"], sw["stop"], n)]


# ---------------------------------------------------------------------------
# evaluation


def _poisson_rate(s: dict, param, value) -> float:
    if param in ("q_veh_h", "qbar_veh_h"):
        return value / VEH_H
    arr = s["arrivals"]
    return arr["q_veh_h"] / VEH_H if "q_veh_h" in arr else float(arr["q_per_s"])


def _mmpp_at(s: dict, param, value) -> mm.MmppSpec:
    m = mm.from_dict(s["arrivals"]["mmpp"])
    if param == "qbar_veh_h":
        m = mm.MmppSpec(m.M, m.q * (value / VEH_H) / mm.average_rate(m))
    elif param == "mean_platoon_s":
        # the last state is the platoon; its mean sojourn becomes ``value``
        m = mm.MmppSpec(m.M * ((1.0 / value) / m.mu[-1]), m.q)
    return m


def _lam(s: dict, param, value) -> float | None:
    if param == "lambda_veh_h":
        return value / VEH_H
    if "lambda_veh_h" in s:
        return s["lambda_veh_h"] / VEH_H
    return s.get("lambda_per_s")


def _rate_out(x: float, s: dict) -> float:
    return x * VEH_H if s["units"] == "veh_h" else x


def _cap_name(s: dict) -> str:
    return "capacity_veh_h" if s["units"] == "veh_h" else "capacity_per_s"


def evaluate(s: dict, value) -> list[dict]:
    """All rows of one scenario at one sweep point."""
    param = s["sweep"]["parameter"] if s.get("sweep") else None
    law = law_from_dict(s["headway"])
    policy = policy_from_dict(s["impatience"])
    kind = s["analysis"]
    rows = []

    def row(b, quantity, v, **diag):
        rows.append({"sweep_value": value, "behavior": b, "quantity": quantity, "value": v, "diag": diag})

    for b in s["behaviors"]:
        if kind == "capacity":
            q = _poisson_rate(s, param, value)
            if is_trivial(policy):
                svc = pc.service(b, law, q)
                flag = "ok" if svc.mean < math.inf else "zero_capacity"
                row(b, _cap_name(s), _rate_out(svc.capacity, s), flag=flag, mean_service_s=svc.mean)
            else:
                svc = service_impatient(b, law, policy, q, s["series_tol"])
                flag = "ok" if svc.converged and svc.mean < math.inf else "zero_capacity"
                row(b, _cap_name(s), _rate_out(svc.capacity, s), flag=flag, mean_service_s=svc.mean, terms=svc.terms)
        elif kind == "queue":
            q = _poisson_rate(s, param, value)
            lam = _lam(s, param, value)
            _queue_rows(row, b, law, policy, q, lam, s)
        elif kind == "mmpp-capacity":
            m = _mmpp_at(s, param, value)
            o = s["mmpp_options"]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", mm.CapacityWarning)
                res = mm.capacity_mmpp(b, m, law, o["k0"], o["tol"], o["k_max"], o["extrapolate"])
            row(
                b,
                _cap_name(s),
                _rate_out(res.value, s),
                flag=res.flag,
                phases=res.phases[0],
                gap=res.gap,
                residual=res.residual,
                qbar_veh_h=mm.average_rate(m) * VEH_H,
            )
        elif kind == "naive":
            m = _mmpp_at(s, param, value)
            means = mm.state_service_means(b, m, law)
            flag = "ok" if np.all(np.isfinite(means)) else "infinite_state_service"
            for variant in sorted(s["naive_variants"]):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", mm.CapacityWarning)
                    v = mm.naive_capacity(m, means, variant)
                row(b, f"naive{variant}_{_cap_name(s)}", _rate_out(v, s), flag=flag)
        elif kind == "simulate":
            _simulate_rows(row, b, law, policy, s, param, value)
    return rows


def _queue_rows(row, b, law, policy, q, lam, s):
    if is_trivial(policy):
        svc = pc.service(b, law, q)
        mean, second = svc.mean, svc.second_moment
    else:
        isvc = service_impatient(b, law, policy, q, s["series_tol"])
        mean = isvc.mean
        second = isvc.second_moment if mean < math.inf else math.inf
    rho = lam * mean
    if not rho < 1:
        for name in ("rho", "mean_queue_length_veh", "mean_delay_s"):
            row(b, name, rho if name == "rho" else math.inf, flag="unstable")
        return
    if second == math.inf:
        flag, L = "infinite_second_moment", math.inf
    else:
        flag, L = "ok", pc.pk_mean_queue_length(rho, lam, second)
    row(b, "rho", rho, flag=flag)
    row(b, "mean_queue_length_veh", L, flag=flag)
    row(b, "mean_delay_s", L / lam, flag=flag)


def _simulate_rows(row, b, law, policy, s, param, value):
    arr = s["arrivals"]
    arrivals = _mmpp_at(s, param, value) if "mmpp" in arr else _poisson_rate(s, param, value)
    sim = s["simulation"]
    cfg = SimConfig(
        arrivals,
        b,
        law,
        policy,
        lam=_lam(s, param, value),
        horizon=sim["horizon"],
        horizon_s=sim.get("horizon_s"),
        replications=sim["replications"],
        seed=sim["seed"],
    )
    if cfg.saturated:
        est = simulate_capacity(cfg)
        f = VEH_H if s["units"] == "veh_h" else 1.0
        row(
            b,
            "sim_" + _cap_name(s),
            est.value * f,
            flag="diverged" if est.diverged else "ok",
            ci_lo=est.ci[0] * f,
            ci_hi=est.ci[1] * f,
            stderr=est.stderr * f,
            events=est.events,
        )
        return
    qe = simulate_queue(cfg)
    flag = "unstable" if qe.unstable else "ok"
    for name, est in (("sim_mean_queue_length_veh", qe.mean_queue_length), ("sim_mean_delay_s", qe.mean_delay)):
        row(b, name, est.value, flag=flag, ci_lo=est.ci[0], ci_hi=est.ci[1], stderr=est.stderr, events=est.events)


def _task(args):
    s, v = args
    rows = evaluate(s, v)
    for r in rows:
        r["diag"]["scenario"] = s["name"]
    return rows


def run_scenarios(scenarios: list[dict], workers: int = 1) -> list[dict]:
    tasks = [(s, v) for s in scenarios for v in sweep_values(s)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_task, tasks))
    else:
        chunks = [_task(t) for t in tasks]
    rows = [r for c in chunks for r in c]
    # stable: scenario order and quantity order survive within ties
    rows.sort(key=lambda r: (-math.inf if r["sweep_value"] is None else r["sweep_value"], r["behavior"]))
    return rows


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def to_csv(rows: list[dict]) -> str:
    keys = sorted({k for r in rows for k in r["diag"]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep_value", "behavior", "quantity", "value"] + [f"diag_{k}" for k in keys])
    for r in rows:
        w.writerow(
            [_fmt(r["sweep_value"]), r["behavior"], r["quantity"], _fmt(r["value"])]
            + [_fmt(r["diag"].get(k)) for k in keys]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# presets


def _law(atoms):
    return {"kind": "discrete", "atoms": [list(a) for a in atoms]}


HIGH_LOW = _law([(56 / 9, 0.9), (14.0, 0.1)])


def _two_state(q1_veh_h, q2_veh_h, mu1, mu2):
    return {"mmpp": {"rates_veh_h": [q1_veh_h, q2_veh_h], "transitions_per_s": [[0.0, mu1], [mu2, 0.0]]}}


def preset_scenarios(name: str, quick: bool = False, naive: bool = False) -> list[dict]:
    pts = (lambda n: max(3, n // 4)) if quick else (lambda n: n)
    q_sweep = lambda lo, hi, n: {"parameter": "q_veh_h", "start": lo, "stop": hi, "points": pts(n), "scale": "log"}
    if name == "example1":
        law = _law([(4.0, 0.9), (34.0, 0.1)])
        return [
            {"name": "example1-capacity", "analysis": "capacity", "headway": law, "arrivals": {"q_veh_h": 60.0},
             "sweep": q_sweep(10.0, 3000.0, 60)},
            {"name": "example1-queue", "analysis": "queue", "headway": law, "arrivals": {"q_veh_h": 60.0},
             "sweep": {"parameter": "lambda_veh_h", "start": 10.0, "stop": 480.0, "points": pts(48), "scale": "linear"}},
        ]
    if name == "example2":
        laws = {
            "high-low-14-6.22": HIGH_LOW,
            "high-low-42-3.11": _law([(3.11, 0.9), (42.0, 0.1)]),
            "high-low-0.57-7.71": _law([(7.71, 0.9), (0.57, 0.1)]),
            "exponential": {"kind": "exponential", "alpha_per_s": 1 / 7},
            "gamma": {"kind": "gamma", "shape": 0.5, "rate_per_s": 1 / 14},
        }
        return [
            {"name": f"example2-{k}", "analysis": "capacity", "headway": v, "arrivals": {"q_veh_h": 100.0},
             "sweep": q_sweep(1.0, 10000.0, 80)}
            for k, v in laws.items()
        ]
    if name == "example3":
        out = []
        for tag, pol in (("a", {"kind": "geometric", "alpha": 0.9, "delta_s": 4.0}),
                         ("b", {"kind": "geometric", "alpha": 0.6, "delta_s": 1.0})):
            out.append({"name": f"example3{tag}-fixed-7", "analysis": "capacity", "behaviors": ["B1"],
                        "headway": {"kind": "deterministic", "T_s": 7.0}, "impatience": pol,
                        "arrivals": {"q_veh_h": 100.0}, "sweep": q_sweep(10.0, 10000.0, 60)})
            out.append({"name": f"example3{tag}-high-low", "analysis": "capacity", "behaviors": ["B2", "B3"],
                        "headway": HIGH_LOW, "impatience": pol,
                        "arrivals": {"q_veh_h": 100.0}, "sweep": q_sweep(10.0, 10000.0, 60)})
        return out
    if name == "example4":
        out = []
        for p1 in (0.9, 0.1):
            law = _law([(3.0, p1), (60.0, round(1 - p1, 12))])
            sweep = {"parameter": "qbar_veh_h", "start": 50.0, "stop": 1500.0, "points": pts(30), "scale": "linear"}
            out.append({"name": f"example4-p{p1}-platooned", "analysis": "mmpp-capacity", "headway": law,
                        "arrivals": _two_state(300.0, 100.0, 1 / 60, 1 / 240), "sweep": sweep})
            out.append({"name": f"example4-p{p1}-poisson", "analysis": "capacity", "headway": law,
                        "arrivals": {"q_veh_h": 100.0}, "sweep": dict(sweep, parameter="q_veh_h")})
        return out
    if name == "example5":
        arrivals = _two_state(600.0, 2400.0, 1 / 50, 1 / 10)
        if naive:
            return [{"name": "example5-naive", "analysis": "naive", "headway": HIGH_LOW, "arrivals": arrivals}]
        sweep = {"parameter": "mean_platoon_s", "start": 0.5, "stop": 10.0, "points": pts(20), "scale": "linear"}
        return [
            {"name": "example5a", "analysis": "mmpp-capacity", "headway": HIGH_LOW, "arrivals": arrivals, "sweep": sweep},
            {"name": "example5b", "analysis": "mmpp-capacity", "headway": _law([(3.0, 0.9), (60.0, 0.1)]),
             "arrivals": arrivals, "sweep": sweep},
        ]
    raise ScenarioError("preset", f"unknown preset {name!r}")


def preset_checks(name: str, naive: bool = False):
    from . import validation as v

    return {
        "example1": [v.check_paradox],
        "example2": [v.check_exponential_constancy, v.check_stationary_points, v.check_gamma_monotone],
        "example3": [v.check_impatience_reduction],
        "example4": [],
        "example5": [v.check_naive_anchors] if naive else [v.check_mmpp_limit],
    }[name]


def _ordering_report(rows) -> list[str]:
    """Ordering B2 >= B1 >= B3 under platooning: observed, not guaranteed."""
    lines = []
    by = {}
    for r in rows:
        if r["diag"]["scenario"].endswith("platooned"):
            by.setdefault((r["diag"]["scenario"], r["sweep_value"]), {})[r["behavior"]] = r["value"]
    held = sum(1 for c in by.values() if c["B2"] >= c["B1"] >= c["B3"])
    lines.append(f"[INFO] platooned ordering B2 >= B1 >= B3 observed at {held}/{len(by)} points")
    return lines


# ---------------------------------------------------------------------------
# entry point


def _apply_overrides(scenarios: list[dict], args) -> list[dict]:
    for s in scenarios:
        if args.seed is not None:
            s["simulation"]["seed"] = args.seed
        if args.replications is not None:
            s["simulation"]["replications"] = args.replications
        if args.tol is not None:
            s["mmpp_options"]["tol"] = args.tol
    return scenarios


def _emit(text: str, out):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gapcap", description="Minor-road capacity at priority intersections.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="write output here instead of standard output")
    common.add_argument("--seed", type=int, help="master seed for simulations")
    common.add_argument("--replications", type=int, help="simulation replications")
    common.add_argument("--tol", type=float, help="relative tolerance for MMPP phase refinement")
    common.add_argument("--quick", action="store_true", help="coarser sweeps and shorter simulations")
    common.add_argument("--dump-config", action="store_true", help="print the resolved scenarios as JSON and exit")
    common.add_argument("--workers", type=int, default=1, help="processes for sweep points")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run a scenario file")
    r.add_argument("file")
    pr = sub.add_parser("preset", parents=[common], help="run a built-in experiment")
    pr.add_argument("name", choices=["example1", "example2", "example3", "example4", "example5", "validate"])
    pr.add_argument("--naive", action="store_true", help="example5: the two state-averaging formulas")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        if args.command == "preset" and args.name == "validate":
            return _validate(args)
        if args.command == "run":
            try:
                with open(args.file, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError("", f"not valid JSON: {exc}") from None
            scenarios = load(doc)
        else:
            scenarios = load({"scenarios": preset_scenarios(args.name, args.quick, args.naive)})
        scenarios = _apply_overrides(scenarios, args)
        if args.quick and args.command == "run":
            for s in scenarios:
                s["simulation"]["horizon"] = max(1000, s["simulation"]["horizon"] // 10)
        if args.dump_config:
            _emit(json.dumps({"scenarios": scenarios}, indent=2) + "\n", args.out)
            return 0
        rows = run_scenarios(scenarios, args.workers)
        _emit(to_csv(rows), args.out)
        if args.command == "preset":
            return _report(args, rows)
        return 0
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _report(args, rows) -> int:
    failed = 0
    for fn in preset_checks(args.name, args.naive):
        c = fn()
        failed += not c.passed
        print(c.line(), file=sys.stderr)
    if args.name == "example4":
        for line in _ordering_report(rows):
            print(line, file=sys.stderr)
    return 1 if failed else 0


def _validate(args) -> int:
    from .validation import run_all

    checks = run_all(quick=args.quick)
    text = "\n".join(c.line() for c in checks)
    n_fail = sum(not c.passed for c in checks)
    text += f"\n{len(checks) - n_fail}/{len(checks)} checks passed\n"
    _emit(text, args.out)
    return 1 if n_fail else 0


if __name__ == "__main__":
    sys.exit(main())

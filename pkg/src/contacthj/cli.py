"""Command-line entry point.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``.
Exit status: 0 when all requested checks pass, 2 when a check fails, 1 on
usage or configuration errors.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .action import ActionQuery, NoCharacteristicFound, ShootingConfig, h_backward, h_forward
from .config import (ConfigError, evolution_config, initial_datum, load_config, merge, torus_spec,
                     verify_config)
from .expr import ExpressionError
from .flow import BlowUp, ContactState, StepControl, energy_residual, integrate
from .geometry import GridError, format_grid
from .hamiltonian import LegendreError, ModelError, SamplingPlan, build_model, check_assumptions, legendre
from .semigroup import EvolutionConfigError, PicardDivergence, evolve_backward, evolve_forward
from .verify import (battery_corollary_C, battery_theorem_A, battery_theorem_B, check_lemma_flow_inclusion,
                     subsolution_report)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
BATTERIES = ("subsolution", "theorem-a", "theorem-b", "corollary-c", "lemma-inclusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _plain(obj):
    """Recursively convert numpy values so YAML/JSON dumps stay plain."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contacthj", description="Contact Hamilton-Jacobi numerics on the flat torus.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config with blocks model/grid/evolution/battery/io/data")
    common.add_argument("--model", help="catalog name (E1, E2) or an expression in x1.., p1.., u")
    common.add_argument("--lambda", dest="lam", type=float, help="declared bound on |dH/du|")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--resolution", type=int)
    common.add_argument("--period", type=float)

    evo = _Parser(add_help=False)
    evo.add_argument("--dt", type=float)
    evo.add_argument("--v-max", type=float)
    evo.add_argument("--v-res", type=int)
    evo.add_argument("--picard-tol", type=float)
    evo.add_argument("--picard-max", type=int)
    evo.add_argument("--phi", help="initial datum as an expression in x1..xd")
    evo.add_argument("--phi-file", help="initial datum as a grid file")

    f = sub.add_parser("flow", parents=[common], help="integrate characteristics")
    f.add_argument("--x0")
    f.add_argument("--p0")
    f.add_argument("--u0", type=float)
    f.add_argument("--t", type=float, help="horizon")
    f.add_argument("--h", type=float, help="RK4 step")
    f.add_argument("--adaptive", action="store_true", default=None)
    f.add_argument("--backward", action="store_true", default=None)

    lg = sub.add_parser("legendre", parents=[common], help="tabulate L(x, v, u) over a velocity grid")
    lg.add_argument("--x0")
    lg.add_argument("--u", type=float)
    lg.add_argument("--v-min", type=float)
    lg.add_argument("--v-max", type=float)
    lg.add_argument("--n-v", type=int)

    a = sub.add_parser("action", parents=[common], help="implicit action function by shooting")
    a.add_argument("--x0", type=float)
    a.add_argument("--u0", type=float)
    a.add_argument("--x", type=float)
    a.add_argument("--t", type=float)
    a.add_argument("--direction", choices=("backward", "forward"))

    s = sub.add_parser("semigroup", parents=[common, evo], help="evolve a grid function")
    s.add_argument("--t", type=float)
    s.add_argument("--direction", choices=("backward", "forward"))
    s.add_argument("--snapshot-every", type=int)

    v = sub.add_parser("verify", parents=[common, evo], help="run a verification battery")
    v.add_argument("--battery", choices=BATTERIES)
    v.add_argument("--horizons", help="comma-separated times")
    v.add_argument("--samples", type=int)
    v.add_argument("--tol", type=float)
    v.add_argument("--mode", choices=("ae", "superdifferential"))

    dg = sub.add_parser("diagnose", parents=[common], help="sampled assumption checks for a model")
    dg.add_argument("--alpha", type=float)
    dg.add_argument("--beta", type=float)
    dg.add_argument("--p-max", type=float)
    dg.add_argument("--u-max", type=float)
    return p


def _effective_config(args) -> dict:
    cfg = load_config(args.config) if args.config else merge({})
    if args.model is not None:
        cfg["model"] = args.model
    if cfg["model"] is None:
        raise ConfigError("missing required key 'model' (give --model or a config with a 'model' block)")
    if getattr(args, "lam", None) is not None:
        m = cfg["model"]
        m = dict(m) if isinstance(m, dict) else ({"name": m} if m in ("E1", "E2") else {"expression": m})
        m["lambda"] = args.lam
        cfg["model"] = m

    def put(block, key, value):
        if value is not None:
            cfg[block][key] = value

    put("io", "out", args.out)
    put("io", "workers", args.workers)
    put("battery", "seed", args.seed)
    put("grid", "dim", args.dim)
    put("grid", "resolution", args.resolution)
    put("grid", "period", args.period)
    g = vars(args)
    for key in ("dt", "v_res", "picard_tol", "picard_max", "snapshot_every"):
        put("evolution", key, g.get(key))
    if args.command in ("semigroup", "verify"):
        put("evolution", "v_max", g.get("v_max"))
    put("data", "phi", g.get("phi"))
    put("data", "phi_file", g.get("phi_file"))
    if args.command == "flow":
        put("data", "x0", None if g.get("x0") is None else _floats(g["x0"]))
        put("data", "p0", None if g.get("p0") is None else _floats(g["p0"]))
        put("data", "u0", g.get("u0"))
        put("data", "T", g.get("t"))
        put("data", "h", g.get("h"))
        put("data", "adaptive", g.get("adaptive"))
        put("data", "backward", g.get("backward"))
    elif args.command == "legendre":
        put("data", "x0", None if g.get("x0") is None else _floats(g["x0"]))
        put("data", "u", g.get("u"))
        put("data", "v_min", g.get("v_min"))
        put("data", "v_max", g.get("v_max"))
        put("data", "n_v", g.get("n_v"))
    elif args.command == "action":
        for key in ("x0", "u0", "x", "t", "direction"):
            put("data", key, g.get(key))
    elif args.command == "semigroup":
        put("data", "t", g.get("t"))
        put("data", "direction", g.get("direction"))
    elif args.command == "verify":
        put("battery", "name", g.get("battery"))
        put("battery", "horizons", None if g.get("horizons") is None else _floats(g["horizons"]))
        put("battery", "n_samples", g.get("samples"))
        put("battery", "tol", g.get("tol"))
        put("battery", "mode", g.get("mode"))
    elif args.command == "diagnose":
        m = cfg["model"]
        if any(g.get(k) is not None for k in ("alpha", "beta", "p_max", "u_max")):
            m = dict(m) if isinstance(m, dict) else ({"name": m} if m in ("E1", "E2") else {"expression": m})
            for k in ("alpha", "beta", "p_max", "u_max"):
                if g.get(k) is not None:
                    m[k] = g[k]
            cfg["model"] = m
    if cfg["io"]["workers"] in (None, 0):
        cfg["io"]["workers"] = os.cpu_count() or 1
    return cfg


def _model(cfg):
    return build_model(cfg["model"])


def _grid_for(cfg, model):
    spec = torus_spec(cfg)
    if spec.dim != model.dim:
        raise ConfigError(f"grid dim {spec.dim} does not match model dim {model.dim}")
    return spec


class _Bundle:
    def __init__(self, out: Path):
        self.out = out
        self.files = {}
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()

    def yaml(self, name: str, data):
        self.write(name, yaml.safe_dump(_plain(data), sort_keys=False))


# -- subcommands -------------------------------------------------------------

def _cmd_flow(cfg, model, bundle, info):
    d = cfg["data"]
    dim = model.dim
    period = torus_spec(cfg).period
    if d["states"]:
        states = [np.asarray(s, dtype=float) for s in d["states"]]
    else:
        x0 = np.broadcast_to(np.asarray(d["x0"], dtype=float).reshape(-1), (dim,))
        p0 = np.broadcast_to(np.asarray(d["p0"], dtype=float).reshape(-1), (dim,))
        states = [np.concatenate([x0, p0, [float(d["u0"])]])]
    for s in states:
        if s.shape != (2 * dim + 1,):
            raise ConfigError(f"state {s.tolist()} must have {2 * dim + 1} entries (x, p, u)")
    step = StepControl(h=float(d["h"]), adaptive=bool(d["adaptive"]))
    backward = bool(d["backward"])

    def run(s):
        st = ContactState.of(s[:dim], s[dim:2 * dim], s[-1], dim)
        return integrate(model, st, float(d["T"]), step, period, backward=backward)

    with ThreadPoolExecutor(max(1, int(cfg["io"]["workers"]))) as pool:
        trajs = list(pool.map(run, states))
    summary = []
    for i, tr in enumerate(trajs):
        name = "trajectory.csv" if len(trajs) == 1 else f"trajectory_{i:03d}.csv"
        bundle.write(name, tr.to_csv())
        fin = tr.final
        summary.append({"file": name, "final": {"x": fin.x, "p": fin.p, "u": fin.u},
                        "unwrapped_x": tr.unwrapped_x[-1], "h": tr.h,
                        "energy_residual": energy_residual(model, tr) if len(tr) > 2 else 0.0})
    bundle.yaml("flow.yaml", {"trajectories": summary})
    print(yaml.safe_dump(_plain(summary), sort_keys=False), end="")
    return True


def _cmd_legendre(cfg, model, bundle, info):
    d = cfg["data"]
    dim = model.dim
    x = np.broadcast_to(np.asarray(d["x0"], dtype=float).reshape(-1), (dim,))
    vs = np.linspace(float(d["v_min"]), float(d["v_max"]), int(d["n_v"]))
    V = np.zeros((len(vs), dim))
    V[:, 0] = vs
    L = legendre(model, np.broadcast_to(x, V.shape), V, np.full(len(vs), float(d["u"])))
    val = np.asarray(L.value).reshape(-1)
    ps = np.asarray(L.argmax_p).reshape(len(vs), dim)
    rows = ["v," + ",".join(f"p_star_{a + 1}" for a in range(dim)) + ",L"]
    for i in range(len(vs)):
        rows.append(",".join([repr(float(vs[i]))] + [repr(float(q)) for q in ps[i]] + [repr(float(val[i]))]))
    bundle.write("legendre.csv", "\n".join(rows) + "\n")
    print(f"tabulated L at x={x.tolist()}, u={d['u']} over {len(vs)} velocities")
    return True


def _cmd_action(cfg, model, bundle, info):
    d = cfg["data"]
    q = ActionQuery(float(d["x0"]), float(d["u0"]), float(d["x"]), float(d["t"]), d["direction"])
    period = torus_spec(cfg).period[0]
    fn = h_backward if q.direction == "backward" else h_forward
    try:
        r = fn(model, q, ShootingConfig(), period)
    except NoCharacteristicFound as exc:
        if exc.sweep is not None:
            bundle.write("sweep.csv", _sweep_csv(exc.sweep, q.x0))
        bundle.yaml("action.yaml", {"query": q.__dict__, "found": False, "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return False
    if r.sweep is not None:
        bundle.write("sweep.csv", _sweep_csv(r.sweep, q.x0))
    optimum = {"query": q.__dict__, "found": True, "value": r.value, "attaining_p0": r.attaining_p0,
               "winding": r.winding, "candidates_scanned": r.candidates_scanned,
               "hits": [{"p0": p, "value": v, "winding": k}
                        for p, v, k in zip(r.hits_p0.tolist(), r.hits_value.tolist(), r.hits_winding.tolist())]}
    bundle.yaml("action.yaml", optimum)
    print(f"value {r.value!r} attained at p0={r.attaining_p0.tolist()} winding={r.winding.tolist()}")
    return True


def _sweep_csv(sweep, x0):
    rows = ["p0,x_t,u_t"]
    rows += [f"{p!r},{(x0 + dd)!r},{u!r}" for p, dd, u in zip(sweep.p0.tolist(), sweep.displacement.tolist(),
                                                             sweep.u.tolist())]
    return "\n".join(rows) + "\n"


def _cmd_semigroup(cfg, model, bundle, info):
    spec = _grid_for(cfg, model)
    phi = initial_datum(cfg, spec)
    ev = evolution_config(cfg)
    t = float(cfg["data"]["t"])
    evolve = evolve_backward if cfg["data"]["direction"] == "backward" else evolve_forward
    try:
        res = evolve(model, phi, t, ev)
    except PicardDivergence as exc:
        info["error"] = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        return False
    bundle.write("initial.grid", format_grid(phi))
    bundle.write("final.grid", format_grid(res.final))
    X = phi.spec.nodes()
    series = [(0.0, phi)] + list(res.snapshots)
    if not res.snapshots or abs(res.snapshots[-1][0] - t) > 1e-12:
        series.append((t, res.final))
    head = "t," + ",".join(f"x{a + 1}" for a in range(spec.dim)) + ",value"
    rows = [head]
    for k, (ts, g) in enumerate(series):
        if 0 < k < len(series) - 1 or (k == len(series) - 1 and res.snapshots and ts == res.snapshots[-1][0]):
            bundle.write(f"snapshots/snapshot_{k:04d}.grid", format_grid(g))
        for i, val in enumerate(g.flat.tolist()):
            rows.append(",".join([repr(float(ts))] + [repr(float(c)) for c in X[i]] + [repr(val)]))
        rows.append("")
    bundle.write("series.csv", "\n".join(rows))
    info.update({"picard_iters": res.picard_iters, "monotone_flag": res.monotone_flag, "steps": res.steps,
                 "snapshot_times": [ts for ts, _ in res.snapshots]})
    print(f"evolved to t={t} in {res.steps} steps; max Picard iterations {res.picard_iters}; "
          f"monotone_flag={res.monotone_flag}")
    return True


def _cmd_verify(cfg, model, bundle, info):
    spec = _grid_for(cfg, model)
    phi = initial_datum(cfg, spec)
    vc = verify_config(cfg)
    name = cfg["battery"]["name"]
    if name not in BATTERIES:
        raise ConfigError(f"unknown battery '{name}'; choose from {', '.join(BATTERIES)}")
    if name == "subsolution":
        rep = subsolution_report(model, phi, vc, cfg["battery"]["mode"])
    elif name == "theorem-a":
        rep = battery_theorem_A(model, phi, vc)
    elif name == "theorem-b":
        rep = battery_theorem_B(model, phi, vc)
    elif name == "corollary-c":
        rep = battery_corollary_C(model, phi, vc)
    else:
        rep = check_lemma_flow_inclusion(model, phi, vc, vc.tol)
    bundle.yaml("report.yaml", rep.to_dict())
    if rep.samples_csv:
        bundle.write("samples.csv", rep.samples_csv)
    for k, ok in rep.checks.items():
        print(f"{k}: {'pass' if ok else 'FAIL'} (margin {rep.margins.get(k, float('nan'))!r})")
    if rep.unanimous is not None:
        print(f"unanimous: {rep.unanimous}")
    tol = rep.parameters.get("tolerance")
    print(f"{name}: PASS, no violation found at tolerance {tol!r}" if rep.passed else f"{name}: FAIL")
    info["passed"] = rep.passed
    return rep.passed


def _cmd_diagnose(cfg, model, bundle, info):
    block = cfg["model"] if isinstance(cfg["model"], dict) else {}
    plan = SamplingPlan(p_max=float(block.get("p_max", 10.0)), u_max=float(block.get("u_max", 10.0)),
                        period=float(torus_spec(cfg).period[0]), alpha=block.get("alpha"), beta=block.get("beta"))
    rep = check_assumptions(model, plan)
    bundle.yaml("diagnostics.yaml", rep.to_dict())
    for k, c in rep.checks.items():
        print(f"{k}: {'pass' if c.passed else 'FAIL'} value={c.value!r} ({c.summary()})")
    info["passed"] = rep.passed
    return rep.passed


COMMANDS = {"flow": _cmd_flow, "legendre": _cmd_legendre, "action": _cmd_action, "semigroup": _cmd_semigroup,
            "verify": _cmd_verify, "diagnose": _cmd_diagnose}


def _input_hash(cfg) -> str:
    h = hashlib.sha256(json.dumps(_plain(cfg), sort_keys=True).encode())
    pf = cfg["data"].get("phi_file")
    if pf and Path(pf).exists():
        h.update(Path(pf).read_bytes())
    return h.hexdigest()


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = _effective_config(args)
        model = _model(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ModelError, ExpressionError, GridError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    bundle = _Bundle(Path(cfg["io"]["out"]))
    info = {}
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        ok = COMMANDS[args.command](cfg, model, bundle, info)
        code = EXIT_OK if ok else EXIT_FAIL
    except (ConfigError, ModelError, ExpressionError, GridError, EvolutionConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        info["error"] = str(exc)
        code = EXIT_USAGE
    except (BlowUp, LegendreError, PicardDivergence, NoCharacteristicFound) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        info["error"] = str(exc)
        code = EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        info["error"] = str(exc)
        code = EXIT_USAGE
    manifest = {
        "tool": "contacthj", "version": __version__, "command": args.command, "argv": argv,
        "config": cfg, "seed": cfg["battery"]["seed"], "started": started,
        "wall_time_s": time.perf_counter() - t0, "input_sha256": _input_hash(cfg),
        "outputs": dict(bundle.files), "exit_code": code, **info,
    }
    (bundle.out / "manifest.json").write_text(json.dumps(_plain(manifest), indent=2) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner.

Every subcommand resolves its arguments into one JSON-serializable config,
runs it, and writes the outputs plus ``manifest.json`` into ``--out``.  The
manifest echoes the resolved config, so ``sfde replay manifest.json``
reproduces the outputs byte for byte.  Only the manifest carries a timestamp.

Exit codes: 0 success, 1 configuration error, 2 experiment invalid
(explosions on a stability scheme, hypotheses not met, solver failure).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import FellerExperiment, feller_gap, kolmogorov_table, modulus_table, tightness_pass
from .factorization import bdg_constant, check_factorization_bound, default_alpha
from .integrators import SCHEMES, SchemeError, simulate_ensemble
from .invariant import ProjectionSpec, collect_measure, invariance_test, variance_with_se
from .io import write_csv, write_json, write_path_dump
from .lyapunov import run_lyapunov_experiment
from .model import (
    PRESETS,
    ConfigError,
    H0Failure,
    ModelError,
    Segment,
    SegmentGrid,
    check_h2,
    model_from_config,
    verify_h0,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVALID = 0, 1, 2


class ExperimentInvalid(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "argv")


# ---------------------------------------------------------------------------
# argument helpers


def _number(value, key: str, kind=float, positive: bool = False):
    try:
        x = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a {kind.__name__}, got {value!r}", key) from None
    if kind is float and not math.isfinite(x):
        raise ConfigError("must be finite", key)
    if positive and not x > 0:
        raise ConfigError("must be positive", key)
    return x


def _float_list(text: str, key: str) -> list[float]:
    try:
        return [_number(v, key) for v in text.split(",") if v.strip()]
    except ConfigError:
        raise
    except Exception:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}", key) from None


def _mu_grid(text: str) -> list[float]:
    """``start:factor:end`` → geometric grid ``start·factor^k <= end``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError("expected start:factor:end", "mu_grid")
    start, factor, end = (_number(p, "mu_grid", positive=True) for p in parts)
    if factor <= 1 or end < start:
        raise ConfigError("need factor > 1 and end >= start", "mu_grid")
    out, mu = [], start
    while mu <= end * (1 + 1e-12):
        out.append(mu)
        mu *= factor
    return out


def _load_json_arg(text: str, key: str):
    if text.lstrip().startswith(("{", "[")):
        src = text
    else:
        try:
            src = Path(text).read_text()
        except OSError as e:
            raise ConfigError(str(e), key) from None
    try:
        return json.loads(src)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", key) from None


def _model_doc(args) -> dict:
    if args.model and args.preset:
        raise ConfigError("give either --model or --preset", "model")
    if args.model:
        doc = _load_json_arg(args.model, "model")
    else:
        name = args.preset or "paper-eq11"
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}", "preset")
        doc = dict(PRESETS[name])
    model_from_config(doc)  # validate now, report key paths
    return doc


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("SFDE_THREADS", "1")
    key = "threads" if args.threads is not None else "SFDE_THREADS"
    n = _number(raw, key, int)
    if n < 1:
        raise ConfigError("must be >= 1", key)
    return n


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("SFDE_OUT_DIR") or "runs")


# ---------------------------------------------------------------------------
# config resolution


def _common(args, default_scheme: str, default_T: float) -> dict:
    scheme = args.scheme or default_scheme
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r} (expected one of {', '.join(SCHEMES)})", "scheme")
    doc = _model_doc(args)
    cfg = {
        "model": doc,
        "scheme": scheme,
        "dt": _number(args.dt, "dt", positive=True),
        "T": _number(args.T if args.T is not None else default_T, "T", positive=True),
        "paths": _number(args.paths, "paths", int),
        "seed": _number(args.seed, "seed", int),
    }
    if cfg["paths"] < 1:
        raise ConfigError("must be >= 1", "paths")
    if not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer", "seed")
    if args.phi is None:
        cfg["phi"] = {"kind": "constant", "value": [0.0] * int(doc["d"])}
    else:
        cfg["phi"] = _load_json_arg(args.phi, "phi")
    return cfg


def resolve(args) -> dict:
    """Turn parsed arguments into the fully resolved experiment config."""
    cmd = args.command if args.command != "diagnose" else f"diagnose {args.diagnostic}"
    if cmd == "factorization":
        cfg = {
            "p": _number(args.p, "p"),
            "mu_grid": _mu_grid(args.mu_grid),
            "alpha": None if args.alpha == "mid" else _number(args.alpha, "alpha"),
            "c_p": None if args.c_p is None else _number(args.c_p, "c_p", positive=True),
            "eta": _number(args.eta, "eta"),
            "T": _number(args.T, "T", positive=True),
            "dt": _number(args.dt, "dt", positive=True),
            "paths": _number(args.paths, "paths", int),
            "seed": _number(args.seed, "seed", int),
        }
        if not cfg["p"] > 2:
            raise ConfigError("p must exceed 2", "p")
        cfg["alpha"] = default_alpha(cfg["p"]) if cfg["alpha"] is None else cfg["alpha"]
        if not 1 / cfg["p"] < cfg["alpha"] < 0.5:
            raise ConfigError("alpha must lie in (1/p, 1/2)", "alpha")
        cfg["c_p"] = bdg_constant(cfg["p"]) if cfg["c_p"] is None else cfg["c_p"]
        return {"command": cmd, **cfg}
    if cmd == "validate-model":
        return {"command": cmd, "model": _model_doc(args), "dt": _number(args.dt, "dt", positive=True),
                "lam": _number(args.lam, "lam", positive=True)}

    if cmd == "simulate":
        cfg = _common(args, "tamed_em", 10.0)
        cfg["dump"] = bool(args.dump)
    elif cmd == "diagnose lyapunov":
        cfg = _common(args, "split_step_implicit", 1.0)
        cfg["K"] = _number(args.K, "K", int)
        cfg["transient"] = _number(args.transient, "transient", int)
        cfg["sweep"] = bool(args.sweep)
        cfg["T"] = cfg["K"] * float(cfg["model"]["r"])
    elif cmd == "diagnose tightness":
        cfg = _common(args, "split_step_implicit", 30.0)
        r = float(cfg["model"]["r"])
        cfg["gaps"] = _float_list(args.gaps, "gaps")
        cfg["gammas"] = _float_list(args.gammas, "gammas")
        cfg["burnin"] = 10.0 * r if args.burnin is None else _number(args.burnin, "burnin")
        cfg["threshold"] = _number(args.threshold, "threshold", positive=True)
        if args.starts is not None:
            cfg["starts"] = _float_list(args.starts, "starts")
        else:
            last = cfg["T"] - r
            if last < cfg["burnin"]:
                raise ConfigError("T must exceed burn-in + r", "T")
            k0, k1 = (round(v / cfg["dt"]) for v in (cfg["burnin"], last))
            cfg["starts"] = [k * cfg["dt"] for k in np.linspace(k0, k1, 10).round().astype(int).tolist()]
    elif cmd == "diagnose feller":
        cfg = _common(args, "tamed_em", 1.0)
        cfg["perturbations"] = _float_list(args.perturbations, "perturbations")
        if not cfg["perturbations"] or min(cfg["perturbations"]) <= 0:
            raise ConfigError("need positive perturbation sizes", "perturbations")
    elif cmd == "invariant":
        cfg = _common(args, "tamed_em", 60.0)
        r = float(cfg["model"]["r"])
        cfg["proj"] = _float_list(args.proj, "proj")
        cfg["burnin"] = 10.0 * r if args.burnin is None else _number(args.burnin, "burnin")
        cfg["stride"] = r if args.stride is None else _number(args.stride, "stride", positive=True)
        cfg["lag"] = 2.0 * r if args.lag is None else _number(args.lag, "lag", positive=True)
        cfg["perms"] = _number(args.perms, "perms", int)
        cfg["perm_seed"] = _number(args.perm_seed, "perm_seed", int)
    else:  # pragma: no cover - argparse guards this
        raise ConfigError(f"unknown command {cmd!r}", "command")
    return {"command": cmd, **cfg}


# ---------------------------------------------------------------------------
# execution


def _segment(cfg: dict, model) -> Segment:
    grid = SegmentGrid(model.r, cfg["dt"])
    spec = cfg["phi"]
    if not isinstance(spec, dict):
        raise ConfigError("expected an object", "phi")
    kind = spec.get("kind")
    try:
        if kind == "constant":
            return Segment.constant(grid, np.asarray(spec["value"], dtype=float).reshape(model.d))
        if kind == "values":
            vals = np.asarray(spec["values"], dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            if vals.shape != (grid.n + 1, model.d):
                raise ConfigError(f"expected {grid.n + 1} rows of {model.d} values", "phi.values")
            return Segment(grid, vals)
    except KeyError as e:
        raise ConfigError("missing required key", f"phi.{e.args[0]}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), "phi") from None
    raise ConfigError(f"unknown kind {kind!r} (expected constant or values)", "phi.kind")


def _check_stable(ens, what: str):
    if ens.scheme != "explicit_em" and ens.exploded.any():
        raise ExperimentInvalid(
            f"{what}: {int(ens.exploded.sum())} of {ens.n_paths} paths exploded under {ens.scheme}"
        )


def _run_simulate(cfg, model, phi, out, threads):
    ens = simulate_ensemble(model, cfg["scheme"], phi, cfg["paths"], cfg["T"], cfg["seed"], threads=threads)
    sup = ens.sup_abs()
    term = ens.x(ens.steps)
    d = model.d
    header = ["path_id", "exploded", "sup_|x|"] + (["terminal"] if d == 1 else [f"terminal_{j}" for j in range(d)])
    rows = ([int(i), bool(e), s, *t] for i, e, s, t in zip(ens.ids, ens.exploded, sup, term))
    write_csv(out / "summary.csv", header, rows)
    files = ["summary.csv"]
    if cfg["dump"]:
        write_path_dump(out / "paths.bin", ens.paths, ens.grid.n, ens.dt)
        files.append("paths.bin")
    write_json(out / "simulate_report.json", {
        "explosion_rate": ens.explosion_rate, "n_paths": ens.n_paths, "steps": ens.steps, "dt": ens.dt,
        "max_sup_abs": float(sup.max()), "mean_terminal": term.mean(axis=0).tolist(),
    })
    files.append("simulate_report.json")
    _check_stable(ens, "simulate")
    return files


def _run_lyapunov(cfg, model, phi, out, threads):
    rep = run_lyapunov_experiment(model, cfg["scheme"], phi, cfg["paths"], cfg["K"], cfg["seed"],
                                  threads=threads, transient=cfg["transient"], with_sweep=cfg["sweep"])
    write_json(out / "lyapunov_report.json", rep.to_dict())
    rows = zip(range(len(rep.times)), rep.times, rep.EV, rep.EV_se, rep.moment2, rep.moment6, rep.moment6_se)
    write_csv(out / "iterates.csv", ["k", "t", "EV", "EV_se", "moment2", "moment6", "moment6_se"], rows)
    if not rep.valid:
        raise ExperimentInvalid(f"lyapunov: explosion rate {rep.explosion_rate} under {cfg['scheme']}")
    return ["lyapunov_report.json", "iterates.csv"]


def _run_tightness(cfg, model, phi, out, threads):
    ens = simulate_ensemble(model, cfg["scheme"], phi, cfg["paths"], cfg["T"], cfg["seed"],
                            threads=threads, record_martingale=True)
    _check_stable(ens, "tightness")
    rows = modulus_table(ens, cfg["starts"], cfg["gaps"], cfg["gammas"])
    write_csv(out / "tightness.csv", ["t", "delta_w", "gamma_m", "exceedance", "dt"],
              ([r["t"], r["delta_w"], r["gamma_m"], r["exceedance"], r["dt"]] for r in rows))
    kt = kolmogorov_table(ens, t_start=min(cfg["burnin"], ens.T))
    write_csv(out / "kolmogorov.csv", ["gap", "ratio", "se", "samples"],
              ([r["gap"], r["ratio"], r["se"], r["samples"]] for r in kt["rows"]))
    gaps = sorted(set(cfg["gaps"]), reverse=True)
    monotone = {}
    for gm in cfg["gammas"]:
        worst = [max(r["exceedance"] for r in rows if r["gamma_m"] == gm and r["delta_w"] == g) for g in gaps]
        monotone[str(gm)] = bool(all(b < a for a, b in zip(worst, worst[1:])))
    passed = {str(k): v for k, v in tightness_pass(rows, cfg["threshold"]).items()}
    write_json(out / "tightness_report.json", {
        "pass_at_smallest_gap": passed, "monotone_in_gap": monotone,
        "kolmogorov": {"max_ratio": kt["max_ratio"], "slope": kt["slope"], "dt": kt["dt"]},
    })
    return ["tightness.csv", "kolmogorov.csv", "tightness_report.json"]


def _run_feller(cfg, model, phi, out, threads):
    exp = FellerExperiment(phi, cfg["perturbations"], cfg["T"])
    rep = feller_gap(model, cfg["scheme"], exp, cfg["paths"], cfg["seed"], threads=threads)
    cols = ["perturbation", "estimate", "se", "ucb", "bound", "passed"]
    write_csv(out / "feller.csv", cols, ([r[c] for c in cols] for r in rep.rows))
    write_json(out / "feller_report.json", rep.to_dict())
    if cfg["scheme"] != "explicit_em" and rep.invalid_pairs:
        raise ExperimentInvalid(f"feller: {rep.invalid_pairs} coupled pairs exploded")
    return ["feller.csv", "feller_report.json"]


def _run_invariant(cfg, model, phi, out, threads):
    ens = simulate_ensemble(model, cfg["scheme"], phi, cfg["paths"], cfg["T"], cfg["seed"], threads=threads)
    _check_stable(ens, "invariant")
    proj = ProjectionSpec(tuple(cfg["proj"]))
    meas = collect_measure(ens, proj, cfg["burnin"], cfg["stride"])
    cols = [f"x({o:g})" if model.d == 1 else f"x({o:g})_{j}" for o in proj.offsets for j in range(model.d)]
    write_csv(out / "samples.csv", ["path_id", "t", *cols],
              ([int(p), t, *v] for p, t, v in zip(meas.path_ids, meas.times, meas.samples)))
    rep = invariance_test(ens, proj, cfg["burnin"], cfg["lag"], cfg["stride"], cfg["perms"], cfg["perm_seed"])
    moments = []
    for c in range(meas.samples.shape[1]):
        v, se = variance_with_se(meas, c)
        moments.append({"column": cols[c], "mean": float(meas.samples[:, c].mean()), "variance": v, "variance_se": se})
    write_json(out / "invariance_report.json", {**rep.to_dict(), "samples": meas.count, "moments": moments})
    return ["samples.csv", "invariance_report.json"]


def _run_factorization(cfg, out):
    rows = []
    for mu in cfg["mu_grid"]:
        chk = check_factorization_bound(cfg["p"], mu, cfg["alpha"], cfg["c_p"], eta=cfg["eta"], T=cfg["T"],
                                        n_paths=cfg["paths"], seed=cfg["seed"], dt=cfg["dt"])
        rows.append([mu, chk.a, chk.lhs, chk.rhs, chk.ratio, chk.passed])
    write_csv(out / "factorization.csv", ["mu", "a_p_mu", "lhs", "rhs", "ratio", "pass"], rows)
    return ["factorization.csv"]


def _run_validate(cfg, out):
    model = model_from_config(cfg["model"])
    grid = SegmentGrid(model.r, cfg["dt"])
    report = {"name": model.name, "d": model.d, "m": model.m, "r": model.r, "L": model.L}
    problems = []
    try:
        report["D"] = model.D(grid)
    except ModelError as e:
        report["D"] = None
        problems.append(str(e))
    try:
        report["h0_radius"] = verify_h0(model, cfg["lam"])
    except H0Failure as e:
        report["h0_radius"] = None
        problems.append(str(e))
    ratio = check_h2(model, grid)
    report["h2_max_ratio"] = ratio
    if not ratio <= 1.0 + 1e-9:
        problems.append(f"declared L violated on sampled pairs (ratio {ratio})")
    report["lam"] = cfg["lam"]
    report["problems"] = problems
    report["valid"] = not problems
    write_json(out / "validation.json", report)
    if problems:
        raise ExperimentInvalid("; ".join(problems))
    return ["validation.json"]


_RUNNERS = {
    "simulate": _run_simulate,
    "diagnose lyapunov": _run_lyapunov,
    "diagnose tightness": _run_tightness,
    "diagnose feller": _run_feller,
    "invariant": _run_invariant,
}


def execute(cfg: dict, out: Path, threads: int = 1) -> list[str]:
    """Run a resolved config; returns the output file names (manifest excluded)."""
    out.mkdir(parents=True, exist_ok=True)
    cmd = cfg["command"]
    files: list[str] = []
    status = "ok"
    try:
        if cmd == "factorization":
            files = _run_factorization(cfg, out)
        elif cmd == "validate-model":
            files = _run_validate(cfg, out)
        elif cmd in _RUNNERS:
            model = model_from_config(cfg["model"])
            files = _RUNNERS[cmd](cfg, model, _segment(cfg, model), out, threads)
        else:
            raise ConfigError(f"unknown command {cmd!r}", "command")
    except ExperimentInvalid:
        status = "invalid"
        raise
    finally:
        if status != "ok" or files:
            write_json(out / "manifest.json", {
                "artifact": "sfdelab",
                "version": __version__,
                "config": cfg,
                "status": status,
                "outputs": sorted(files),
                "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            })
    return files


def _replay_config(path: str) -> dict:
    doc = _load_json_arg(path, "manifest")
    if not isinstance(doc, dict) or not isinstance(doc.get("config"), dict):
        raise ConfigError("manifest has no config object", "manifest.config")
    if doc.get("version") != __version__:
        print(f"warning: manifest written by version {doc.get('version')}, running {__version__}", file=sys.stderr)
    return doc["config"]


# ---------------------------------------------------------------------------
# argument parser


def _add_common(p, *, dt="0.01", paths="1000"):
    p.add_argument("--model", help="model JSON file (or inline JSON)")
    p.add_argument("--preset", help=f"built-in model: {', '.join(PRESETS)}")
    p.add_argument("--phi", help="initial segment JSON: {kind: constant, value} or {kind: values, values}; default 0")
    p.add_argument("--scheme", help=f"one of {', '.join(SCHEMES)}")
    p.add_argument("--dt", default=dt)
    p.add_argument("--T", default=None)
    p.add_argument("--paths", default=paths)
    p.add_argument("--seed", default="0")
    _add_run(p)


def _add_run(p):
    p.add_argument("--threads", default=None, help="worker threads (env SFDE_THREADS)")
    p.add_argument("--out", default=None, help="output directory (env SFDE_OUT_DIR, default runs/)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfde", description="Simulate and diagnose stochastic delay equations.")
    parser.add_argument("--version", action="version", version=f"sfde {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate an ensemble and summarize each path")
    _add_common(p)
    p.add_argument("--dump", action="store_true", help="also write the full paths as paths.bin")

    diag = sub.add_parser("diagnose", help="moment, tightness and Feller diagnostics")
    dsub = diag.add_subparsers(dest="diagnostic", required=True, parser_class=_Parser)
    p = dsub.add_parser("lyapunov", help="Lyapunov iterates and contraction fit")
    _add_common(p, paths="5000")
    p.add_argument("--K", default="40")
    p.add_argument("--transient", default="2")
    p.add_argument("--sweep", action="store_true", help="include the theoretical lambda sweep")
    p = dsub.add_parser("tightness", help="modulus-of-continuity exceedance and Kolmogorov ratios")
    _add_common(p, paths="2000")
    p.add_argument("--gaps", default="0.2,0.1,0.05")
    p.add_argument("--gammas", default="0.5,1.0")
    p.add_argument("--burnin", default=None)
    p.add_argument("--starts", default=None, help="window start times (default: 10 from burn-in to T-r)")
    p.add_argument("--threshold", default="0.01")
    p = dsub.add_parser("feller", help="coupled-noise gap against the Gronwall bound")
    _add_common(p, paths="2000")
    p.add_argument("--perturbations", default="0.1,0.05,0.025,0.0125")

    p = sub.add_parser("invariant", help="empirical invariant measure and invariance test")
    _add_common(p, dt="0.001", paths="2000")
    p.add_argument("--proj", default="0")
    p.add_argument("--burnin", default=None)
    p.add_argument("--stride", default=None)
    p.add_argument("--lag", default=None)
    p.add_argument("--perms", default="999")
    p.add_argument("--perm-seed", dest="perm_seed", default="12345")

    p = sub.add_parser("factorization", help="stochastic convolution sup-moment bound")
    p.add_argument("--p", default="3")
    p.add_argument("--mu-grid", dest="mu_grid", default="8:4:128")
    p.add_argument("--alpha", default="mid")
    p.add_argument("--c-p", dest="c_p", default=None)
    p.add_argument("--eta", default="1.0")
    p.add_argument("--T", default="1.0")
    p.add_argument("--dt", default="0.001")
    p.add_argument("--paths", default="20000")
    p.add_argument("--seed", default="0")
    _add_run(p)

    p = sub.add_parser("validate-model", help="check a model's declared constants and hypotheses")
    p.add_argument("--model")
    p.add_argument("--preset")
    p.add_argument("--dt", default="0.01")
    p.add_argument("--lam", default="1.0", help="dissipativity level probed for the drift")
    _add_run(p)

    p = sub.add_parser("replay", help="re-run the config stored in a manifest")
    p.add_argument("manifest")
    _add_run(p)
    return parser


_LIST_FLAGS = ("--proj", "--starts", "--gaps", "--gammas", "--perturbations")


def _join_negative_lists(argv: list[str]) -> list[str]:
    """Let ``--proj -1,-0.5,0`` through argparse, which would read ``-1,...`` as a flag."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in _LIST_FLAGS and i + 1 < len(argv) and re.match(r"^-[\d.]", argv[i + 1]):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_join_negative_lists(argv))
        cfg = _replay_config(args.manifest) if args.command == "replay" else resolve(args)
        threads = _threads(args)
        out = _out_dir(args)
        files = execute(cfg, out, threads)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as e:
        print(f"error: model: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentInvalid, SchemeError) as e:
        print(f"invalid experiment: {e}", file=sys.stderr)
        return EXIT_INVALID
    for name in files:
        print(out / name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

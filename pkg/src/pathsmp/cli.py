"""Command line entry point: run, check-identities, grad-check, lq-oracle."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_from_dict, parse_config
from .forward import NumericalError
from .identities import run_all
from .lq import LQValidationError, lq_bruteforce_deterministic
from .scenarios import Scenario, build_scenario
from .smp import LineSearchError, fd_gradient_check, projected_gradient_descent
from .spaces import GridError

log = logging.getLogger("pathsmp")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


def _fmt(x) -> str:
    # repr round-trips floats exactly; CSVs are byte-stable across runs
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: ExperimentConfig, verb: str, files: list[Path], extra: dict | None = None) -> Path:
    man = {
        "verb": verb,
        "version": __version__,
        "scenario": cfg.scenario,
        "seed": cfg.mc.seed,
        "n_paths": cfg.mc.n_paths,
        "config_sha256": cfg.config_hash(),
        "config": cfg.model_dump(mode="json"),
        "files": {f.name: _sha256(f) for f in sorted(files)},
    }
    if extra:
        man.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def control_rows(sc: Scenario, u: np.ndarray):
    """(t, mean control coordinates) on nodes 0..N."""
    g = sc.grid
    um = u[:, g.k:].mean(axis=0)
    return [[n * g.dt, *um[n]] for n in range(g.n_steps + 1)]


def smooth_direction(sc: Scenario, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    g = sc.grid
    t = np.arange(g.n_steps + 1) * g.dt / g.T
    a = rng.standard_normal((3, sc.problem.d1))
    vals = a[0] + a[1] * np.sin(np.pi * t)[:, None] + a[2] * np.cos(2 * np.pi * t)[:, None]
    out = sc.problem.control(0.0)
    out[0, g.k:] = vals
    out[0, : g.k] = 0.0
    return out


def grad_check_rows(sc: Scenario, cfg: ExperimentConfig, u_bar=None):
    u_bar = sc.problem.control(0.0) if u_bar is None else u_bar
    dirn = smooth_direction(sc, cfg.gradcheck.direction_seed)
    rep = fd_gradient_check(sc.problem, u_bar, u_bar + dirn, cfg.gradcheck.rhos, sc.ens, sc.opts,
                            cfg.gradcheck.scheme)
    return rep, [list(r) for r in rep.rows]


def emit_plotdata(out: Path) -> list[Path]:
    """Long-format (quantity, t, value, index) CSVs from a finished run directory."""
    out = Path(out)
    made = []
    trace = out / "trace.csv"
    control = out / "control.csv"
    grad = out / "gradcheck.csv"
    if not trace.exists() and not control.exists() and not grad.exists():
        raise FileNotFoundError(f"no run artifacts in {out}")
    rows = []
    if trace.exists():
        with open(trace, encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rows.append(["J", "", r["J"], r["iter"]])
                rows.append(["residual", "", r["residual"], r["iter"]])
    if control.exists():
        with open(control, encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                for key, val in r.items():
                    if key != "t":
                        rows.append([key, r["t"], val, ""])
    if rows:
        made.append(write_csv(out / "plot_long.csv", ["quantity", "t", "value", "index"], rows))
    if grad.exists():
        with open(grad, encoding="utf-8") as fh:
            g = list(csv.DictReader(fh))
        long = [[q, "", r[q], r["rho"]] for r in g for q in ("fd", "yhat0", "pairing")]
        made.append(write_csv(out / "plot_gradcheck.csv", ["quantity", "t", "value", "rho"], long))
    return made


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    sc = build_scenario(cfg)
    o = cfg.optimizer
    prob = sc.problem
    try:
        res = projected_gradient_descent(prob, prob.control(0.0), sc.ens, sc.opts, o.step, o.max_iter, o.tol,
                                         armijo=o.armijo, budget=o.budget)
        status = "converged" if res.converged else "max_iter"
    except LineSearchError as exc:
        res = exc.result
        status = "line_search_failed"
    files = [write_csv(out / "trace.csv", ["iter", "J", "residual", "step"], res.trace)]
    d1 = prob.d1
    files.append(write_csv(out / "control.csv", ["t"] + [f"u{i}" for i in range(d1)], control_rows(sc, res.u)))
    rep, rows = grad_check_rows(sc, cfg)  # at the initial control, where G is informative
    files.append(write_csv(out / "gradcheck.csv", ["rho", "fd", "yhat0", "pairing"], rows))
    ident = run_all(seed=cfg.mc.seed)
    files.append(write_csv(out / "identities.csv", ["suite", "instances", "worst", "tol", "pass"],
                           [list(r.row().values()) for r in ident]))
    files += emit_plotdata(out)
    J = [t[1] for t in res.trace]
    monotone = all(b <= a for a, b in zip(J, J[1:]))
    write_manifest(out, cfg, "run", files, {"status": status, "J_monotone": monotone,
                                            "final_J": res.trace[-1][1], "final_residual": res.trace[-1][2]})
    print(f"{cfg.scenario}: {status} after {len(res.trace) - 1} iterations, J={res.trace[-1][1]:.6g}, "
          f"residual={res.trace[-1][2]:.3g} (initial {res.initial_residual:.3g})")
    return EXIT_OK if status != "line_search_failed" else EXIT_NUMERICAL


def cmd_grad_check(cfg: ExperimentConfig, out: Path) -> int:
    sc = build_scenario(cfg)
    rep, rows = grad_check_rows(sc, cfg)
    files = [write_csv(out / "gradcheck.csv", ["rho", "fd", "yhat0", "pairing"], rows)]
    files += emit_plotdata(out)
    write_manifest(out, cfg, "grad-check", files, {"max_rel_disagreement": rep.max_rel_disagreement()})
    for r in rows:
        print("rho={:.0e} fd={:.8g} yhat0={:.8g} pairing={:.8g}".format(*r))
    return EXIT_OK


def cmd_lq_oracle(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.scenario == "nonlinear_delay":
        raise LQValidationError("lq-oracle needs an LQ scenario (lq_basic or heat_spde)")
    sc = build_scenario(cfg, n_paths=1)
    res = lq_bruteforce_deterministic(sc.spec)
    g = sc.grid
    rows = [[n * g.dt, *res.u[0, g.k + n]] for n in range(g.n_steps)]
    files = [write_csv(out / "qp_control.csv", ["t"] + [f"u{i}" for i in range(sc.problem.d1)], rows)]
    write_manifest(out, cfg, "lq-oracle", files, {"qp_value": res.value, "hessian_min_eig": res.hessian_min_eig})
    print(f"QP value {res.value:.12g}; Hessian min eigenvalue {res.hessian_min_eig:.3g}")
    return EXIT_OK


def load_config_or_manifest(path) -> ExperimentConfig:
    """A config file, or a run manifest whose embedded config is re-validated."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError:
        data = None
    if isinstance(data, dict) and "config_sha256" in data and "config" in data:
        cfg = config_from_dict(data["config"])
        if cfg.config_hash() != data["config_sha256"]:
            raise ConfigError("config_sha256", "manifest hash does not match its embedded config")
        return cfg
    return parse_config(text)


def cmd_check_identities(seed: int, out: Path | None) -> int:
    results = run_all(seed=seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: worst={r.worst:.3e} tol={r.tol:g} "
              f"({r.n_instances} instances)")
    if out is not None:
        write_csv(out / "identities.csv", ["suite", "instances", "worst", "tol", "pass"],
                  [list(r.row().values()) for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathsmp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("run", "grad-check", "lq-oracle"):
        s = sub.add_parser(verb)
        s.add_argument("config", help="JSON experiment config or a run manifest")
        s.add_argument("--out", help="output directory (overrides output.dir)")
    s = sub.add_parser("check-identities")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.verb == "check-identities":
            return cmd_check_identities(args.seed, Path(args.out) if args.out else None)
        cfg = load_config_or_manifest(args.config)
        out = Path(args.out or cfg.output.dir)
        handler = {"run": cmd_run, "grad-check": cmd_grad_check, "lq-oracle": cmd_lq_oracle}[args.verb]
        return handler(cfg, out)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, GridError, LQValidationError, ValueError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

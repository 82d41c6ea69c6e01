"""Command-line entry point: ``stabilab {certify,simulate,check,fit}``.

Config files are UTF-8 JSON. Numeric fields may be JSON numbers or strings;
strings are parsed exactly as decimals or ``"num/den"`` rationals, e.g.
``"399/5000"``. Schema (all keys optional except ``system``)::

    {
      "system": "example1" | {
          "drift_x": [[...]], "drift_y": [[...]], "sigma": [...],
          "delay": {"kind": "constant" | "abs_sin" | "one_minus_abs_sin", "tau": "1/10"},
          "A": [[...]], "B": [[...]]
      },
      "scheme": {"kind": "em" | "theta" | "mtem", "theta": "1/2",
                 "h0": 1, "gamma": "1/5", "delta_star": 1,
                 "implicit_tol": "1e-12", "implicit_max_iter": 100},
      "grid": {"m_bar": 10, "n_steps": 2000},
      "initial": [1, 1] | {"kind": "constant" | "linear" | "cos", "value": [1, 1]},
      "n_paths": 500, "seed": 42, "window": "1/2",
      "p": ["500", "1"], "epsilon": "499/1000",
      "out": "results/"
    }
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import certify as cert
from .model import CoeffBounds, GridSpec, InitialSegment, SddeSystem
from .montecarlo import (
    FitError,
    MomentSeries,
    as_exponent,
    ensemble_moments,
    fit_decay_rate,
    fit_log_linear,
    to_rows,
)
from .presets import DELAY_KINDS, PRESET_NAMES, linear_system, preset
from .schemes import SchemeConfig
from .truncation import TruncationConfig, check_truncation_lemmas, h_of_delta


class ConfigError(ValueError):
    pass


def parse_number(v) -> float:
    if isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse number {v!r}") from exc
    raise ConfigError(f"expected a number, got {v!r}")


def parse_array(v) -> np.ndarray:
    if isinstance(v, list):
        return np.array([parse_array(e) if isinstance(e, list) else parse_number(e) for e in v])
    return np.array(parse_number(v))


@dataclass
class ExperimentConfig:
    system: Any = "example1"
    scheme: str = "mtem"
    theta: float = 1.0
    h0: float = 1.0
    gamma: float = 0.2
    delta_star: float = 1.0
    implicit_tol: float = 1e-12
    implicit_max_iter: int = 100
    m_bar: int = 10
    n_steps: int = 2000
    initial: Any = None
    n_paths: int = 500
    seed: int = 42
    window: float = 0.5
    p: Optional[List[float]] = None
    epsilon: Optional[float] = None
    out: Optional[str] = None
    samples: int = 10_000
    radius: float = 10.0

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        cfg = cls()
        if "system" in raw:
            cfg.system = raw["system"]
        sch = raw.get("scheme", {})
        if isinstance(sch, str):
            sch = {"kind": sch}
        if "kind" in sch:
            cfg.scheme = sch["kind"]
        for key in ("theta", "h0", "gamma", "delta_star", "implicit_tol"):
            if key in sch:
                setattr(cfg, key, parse_number(sch[key]))
        if "implicit_max_iter" in sch:
            cfg.implicit_max_iter = int(sch["implicit_max_iter"])
        grid = raw.get("grid", {})
        if "m_bar" in grid:
            cfg.m_bar = int(grid["m_bar"])
        if "n_steps" in grid:
            cfg.n_steps = int(grid["n_steps"])
        if "initial" in raw:
            cfg.initial = raw["initial"]
        for key in ("n_paths", "seed", "samples"):
            if key in raw:
                setattr(cfg, key, int(raw[key]))
        for key in ("window", "epsilon", "radius"):
            if key in raw:
                setattr(cfg, key, parse_number(raw[key]))
        if "p" in raw:
            cfg.p = [parse_number(v) for v in raw["p"]]
        if "out" in raw:
            cfg.out = raw["out"]
        return cfg


@dataclass
class Resolved:
    system: SddeSystem
    bounds: CoeffBounds
    initial: InitialSegment
    reference_p: Optional[np.ndarray] = None
    reference_epsilon: Optional[float] = None


def _named_initial(spec, d: int) -> InitialSegment:
    if isinstance(spec, list):
        return InitialSegment.constant(parse_array(spec))
    kind = spec.get("kind", "constant")
    value = parse_array(spec["value"])
    if value.shape != (d,):
        raise ConfigError(f"initial value must have length {d}")
    if kind == "constant":
        return InitialSegment.constant(value)
    if kind == "linear":
        return InitialSegment(lambda s: value * (1.0 + s))
    if kind == "cos":
        return InitialSegment(lambda s: value * math.cos(s))
    raise ConfigError(f"unknown initial kind {kind!r}; valid: constant, linear, cos")


def resolve_system(cfg: ExperimentConfig) -> Resolved:
    spec = cfg.system
    if isinstance(spec, str):
        pr = preset(spec)
        res = Resolved(pr.system, pr.bounds, pr.initial, pr.reference_p, pr.reference_epsilon)
    elif isinstance(spec, dict):
        try:
            dl = spec.get("delay", {"kind": "constant", "tau": 0.1})
            delay = DELAY_KINDS[dl.get("kind", "constant")](parse_number(dl["tau"]))
            bounds = CoeffBounds(parse_array(spec["A"]), parse_array(spec["B"]))
            system = linear_system(parse_array(spec["drift_x"]), parse_array(spec["drift_y"]),
                                   parse_array(spec["sigma"]), delay, bounds)
        except KeyError as exc:
            raise ConfigError(f"inline system is missing key {exc}") from exc
        res = Resolved(system, bounds, InitialSegment.constant(np.ones(system.d)))
    else:
        raise ConfigError(f"system must be a preset name or an inline spec, got {spec!r}")
    if cfg.initial is not None:
        res.initial = _named_initial(cfg.initial, res.system.d)
    return res


def build_scheme(cfg: ExperimentConfig, system: SddeSystem) -> SchemeConfig:
    kind = {"em": "em", "theta": "theta", "mtem": "mtem"}.get(cfg.scheme)
    if kind is None:
        raise ConfigError(f"unknown scheme {cfg.scheme!r}; valid: em, theta, mtem")
    trunc = None
    if kind == "mtem":
        trunc = TruncationConfig(cfg.h0, cfg.gamma, cfg.delta_star, system.lipschitz_model)
    return SchemeConfig(kind, theta=cfg.theta if kind == "theta" else 0.0, truncation=trunc,
                        implicit_tol=cfg.implicit_tol, implicit_max_iter=cfg.implicit_max_iter)


def _vec(a) -> list:
    return [float(v) for v in np.ravel(a)]


def certify_section(res: Resolved, cfg: ExperimentConfig, scheme: Optional[SchemeConfig] = None,
                    delta: Optional[float] = None) -> Dict[str, Any]:
    """Certificate pipeline on the coefficient matrices."""
    b = res.bounds
    tau = res.system.tau_max
    kh = cert.khasminskii_diagnostic(b)
    out: Dict[str, Any] = {
        "A": b.A.tolist(),
        "B": b.B.tolist(),
        "khasminskii": {
            "verdict": "possibly feasible" if kh.feasible else "infeasible",
            "col_sums_a": _vec(kh.col_sums_a),
            "col_sums_b": _vec(kh.col_sums_b),
        },
        "growth_K": cert.growth_constant(b),
    }
    found = cert.find_certificate(b, tau)
    if isinstance(found, cert.Certificate):
        out["certificate"] = {
            "feasible": True, "abscissa": found.abscissa, "p": _vec(found.p),
            "margins": _vec(found.margins), "beta": found.beta,
        }
    else:
        out["certificate"] = {"feasible": False, "abscissa": found.abscissa}

    p_check = np.asarray(cfg.p, float) if cfg.p is not None else res.reference_p
    eps = cfg.epsilon if cfg.epsilon is not None else res.reference_epsilon
    if p_check is not None:
        rep = cert.verify_certificate(b, p_check)
        out["supplied_p"] = {"p": _vec(p_check), "margins": _vec(rep.margins),
                             "feasible": rep.feasible, "failing_rows": [i + 1 for i in rep.failing_rows]}
    if eps is not None and np.all(np.diag(b.A) < 0):
        bound = cert.theta_epsilon_bound(b)
        section: Dict[str, Any] = {"epsilon": eps, "epsilon_bound": bound}
        if 0 < eps < bound:
            if p_check is not None:
                rep = cert.check_theta_condition(b, p_check, eps)
                section["supplied_p"] = {"margins": _vec(rep.margins), "feasible": rep.feasible,
                                         "failing_rows": [i + 1 for i in rep.failing_rows]}
            tc = cert.find_theta_certificate(b, eps)
            section["certificate"] = (
                {"feasible": True, "p": _vec(tc.p), "margins": _vec(tc.margins),
                 "abscissa": tc.abscissa}
                if isinstance(tc, cert.Certificate) else {"feasible": False, "abscissa": tc.abscissa}
            )
        else:
            section["error"] = f"epsilon outside (0, {bound})"
        out["epsilon_condition"] = section

    if scheme is not None and delta is not None:
        out["scheme_checks"] = scheme_checks(res, scheme, delta)
    return out


def scheme_checks(res: Resolved, scheme: SchemeConfig, delta: float) -> Dict[str, Any]:
    sysm = res.system
    lip = sysm.lipschitz_model
    out: Dict[str, Any] = {"scheme": scheme.label(), "delta": delta}
    if scheme.kind == "theta":
        if lip is not None and lip.one_sided_L is not None:
            val = lip.one_sided_L * scheme.theta * delta
            out["well_posedness"] = {"L_theta_delta": val, "ok": val < 1.0}
        if scheme.theta <= 0.5:
            lg = cert.linear_drift_growth(sysm)
            margins = cert.small_step_margins(res.bounds, lg.K, scheme.theta, delta)
            out["linear_growth"] = {
                "linear": lg.linear, "K": lg.K, "max_row_sum": lg.max_row_sum,
                "empirical_ratio": lg.empirical_ratio,
                "step_margins": _vec(margins), "step_ok": bool(np.all(margins < 0)),
            }
    if scheme.kind == "mtem":
        tr = scheme.truncation
        h = h_of_delta(tr, delta)
        entry = {"h0": tr.h0, "gamma": tr.gamma, "h": h}
        if lip is not None:
            entry["L_h"] = lip.local_constant(h)
            entry["L_h_sq_delta"] = lip.local_constant(h) ** 2 * delta
        out["truncation"] = entry
    return out


def format_csv(series: MomentSeries) -> str:
    d = series.component_moments.shape[0]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *(f"m{i + 1}" for i in range(d)), "V", "se_V", "n_alive"])
    for row in to_rows(series):
        w.writerow([*(f"{v:.17g}" for v in row[:-1]), row[-1]])
    return buf.getvalue()


def read_csv(path) -> Dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FitError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    cols = np.array([[float(v) for v in r] for r in body]) if body else np.empty((0, len(header)))
    return {name: cols[:, i] for i, name in enumerate(header)}


def simulate(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Full pipeline. Returns the report dict; writes files when ``cfg.out``."""
    if cfg.n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {cfg.n_paths}")
    res = resolve_system(cfg)
    scheme = build_scheme(cfg, res.system)
    grid = GridSpec(res.system.tau_max, cfg.m_bar, cfg.n_steps)
    report = {"system": res.system.name, "grid": {
        "m_bar": grid.m_bar, "delta": grid.delta, "n_steps": grid.n_steps, "horizon": grid.horizon},
        "n_paths": cfg.n_paths, "seed": cfg.seed}
    report["certify"] = certify_section(res, cfg, scheme, grid.delta)
    c = report["certify"]["certificate"]
    p = np.asarray(c["p"]) if c["feasible"] else np.ones(res.system.d)
    report["weights"] = {"p": _vec(p), "source": "certificate" if c["feasible"] else "unit"}

    series = ensemble_moments(res.system, scheme, grid, res.initial, cfg.n_paths, cfg.seed, p=p)
    mc: Dict[str, Any] = {
        "n_diverged": series.n_diverged,
        "V_initial": float(series.weighted[series.m_bar]),
        "V_terminal": float(series.weighted[-1]),
    }
    try:
        fit = fit_decay_rate(series, cfg.window)
        mc["fit"] = {"rate": fit.rate, "stderr": fit.stderr, "window": cfg.window,
                     "n_points": fit.n_points, "t_start": fit.t_start}
    except FitError as exc:
        mc["fit"] = {"error": str(exc)}
    if grid.n_steps > 0:
        alive = np.all(np.isfinite(series.terminal), axis=1)
        if np.any(alive):
            with np.errstate(divide="ignore"):
                ex = as_exponent(series.terminal[alive], grid)
            mc["as_exponent"] = {
                "median": _vec(np.median(ex, axis=0)),
                "fraction_negative": _vec(np.mean(ex < 0, axis=0)),
            }
    report["montecarlo"] = mc
    if cfg.out:
        write_outputs(Path(cfg.out), report, format_csv(series))
    report["_csv"] = format_csv(series)
    return report


def write_outputs(out: Path, report: Dict[str, Any], csv_text: Optional[str] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if csv_text is not None:
        (out / "moments.csv").write_text(csv_text, encoding="utf-8", newline="\n")
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    (out / "report.json").write_text(json.dumps(clean, indent=2) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(render_text(clean), encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(e) for e in v) + "]"
    return str(v)


def render_text(report: Dict[str, Any], indent: int = 0) -> str:
    lines = []
    pad = "  " * indent
    for key, val in report.items():
        if isinstance(val, dict):
            lines.append(f"{pad}{key}:")
            lines.append(render_text(val, indent + 1).rstrip("\n"))
        elif isinstance(val, list) and val and isinstance(val[0], list):
            lines.append(f"{pad}{key}: " + "; ".join(_fmt(r) for r in val))
        else:
            lines.append(f"{pad}{key}: {_fmt(val)}")
    return "\n".join(lines) + "\n"


def run_check(cfg: ExperimentConfig) -> Dict[str, Any]:
    res = resolve_system(cfg)
    diag = cert.check_componentwise_bound(res.system, res.bounds, cfg.samples, cfg.radius, cfg.seed)
    out: Dict[str, Any] = {
        "system": res.system.name,
        "componentwise": {"n_samples": diag.n_samples, "radius": cfg.radius,
                          "violations": len(diag.violations),
                          "first": [_violation(v) for v in diag.violations[:5]]},
    }
    if res.system.lipschitz_model is not None:
        delta = res.system.tau_max / cfg.m_bar
        tr = TruncationConfig(cfg.h0, cfg.gamma, cfg.delta_star, res.system.lipschitz_model)
        lem = check_lemmas(res, tr, delta, cfg)
        out["truncation_lemmas"] = lem
    return out


def check_lemmas(res: Resolved, tr: TruncationConfig, delta: float, cfg: ExperimentConfig):
    rep = check_truncation_lemmas(res.system, res.bounds, tr, delta, cfg.samples, cfg.seed)
    return {"h": rep.h, "L_h": rep.L_h, "n_samples": rep.n_samples, "n_outside": rep.n_outside,
            "bound_violations": len(rep.bound_violations),
            "growth_violations": len(rep.growth_violations)}


def _violation(v: cert.Violation) -> Dict[str, Any]:
    return {"sample": v.index, "x": _vec(v.x), "y": _vec(v.y), "row": v.row + 1,
            "lhs": v.lhs, "rhs": v.rhs}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stabilab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", choices=PRESET_NAMES)
        p.add_argument("--config", type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--mbar", type=int)

    c = sub.add_parser("certify", help="certificate report from the coefficient matrices")
    common(c)
    c.add_argument("--scheme", choices=("em", "theta", "mtem"))
    c.add_argument("--theta", type=parse_number)
    c.add_argument("--p", type=parse_number, nargs="+", help="weight vector to verify")
    c.add_argument("--epsilon", type=parse_number)

    s = sub.add_parser("simulate", help="certificate + Monte Carlo moments + decay fit")
    common(s)
    s.add_argument("--scheme", choices=("em", "theta", "mtem"))
    s.add_argument("--theta", type=parse_number)
    s.add_argument("--steps", type=int)
    s.add_argument("--paths", type=int)
    s.add_argument("--window", type=parse_number)
    s.add_argument("--initial", type=parse_number, nargs="+", help="constant initial value")

    k = sub.add_parser("check", help="sample the componentwise bound and truncation lemmas")
    common(k)
    k.add_argument("--samples", type=int)
    k.add_argument("--radius", type=parse_number)

    f = sub.add_parser("fit", help="fit the decay rate of V in a moments CSV")
    f.add_argument("csv", type=Path)
    f.add_argument("--window", type=parse_number, default=0.5)
    return parser


def config_from_args(args) -> ExperimentConfig:
    if args.config is not None:
        raw = json.loads(args.config.read_text(encoding="utf-8"))
        cfg = ExperimentConfig.from_dict(raw)
    else:
        cfg = ExperimentConfig()
    if args.preset:
        cfg.system = args.preset
    overrides = {"out": "out", "seed": "seed", "mbar": "m_bar", "scheme": "scheme",
                 "theta": "theta", "steps": "n_steps", "paths": "n_paths", "window": "window",
                 "p": "p", "epsilon": "epsilon", "samples": "samples", "radius": "radius",
                 "initial": "initial"}
    for arg, attr in overrides.items():
        val = getattr(args, arg, None)
        if val is not None:
            setattr(cfg, attr, str(val) if arg == "out" else val)
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            cols = read_csv(args.csv)
            fit = fit_log_linear(cols["t"], cols["V"], args.window)
            print(json.dumps({"rate": fit.rate, "stderr": fit.stderr, "n_points": fit.n_points}))
            return 0
        cfg = config_from_args(args)
        if args.command == "certify":
            res = resolve_system(cfg)
            scheme = build_scheme(cfg, res.system) if args.scheme else None
            report = {"system": res.system.name,
                      "certify": certify_section(res, cfg, scheme, res.system.tau_max / cfg.m_bar)}
        elif args.command == "check":
            report = run_check(cfg)
        else:
            report = simulate(cfg)
        clean = {k: v for k, v in report.items() if not k.startswith("_")}
        if cfg.out and args.command != "simulate":
            write_outputs(Path(cfg.out), clean)
        sys.stdout.write(render_text(clean))
        return 0
    except Exception as exc:  # noqa: BLE001 - any module error maps to a nonzero exit
        print(f"stabilab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

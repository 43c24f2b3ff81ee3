"""Command-line interface: read a JSON model, run one computation, write CSV.

Exit codes: 0 success, 1 a comparison row failed its tolerance, 2 the
command line or model file could not be parsed, 3 the model or a request
failed validation, 4 a numerical method failed. Failures print one JSON
line with the reason on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import asymptotics, exact, inversion, simulate, transforms
from .errors import NumericalError, ValidationError
from .model import (DefaultTimeDistribution, Group, LossDistribution, MultiGroupModel,
                    NonDefaultStream, PortfolioModel, validate)

COMMANDS = ("transform", "invert", "exact", "simulate", "asymptotics", "bound", "multigroup", "compare")
SCHEMA_VERSION = "1"
EXIT_OK, EXIT_COMPARE, EXIT_PARSE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3, 4


class ParseError(Exception):
    pass


# ---------------------------------------------------------------------------
# model files

def _loss(spec) -> LossDistribution:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ParseError("loss must be an object with a kind")
    kind = spec["kind"]
    if kind == "exponential":
        return LossDistribution.exponential(spec["rate"])
    if kind == "deterministic":
        return LossDistribution.deterministic(spec["value"])
    if kind == "erlang":
        return LossDistribution.erlang(spec["shape"], spec["rate"])
    raise ValidationError(f"unknown loss kind {kind!r}")


def _default_time(spec) -> DefaultTimeDistribution:
    kind = spec.get("kind")
    if kind == "exponential":
        return DefaultTimeDistribution.exponential(spec["rate"])
    if kind == "tabulated":
        return DefaultTimeDistribution.tabulated(spec["grid"], spec["density"])
    raise ValidationError(f"unknown default-time kind {kind!r}")


def model_from_dict(spec: dict):
    """PortfolioModel, or MultiGroupModel when the model object has ``groups``."""
    if not isinstance(spec, dict):
        raise ParseError("model file must hold a JSON object")
    try:
        if "groups" in spec:
            groups = tuple(Group(int(g["count"]), float(g["lambda"]), float(g["r"]), _loss(g["loss"]))
                           for g in spec["groups"])
            return MultiGroupModel(groups)
        profile = spec.get("profile", "proportional")
        loss = _loss(spec["loss"])
        n_max = spec["n_max"]
        nd = None
        if "nondefault" in spec:
            nd_spec = spec["nondefault"]
            nd_loss = _loss(nd_spec["loss"]) if nd_spec.get("loss") is not None else None
            nd = NonDefaultStream(tuple(nd_spec["lambda"]), nd_loss)
        dt = _default_time(spec["default_time"]) if "default_time" in spec else None
        sigma2 = tuple(spec["sigma2"]) if "sigma2" in spec else None
        if profile == "proportional":
            return PortfolioModel.proportional(n_max, spec["lambda"], spec["r"], loss, sigma2=sigma2,
                                               nondefault=nd, default_time=dt)
        if profile == "general":
            return validate(PortfolioModel(n_max=n_max, lam=tuple(spec["lambda"]), r=tuple(spec["r"]),
                                           loss=loss, sigma2=sigma2, nondefault=nd, default_time=dt,
                                           profile="general"))
        raise ValidationError(f"unknown profile {profile!r}")
    except KeyError as exc:
        raise ParseError(f"model file is missing the field {exc.args[0]!r}") from None
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"malformed model field: {exc}") from None


def load_model(path):
    """Parse a model file; returns (model, sha256 of the canonical JSON)."""
    try:
        with open(path) as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read model file: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"model file is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    canonical = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return model_from_dict(spec), hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# grids and output

def parse_grid(text: Optional[str], name: str, integer: bool = False) -> List[float]:
    """'a,b,c' or 'start:stop:count'; must be nonempty and sorted."""
    if text is None:
        raise ValidationError(f"missing {name} grid")
    text = text.strip()
    if not text:
        raise ValidationError("empty grid")
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ParseError(f"range for {name} must be start:stop:count")
            count = int(parts[2])
            if count < 1:
                raise ValidationError("empty grid")
            vals = list(np.linspace(float(parts[0]), float(parts[1]), count))
        else:
            vals = [float(v) for v in text.split(",") if v.strip()]
    except ValidationError:
        raise
    except ValueError:
        raise ParseError(f"cannot parse the {name} grid {text!r}") from None
    if not vals:
        raise ValidationError("empty grid")
    if any(b < a for a, b in zip(vals[:-1], vals[1:])):
        raise ValidationError(f"{name} grid must be sorted")
    if integer:
        if any(v != int(v) for v in vals):
            raise ValidationError(f"{name} grid must hold integers")
        return [int(v) for v in vals]
    return vals


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass
class Table:
    schema: str
    columns: Sequence[str]
    rows: List[list] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)
    summary: List[str] = field(default_factory=list)
    failed: bool = False

    def render(self, base_meta: Dict[str, str]) -> str:
        buf = io.StringIO()
        for k, v in {**base_meta, "schema": f"{self.schema}/{SCHEMA_VERSION}", **self.meta}.items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def read_csv(text: str):
    """(metadata, header, rows) of a CSV written by this tool; numbers come back as floats."""
    meta, lines = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            meta[k] = v
        else:
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    rows = []
    for row in reader:
        out = []
        for cell in row:
            try:
                out.append(float(cell))
            except ValueError:
                out.append(cell)
        rows.append(out)
    return meta, header, rows


# ---------------------------------------------------------------------------
# commands

def _portfolio(model) -> PortfolioModel:
    if not isinstance(model, PortfolioModel):
        raise ValidationError("this command needs a single-group model")
    return model


def _levels_arg(args, model) -> List[int]:
    if args.n is None:
        return [model.n_max]
    return parse_grid(args.n, "n", integer=True)


def _settings(args) -> inversion.InversionSettings:
    kw = {"algorithm": args.algorithm}
    if args.m1 is not None:
        kw["m1"] = args.m1
    if args.m2 is not None:
        kw["m2"] = args.m2
    return inversion.InversionSettings(**kw)


def cmd_transform(model, args) -> Table:
    model = _portfolio(model)
    gammas = parse_grid(args.gamma, "gamma")
    theta = args.theta
    levels = _levels_arg(args, model)
    tab = Table("transform", ["n", "gamma", "theta", "psi"])
    for n in levels:
        vals = np.atleast_1d(inversion.ruin_transform(model, n)(np.array(gammas), theta))
        for g, v in zip(gammas, vals):
            tab.rows.append([n, g, theta, float(np.real(v))])
    return tab


def cmd_invert(model, args) -> Table:
    model = _portfolio(model)
    us = parse_grid(args.u, "u")
    levels = _levels_arg(args, model)
    settings = _settings(args)
    if args.theta is not None and args.theta > 0:
        tab = Table("invert-exp", ["n", "u", "theta", "p", "raw", "error_estimate"])
        for n in levels:
            cont = settings.algorithm == "talbot"
            f = inversion.ruin_transform(model, n, continuation=cont)
            for u in us:
                res = inversion.invert_in_u_detail(lambda g: f(g, args.theta), u, settings)
                tab.rows.append([n, u, args.theta, res.value, res.raw.real, res.error_estimate])
        return tab
    ts = parse_grid(args.t, "t")
    if settings.algorithm != "euler":
        raise ValidationError("fixed-horizon inversion runs with Euler summation in t")
    tab = Table("invert", ["n", "u", "t", "p", "raw", "error_estimate"])
    for n in levels:
        f = inversion.ruin_transform(model, n)
        for u in us:
            for t in ts:
                if t == 0:
                    tab.rows.append([n, u, t, 0.0, 0.0, 0.0])
                    continue
                res = inversion.invert_in_u_t_detail(f, u, t)
                tab.rows.append([n, u, t, res.value, res.raw.real, res.error_estimate])
    return tab


def _exact_grids(model, levels, us, ts, args):
    grid = exact.default_grid(model, max(us), max(ts), args.n_u, args.n_t)
    return exact.pn_levels(model, max(levels), grid)


def cmd_exact(model, args) -> Table:
    model = _portfolio(model)
    us = parse_grid(args.u, "u")
    ts = parse_grid(args.t, "t")
    levels = _levels_arg(args, model)
    if max(ts) <= 0:
        raise ValidationError("the t grid needs a positive entry")
    grids = _exact_grids(model, levels, us, ts, args)
    tab = Table("exact", ["u", "t"] + [f"p_{n}" for n in levels])
    for u in us:
        for t in ts:
            tab.rows.append([u, t] + [grids[n - 1].at(u, t) for n in levels])
    errs = [grids[n - 1].error_estimate for n in levels]
    tab.meta["error_estimate"] = _fmt(max(errs))
    flags = sorted({f for n in levels for f in grids[n - 1].flags})
    tab.meta["flags"] = ",".join(flags) if flags else "none"
    tab.summary.append(f"levels {levels[0]}..{levels[-1]}, Richardson error estimate {max(errs):.3g}")
    return tab


def cmd_simulate(model, args) -> Table:
    model = _portfolio(model)
    us = parse_grid(args.u, "u")
    ts = parse_grid(args.t, "t")
    levels = _levels_arg(args, model)
    if args.N is None or args.N < 1:
        raise ValidationError("simulate needs --N >= 1")
    tab = Table("simulate", list(simulate.RuinEstimate.CSV_FIELDS))
    for n in levels:
        for u in us:
            for t in ts:
                if args.method == "is":
                    est = simulate.simulate_is(model, n, u, t, args.N, args.seed, args.workers)
                else:
                    est = simulate.simulate_direct(model, n, u, t, args.N, args.seed, args.workers)
                tab.rows.append(est.csv_row(n, u, t))
    return tab


def cmd_asymptotics(model, args) -> Table:
    model = _portfolio(model)
    if args.u is None:
        raise ValidationError("asymptotics needs --u")
    u = parse_grid(args.u, "u")[0]
    horizon = math.inf if args.t is None else parse_grid(args.t, "t")[-1]
    rep = asymptotics.decay_rate(model, u, horizon)
    if args.s is not None:
        s_grid = parse_grid(args.s, "s")
    else:
        top = horizon if math.isfinite(horizon) else 10.0
        s_grid = list(np.linspace(0.0, top, 201))
    tab = Table("asymptotics", ["s", "alpha_star", "rate"])
    for res in asymptotics.rate_curve(model, u, s_grid):
        tab.rows.append([res.s, res.alpha_star, res.rate])
    tab.meta.update({"u": _fmt(u), "horizon": _fmt(horizon), "t_star": _fmt(rep.t_star),
                     "rate_at_t_star": _fmt(rep.rate), "alpha_star_sup": _fmt(rep.alpha_star_sup),
                     "flags": ",".join(rep.endpoint_flags) or "none"})
    tab.summary.append(f"t* = {rep.t_star:.6g}, I(t*) = {rep.rate:.6g}, M = {rep.alpha_star_sup:.6g}")
    return tab


def cmd_bound(model, args) -> Table:
    model = _portfolio(model)
    us = parse_grid(args.u, "u")
    levels = _levels_arg(args, model)
    tab = Table("bound", ["n", "u", "gamma_n", "bound", "hypothesis_ok"])
    for n in levels:
        g = asymptotics.lundberg_gamma(model, n)
        for u in us:
            b, ok = asymptotics.lundberg_bound(model, n, u)
            tab.rows.append([n, u, g, b, ok])
    return tab


def cmd_multigroup(model, args) -> Table:
    if not isinstance(model, MultiGroupModel):
        raise ValidationError("multigroup needs a model with groups")
    gammas = parse_grid(args.gamma, "gamma")
    counts = model.counts if args.counts is None else tuple(parse_grid(args.counts, "counts", integer=True))
    vals = np.atleast_1d(transforms.psi_multigroup(model, np.array(gammas), args.theta, counts))
    tab = Table("multigroup", ["gamma", "theta", "psi"])
    for g, v in zip(gammas, vals):
        tab.rows.append([g, args.theta, float(np.real(v))])
    tab.meta["counts"] = " ".join(str(c) for c in counts)
    return tab


_TOL_INV_EXACT = 1e-3


def cmd_compare(model, args) -> Table:
    model = _portfolio(model)
    methods = [m.strip() for m in (args.methods or "").split(",") if m.strip()]
    if len(methods) != 2 or any(m not in ("exact", "inversion", "direct", "is") for m in methods):
        raise ValidationError("compare needs two of exact, inversion, direct, is")
    us = parse_grid(args.u, "u")
    ts = parse_grid(args.t, "t")
    levels = _levels_arg(args, model)
    if "exact" in methods:
        exact._require_plain(model)
        grids = _exact_grids(model, levels, us, ts, args)
    sims = [m for m in methods if m in ("direct", "is")]
    if sims and (args.N is None or args.N < 1):
        raise ValidationError("simulation methods need --N >= 1")
    tab = Table("compare", ["n", "u", "t", "method_a", "value_a", "method_b", "value_b",
                            "abs_diff", "tolerance", "pass"])

    def value(method, n, u, t):
        if method == "exact":
            return grids[n - 1].at(u, t), None
        if method == "inversion":
            return inversion.ruin_probability(model, u, t, n), None
        run = simulate.simulate_is if method == "is" else simulate.simulate_direct
        est = run(model, n, u, t, args.N, args.seed, args.workers)
        return est.estimate, est.std_error

    for n in levels:
        for u in us:
            for t in ts:
                (va, sa), (vb, sb) = (value(m, n, u, t) for m in methods)
                if sa is None and sb is None:
                    tol = _TOL_INV_EXACT
                else:
                    tol = 3.0 * math.hypot(sa or 0.0, sb or 0.0)
                diff = abs(va - vb)
                ok = diff <= tol
                tab.failed |= not ok
                tab.rows.append([n, u, t, methods[0], va, methods[1], vb, diff, tol, ok])
    passed = sum(1 for r in tab.rows if r[-1])
    tab.summary.append(f"{passed}/{len(tab.rows)} probe points within tolerance")
    return tab


HANDLERS = {
    "transform": cmd_transform, "invert": cmd_invert, "exact": cmd_exact, "simulate": cmd_simulate,
    "asymptotics": cmd_asymptotics, "bound": cmd_bound, "multigroup": cmd_multigroup,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParseError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="transient-ruin", description="Ruin probabilities for finite obligor portfolios.")
    p.add_argument("--model", required=True, help="JSON model file")
    p.add_argument("--command", required=True, choices=COMMANDS)
    p.add_argument("--out", help="CSV output path (default: standard output)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--n", help="levels, e.g. 4 or 1:10:10 or 1,2,4")
    p.add_argument("--gamma", help="gamma grid")
    p.add_argument("--theta", type=float, default=None, help="killing rate of the exponential clock")
    p.add_argument("--u", help="reserve grid")
    p.add_argument("--t", help="horizon grid")
    p.add_argument("--s", help="time grid for rate curves")
    p.add_argument("--N", type=int, help="Monte Carlo runs")
    p.add_argument("--method", choices=("direct", "is"), default="is")
    p.add_argument("--methods", help="two methods for compare, e.g. exact,inversion")
    p.add_argument("--counts", help="per-group counts for multigroup")
    p.add_argument("--algorithm", choices=("euler", "talbot"), default="euler")
    p.add_argument("--m1", type=int)
    p.add_argument("--m2", type=int)
    p.add_argument("--n-u", dest="n_u", type=int, default=512)
    p.add_argument("--n-t", dest="n_t", type=int, default=256)
    return p


def _fail(code: int, kind: str, reason: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "reason": reason}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        model, digest = load_model(args.model)
        if args.theta is None and args.command in ("transform", "multigroup"):
            args.theta = 0.0
        table = HANDLERS[args.command](model, args)
    except ParseError as exc:
        return _fail(EXIT_PARSE, "parse", str(exc))
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    except (NumericalError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    meta = {"model_sha256": digest, "command": args.command, "version": __version__}
    text = table.render(meta)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for line in table.summary:
        print(line, file=sys.stderr if not args.out else sys.stdout)
    return EXIT_COMPARE if table.failed else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

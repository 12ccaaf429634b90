"""Command-line entry point: ``quadmed {estimate,simulate,reproduce,oracle}``.

Every command accepts a flat ``key = value`` config file (``--config``) and
``--set key=value`` overrides; dedicated flags override both. The resolved
configuration is printed before anything runs.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataValidationError, read_csv, write_csv
from .dgp import SETTINGS, N_MC_FLOOR, DgpSpec, generate, load_fixtures, oracle_theta
from .estimators import (AIPWOptions, MQRTuning, OTROptions, QROptions, estimate_aipw,
                         estimate_mqr, estimate_otr, estimate_otr_prime, estimate_qr,
                         mediation_effects, repeat_median)
from .harness import reproduce_config, run_experiment, write_outputs
from .learners import LearnerSpec


class UsageError(Exception):
    pass


COMMON = {"seed": 0, "jobs": 1, "out": ".", "name": None}

DEFAULTS = {
    "estimate": {
        **COMMON,
        "data": None,
        "estimator.method": "mqr",
        "estimator.variant": None,
        "estimator.k_folds": 5,
        "estimator.repeats": 1,
        "estimator.level": 0.95,
        "estimator.eps": 0.01,
        "estimator.n_trees": 200,
        "estimator.min_leaf": 5,
        "estimator.lambda": None,
        "estimator.cv_folds": 5,
        "aipw.k_folds": 5,
        "aipw.n_trees": 200,
    },
    "simulate": {
        **COMMON,
        "dgp.setting": "S3",
        "dgp.n": 1000,
        "dgp.d1": None,
        "dgp.d2": None,
        "simulate.y_cross": False,
    },
    "reproduce": {
        **COMMON,
        "reproduce.table": None,
        "reproduce.scale": "desk",
        "reproduce.repetitions": None,
    },
    "oracle": {
        **COMMON,
        "dgp.setting": "S3",
        "dgp.d1": None,
        "dgp.d2": None,
        "oracle.n_mc": 1_000_000,
        "oracle.compare_fixture": False,
    },
}

# Types for keys whose default is None.
NULLABLE_TYPES = {"name": str, "data": str, "estimator.variant": str, "estimator.lambda": float,
                  "dgp.d1": int, "dgp.d2": int, "reproduce.table": str,
                  "reproduce.repetitions": int}

METHODS = ("qr", "mqr", "otr", "otr_prime")


def _coerce(key, raw, default):
    kind = type(default) if default is not None else NULLABLE_TYPES[key]
    text = str(raw).strip()
    if default is None and text.lower() in ("", "none", "null"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return kind(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def resolve_config(command: str, file_values: dict, overrides: dict) -> dict:
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} for '{command}'")
            cfg[key] = _coerce(key, raw, defaults[key])
    if cfg["jobs"] < 1:
        raise UsageError("jobs must be at least 1")
    if cfg["name"] is None:
        cfg["name"] = command
    return cfg


def format_config(cfg: dict) -> str:
    return "\n".join(f"{k} = {'none' if v is None else v}" for k, v in sorted(cfg.items()))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _dgp_spec(cfg, n):
    try:
        return DgpSpec(cfg["dgp.setting"], n, cfg["dgp.d1"], cfg["dgp.d2"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _theta10_estimator(cfg):
    method = cfg["estimator.method"]
    if method not in METHODS:
        raise UsageError(f"estimator.method must be one of {METHODS}, got {method!r}")
    k, level, eps = cfg["estimator.k_folds"], cfg["estimator.level"], cfg["estimator.eps"]
    spec = LearnerSpec().with_trees(cfg["estimator.n_trees"])
    spec = replace(spec, forest=replace(spec.forest, min_leaf=cfg["estimator.min_leaf"]))
    variant = cfg["estimator.variant"]
    if method in ("qr", "otr"):
        variant = variant or "QR2"
        if method == "qr" and variant not in ("QR1", "QR2"):
            raise UsageError(f"QR variant must be QR1 or QR2, got {variant!r}")
        opts = QROptions(variant=variant if method == "qr" else "QR2", pi=spec, mu=spec, p=spec,
                         tau=spec, eps=eps, level=level)
        fn = estimate_qr if method == "qr" else estimate_otr
        return lambda ds, seed: fn(ds, k, opts, seed)
    if method == "mqr":
        variant = variant or "MQR2"
        if variant not in ("MQR1", "MQR2"):
            raise UsageError(f"MQR variant must be MQR1 or MQR2, got {variant!r}")
        tuning = MQRTuning(variant=variant, lam=cfg["estimator.lambda"],
                           cv_folds=cfg["estimator.cv_folds"], eps=eps, level=level)
        return lambda ds, seed: estimate_mqr(ds, k, tuning, seed)
    opts = OTROptions(eps=eps, level=level)
    return lambda ds, seed: estimate_otr_prime(ds, k, opts, seed)


def cmd_estimate(cfg: dict) -> dict:
    if not cfg["data"]:
        raise UsageError("estimate needs a data CSV (positional argument or data = path)")
    ds = read_csv(cfg["data"])
    repeats, seed = cfg["estimator.repeats"], cfg["seed"]
    if repeats < 1:
        raise UsageError("estimator.repeats must be at least 1")
    level = cfg["estimator.level"]
    forest = LearnerSpec().with_trees(cfg["aipw.n_trees"])
    aipw = AIPWOptions(pi=forest, outcome=forest, eps=cfg["estimator.eps"], level=level)
    k_aipw = cfg["aipw.k_folds"]
    est10 = _theta10_estimator(cfg)
    r10 = repeat_median(est10, ds, repeats, seed, jobs=cfg["jobs"])
    r11 = repeat_median(lambda d, s: estimate_aipw(d, 1, k_aipw, aipw, s), ds, repeats,
                        seed + 10_000, jobs=cfg["jobs"])
    r00 = repeat_median(lambda d, s: estimate_aipw(d, 0, k_aipw, aipw, s), ds, repeats,
                        seed + 20_000, jobs=cfg["jobs"])
    report = mediation_effects(r10, r11, r00, level)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    (out / f"{cfg['name']}.effects.json").write_text(json.dumps(payload, indent=2) + "\n",
                                                      encoding="utf-8")
    table = effects_table(report)
    (out / f"{cfg['name']}.effects.md").write_text(table, encoding="utf-8")
    print(table)
    return payload


def effects_table(report) -> str:
    lines = ["| Quantity | Estimate | SE | CI low | CI high | p-value |", "|---|---|---|---|---|---|"]
    for label, r in (("theta_10", report.theta_10), ("theta_11", report.theta_11),
                     ("theta_00", report.theta_00)):
        lines.append(f"| {label} ({r.method_tag}) | {r.theta_hat:.3f} | {r.se:.3f} | "
                     f"{r.ci_low:.3f} | {r.ci_high:.3f} | |")
    for label, c in (("NDE", report.nde), ("NIE", report.nie), ("ATE", report.ate)):
        lines.append(f"| {label} | {c.estimate:.3f} | {c.se:.3f} | {c.ci[0]:.3f} | "
                     f"{c.ci[1]:.3f} | {c.p_value:.3g} |")
    prop = report.mediation_proportion
    lines.append("")
    lines.append("Mediation proportion: " + ("undefined" if prop is None else f"{100 * prop:.2f}%"))
    lines.append(f"Contrast variances: {report.variance_note}")
    return "\n".join(lines) + "\n"


def cmd_simulate(cfg: dict) -> dict:
    if cfg["dgp.n"] < 1:
        raise UsageError("dgp.n must be positive")
    spec = _dgp_spec(cfg, cfg["dgp.n"])
    draw = generate(spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg['name']}.csv"
    write_csv(draw.dataset, path)
    paths = {"data": str(path)}
    if cfg["simulate.y_cross"]:
        side = out / f"{cfg['name']}.y_cross.csv"
        side.write_text("y_cross\n" + "".join(f"{v!r}\n" for v in draw.y_cross.tolist()),
                        encoding="utf-8")
        paths["y_cross"] = str(side)
    print(f"wrote {draw.dataset.n} rows to {path}")
    return paths


def cmd_reproduce(cfg: dict) -> dict:
    table, scale = cfg["reproduce.table"], cfg["reproduce.scale"]
    if table not in ("t1", "t2", "t3"):
        raise UsageError(f"unknown table {table!r}; choose t1, t2 or t3")
    if scale not in ("desk", "paper"):
        raise UsageError(f"unknown scale {scale!r}; choose desk or paper")
    config = reproduce_config(table, scale, cfg["seed"])
    if cfg["reproduce.repetitions"] is not None:
        config = replace(config, repetitions=cfg["reproduce.repetitions"])
    result = run_experiment(config, jobs=cfg["jobs"])
    name = cfg["name"] if cfg["name"] != "reproduce" else config.name
    paths = write_outputs(result, cfg["out"], name)
    print(paths["markdown"].read_text(encoding="utf-8"))
    return {k: str(v) for k, v in paths.items()}


def cmd_oracle(cfg: dict) -> dict:
    n_mc = cfg["oracle.n_mc"]
    if n_mc < N_MC_FLOOR:
        raise UsageError(f"oracle.n_mc must be at least {N_MC_FLOOR}, got {n_mc}")
    spec = _dgp_spec(cfg, 1)
    res = oracle_theta(spec, n_mc, cfg["seed"])
    print(f"theta = {res['theta']:.6f}  mc_se = {res['mc_se']:.6f}  (n_mc = {n_mc})")
    if cfg["oracle.compare_fixture"]:
        fixtures = load_fixtures()
        if spec.setting == "EX1":
            ref, ref_se = 1.0, 0.0
        elif spec.setting in fixtures:
            ref, ref_se = fixtures[spec.setting]["theta"], fixtures[spec.setting]["mc_se"]
        else:
            raise UsageError(f"no stored fixture for {spec.setting}")
        tol = 4 * float(np.hypot(res["mc_se"], ref_se))
        res["fixture"] = ref
        res["fixture_pass"] = abs(res["theta"] - ref) <= tol
        print(f"fixture {ref:.6f}: {'PASS' if res['fixture_pass'] else 'FAIL'} "
              f"(|diff| = {abs(res['theta'] - ref):.6f}, tolerance = {tol:.6f})")
        if not res["fixture_pass"]:
            raise RuntimeError("oracle value disagrees with the stored fixture")
    return res


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "reproduce": cmd_reproduce,
            "oracle": cmd_oracle}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quadmed", description="Cross-world mediation estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--name", help="output file stem")
        return p

    p = common(sub.add_parser("estimate", help="estimate NDE/NIE from a CSV"))
    p.add_argument("data", nargs="?")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--variant")
    p.add_argument("--repeats", type=int)
    p.add_argument("--k-folds", type=int)

    p = common(sub.add_parser("simulate", help="write a simulated dataset"))
    p.add_argument("--setting")
    p.add_argument("--n", type=int)
    p.add_argument("--d1", type=int)
    p.add_argument("--d2", type=int)
    p.add_argument("--y-cross", action="store_true", default=None,
                   help="also write the cross-world outcome")

    p = common(sub.add_parser("reproduce", help="rerun a simulation table"))
    p.add_argument("table", nargs="?")
    p.add_argument("scale", nargs="?")
    p.add_argument("--repetitions", type=int)

    p = common(sub.add_parser("oracle", help="Monte Carlo ground truth"))
    p.add_argument("--setting")
    p.add_argument("--d1", type=int)
    p.add_argument("--d2", type=int)
    p.add_argument("--n-mc", type=int)
    p.add_argument("--compare-fixture", action="store_true", default=None)
    return parser


FLAG_KEYS = {
    "seed": "seed", "jobs": "jobs", "out": "out", "name": "name", "data": "data",
    "method": "estimator.method", "variant": "estimator.variant",
    "repeats": "estimator.repeats", "k_folds": "estimator.k_folds",
    "setting": "dgp.setting", "n": "dgp.n", "d1": "dgp.d1", "d2": "dgp.d2",
    "y_cross": "simulate.y_cross", "table": "reproduce.table", "scale": "reproduce.scale",
    "repetitions": "reproduce.repetitions", "n_mc": "oracle.n_mc",
    "compare_fixture": "oracle.compare_fixture",
}


def config_from_args(args) -> dict:
    file_values = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        file_values = parse_config_text(text, args.config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return resolve_config(args.command, file_values, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
    except UsageError as exc:
        print(f"quadmed: usage error: {exc}", file=sys.stderr)
        return 2
    print("# resolved config")
    print(format_config(cfg))
    print()
    sys.stdout.flush()
    try:
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"quadmed: usage error: {exc}", file=sys.stderr)
        return 2
    except DataValidationError as exc:
        print(f"quadmed: invalid data: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"quadmed: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Each command reads one JSON config (``schema_version`` 1), validates it, runs
and writes ``<command>.json`` and/or ``<command>.csv`` into ``--out``.

Exit codes: 0 success, 2 config error, 3 negative decision (not dominated,
equivalence rejected, lemma violations), 4 solver non-convergence, 1 other errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Callable

import jsonschema

from . import capacity, isi, sim
from .channel import ChannelProfile
from .errors import ConvergenceError, MolcapError
from .transmitter import ProductionFunction

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NEGATIVE, EXIT_NONCONVERGENCE = 0, 1, 2, 3, 4

CSV_HEADERS = {
    "bounds": ["c_or_delta", "bound_kind", "value_bits", "value_nats", "iterations", "gap", "runtime_ms"],
    "dominate": ["dominated", "mass", "residual", "q_len", "q"],
    "simulate": [
        "mode", "trials", "errors", "error_rate", "ci95_low", "ci95_high",
        "error_rate_ref", "chi2_pvalue", "ztest_pvalue", "verdict",
    ],
    "thm3": ["bound_kind", "value_bits", "value_nats", "iterations", "tv_gap", "ams_final_tv"],
    "lemma-check": ["trials", "violations", "invariant_failures", "max_deficit"],
}

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}

PRODUCTION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "params"],
    "properties": {
        "family": {"enum": ["affine", "affine_capped", "sqrt_offset", "piecewise_linear"]},
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "v": _NONNEG,
                "cap": _NONNEG,
                "c": _NONNEG,
                "knots": {
                    "type": "array",
                    "minItems": 2,
                    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": _NONNEG},
                },
            },
        },
    },
}

PROFILE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["coeffs"],
    "properties": {"coeffs": {"type": "array", "minItems": 1, "items": _NONNEG}},
}


def _schema(required: list[str], props: dict[str, Any]) -> dict:
    return {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", *required],
        "properties": {"schema_version": {"const": 1}, **props},
    }


SCHEMAS = {
    "bounds": _schema(
        ["p0"],
        {
            "production": PRODUCTION_SCHEMA,
            "p0": _POS,
            "bounds": {"type": "array", "items": {"enum": ["thm1", "thm2"]}, "uniqueItems": True},
            "sweep_c": {"type": "array", "items": _NONNEG},
            "grid_size": {"type": "integer", "minimum": 2},
            "tol": _POS,
            "x_max": _POS,
            "s_max": _POS,
            "seed": _SEED,
        },
    ),
    "dominate": _schema(
        ["p", "p_tilde"],
        {"p": PROFILE_SCHEMA, "p_tilde": PROFILE_SCHEMA, "tol_q": _POS, "seed": _SEED},
    ),
    "simulate": _schema(
        ["mode", "production", "p", "codebook", "trials", "seed"],
        {
            "mode": {"enum": ["error_rate", "precode", "thin"]},
            "production": PRODUCTION_SCHEMA,
            "p": PROFILE_SCHEMA,
            "p_tilde": PROFILE_SCHEMA,
            "codebook": {
                "oneOf": [
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["n", "M", "level"],
                        "properties": {
                            "n": {"type": "integer", "minimum": 1},
                            "M": {"type": "integer", "minimum": 1},
                            "level": _NONNEG,
                            "p_on": {"type": "number", "minimum": 0, "maximum": 1},
                        },
                    },
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["codewords"],
                        "properties": {
                            "codewords": {
                                "type": "array",
                                "minItems": 1,
                                "items": {"type": "array", "minItems": 1, "items": _NONNEG},
                            },
                        },
                    },
                ]
            },
            "trials": {"type": "integer", "minimum": 1},
            "paired": {"type": "boolean"},
            "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "chunk_size": {"type": "integer", "minimum": 1},
            "workers": {"type": "integer", "minimum": 1},
            "seed": _SEED,
        },
    ),
    "thm3": _schema(
        ["production", "p0", "policy"],
        {
            "production": PRODUCTION_SCHEMA,
            "p0": _POS,
            "policy": {
                "oneOf": [
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "n_states"],
                        "properties": {
                            "kind": {"enum": ["on_off", "full_release"]},
                            "n_states": {"type": "integer", "minimum": 1},
                            "p_release": {"type": "number", "minimum": 0, "maximum": 1},
                        },
                    },
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "state_grid", "release_fractions", "cond_pmf"],
                        "properties": {
                            "kind": {"const": "explicit"},
                            "state_grid": {"type": "array", "minItems": 1, "items": _NONNEG},
                            "release_fractions": {"type": "array", "minItems": 1, "items": _NONNEG},
                            "cond_pmf": {"type": "array", "items": {"type": "array", "items": _NONNEG}},
                        },
                    },
                ]
            },
            "tol_tv": _POS,
            "max_iter": {"type": "integer", "minimum": 1},
            "ams_n": {"type": "integer", "minimum": 0},
            "compare_thm1": {"type": "boolean"},
            "grid_size": {"type": "integer", "minimum": 2},
            "seed": _SEED,
        },
    ),
    "lemma-check": _schema(
        ["trials", "seed"],
        {
            "trials": {"type": "integer", "minimum": 1},
            "length": {"type": "integer", "minimum": 1},
            "families": {
                "type": "array",
                "minItems": 1,
                "items": {"enum": list(isi.CONCAVE_FAMILIES)},
            },
            "max_filter_len": {"type": "integer", "minimum": 1},
            "production": PRODUCTION_SCHEMA,
            "require_concave": {"type": "boolean"},
            "seed": _SEED,
        },
    ),
}


class ConfigError(Exception):
    pass


class Outcome:
    """What a command produced: JSON payload, CSV rows and the exit code."""

    def __init__(self, payload: Any, rows: list[list[Any]], code: int = EXIT_OK):
        self.payload = payload
        self.rows = rows
        self.code = code


def load_config(path: str, command: str, seed: int | None = None) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        cfg["seed"] = seed
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    return cfg


def _production(cfg: dict) -> ProductionFunction:
    try:
        return ProductionFunction.from_dict(cfg)
    except ValueError as exc:
        raise ConfigError(f"invalid production function: {exc}") from exc


def _profile(cfg: dict) -> ChannelProfile:
    try:
        return ChannelProfile.from_dict(cfg)
    except ValueError as exc:
        raise ConfigError(f"invalid channel profile: {exc}") from exc


def _timed(fn: Callable, *args, **kwargs):
    t0 = time.perf_counter()
    rep = fn(*args, **kwargs)
    ms = (time.perf_counter() - t0) * 1e3
    for r in rep if isinstance(rep, tuple) else (rep,):
        r.runtime_ms = ms / (len(rep) if isinstance(rep, tuple) else 1)
    return rep


def _bound_row(rep: capacity.BoundReport) -> list[Any]:
    return [
        rep.constraint_c, rep.bound_kind, rep.value_bits, rep.value, rep.iterations,
        rep.final_gap, round(rep.runtime_ms, 3),
    ]


def cmd_bounds(cfg: dict, workers: int = 1) -> Outcome:
    p0 = cfg["p0"]
    grid = cfg.get("grid_size", capacity.DEFAULT_GRID)
    tol = cfg.get("tol", capacity.DEFAULT_TOL)
    x_max = cfg.get("x_max")
    reports: list[capacity.BoundReport] = []
    for c in cfg.get("sweep_c", []):
        reports.append(_timed(capacity.ba_peak, c, p0, grid, tol))
        reports.append(_timed(capacity.ba_avg, c, p0, x_max, grid, tol))
    if "production" in cfg:
        f = _production(cfg["production"])
        kinds = cfg.get("bounds", ["thm1", "thm2"] if not math.isfinite(f.phi) else ["thm1"])
        if "thm1" in kinds:
            reports.extend(_timed(capacity.thm1_bounds, f, p0, grid, tol, x_max, cfg.get("s_max")))
        if "thm2" in kinds:
            reports.append(_timed(capacity.thm2_bound, f, p0, grid, tol, x_max))
    elif not cfg.get("sweep_c"):
        raise ConfigError("bounds needs a production function or a sweep_c list")
    return Outcome({"reports": [r.to_dict() for r in reports]}, [_bound_row(r) for r in reports])


def cmd_dominate(cfg: dict, workers: int = 1) -> Outcome:
    p, pt = _profile(cfg["p"]), _profile(cfg["p_tilde"])
    if p.is_degenerate:
        raise ConfigError("p must have p_0 > 0")
    cert = isi.solve_domination(p, pt, cfg.get("tol_q", isi.TOL_Q))
    if cert is None:
        return Outcome({"dominated": False, "certificate": None}, [[False, "", "", "", ""]], EXIT_NEGATIVE)
    row = [True, cert.mass, cert.residual, len(cert.q), " ".join(repr(v) for v in cert.q)]
    return Outcome({"dominated": True, "certificate": cert.to_dict()}, [row])


def _codebook(cfg: dict, f: ProductionFunction, seed: int) -> sim.Codebook:
    spec = cfg["codebook"]
    if "codewords" in spec:
        lengths = {len(c) for c in spec["codewords"]}
        if len(lengths) != 1:
            raise ConfigError("codewords must all have the same length")
        return sim.Codebook.from_codewords(spec["codewords"])
    code_seed = sim.rngmod.child_sequences(seed, 2)[1]
    return sim.build_onoff_codebook(f, spec["n"], spec["M"], spec["level"], code_seed, spec.get("p_on", 0.5))


def cmd_simulate(cfg: dict, workers: int = 1) -> Outcome:
    f = _production(cfg["production"])
    p = _profile(cfg["p"])
    seed = cfg["seed"]
    workers = cfg.get("workers", workers)
    chunk = cfg.get("chunk_size", sim.DEFAULT_CHUNK)
    cb = _codebook(cfg, f, seed)
    run_seed = sim.rngmod.child_sequences(seed, 2)[0]
    mode = cfg["mode"]
    if mode == "error_rate":
        res = sim.error_rate(f, p, cb, cfg["trials"], run_seed, chunk, workers)
        summary = res.to_dict()
        outcomes = summary.pop("chunk_errors")
        row = [mode, res.trials, res.errors, res.error_rate, res.ci95_low, res.ci95_high, "", "", "", ""]
        code = EXIT_OK
    else:
        if "p_tilde" not in cfg:
            raise ConfigError(f"mode {mode} needs p_tilde")
        pt = _profile(cfg["p_tilde"])
        res = sim.precoded_equivalence_test(
            f, p, pt, cb, cfg["trials"], run_seed, mode, cfg.get("paired", False),
            cfg.get("alpha", sim.ALPHA), chunk, workers,
        )
        summary = res.to_dict()
        outcomes = summary.pop("chunk_errors")
        row = [
            mode, res.trials, res.errors, res.error_rate, res.ci95_low, res.ci95_high,
            res.error_rate_ref, res.chi2_pvalue, res.ztest_pvalue, res.verdict,
        ]
        code = EXIT_OK if res.verdict == "pass" else EXIT_NEGATIVE
    summary["codebook"] = {
        "size": cb.size, "length": cb.length, "warmup": cb.warmup,
        "rate": cb.rate, "asymptotic_rate": cb.asymptotic_rate,
    }
    record = sim.RunRecord(sim.config_hash(cfg), seed, mode, summary, outcomes)
    return Outcome(record.to_dict(), [row], code)


def _policy(cfg: dict, f: ProductionFunction) -> capacity.ReleasePolicy:
    spec = cfg["policy"]
    try:
        if spec["kind"] == "explicit":
            return capacity.ReleasePolicy.from_dict(spec)
        grid = capacity.state_grid(f, spec["n_states"])
        if spec["kind"] == "full_release":
            return capacity.ReleasePolicy.full_release(grid)
        return capacity.ReleasePolicy.on_off(grid, spec.get("p_release", 0.5))
    except ValueError as exc:
        raise ConfigError(f"invalid policy: {exc}") from exc


def cmd_thm3(cfg: dict, workers: int = 1) -> Outcome:
    f = _production(cfg["production"])
    p0 = cfg["p0"]
    policy = _policy(cfg, f)
    rep = capacity.thm3_lower(f, policy, p0, cfg.get("tol_tv", 1e-12), cfg.get("max_iter", 10**6))
    payload: dict[str, Any] = {"reports": [rep.to_dict()], "ams": None}
    ams_tv: Any = ""
    if cfg.get("ams_n", 0) > 0:
        if "seed" not in cfg:
            raise ConfigError("ams_n > 0 needs a seed")
        trace = sim.ams_empirical_check(f, policy, cfg["ams_n"], cfg["seed"])
        payload["ams"] = trace.to_dict()
        ams_tv = trace.tv[-1]
    rows = [[rep.bound_kind, rep.value_bits, rep.value, rep.iterations, rep.final_gap, ams_tv]]
    if cfg.get("compare_thm1", False):
        _, upper = capacity.thm1_bounds(f, p0, cfg.get("grid_size", capacity.DEFAULT_GRID))
        payload["reports"].append(upper.to_dict())
        rows.append([upper.bound_kind, upper.value_bits, upper.value, upper.iterations, upper.final_gap, ""])
    return Outcome(payload, rows)


def cmd_lemma_check(cfg: dict, workers: int = 1) -> Outcome:
    prod = _production(cfg["production"]) if "production" in cfg else None
    res = isi.lemma_a1_suite(
        cfg["seed"],
        cfg["trials"],
        cfg.get("length", 50),
        tuple(cfg.get("families", isi.CONCAVE_FAMILIES)),
        cfg.get("max_filter_len", 5),
        prod,
        cfg.get("require_concave", True),
    )
    row = [res.trials, res.violations, res.invariant_failures, res.max_deficit]
    return Outcome(res.to_dict(), [row], EXIT_OK if res.violations == 0 else EXIT_NEGATIVE)


COMMANDS: dict[str, Callable[..., Outcome]] = {
    "bounds": cmd_bounds,
    "dominate": cmd_dominate,
    "simulate": cmd_simulate,
    "thm3": cmd_thm3,
    "lemma-check": cmd_lemma_check,
}


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n"


def render_csv(command: str, rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADERS[command])
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molcap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--format", choices=["csv", "json", "both"], default="both")
        sp.add_argument("--workers", type=int, default=1, help="worker threads for Monte-Carlo chunks")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.command, args.seed)
        outcome = COMMANDS[args.command](cfg, workers=max(args.workers, 1))
    except (ConfigError, ValueError) as exc:
        # ValueError comes from parameter checks in the model constructors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        gap = "" if exc.last_gap is None else f" (last gap {exc.last_gap:.3e})"
        print(f"solver did not converge: {exc}{gap}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except MolcapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out)
    stem = args.command.replace("-", "_")
    if args.format in ("json", "both"):
        atomic_write(out / f"{stem}.json", render_json(outcome.payload))
    if args.format in ("csv", "both"):
        atomic_write(out / f"{stem}.csv", render_csv(args.command, outcome.rows))
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands
-----------
kernel-eval
    CSV table of kernel values.
estimate
    One JSON line per ``T``, plus an exponent fit line when requested.
verify
    Runs a verification suite and writes a JSON and a text report.

Exit codes: 0 success, 1 a verdict failed, 2 configuration error,
3 budget exceeded (partial report), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import exponents as ex
from .geometry import UT, Cube, GeometryError, Parallelepiped, SimplexSh
from .kernels import KernelError, TensorKernel, kernel_from_dict, ou_kernel
from .orthant import EstimationError, PursuitSpec, persistence_prob, pursuit_prob
from .sampler import SamplingError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC = 0, 1, 2, 3, 4

SUITES = ("d1-duality", "scaling", "parallelepiped", "d2-duality", "sup-bound", "pursuit", "formulas")

_NUM_LIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}

REGION_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"type": {"const": "cube"}, "side": {"type": "number", "exclusiveMinimum": 0}, "d": {"type": "integer", "minimum": 1}},
            "required": ["type"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"type": {"const": "parallelepiped"}, "a": {**_NUM_LIST, "items": {"type": "number", "exclusiveMinimum": 0}}},
            "required": ["type", "a"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"type": {"const": "simplex"}, "h": _NUM_LIST},
            "required": ["type", "h"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"type": {"const": "ut"}, "h": _NUM_LIST, "complement": {"type": "boolean"}},
            "required": ["type", "h"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"type": {"const": "pursuit"}, "step": {"type": "number", "exclusiveMinimum": 0}, "N": {"type": "integer", "minimum": 0}},
            "required": ["type", "step"],
            "additionalProperties": False,
        },
    ]
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "kernel": {"type": "object", "required": ["variant"]},
        "region": REGION_SCHEMA,
        "T": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "c": {"type": "number"},
        "method": {"enum": ["crude_mc", "sov_qmc", "bridge_mc", "particle", "field", "field_sov"]},
        "n": {"type": "integer", "minimum": 1},
        "n_points": {"type": "integer", "minimum": 1},
        "n_shifts": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "lattice": {"enum": ["cell", "log"]},
        "depth": {"type": "number", "exclusiveMinimum": 0},
        "fit": {
            "type": "object",
            "properties": {"psi": {"enum": list(ex.PSI_KINDS)}, "d": {"type": "integer", "minimum": 1}},
            "required": ["psi"],
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {"t": {"type": "array", "minItems": 1}, "s": {"type": "array", "minItems": 1}, "tau": _NUM_LIST},
            "additionalProperties": False,
        },
        "output": {"type": "string"},
    },
    "additionalProperties": False,
}

DEFAULTS = {"c": 0.0, "method": "sov_qmc", "n": 100_000, "n_points": 2**14, "n_shifts": 8, "seed": 0, "lattice": "cell", "depth": 2.5}


class ConfigError(ValueError):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config: {err}") from err
    validate(doc)
    return doc


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"schema violation at {list(err.absolute_path)}: {err.message}") from err


def resolve(doc: dict, seed: int | None = None) -> dict:
    """Config with defaults filled in; the seed flag overrides the file."""
    out = {**DEFAULTS, **doc}
    if seed is not None:
        out["seed"] = int(seed)
    out.pop("output", None)
    validate(out)
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=ex._json_default)


def write_once(path: Path, text: str) -> bool:
    """Write ``text`` unless ``path`` exists; returns whether it was written."""
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "x", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except FileExistsError:
        return False
    return True


def _emit(text: str, out_dir: str | None, name: str) -> None:
    sys.stdout.write(text)
    if out_dir is not None:
        path = Path(out_dir) / name
        if not write_once(path, text):
            print(f"{path} exists; left unchanged", file=sys.stderr)


# --------------------------------------------------------------------------
# kernel-eval


def cmd_kernel_eval(cfg: dict) -> str:
    """CSV of ``(t, s, B)`` rows, or ``(tau, B)`` for lag tables."""
    if "kernel" not in cfg or "eval" not in cfg:
        raise ConfigError("kernel-eval needs 'kernel' and 'eval'")
    k = kernel_from_dict(cfg["kernel"])
    ev = cfg["eval"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if "tau" in ev:
        if isinstance(k, TensorKernel) or not k.stationary:
            raise ConfigError("lag tables need a stationary one-dimensional kernel")
        tau = np.asarray(ev["tau"], float)
        w.writerow(["tau", "B"])
        for a, v in zip(tau, k.lag(tau)):
            w.writerow([repr(float(a)), repr(float(v))])
        return buf.getvalue()
    if "t" not in ev:
        raise ConfigError("eval needs 't' (and optionally 's') or 'tau'")
    t = np.asarray(ev["t"], float)
    s = np.asarray(ev.get("s", ev["t"]), float)
    if t.shape != s.shape:
        raise ConfigError("'t' and 's' must have the same shape")
    if isinstance(k, TensorKernel):
        t = t.reshape(len(t), k.d)
        s = s.reshape(len(s), k.d)
        vals = k.cov(t, s)
        cols = [f"t{i + 1}" for i in range(k.d)] + [f"s{i + 1}" for i in range(k.d)]
        w.writerow(cols + ["B"])
        for a, b, v in zip(t, s, vals):
            w.writerow([repr(float(x)) for x in (*a, *b, v)])
    else:
        vals = k.cov(t, s)
        w.writerow(["t", "s", "B"])
        for a, b, v in zip(t, s, vals):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# estimate


def _region(spec: dict, T: float):
    kind = spec["type"]
    if kind == "cube":
        return Cube(spec.get("side", 1.0) * T, spec.get("d", 2))
    if kind == "parallelepiped":
        return Parallelepiped(np.asarray(spec["a"], float) * T)
    if kind == "simplex":
        return SimplexSh(tuple(spec["h"]), T)
    if kind == "ut":
        return UT(T, tuple(spec["h"]), spec.get("complement", False))
    raise ConfigError(f"region {kind!r} is not a lattice region")


def _estimate_one(cfg: dict, T: float, j: int, threads: int):
    seed = cfg["seed"] + j
    region = cfg["region"]
    if region["type"] == "pursuit":
        base = kernel_from_dict(cfg["kernel"])
        spec = PursuitSpec(T, region["step"], base, region.get("N"))
        method = cfg["method"] if cfg["method"] in ("particle", "field", "field_sov") else "particle"
        kw = {"n_points": cfg["n_points"], "n_shifts": cfg["n_shifts"]} if method == "field_sov" else {}
        return pursuit_prob(spec, method, cfg["n"], seed, threads, **kw)
    if "delta" not in cfg:
        raise ConfigError("estimate needs 'delta'")
    K = kernel_from_dict(cfg["kernel"])
    return persistence_prob(
        K, _region(region, T), cfg["delta"], cfg["c"], cfg["method"], n=cfg["n"], seed=seed,
        n_points=cfg["n_points"], n_shifts=cfg["n_shifts"], threads=threads,
        lattice=cfg["lattice"], depth=cfg["depth"], T=T,
    )


def cmd_estimate(cfg: dict, threads: int = 1) -> str:
    """JSON lines: one estimate per ``T``, then the fit when ``fit`` is set."""
    for key in ("kernel", "region", "T"):
        if key not in cfg:
            raise ConfigError(f"estimate needs {key!r}")
    Ts = [float(t) for t in cfg["T"]]
    if "fit" in cfg and len(set(Ts)) < 3:
        raise ConfigError("need >= 3 T values")
    lines, pairs = [], []
    for j, T in enumerate(Ts):
        est = _estimate_one(cfg, T, j, threads)
        pairs.append((T, est))
        rec = est.record()
        rec["T"] = T
        lines.append(_dumps({**rec, "config": cfg}))
    if "fit" in cfg:
        f = ex.fit_exponent(pairs, cfg["fit"]["psi"], cfg["fit"].get("d", 1), cfg["c"])
        lines.append(_dumps({"fit": f.to_dict(), "config": cfg}))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# verify


def suite_steps(name: str, budget: ex.Budget) -> list:
    """Callables producing the relations of a suite, run in order."""
    K = TensorKernel((ou_kernel(), ou_kernel()))
    if name == "formulas":
        return [ex.formula_checks]
    if name == "d1-duality":
        return [lambda: ex.duality_check_d1(budget)]
    if name == "scaling":
        return [lambda: ex.scaling_check(K, Cube(1.0, 2), (1.0, 1.5, 2.0), budget)]
    if name == "parallelepiped":
        return [lambda: ex.parallelepiped_check(K, (2.0, 0.5), budget)]
    if name == "d2-duality":
        return [lambda: ex.duality_check_d2(0.5, 0.5, budget)]
    if name == "sup-bound":
        return [lambda: ex.sup_bound_check(budget)]
    if name == "pursuit":
        return [lambda: ex.pursuit_check(budget)]
    raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")


def cmd_verify(suite: str, tier: str, seed: int = 0, threads: int = 1) -> ex.Report:
    budget = ex.Budget.for_tier(tier, seed, threads)
    report = ex.Report(suite, tier)
    for step in suite_steps(suite, budget):
        try:
            report.relations.extend(step())
        except ex.BudgetExceeded as err:
            report.partial, report.error = True, str(err)
            break
    return report


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", help="output directory (files are write-once)")
    p = argparse.ArgumentParser(prog="persistlab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("kernel-eval", parents=[common], help="tabulate a kernel")
    sub.add_parser("estimate", parents=[common], help="persistence probabilities")
    v = sub.add_parser("verify", parents=[common], help="run a verification suite")
    v.add_argument("suite", choices=SUITES)
    v.add_argument("--tier", choices=("quick", "full"), default="quick")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print(_dumps({"error": "seed must be an unsigned 64-bit integer"}))
        return EXIT_CONFIG
    try:
        doc = load_config(args.config)
        out_dir = args.out or doc.get("output")
        if args.command == "verify":
            seed = args.seed if args.seed is not None else doc.get("seed", 0)
            report = cmd_verify(args.suite, args.tier, seed, args.threads)
            stem = f"verify_{args.suite}_{args.tier}_{seed}"
            text = report.to_text()
            sys.stdout.write(text)
            if out_dir is not None:
                for suffix, body in ((".json", report.to_json() + "\n"), (".txt", text)):
                    path = Path(out_dir) / (stem + suffix)
                    if not write_once(path, body):
                        print(f"{path} exists; left unchanged", file=sys.stderr)
            if report.partial:
                return EXIT_BUDGET
            return EXIT_OK if report.passed else EXIT_FAIL
        cfg = resolve(doc, args.seed)
        stem = f"{args.command}_{config_hash(cfg)}_{cfg['seed']}"
        if args.command == "kernel-eval":
            _emit(cmd_kernel_eval(cfg), out_dir, stem + ".csv")
        else:
            _emit(cmd_estimate(cfg, args.threads), out_dir, stem + ".jsonl")
        return EXIT_OK
    except (ConfigError, ex.FitError, KernelError, GeometryError) as err:
        print(_dumps({"error": str(err), "kind": "config"}))
        return EXIT_CONFIG
    except (EstimationError, SamplingError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(_dumps({"error": str(err), "kind": "numerical"}))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: generate / reconstruct / estimate-eta / sweep.

Configuration is a single JSON document; any leaf can be overridden on the
command line by dotted path (--set time.n_steps=128).  Unknown keys are
rejected, all defaults are resolved up front, and the resolved config is
embedded in every output file so runs stay reproducible from their
artifacts.  BAFOBS_WORKERS bounds the sweep worker pool.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, models
from .fem import FieldSpec, Mesh1D, ObservationProfile, assemble
from .observers import BackAndForth

DEFAULTS = {
    "equation": "schrodinger",
    "seed": 7,
    "theta": 1.0,
    "refine": 2,
    "n_policy": "auto",
    "geometry": {"length": 1.0, "n_cells": 64},
    "observation": {"a": 0.2, "b": 0.8, "smoothness": 2, "constant": None},
    "time": {"tau": None, "n_steps": None, "dt": None},
    "truth": None,          # per-equation default filled in at resolution
    "noise": {"amplitude": 0.0, "seed": 7},
    "eta": {"tol": 1e-6, "max_iter": 80, "seed": 11},
    "sweep": {
        "levels": [32, 64, 128, 256],
        "kappa": 1.0,
        "noise_eps": [0.0],
        "fit_model": "power-log2",
        "gates": {"slope_band": [0.8, 1.15], "monotone": True},
    },
    "output": {"directory": "."},
}

_FIELD_KEYS = {"kind", "coefficients", "amplitude", "center", "exponent"}


class ConfigError(ValueError):
    pass


def _check_keys(user: dict, schema: dict, path: str = ""):
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key == "truth":
            continue
        if key not in schema:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(schema[key], dict) and isinstance(value, dict):
            _check_keys(value, schema[key], where)


def _merge(base: dict, user: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_override(cfg: dict, item: str):
    if "=" not in item:
        raise ConfigError(f"override must look like path=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config path: {dotted}")
        node = node[part]
    leaf = parts[-1]
    known = leaf in node or (len(parts) == 1 and leaf == "truth") \
        or parts[0] == "truth"
    if not known:
        raise ConfigError(f"unknown config path: {dotted}")
    node[leaf] = value


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    user = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
    _check_keys(user, DEFAULTS)
    cfg = _merge(DEFAULTS, user)
    for item in overrides or []:
        _apply_override(cfg, item)
    return resolve_config(cfg)


def resolve_config(cfg: dict) -> dict:
    """Fill the equation-dependent defaults and validate the leaves."""
    eq = cfg["equation"]
    if eq not in ("schrodinger", "wave"):
        raise ConfigError(f"equation must be 'schrodinger' or 'wave', got {eq!r}")
    t = cfg["time"]
    if t["tau"] is None:
        t["tau"] = 1.0 if eq == "schrodinger" else 2.0
    if t["n_steps"] is None:
        if t["dt"] is not None:
            t["n_steps"] = max(1, round(t["tau"] / t["dt"]))
        else:
            h = cfg["geometry"]["length"] / cfg["geometry"]["n_cells"]
            t["n_steps"] = max(1, round(t["tau"] / h))
    if eq == "wave":
        t["n_steps"] = max(t["n_steps"], 2)
    t["dt"] = t["tau"] / t["n_steps"]
    if cfg["truth"] is None:
        if eq == "schrodinger":
            cfg["truth"] = {"kind": "sine", "coefficients": [1.0, 0.5]}
        else:
            cfg["truth"] = {
                "position": {"kind": "sine", "coefficients": [1.0]},
                "velocity": {"kind": "sine", "coefficients": [0.0, 1.0]},
            }
    _validate_truth(cfg["truth"], eq)
    npol = cfg["n_policy"]
    if npol != "auto" and not isinstance(npol, int):
        raise ConfigError("n_policy must be 'auto' or an integer")
    return cfg


def _validate_truth(truth, equation: str):
    if truth in (None, "none"):
        return
    if equation == "wave":
        if not isinstance(truth, dict) or set(truth) != {"position", "velocity"}:
            raise ConfigError("wave truth needs exactly the keys position, velocity")
        for sub in truth.values():
            _validate_truth(sub, "schrodinger")
        return
    if not isinstance(truth, dict):
        raise ConfigError("truth must be a JSON object")
    unknown = set(truth) - _FIELD_KEYS
    if unknown:
        raise ConfigError(f"unknown truth keys: {sorted(unknown)}")


def _coeff(v) -> complex | float:
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, list) and len(v) == 2:
        return complex(v[0], v[1])
    raise ConfigError(f"coefficient must be a number or [re, im], got {v!r}")


def _field_from(cfg: dict, length: float) -> FieldSpec:
    kwargs = {"length": length}
    if "kind" in cfg:
        kwargs["kind"] = cfg["kind"]
    if "coefficients" in cfg:
        kwargs["coefficients"] = tuple(_coeff(v) for v in cfg["coefficients"])
    for key in ("amplitude", "center", "exponent"):
        if key in cfg:
            kwargs[key] = cfg[key]
    return FieldSpec(**kwargs)


def build_profile(cfg: dict) -> ObservationProfile:
    obs = cfg["observation"]
    if obs.get("constant") is not None:
        return ObservationProfile.constant(obs["constant"])
    return ObservationProfile(a=obs["a"], b=obs["b"], smoothness=obs["smoothness"])


def build_truth(cfg: dict):
    length = cfg["geometry"]["length"]
    truth = cfg["truth"]
    if truth in (None, "none"):
        return None
    if cfg["equation"] == "wave":
        return (_field_from(truth["position"], length),
                _field_from(truth["velocity"], length))
    return _field_from(truth, length)


def build_instance(cfg: dict) -> models.ProblemInstance:
    truth = build_truth(cfg)
    if truth is None:
        raise ConfigError("this command needs a truth field in the config")
    return models.ProblemInstance(
        equation=cfg["equation"],
        mesh=Mesh1D(n_cells=cfg["geometry"]["n_cells"],
                    length=cfg["geometry"]["length"]),
        profile=build_profile(cfg),
        tau=cfg["time"]["tau"],
        n_steps=cfg["time"]["n_steps"],
        truth=truth,
    )


def build_plan(cfg: dict) -> harness.SweepPlan:
    sw = cfg["sweep"]
    truth = build_truth(cfg)
    if truth is None:
        raise ConfigError("sweeps need a truth field in the config")
    return harness.SweepPlan(
        equation=cfg["equation"],
        levels=tuple(sw["levels"]),
        tau=cfg["time"]["tau"],
        truth=truth,
        profile=build_profile(cfg),
        kappa=sw["kappa"],
        length=cfg["geometry"]["length"],
        theta=cfg["theta"],
        refine=cfg["refine"],
        noise_eps=tuple(sw["noise_eps"]),
        noise_seed=cfg["noise"]["seed"],
        n_policy=cfg["n_policy"],
        eta_tol=cfg["eta"]["tol"],
        eta_max_iter=cfg["eta"]["max_iter"],
        eta_seed=cfg["eta"]["seed"],
        fit_model=sw["fit_model"],
    )


def _engine_from(cfg: dict) -> tuple[BackAndForth, dict]:
    mesh = Mesh1D(n_cells=cfg["geometry"]["n_cells"],
                  length=cfg["geometry"]["length"])
    ops = assemble(mesh, build_profile(cfg))
    engine = BackAndForth(cfg["equation"], ops, cfg["time"]["dt"],
                          cfg["time"]["n_steps"])
    return engine, {"mesh": mesh, "ops": ops}


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_generate(cfg: dict, out: str | None) -> int:
    instance = build_instance(cfg)
    noise = models.NoiseSpec(cfg["noise"]["amplitude"], cfg["noise"]["seed"])
    trace = models.generate_observation(instance, refine=cfg["refine"], noise=noise)
    path = Path(out) if out else _out_dir(cfg) / "trace.txt"
    models.write_trace(path, trace, instance, cfg["refine"], noise, config=cfg)
    print(json.dumps({"trace": str(path), "sha256": _sha256(path),
                      "rows": trace.n_steps + 1}))
    return 0


def _write_estimate(path: Path, estimate, cfg: dict):
    header = {"format": "bafobs-estimate-1",
              "equation": cfg["equation"],
              "complex": bool(np.iscomplexobj(getattr(estimate, "pos", estimate))),
              "config": cfg}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        if cfg["equation"] == "wave":
            fh.write(models._format_row(estimate.pos) + "\n")
            fh.write(models._format_row(estimate.vel) + "\n")
        else:
            fh.write(models._format_row(np.asarray(estimate)) + "\n")


def cmd_reconstruct(cfg: dict, trace_path: str) -> int:
    trace, header = models.read_trace(trace_path)
    expected = {"equation": cfg["equation"],
                "n_cells": cfg["geometry"]["n_cells"],
                "length": cfg["geometry"]["length"],
                "tau": cfg["time"]["tau"],
                "n_steps": cfg["time"]["n_steps"]}
    actual = {k: header.get(k) for k in expected}
    mismatched = {k: (expected[k], actual[k]) for k in expected
                  if not _close(expected[k], actual[k])}
    if mismatched:
        raise ConfigError(
            f"trace header does not match config: config side "
            f"{ {k: v[0] for k, v in mismatched.items()} }, trace side "
            f"{ {k: v[1] for k, v in mismatched.items()} }"
        )
    engine, parts = _engine_from(cfg)
    eta = engine.estimate_eta(cfg["eta"]["tol"], cfg["eta"]["max_iter"],
                              cfg["eta"]["seed"])
    npol = cfg["n_policy"]
    if npol == "auto":
        if not 0.0 < eta.value < 1.0:
            raise ConfigError(
                f"contraction not certified (eta_hat = {eta.value}); refusing "
                "automatic truncation"
            )
        result = engine.neumann_reconstruct(trace, eta_hat=eta.value,
                                            theta=cfg["theta"])
    else:
        result = engine.neumann_reconstruct(trace, n_terms=npol,
                                            eta_hat=eta.value)
    out = _out_dir(cfg)
    est_path = out / "estimate.txt"
    _write_estimate(est_path, result.estimate, cfg)
    diagnostics = {
        "eta_hat": eta.value,
        "eta_converged": eta.converged,
        "n_used": result.n_used,
        "increment_norms": list(result.increment_norms),
        "step_count": result.step_count,
        "config": cfg,
    }
    truth = build_truth(cfg)
    if truth is not None:
        diagnostics["error_x"] = harness.reconstruction_error(
            cfg["equation"], truth, result.estimate, parts["ops"])
    diag_path = out / "diagnostics.json"
    diag_path.write_text(json.dumps(diagnostics, indent=2), encoding="utf-8")
    print(json.dumps({"estimate": str(est_path), "diagnostics": str(diag_path),
                      "n_used": result.n_used, "eta_hat": eta.value}))
    return 0


def _close(a, b) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        try:
            return abs(float(a) - float(b)) <= 1e-12 * max(1.0, abs(float(a)))
        except (TypeError, ValueError):
            return False
    return a == b


def cmd_estimate_eta(cfg: dict) -> int:
    engine, _ = _engine_from(cfg)
    eta = engine.estimate_eta(cfg["eta"]["tol"], cfg["eta"]["max_iter"],
                              cfg["eta"]["seed"])
    print(json.dumps({"eta_hat": eta.value, "converged": eta.converged,
                      "iterations": eta.iterations}))
    return 0


def cmd_sweep(cfg: dict) -> int:
    plan = build_plan(cfg)
    rows = harness.run_sweep(plan)
    gates_cfg = cfg["sweep"]["gates"]
    fit = None
    fit_error = None
    try:
        fit = harness.fit_rate(rows, model=plan.fit_model, theta=plan.theta)
    except ValueError as exc:
        fit_error = str(exc)
    noise_table = None
    if len(plan.noise_eps) > 1 and 0.0 in plan.noise_eps:
        noise_table = harness.build_noise_table(rows, plan.tau)
    gates = harness.evaluate_gates(
        rows, fit, slope_band=tuple(gates_cfg["slope_band"]),
        require_monotone=gates_cfg["monotone"])
    if fit_error is not None:
        gates["rate_fit_possible"] = False
    out = _out_dir(cfg)
    csv_path = out / "sweep.csv"
    csv_path.write_text(harness.rows_to_csv(rows, plan.fit_model, config=cfg),
                        encoding="utf-8")
    summary = harness.summary_dict(plan, rows, fit, gates, config=cfg,
                                   noise_table=noise_table)
    if fit_error is not None:
        summary["fit_error"] = fit_error
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps({"csv": str(csv_path), "summary": str(summary_path),
                      "gates": gates}))
    return 0 if all(gates.values()) else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bafobs",
        description="Back-and-forth observer reconstruction of PDE initial states",
    )
    parser.add_argument("--config", help="path to a JSON config document")
    parser.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        dest="overrides",
                        help="override a config leaf by dotted path")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("generate", help="write a synthetic observation trace")
    gen.add_argument("--out", help="trace file path")
    rec = sub.add_parser("reconstruct", help="reconstruct the initial state from a trace")
    rec.add_argument("--trace", required=True, help="trace file to invert")
    sub.add_parser("estimate-eta", help="estimate the round-trip contraction factor")
    sub.add_parser("sweep", help="run a convergence sweep and emit CSV + summary")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.trace)
        if args.command == "estimate-eta":
            return cmd_estimate_eta(cfg)
        return cmd_sweep(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

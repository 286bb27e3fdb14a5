"""Batch command-line front end.

Every subcommand reads an optional JSON config (unknown keys are rejected),
applies flag overrides, writes ``resolved_config.json`` (which can be fed
back through ``--config`` to reproduce the run) and its artifacts into
``--out``.

Exit codes: 0 success, 2 configuration or input error, 3 estimation error,
4 weight-solver error, 5 bootstrap error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import pandas as pd

from .classification import classify_markets, load_presence
from .did import (
    DidSpec,
    Differencing,
    TrendMode,
    aggregate_event_effects,
    did_first_difference_event_study,
    did_fixed_effects,
    did_with_trends,
    percent_transform,
)
from .errors import BootstrapError, MergerRetroError, PanelError, WeightSolverError
from .estimator import StructuralSpec, estimate_structural
from .panel import PanelDataset, load_panel
from .report import to_jsonable
from .sgmm import BootstrapConfig, SgmmConfig, bootstrap_inference, estimate_synthetic_gmm
from .simulator import DgpConfig, run_monte_carlo, simulate_panel

__all__ = ["ConfigError", "main", "resolve_config"]

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_WEIGHTS, EXIT_BOOTSTRAP = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    """Invalid configuration file or flag combination."""


# ------------------------------------------------------------------ config
def _check_keys(section: Mapping[str, Any], allowed, where: str) -> None:
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _dataclass_section(cls, section: Mapping[str, Any] | None, where: str) -> dict:
    section = dict(section or {})
    _check_keys(section, cls.__dataclass_fields__, where)
    return section


def _resolve_dgp(section: Mapping[str, Any] | None, seed: int, base: Mapping[str, Any] | None = None) -> dict:
    section = dict(section or {})
    if "seed" in section:
        raise ConfigError("set the seed at the top level of the config (or with --seed), not inside 'dgp'")
    merged = dict(base or {})
    if "params" in section and "params" in merged:
        section["params"] = {**merged["params"], **section["params"]}
    merged.update(section)
    cfg = DgpConfig.from_dict({**merged, "seed": seed})
    out = cfg.to_dict()
    out.pop("seed")
    return out


def _dgp(section: Mapping[str, Any], seed: int) -> DgpConfig:
    return DgpConfig.from_dict({**section, "seed": seed})


def _resolve_data(section: Mapping[str, Any] | None, seed: int) -> dict:
    section = dict(section or {"dgp": {}})
    if "panel" in section:
        _check_keys(section, {"panel", "schema", "merger_quarter", "pre_window", "post_window"}, "data")
        if "merger_quarter" not in section:
            raise ConfigError("data.merger_quarter is required with data.panel")
        return {
            "panel": str(section["panel"]),
            "schema": section.get("schema") or {},
            "merger_quarter": int(section["merger_quarter"]),
            "pre_window": int(section.get("pre_window", 8)),
            "post_window": int(section.get("post_window", 8)),
        }
    _check_keys(section, {"dgp"}, "data")
    return {"dgp": _resolve_dgp(section["dgp"], seed)}


def _resolve_spec(cls, section, where: str) -> dict:
    spec = cls(**_dataclass_section(cls, section, where))
    if hasattr(spec, "to_dict"):
        return spec.to_dict()
    out = {}
    for name in cls.__dataclass_fields__:
        value = getattr(spec, name)
        out[name] = value.value if hasattr(value, "value") else list(value) if isinstance(value, tuple) else value
    return out


CASE2_PRESET = {
    "dgp": {"params": {"lambda_post": 0.3}, "n_treated": 20, "n_control": 60, "sigma_phi": 0.5},
    "estimators": ["fe_did", "structural"],
    "R": 100,
}
PRESETS = {"case2": CASE2_PRESET}

COMMAND_KEYS = {
    "simulate": {"dgp"},
    "classify": {"presence", "merging"},
    "did": {"data", "spec", "percent"},
    "structural": {"data", "spec"},
    "sgmm": {"data", "spec", "sgmm", "bootstrap", "dump_replicates"},
    "montecarlo": {"preset", "dgp", "estimators", "R", "truth"},
}


def resolve_config(command: str, raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict:
    """Fill defaults, apply flag overrides and validate one command's config.

    The result is JSON-serialisable and a fixed point: resolving it again
    returns it unchanged.
    """
    raw = copy.deepcopy(dict(raw))
    _check_keys(raw, COMMAND_KEYS[command] | {"seed", "threads"}, "config")
    seed = int(overrides.get("seed") if overrides.get("seed") is not None else raw.get("seed", 0))
    threads = int(overrides.get("threads") if overrides.get("threads") is not None else raw.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    out: dict[str, Any] = {"seed": seed, "threads": threads}

    if command == "simulate":
        out["dgp"] = _resolve_dgp(raw.get("dgp"), seed)
    elif command == "classify":
        if "presence" not in raw or "merging" not in raw:
            raise ConfigError("classify needs 'presence' (CSV path) and 'merging' (two carrier codes)")
        merging = list(raw["merging"])
        if len(merging) != 2:
            raise ConfigError("merging must list exactly two carrier codes")
        out.update(presence=str(raw["presence"]), merging=[str(c) for c in merging])
    elif command == "did":
        out["data"] = _resolve_data(raw.get("data"), seed)
        out["spec"] = _resolve_spec(DidSpec, raw.get("spec"), "spec")
        out["percent"] = bool(overrides.get("percent") or raw.get("percent", False))
    elif command in ("structural", "sgmm"):
        out["data"] = _resolve_data(raw.get("data"), seed)
        out["spec"] = _resolve_spec(StructuralSpec, raw.get("spec"), "spec")
        if command == "sgmm":
            sg = _dataclass_section(SgmmConfig, raw.get("sgmm"), "sgmm")
            if overrides.get("weights"):
                sg["weights"] = overrides["weights"]
            sg = SgmmConfig(**sg)
            out["sgmm"] = {"weights": sg.weights, "zeta": sg.zeta, "residualize": sg.residualize,
                           "outcome": sg.outcome}
            boot = raw.get("bootstrap")
            if boot is not None:
                boot = _dataclass_section(BootstrapConfig, boot, "bootstrap")
                if "seed" in boot:
                    raise ConfigError("bootstrap uses the top-level seed; remove bootstrap.seed")
                b = BootstrapConfig(**boot, seed=seed)
                boot = {"B": b.B, "resample": b.resample}
            out["bootstrap"] = boot
            out["dump_replicates"] = bool(raw.get("dump_replicates", False))
            if out["dump_replicates"] and boot is None:
                raise ConfigError("dump_replicates requires a bootstrap section")
    elif command == "montecarlo":
        preset_name = raw.get("preset")
        if preset_name is not None and preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS.get(preset_name, {})
        out["preset"] = preset_name
        out["dgp"] = _resolve_dgp(raw.get("dgp"), seed, base=preset.get("dgp"))
        estimators = raw.get("estimators", preset.get("estimators", ["fe_did", "structural"]))
        out["estimators"] = [e if isinstance(e, str) else dict(e) for e in estimators]
        out["R"] = int(raw.get("R", preset.get("R", 100)))
        if out["R"] < 2:
            raise ConfigError("R must be >= 2")
        out["truth"] = {str(k): float(v) for k, v in (raw.get("truth") or {}).items()}
    return out


# ----------------------------------------------------------------- helpers
def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(section: Mapping[str, Any], seed: int) -> PanelDataset:
    if "panel" in section:
        return load_panel(section["panel"], section["schema"], merger_quarter=section["merger_quarter"],
                          pre_window=section["pre_window"], post_window=section["post_window"])
    return simulate_panel(_dgp(section["dgp"], seed))


# ---------------------------------------------------------------- commands
def cmd_simulate(cfg: dict, out: Path) -> None:
    data = simulate_panel(_dgp(cfg["dgp"], cfg["seed"]))
    data.to_csv(out / "panel.csv")
    _write_json(out / "truth.json", {**data.metadata["truth"], "merger_quarter": data.plan.merger_quarter,
                                     "treated_markets": sorted(data.plan.treated_markets),
                                     "divergent_markets": data.metadata["divergent_markets"]})


def cmd_classify(cfg: dict, out: Path) -> None:
    labels = classify_markets(load_presence(cfg["presence"]), tuple(cfg["merging"]))
    frame = pd.DataFrame({"market": list(labels), "label": [lab.value for lab in labels.values()]})
    frame.to_csv(out / "labels.csv", index=False, lineterminator="\n")
    counts = frame["label"].value_counts().sort_index().to_dict()
    _write_json(out / "classification_summary.json", {"counts": counts, "merging": cfg["merging"]})


def cmd_did(cfg: dict, out: Path) -> None:
    data = _load_data(cfg["data"], cfg["seed"])
    spec = DidSpec(**cfg["spec"])
    if spec.differencing is Differencing.FIRST_DIFFERENCE:
        report = did_first_difference_event_study(data, spec)
        title = "First-difference event study"
    elif spec.trend_mode is not TrendMode.NONE:
        report = did_with_trends(data, spec)
        title = f"Trend-adjusted DiD ({spec.trend_mode.value} trends, {spec.trend_method.value})"
    else:
        report = did_fixed_effects(data, spec)
        title = "Fixed-effects DiD"
    payload = report.to_dict()
    table = report.to_table(title)
    event_names = [f"beta_{k}" for k in range(1, spec.event_horizon + 1)]
    if spec.differencing is Differencing.FIRST_DIFFERENCE:
        betas = np.array([report[n] for n in event_names])
        pd.DataFrame({"k": np.arange(1, spec.event_horizon + 1), "beta": betas,
                      "se": [report.se_of(n) for n in event_names]}).to_csv(
            out / "event_study.csv", index=False, float_format="%.17g", lineterminator="\n")
    if cfg["percent"]:
        percent = {n: percent_transform(b) for n, b in zip(report.names, report.coefficients)}
        payload["percent_effects"] = percent
        if spec.differencing is Differencing.FIRST_DIFFERENCE:
            est, se = aggregate_event_effects(betas, report.sub_vcov(event_names))
            payload["aggregate_percent_effect"] = {"estimate": 100 * est, "se": 100 * se}
            table += f"Weighted percent effect: {100 * est:.2f}% ({100 * se:.2f})\n"
    _write_json(out / "report.json", payload)
    (out / "table.txt").write_text(table, encoding="utf-8")


def _write_structural(est, out: Path, title: str) -> None:
    _write_json(out / "estimate.json", est.to_dict())
    (out / "table.txt").write_text(est.to_table(title), encoding="utf-8")


def cmd_structural(cfg: dict, out: Path) -> None:
    data = _load_data(cfg["data"], cfg["seed"])
    _write_structural(estimate_structural(data, StructuralSpec(**cfg["spec"])), out, "Structural estimates")


def cmd_sgmm(cfg: dict, out: Path) -> None:
    data = _load_data(cfg["data"], cfg["seed"])
    spec, sg = StructuralSpec(**cfg["spec"]), SgmmConfig(**cfg["sgmm"])
    est = estimate_synthetic_gmm(data, spec, sg)
    if cfg["bootstrap"] is not None:
        boot = bootstrap_inference(data, spec, BootstrapConfig(**cfg["bootstrap"], seed=cfg["seed"]), sg)
        est.bootstrap = boot.to_dict()
        if cfg["dump_replicates"]:
            boot.to_csv(out / "bootstrap_replicates.csv")
    if est.weights is not None:
        est.weights.to_csv(out / "weights.csv")
    _write_structural(est, out, "Synthetic GMM estimates" if sg.weights == "solved" else "Structural estimates")


def cmd_montecarlo(cfg: dict, out: Path) -> None:
    res = run_monte_carlo(_dgp(cfg["dgp"], cfg["seed"]), cfg["estimators"], cfg["R"],
                          truth_values=cfg["truth"] or None, n_jobs=cfg["threads"])
    _write_json(out / "summary.json", res.to_dict())
    res.summary.to_csv(out / "summary.csv", index=False, float_format="%.17g", lineterminator="\n")
    res.estimates.to_csv(out / "estimates.csv", index=False, float_format="%.17g", lineterminator="\n")


COMMANDS: dict[str, Callable[[dict, Path], None]] = {
    "simulate": cmd_simulate,
    "classify": cmd_classify,
    "did": cmd_did,
    "structural": cmd_structural,
    "sgmm": cmd_sgmm,
    "montecarlo": cmd_montecarlo,
}


# -------------------------------------------------------------------- main
def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker processes for montecarlo (default 1)")
    parser = argparse.ArgumentParser(prog="mergerretro", description="Merger retrospective estimators.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a merger panel")
    sub.add_parser("classify", parents=[common], help="label markets treated/control/excluded")
    did = sub.add_parser("did", parents=[common], help="difference-in-differences estimators")
    did.add_argument("--percent", action="store_true", help="add percent-transformed effects")
    sub.add_parser("structural", parents=[common], help="structural conduct/efficiency estimator")
    sg = sub.add_parser("sgmm", parents=[common], help="synthetic GMM with optional bootstrap")
    sg.add_argument("--weights", choices=["solved", "uniform"], help="override sgmm.weights")
    sub.add_parser("montecarlo", parents=[common], help="Monte Carlo experiments")
    return parser


def _fail(code: int, message: str) -> int:
    print(f"mergerretro: error: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    overrides = {"seed": args.seed, "threads": args.threads,
                 "percent": getattr(args, "percent", False), "weights": getattr(args, "weights", None)}
    try:
        raw = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
        cfg = resolve_config(args.command, raw, overrides)
    except (OSError, json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
        return _fail(EXIT_CONFIG, f"invalid configuration: {exc}")

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg)
    try:
        COMMANDS[args.command](cfg, out)
    except (PanelError, OSError) as exc:
        return _fail(EXIT_CONFIG, f"invalid input: {exc}")
    except WeightSolverError as exc:
        return _fail(EXIT_WEIGHTS, f"weight solver failed: {exc}")
    except BootstrapError as exc:
        return _fail(EXIT_BOOTSTRAP, f"bootstrap failed: {exc}")
    except (MergerRetroError, ValueError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_ESTIMATION, f"estimation failed: {type(exc).__name__}: {exc}")
    print(f"{args.command}: wrote {', '.join(sorted(p.name for p in out.iterdir()))} to {out}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

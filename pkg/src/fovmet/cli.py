"""Command-line entry points for the full pipeline.

Subcommands cover every stage: pooling-mask construction, metamer
synthesis, strength calibration, psychometric fitting, observer
simulation, and the ABX session server. Every subcommand accepts
--config pointing at a JSON object whose keys are flag names (dashes as
underscores); explicit flags override the config, which overrides the
built-in defaults.

Exit codes: 0 on success, 2 for usage problems (unknown flags, missing
required values or input files), 1 for runtime failures. Non-usage
failures print one JSON line to stderr: {"error": <type>, "message": ...}.

The FOVMET_DATA_DIR environment variable overrides the default data
directory (mask cache and session logs); it defaults to ./fovmet-data.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main", "build_parser"]

_CONDITION_CHOICES = ("synth-vs-synth", "synth-vs-reference")


class UsageError(ValueError):
    """Missing or inconsistent inputs: reported with the usage exit code."""


def data_dir() -> Path:
    return Path(os.environ.get("FOVMET_DATA_DIR", Path.cwd() / "fovmet-data"))


def _comma_floats(text: str) -> list:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad float list {text!r}: {exc}") from exc


def _require(ns: dict, *keys):
    missing = [k for k in keys if ns.get(k) is None]
    if missing:
        raise UsageError(
            "missing required values: " + ", ".join(f"--{k.replace('_', '-')}" for k in missing)
        )


def _pooling_config(ns: dict):
    from .geometry import PoolingConfig

    kwargs = {"scale": float(ns["scale"])}
    for key in ("image_size", "min_region_area"):
        if ns.get(key) is not None:
            kwargs[key] = int(ns[key])
    for key in ("transition", "fovea_radius"):
        if ns.get(key) is not None:
            kwargs[key] = float(ns[key])
    return PoolingConfig(**kwargs)


def _load_codec(ns: dict):
    from .features import load_weights

    _require(ns, "encoder", "decoder")
    return load_weights(ns["encoder"]), load_weights(ns["decoder"])


def _emit(payload: dict) -> None:
    print(json.dumps(payload))
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_masks(ns: dict) -> int:
    from .geometry import build_pooling_masks, cached_pooling_masks, save_masks

    _require(ns, "scale")
    config = _pooling_config(ns)
    cache = ns.get("cache_dir")
    if cache is None and ns.get("no_cache") is not True:
        cache = data_dir() / "masks"
    if cache is not None:
        masks = cached_pooling_masks(config, cache)
    else:
        masks = build_pooling_masks(config)
    out = ns.get("out")
    if out is not None:
        save_masks(masks, out)
    peripheral = sum(1 for r in masks.regions if not r.info.is_fovea)
    _emit(
        {
            "scale": config.scale,
            "image_size": config.image_size,
            "regions": len(masks),
            "peripheral_regions": peripheral,
            "rings": masks.kept_rings(),
            "saved_to": str(out) if out else None,
        }
    )
    return 0


def _strength_rule(ns: dict, masks):
    """Resolve --gamma / --alpha into synthesize_metamer keyword args."""
    from .optimization import GammaFamily, load_gamma
    from .styletransfer import AlphaField

    if ns.get("gamma") is not None and ns.get("alpha") is not None:
        raise UsageError("--gamma and --alpha are mutually exclusive")
    if ns.get("gamma") is not None:
        rule = load_gamma(ns["gamma"])
        if isinstance(rule, GammaFamily):
            rule = rule.gamma_for(float(ns["scale"]))
        return {"gamma": rule}
    alpha = 0.5 if ns.get("alpha") is None else float(ns["alpha"])
    return {"alphas": AlphaField.uniform(alpha, masks)}


def cmd_synthesize(ns: dict) -> int:
    from .features import read_image, write_image
    from .geometry import build_pooling_masks
    from .styletransfer import synthesize_metamer

    _require(ns, "scale", "input", "output")
    encoder, decoder = _load_codec(ns)
    config = _pooling_config(ns)
    image = read_image(ns["input"])
    if image.shape[1] != config.image_size or image.shape[2] != config.image_size:
        raise UsageError(
            f"input is {image.shape[2]}x{image.shape[1]} but the pooling grid "
            f"is {config.image_size}; pass --image-size to match"
        )
    masks = build_pooling_masks(config)
    result = synthesize_metamer(
        image,
        int(ns.get("seed") or 0),
        masks,
        encoder,
        decoder,
        **_strength_rule(ns, masks),
    )
    write_image(ns["output"], result.image)
    _emit(
        {
            "output": str(ns["output"]),
            "scale": config.scale,
            "seed": int(ns.get("seed") or 0),
            "regions": len(masks),
        }
    )
    return 0


def _parse_profiles(path, metric: str) -> dict:
    from .optimization import DistortionProfile

    with open(path) as fh:
        data = json.load(fh)
    if "profiles" in data:
        metric = data.get("metric", metric)
        data = data["profiles"]
    profiles = {}
    for scale_text, curve in data.items():
        scale = float(scale_text)
        profiles[scale] = DistortionProfile.from_curve(
            {int(ring): float(score) for ring, score in curve.items()},
            metric=metric,
            scale=scale,
        )
    return profiles


def cmd_optimize_gamma(ns: dict) -> int:
    from .features import read_image
    from .optimization import run_gamma_search, save_gamma

    _require(ns, "images", "profiles", "out")
    encoder, decoder = _load_codec(ns)
    metric = ns.get("metric") or "SSIM"
    profiles = _parse_profiles(ns["profiles"], metric)
    # the per-run scale is swapped in per profile; the template just
    # carries the grid geometry
    if ns.get("scale") is None:
        ns["scale"] = sorted(profiles)[0]
    config = _pooling_config(ns)
    images = [read_image(p) for p in ns["images"]]
    report = run_gamma_search(
        images,
        encoder,
        decoder,
        profiles,
        config,
        scales=ns.get("scales"),
        metric=metric,
        grid_step=float(ns.get("grid_step") or 0.05),
        n_permutation=int(ns.get("n_permutation") or 10000),
        seed=int(ns.get("seed") or 0),
    )
    save_gamma(report.gamma, ns["out"])
    print(report.to_text())
    _emit({"gamma": str(ns["out"]), "branch": report.branch,
           "p_values": report.p_values})
    return 0


def cmd_fit(ns: dict) -> int:
    from .psychometrics import (
        bootstrap_ci,
        fit_psychometric,
        fit_with_shared_lapse,
        format_fit_report,
        read_trials,
    )

    _require(ns, "input")
    trials = read_trials(ns["input"])
    conditions = [ns["condition"]] if ns.get("condition") else sorted(
        {t.condition for t in trials}
    )
    if not conditions:
        raise UsageError(f"{ns['input']}: no trials found")
    seed = int(ns.get("seed") or 0)
    lapse = None if ns.get("lapse") is None else float(ns["lapse"])
    n_boot = int(ns.get("bootstrap") or 0)

    fits = []
    if ns.get("shared_lapse") is True and len(conditions) > 1:
        shared = fit_with_shared_lapse(trials, conditions, seed=seed)
        lapse_by_cond = {c: f.lapse for c, f in shared.items()}
    else:
        lapse_by_cond = {c: lapse for c in conditions}
    for cond in conditions:
        if n_boot > 0:
            fits.append(
                bootstrap_ci(
                    trials,
                    cond,
                    n=n_boot,
                    seed=seed,
                    lapse=lapse_by_cond[cond],
                    method=ns.get("ci_method") or "basic",
                )
            )
        else:
            fits.append(
                fit_psychometric(trials, cond, lapse=lapse_by_cond[cond], seed=seed)
            )
    print(format_fit_report(fits))
    if ns.get("json") is True:
        for fit in fits:
            _emit(
                {
                    "condition": fit.condition,
                    "s0": fit.s0,
                    "beta0": fit.beta0,
                    "lapse": fit.lapse,
                    "n_trials": fit.n_trials,
                    "ci_s0": fit.ci_s0,
                    "ci_beta0": fit.ci_beta0,
                    "ci_lapse": fit.ci_lapse,
                }
            )
    return 0


def cmd_simulate(ns: dict) -> int:
    from .psychometrics import simulate_observer, write_trials

    _require(ns, "s0", "beta0", "scales", "trials_per_scale", "out")
    trials = simulate_observer(
        float(ns["s0"]),
        float(ns["beta0"]),
        float(ns.get("lapse") or 0.0),
        ns["scales"],
        int(ns["trials_per_scale"]),
        condition=ns.get("condition") or "synth-vs-synth",
        seed=int(ns.get("seed") or 0),
    )
    write_trials(ns["out"], trials)
    _emit({"out": str(ns["out"]), "n_trials": len(trials)})
    return 0


def cmd_serve(ns: dict) -> int:
    from .server import serve_sessions
    from .session import load_plan

    _require(ns, "plan", "stimuli")
    plan = load_plan(ns["plan"])
    logs = ns.get("logs") or data_dir() / "logs"
    server = serve_sessions(
        plan,
        ns["stimuli"],
        logs,
        host=ns.get("host") or "127.0.0.1",
        port=int(ns.get("port") or 0),
    )
    _emit(
        {
            "serving": server.base_url,
            "session_id": plan.session_id,
            "n_trials": len(plan),
            "log": str(server.log_path(plan.session_id)),
        }
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fovmet",
        description="Foveated metamer synthesis, calibration, and ABX serving.",
        epilog="FOVMET_DATA_DIR overrides the default data directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of default flag values")
        p.set_defaults(handler=handler)
        return p

    p = add("masks", cmd_masks, "build or cache a pooling-mask bank")
    p.add_argument("--scale", type=float)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--transition", type=float)
    p.add_argument("--min-region-area", type=int, dest="min_region_area")
    p.add_argument("--fovea-radius", type=float, dest="fovea_radius")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--no-cache", action="store_true", default=None, dest="no_cache")
    p.add_argument("--out", help="also save the bank to this path")

    p = add("synthesize", cmd_synthesize, "synthesize a foveated metamer")
    p.add_argument("input", nargs="?")
    p.add_argument("output", nargs="?")
    p.add_argument("--scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--transition", type=float)
    p.add_argument("--min-region-area", type=int, dest="min_region_area")
    p.add_argument("--encoder", help="encoder manifest directory")
    p.add_argument("--decoder", help="decoder manifest directory")
    p.add_argument("--alpha", type=float,
                   help="uniform distortion strength (default 0.5)")
    p.add_argument("--gamma", help="fitted strength rule JSON")

    p = add("optimize-gamma", cmd_optimize_gamma,
            "calibrate the strength rule against reference profiles")
    p.add_argument("--images", nargs="+")
    p.add_argument("--profiles", help="per-scale ring-score curves, JSON")
    p.add_argument("--scale", type=float,
                   help="pooling config template scale (per-run scales vary)")
    p.add_argument("--scales", type=_comma_floats,
                   help="subset of profile scales to run")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--transition", type=float)
    p.add_argument("--min-region-area", type=int, dest="min_region_area")
    p.add_argument("--encoder")
    p.add_argument("--decoder")
    p.add_argument("--metric", choices=("SSIM", "MS-SSIM", "IW-SSIM"))
    p.add_argument("--grid-step", type=float, dest="grid_step")
    p.add_argument("--n-permutation", type=int, dest="n_permutation")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="where to write the fitted rule JSON")

    p = add("fit", cmd_fit, "fit the response model to a trial log")
    p.add_argument("--input", help="JSON-lines trial log")
    p.add_argument("--condition", choices=_CONDITION_CHOICES)
    p.add_argument("--bootstrap", type=int, help="bootstrap resample count")
    p.add_argument("--ci-method", dest="ci_method",
                   choices=("percentile", "basic", "bc"))
    p.add_argument("--lapse", type=float, help="fix the lapse rate")
    p.add_argument("--shared-lapse", action="store_true", default=None,
                   dest="shared_lapse")
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true", default=None,
                   help="also print one JSON line per fitted condition")

    p = add("simulate", cmd_simulate, "write a synthetic observer's trial log")
    p.add_argument("--s0", type=float)
    p.add_argument("--beta0", type=float)
    p.add_argument("--lapse", type=float)
    p.add_argument("--scales", type=_comma_floats)
    p.add_argument("--trials-per-scale", type=int, dest="trials_per_scale")
    p.add_argument("--condition", choices=_CONDITION_CHOICES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("serve", cmd_serve, "serve ABX sessions over HTTP")
    p.add_argument("--plan", help="session plan JSON")
    p.add_argument("--stimuli", help="directory of rendered stimulus PNGs")
    p.add_argument("--logs", help="trial log directory")
    p.add_argument("--host")
    p.add_argument("--port", type=int)

    return parser


def _merge_config(args: argparse.Namespace) -> dict:
    ns = vars(args)
    config_path = ns.pop("config", None)
    if config_path is None:
        return ns
    try:
        with open(config_path) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config {config_path}: {exc}") from exc
    if not isinstance(config, dict):
        raise UsageError(f"--config {config_path}: expected a JSON object")
    for key, value in config.items():
        key = key.replace("-", "_")
        if ns.get(key) is None:
            ns[key] = value
    return ns


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ns = _merge_config(args)
        return ns.pop("handler")(ns)
    except (UsageError, FileNotFoundError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())

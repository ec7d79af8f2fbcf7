"""Command-line front end: ``ossi-kit <stage> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error,
4 missing input or shape mismatch, 5 solver divergence (JSON body on
stderr and in ``error.json``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import __version__, pipeline
from ._parallel import get_threads, set_threads
from .config import DEFAULTS, RECON_METHODS, ConfigError, load_config, materialize
from .errors import (ConvergenceError, DimensionMismatchError, InvalidParameterError,
                     SolverDivergenceError)

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_RUNTIME", "EXIT_INPUT",
           "EXIT_SOLVER"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"
_NOT_OUTPUTS = {MANIFEST, "error.json"}


class _InputError(Exception):
    """Replay input missing or changed."""


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="run root directory (default: output_dir)")
    common.add_argument("--seed", type=_u64, metavar="U64", help="set every seed")
    common.add_argument("--threads", type=_positive, metavar="N",
                        help="worker thread cap (default: OSSI_KIT_THREADS or 1)")
    common.add_argument("--phantom", metavar="DIR", help="phantom artifact directory")
    common.add_argument("--sample", metavar="DIR", help="sampling artifact directory")
    common.add_argument("--recon", metavar="DIR", help="reconstruction artifact directory")
    common.add_argument("--dict", metavar="DIR", dest="dictionary",
                        help="dictionary artifact directory")

    p = argparse.ArgumentParser(prog="ossi-kit",
                                description="OSSI simulation, reconstruction and analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("simulate", parents=[common], help="signal cycles and duality check")
    d = sub.add_parser("dict", parents=[common], help="build or match a dictionary")
    d.add_argument("action", choices=["build", "match"])
    sub.add_parser("phantom", parents=[common], help="reference phantom ground truth")
    sub.add_parser("sample", parents=[common], help="undersampled noisy k-space")
    for name, helptext in (("recon", "image reconstruction"), ("analyze", "metrics and heatmaps")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--method", choices=RECON_METHODS,
                       help="reconstruction method (default: solver.method)")
    r = sub.add_parser("replay", help="re-run a stage from its manifest and compare outputs")
    r.add_argument("manifest", metavar="MANIFEST")
    r.add_argument("--out", metavar="DIR", help="stage directory (default: the original)")
    r.add_argument("--threads", type=_positive, metavar="N")
    return p


def _config(args) -> dict:
    if args.config is None:
        cfg = json.loads(json.dumps(DEFAULTS))
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = {k: args.seed for k in cfg["seeds"]}
    if getattr(args, "method", None):
        cfg["solver"]["method"] = args.method
    if args.out is not None:
        cfg["output_dir"] = args.out
    for key in ("phantom", "sample", "recon", "dictionary"):
        val = getattr(args, key, None)
        if val is not None:
            cfg["inputs"][key] = val
    cfg = materialize(cfg)
    # absolute paths keep manifests replayable from any working directory
    cfg["output_dir"] = os.path.abspath(cfg["output_dir"])
    cfg["inputs"] = {k: v if v is None else os.path.abspath(v) for k, v in cfg["inputs"].items()}
    return cfg


def _stage_dir(cfg: dict, command: list) -> str:
    root = cfg["output_dir"]
    stage = command[0]
    if stage == "dict":
        return os.path.join(root, "dict" if command[1] == "build" else "dict-match")
    if stage in ("recon", "analyze"):
        return os.path.join(root, stage, cfg["solver"]["method"])
    return os.path.join(root, stage)


def _input_dir(cfg: dict, key: str, default_rel: str) -> str:
    val = cfg["inputs"][key]
    return val if val is not None else os.path.join(cfg["output_dir"], default_rel)


def _run_stage(cfg: dict, command: list, out_dir: str) -> tuple:
    io = pipeline.StageIO(out_dir)
    stage = command[0]
    method = cfg["solver"]["method"]
    if stage == "simulate":
        summary = pipeline.run_simulate(cfg, io)
    elif stage == "dict" and command[1] == "build":
        summary = pipeline.run_dict_build(cfg, io)
    elif stage == "dict":
        summary = pipeline.run_dict_match(cfg, io, _input_dir(cfg, "recon", f"recon/{method}"),
                                          cfg["inputs"]["dictionary"])
    elif stage == "phantom":
        summary = pipeline.run_phantom(cfg, io)
    elif stage == "sample":
        summary = pipeline.run_sample(cfg, io, _input_dir(cfg, "phantom", "phantom"))
    elif stage == "recon":
        summary = pipeline.run_recon(cfg, io, _input_dir(cfg, "sample", "sample"), method,
                                     cfg["inputs"]["dictionary"])
    elif stage == "analyze":
        summary = pipeline.run_analyze(cfg, io, _input_dir(cfg, "phantom", "phantom"),
                                       _input_dir(cfg, "recon", f"recon/{method}"))
    else:  # pragma: no cover - argparse restricts commands
        raise InvalidParameterError(f"unknown command {stage!r}")
    return io, summary


def _output_hashes(out_dir: str) -> dict:
    return {name: pipeline.sha256_file(os.path.join(out_dir, name))
            for name in sorted(os.listdir(out_dir))
            if name not in _NOT_OUTPUTS and os.path.isfile(os.path.join(out_dir, name))}


def _execute(cfg: dict, command: list, out_dir: str) -> dict:
    """Run a stage and write its manifest; returns the manifest."""
    t0 = time.perf_counter()
    err = os.path.join(out_dir, "error.json")
    if os.path.isfile(err):
        os.remove(err)
    try:
        io, summary = _run_stage(cfg, command, out_dir)
    except (SolverDivergenceError, ConvergenceError) as exc:
        body = {"error": type(exc).__name__, "message": str(exc),
                "trace": [float(v) for v in getattr(exc, "trace", None) or []]}
        os.makedirs(out_dir, exist_ok=True)
        with open(err, "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=2)
        exc.json_body = body
        raise
    manifest = {
        "tool": "ossi-kit", "version": __version__, "command": command,
        "config": cfg, "seed": cfg["seeds"], "threads": get_threads(),
        "inputs": io.inputs, "outputs": _output_hashes(out_dir),
        "summary": summary, "wall_time_s": time.perf_counter() - t0,
    }
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=pipeline._jsonable)
        fh.write("\n")
    return manifest


def _replay(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        old = json.load(fh)
    try:
        cfg = materialize(old["config"])
        command = list(old["command"])
        old_outputs = old["outputs"]
        old_inputs = old["inputs"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed manifest: missing {exc}") from None
    for path, digest in old_inputs.items():
        if not os.path.isfile(path):
            raise FileNotFoundError(f"replay input missing: {path}")
        if pipeline.sha256_file(path) != digest:
            raise _InputError(f"replay input changed since the recorded run: {path}")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.manifest))
    new = _execute(cfg, command, out_dir)
    bad = sorted(k for k in set(old_outputs) | set(new["outputs"])
                 if old_outputs.get(k) != new["outputs"].get(k))
    if bad:
        print("replay differs in: " + ", ".join(bad), file=sys.stderr)
        return EXIT_RUNTIME
    print(f"replay identical: {len(old_outputs)} outputs in {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    set_threads(args.threads)
    try:
        if args.command == "replay":
            return _replay(args)
        cfg = _config(args)
        command = [args.command] + ([args.action] if args.command == "dict" else [])
        out_dir = _stage_dir(cfg, command)
        man = _execute(cfg, command, out_dir)
        print(json.dumps({"out": out_dir, "summary": man["summary"]}, default=pipeline._jsonable,
                         sort_keys=True))
        return EXIT_OK
    except (SolverDivergenceError, ConvergenceError) as exc:
        body = getattr(exc, "json_body", {"error": type(exc).__name__, "message": str(exc)})
        print(json.dumps(body), file=sys.stderr)
        return EXIT_SOLVER
    except (FileNotFoundError, DimensionMismatchError, _InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvalidParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level handler maps to exit 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

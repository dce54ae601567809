"""Command line entry point.

Exit status: 0 on success, 1 when a stage fails, 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config, write_config
from .errors import AuditError, ConfigError
from .pipeline import STAGES, Pipeline
from .synthgen import SHORTCUTS, SIGNALS, SynthSpec, write_synthetic_dataset

log = logging.getLogger("shortcut_audit")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline options")
    g.add_argument("-c", "--config", help="TOML configuration file")
    g.add_argument("-o", "--out", help="output directory (overrides output_dir)")
    g.add_argument("--input", nargs="+", action="append", default=[], metavar="ARG",
                   help="add an input: PATH LABEL [DATASET_TAG]; repeatable")
    g.add_argument("--seed", type=int, help="global seed")
    g.add_argument("--workers", type=int, help="worker threads inside a stage")
    g.add_argument("--force", action="store_true", help="rerun even if a cached artifact has another config hash")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. ranker.k=5 or evaluator.per_dataset=true")


def _config_flags(p: argparse.ArgumentParser) -> None:
    # every flag maps onto a config key, so all pipeline commands accept all of them
    g = p.add_argument_group("extract")
    g.add_argument("--dissector", choices=("builtin", "external"), help="dissector mode")
    g.add_argument("--tshark", help="external dissector binary")
    g.add_argument("--field", action="append", help="field to export with the external dissector; repeatable")
    g = p.add_argument_group("rank")
    g.add_argument("-k", type=int, help="number of candidates")
    g.add_argument("--min-entropy", type=float)
    g.add_argument("--max-bins", type=int)
    g.add_argument("--denylist", help="denylist file (one glob per line)")
    g = p.add_argument_group("categorize")
    g.add_argument("--assignment", help="reviewed CSV with columns field,category")
    g = p.add_argument_group("validate")
    g.add_argument("--kind", choices=("adjacent_diff", "anchor_first", "tsval_minus_tsecr"))
    g.add_argument("--dataset-pair", nargs=2, metavar=("TAG_A", "TAG_B"))
    g.add_argument("--symmetric", action="store_true", default=None)
    g = p.add_argument_group("occlude / evaluate")
    g.add_argument("--occlusion", action="append", metavar="NAME:STRATEGY:TARGET[,TARGET]",
                   help="replace the configured occlusion list; repeatable")
    g.add_argument("--max-flows", type=int, help="flow cap (per class unless --per-dataset)")
    g.add_argument("--per-dataset", action="store_true", default=None)
    g.add_argument("--repeats", type=int)


FLAG_KEYS = {
    "dissector": "dissector.mode", "tshark": "dissector.binary", "field": "dissector.fields",
    "k": "ranker.k", "min_entropy": "ranker.min_entropy", "max_bins": "ranker.max_bins",
    "denylist": "ranker.denylist", "assignment": "taxonomy.assignment", "kind": "validator.kind",
    "dataset_pair": "validator.dataset_pair", "symmetric": "validator.symmetric",
    "max_flows": "evaluator.max_flows_per_class", "per_dataset": "evaluator.per_dataset",
    "repeats": "evaluator.repeats", "seed": "seed", "workers": "workers",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shortcut-audit",
                                     description="Find, categorise and occlude shortcut fields in labeled traffic.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _common(p)
        _config_flags(p)

    p = sub.add_parser("run", help="run several stages (all by default) and write the summary")
    _common(p)
    _config_flags(p)
    p.add_argument("--stages", nargs="+", choices=STAGES, help="subset of stages, run in workflow order")

    p = sub.add_parser("report", help="aggregate stage artifacts into summary.json and redraw figures")
    _common(p)
    _config_flags(p)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset, its manifest and a pipeline config")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--spec", help="JSON file with SynthSpec fields (flags below override it)")
    p.add_argument("--classes", type=int, dest="n_classes")
    p.add_argument("--flows", type=int, dest="flows_per_class", help="flows per class")
    p.add_argument("--seed", type=int)
    p.add_argument("--packets", metavar="LO:HI", help="packets per flow range")
    p.add_argument("--shortcut", action="append", choices=SHORTCUTS, dest="shortcuts")
    p.add_argument("--signal", action="append", choices=SIGNALS, dest="signals")
    p.add_argument("--env", action="append", metavar="TAG[:SHIFT]", dest="environments",
                   help="environment tag with an optional window shift; repeatable")
    p.add_argument("--highbits-field")
    p.add_argument("--reverse-ratio", type=float)
    p.add_argument("--sii-pool", type=int, dest="sii_pool_size")
    p.add_argument("--server-pool", type=int, dest="server_pool_size")
    p.add_argument("--duration", type=float, dest="capture_duration")
    p.add_argument("--start-epoch", type=int)
    return parser


def _overrides(args) -> list[str]:
    out = []
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={json.dumps(value)}")
    return out + list(args.overrides)


def _inputs(args) -> list[dict]:
    out = []
    for item in args.input:
        if len(item) not in (2, 3):
            raise ConfigError(f"--input takes PATH LABEL [DATASET_TAG], got {item}")
        d = {"path": item[0], "label": item[1]}
        if len(item) == 3:
            d["dataset_tag"] = item[2]
        if Path(item[0]).suffix.lower() in (".csv", ".ndjson", ".jsonl"):
            d["format"] = "csv" if item[0].lower().endswith(".csv") else "ndjson"
        out.append(d)
    return out


def _occlusions(specs: list[str]) -> list[str]:
    entries = []
    for text in specs:
        parts = text.split(":")
        if len(parts) != 3 or not all(parts):
            raise ConfigError(f"--occlusion expects NAME:STRATEGY:TARGETS, got {text!r}")
        entries.append({"name": parts[0], "strategy": parts[1], "targets": parts[2].split(",")})
    return [f"occlusion={_toml_inline(entries)}"]


def _toml_inline(entries: list[dict]) -> str:
    def val(v):
        return "[" + ", ".join(json.dumps(x) for x in v) + "]" if isinstance(v, list) else json.dumps(v)
    return "[" + ", ".join("{" + ", ".join(f"{k} = {val(v)}" for k, v in e.items()) + "}" for e in entries) + "]"


def _pipeline(args) -> Pipeline:
    overrides = _overrides(args)
    if getattr(args, "occlusion", None):
        overrides += _occlusions(args.occlusion)
    cfg = load_config(args.config, overrides, _inputs(args))
    return Pipeline(cfg, args.out, force=args.force)


def _synth(args) -> int:
    base = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("n_classes", "flows_per_class", "seed", "shortcuts", "signals", "highbits_field", "reverse_ratio",
                "sii_pool_size", "server_pool_size", "capture_duration", "start_epoch"):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    if args.packets:
        try:
            lo, hi = (int(x) for x in args.packets.split(":"))
        except ValueError:
            raise ConfigError(f"--packets expects LO:HI, got {args.packets!r}") from None
        base["packets_per_flow"] = [lo, hi]
    if args.environments:
        envs = []
        for text in args.environments:
            tag, _, shift = text.partition(":")
            try:
                envs.append({"tag": tag, "shift": float(shift) if shift else 0.0})
            except ValueError:
                raise ConfigError(f"--env expects TAG[:SHIFT], got {text!r}") from None
        base["environments"] = envs
    missing = [k for k in ("n_classes", "flows_per_class", "seed") if k not in base]
    if missing:
        raise ConfigError(f"synth needs {', '.join('--' + m for m in missing)} (or a --spec file)")
    try:
        spec = SynthSpec.from_dict(base)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs, manifest = write_synthetic_dataset(spec, out)
    cfg = {
        "seed": spec.seed,
        "output_dir": "out",
        "inputs": [{"path": str(Path(i["path"]).relative_to(out)), "label": i["label"],
                    "dataset_tag": i["dataset_tag"], "name": str(Path(i["path"]).relative_to(out))}
                   for i in inputs],
    }
    write_config(cfg, out / "pipeline.toml")
    print(f"wrote {len(inputs)} captures, manifest.json and pipeline.toml to {out}")
    print("planted:", ", ".join(sorted(manifest["planted"])) or "none",
          "| signals:", ", ".join(sorted(manifest["signals"])) or "none")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return _synth(args)
        pipe = _pipeline(args)
        if args.command == "report":
            pipe.report()
            print(f"summary: {pipe.out / 'summary.json'}")
            return EXIT_OK
        stages = args.stages if args.command == "run" else [args.command]
        for outcome in pipe.run(stages):
            note = "up to date" if outcome.status == "cached" else ", ".join(outcome.outputs)
            print(f"{outcome.stage}: {note}")
        if args.command == "run":
            pipe.report()
            print(f"summary: {pipe.out / 'summary.json'}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # unexpected failure: still a failed stage, traceback with -v
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())

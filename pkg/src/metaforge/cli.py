"""Command-line interface: list-modules, validate, generate, run, bench,
device-check, report, serve.

Exit codes: 0 success (and empty compatibility report for `validate`),
1 violations or run failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .registry import (
    ALGORITHMS,
    ConfigError,
    RegistryError,
    SLOTS,
    check_compat,
    config_signature,
    emit_command,
    parse_config,
    registry_list,
    serialize_config,
)
from .runner import RunError, device_check, render_report, run, write_report_atomic
from .strategies import SearchSpace, param_search


def _load_config(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}")
    return parse_config(text)


def cmd_list_modules(args) -> int:
    descriptors = registry_list(args.slot)
    if args.json:
        payload = [{"slot": d.slot, "option": d.option, "name": d.name,
                    "canonical": d.canonical, "implemented": d.implemented,
                    "tags": sorted(d.tags)} for d in descriptors]
        print(json.dumps(payload, indent=2))
        return 0
    current = None
    for d in descriptors:
        if d.slot != current:
            current = d.slot
            print(f"{current}:")
        badge = "" if d.implemented else "  [registered, unimplemented]"
        print(f"  {d.option:16s} {d.canonical:28s} {d.name}{badge}")
    if args.slot == "all":
        print("algorithms:")
        for name, algo in ALGORITHMS.items():
            badge = "" if algo.implemented else "  [registered, unimplemented]"
            print(f"  {name:16s} ({algo.category}){badge}")
    return 0


def cmd_validate(args) -> int:
    cfg = _load_config(args.config)
    report = check_compat(cfg)
    if report.ok:
        print("ok: configuration is composable")
        return 0
    for v in report.violations:
        print(f"{v.rule} [{', '.join(v.slots)}]: {v.message}")
    return 1


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    try:
        script = emit_command(cfg)
    except RegistryError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    sys.stdout.write(script)
    if args.emit_config:
        out_dir = Path(args.emit_config)
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / f"run-{config_signature(cfg)}.json"
        target.write_text(serialize_config(cfg))
        print(f"# wrote {target}", file=sys.stderr)
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.parallel is not None:
        cfg.parallel = args.parallel
    out = args.out or f"run-{config_signature(cfg)}.report.json"
    try:
        report = run(cfg, report_path=out)
    except RunError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(render_report(report.to_json()), end="")
    print(f"report written to {out}")
    return 0


def cmd_bench(args) -> int:
    spec = json.loads(Path(args.space).read_text())
    base = parse_config(spec.get("base_config", {}))
    range_axes = set(spec.get("ranges", []))
    axes = {k: (tuple(v) if k in range_axes else v)
            for k, v in spec["axes"].items()}
    space = SearchSpace(axes=axes, mode=spec.get("mode", "grid"),
                        n=spec.get("n", 0), seed=spec.get("seed", 0))

    def runner(params):
        doc = json.loads(serialize_config(base))
        for key, value in params.items():
            doc["hyper"][key] = value
        cfg = parse_config(doc)
        rep = run(cfg)
        return rep.eval["post"], rep.to_json()

    results = param_search(space, runner)
    width = max(len(json.dumps(r["params"])) for r in results)
    for r in results:
        label = json.dumps(r["params"]).ljust(width)
        if r["error"] is not None:
            print(f"{label}  FAILED  {r['error']}")
        else:
            print(f"{label}  score={r['score']:.6g}")
    if args.out:
        payload = [{k: r[k] for k in ("params", "score", "error")} for r in results]
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_device_check(args) -> int:
    report = device_check()
    if args.json:
        print(json.dumps(report.to_json(), indent=2))
        return 0
    print(f"logical cores: {report.logical_cores}")
    print(f"training methods available: {', '.join(report.modes)}")
    print(f"accelerator: {'yes' if report.accelerator else 'no'}")
    return 0


def cmd_report(args) -> int:
    data = json.loads(Path(args.file).read_text())
    print(render_report(data), end="")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaforge",
        description="Composable meta-learning pipelines: validate, generate, run.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list-modules", help="list slot options and algorithms")
    p.add_argument("--slot", default="all", choices=("all",) + SLOTS)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_list_modules)

    p = sub.add_parser("validate", help="compatibility-check a config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("generate", help="emit the two-line run script")
    p.add_argument("--config", required=True)
    p.add_argument("--emit-config", metavar="DIR",
                   help="also write the canonical config next to the script")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("run", help="execute a pipeline and write its report")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--parallel", type=int)
    p.add_argument("--out", help="report path (default run-<sig>.report.json)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="sweep a hyperparameter search space")
    p.add_argument("--space", required=True,
                   help="JSON file: {base_config, axes, mode, n, seed}")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("device-check", help="report usable training methods")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_device_check)

    p = sub.add_parser("report", help="render a stored run report")
    p.add_argument("--file", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="start the composer HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except RegistryError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

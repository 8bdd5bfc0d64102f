"""``gridflow`` command line: validate, run, compare, generate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dyag import AllocationPolicy
from .engine import simulate
from .errors import ConfigError, CyclicWorkflow, GridflowError
from .faults import FaultConfig, load_fault_config
from .gridsim import (
    MONTAGE_PORTS,
    PIPELINE_PORT,
    build_env,
    generate_montage,
    generate_pipeline,
    homogeneous_env_doc,
    load_fault_script,
)
from .model import load_workflow, validate, workflow_to_dict
from .report import build_report, compare_row, compare_table

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _workflow(spec: str):
    """A file path, or ``montage:<width>`` / ``pipeline:<length>``."""
    kind, _, arg = spec.partition(":")
    if kind in ("montage", "pipeline") and arg and not Path(spec).exists():
        try:
            n = int(arg)
        except ValueError as exc:
            raise ConfigError(f"bad generator argument {arg!r}", "--workflow") from exc
        return generate_montage(n) if kind == "montage" else generate_pipeline(n)
    return load_workflow(spec)


def _policies(values) -> list[AllocationPolicy]:
    out = []
    for v in values or ():
        for part in v.split(","):
            if part.strip():
                try:
                    out.append(AllocationPolicy.parse(part))
                except ValueError as exc:
                    raise ConfigError(str(exc), "--policy") from exc
    return out


def _inputs(args):
    w = _workflow(args.workflow)
    report = validate(w)
    if not report.ok:
        raise CyclicWorkflow("; ".join(str(d) for d in report.defects))
    script = load_fault_script(args.faults) if args.faults else ()
    env = build_env(args.env, args.seed, script)
    cfg = load_fault_config(args.fault_config) if args.fault_config else FaultConfig()
    return w, env, script, cfg


def cmd_validate(args) -> int:
    try:
        w = load_workflow(args.workflow)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = validate(w)
    for d in report.defects:
        print(d)
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_run(args) -> int:
    try:
        policies = _policies(args.policy) or [AllocationPolicy.FCFS]
        if len(policies) != 1:
            raise ConfigError("run takes exactly one policy", "--policy")
        w, env, _, cfg = _inputs(args)
    except (GridflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    engine, inst = simulate(w, env, policies[0], cfg, cleanup=not args.no_cleanup)
    report = build_report(engine, inst)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.txt").write_text(engine.trace.text(), encoding="utf-8")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        (out / "catalog.json").write_text(json.dumps(engine.data.dump(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        (out / "actions.log").write_text("".join(l + "\n" for l in engine.action_log.lines()), encoding="utf-8")
    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        sys.stdout.write(report.text())
    return EXIT_OK if inst.status.value == "Completed" else EXIT_FAILED


def cmd_compare(args) -> int:
    try:
        policies = _policies(args.policy)
        if len(policies) < 2:
            raise ConfigError("compare needs at least two policies", "--policy")
        w, _, script, cfg = _inputs(args)
        env_doc = args.env
    except (GridflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    for p in policies:
        env = build_env(env_doc, args.seed, script)
        engine, inst = simulate(w, env, p, cfg, cleanup=not args.no_cleanup)
        rows.append(compare_row(build_report(engine, inst)))
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        sys.stdout.write(compare_table(rows))
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        if args.kind == "montage":
            doc = workflow_to_dict(generate_montage(args.width))
        elif args.kind == "pipeline":
            doc = workflow_to_dict(generate_pipeline(args.length))
        else:
            ports = args.ports.split(",") if args.ports else [*MONTAGE_PORTS, PIPELINE_PORT]
            doc = homogeneous_env_doc(args.resources, args.speed, ports, args.disk, args.bandwidth)
    except GridflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridflow", description="Simulated grid workflow engine.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a workflow description")
    p.add_argument("workflow_pos", nargs="?", metavar="WORKFLOW")
    p.add_argument("--workflow")
    p.set_defaults(func=cmd_validate)

    for name, func in (("run", cmd_run), ("compare", cmd_compare)):
        p = sub.add_parser(name)
        p.add_argument("--workflow", required=True, help="workflow file, montage:<w> or pipeline:<n>")
        p.add_argument("--env", required=True, help="environment file")
        p.add_argument("--policy", action="append", help="fcfs|load|mintime|mindata (comma-separated or repeated)")
        p.add_argument("--faults", help="fault-script file")
        p.add_argument("--fault-config", dest="fault_config", help="fault-policy file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("text", "json"), default="text")
        p.add_argument("--no-cleanup", dest="no_cleanup", action="store_true",
                       help="keep intermediate files until the run ends")
        if name == "run":
            p.add_argument("--out", help="directory for trace.txt, report.json, catalog.json, actions.log")
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="emit a synthetic workflow or environment as JSON")
    p.add_argument("kind", choices=("montage", "pipeline", "env"))
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--resources", type=int, default=4)
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--disk", type=int, default=10**12)
    p.add_argument("--bandwidth", type=float, default=1e8)
    p.add_argument("--ports", help="comma-separated port types deployed on every resource")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "validate":
        args.workflow = args.workflow or args.workflow_pos
        if not args.workflow:
            print("error: a workflow file is required", file=sys.stderr)
            return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: run, sweep, eval, backend-check. Exit codes: 0 ok, 2 config
error, 3 dependency error, 4 backend error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import metrics, orchestrator, tensorio
from .backends import conformance
from .config import REPORT_FORMATS, load_config
from .errors import BackendError, CascError, ConfigError, DependencyError
from .volume import as_mask


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.jobs is not None:
        from dataclasses import replace

        config = replace(config, jobs=args.jobs)
    stages = args.stage.split(",") if args.stage else None
    result = orchestrator.run(config, stages=stages, force=args.force)
    for name in result.stage_names:
        if name in result.executed:
            print(f"{name}: completed")
        elif name in result.skipped:
            print(f"{name}: skipped (up to date)")
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config)
    values = [float(v) for v in args.values.split(",") if v != ""]
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = orchestrator.sweep(config, args.param, values, force=args.force)
    for row in rows:
        print(
            f"{args.param}={row[args.param]:g}  "
            f"dsc={row['mean_dsc']:.4f}±{row['std_dsc']:.4f}  "
            f"hd95={row['mean_hd95_mm']:.4f}±{row['std_hd95_mm']:.4f}"
        )
    print(f"wrote {os.path.join(config.workdir, 'reports', f'sweep_{args.param}.csv')}")
    return 0


def _load_mask_dir(path) -> dict:
    if not os.path.isdir(path):
        raise DependencyError(f"{path} is not a directory")
    out = {}
    spacings = {}
    for name in sorted(os.listdir(path)):
        if not name.endswith(".tns"):
            continue
        record = tensorio.read_tensor(os.path.join(path, name))
        vid = record.id or os.path.splitext(name)[0]
        out[vid] = as_mask(record.array)
        spacings[vid] = record.spacing
    if not out:
        raise DependencyError(f"no .tns masks found in {path}")
    return out, spacings


def _cmd_eval(args) -> int:
    preds, _ = _load_mask_dir(args.pred)
    gts, gt_spacings = _load_mask_dir(args.gt)
    if args.spacing:
        triple = tuple(float(v) for v in args.spacing.split(","))
        spacing = {vid: triple for vid in gts}
    else:
        spacing = {vid: gt_spacings[vid] or (1.0, 1.0, 1.0) for vid in gts}
    try:
        report = metrics.evaluate(preds, gts, spacing=spacing, penalty=args.penalty)
    except CascError as exc:
        raise DependencyError(str(exc)) from exc
    if args.report_format in ("json", "both"):
        print(json.dumps(report.to_json_obj(), indent=2, sort_keys=True))
    if args.report_format in ("table", "both"):
        print(metrics.report_table(report), end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_obj(), fh, indent=2, sort_keys=True)
    return 0


def _cmd_backend_check(args) -> int:
    entries = conformance.load_transcript(args.transcript)
    if args.cmd:
        transport = conformance.SubprocessTransport(args.cmd.split())
    else:
        from .backends.analytic import AnalyticBackend
        from .backends.serve import BackendServer

        transport = conformance.InProcessTransport(BackendServer(AnalyticBackend()))
    try:
        results = conformance.run_conformance(transport, entries, strict=args.strict)
    finally:
        transport.close()
    failures = 0
    for result in results:
        status = "PASS" if result.ok else "FAIL"
        detail = f"  ({result.detail})" if result.detail else ""
        print(f"{status} {result.name}{detail}")
        failures += 0 if result.ok else 1
    if failures:
        raise BackendError(f"{failures} conformance check(s) failed")
    print(f"all {len(results)} conformance checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the pipeline stages")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--stage", help="comma-separated subset of stages")
    p_run.add_argument("--force", action="store_true")
    p_run.add_argument("--jobs", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep alpha or beta over values")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", required=True, choices=("alpha", "beta"))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--force", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--spacing", help="dz,dy,dx in mm (default: from files)")
    p_eval.add_argument("--penalty", type=float, default=None)
    p_eval.add_argument("--report-format", choices=REPORT_FORMATS, default="both")
    p_eval.add_argument("--out", help="also write the JSON report here")
    p_eval.set_defaults(func=_cmd_eval)

    p_check = sub.add_parser("backend-check", help="run the protocol conformance suite")
    p_check.add_argument("--transcript", required=True)
    p_check.add_argument("--cmd", help="backend command (default: in-process analytic)")
    p_check.add_argument("--strict", action="store_true", help="require byte-identical responses")
    p_check.set_defaults(func=_cmd_backend_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CascError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

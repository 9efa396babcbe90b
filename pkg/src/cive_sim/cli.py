"""Command line front end.

    cive-sim run <scenario.scn> [--seed N] [--out DIR] [--no-cive]
    cive-sim matrix [--out DIR]
    cive-sim parse <trace.jsonl>

Exit codes: 0 when every executed scenario matches its ground truth,
2 when some verdicts were inconclusive, 1 on any outright mismatch.
CIVE_SIM_SEED provides the default seed when --seed is absent.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import cive, scenario


def _default_seed() -> int | None:
    raw = os.environ.get("CIVE_SIM_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"CIVE_SIM_SEED must be an integer, got {raw!r}")


def _cmd_run(args: argparse.Namespace) -> int:
    s = scenario.load_scenario(args.scenario)
    seed = args.seed if args.seed is not None else _default_seed()
    report = scenario.run_scenario(
        s,
        out_dir=args.out,
        seed=seed,
        cive_enabled=False if args.no_cive else None,
    )
    print(json.dumps(report.to_json_dict(), indent=2))
    return scenario.exit_code_for([report])


def _cmd_matrix(args: argparse.Namespace) -> int:
    result = scenario.run_matrix(out_dir=args.out)
    print(result.to_table())
    if result.spoofed_judged_legit:
        return 1
    if not result.all_match:
        return 2 if result.any_inconclusive else 1
    return 0


def _cmd_parse(args: argparse.Namespace) -> int:
    with open(args.trace, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    for call_id, observer, trace in cive.legs_from_trace_rows(rows):
        features = cive.extract_features(trace)
        inferred = cive.infer_state(features)
        print(
            json.dumps(
                {
                    "call_id": call_id,
                    "observer": observer,
                    "messages": len(trace),
                    "features": features.to_json_dict(),
                    "inferred": inferred.value,
                }
            )
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cive-sim",
        description="Simulate caller-ID spoofing and callback verification over SIP signaling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("scenario", help="path to a .scn scenario file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default=None, help="directory for trace and report files")
    run.add_argument(
        "--no-cive", action="store_true", help="disable verification (attack demo)"
    )
    run.set_defaults(func=_cmd_run)

    matrix = sub.add_parser("matrix", help="run the full state/feature/origination grid")
    matrix.add_argument("--out", default=None, help="directory for matrix.csv and cell outputs")
    matrix.set_defaults(func=_cmd_matrix)

    parse = sub.add_parser("parse", help="re-run feature extraction on a saved trace")
    parse.add_argument("trace", help="path to a .trace.jsonl file")
    parse.set_defaults(func=_cmd_parse)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except scenario.ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

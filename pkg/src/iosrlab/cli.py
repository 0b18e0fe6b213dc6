"""Command-line entry point.

Subcommands: ``run`` a manifest, ``ablate`` it across the toggle matrix,
``verify`` a self-check suite, ``dump-etf`` a prototype matrix. Exit code
is 0 only when everything requested succeeded.
"""

from __future__ import annotations

import argparse
import sys

from . import runner, verify
from .etf import etf_matrix
from .manifest import ManifestError, load_manifest


def _cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    result = runner.execute(manifest, out_dir=args.out)
    sys.stdout.write(runner.summary_from_records(result.records, manifest.hash()))
    if result.out_dir:
        print(f"results written to {result.out_dir}")
    return 0


def _cmd_ablate(args) -> int:
    manifest = load_manifest(args.manifest)
    matrix = runner.load_matrix(args.matrix) if args.matrix else runner.ABLATION_MATRIX
    results = runner.ablate(manifest, matrix=matrix, out_dir=args.out)
    sys.stdout.write(runner.comparison_from_results(results, manifest.hash()))
    return 0


def _cmd_verify(args) -> int:
    ok, lines = verify.run_suite(args.suite)
    for line in lines:
        print(line)
    print("all checks passed" if ok else "FAILURES detected")
    return 0 if ok else 1


def _cmd_dump_etf(args) -> int:
    matrix = etf_matrix(args.d, args.K, args.seed)
    print(f"# etf d={args.d} K={args.K} seed={args.seed}")
    for row in matrix:
        print(",".join(f"{v:.17g}" for v in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iosrlab",
        description="Incremental open-set recognition laboratory with fixed equiangular prototypes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a run manifest")
    run_p.add_argument("manifest")
    run_p.add_argument("--out", default=None, help="output directory (overrides manifest output_dir)")
    run_p.set_defaults(fn=_cmd_run)

    ablate_p = sub.add_parser("ablate", help="run the toggle-ablation matrix for a manifest")
    ablate_p.add_argument("manifest")
    ablate_p.add_argument("--matrix", default=None, help="JSON file with [{name, toggles}] rows")
    ablate_p.add_argument("--out", default=None)
    ablate_p.set_defaults(fn=_cmd_ablate)

    verify_p = sub.add_parser("verify", help="run a self-check suite")
    verify_p.add_argument("suite", choices=["etf", "grad", "metrics", "all"])
    verify_p.set_defaults(fn=_cmd_verify)

    dump_p = sub.add_parser("dump-etf", help="print a prototype matrix as CSV")
    dump_p.add_argument("d", type=int)
    dump_p.add_argument("K", type=int)
    dump_p.add_argument("seed", type=int)
    dump_p.set_defaults(fn=_cmd_dump_etf)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surface the failure, keep the exit contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

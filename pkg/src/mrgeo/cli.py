"""Command-line entry point: ``mrgeo gen|train|eval|ablate|gradcheck``.

Exit status is 0 on success, 1 when an input fails validation (bad config,
checkpoint, or argument), and 2 when a numerical invariant or gradient check fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint
from .ablation import load_matrix, run_ablation
from .config import ConfigError, RunConfig, format_config, load_config
from .data import (
    CorruptionSpec,
    apply_corruption,
    generate_pair,
    parse_kinds,
    parse_severities,
    ppm_name,
    write_ppm,
)
from .evaluation import evaluate_run
from .gradcheck import SUITES, TOLERANCE, run_suites
from .objective import NormalizationError, train
from .tensor import NonFiniteError, ShapeError

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2

log = logging.getLogger("mrgeo")


class InvariantFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; here 2 means a failed invariant
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config) if args.config else RunConfig()
    kinds = parse_kinds(args.corruptions)
    severities = parse_severities(args.severities)
    count = 0
    for scene_id in range(args.first, args.first + args.scenes):
        street, sat = generate_pair(args.seed, scene_id, cfg.encoder.street_size,
                                    cfg.encoder.satellite_size)
        for img in (street, sat):
            write_ppm(out / ppm_name(args.split, scene_id, img.view), img)
            count += 1
        for kind in kinds:
            for sev in severities:
                spec = CorruptionSpec(kind, sev)
                write_ppm(out / ppm_name(args.split, scene_id, street.view, spec),
                          apply_corruption(street, spec, args.seed))
                count += 1
    print(f"wrote {count} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    result = train(cfg, args.seed)
    checkpoint.save(args.out, result.encoder, cfg, args.seed)
    losses = result.losses
    print(f"trained {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
          f"saved {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    encoder, cfg, _ = checkpoint.load(args.ckpt)
    report = evaluate_run(encoder, cfg, args.seed, parse_kinds(args.corruptions),
                          parse_severities(args.severities))
    print(report.format_table())
    if args.jsonl == "-":
        sys.stdout.write(report.to_jsonl())
    elif args.jsonl:
        Path(args.jsonl).write_text(report.to_jsonl())
    return EXIT_OK


def cmd_ablate(args) -> int:
    report = run_ablation(load_matrix(args.matrix))
    print(report.format_table())
    return EXIT_INVALID if report.failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    names = SUITES if args.module == "all" else (args.module,)
    results, elapsed = run_suites(names, seed=args.seed)
    worst: dict[str, float] = {}
    failures = [r for r in results if not r.passed()]
    for r in results:
        worst[r.suite] = max(worst.get(r.suite, 0.0), r.max_rel_error)
    for suite, err in worst.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{suite:<8} max rel error {err:.3e}  {status}")
    for r in failures:
        print(f"  failed: {r.suite}/{r.case} d/d{r.tensor} rel error {r.max_rel_error:.3e}")
    print(f"{len(results)} checks in {elapsed:.1f}s")
    if failures:
        raise InvariantFailure(f"{len(failures)} gradient checks above {TOLERANCE:g}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    sys.stdout.write(format_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrgeo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="dump synthetic scene pairs as PPM files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--first", type=int, default=0, help="first scene id")
    p.add_argument("--split", default="train", help="file name prefix")
    p.add_argument("--config", help="config file for image sizes")
    p.add_argument("--corruptions", default="none", help="none, all, or kind,kind,...")
    p.add_argument("--severities", default="1-5")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an encoder and write a checkpoint")
    p.add_argument("--config", help="key=value config file (defaults if omitted)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean and corrupted retrieval on held-out scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--corruptions", default="all", help="all, none, or kind,kind,...")
    p.add_argument("--severities", default="1-5")
    p.add_argument("--jsonl", help="write per-cell records here ('-' for stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare a matrix of variants")
    p.add_argument("--matrix", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--module", default="all", choices=("all",) + SUITES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("config", help="print the fully resolved configuration")
    p.add_argument("--config")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvariantFailure, NonFiniteError, NormalizationError) as exc:
        print(f"mrgeo: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, checkpoint.CheckpointError, ShapeError, ValueError, OSError) as exc:
        print(f"mrgeo: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

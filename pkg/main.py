"""
boltzgen command line: train / sample / free-energy / explore / baseline / check.

Exit codes: 0 success, 2 configuration error (every problem is listed),
3 numerical or estimator failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import experiments
from checks import format_report, run_checks
from config import ExperimentConfig, apply_overrides, load_config, validate_config
from errors import BoltzgenError, ConfigError

logger = logging.getLogger("boltzgen")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3


# ── Parser ─────────────────────────────────────────────────────────────────────

def _common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    if needs_config:
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--threads", type=int, help="worker threads for independent runs")
    p.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boltzgen", description="Boltzmann generator experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator with the configured stage schedule")
    _common(p)

    p = sub.add_parser("sample", help="draw reweighted samples from a trained generator")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--n", type=int, help="number of samples (default: sampling.n)")
    p.add_argument("--tau", type=float, help="single temperature (default: sampling.temperatures)")

    p = sub.add_parser("free-energy", help="profiles, basin and two-generator free energy differences")
    _common(p)
    p.add_argument("--samples", nargs="+", type=Path, default=[], help="weighted-sample CSV files")
    p.add_argument("--checkpoint", type=Path, help="generate samples from this generator instead")
    p.add_argument("--checkpoints", nargs=2, type=Path, metavar=("A", "B"),
                   help="two restrained generators for Delta A = A_B - A_A")

    p = sub.add_parser("explore", help="latent-space Metropolis exploration with on-the-fly training")
    _common(p)

    p = sub.add_parser("baseline", help="direct Metropolis and umbrella sampling references")
    _common(p)

    p = sub.add_parser("check", help="run the invariant battery")
    _common(p, needs_config=False)
    p.add_argument("--perturb-logdet", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


# ── Dispatch ───────────────────────────────────────────────────────────────────

def _load(args) -> ExperimentConfig:
    data = apply_overrides(load_config(args.config), seed=args.seed, out=args.out, threads=args.threads)
    return validate_config(data)


def _dispatch(args) -> int:
    if args.command == "check":
        results = run_checks(seed=args.seed or 0, perturb_logdet=args.perturb_logdet)
        report = format_report(results)
        print(report)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "check_report.txt").write_text(report + "\n")
        return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE

    config = _load(args)
    if args.command == "train":
        manifest = experiments.cmd_train(config)
    elif args.command == "sample":
        manifest = experiments.cmd_sample(config, args.checkpoint, args.n, args.tau)
    elif args.command == "free-energy":
        checkpoints = args.checkpoints or ([args.checkpoint] if args.checkpoint else [])
        manifest = experiments.cmd_free_energy(config, args.samples, checkpoints)
    elif args.command == "explore":
        manifest = experiments.cmd_explore(config)
    else:
        manifest = experiments.cmd_baseline(config)
    print(f"{manifest.run_id}: {manifest.status}, {manifest.energy_calls} energy calls, "
          f"{len(manifest.artifacts)} artifacts in {manifest.output_dir}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except BoltzgenError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

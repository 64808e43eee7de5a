"""Command-line front end.

Subcommands: simulate, reconstruct, sample-many, train, print-config. Every
subcommand accepts --config/--seed/--jobs/--out; --seed and --out override the
config's master_seed and output_dir. Exit codes: 0 success, 2 config error,
3 when some grid cells failed but the run completed.
"""

from __future__ import annotations

import argparse
import json
import sys

from .exceptions import ConfigError, DiffprError
from .experiments import (
    load_config,
    run_reconstruct,
    run_sample_many,
    run_simulate,
    run_train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="JSON config file (defaults are used where omitted)")
    common.add_argument("--seed", metavar="U64", type=int, default=None,
                        help="override the config's master_seed")
    common.add_argument("--jobs", metavar="N", type=int, default=1,
                        help="max concurrent grid cells (default 1)")
    common.add_argument("--out", metavar="DIR", default=None,
                        help="override the config's output_dir")

    parser = argparse.ArgumentParser(
        prog="diffpr",
        description="Phase retrieval from coded diffraction patterns with diffusion priors.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common],
                   help="synthesize masks, ground truth, and noisy measurements")
    sub.add_parser("reconstruct", parents=[common],
                   help="run the configured method over every (seed x snr) cell")
    p_many = sub.add_parser("sample-many", parents=[common],
                            help="generate several reconstructions of one measurement set")
    p_many.add_argument("--samples", metavar="N", type=int, default=5,
                        help="number of samples (>= 2, default 5)")
    sub.add_parser("train", parents=[common],
                   help="train the tiny denoiser and write a checkpoint")
    sub.add_parser("print-config", parents=[common],
                   help="dump the fully merged config with all defaults explicit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed: expected a nonnegative integer")
        if args.jobs < 1:
            raise ConfigError("--jobs: expected an integer >= 1")
        cfg = load_config(args.config, seed=args.seed, out=args.out)

        if args.command == "print-config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "simulate":
            manifest = run_simulate(cfg)
            for entry in manifest["measurements"]:
                print(f"simulated snr={entry['tag']}: realized {entry['realized_snr_db']} dB "
                      f"-> {entry['file']}")
            return EXIT_OK
        if args.command == "reconstruct":
            records, any_failed = run_reconstruct(cfg, jobs=args.jobs)
            for r in records:
                status = f"FAILED ({r.error})" if r.error else (
                    f"recon_snr={r.recon_snr_db:.2f} dB g={r.final_g:.4g}")
                print(f"{r.method} seed={r.seed} snr={r.snr_tag}: {status}")
            print(f"metrics written to {cfg['output_dir']}/metrics.csv")
            return EXIT_PARTIAL if any_failed else EXIT_OK
        if args.command == "sample-many":
            result = run_sample_many(cfg, args.samples, jobs=args.jobs)
            for s in result["samples"]:
                print(f"seed={s['seed']}: final_g={s['final_g']:.4g}")
            print(f"distance matrix in {cfg['output_dir']}/{result['distances']}")
            return EXIT_OK
        if args.command == "train":
            info = run_train(cfg)
            msg = f"checkpoint {info['checkpoint']}, final epoch loss {info['final_epoch_loss']}"
            if "heldout_oracle_gap_per_pixel" in info:
                msg += f", held-out oracle gap {info['heldout_oracle_gap_per_pixel']:.4g}/pixel"
            print(msg)
            return EXIT_OK
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DiffprError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())

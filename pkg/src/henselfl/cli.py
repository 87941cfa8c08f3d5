"""Command-line entry point: ``henselfl {prepare,train,grid,dump-samples,leakage}``."""

import argparse
import logging
import sys

from . import experiment
from .exceptions import HenselFLError
from .privacy import PrivacyParams, cumulative_leakage

EXIT_IO = 3


def _common(parser):
    parser.add_argument("--scenario", type=int, default=2, choices=sorted(experiment.SCENARIOS))
    parser.add_argument("--epsilon", type=float, default=2.0)
    parser.add_argument("--base", type=int, default=None, help="digit base p (default depends on scenario)")
    parser.add_argument("--clients", type=int, default=4)
    parser.add_argument("--rounds", type=int, default=None)
    parser.add_argument("--local-epochs", type=int, default=1)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--data-dir", default=None,
                        help=f"MNIST IDX directory (default: ${experiment.DATA_DIR_ENV} or data/mnist)")
    parser.add_argument("--out", default="runs")
    parser.add_argument("--fast", action="store_true", help="8k train / 2k test images, 5 rounds")
    parser.add_argument("--noise-test", action="store_true",
                        help="evaluate on the noised test set instead of the compressed-only one")
    parser.add_argument("--no-cache", action="store_true")


def config_from_args(args):
    settings = dict(
        scenario=args.scenario,
        epsilon=args.epsilon,
        base=args.base,
        n_clients=args.clients,
        local_epochs=args.local_epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        noise_test=args.noise_test,
        out_dir=args.out,
    )
    if args.data_dir is not None:
        settings["data_dir"] = args.data_dir
    if args.rounds is not None:
        settings["rounds"] = args.rounds
    if args.lr is not None:
        settings["lr"] = args.lr
    if args.fast:
        return experiment.ExperimentConfig.fast(**settings)
    return experiment.ExperimentConfig(**settings)


def cmd_prepare(args):
    config = config_from_args(args)
    clients, test_set = experiment.prepare(config, cache=True)
    draws = sum(c.private.noise_draws for c in clients)
    print(f"prepared {sum(len(c.private) for c in clients)} training images for {len(clients)} clients "
          f"and {len(test_set)} test images at {config.dimension}x{config.dimension}")
    print(f"noise draws (training): {draws}")
    print(f"cache: {config.cache_dir}")


def cmd_train(args):
    config = config_from_args(args)
    report = experiment.run_scenario(config, cache=not args.no_cache)
    sys.stdout.write(report.to_json())
    print(f"run directory: {config.run_dir}")


def cmd_grid(args):
    base = config_from_args(args)
    reports = experiment.run_grid(base, cache=not args.no_cache)
    print(experiment.format_summary(reports))
    print(f"summary: {base.out_dir}/grid_summary.csv")


def cmd_dump_samples(args):
    config = config_from_args(args)
    written = experiment.dump_samples(config, args.count)
    for path in written:
        print(path)


def cmd_leakage(args):
    PrivacyParams(args.epsilon)
    rounds = args.rounds if args.rounds is not None else 10
    print(f"epsilon per application: {args.epsilon:g}")
    print(f"one-shot data noising after {rounds} rounds: {cumulative_leakage(args.epsilon, 1):g}")
    print(f"per-round gradient noising after {rounds} rounds: {cumulative_leakage(args.epsilon, rounds):g}")


def build_parser():
    parser = argparse.ArgumentParser(prog="henselfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, help_text in [
        ("prepare", cmd_prepare, "compress and noise the client shards and test set once, caching them"),
        ("train", cmd_train, "run one scenario/epsilon cell"),
        ("grid", cmd_grid, "run all nine scenario/epsilon cells"),
        ("dump-samples", cmd_dump_samples, "write clean and noisy sample images as PGM"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(func=func)
        if name == "dump-samples":
            p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("leakage", help="compare one-shot and per-round cumulative leakage")
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--rounds", type=int, default=None)
    p.set_defaults(func=cmd_leakage)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except HenselFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())

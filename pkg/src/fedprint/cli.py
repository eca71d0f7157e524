"""Command-line entry points: fedprint gen / train / cross / run / report /
serve / client."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import datapipe, fedavg, harness, neuralnet, signalgen


def _parse_phi(text: str) -> tuple[float, ...]:
    if text.startswith("phi="):
        text = text[4:]
    return tuple(float(v) for v in text.split(",") if v)


def _find_scenario(name: str, seed: int, catalog_path=None) -> signalgen.ChannelScenario:
    if catalog_path:
        scenarios = signalgen.read_scenario_catalog(catalog_path)
    else:
        scenarios = harness.desk_scenarios(seed=seed) + harness.tissue_scenarios(seed=seed)
    for s in scenarios:
        if s.name == name:
            return s
    raise SystemExit(f"scenario {name!r} not found; known: {[s.name for s in scenarios]}")


def cmd_gen(args) -> int:
    scenario = _find_scenario(args.scenario, args.seed, args.catalog)
    profiles = signalgen.generate_tag_population(args.tags, args.seed)
    waves = signalgen.synthesize_scenario(profiles, scenario, args.comms)
    datapipe.write_corpus(args.out, waves, scenarios=[scenario], seed=args.seed)
    print(f"wrote {len(waves)} communications to {args.out}")
    return 0


def cmd_train(args) -> int:
    spec = harness.ExperimentSpec(
        name=args.name,
        mode="local" if args.augment is None else "local",
        scenario_set=args.scenario_set,
        snr_profile=args.snr_profile,
        tags=args.tags,
        comms_per_tag=args.comms,
        fraction=args.fraction,
        window=args.window,
        conv_blocks=args.convs,
        epochs=args.epochs,
        corpus_seed=args.seed,
        split_seed=args.seed,
        train_seed=args.seed,
    )
    if args.scenario:
        scenario = _find_scenario(args.scenario, args.seed)
        profiles = signalgen.generate_tag_population(args.tags, args.seed)
        corpus = {scenario.name: signalgen.synthesize_scenario(profiles, scenario, args.comms)}
        splits = harness.build_splits(corpus, args.window, args.fraction, args.seed)
    else:
        splits = None
    if args.augment is not None:
        spec = harness.ExperimentSpec(**{**spec.__dict__, "mode": "union+DA",
                                         "augment_phi": _parse_phi(args.augment)})
    record = harness.run_experiment(spec, splits)
    harness.write_record(args.out, record)
    print(f"{spec.name}: test accuracy {record.test_accuracy:.4f} -> {args.out}")
    return 0


def cmd_cross(args) -> int:
    names = args.scenarios.split(",")
    catalog = {s.name: s for s in harness.desk_scenarios(seed=args.seed)
               + harness.tissue_scenarios(seed=args.seed)}
    scenarios = [catalog[n] for n in names]
    corpus = harness.build_corpus(scenarios, args.tags, args.comms, args.seed)
    splits = harness.build_splits(corpus, args.window, args.fraction, args.seed)
    config = neuralnet.ArchConfig(num_conv_blocks=args.convs, input_len=args.window,
                                  num_classes=args.tags)
    matrix, order = harness.run_cross_matrix(splits, config, args.epochs, args.seed)
    os.makedirs(args.out, exist_ok=True)
    np.savetxt(os.path.join(args.out, "cross_matrix.csv"), matrix, fmt="%.6f",
               delimiter=",", header=",".join(order))
    print("train\\test " + " ".join(f"{n:>14s}" for n in order))
    for i, n in enumerate(order):
        print(f"{n:>10s} " + " ".join(f"{matrix[i, j]:14.4f}" for j in range(len(order))))
    return 0


def cmd_run(args) -> int:
    results = harness.run_suite(args.suite, args.out)
    failed = {k: v for k, v in results.items() if v is not None}
    for name, err in results.items():
        status = "ok" if err is None else f"FAILED: {err}"
        print(f"{name}: {status}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    report = harness.emit_report(args.results_dir,
                                 os.path.join(args.results_dir, "report.txt"))
    print(report, end="")
    return 0


def _arch_from_args(args) -> neuralnet.ArchConfig:
    return neuralnet.ArchConfig(num_conv_blocks=args.convs, input_len=args.window,
                                num_classes=args.tags)


def cmd_serve(args) -> int:
    cfg = fedavg.FederatedConfig(
        arch=_arch_from_args(args),
        n_readers=args.readers,
        rounds=args.rounds,
        policy=fedavg.AggregationPolicy(args.policy),
        init_seed=args.seed,
        bootstrap_epochs=args.bootstrap_epochs,
    )
    final = fedavg.serve(args.host, args.port, cfg)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(final)
        print(f"final checkpoint -> {args.out}")
    return 0


def cmd_client(args) -> int:
    waves = datapipe.read_corpus(args.data)
    splits = datapipe.split_corpus(waves, args.window, fraction=args.fraction,
                                   seed=args.seed)
    X, y = datapipe.stack_slices(splits.train)
    client = fedavg.ReaderClient(args.reader_id, _arch_from_args(args), X, y,
                                 train_seed=args.seed)
    host, port = args.server.rsplit(":", 1)
    fedavg.connect(host, int(port), client)
    print(f"reader {args.reader_id} finished")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprint")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a labeled waveform corpus")
    p.add_argument("--scenario", required=True)
    p.add_argument("--tags", type=int, default=20)
    p.add_argument("--comms", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--catalog", default=None, help="scenario catalog JSON")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one classifier")
    p.add_argument("--name", default="train")
    p.add_argument("--scenario", default=None)
    p.add_argument("--scenario-set", default="ota", choices=("ota", "pm"))
    p.add_argument("--snr-profile", default="default", choices=tuple(harness.SNR_PROFILES))
    p.add_argument("--tags", type=int, default=20)
    p.add_argument("--comms", type=int, default=200)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--convs", type=int, default=2)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--augment", default=None, metavar="phi=0.20,0.10,0.05,0.01")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cross", help="cross-channel accuracy matrix")
    p.add_argument("--scenarios", required=True, help="comma-separated names")
    p.add_argument("--tags", type=int, default=20)
    p.add_argument("--comms", type=int, default=200)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--convs", type=int, default=2)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cross)

    p = sub.add_parser("run", help="run an experiment suite file")
    p.add_argument("--suite", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tabulate a results directory")
    p.add_argument("results_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the federated aggregation server")
    p.add_argument("--readers", type=int, required=True)
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--policy", default="uniform", choices=("uniform", "weighted"))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--tags", type=int, default=20)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--convs", type=int, default=2)
    p.add_argument("--bootstrap-epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="final checkpoint path")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run one reader-client")
    p.add_argument("--reader-id", type=int, required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--tags", type=int, default=20)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--convs", type=int, default=2)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_client)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

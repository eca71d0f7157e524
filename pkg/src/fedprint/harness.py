"""Experiment driver: desk-scale corpora, comparator runs, and reports.

Reproduces the evaluation design at desk scale: same-channel training,
the cross-channel accuracy matrix, Union (one model over all scenarios)
and Baseline (mean of every locally-trained model on every scenario)
bounds, federated runs with and without AWGN augmentation, and CSV/report
emission.
"""

from __future__ import annotations

import csv
import json
import os
import time
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import augment as _augment
from . import datapipe, fedavg, neuralnet, signalgen

MODES = ("local", "union", "baseline", "federated", "federated+DA", "union+DA")

# SNR per OTA distance for the two desk profiles. "low" keeps moderate
# SNR: paired with a scarce data fraction it is the regime where AWGN
# augmentation has measurable headroom (at very low SNR the channel noise
# floor dominates the augmentation noise and the gain vanishes).
SNR_PROFILES = {
    "default": {20: 20.0, 50: 14.0, 100: 8.0},
    "low": {20: 14.0, 50: 11.0, 100: 7.0},
}

# One distinct narrowband interferer per scenario pushes models toward
# channel-specific features, mirroring uncontrolled office interference.
_OTA_INTERFERERS = {
    20: ((3.0e5, 0.0), (1.7e6, -9.0)),
    50: ((7.0e5, 0.0), (2.1e6, -9.0)),
    100: ((1.1e6, 0.0), (0.45e6, -9.0)),
}


class HarnessError(RuntimeError):
    pass


def desk_scenarios(snr_profile: str = "default", seed: int = 0) -> list[signalgen.ChannelScenario]:
    """Three over-the-air analogs differing in distance, SNR, and interference."""
    snrs = SNR_PROFILES[snr_profile]
    out = []
    for i, dist in enumerate((20, 50, 100)):
        out.append(
            signalgen.ChannelScenario(
                name=signalgen.encode_scenario_name(dist, None),
                distance_cm=float(dist),
                snr_db=snrs[dist],
                interferers=_OTA_INTERFERERS[dist],
                seed=seed * 1000 + i,
            )
        )
    return out


def tissue_scenarios(seed: int = 0) -> list[signalgen.ChannelScenario]:
    """Two tissue analogs: shallow fat at 20 cm, deep muscle at 50 cm."""
    out = []
    for i, (dist, code, snr) in enumerate(((20, "PM0", 14.0), (50, "PM1", 8.0))):
        out.append(
            signalgen.ChannelScenario(
                name=signalgen.encode_scenario_name(dist, code),
                distance_cm=float(dist),
                obstacle=signalgen.default_obstacle(code),
                snr_db=snr,
                interferers=_OTA_INTERFERERS[dist],
                seed=seed * 1000 + 100 + i,
            )
        )
    return out


def build_corpus(
    scenarios: list[signalgen.ChannelScenario],
    tags: int,
    comms_per_tag: int,
    seed: int,
) -> dict[str, list[signalgen.IQWaveform]]:
    """Same tag population across all scenarios, as in the real collection."""
    profiles = signalgen.generate_tag_population(tags, seed)
    return {
        s.name: signalgen.synthesize_scenario(profiles, s, comms_per_tag)
        for s in scenarios
    }


def build_splits(
    corpus: dict[str, list[signalgen.IQWaveform]],
    window: int,
    fraction: float,
    seed: int,
) -> dict[str, datapipe.SplitDataset]:
    return {
        name: datapipe.split_corpus(waves, window, fraction=fraction, seed=seed)
        for name, waves in corpus.items()
    }


# ---------------------------------------------------------------------------
# Training with validation-based model selection


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1


def train_model(
    config: neuralnet.ArchConfig,
    train_slices: list[datapipe.SliceExample],
    val_slices: list[datapipe.SliceExample],
    epochs: int,
    seed: int,
    batch_size: int = 64,
) -> tuple[neuralnet.ModelState, TrainHistory]:
    """Train up to `epochs`, keeping the best-validation-accuracy weights."""
    X_tr, y_tr = datapipe.stack_slices(train_slices)
    X_va, y_va = datapipe.stack_slices(val_slices)
    state = neuralnet.ModelState(config, seed=seed)
    history = TrainHistory()
    best_acc, best_weights = -1.0, state.get_weights()
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E41, epoch]))
        loss = neuralnet.train_epoch(state, X_tr, y_tr, batch_size, rng)
        acc, _ = neuralnet.evaluate(state, X_va, y_va)
        history.train_loss.append(loss)
        history.val_accuracy.append(acc)
        if acc > best_acc:
            best_acc, best_weights = acc, state.get_weights()
            history.best_epoch = epoch
    state.set_weights(best_weights)
    return state, history


def evaluate_comm_level(state: neuralnet.ModelState,
                        slices: list[datapipe.SliceExample]) -> float:
    """Majority vote over all slices of each communication."""
    X, _ = datapipe.stack_slices(slices)
    pred = []
    for start in range(0, len(X), 256):
        pred.extend(state.forward(X[start : start + 256]).argmax(axis=1))
    votes: dict[tuple[str, int], Counter] = defaultdict(Counter)
    truth: dict[tuple[str, int], int] = {}
    for s, p in zip(slices, pred):
        key = (s.scenario_name, s.comm_id)
        votes[key][int(p)] += 1
        truth[key] = s.label
    correct = sum(1 for key, c in votes.items() if c.most_common(1)[0][0] == truth[key])
    return correct / len(votes)


# ---------------------------------------------------------------------------
# Experiment specs and records


@dataclass
class ExperimentSpec:
    name: str
    mode: str = "union"
    scenario_set: str = "ota"  # ota | pm
    snr_profile: str = "default"
    tags: int = 20
    comms_per_tag: int = 200
    fraction: float = 1.0
    window: int = 1024
    conv_blocks: int = 2
    epochs: int = 30
    rounds: int = 30
    bootstrap_epochs: int = 10
    local_epochs: int = 1
    policy: str = "uniform"
    augment_phi: tuple[float, ...] = _augment.DEFAULT_PHI
    batch_size: int = 64
    corpus_seed: int = 0
    split_seed: int = 0
    train_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise HarnessError(f"unknown mode {self.mode!r}")

    def scenarios(self) -> list[signalgen.ChannelScenario]:
        if self.scenario_set == "ota":
            return desk_scenarios(self.snr_profile, self.corpus_seed)
        if self.scenario_set == "pm":
            return tissue_scenarios(self.corpus_seed)
        raise HarnessError(f"unknown scenario set {self.scenario_set!r}")

    def arch(self) -> neuralnet.ArchConfig:
        return neuralnet.ArchConfig(
            num_conv_blocks=self.conv_blocks,
            input_len=self.window,
            num_classes=self.tags,
        )


@dataclass
class ResultsRecord:
    spec: dict
    curves: dict[str, list[float]]
    test_accuracy: float
    comm_accuracy: float
    confusion: np.ndarray
    wall_clock_s: float

    def validate(self) -> None:
        missing = [f for f in ExperimentSpec.__dataclass_fields__ if f not in self.spec]
        if missing:
            raise HarnessError(f"results record missing spec fields: {missing}")
        if not (0.0 <= self.test_accuracy <= 1.0):
            raise HarnessError("accuracy out of [0, 1]")


def _concat(parts: list[list[datapipe.SliceExample]]) -> list[datapipe.SliceExample]:
    out: list[datapipe.SliceExample] = []
    for p in parts:
        out.extend(p)
    return out


def _maybe_augment(spec: ExperimentSpec, train_slices):
    if spec.mode.endswith("+DA"):
        cfg = _augment.AugmentConfig(tuple(spec.augment_phi), seed=spec.train_seed)
        return _augment.augment_slices(train_slices, cfg)
    return train_slices


def run_experiment(spec: ExperimentSpec,
                   splits: dict[str, datapipe.SplitDataset] | None = None) -> ResultsRecord:
    """Run one experiment spec end to end; splits may be passed in to reuse
    an already-built corpus."""
    t0 = time.monotonic()
    if splits is None:
        corpus = build_corpus(spec.scenarios(), spec.tags, spec.comms_per_tag,
                              spec.corpus_seed)
        splits = build_splits(corpus, spec.window, spec.fraction, spec.split_seed)
    names = sorted(splits)
    config = spec.arch()

    if spec.mode == "local":
        sd = splits[names[0]]
        model, hist = train_model(config, _maybe_augment(spec, sd.train), sd.validation,
                                  spec.epochs, spec.train_seed, spec.batch_size)
        test = sd.test
        X, y = datapipe.stack_slices(test)
        acc, confusion = neuralnet.evaluate(model, X, y)
        curves = {"train_loss": hist.train_loss, "val_accuracy": hist.val_accuracy}

    elif spec.mode in ("union", "union+DA"):
        train = _maybe_augment(spec, _concat([splits[n].train for n in names]))
        val = _concat([splits[n].validation for n in names])
        test = _concat([splits[n].test for n in names])
        model, hist = train_model(config, train, val, spec.epochs, spec.train_seed,
                                  spec.batch_size)
        X, y = datapipe.stack_slices(test)
        acc, confusion = neuralnet.evaluate(model, X, y)
        curves = {"train_loss": hist.train_loss, "val_accuracy": hist.val_accuracy}

    elif spec.mode == "baseline":
        models = {}
        losses = []
        for n in names:
            sd = splits[n]
            m, hist = train_model(config, _maybe_augment(spec, sd.train), sd.validation,
                                  spec.epochs, spec.train_seed, spec.batch_size)
            models[n] = m
            losses.append(hist.train_loss)
        accs = []
        confusion = np.zeros((spec.tags, spec.tags), dtype=np.int64)
        for n in names:
            for n2 in names:
                X, y = datapipe.stack_slices(splits[n2].test)
                a, c = neuralnet.evaluate(models[n], X, y)
                accs.append(a)
                confusion += c
        acc = float(np.mean(accs))
        test = _concat([splits[n].test for n in names])
        model = models[names[0]]
        curves = {"train_loss": list(np.mean(losses, axis=0))}

    elif spec.mode in ("federated", "federated+DA"):
        acc, confusion, curves, model, test = _run_federated(spec, splits, names, config)

    else:  # pragma: no cover
        raise HarnessError(f"unhandled mode {spec.mode}")

    comm_acc = evaluate_comm_level(model, test)
    record = ResultsRecord(
        spec=asdict(spec),
        curves=curves,
        test_accuracy=acc,
        comm_accuracy=comm_acc,
        confusion=confusion,
        wall_clock_s=time.monotonic() - t0,
    )
    record.validate()
    return record


def _run_federated(spec, splits, names, config):
    clients = []
    for rid, n in enumerate(names):
        train = _maybe_augment(spec, splits[n].train)
        X, y = datapipe.stack_slices(train)
        clients.append(
            fedavg.ReaderClient(rid, config, X, y, train_seed=spec.train_seed,
                                batch_size=spec.batch_size)
        )
    test = _concat([splits[n].test for n in names])
    X_test, y_test = datapipe.stack_slices(test)
    local_tests = {n: datapipe.stack_slices(splits[n].test) for n in names}

    union_curve: list[float] = []
    local_curves: dict[str, list[float]] = {n: [] for n in names}
    probe = neuralnet.ModelState(config, seed=spec.train_seed)

    def on_round_end(round_index, weights):
        probe.set_weights(weights)
        a, _ = neuralnet.evaluate(probe, X_test, y_test)
        union_curve.append(a)
        for n in names:
            la, _ = neuralnet.evaluate(probe, *local_tests[n])
            local_curves[n].append(la)

    fed_cfg = fedavg.FederatedConfig(
        arch=config,
        n_readers=len(names),
        rounds=spec.rounds,
        policy=fedavg.AggregationPolicy(spec.policy),
        init_seed=spec.train_seed,
        bootstrap_epochs=spec.bootstrap_epochs,
        local_epochs=spec.local_epochs,
    )
    final, _server = fedavg.run_federated_in_process(clients, fed_cfg, on_round_end)
    _, weights = neuralnet.decode_weights(final)
    model = neuralnet.ModelState(config, seed=spec.train_seed)
    model.set_weights(weights)
    acc, confusion = neuralnet.evaluate(model, X_test, y_test)
    curves = {"union_test_accuracy": union_curve}
    for n in names:
        curves[f"local_test_accuracy[{n}]"] = local_curves[n]
    return acc, confusion, curves, model, test


# ---------------------------------------------------------------------------
# Named comparator operations


def compute_union(spec: ExperimentSpec, splits=None) -> ResultsRecord:
    if spec.mode not in ("union", "union+DA"):
        raise HarnessError("compute_union requires a union-mode spec")
    return run_experiment(spec, splits)


def compute_baseline(spec: ExperimentSpec, splits=None) -> ResultsRecord:
    if spec.mode != "baseline":
        raise HarnessError("compute_baseline requires a baseline-mode spec")
    return run_experiment(spec, splits)


def run_cross_matrix(
    splits: dict[str, datapipe.SplitDataset],
    config: neuralnet.ArchConfig,
    epochs: int,
    train_seed: int = 0,
    batch_size: int = 64,
) -> tuple[np.ndarray, list[str]]:
    """Train one model per scenario, test each on every scenario's test split.

    Rows index the training scenario, columns the test scenario.
    """
    names = sorted(splits)
    models = {}
    for n in names:
        sd = splits[n]
        models[n], _ = train_model(config, sd.train, sd.validation, epochs,
                                   train_seed, batch_size)
    matrix = np.zeros((len(names), len(names)))
    for i, n in enumerate(names):
        for j, n2 in enumerate(names):
            X, y = datapipe.stack_slices(splits[n2].test)
            matrix[i, j], _ = neuralnet.evaluate(models[n], X, y)
    return matrix, names


# ---------------------------------------------------------------------------
# Suite runner and reporting


def _spec_from_dict(d: dict) -> ExperimentSpec:
    d = dict(d)
    if "augment_phi" in d:
        d["augment_phi"] = tuple(d["augment_phi"])
    return ExperimentSpec(**d)


def write_record(out_dir, record: ResultsRecord) -> None:
    os.makedirs(out_dir, exist_ok=True)
    spec = dict(record.spec)
    spec["augment_phi"] = list(spec["augment_phi"])
    with open(os.path.join(out_dir, "spec"), "w") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        keys = sorted(record.curves)
        writer.writerow(["step"] + keys)
        length = max((len(v) for v in record.curves.values()), default=0)
        for i in range(length):
            row = [i] + [
                f"{record.curves[k][i]:.10g}" if i < len(record.curves[k]) else ""
                for k in keys
            ]
            writer.writerow(row)
    np.savetxt(os.path.join(out_dir, "confusion.csv"), record.confusion,
               fmt="%d", delimiter=",")
    with open(os.path.join(out_dir, "summary"), "w") as fh:
        fh.write(f"test_accuracy {record.test_accuracy:.10g}\n")
        fh.write(f"comm_accuracy {record.comm_accuracy:.10g}\n")
        fh.write(f"wall_clock_s {record.wall_clock_s:.3f}\n")


def read_record(out_dir) -> ResultsRecord:
    with open(os.path.join(out_dir, "spec")) as fh:
        spec = json.load(fh)
    curves: dict[str, list[float]] = {}
    with open(os.path.join(out_dir, "curves.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for key in header[1:]:
            curves[key] = []
        for row in reader:
            for key, cell in zip(header[1:], row[1:]):
                if cell:
                    curves[key].append(float(cell))
    confusion = np.loadtxt(os.path.join(out_dir, "confusion.csv"),
                           delimiter=",", dtype=np.int64, ndmin=2)
    summary = {}
    with open(os.path.join(out_dir, "summary")) as fh:
        for line in fh:
            k, v = line.split()
            summary[k] = float(v)
    record = ResultsRecord(spec, curves, summary["test_accuracy"],
                           summary["comm_accuracy"], confusion,
                           summary["wall_clock_s"])
    record.validate()
    return record


def run_suite(specs_path, out_dir) -> dict[str, str | None]:
    """Run every spec in a suite file; one failed spec does not abort the rest.

    Returns {spec name: error string or None}.
    """
    with open(specs_path) as fh:
        doc = json.load(fh)
    results: dict[str, str | None] = {}
    for d in doc["experiments"]:
        spec = _spec_from_dict(d)
        spec_dir = os.path.join(out_dir, spec.name)
        try:
            record = run_experiment(spec)
            write_record(spec_dir, record)
            results[spec.name] = None
        except Exception as exc:
            os.makedirs(spec_dir, exist_ok=True)
            with open(os.path.join(spec_dir, "error"), "w") as fh:
                fh.write(f"{type(exc).__name__}: {exc}\n")
            results[spec.name] = str(exc)
    return results


def emit_report(results_dir, out_path=None) -> str:
    """Tabulate every record in a results directory."""
    rows = []
    for name in sorted(os.listdir(results_dir)):
        spec_dir = os.path.join(results_dir, name)
        if not os.path.isdir(spec_dir):
            continue
        if os.path.exists(os.path.join(spec_dir, "error")):
            with open(os.path.join(spec_dir, "error")) as fh:
                rows.append((name, "-", "-", "-", "-", fh.read().strip()))
            continue
        r = read_record(spec_dir)
        rows.append((name, r.spec["mode"], r.spec["tags"], r.spec["fraction"],
                     f"{r.test_accuracy:.4f}", ""))
    lines = [f"{'name':30s} {'mode':14s} {'tags':>5s} {'frac':>5s} {'test_acc':>9s}  note"]
    for name, mode, tags, frac, acc, note in rows:
        lines.append(f"{name:30s} {str(mode):14s} {str(tags):>5s} {str(frac):>5s} "
                     f"{acc:>9s}  {note}")
    report = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(report)
    return report

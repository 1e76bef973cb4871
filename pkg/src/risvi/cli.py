"""Command-line entry point: ``risvi {gen-data,train,sweep,report}``.

A run is described by one JSON document; unknown keys are rejected.  Every
command writes the fully resolved configuration next to its outputs as
``<command>.resolved.json``.

Exit codes: 0 success, 2 invalid configuration or input, 3 missing artifact,
4 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from risvi.channel import SystemConfig
from risvi.elbo import PriorParams
from risvi.encoder import load_checkpoint, save_checkpoint
from risvi.errors import (
    ConfigError,
    ContractViolation,
    InvalidDimensionError,
    MissingArtifactError,
    NumericalFailure,
    TrainingFailure,
)
from risvi.harness import (
    CSV_HEADER,
    METHODS,
    ProtocolSpec,
    SweepScenario,
    read_records,
    run_sweep,
    summarize,
    write_records,
)
from risvi.inference import (
    KINDS,
    HeadConstants,
    TrainConfig,
    generate_dataset,
    make_scenario,
    train_amortized,
)
from risvi.records import load_dataset, save_dataset

log = logging.getLogger("risvi")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
THREADS_ENV = "RIS_VI_THREADS"
U64_MAX = 2**64 - 1


@dataclass
class SweepSection:
    snr_db: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0])
    trials: int = 50
    methods: list = field(default_factory=lambda: ["perfect_csi", "random_phase"])
    checkpoints: list = field(default_factory=list)

    def __post_init__(self):
        if self.trials < 0:
            raise ConfigError("sweep.trials must be >= 0")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        self.snr_db = [float(s) for s in self.snr_db]


@dataclass
class OutputSection:
    dataset: str = "dataset.bin"
    checkpoint: str = "model.ckpt"
    curve: str = "curve.csv"
    metrics: str = "metrics.csv"
    report: str = "report.csv"


@dataclass
class RunConfig:
    name: str = "desk"
    kind: str = "JCE"
    seed: int = 0
    scenario: SystemConfig = field(default_factory=SystemConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: dict = field(default_factory=lambda: {"T_G_ms": 100.0, "T_h_ms": 0.1, "slots_per_block": 40})
    prior: PriorParams = field(default_factory=PriorParams)
    heads: HeadConstants = field(default_factory=HeadConstants)
    sweep: SweepSection = field(default_factory=SweepSection)
    outputs: OutputSection = field(default_factory=OutputSection)

    def protocol_spec(self, scheme="JCE"):
        return ProtocolSpec(scheme=scheme, **self.protocol)

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "scenario": SystemConfig,
    "train": TrainConfig,
    "prior": PriorParams,
    "heads": HeadConstants,
    "sweep": SweepSection,
    "outputs": OutputSection,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def parse_config(data):
    """Validate a config mapping and fill defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], value, key)
        elif key == "protocol":
            _build(ProtocolSpec, value, key)
            if "scheme" in value:
                raise ConfigError("protocol.scheme is implied by the method")
            kw[key] = {**RunConfig().protocol, **value}
        else:
            kw[key] = value
    cfg = RunConfig(**kw)
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}")
    _check_seed(cfg.seed)
    for prior_value in asdict(cfg.prior).values():
        if not prior_value > 0:
            raise ConfigError("prior parameters must be positive")
    for scheme in ("JCE", "JCCE"):
        try:
            cfg.protocol_spec(scheme)
        except ContractViolation as exc:
            raise ConfigError(f"invalid protocol: {exc}") from exc
    return cfg


def _check_seed(seed):
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= U64_MAX:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")


def load_config(path):
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(data)


def resolve_threads(flag):
    if flag is not None:
        threads = flag
    else:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return 1
        try:
            threads = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    if threads < 1:
        raise ConfigError("thread count must be >= 1")
    return threads


def _out(args, name):
    return os.path.join(args.out, name)


def write_sidecar(args, cfg, command, extra=None):
    doc = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    with open(_out(args, f"{command}.resolved.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args, cfg, threads):
    scn = make_scenario(cfg.scenario, cfg.seed)
    data = generate_dataset(cfg.kind, scn, cfg.train.dataset_size, cfg.seed, threads)
    path = _out(args, cfg.outputs.dataset)
    save_dataset(path, data, cfg.scenario, cfg.seed, cfg.kind, extra={"name": cfg.name})
    write_sidecar(args, cfg, "gen-data")
    log.info("wrote %d records to %s", cfg.train.dataset_size, path)


def _check_dataset(header, arrays, cfg):
    if header["kind"] != cfg.kind:
        raise ContractViolation(f"dataset holds {header['kind']} signals, config asks for {cfg.kind}")
    sc = cfg.scenario
    expected = (sc.M, sc.N_p) if cfg.kind == "JCE" else (sc.M * sc.N_p, sc.N_b)
    key = "Y" if cfg.kind == "JCE" else "Ytil"
    if key not in arrays or arrays[key].shape[1:] != expected:
        raise InvalidDimensionError(f"dataset signal shape does not match the scenario {expected}")
    if header["config"] != sc.to_dict():
        raise ContractViolation("dataset was generated for a different scenario")


def cmd_train(args, cfg, threads):
    scn = make_scenario(cfg.scenario, cfg.seed)
    ds_path = args.dataset or _out(args, cfg.outputs.dataset)
    if os.path.exists(ds_path) or args.dataset:
        arrays, header = load_dataset(ds_path)
        _check_dataset(header, arrays, cfg)
    else:
        arrays = generate_dataset(cfg.kind, scn, cfg.train.dataset_size, cfg.seed, threads)

    def progress(step, row, lr):
        log.info("step %d train %.6g holdout %.6g lr %.3g", step, row[1], row[2], lr)

    result = train_amortized(
        cfg.kind, scn, cfg.train, cfg.seed, prior=cfg.prior, heads=cfg.heads,
        dataset=arrays, threads=threads, callback=progress,
    )
    meta = {
        "name": cfg.name,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "snr_db": float(cfg.scenario.snr_db),
        "scenario": cfg.scenario.to_dict(),
        "heads": asdict(cfg.heads.resolved(cfg.scenario)),
        "best_step": result.best_step,
        "steps": result.steps,
    }
    save_checkpoint(_out(args, cfg.outputs.checkpoint), result.encoders, meta)
    with open(_out(args, cfg.outputs.curve), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "train_elbo", "holdout_elbo"])
        for step, train_loss, hold_loss in result.curve:
            # the ELBO is the negative loss; the first row has no training value yet
            train_elbo = "" if np.isnan(train_loss) else repr(-train_loss)
            writer.writerow([step, train_elbo, repr(-hold_loss)])
    write_sidecar(args, cfg, "train")


def _snr_key(snr):
    return round(float(snr), 6)


def load_models(paths, cfg):
    models = {}
    for path in paths:
        encoders, meta = load_checkpoint(path)
        if meta.get("scenario", {}) | {"rho": cfg.scenario.rho} != cfg.scenario.to_dict():
            raise ContractViolation(f"checkpoint {path} was trained for a different scenario")
        models[(cfg.name, _snr_key(meta["snr_db"]), meta["kind"])] = encoders
    return models


def cmd_sweep(args, cfg, threads):
    paths = list(cfg.sweep.checkpoints) + list(args.checkpoint or [])
    models = load_models(paths, cfg)
    snrs = [_snr_key(s) for s in cfg.sweep.snr_db]
    for method in cfg.sweep.methods:
        if method in KINDS:
            for snr in snrs:
                if (cfg.name, snr, method) not in models:
                    raise MissingArtifactError(
                        f"scenario {cfg.name!r}: no {method} checkpoint for {snr} dB"
                    )
    records = run_sweep(
        [SweepScenario(cfg.name, cfg.scenario, cfg.seed)], snrs, cfg.sweep.trials,
        cfg.sweep.methods, models=models, protocol=cfg.protocol_spec(), threads=threads,
    )
    write_records(_out(args, cfg.outputs.metrics), records)
    write_sidecar(args, cfg, "sweep", {"checkpoints": sorted(paths)})
    log.info("wrote %d records", len(records))


def cmd_report(args, cfg, threads):
    metrics = args.metrics or _out(args, cfg.outputs.metrics)
    if not os.path.exists(metrics):
        raise MissingArtifactError(f"metrics file not found: {metrics}")
    rows = summarize(read_records(metrics))
    cols = ["scenario", "snr_db", "method", "trials"] + list(CSV_HEADER[4:])
    with open(_out(args, cfg.outputs.report), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float)
                             else row[c] for c in cols])
    for row in rows:
        cap = row["capacity"]
        print(f"{row['scenario']:>10} {row['snr_db']:>7.2f} dB {row['method']:>13}  C={cap:.4f}")
    write_sidecar(args, cfg, "report")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="risvi", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a training dataset")
    p = sub.add_parser("train", parents=[common], help="train the encoders")
    p.add_argument("--dataset", metavar="PATH", help="dataset file (default: generate in memory)")
    p = sub.add_parser("sweep", parents=[common], help="Monte-Carlo evaluation sweep")
    p.add_argument("--checkpoint", action="append", metavar="PATH", help="trained model (repeatable)")
    p = sub.add_parser("report", parents=[common], help="summarize a metrics CSV")
    p.add_argument("--metrics", metavar="PATH", help="metrics CSV (default: from config outputs)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            _check_seed(args.seed)
            cfg.seed = args.seed
        threads = resolve_threads(args.threads)
        try:
            os.makedirs(args.out, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {args.out}: {exc}") from exc
        # BLAS stays single-threaded so results never depend on the worker count
        with threadpool_limits(limits=1):
            COMMANDS[args.command](args, cfg, threads)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalFailure, TrainingFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ContractViolation, InvalidDimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

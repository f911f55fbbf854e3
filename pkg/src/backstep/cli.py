"""Command-line entry point: ``backstep {simulate,dataset,train,bench,model}``.

Settings come from an INI file (``--config``) with sections ``[plant]``,
``[controller]``, ``[run]``, ``[dataset]``, ``[train]`` and ``[bench]``;
flags and ``--set section.key=value`` override it.

Exit codes: 0 success, 1 configuration error, 2 numerical blow-up, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import dataset as dataset_mod
from . import deeponet
from .adaptive import LyapunovConfig, PassiveConfig
from .numerics import Grid1D, GridFunction, l2_norm, sup_norm
from .plant import (
    BlowUpError,
    ConfigError,
    ControllerSpec,
    PlantConfig,
    chebyshev_beta,
    run_closed_loop,
)
from .volterra import exact_kernel

log = logging.getLogger("backstep")

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_IO = 0, 1, 2, 3
CONTROLLERS = ("exact-lyapunov", "no-lyapunov", "exact-passive", "no-passive", "open-loop")
MANIFEST = "manifest.json"
SHIPPED_MODEL = "default"


@dataclass
class ExperimentConfig:
    # [plant]
    dx: float = 0.01
    dt: float = 5e-3
    sigma: float = 2.9
    amplitude: float = 5.0
    u0: float = 1.0
    B: float = 5.0
    # [controller]
    controller: str = "exact-lyapunov"
    gamma: float = 1e-2
    c: float = 1.0
    gamma0: float = 1.0
    beta_hat0: float = 1.0
    # [run]
    T: float = 13.0
    sample_every: float = 0.01
    seed: int = 0
    model: str = ""
    dataset: str = ""
    output: str = ""
    # [dataset]
    n_runs: int = 10
    sigma_low: float = 2.7
    sigma_high: float = 3.2
    dataset_T: float = 10.0
    subsample: float = 0.01
    workers: int = 1
    # [train]
    epochs: int = 500
    lr: float = 1e-3
    final_lr: float = 1e-5
    batch_size: int = 128
    test_fraction: float = 0.1
    # [bench]
    dx_list: tuple = (0.01, 0.001, 0.0005, 0.0001)
    n_repeats: int = 100


# (section, key) -> field name
INI_KEYS = {
    **{("plant", k): k for k in ("dx", "dt", "sigma", "amplitude", "u0", "B")},
    **{("controller", k): k for k in ("gamma", "c", "gamma0", "beta_hat0")},
    ("controller", "kind"): "controller",
    **{("run", k): k for k in ("T", "sample_every", "seed", "model", "dataset", "output")},
    **{("dataset", k): k for k in ("n_runs", "sigma_low", "sigma_high", "subsample", "workers")},
    ("dataset", "T"): "dataset_T",
    **{("train", k): k for k in ("epochs", "lr", "final_lr", "batch_size", "test_fraction")},
    **{("bench", k): k for k in ("dx_list", "n_repeats")},
}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
        if kind == "tuple":
            return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise CliError(EXIT_CONFIG, f"config field {name!r}: cannot parse {raw!r}") from None


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise CliError(EXIT_CONFIG, f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                name = INI_KEYS.get((section, key))
                if name is None:
                    raise CliError(EXIT_CONFIG, f"config field {section}.{key!r} is not recognised")
                setattr(cfg, name, _coerce(name, raw))
    for name, raw in overrides:
        setattr(cfg, name, _coerce(name, raw))
    return cfg


def validate(cfg: ExperimentConfig, command: str) -> None:
    def bad(field, msg):
        raise CliError(EXIT_CONFIG, f"config field {field!r}: {msg}")

    for name in ("dx", "dt", "B", "c", "gamma", "gamma0", "T", "sample_every", "subsample",
                 "dataset_T", "lr"):
        if not getattr(cfg, name) > 0:
            bad(name, "must be positive")
    try:
        Grid1D.from_dx(cfg.dx)
    except ValueError as exc:
        bad("dx", str(exc))
    if cfg.dt > cfg.dx * (1 + 1e-12):
        bad("dt", f"CFL violated: dt={cfg.dt} exceeds dx={cfg.dx}")
    if cfg.controller not in CONTROLLERS:
        bad("controller", f"unknown kind {cfg.controller!r}; choose from {', '.join(CONTROLLERS)}")
    if abs(cfg.amplitude) > cfg.B:
        bad("amplitude", f"plant coefficient amplitude exceeds bound B={cfg.B}")
    if abs(cfg.beta_hat0) > cfg.B:
        bad("beta_hat0", f"initial estimate exceeds bound B={cfg.B}")
    if cfg.sample_every < cfg.dt * (1 - 1e-9):
        bad("sample_every", "must be at least dt")
    if command == "simulate" and cfg.controller.startswith("no-") and cfg.model != SHIPPED_MODEL:
        if not cfg.model:
            bad("model", "neural controllers need a model file")
        if not Path(cfg.model).is_file():
            bad("model", f"file {cfg.model} does not exist")
    if command == "train":
        if not cfg.dataset:
            bad("dataset", "training needs a dataset file")
        if not Path(cfg.dataset).is_file():
            bad("dataset", f"file {cfg.dataset} does not exist")
        if cfg.epochs < 1 or cfg.batch_size < 1:
            bad("epochs", "epochs and batch_size must be >= 1")
    if command == "dataset" and not cfg.sigma_low < cfg.sigma_high:
        bad("sigma_low", "must be below sigma_high")
    if command == "bench":
        if not cfg.model or (cfg.model != SHIPPED_MODEL and not Path(cfg.model).is_file()):
            bad("model", "benchmarking needs an existing model file")
        if cfg.n_repeats < 2:
            bad("n_repeats", "must be >= 2")
    if not cfg.output:
        bad("output", "an output directory is required")


# Manifests.


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_echo(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for path_field in ("model", "dataset", "output"):
        d.pop(path_field)
    d["dx_list"] = list(d["dx_list"])
    return d


def prepare_output(cfg: ExperimentConfig, force: bool) -> Path:
    out = Path(cfg.output)
    if (out / MANIFEST).exists() and not force:
        raise CliError(EXIT_IO, f"{out} already holds a manifest; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    return out


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, inputs: dict,
                   outputs: list, result: dict) -> Path:
    echo = _config_echo(cfg)
    content = json.dumps({"command": command, "config": echo, "inputs": inputs}, sort_keys=True)
    manifest = {
        "command": command,
        "config": echo,
        "inputs": inputs,
        "input_hash": hashlib.sha256(content.encode()).hexdigest(),
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "result": result,
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# Commands.


def shipped_model_path() -> Path:
    return Path(str(resources.files("backstep") / "data" / "default_model.don"))


def _resolve_model(cfg) -> Path:
    return shipped_model_path() if cfg.model == SHIPPED_MODEL else Path(cfg.model)


def _load_model(path: Path):
    try:
        return deeponet.load_model(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read model {path}: {exc}") from None
    except deeponet.ModelFormatError as exc:
        raise CliError(EXIT_IO, f"bad model file {path}: {exc}") from None


def build_controller(cfg: ExperimentConfig, grid: Grid1D) -> ControllerSpec:
    kind = cfg.controller
    if kind.startswith("no-"):
        kernel = deeponet.NeuralKernel(_load_model(_resolve_model(cfg)), grid)
    else:
        kernel = exact_kernel
    return ControllerSpec(
        kind="open-loop" if kind == "open-loop" else kind.split("-", 1)[1],
        kernel=kernel,
        lyapunov=LyapunovConfig(gamma=cfg.gamma, c=cfg.c, B=cfg.B),
        passive=PassiveConfig(gamma=cfg.gamma, gamma0=cfg.gamma0, B=cfg.B),
        beta_hat0=GridFunction.constant(grid, cfg.beta_hat0),
    )


def cmd_simulate(cfg: ExperimentConfig, force: bool = False) -> int:
    validate(cfg, "simulate")
    out = prepare_output(cfg, force)
    grid = Grid1D.from_dx(cfg.dx)
    try:
        plant = PlantConfig(
            grid, cfg.dt, chebyshev_beta(grid, cfg.sigma, cfg.amplitude),
            GridFunction.constant(grid, cfg.u0), cfg.B,
        )
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    ctrl = build_controller(cfg, grid)
    inputs = {}
    if cfg.controller.startswith("no-"):
        inputs["model"] = sha256_file(_resolve_model(cfg))

    code = EXIT_OK
    try:
        traj = run_closed_loop(plant, ctrl, cfg.T, cfg.sample_every)
        status = "completed"
    except BlowUpError as exc:
        traj = exc.trajectory
        status = f"blow-up at t={exc.t:.4f}"
        code = EXIT_BLOWUP
        log.error("numerical blow-up at t=%.4f; partial outputs written", exc.t)
    try:
        written = traj.write_csv(out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write trajectory: {exc}") from None
    u_final = GridFunction(grid, traj.u[-1]) if len(traj) else GridFunction.zeros(grid)
    result = {
        "status": status,
        "t_final": float(traj.t[-1]) if len(traj) else 0.0,
        "u_l2_final": l2_norm(u_final),
        "u_sup_final": sup_norm(u_final),
        "u_sup_initial": sup_norm(plant.u0),
    }
    write_manifest(out, "simulate", cfg, inputs, written, result)
    log.info("simulate: %s, |u(T)| = %.3e", status, result["u_l2_final"])
    return code


def cmd_dataset(cfg: ExperimentConfig, force: bool = False) -> int:
    validate(cfg, "dataset")
    out = prepare_output(cfg, force)
    ds = dataset_mod.generate(
        cfg.n_runs, cfg.sigma_low, cfg.sigma_high, cfg.dataset_T, cfg.subsample, cfg.seed,
        dx=cfg.dx, dt=cfg.dt, gamma=cfg.gamma, c=cfg.c, B=cfg.B, amplitude=cfg.amplitude,
        u0=cfg.u0, beta_hat0=cfg.beta_hat0, workers=cfg.workers,
    )
    path = out / "dataset.kds"
    try:
        dataset_mod.save(ds, path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    result = {
        "samples": len(ds),
        "flagged_samples": int(ds.blown.sum()),
        "sigmas": sorted({float(s) for s in ds.sigmas}),
    }
    write_manifest(out, "dataset", cfg, {}, [path], result)
    log.info("dataset: %d samples written to %s", len(ds), path)
    return EXIT_OK


def cmd_export_csv(src: str, dst: str) -> int:
    ds = _load_dataset(src)
    try:
        dataset_mod.export_csv(ds, dst)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {dst}: {exc}") from None
    return EXIT_OK


def _load_dataset(path):
    try:
        return dataset_mod.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from None
    except dataset_mod.DatasetFormatError as exc:
        raise CliError(EXIT_IO, str(exc)) from None


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> int:
    validate(cfg, "train")
    out = prepare_output(cfg, force)
    ds = _load_dataset(cfg.dataset)
    model = deeponet.DeepOnetModel.initialize(m=ds.m, seed=cfg.seed, B=cfg.B)
    try:
        report = deeponet.train(
            ds, model, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
            seed=cfg.seed, test_fraction=cfg.test_fraction, final_lr=cfg.final_lr,
            log_every=max(cfg.epochs // 10, 1), logger=log,
        )
    except deeponet.TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_BLOWUP
    path = out / "model.don"
    deeponet.save_model(model, path)
    (out / "train_report.json").write_text(json.dumps(
        {k: v for k, v in dataclasses.asdict(report).items() if k != "loss_history"},
        indent=2) + "\n")
    result = {
        "n_params": model.n_params,
        "epochs_run": report.epochs_run,
        "final_train_rel_l2": report.final_train_rel_l2,
        "final_test_rel_l2": report.final_test_rel_l2,
        "final_train_loss": report.final_train_loss,
    }
    write_manifest(out, "train", cfg, {"dataset": sha256_file(cfg.dataset)}, [path], result)
    log.info("train: test relative L2 %.3e in %.1fs", report.final_test_rel_l2, report.wall_time_s)
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, force: bool = False) -> int:
    validate(cfg, "bench")
    out = prepare_output(cfg, force)
    model_path = _resolve_model(cfg)
    model = _load_model(model_path)
    if cfg.dataset:
        ds = _load_dataset(cfg.dataset)
        ref = ds.beta_hat[len(ds) // 2]
        sensors = ds.sensors

        def family(x):
            return np.interp(x, sensors, ref)
    else:
        def family(x):
            return np.full_like(x, cfg.beta_hat0)
    try:
        results = bench_mod.run_bench(cfg.dx_list, cfg.n_repeats, model, family)
    except bench_mod.BenchGateError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    csv_path = out / "bench.csv"
    bench_mod.write_csv(results, csv_path)
    table = bench_mod.format_table(results)
    (out / "bench.txt").write_text(table + "\n")
    print(table)
    inputs = {"model": sha256_file(model_path)}
    if cfg.dataset:
        inputs["dataset"] = sha256_file(cfg.dataset)
    write_manifest(out, "bench", cfg, inputs, [csv_path],
                   {"speedups": [r.speedup for r in results]})
    return EXIT_OK


def cmd_model_inspect(path: str) -> int:
    p = shipped_model_path() if path == SHIPPED_MODEL else Path(path)
    try:
        info = deeponet.inspect_model(p)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read model {p}: {exc}") from None
    except deeponet.ModelFormatError as exc:
        raise CliError(EXIT_IO, f"bad model file {p}: {exc}") from None
    for key, value in info.items():
        print(f"{key}: {value}")
    return EXIT_OK


# Argument parsing.

_FLAG_FIELDS = {
    "dx": "dx", "dt": "dt", "sigma": "sigma", "B": "B", "u0": "u0",
    "controller": "controller", "gamma": "gamma", "c": "c", "gamma0": "gamma0",
    "beta_hat0": "beta_hat0", "T": "T", "sample_every": "sample_every", "seed": "seed",
    "model": "model", "dataset": "dataset", "output": "output", "epochs": "epochs",
    "n_runs": "n_runs", "dataset_T": "dataset_T", "n_repeats": "n_repeats",
    "dx_list": "dx_list", "workers": "workers",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    p.add_argument("-o", "--output", dest="output")
    for flag in ("dx", "dt", "sigma", "B", "u0", "gamma", "c", "gamma0", "beta-hat0", "T",
                 "sample-every", "seed", "model", "dataset", "epochs", "n-runs", "dataset-T",
                 "n-repeats", "dx-list", "workers"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"))
    p.add_argument("--controller", choices=CONTROLLERS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backstep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("simulate", help="run one closed-loop simulation"))
    ds = sub.add_parser("dataset", help="generate a kernel dataset, or export one to CSV")
    ds.add_argument("action", nargs="?", default="generate", choices=("generate", "export-csv"))
    ds.add_argument("paths", nargs="*", help="for export-csv: INPUT.kds OUTPUT.csv")
    _add_common(ds)
    _add_common(sub.add_parser("train", help="train the neural kernel operator"))
    _add_common(sub.add_parser("bench", help="time exact versus neural kernels"))
    model = sub.add_parser("model", help="model file utilities")
    model.add_argument("action", choices=("inspect",))
    model.add_argument("path")
    return parser


def _overrides(args) -> list:
    pairs = []
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError(EXIT_CONFIG, f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        name = INI_KEYS.get((section, key))
        if name is None:
            raise CliError(EXIT_CONFIG, f"config field {lhs!r} is not recognised")
        pairs.append((name, value))
    for dest, name in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            pairs.append((name, str(value)))
    return pairs


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "model":
            return cmd_model_inspect(args.path)
        if args.command == "dataset" and args.action == "export-csv":
            if len(args.paths) != 2:
                raise CliError(EXIT_CONFIG, "export-csv expects INPUT.kds OUTPUT.csv")
            return cmd_export_csv(*args.paths)
        cfg = load_config(args.config, _overrides(args))
        handler = {"simulate": cmd_simulate, "dataset": cmd_dataset,
                   "train": cmd_train, "bench": cmd_bench}[args.command]
        return handler(cfg, force=args.force)
    except CliError as exc:
        print(f"backstep: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

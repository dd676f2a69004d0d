"""Command-line interface: train, evaluate, sweep, diagnose.

Runs are driven by a declarative INI config (sections mirror the library
modules) with command-line flags overriding file values. Every command is a
pure function of (config, input files, master seed): re-running produces
byte-identical outputs.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 chain
divergence.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from .diagnostics import (
    chain_health,
    check_energy_drift,
    check_reversibility,
    check_volume,
    euler_volume,
    quadratic_target,
    gaussian_target,
    softmax_target,
)
from .model import PriorConfig, sample_mask
from .predict import (
    aggregate_chains,
    evaluate,
    predictive_distribution,
    sensitivity_sweep,
)
from .samplefile import read_samples, write_samples
from .samplers import (
    ChainConfig,
    ChainDivergence,
    HmcConfig,
    SgConfig,
    run_chains,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

DEFAULT_OUT = "drophmc-out"
DEFAULT_Q_GRID = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


class ConfigError(Exception):
    """Bad flags, bad config file, or an invalid combination of settings."""


class DataError(Exception):
    """Unreadable or inconsistent input data or sample files."""


@dataclass
class RunConfig:
    """Fully resolved settings for one command invocation.

    Defaults follow the standard experiment setup: step size 1e-4, friction
    1.0, mini-batches of 100, 100 epochs, 500 warmup iterations, 30
    prediction samples.
    """

    # run
    algorithm: str = "sghmc"
    chains: int = 1
    jobs: int = 1
    out: str = DEFAULT_OUT
    seed: int = 0
    # data
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_table: str | None = None
    test_table: str | None = None
    delimiter: str = ","
    class_count: int | None = None
    whiten: bool = True
    test_whiten: str = "batch"
    # model
    prior_variance: float = 1.0
    # sampler
    step_size: float = 1e-4
    friction: float = 1.0
    beta: float = 0.0
    inner_steps: int = 1
    batch_size: int = 100
    keep_prob: float | None = None
    mask_target: str = "inputs"
    step_decay: float | None = None
    leapfrog_steps: int = 10
    mass: float = 1.0
    # chain
    epochs: int = 100
    warmup: int = 500
    thinning: int = 1
    keep_last: int | None = None
    # predict
    samples: int = 30


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _enum(*choices):
    def parse(text: str) -> str:
        if text not in choices:
            raise ValueError(f"expected one of {choices}, got {text!r}")
        return text

    return parse


# (section, key) -> (RunConfig field, parser)
CONFIG_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "algorithm": ("algorithm", _enum("hmc", "sgld", "sghmc", "dsghmc")),
        "chains": ("chains", int),
        "jobs": ("jobs", int),
        "out": ("out", str),
        "seed": ("seed", int),
    },
    "data": {
        "train_images": ("train_images", str),
        "train_labels": ("train_labels", str),
        "test_images": ("test_images", str),
        "test_labels": ("test_labels", str),
        "train_table": ("train_table", str),
        "test_table": ("test_table", str),
        "delimiter": ("delimiter", str),
        "class_count": ("class_count", int),
        "whiten": ("whiten", _parse_bool),
        "test_whiten": ("test_whiten", _enum("batch", "train")),
    },
    "model": {
        "prior_variance": ("prior_variance", float),
    },
    "sampler": {
        "step_size": ("step_size", float),
        "friction": ("friction", float),
        "beta": ("beta", float),
        "inner_steps": ("inner_steps", int),
        "batch_size": ("batch_size", int),
        "keep_prob": ("keep_prob", float),
        "mask_target": ("mask_target", _enum("inputs", "weights", "none")),
        "step_decay": ("step_decay", float),
        "leapfrog_steps": ("leapfrog_steps", int),
        "mass": ("mass", float),
    },
    "chain": {
        "epochs": ("epochs", int),
        "warmup": ("warmup", int),
        "thinning": ("thinning", int),
        "keep_last": ("keep_last", int),
    },
    "predict": {
        "samples": ("samples", int),
    },
}

# Flags that override config-file values when given.
FLAG_FIELDS = (
    "algorithm", "keep_prob", "mask_target", "step_size", "friction", "beta",
    "inner_steps", "epochs", "warmup", "batch_size", "chains", "seed",
    "samples", "jobs", "out", "prior_variance", "keep_last", "thinning",
)


def read_config_file(path: str) -> dict:
    """Parse an INI config into RunConfig field overrides, rejecting unknowns."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    overrides: dict = {}
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            field, convert = CONFIG_SCHEMA[section][key]
            try:
                overrides[field] = convert(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}")
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file, environment and flags (flags win)."""
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(read_config_file(args.config))
    for field in FLAG_FIELDS:
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    env_out = os.environ.get("DROPHMC_OUT")
    if env_out:
        # Replaces the built-in default only: explicit flags and config-file
        # values still win.
        overrides.setdefault("out", env_out)

    cfg = RunConfig(**overrides)
    try:
        build_sampler_config(cfg)  # fail fast on invalid numeric settings
        build_chain_config(cfg)
        PriorConfig(cfg.prior_variance)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.chains < 1:
        raise ConfigError("chains must be at least 1")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be at least 1")
    if cfg.samples < 1:
        raise ConfigError("samples must be at least 1")
    return cfg


def build_sampler_config(cfg: RunConfig) -> HmcConfig | SgConfig:
    if cfg.algorithm == "hmc":
        return HmcConfig(step_size=cfg.step_size,
                         leapfrog_steps=cfg.leapfrog_steps, mass=cfg.mass)
    return SgConfig(
        step_size=cfg.step_size,
        friction=cfg.friction,
        noise_discount=cfg.beta,
        inner_steps=cfg.inner_steps,
        batch_size=cfg.batch_size,
        keep_prob=cfg.keep_prob,
        mask_target=cfg.mask_target,
        step_decay=cfg.step_decay,
    )


def build_chain_config(cfg: RunConfig) -> ChainConfig:
    return ChainConfig(warmup=cfg.warmup, epochs=cfg.epochs, seed=cfg.seed,
                       thinning=cfg.thinning, keep_last=cfg.keep_last)


def _load_train(cfg: RunConfig) -> datamod.Dataset:
    try:
        if cfg.train_table:
            return datamod.load_feature_table(cfg.train_table, cfg.delimiter,
                                              cfg.class_count, name="train")
        if cfg.train_images and cfg.train_labels:
            return datamod.load_idx_dataset(cfg.train_images, cfg.train_labels,
                                            cfg.class_count, name="train")
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    raise ConfigError(
        "no training data configured: set data.train_table or "
        "data.train_images + data.train_labels"
    )


def _load_test(cfg: RunConfig) -> datamod.Dataset:
    try:
        if cfg.test_table:
            return datamod.load_feature_table(cfg.test_table, cfg.delimiter,
                                              cfg.class_count, name="test")
        if cfg.test_images and cfg.test_labels:
            return datamod.load_idx_dataset(cfg.test_images, cfg.test_labels,
                                            cfg.class_count, name="test")
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    raise ConfigError(
        "no test data configured: set data.test_table or "
        "data.test_images + data.test_labels"
    )


def _prepare_test(cfg: RunConfig, test: datamod.Dataset) -> datamod.Dataset:
    """Whiten test features the same way training batches are whitened."""
    if not cfg.whiten:
        return test
    if cfg.test_whiten == "train":
        train = _load_train(cfg)
        mean, std = datamod.feature_stats(train)
        return datamod.whiten_with_stats(test, mean, std)
    return datamod.whiten_dataset(test, cfg.batch_size)


def cmd_train(cfg: RunConfig) -> int:
    """Run the configured chains and write one sample file per chain."""
    train = _load_train(cfg)
    sampler_cfg = build_sampler_config(cfg)
    chain_cfg = build_chain_config(cfg)
    prior = PriorConfig(cfg.prior_variance)
    os.makedirs(cfg.out, exist_ok=True)

    try:
        results = run_chains(cfg.algorithm, train, sampler_cfg, prior,
                             chain_cfg, cfg.chains, jobs=cfg.jobs,
                             whiten=cfg.whiten)
    except ChainDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.partial is not None:
            path = os.path.join(cfg.out, "diverged.samples")
            write_samples(path, exc.partial)
            print(f"partial (unusable) draws written to {path}", file=sys.stderr)
        return EXIT_DIVERGED

    for i, samples in enumerate(results):
        stem = os.path.join(cfg.out, f"chain{i:02d}")
        write_samples(stem + ".samples", samples)
        health = chain_health(samples)
        with open(stem + ".health.txt", "w") as fh:
            fh.write(str(health) + "\n")
        print(f"chain {i}: seed {samples.meta.seed}, "
              f"{samples.meta.retained_count} retained draws "
              f"({samples.meta.stored_count} stored) -> {stem}.samples")
    return EXIT_OK


def _write_csv(path: str, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _report_paths(out: str, sample_path: str) -> str:
    stem = os.path.splitext(os.path.basename(sample_path))[0]
    return os.path.join(out, stem)


def cmd_evaluate(cfg: RunConfig, sample_paths: list[str]) -> int:
    """Score sample files on the test set; write reports and an aggregate."""
    if not sample_paths:
        raise ConfigError("evaluate needs at least one sample file")
    test = _prepare_test(cfg, _load_test(cfg))
    os.makedirs(cfg.out, exist_ok=True)

    reports = []
    for path in sample_paths:
        try:
            samples = read_samples(path)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        if samples.meta.diverged:
            raise DataError(f"{path}: chain diverged; samples are unusable")
        try:
            pred = predictive_distribution(samples, cfg.samples, test)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        report = evaluate(pred, test)
        reports.append(report)

        stem = _report_paths(cfg.out, path)
        K = test.class_count
        summary = {
            "sample_file": os.path.basename(path),
            "algorithm": samples.meta.algorithm,
            "seed": samples.meta.seed,
            "draws_used": cfg.samples,
            "total_accuracy": report.total_accuracy,
            "mean_entropy": report.mean_entropy,
            "per_class_accuracy": [
                None if np.isnan(a) else float(a)
                for a in report.per_class_accuracy
            ],
        }
        with open(stem + ".report.json", "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        class_header = ",".join(f"class{k}" for k in range(K))
        np.savetxt(stem + ".confusion.csv", report.confusion, delimiter=",",
                   header=class_header, comments="")
        np.savetxt(stem + ".probmatrix.csv", report.prob_by_true_class,
                   delimiter=",", header=class_header, comments="")
        prob_cols = ",".join(f"p{k}" for k in range(K))
        _write_csv(
            stem + ".examples.csv",
            "index,true,predicted,correct,max_prob,entropy," + prob_cols,
            (
                [str(i), str(int(report.true_labels[i])),
                 str(int(report.predicted_labels[i])),
                 str(int(report.correct[i])),
                 f"{report.max_probs[i]:.17g}", f"{report.entropies[i]:.17g}"]
                + [f"{p:.17g}" for p in report.probs[i]]
                for i in range(len(test))
            ),
        )
        print(f"{path}: accuracy {report.total_accuracy:.4f}, "
              f"mean entropy {report.mean_entropy:.4f}")

    agg = aggregate_chains(reports)
    with open(os.path.join(cfg.out, "aggregate.json"), "w") as fh:
        json.dump({
            "chains": agg.chain_count,
            "accuracies": list(agg.accuracies),
            "mean_accuracy": agg.mean,
            "std_accuracy": agg.std,
        }, fh, indent=2)
        fh.write("\n")
    print(f"aggregate over {agg.chain_count} chain(s): "
          f"{agg.mean:.4f} +/- {agg.std:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, keep_probs: list[float]) -> int:
    """Sensitivity of dsghmc accuracy to the keep probability."""
    if cfg.algorithm != "dsghmc":
        raise ConfigError("sweep requires algorithm dsghmc")
    template = build_sampler_config(cfg)
    if template.mask_target == "none":
        raise ConfigError("sweep requires mask_target inputs or weights")
    train = _load_train(cfg)
    test = _prepare_test(cfg, _load_test(cfg))
    chain_cfg = build_chain_config(cfg)
    prior = PriorConfig(cfg.prior_variance)
    os.makedirs(cfg.out, exist_ok=True)

    points = sensitivity_sweep(train, test, template, prior, chain_cfg,
                               keep_probs, cfg.chains, cfg.samples,
                               jobs=cfg.jobs, whiten=cfg.whiten)
    _write_csv(
        os.path.join(cfg.out, "sweep.csv"),
        "keep_prob,mean_accuracy,std,chains,error",
        (
            [f"{p.keep_prob:.17g}", f"{p.mean_accuracy:.17g}",
             f"{p.std:.17g}", str(p.chain_count), p.error or ""]
            for p in points
        ),
    )
    for p in points:
        status = f"ERROR: {p.error}" if p.error else \
            f"{p.mean_accuracy:.4f} +/- {p.std:.4f}"
        print(f"keep_prob {p.keep_prob:.2f}: {status}")
    if any(p.error for p in points):
        return EXIT_DIVERGED
    return EXIT_OK


def _diagnose_target(name: str, step_size: float):
    """Build (target, position, momentum, tolerances) for cmd_diagnose."""
    rng = np.random.default_rng(0)
    if name == "quadratic":
        target = quadratic_target(1)
        return target, np.array([1.0]), np.array([0.5]), (1e-10, 1e-6), False
    if name == "gaussian":
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        target = gaussian_target(cov)
        return target, np.array([1.0, -0.5]), np.array([0.3, 0.2]), (1e-10, 1e-6), False
    if name in ("softmax", "softmax-masked"):
        # Tiny two-class, one-feature problem: total dimension 4 keeps the
        # volume check tractable.
        features = rng.normal(size=(20, 1)) + np.where(
            np.arange(20) % 2 == 0, 1.5, -1.5
        )[:, None]
        labels = (np.arange(20) % 2).astype(np.int64)
        dataset = datamod.Dataset(features, labels, 2, name="toy")
        mask = None
        if name == "softmax-masked":
            mask = sample_mask(1, 0.7, np.random.default_rng(7))
        target = softmax_target(dataset, PriorConfig(1.0), mask)
        pos = rng.normal(scale=0.3, size=target.dim)
        mom = rng.normal(size=target.dim)
        return target, pos, mom, (1e-8, 1e-4), mask is not None
    raise ConfigError(f"unknown diagnose target {name!r}")


def cmd_diagnose(target_name: str, step_size: float, steps: int) -> int:
    """Print the integrator checks with tolerances and pass/fail status."""
    target, pos, mom, (rev_tol, vol_tol), informational = _diagnose_target(
        target_name, step_size
    )

    def verdict(ok: bool) -> str:
        return "INFO" if informational else ("PASS" if ok else "FAIL")

    print(f"target: {target.name} (dim {target.dim}), step size {step_size}")

    residual = check_reversibility(target, pos, mom, step_size, steps)
    print(f"reversibility residual: {residual:.3e} "
          f"(tolerance {rev_tol:.0e}) {verdict(residual < rev_tol)}")

    det = check_volume(target, pos, mom, step_size)
    vol_err = abs(det - 1.0)
    print(f"volume determinant:     {det:.12f} "
          f"(|det-1| tolerance {vol_tol:.0e}) {verdict(vol_err < vol_tol)}")
    euler_det = euler_volume(target, pos, mom, step_size)
    print(f"  explicit-Euler contrast: {euler_det:.12f} "
          "(not volume preserving)")

    drift = check_energy_drift(target, pos, mom, step_size, steps)
    drift_half = check_energy_drift(target, pos, mom, step_size / 2.0, 2 * steps)
    ratio = drift / drift_half if drift_half else float("nan")
    print(f"energy drift:           {drift:.3e} at step {step_size}, "
          f"{drift_half:.3e} at step {step_size / 2}")
    print(f"  halving ratio:        {ratio:.2f} "
          f"(expected in [3.5, 4.5]) {verdict(3.5 <= ratio <= 4.5)}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2, which we use for data
        raise ConfigError(message)


def _add_common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory "
                   "(default from DROPHMC_OUT or ./" + DEFAULT_OUT + ")")
    p.add_argument("--algorithm", choices=["hmc", "sgld", "sghmc", "dsghmc"])
    p.add_argument("--keep-prob", dest="keep_prob", type=float)
    p.add_argument("--mask-target", dest="mask_target",
                   choices=["inputs", "weights"])
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--friction", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--inner-steps", dest="inner_steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int, help="prediction samples S")
    p.add_argument("--jobs", type=int)
    p.add_argument("--thinning", type=int)
    p.add_argument("--keep-last", dest="keep_last", type=int)
    p.add_argument("--prior-variance", dest="prior_variance", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="drophmc",
                     description="Bayesian softmax classification samplers")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run chains and write sample files")
    _add_common_flags(p_train)

    p_eval = sub.add_parser("evaluate", help="score sample files on test data")
    _add_common_flags(p_eval)
    p_eval.add_argument("sample_files", nargs="+", help="sample files to score")

    p_sweep = sub.add_parser("sweep", help="keep-probability sensitivity sweep")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--q-values", default=DEFAULT_Q_GRID,
                         help="comma-separated keep probabilities")

    p_diag = sub.add_parser("diagnose", help="integrator property checks")
    p_diag.add_argument("--target", default="quadratic",
                        choices=["quadratic", "gaussian", "softmax",
                                 "softmax-masked"])
    p_diag.add_argument("--step-size", dest="diag_step", type=float, default=0.1)
    p_diag.add_argument("--steps", type=int, default=100)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "diagnose":
            return cmd_diagnose(args.target, args.diag_step, args.steps)
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.sample_files)
        if args.command == "sweep":
            qs = [float(tok) for tok in args.q_values.split(",") if tok.strip()]
            if not qs:
                raise ConfigError("--q-values is empty")
            return cmd_sweep(cfg, qs)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ChainDivergence as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line front door of the PIPA laboratory.

Subcommands ``gen``, ``train``, ``verify`` and ``report`` read one flat
experiment configuration file and exchange artifacts through an output
directory. Exit codes: 0 success, 1 failed check, 2 usage or configuration
error, 3 numeric error.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError

from pipalab.config import get_settings
from pipalab.core.exceptions import (
    CheckFailedException,
    ConfigurationException,
    InvalidInputException,
    MissingArtifactException,
    PipaLabException,
    get_exit_code,
)
from pipalab.core.logger import get_cli_logger, log_operation, setup_logging
from pipalab.core.report import render_report
from pipalab.core.seqdata import labels_from_q, pair_by_problem, read_dataset, relabel_example, write_dataset
from pipalab.core.synthworld import (
    World,
    load_world,
    make_world,
    sample_dataset,
    sample_probe,
    save_world,
    synthesize_q_values,
)
from pipalab.core.tabular import ModelBundle, load_bundle, save_bundle
from pipalab.core.trainer import grid_search, train
from pipalab.core.verify import build_prior, clip_rate, reports_to_csv, run_checks, summarize
from pipalab.models.models import (
    DataLevel,
    Dataset,
    ExperimentConfig,
    LossKind,
    PriorMode,
    VerificationReport,
)

logger = get_cli_logger()

WORLD_FILE = "world.txt"
DATASET_FILE = "dataset.jsonl"
PAIRED_FILE = "paired.jsonl"
MODEL_DIR = "model"
METRICS_FILE = "metrics.csv"
REPORTS_FILE = "reports.csv"
VERIFY_SUMMARY_FILE = "verify_summary.txt"


def load_config(path: Optional[str], seed_override: Optional[int] = None) -> ExperimentConfig:
    """
    Parse and fully validate a flat ``dotted.key=value`` file.

    Raises:
        ConfigurationException: If the file is missing or fails validation
    """
    flat: Dict[str, Optional[str]] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigurationException(f"Config file not found: {path}", config_key="--config")
        flat = dict(dotenv_values(path))
    try:
        config = ExperimentConfig.from_flat(flat)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigurationException(f"Invalid configuration at {key}: {first['msg']}", config_key=key)
    if seed_override is not None:
        config = config.model_copy(update={
            "world": config.world.model_copy(update={"seed": seed_override}),
            "dataset": config.dataset.model_copy(update={"seed": seed_override}),
            "model": config.model.model_copy(update={"init_seed": seed_override}),
            "train": config.train.model_copy(update={"seed": seed_override}),
            "verify": config.verify.model_copy(update={"seed": seed_override}),
        })
    return config


def write_config(config: ExperimentConfig, path: Path) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in config.to_flat().items()), encoding="utf-8")


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactException(str(path))
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen(config: ExperimentConfig, out: Path) -> Dict[str, str]:
    """Write the world, the dataset file(s), the resolved config and a digest manifest."""
    out.mkdir(parents=True, exist_ok=True)
    spec = config.world
    world = make_world(spec.seed, spec.prompts, spec.vocab, spec.length, spec.correct_prefix_mass,
                       spec.shared_prefix)
    save_world(world, out / WORLD_FILE)

    dataset = sample_dataset(world, config.dataset.n, config.dataset.level, config.dataset.seed)
    if config.dataset.q_threshold is not None:
        if config.dataset.level != DataLevel.STEP:
            raise InvalidInputException("q_threshold needs a step-level dataset", field="dataset.q_threshold")
        relabeled = []
        for example in dataset.records:
            q = synthesize_q_values(world, example)
            labels = labels_from_q(q, example.correct, config.dataset.q_threshold)
            relabeled.append(relabel_example(example, labels).model_copy(update={"q_values": q}))
        dataset = Dataset(records=tuple(relabeled), level=DataLevel.STEP)
    write_dataset(dataset, out / DATASET_FILE)
    files = [WORLD_FILE, DATASET_FILE]
    if config.dataset.pairing:
        write_dataset(pair_by_problem(dataset, config.dataset.seed), out / PAIRED_FILE)
        files.append(PAIRED_FILE)
    write_config(config, out / "config.env")
    files.append("config.env")

    manifest = {name: _sha256(out / name) for name in files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _initial_bundle(config: ExperimentConfig, world: World, dataset: Dataset) -> ModelBundle:
    kind = config.train.loss.kind
    spec = config.model
    prior = build_prior(world, kind, spec.prior_mode, dataset, spec.window, spec.prior_selector,
                        spec.sft_epochs, spec.sft_lr)
    bundle = ModelBundle.from_prior(prior)
    if spec.init_noise > 0.0:
        rng = np.random.default_rng(spec.init_seed)
        for ctx in bundle.policy.contexts():
            bundle.policy.logits[ctx] = bundle.policy.logits[ctx] + rng.normal(0.0, spec.init_noise, world.vocab_size)
    return bundle


def cmd_train(config: ExperimentConfig, out: Path) -> Path:
    """Fit the prior, train the configured loss, write the checkpoint and metrics CSV."""
    world = load_world(_require(out / WORLD_FILE))
    kind = LossKind(config.train.loss.kind)
    paired_path = out / PAIRED_FILE
    source = paired_path if kind.paired and paired_path.exists() else _require(out / DATASET_FILE)
    dataset = read_dataset(source)

    bundle = _initial_bundle(config, world, dataset)
    probe = sample_probe(world, config.train.probe_size, config.dataset.seed)
    if config.train.grid:
        result = grid_search(lambda: bundle.copy(), dataset, config.train, probe)
        trained, log = result.bundle, result.log
        logger.info(f"Grid search selected lr={result.best_lr!r}")
    else:
        trained, log = train(bundle, dataset, config.train, probe=probe)
    save_bundle(trained, out / MODEL_DIR)
    log.to_csv(out / METRICS_FILE)
    return out / METRICS_FILE


def trained_clip_rate(config: ExperimentConfig, out: Path) -> VerificationReport:
    """Clip activation rate of the trained checkpoint on its own training data."""
    bundle = load_bundle(_require(out / MODEL_DIR))
    dataset = read_dataset(_require(out / DATASET_FILE))
    examples = list(dataset.records)
    rate = clip_rate(bundle, examples, config.train.loss.epsilon, config.train.loss.kind)
    return VerificationReport.evaluate("trained-clip-rate", len(examples), rate, 0.05)


def cmd_verify(config: ExperimentConfig, out: Path, only: Optional[str] = None) -> List[VerificationReport]:
    """
    Run the configured checks, write reports.csv and verify_summary.txt.

    Raises:
        CheckFailedException: If any check fails
    """
    names = [only] if only else list(config.verify.checks)
    reports: List[VerificationReport] = []
    registered = [n for n in names if n != "trained-clip-rate"]
    reports.extend(run_checks(registered, config))
    if "trained-clip-rate" in names:
        reports.append(trained_clip_rate(config, out))

    out.mkdir(parents=True, exist_ok=True)
    reports_to_csv(reports, out / REPORTS_FILE)
    text = summarize(reports)
    (out / VERIFY_SUMMARY_FILE).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise CheckFailedException(failed)
    return reports


def cmd_report(out: Path, runs: Sequence[str]) -> List[Path]:
    """SVG trajectories and a summary for one or more run directories."""
    return render_report(list(runs) or [out], out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat experiment configuration file")
    common.add_argument("--out", help="Output directory (defaults to output_dir of the config)")
    common.add_argument("--seed-override", type=int, help="Replace every seed in the configuration")

    parser = argparse.ArgumentParser(prog="pipalab", description="Desk-scale preference-alignment laboratory")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen", parents=[common], help="Generate a world and datasets")
    commands.add_parser("train", parents=[common], help="Train the configured loss")
    verify = commands.add_parser("verify", parents=[common], help="Run verification checks")
    verify.add_argument("--only", help="Run a single named check")
    report = commands.add_parser("report", parents=[common], help="Plot metrics of one or more runs")
    report.add_argument("runs", nargs="*", help="Run directories to overlay (defaults to --out)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2

    setup_logging(get_settings())
    try:
        config = load_config(args.config, args.seed_override)
        out = Path(args.out or config.output_dir or get_settings().OUTPUT_DIR)
        with log_operation(logger, f"command {args.command}", out=str(out)):
            if args.command == "gen":
                cmd_gen(config, out)
            elif args.command == "train":
                cmd_train(config, out)
            elif args.command == "verify":
                cmd_verify(config, out, args.only)
            else:
                cmd_report(out, args.runs)
        return 0
    except PipaLabException as e:
        logger.error(str(e))
        return get_exit_code(e)
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return 2
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 2


if __name__ == "__main__":
    sys.exit(main())

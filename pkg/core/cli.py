import argparse
import csv
import json
import logging
import logging.config
import platform
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch

from core.checkpoint import load_checkpoint
from core.config_handler import ConfigHandler, ExperimentConfig
from core.evaluation import (
    METRIC_NAMES,
    color_shift,
    complexity_report,
    depth_predictor,
    evaluate,
    translate_batch,
    write_records_csv,
)
from core.exceptions import ConfigError, DatasetIOError, LFDAError
from core.model_factory import ModelFactory
from core.networks import LFDANetwork
from core.sample_io import read_manifest, write_manifest
from core.scene_sources import SceneDataset, generate_dataset, load_split, synthetic_split
from core.training import train_loop
from misc.translation_vis import save_translation_grids
from misc.variants_enum import DepthRoute, Domain, Split, Variant

logger = logging.getLogger("main")

DEFAULT_LOG_CONFIG = Path(__file__).resolve().parent.parent / "conf" / "logging_conf.ini"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
_VERSIONED_PACKAGES = ("torch", "torchvision", "numpy", "pillow", "python-dotenv", "tqdm")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--out", type=Path, help="output directory (default runs/<command>)")
    common.add_argument("--seed", type=int, help="data seed for gen-data, training and init seed otherwise")
    common.add_argument("--variant", choices=[v.value for v in Variant], help="training variant")
    common.add_argument("--cap", type=float, help="largest evaluated depth")
    common.add_argument("--data", type=Path, help="generated dataset root (rendered in memory when absent)")
    common.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate or translate with")
    common.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    common.add_argument("--route", choices=[r.value for r in DepthRoute], default=DepthRoute.TARGET.value)
    common.add_argument("--resume", type=Path, help="checkpoint to resume training from")
    common.add_argument("--samples", type=int, help="number of translated samples")
    common.add_argument("--log-config", type=Path, help="logging configuration file")

    parser = argparse.ArgumentParser(prog="lfda", description="Desk-scale LFDA experiments")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen-data", parents=[common], help="render the synthetic dual-domain dataset")
    commands.add_parser("train", parents=[common], help="train one variant")
    commands.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    commands.add_parser("translate", parents=[common], help="dump reconstruction/translation grids")
    commands.add_parser("ablate", parents=[common], help="train and evaluate the five variants")
    commands.add_parser("complexity", parents=[common], help="parameter and MAC counts")
    return parser


def _configure_logging(log_config: Optional[Path]) -> None:
    path = log_config or DEFAULT_LOG_CONFIG
    if not Path(path).is_file():
        if log_config is not None:
            raise ConfigError(f"Logging configuration not found: {log_config}")
        return
    logging.config.fileConfig(path, disable_existing_loggers=False)


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = dict(ConfigHandler.parse_override(item) for item in args.overrides)
    if args.seed is not None:
        if args.command == "gen-data":
            overrides["DATA_SEED"] = str(args.seed)
        else:
            overrides["TRAIN_SEED"] = str(args.seed)
            overrides["MODEL_INIT_SEED"] = str(args.seed)
    if args.variant is not None:
        overrides["TRAIN_VARIANT"] = args.variant
    if args.cap is not None:
        overrides["EVAL_CAP"] = repr(args.cap)
    return overrides


def _package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for package in _VERSIONED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def _run_manifest(args: argparse.Namespace, argv: Sequence[str], experiment: ExperimentConfig) -> Dict[str, Any]:
    return {
        "command": args.command,
        "argv": list(argv),
        "config_hash": experiment.config_hash(),
        "data_hash": experiment.data_hash(),
        "seeds": {
            "data": experiment.data.seed,
            "train": experiment.train.seed,
            "init": experiment.model.init_seed,
            "perceptual": experiment.model.perceptual_seed,
        },
        "versions": _package_versions(),
        "config": experiment.to_dict(),
    }


def _dataset(args: argparse.Namespace, experiment: ExperimentConfig, domain: Domain, split: Split) -> SceneDataset:
    if args.data is not None:
        return load_split(args.data, domain, split, expected_hash=experiment.data_hash())
    return synthetic_split(experiment.data, domain, split)


def _network(args: argparse.Namespace, experiment: ExperimentConfig) -> Tuple[LFDANetwork, Variant]:
    factory = ModelFactory(experiment)
    network = factory.get_network()
    variant = experiment.train.variant
    if args.checkpoint is not None:
        checkpoint = load_checkpoint(args.checkpoint)
        checkpoint.check_compatible(model_hash=factory.model_hash)
        checkpoint.apply(network)
        variant = Variant(checkpoint.extra.get("variant", variant.value))
        logger.info(f"Loaded {variant.label} checkpoint {args.checkpoint} (step {checkpoint.step})")
    return network, variant


def _write_json(path: Path, payload: Any) -> None:
    try:
        with Path(path).open("w") as file:
            json.dump(payload, file, indent=4, sort_keys=True)
    except OSError as e:
        raise DatasetIOError(path, f"Cannot write report ({e})") from e


def _gen_data(args: argparse.Namespace, experiment: ExperimentConfig, out: Path) -> None:
    manifest = generate_dataset(out, experiment.data)
    logger.info(f"Dataset written to {out} (data hash {manifest['data_hash'][:12]})")


def _train(args: argparse.Namespace, experiment: ExperimentConfig, out: Path) -> None:
    source_train = _dataset(args, experiment, Domain.SOURCE, Split.TRAIN)
    target_train = _dataset(args, experiment, Domain.TARGET, Split.TRAIN)
    target_val = _dataset(args, experiment, Domain.TARGET, Split.VAL)
    result = train_loop(experiment, source_train, target_train, out, target_val=target_val, resume=args.resume)
    if result.evaluation is not None:
        logger.info(f"Target validation after training:\n{result.evaluation.report.as_table()}")


def _eval(args: argparse.Namespace, experiment: ExperimentConfig, out: Path) -> None:
    network, variant = _network(args, experiment)
    route = DepthRoute(args.route)
    domain = Domain.TARGET if route == DepthRoute.TARGET else Domain.SOURCE
    split = Split(args.split)
    dataset = _dataset(args, experiment, domain, split)
    result = evaluate(
        network, dataset, depth_predictor(network, variant, route), experiment.eval.cap, experiment.eval.d_min_eval
    )
    _write_json(
        out / "metrics.json",
        {"variant": variant.value, "route": route.value, "split": split.value, **result.report.to_record()},
    )
    write_records_csv(out / "metrics.csv", result.records)
    logger.info(f"{variant.label} on {domain.value}/{split.value}:\n{result.report.as_table()}")


def _translate(args: argparse.Namespace, experiment: ExperimentConfig, out: Path) -> None:
    network, variant = _network(args, experiment)
    split = Split(args.split)
    source = _dataset(args, experiment, Domain.SOURCE, split)
    target = _dataset(args, experiment, Domain.TARGET, split)
    count = min(args.samples or experiment.eval.translate_samples, len(source), len(target))
    if count < 1:
        raise ConfigError("translate needs at least one sample")
    indices = list(range(count))
    images = translate_batch(
        network, source.batch(indices)["left"], target.batch(indices)["left"], variant.spec.separate_bn
    )
    paths = save_translation_grids(images, out / "grids")
    shift = color_shift(images["source"], images["s2t"], images["target"])
    _write_json(out / "color_shift.json", shift.to_record())
    logger.info(
        f"Wrote {len(paths)} translation grids; source-to-target colour distance "
        f"{shift.distance_before:.4f} -> {shift.distance_after:.4f}"
    )


def _ablate(args: argparse.Namespace, experiment: ExperimentConfig, out: Path) -> None:
    source_train = _dataset(args, experiment, Domain.SOURCE, Split.TRAIN)
    target_train = _dataset(args, experiment, Domain.TARGET, Split.TRAIN)
    target_eval = _dataset(args, experiment, Domain.TARGET, Split(args.split))

    rows: List[Dict[str, Any]] = []
    for variant in Variant:
        run = replace(experiment, train=replace(experiment.train, variant=variant))
        result = train_loop(run, source_train, target_train, out / variant.value)
        network = ModelFactory(run).get_network()
        load_checkpoint(result.checkpoint_path).apply(network)
        evaluation = evaluate(
            network, target_eval, depth_predictor(network, variant), run.eval.cap, run.eval.d_min_eval
        )
        rows.append({"variant": variant.value, "label": variant.label, **evaluation.report.to_record()})

    columns = ["variant", "label", *METRIC_NAMES]
    try:
        with (out / "ablation.csv").open("w", newline="") as file:
            writer = csv.DictWriter(file, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise DatasetIOError(out / "ablation.csv", f"Cannot write ablation table ({e})") from e
    table = [f"{'variant':<20}" + "".join(f"{name:>10}" for name in METRIC_NAMES)]
    table += [f"{row['label']:<20}" + "".join(f"{row[name]:10.4f}" for name in METRIC_NAMES) for row in rows]
    (out / "ablation.txt").write_text("\n".join(table) + "\n")
    logger.info(f"Ablation on target/{args.split}:\n" + "\n".join(table))


def _complexity(args: argparse.Namespace, experiment: ExperimentConfig, out: Path) -> None:
    network, _ = _network(args, experiment)
    shape = (1, 3, experiment.eval.macs_height, experiment.eval.macs_width)
    report = complexity_report(network, shape)
    _write_json(out / "complexity.json", report.to_record())
    logger.info(f"Model complexity:\n{report.as_table()}")


_COMMANDS: Dict[str, Callable[[argparse.Namespace, ExperimentConfig, Path], Any]] = {
    "gen-data": _gen_data,
    "train": _train,
    "eval": _eval,
    "translate": _translate,
    "ablate": _ablate,
    "complexity": _complexity,
}


def run(argv: Sequence[str]) -> int:
    """
    Runs one command.

    Args:
        argv (Sequence[str]): command-line arguments without the program name

    Returns:
        int: 0 on success, 2 for usage and configuration errors, 3 for runtime failures
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG

    try:
        _configure_logging(args.log_config)
        handler = ConfigHandler(args.config, _overrides(args))
        experiment = handler.experiment()
        out = args.out or Path("runs") / args.command
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(experiment.train.seed)

        _COMMANDS[args.command](args, experiment, out)
        manifest = _run_manifest(args, argv, experiment)
        if args.command == "gen-data":
            write_manifest(out, {**read_manifest(out), "run": manifest})
        else:
            write_manifest(out, manifest)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except LFDAError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK

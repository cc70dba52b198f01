"""Command-line pipeline driver.

Every subcommand reads one flat JSON config, writes its outputs plus a
manifest into the output directory, and is deterministic: re-running with
the same config and inputs reproduces byte-identical numeric outputs.
Exit codes: 0 success, 1 configuration or input validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import CONIFER, DECIDUOUS, __version__
from . import ensemble as ens
from .ingest import (
    GROUND,
    VEGETATION,
    assemble_crowns,
    build_dem,
    filter_canopy,
    height_normalize,
    read_point_file,
    read_stem_file,
    write_point_file,
    write_stem_file,
)
from .intensity import apply_residualization, fit_all_models, read_models, write_models
from .rasterize import (
    augment_rotations,
    read_all_representations,
    read_manifest,
    scale_for_network,
    write_representation_file,
)
from .register import read_registrations, register_crowns, write_registrations
from .synthforest import SynthParams, generate_dataset, write_truth_file
from .util import default_threads, derive_seed

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = "label,accuracy,ci_half_width,n"
FIGURE_COLUMNS = "figure,series,x,y"

REPRESENTATIONS = ("views4", "dsm4")
ABLATIONS = ens.ABLATION_NAMES

# Synthetic-forest keys default to the generator's own values so the two
# never drift apart.
_SYNTH_DEFAULTS = SynthParams(seed=0)

# Flat config schema: every key has a default except the mandatory seed.
CONFIG_DEFAULTS = {
    # file paths
    "points_file": None,
    "stems_file": None,
    "registrations_file": None,
    "tensor_file": None,
    "manifest_file": None,
    "labels_file": None,
    "raw_tensor_file": None,
    "raw_manifest_file": None,
    "history_file": None,
    "summary_file": None,
    "sweep_file": None,
    # synthetic forest
    "n_conifer": _SYNTH_DEFAULTS.n_conifer,
    "n_deciduous": _SYNTH_DEFAULTS.n_deciduous,
    "label_noise": _SYNTH_DEFAULTS.label_noise,
    "dome_fraction": _SYNTH_DEFAULTS.dome_fraction,
    "jitter_sigma": _SYNTH_DEFAULTS.jitter_sigma,
    "leaf_on_density": _SYNTH_DEFAULTS.leaf_on_density,
    "conifer_retention": _SYNTH_DEFAULTS.conifer_retention,
    "deciduous_retention": _SYNTH_DEFAULTS.deciduous_retention,
    # intensity normalization
    "intensity_norm": True,
    "grid_cell": 10.0,
    "significance_alpha": 0.05,
    # crown representations
    "representation": "views4",
    "n_rotations": 180,
    "rotation_step": 2.0,
    # mislabel correction
    "correction_networks": 100,
    "correction_per_class": 80,
    "correction_epochs": 3,
    "alpha": 1e-8,
    "max_iterations": 20,
    # ensemble classification
    "n_networks": 50,
    "per_class": 100,
    "epochs": None,  # unset: 5 for views4, 15 for dsm4
    "lr": 0.01,
    "batch_size": 32,
    "ablation": "none",
    # sweeps
    "sweep_variant": "size",
    "fractions": [0.2, 0.4, 0.6, 0.8, 1.0],
    "repeats": 3,
    "augmentations": [],
    "ablations": list(ABLATIONS),
    # execution
    "threads": None,
}


class ConfigError(Exception):
    """Configuration or input validation problem; maps to exit code 1."""


def load_config(path: str, overrides: dict) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as error:
        raise ConfigError(f"config file {path} is not valid JSON: {error}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(raw) - set(CONFIG_DEFAULTS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "seed" not in raw:
        raise ConfigError("config must set a seed; runs draw no wall-clock entropy")
    config = dict(CONFIG_DEFAULTS)
    config.update(raw)
    config.update({k: v for k, v in overrides.items() if v is not None})
    config["seed"] = int(config["seed"])
    if config["representation"] not in REPRESENTATIONS:
        raise ConfigError(f"representation must be one of {REPRESENTATIONS}")
    if config["ablation"] not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {ABLATIONS}")
    return config


def effective_epochs(config: dict) -> int:
    if config["epochs"] is not None:
        return int(config["epochs"])
    return 5 if config["representation"] == "views4" else 15


def effective_threads(config: dict) -> int:
    return int(config["threads"]) if config["threads"] else default_threads()


def require_input(config: dict, key: str) -> Path:
    value = config.get(key)
    if not value:
        raise ConfigError(f"config key {key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{key} does not exist: {path}")
    return path


def write_manifest(out_dir: Path, command: str, config: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "outputs": sorted(outputs),
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def write_summary(path: Path, result: ens.ClassifyResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_COLUMNS.split(","))
        for label in (CONIFER, DECIDUOUS):
            acc = result.accuracies[label]
            writer.writerow([label, repr(acc.accuracy), repr(acc.ci_half_width), acc.n])


def read_summary(path: Path) -> list[tuple[str, float, float, int]]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != SUMMARY_COLUMNS.split(","):
            raise ValueError(f"{path}: expected header {SUMMARY_COLUMNS!r}")
        return [(r[0], float(r[1]), float(r[2]), int(r[3])) for r in reader]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(config: dict, out_dir: Path) -> list[str]:
    params = SynthParams(
        seed=config["seed"],
        n_conifer=int(config["n_conifer"]),
        n_deciduous=int(config["n_deciduous"]),
        label_noise=float(config["label_noise"]),
        dome_fraction=float(config["dome_fraction"]),
        jitter_sigma=float(config["jitter_sigma"]),
        leaf_on_density=float(config["leaf_on_density"]),
        conifer_retention=float(config["conifer_retention"]),
        deciduous_retention=float(config["deciduous_retention"]),
    )
    dataset = generate_dataset(params)
    write_point_file(out_dir / "points.csv", dataset.points)
    write_stem_file(out_dir / "stems.csv", dataset.stems)
    write_truth_file(out_dir / "truth.csv", dataset.truth)
    return ["points.csv", "stems.csv", "truth.csv"]


def cmd_normalize_intensity(config: dict, out_dir: Path) -> list[str]:
    points = read_point_file(require_input(config, "points_file"))
    if not config["intensity_norm"]:
        logger.info("intensity normalization bypassed; copying points through")
        write_point_file(out_dir / "points_normalized.csv", points)
        write_models(out_dir / "intensity_models.json", {})
        return ["points_normalized.csv", "intensity_models.json"]
    models = fit_all_models(
        points,
        cell=float(config["grid_cell"]),
        seed=derive_seed(config["seed"], "intensity"),
    )
    normalized = apply_residualization(
        points, models, alpha=float(config["significance_alpha"])
    )
    write_point_file(out_dir / "points_normalized.csv", normalized)
    write_models(out_dir / "intensity_models.json", models)
    return ["points_normalized.csv", "intensity_models.json"]


def crowns_from_points_file(config: dict) -> list:
    points = read_point_file(require_input(config, "points_file"))
    ground = points.select(points.pclass == GROUND)
    vegetation = points.select(points.pclass == VEGETATION)
    if len(ground) == 0:
        raise ValueError("points file holds no ground returns; cannot build a DEM")
    dem = build_dem(ground)
    normalized = height_normalize(vegetation, dem)
    return assemble_crowns(filter_canopy(normalized))


def cmd_register(config: dict, out_dir: Path) -> list[str]:
    crowns = crowns_from_points_file(config)
    stems = read_stem_file(require_input(config, "stems_file"))
    labeled = register_crowns(crowns, stems)
    logger.info("registered %d of %d crowns", len(labeled), len(crowns))
    write_registrations(out_dir / "registrations.csv", labeled)
    return ["registrations.csv"]


def cmd_rasterize(config: dict, out_dir: Path) -> list[str]:
    crowns = {c.crown_id: c for c in crowns_from_points_file(config)}
    rows = read_registrations(require_input(config, "registrations_file"))
    kind = config["representation"]
    reps = []
    for row in rows:
        crown = crowns.get(row.crown_id)
        if crown is None:
            raise ValueError(
                f"registration names crown {row.crown_id} absent from the points file"
            )
        rep = augment_rotations(
            crown,
            n=int(config["n_rotations"]),
            step=float(config["rotation_step"]),
            label=row.label,
            crown_class=row.crown_class,
            kinds=(kind,),
        )
        reps.append(scale_for_network(rep))
    write_representation_file(
        out_dir / "rasters.bin",
        out_dir / "rasters.json",
        reps,
        n_rotations=int(config["n_rotations"]),
        step=float(config["rotation_step"]),
    )
    return ["rasters.bin", "rasters.json"]


def load_dataset(config: dict, tensor_key="tensor_file", manifest_key="manifest_file"):
    tensor_path = require_input(config, tensor_key)
    manifest = read_manifest(require_input(config, manifest_key))
    reps = read_all_representations(tensor_path, manifest)
    dataset = ens.from_representations(reps, kind=config["representation"])
    labels_file = config.get("labels_file")
    if labels_file:
        path = Path(labels_file)
        if not path.exists():
            raise ConfigError(f"labels_file does not exist: {path}")
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header != ["crown_id", "label", "original_label"]:
                raise ConfigError(f"{path}: not a corrected-labels table")
            overrides = {row[0]: row[1] for row in reader}
        for instance in dataset.instances:
            if instance.crown_id in overrides:
                instance.label = overrides[instance.crown_id]
    return dataset


def apply_ablation(dataset, config: dict):
    name = config["ablation"]
    if name == "none":
        return dataset
    if name == "no-leaf-off":
        return ens.select_channels(dataset, ens.LEAF_ON_CHANNELS)
    if name == "no-leaf-on":
        return ens.select_channels(dataset, ens.LEAF_OFF_CHANNELS)
    if name == "binary-intensity":
        return ens.binarize_intensity(dataset)
    # raw-intensity: swap in the dataset rasterized from raw points.
    return load_dataset(config, "raw_tensor_file", "raw_manifest_file")


def cmd_correct_labels(config: dict, out_dir: Path) -> list[str]:
    dataset = load_dataset(config, "tensor_file", "manifest_file")
    correction = ens.CorrectionConfig(
        seed=derive_seed(config["seed"], "correct-labels"),
        n_networks=int(config["correction_networks"]),
        per_class=int(config["correction_per_class"]),
        epochs=int(config["correction_epochs"]),
        alpha=float(config["alpha"]),
        max_iterations=int(config["max_iterations"]),
        lr=float(config["lr"]),
        batch_size=int(config["batch_size"]),
        threads=effective_threads(config),
    )
    dataset, history = ens.correct_mislabels(dataset, correction)
    if not history.converged:
        logger.warning("correction hit max_iterations without converging")
    with open(out_dir / "corrected_labels.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["crown_id", "label", "original_label"])
        for instance in dataset.instances:
            writer.writerow([instance.crown_id, instance.label, instance.original_label])
    ens.write_history(out_dir / "history.csv", history)
    return ["corrected_labels.csv", "history.csv"]


def cmd_classify(config: dict, out_dir: Path) -> list[str]:
    dataset = apply_ablation(load_dataset(config), config)
    result = ens.ensemble_classify(
        dataset,
        n_networks=int(config["n_networks"]),
        per_class=int(config["per_class"]),
        epochs=effective_epochs(config),
        seed=derive_seed(config["seed"], "classify"),
        lr=float(config["lr"]),
        batch_size=int(config["batch_size"]),
        threads=effective_threads(config),
    )
    ens.write_predictions(out_dir / "predictions.csv", result.predictions)
    write_summary(out_dir / "summary.csv", result)
    return ["predictions.csv", "summary.csv"]


def cmd_sweep(config: dict, out_dir: Path) -> list[str]:
    dataset = load_dataset(config)
    spec = ens.SweepSpec(
        variant=str(config["sweep_variant"]),
        fractions=tuple(float(f) for f in config["fractions"]),
        repeats=int(config["repeats"]),
        augmentations=tuple(int(a) for a in config["augmentations"]),
        ablations=tuple(config["ablations"]),
    )
    alternates = None
    if spec.variant == "ablation" and "raw-intensity" in spec.ablations:
        if not config.get("raw_tensor_file"):
            raise ConfigError(
                "the raw-intensity ablation needs raw_tensor_file and "
                "raw_manifest_file rasterized from unnormalized points"
            )
        alternates = {
            "raw-intensity": load_dataset(config, "raw_tensor_file", "raw_manifest_file")
        }
    rows = ens.run_sweep(
        dataset,
        spec,
        n_networks=int(config["n_networks"]),
        per_class=int(config["per_class"]),
        epochs=effective_epochs(config),
        seed=derive_seed(config["seed"], "sweep"),
        lr=float(config["lr"]),
        batch_size=int(config["batch_size"]),
        threads=effective_threads(config),
        alternates=alternates,
    )
    ens.write_sweep_table(out_dir / "sweep.csv", rows)
    return ["sweep.csv"]


def _figure_rows_from_history(rows) -> list[tuple]:
    out = []
    for row in rows:
        out.append(("correction", "flips_to_conifer", row.iteration, row.flips_to_conifer))
        out.append(
            ("correction", "flips_to_deciduous", row.iteration, row.flips_to_deciduous)
        )
        out.append(("correction", "mean_acc", row.iteration, row.mean_acc))
    return out


def _figure_rows_from_sweep(rows) -> list[tuple]:
    out = []
    for index, row in enumerate(rows):
        try:
            x = float(row.param)
        except ValueError:
            x = float(index)
        out.append((f"sweep-{row.variant}", CONIFER, x, row.acc_conifer))
        out.append((f"sweep-{row.variant}", DECIDUOUS, x, row.acc_deciduous))
    return out


def cmd_report(config: dict, out_dir: Path) -> list[str]:
    """Tabulate whatever result tables the config names into one
    plot-ready long-format file."""
    rows: list[tuple] = []
    history_file = config.get("history_file")
    if history_file and Path(history_file).exists():
        rows.extend(_figure_rows_from_history(ens.read_history(history_file)))
    summary_file = config.get("summary_file")
    if summary_file and Path(summary_file).exists():
        for label, accuracy, _, n in read_summary(Path(summary_file)):
            rows.append(("classification", label, n, accuracy))
    sweep_file = config.get("sweep_file")
    if sweep_file and Path(sweep_file).exists():
        rows.extend(_figure_rows_from_sweep(ens.read_sweep_table(sweep_file)))
    with open(out_dir / "figures.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(FIGURE_COLUMNS.split(","))
        for figure, series, x, y in rows:
            writer.writerow([figure, series, repr(float(x)), repr(float(y))])
    return ["figures.csv"]


COMMANDS = {
    "synth": cmd_synth,
    "normalize-intensity": cmd_normalize_intensity,
    "register": cmd_register,
    "rasterize": cmd_rasterize,
    "correct-labels": cmd_correct_labels,
    "classify": cmd_classify,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crownclass",
        description="Crown classification pipeline: synthetic data, intensity "
        "normalization, crown-stem registration, rasterization, mislabel "
        "correction, ensemble classification, and evaluation sweeps.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name, help=f"run the {name} step")
        sub.add_argument("--config", required=True, help="path to the JSON run config")
        sub.add_argument("--out", default=".", help="output directory")
        sub.add_argument("--threads", type=int, default=None)
        sub.add_argument(
            "--no-intensity-norm",
            action="store_true",
            help="bypass intensity normalization",
        )
        sub.add_argument("--representation", choices=REPRESENTATIONS, default=None)
        sub.add_argument("--ablation", choices=ABLATIONS, default=None)
    return parser


def main(argv: "list[str] | None" = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return 0 if error.code in (0, None) else 1
    overrides = {
        "threads": args.threads,
        "representation": args.representation,
        "ablation": args.ablation,
    }
    if args.no_intensity_norm:
        overrides["intensity_norm"] = False
    try:
        config = load_config(args.config, overrides)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](config, out_dir)
    except ConfigError as error:
        print(f"error: {error}", file=sys.stderr)
        return 1
    except Exception as error:  # runtime failure
        logger.exception("command failed")
        print(f"error: {error}", file=sys.stderr)
        return 2
    write_manifest(out_dir, args.command, config, outputs)
    for name in outputs:
        print(out_dir / name)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Network ensembles: balanced resampling, iterative mislabel correction
via a one-sided T-test on holdout performance, cross-validated ensemble
classification, and the evaluation sweeps built on top.

Also home of the Student t CDF used by the regression significance tests.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import CLASS_INDEX, CONIFER, DECIDUOUS, INDEX_CLASS
from .ingest import OVERSTORY_CLASSES
from .tinynet import (
    ADAM_LR,
    BATCH_SIZE,
    NetworkParams,
    init_params,
    predict_probs,
    train_network,
)
from .util import default_threads, derive_seed, parallel_map

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = "iter,flips_conifer,flips_deciduous,mean_acc"
PREDICTION_COLUMNS = "crown_id,true_label,pred_label,p_conifer,held_out_by"
SWEEP_COLUMNS = "variant,param,acc_conifer,ci_conifer,acc_deciduous,ci_deciduous"

ABLATION_NAMES = (
    "none",
    "no-leaf-off",
    "no-leaf-on",
    "raw-intensity",
    "binary-intensity",
)

# Images are stored [aerial on, aerial off, profile on, profile off] and
# DSM channels [on height, on intensity, off height, off intensity], so
# season ablations keep these channel pairs.
LEAF_ON_CHANNELS = (0, 2)
LEAF_OFF_CHANNELS = (1, 3)


def student_t_cdf(t: "float | np.ndarray", df: float) -> "float | np.ndarray":
    """Cumulative distribution of Student's t with ``df`` degrees of freedom.

    Evaluated through the regularized incomplete beta function on the lower
    tail only, so symmetry around zero is exact.
    """
    if df <= 0:
        raise ValueError("df must be positive")
    t_arr = np.asarray(t, dtype=np.float64)
    x = df / (df + t_arr**2)
    lower = 0.5 * special.betainc(df / 2.0, 0.5, x)
    out = np.where(t_arr <= 0, lower, 1.0 - lower)
    return float(out) if np.isscalar(t) or out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Dataset of labeled, augmented crown representations


@dataclass
class Instance:
    """One crown's augmented tensors plus its mutable class label."""

    crown_id: str
    images: np.ndarray  # (augmentations, channels, size, size) float32
    scalars: np.ndarray  # (augmentations, scalar_dim) float32
    label: str
    crown_class: str
    original_label: str
    density: float  # points per m^2 of crown area


@dataclass
class LabeledDataset:
    """Instances sharing one network architecture and augmentation count."""

    tag: str  # architecture the tensors fit: dsm | views | views_reduced
    instances: list[Instance]

    def __post_init__(self) -> None:
        counts = {inst.images.shape[0] for inst in self.instances}
        if len(counts) > 1:
            raise ValueError(
                f"augmentation counts differ across instances: {sorted(counts)}"
            )
        for inst in self.instances:
            if inst.label not in CLASS_INDEX:
                raise ValueError(f"{inst.crown_id}: unknown label {inst.label!r}")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def augmentations(self) -> int:
        return self.instances[0].images.shape[0] if self.instances else 0

    def pool(self, label: str) -> list[int]:
        return [i for i, inst in enumerate(self.instances) if inst.label == label]


def from_representations(reps: list, kind: str = "views4") -> LabeledDataset:
    """Build a dataset from scaled representation sets.

    views4 feeds the four-branch architecture with (width, height)
    scalars; dsm4 feeds the early-fusion architecture with (area,).
    """
    if kind not in ("views4", "dsm4"):
        raise ValueError(f"unknown representation kind {kind!r}")
    instances = []
    for rep in reps:
        if not rep.scaled:
            raise ValueError(f"{rep.crown_id}: representations must be scaled")
        if kind == "views4":
            if rep.entries and rep.entries[0].views4 is None:
                raise ValueError(f"{rep.crown_id}: no views4 tensors present")
            images = np.stack([e.views4.images for e in rep.entries])
            scalars = np.array(
                [
                    [e.views4.crown_width, e.views4.tree_height]
                    for e in rep.entries
                ],
                dtype=np.float32,
            )
        else:
            if rep.entries and rep.entries[0].dsm4 is None:
                raise ValueError(f"{rep.crown_id}: no dsm4 tensors present")
            images = np.stack([e.dsm4.channels for e in rep.entries])
            scalars = np.array(
                [[e.dsm4.crown_area] for e in rep.entries], dtype=np.float32
            )
        instances.append(
            Instance(
                crown_id=rep.crown_id,
                images=images,
                scalars=scalars,
                label=rep.label,
                crown_class=rep.crown_class,
                original_label=rep.label,
                density=rep.density,
            )
        )
    tag = "views" if kind == "views4" else "dsm"
    return LabeledDataset(tag, instances)


def select_channels(dataset: LabeledDataset, channels: tuple[int, ...]) -> LabeledDataset:
    """Single-season variant of a views dataset (2 of 4 image channels)."""
    if dataset.tag != "views" or len(channels) != 2:
        raise ValueError("channel selection needs a views dataset and 2 channels")
    picked = list(channels)
    instances = [
        Instance(
            crown_id=inst.crown_id,
            images=inst.images[:, picked],
            scalars=inst.scalars,
            label=inst.label,
            crown_class=inst.crown_class,
            original_label=inst.original_label,
            density=inst.density,
        )
        for inst in dataset.instances
    ]
    return LabeledDataset("views_reduced", instances)


def binarize_intensity(dataset: LabeledDataset) -> LabeledDataset:
    """Replace intensity values with {0, 1} presence.

    View images are intensity rasters, so every channel binarizes; DSM
    intensity channels (1 and 3) binarize while heights are kept.
    """
    instances = []
    for inst in dataset.instances:
        images = inst.images.copy()
        if dataset.tag == "dsm":
            for c in (1, 3):
                images[:, c] = (images[:, c] > 0).astype(np.float32)
        else:
            images = (images > 0).astype(np.float32)
        instances.append(
            Instance(
                crown_id=inst.crown_id,
                images=images,
                scalars=inst.scalars,
                label=inst.label,
                crown_class=inst.crown_class,
                original_label=inst.original_label,
                density=inst.density,
            )
        )
    return LabeledDataset(dataset.tag, instances)


def truncate_augmentations(dataset: LabeledDataset, count: int) -> LabeledDataset:
    """Keep only the first ``count`` rotations of every instance."""
    if not 1 <= count <= dataset.augmentations:
        raise ValueError(
            f"augmentation count {count} outside 1..{dataset.augmentations}"
        )
    instances = [
        Instance(
            crown_id=inst.crown_id,
            images=inst.images[:count],
            scalars=inst.scalars[:count],
            label=inst.label,
            crown_class=inst.crown_class,
            original_label=inst.original_label,
            density=inst.density,
        )
        for inst in dataset.instances
    ]
    return LabeledDataset(dataset.tag, instances)


# ---------------------------------------------------------------------------
# Balanced cyclic resampling and ensemble training


def balanced_cyclic_sample(
    dataset: LabeledDataset, per_class: int, n_networks: int, seed: int
) -> list[list[int]]:
    """Training memberships: per network, per_class instances of each class.

    Each class keeps a shuffled pool consumed without replacement; when a
    draw exhausts the pool it is reshuffled and the draw continues across
    the boundary, so participation counts per instance never differ by
    more than one within a class.
    """
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    rng = np.random.default_rng(derive_seed(seed, "cyclic-sample"))
    pools = {}
    for label in (CONIFER, DECIDUOUS):
        pool = dataset.pool(label)
        if not pool:
            raise ValueError(f"no instances labeled {label}")
        pools[label] = np.array(pool, dtype=np.int64)

    order = {label: rng.permutation(pool) for label, pool in pools.items()}
    position = {label: 0 for label in pools}

    def draw(label: str, k: int) -> list[int]:
        taken: list[int] = []
        while k > 0:
            if position[label] == len(order[label]):
                order[label] = rng.permutation(pools[label])
                position[label] = 0
            take = min(k, len(order[label]) - position[label])
            taken.extend(
                int(i)
                for i in order[label][position[label] : position[label] + take]
            )
            position[label] += take
            k -= take
        return taken

    memberships = []
    for _ in range(n_networks):
        memberships.append(draw(CONIFER, per_class) + draw(DECIDUOUS, per_class))
    return memberships


@dataclass
class TrainedNetwork:
    params: NetworkParams
    acc_n: float  # training accuracy over the augmented training samples
    membership: tuple[int, ...]

    @property
    def held(self) -> frozenset:
        return frozenset(self.membership)


@dataclass
class EnsembleRun:
    networks: list[TrainedNetwork]
    seed: int
    config: dict


def _training_tensors(dataset: LabeledDataset, membership: list[int]):
    images = np.concatenate([dataset.instances[i].images for i in membership])
    scalars = np.concatenate([dataset.instances[i].scalars for i in membership])
    onehots = np.zeros((len(images), 2), dtype=np.float32)
    row = 0
    for i in membership:
        inst = dataset.instances[i]
        count = inst.images.shape[0]
        onehots[row : row + count, CLASS_INDEX[inst.label]] = 1.0
        row += count
    return images, scalars, onehots


# Zero-bias initialization occasionally yields a network whose conv
# chains are dead from the start; it then predicts one class forever and
# scores ~0.5 on its balanced training sample. Such members add large
# opposite-sign outliers to the per-crown holdout statistics, so they are
# retrained from a re-derived seed instead of being kept.
DEGENERATE_ACCURACY = 0.65
DEGENERATE_RETRIES = 3


def train_ensemble(
    dataset: LabeledDataset,
    n_networks: int,
    per_class: int,
    epochs: int,
    seed: int,
    lr: float = ADAM_LR,
    batch_size: int = BATCH_SIZE,
    threads: int | None = None,
) -> EnsembleRun:
    """Train n_networks on balanced cyclic resamples of the dataset.

    A member that ends degenerate (training accuracy below
    DEGENERATE_ACCURACY) is deterministically retrained from a fresh
    derived seed, up to DEGENERATE_RETRIES times; the last attempt is
    kept either way.
    """
    memberships = balanced_cyclic_sample(dataset, per_class, n_networks, seed)

    def build(index: int) -> TrainedNetwork:
        membership = memberships[index]
        images, scalars, onehots = _training_tensors(dataset, membership)
        for attempt in range(DEGENERATE_RETRIES + 1):
            if attempt == 0:
                net_seed = derive_seed(seed, "network", index)
            else:
                net_seed = derive_seed(seed, "network", index, "retry", attempt)
            params = init_params(dataset.tag, seed=net_seed)
            params, acc_n = train_network(
                params,
                images,
                scalars,
                onehots,
                epochs=epochs,
                batch_size=batch_size,
                seed=net_seed,
                lr=lr,
            )
            if acc_n >= DEGENERATE_ACCURACY:
                break
            logger.warning(
                "network %d degenerate (accuracy %.2f), attempt %d",
                index,
                acc_n,
                attempt + 1,
            )
        return TrainedNetwork(params, acc_n, tuple(membership))

    networks = parallel_map(
        build, list(range(n_networks)), threads or default_threads()
    )
    config = {
        "tag": dataset.tag,
        "n_networks": n_networks,
        "per_class": per_class,
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
    }
    return EnsembleRun(networks, seed, config)


# ---------------------------------------------------------------------------
# Holdout evaluation


def _instance_probs(run: EnsembleRun, dataset: LabeledDataset, threads=None):
    """Per network, softmax probabilities for every instance augmentation,
    shaped (instances, augmentations, 2)."""
    n = len(dataset.instances)
    aug = dataset.augmentations
    images = np.concatenate([inst.images for inst in dataset.instances])
    scalars = np.concatenate([inst.scalars for inst in dataset.instances])

    def predict(net: TrainedNetwork):
        return predict_probs(net.params, images, scalars).reshape(n, aug, 2)

    return parallel_map(predict, run.networks, threads or default_threads())


def holdout_accuracy(net: TrainedNetwork, instance: Instance, index: int | None = None) -> float:
    """Fraction of an instance's augmentations classified to its label.

    When the dataset index is given, membership is checked so the caller
    cannot accidentally score a network on its own training crown.
    """
    if index is not None and index in net.held:
        raise ValueError("instance was in the network's training sample")
    probs = predict_probs(net.params, instance.images, instance.scalars)
    predicted = np.argmax(probs, axis=1)
    return float(np.mean(predicted == CLASS_INDEX[instance.label]))


@dataclass
class FlipDecision:
    crown_id: str
    d_values: list[float]  # acc_ni - (1 - acc_n), holdout networks only
    t_statistic: float
    p_value: float
    flipped: bool


def flip_decision(crown_id: str, d_values: list[float], alpha: float) -> FlipDecision:
    """One-sample, one-sided t-test of mean(d) < 0.

    Zero-variance d flips only when every d is negative (p taken as 0)
    and never flips when every d is nonnegative.
    """
    d = np.asarray(d_values, dtype=np.float64)
    mean = float(d.mean())
    # All-identical d is detected exactly; its sample std carries rounding
    # noise that would otherwise produce an arbitrary huge t.
    if np.ptp(d) == 0.0:
        if d[0] < 0:
            t_stat, p_value = float("-inf"), 0.0
        else:
            t_stat, p_value = float("inf"), 1.0
    else:
        sd = float(d.std(ddof=1))
        t_stat = mean / (sd / math.sqrt(len(d)))
        p_value = float(student_t_cdf(t_stat, len(d) - 1))
    return FlipDecision(crown_id, [float(v) for v in d], t_stat, p_value, p_value < alpha)


def mislabel_iteration(
    run: EnsembleRun,
    dataset: LabeledDataset,
    alpha: float = 1e-8,
    threads: int | None = None,
) -> list[FlipDecision]:
    """Test every instance's holdout record against its current label.

    Instances held out by fewer than two networks are skipped (reported
    unflipped with nan statistics) and logged.
    """
    probs = _instance_probs(run, dataset, threads)
    decisions = []
    for i, inst in enumerate(dataset.instances):
        label_index = CLASS_INDEX[inst.label]
        d_values = []
        for net, net_probs in zip(run.networks, probs):
            if i in net.held:
                continue
            acc_ni = float(np.mean(np.argmax(net_probs[i], axis=1) == label_index))
            d_values.append(acc_ni - (1.0 - net.acc_n))
        if len(d_values) < 2:
            logger.warning(
                "%s held out by %d networks; skipping its test",
                inst.crown_id,
                len(d_values),
            )
            decisions.append(
                FlipDecision(inst.crown_id, d_values, float("nan"), float("nan"), False)
            )
            continue
        decisions.append(flip_decision(inst.crown_id, d_values, alpha))
    return decisions


@dataclass
class HistoryRow:
    """One correction iteration; flips counted by the label flipped to."""

    iteration: int
    flips_to_conifer: int
    flips_to_deciduous: int
    mean_acc: float


@dataclass
class CorrectionHistory:
    rows: list[HistoryRow]
    converged: bool


@dataclass
class CorrectionConfig:
    seed: int
    n_networks: int = 100
    per_class: int = 80
    epochs: int = 3
    alpha: float = 1e-8
    max_iterations: int = 20
    lr: float = ADAM_LR
    batch_size: int = BATCH_SIZE
    threads: int | None = None


def correct_mislabels(
    dataset: LabeledDataset, config: CorrectionConfig
) -> tuple[LabeledDataset, CorrectionHistory]:
    """Iteratively retrain, test, and flip labels until no flips remain.

    Labels are corrected in place on the given dataset. Each iteration
    trains a fresh ensemble from new initializations under a derived
    seed. Hitting max_iterations returns the current state with
    converged=False rather than raising.
    """
    rows = []
    converged = False
    for iteration in range(1, config.max_iterations + 1):
        run = train_ensemble(
            dataset,
            config.n_networks,
            config.per_class,
            config.epochs,
            seed=derive_seed(config.seed, "correction", iteration),
            lr=config.lr,
            batch_size=config.batch_size,
            threads=config.threads,
        )
        decisions = mislabel_iteration(run, dataset, config.alpha, config.threads)
        flips = [d for d in decisions if d.flipped]
        by_id = {inst.crown_id: inst for inst in dataset.instances}
        to_conifer = 0
        to_deciduous = 0
        for decision in flips:
            inst = by_id[decision.crown_id]
            if inst.label == CONIFER:
                inst.label = DECIDUOUS
                to_deciduous += 1
            else:
                inst.label = CONIFER
                to_conifer += 1
        mean_acc = float(np.mean([net.acc_n for net in run.networks]))
        rows.append(HistoryRow(iteration, to_conifer, to_deciduous, mean_acc))
        logger.info(
            "correction iteration %d: %d flips, mean training accuracy %.3f",
            iteration,
            len(flips),
            mean_acc,
        )
        if not flips:
            converged = True
            break
    return dataset, CorrectionHistory(rows, converged)


# ---------------------------------------------------------------------------
# Cross-validated ensemble classification


@dataclass
class InstancePrediction:
    crown_id: str
    label: str  # the dataset's label at classification time
    predicted: str
    p_conifer: float  # ensemble-mean softmax probability of conifer
    held_out_by: int


@dataclass
class ClassAccuracy:
    label: str
    accuracy: float
    ci_half_width: float  # normal-approximation binomial, 95%
    n: int


@dataclass
class ClassifyResult:
    predictions: list[InstancePrediction]
    accuracies: dict[str, ClassAccuracy]
    config: dict


def binomial_interval(accuracy: float, n: int) -> float:
    """95% half-width under the normal approximation."""
    if n <= 0:
        return float("nan")
    return 1.96 * math.sqrt(accuracy * (1.0 - accuracy) / n)


def ensemble_predictions(
    run: EnsembleRun, dataset: LabeledDataset, threads: int | None = None
) -> list[InstancePrediction]:
    """Average holdout softmax over networks and augmentations per crown."""
    probs = _instance_probs(run, dataset, threads)
    predictions = []
    for i, inst in enumerate(dataset.instances):
        holdout = [
            net_probs[i]
            for net, net_probs in zip(run.networks, probs)
            if i not in net.held
        ]
        if not holdout:
            predictions.append(
                InstancePrediction(inst.crown_id, inst.label, "", float("nan"), 0)
            )
            continue
        mean_probs = np.stack(holdout).mean(axis=(0, 1))
        predicted = INDEX_CLASS[int(np.argmax(mean_probs))]
        predictions.append(
            InstancePrediction(
                inst.crown_id,
                inst.label,
                predicted,
                float(mean_probs[CLASS_INDEX[CONIFER]]),
                len(holdout),
            )
        )
    return predictions


def accuracies_from_predictions(
    predictions: list[InstancePrediction],
) -> dict[str, ClassAccuracy]:
    """Per-class holdout accuracy; crowns no network held out are excluded."""
    accuracies = {}
    for label in (CONIFER, DECIDUOUS):
        scored = [p for p in predictions if p.label == label and p.held_out_by > 0]
        excluded = sum(1 for p in predictions if p.label == label and p.held_out_by == 0)
        if excluded:
            logger.info(
                "%d %s crowns held out by no network; excluded from accuracy",
                excluded,
                label,
            )
        if not scored:
            accuracies[label] = ClassAccuracy(label, float("nan"), float("nan"), 0)
            continue
        accuracy = float(np.mean([p.predicted == label for p in scored]))
        accuracies[label] = ClassAccuracy(
            label, accuracy, binomial_interval(accuracy, len(scored)), len(scored)
        )
    return accuracies


def ensemble_classify(
    dataset: LabeledDataset,
    n_networks: int = 50,
    per_class: int = 100,
    epochs: int = 5,
    seed: int = 0,
    lr: float = ADAM_LR,
    batch_size: int = BATCH_SIZE,
    threads: int | None = None,
) -> ClassifyResult:
    """Cross-validated classification: every crown is predicted only by
    the networks that never trained on it."""
    run = train_ensemble(
        dataset, n_networks, per_class, epochs, seed, lr, batch_size, threads
    )
    predictions = ensemble_predictions(run, dataset, threads)
    accuracies = accuracies_from_predictions(predictions)
    return ClassifyResult(predictions, accuracies, dict(run.config, seed=seed))


# ---------------------------------------------------------------------------
# Evaluation sweeps


@dataclass
class SweepSpec:
    variant: str  # size | augmentation | ablation | crown_class | density
    fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    repeats: int = 3
    augmentations: tuple[int, ...] = ()
    ablations: tuple[str, ...] = ABLATION_NAMES


@dataclass
class SweepRow:
    variant: str
    param: str
    acc_conifer: float
    ci_conifer: float
    acc_deciduous: float
    ci_deciduous: float


def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Correlation and two-sided p-value; degenerate inputs give (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 3:
        return 0.0, 1.0
    cx = x - x.mean()
    cy = y - y.mean()
    denom = math.sqrt(float((cx**2).sum()) * float((cy**2).sum()))
    if denom == 0.0:
        return 0.0, 1.0
    r = float((cx * cy).sum() / denom)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t_stat = r * math.sqrt((n - 2) / (1.0 - r * r))
    p_value = 2.0 * float(student_t_cdf(-abs(t_stat), n - 2))
    return r, p_value


def _row_from_result(variant: str, param: str, result: ClassifyResult) -> SweepRow:
    con = result.accuracies[CONIFER]
    dec = result.accuracies[DECIDUOUS]
    return SweepRow(
        variant, param, con.accuracy, con.ci_half_width, dec.accuracy, dec.ci_half_width
    )


def run_sweep(
    dataset: LabeledDataset,
    spec: SweepSpec,
    n_networks: int = 50,
    per_class: int = 100,
    epochs: int = 5,
    seed: int = 0,
    lr: float = ADAM_LR,
    batch_size: int = BATCH_SIZE,
    threads: int | None = None,
    alternates: "dict[str, LabeledDataset] | None" = None,
) -> list[SweepRow]:
    """Run one evaluation sweep and return its result table.

    The raw-intensity ablation needs a dataset rebuilt without intensity
    normalization, passed via alternates={"raw-intensity": dataset}.
    """
    classify_args = dict(lr=lr, batch_size=batch_size, threads=threads)
    rows: list[SweepRow] = []

    if spec.variant == "size":
        for fraction in spec.fractions:
            per_label_acc = {CONIFER: [], DECIDUOUS: []}
            for repeat in range(spec.repeats):
                sub_seed = derive_seed(seed, "size", f"{fraction:g}", repeat)
                rng = np.random.default_rng(sub_seed)
                chosen: list[int] = []
                for label in (CONIFER, DECIDUOUS):
                    pool = dataset.pool(label)
                    k = max(2, int(round(fraction * len(pool))))
                    k = min(k, len(pool))
                    picked = rng.choice(len(pool), size=k, replace=False)
                    chosen.extend(pool[j] for j in picked)
                subset = LabeledDataset(
                    dataset.tag, [dataset.instances[i] for i in sorted(chosen)]
                )
                result = ensemble_classify(
                    subset,
                    n_networks,
                    max(1, int(round(fraction * per_class))),
                    epochs,
                    seed=sub_seed,
                    **classify_args,
                )
                for label in (CONIFER, DECIDUOUS):
                    per_label_acc[label].append(result.accuracies[label].accuracy)
            means = {}
            cis = {}
            for label in (CONIFER, DECIDUOUS):
                values = np.array(per_label_acc[label], dtype=np.float64)
                means[label] = float(values.mean())
                cis[label] = (
                    float(1.96 * values.std(ddof=1) / math.sqrt(len(values)))
                    if len(values) > 1
                    else 0.0
                )
            rows.append(
                SweepRow(
                    "size",
                    f"{fraction:g}",
                    means[CONIFER],
                    cis[CONIFER],
                    means[DECIDUOUS],
                    cis[DECIDUOUS],
                )
            )

    elif spec.variant == "augmentation":
        for count in spec.augmentations:
            truncated = truncate_augmentations(dataset, count)
            result = ensemble_classify(
                truncated,
                n_networks,
                per_class,
                epochs,
                seed=derive_seed(seed, "augmentation", count),
                **classify_args,
            )
            rows.append(_row_from_result("augmentation", str(count), result))

    elif spec.variant == "ablation":
        for name in spec.ablations:
            if name == "none":
                variant_dataset = dataset
            elif name == "no-leaf-off":
                variant_dataset = select_channels(dataset, LEAF_ON_CHANNELS)
            elif name == "no-leaf-on":
                variant_dataset = select_channels(dataset, LEAF_OFF_CHANNELS)
            elif name == "binary-intensity":
                variant_dataset = binarize_intensity(dataset)
            elif name == "raw-intensity":
                if not alternates or "raw-intensity" not in alternates:
                    raise ValueError(
                        "raw-intensity ablation needs a dataset built without "
                        "intensity normalization"
                    )
                variant_dataset = alternates["raw-intensity"]
            else:
                raise ValueError(f"unknown ablation {name!r}")
            result = ensemble_classify(
                variant_dataset,
                n_networks,
                per_class,
                epochs,
                seed=derive_seed(seed, "ablation", name),
                **classify_args,
            )
            rows.append(_row_from_result("ablation", name, result))

    elif spec.variant == "crown_class":
        result = ensemble_classify(
            dataset,
            n_networks,
            per_class,
            epochs,
            seed=derive_seed(seed, "crown-class"),
            **classify_args,
        )
        group_of = {
            inst.crown_id: (
                "overstory" if inst.crown_class in OVERSTORY_CLASSES else "understory"
            )
            for inst in dataset.instances
        }
        for group in ("overstory", "understory"):
            group_preds = [
                p for p in result.predictions if group_of[p.crown_id] == group
            ]
            accuracies = accuracies_from_predictions(group_preds)
            rows.append(
                SweepRow(
                    "crown_class",
                    group,
                    accuracies[CONIFER].accuracy,
                    accuracies[CONIFER].ci_half_width,
                    accuracies[DECIDUOUS].accuracy,
                    accuracies[DECIDUOUS].ci_half_width,
                )
            )

    elif spec.variant == "density":
        result = ensemble_classify(
            dataset,
            n_networks,
            per_class,
            epochs,
            seed=derive_seed(seed, "density"),
            **classify_args,
        )
        by_id = {inst.crown_id: inst for inst in dataset.instances}
        stats = {}
        for label in (CONIFER, DECIDUOUS):
            densities = []
            correct_probs = []
            for pred in result.predictions:
                if pred.label != label or pred.held_out_by == 0:
                    continue
                densities.append(by_id[pred.crown_id].density)
                correct_probs.append(
                    pred.p_conifer if label == CONIFER else 1.0 - pred.p_conifer
                )
            stats[label] = _pearson(np.array(densities), np.array(correct_probs))
        # Schema reuse: correlation in the accuracy columns, its p-value
        # in the interval columns.
        rows.append(
            SweepRow(
                "density",
                "pearson-r",
                stats[CONIFER][0],
                stats[CONIFER][1],
                stats[DECIDUOUS][0],
                stats[DECIDUOUS][1],
            )
        )

    else:
        raise ValueError(f"unknown sweep variant {spec.variant!r}")

    return rows


# ---------------------------------------------------------------------------
# Text emission


def write_history(path: "str | Path", history: CorrectionHistory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(HISTORY_COLUMNS.split(","))
        for row in history.rows:
            writer.writerow(
                [
                    row.iteration,
                    row.flips_to_conifer,
                    row.flips_to_deciduous,
                    repr(row.mean_acc),
                ]
            )


def read_history(path: "str | Path") -> list[HistoryRow]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != HISTORY_COLUMNS.split(","):
            raise ValueError(f"{path}: expected header {HISTORY_COLUMNS!r}")
        return [
            HistoryRow(int(row[0]), int(row[1]), int(row[2]), float(row[3]))
            for row in reader
        ]


def write_predictions(path: "str | Path", predictions: list[InstancePrediction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(PREDICTION_COLUMNS.split(","))
        for p in predictions:
            writer.writerow(
                [p.crown_id, p.label, p.predicted, repr(p.p_conifer), p.held_out_by]
            )


def read_predictions(path: "str | Path") -> list[InstancePrediction]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != PREDICTION_COLUMNS.split(","):
            raise ValueError(f"{path}: expected header {PREDICTION_COLUMNS!r}")
        return [
            InstancePrediction(row[0], row[1], row[2], float(row[3]), int(row[4]))
            for row in reader
        ]


def write_sweep_table(path: "str | Path", rows: list[SweepRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SWEEP_COLUMNS.split(","))
        for row in rows:
            writer.writerow(
                [
                    row.variant,
                    row.param,
                    repr(row.acc_conifer),
                    repr(row.ci_conifer),
                    repr(row.acc_deciduous),
                    repr(row.ci_deciduous),
                ]
            )


def read_sweep_table(path: "str | Path") -> list[SweepRow]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != SWEEP_COLUMNS.split(","):
            raise ValueError(f"{path}: expected header {SWEEP_COLUMNS!r}")
        return [
            SweepRow(
                row[0], row[1], float(row[2]), float(row[3]), float(row[4]), float(row[5])
            )
            for row in reader
        ]

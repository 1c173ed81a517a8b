"""Dice evaluation and the component-ablation harness."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import segnet
from .data import Dataset, SynthSpec, generate


def dice_coefficient(pred, true, cls: int) -> float:
    """``2|A∩B| / (|A|+|B|)`` on the binary masks of ``cls``; 1.0 if both are empty."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    a, b = pred == cls, true == cls
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def minority_classes(labels: np.ndarray, num_classes: int) -> list[int]:
    """The ceil(K/2) foreground classes with the smallest true area."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=num_classes)[1:]
    order = np.argsort(counts, kind="stable")
    return sorted(int(c) + 1 for c in order[: math.ceil((num_classes - 1) / 2)])


@dataclass
class EvalReport:
    per_class: dict[int, float]
    average: float
    minority: float
    minority_classes: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [(str(c), d) for c, d in self.per_class.items()] + [("avg", self.average)]

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / "dice.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "dice"])
            for name, value in self.rows():
                writer.writerow([name, repr(value)])
        summary = {
            "per_class": {str(c): d for c, d in self.per_class.items()},
            "average": self.average,
            "minority_classes": self.minority_classes,
            "minority": self.minority,
        }
        (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def score(predictions: np.ndarray, truth: Dataset) -> EvalReport:
    """Per-class Dice averaged over images, then the mean over foreground classes."""
    k1 = truth.num_classes
    per_image = np.array(
        [[dice_coefficient(p, t, c) for c in range(1, k1)] for p, t in zip(predictions, truth.labels)]
    )
    per_class = {c: float(per_image[:, c - 1].mean()) for c in range(1, k1)}
    avg = float(np.mean(list(per_class.values())))
    minority = minority_classes(truth.labels, k1)
    return EvalReport(per_class, avg, float(np.mean([per_class[c] for c in minority])), minority)


def predict(state: segnet.ModelState, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    preds = [segnet.inference(state, images[i : i + chunk, None]) for i in range(0, len(images), chunk)]
    return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[1:], dtype=np.int64)


def evaluate(state: segnet.ModelState, test: Dataset) -> EvalReport:
    """Teacher inference on every test image, scored per class."""
    return score(predict(state, test.images), test)


# ---------------------------------------------------------------- ablation

VARIANTS = {
    "A": dict(semi_supervised=False, use_scs=False, mu=0.0, lambda1_max=0.0, lambda2=0.0, lambda3=0.0),
    "B": dict(use_scs=False, mu=0.0, lambda2=0.0, lambda3=0.0),
    "C": dict(lambda2=0.0, lambda3=0.0),
    "D": dict(lambda3=0.0),
    "E": dict(),
    "F": dict(),
}
PARTITION_METHOD = {"E": "kmeans"}


@dataclass
class AblationSetup:
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(samples=0))
    labeled: int = 4
    unlabeled: int = 40
    test: int = 20
    iterations: int = 500
    pretrain_iterations: int = 200
    base_channels: int = 8
    train_overrides: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    variants: list[str]
    seeds: list[int]
    reports: dict[tuple[str, int], EvalReport]

    def cell(self, variant: str, seed: int) -> EvalReport:
        return self.reports[(variant, seed)]

    def mean_minority(self, variant: str) -> float:
        return float(np.mean([self.reports[(variant, s)].minority for s in self.seeds]))

    def wins(self, better: str, worse: str) -> int:
        """Seeds where ``better`` has minority Dice >= ``worse``."""
        return sum(self.reports[(better, s)].minority >= self.reports[(worse, s)].minority for s in self.seeds)

    def rows(self) -> list[dict]:
        out = []
        for v in self.variants:
            for s in self.seeds:
                r = self.reports[(v, s)]
                row = {"variant": v, "seed": s}
                row.update({f"class_{c}": d for c, d in r.per_class.items()})
                row["avg"] = r.average
                row["minority"] = r.minority
                out.append(row)
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def split_dataset(setup: AblationSetup, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    total = setup.labeled + setup.unlabeled + setup.test
    ds = generate(replace(setup.synth, samples=total, seed=seed))
    n, m = setup.labeled, setup.unlabeled
    return ds.subset(range(n)), ds.subset(range(n, n + m)), ds.subset(range(n + m, total))


def ablation_harness(seeds, variants=tuple(VARIANTS), setup: AblationSetup | None = None, progress=None) -> AblationTable:
    """Train and score each variant on identical per-seed data and seeds.

    For every seed the dataset, backbone and partitions are shared by all
    variants; only (E) swaps the balanced clustering for plain k-means.
    """
    from .partition import build_partition, extract_features, pretrain_backbone
    from .trainer import TrainConfig, fit

    setup = setup or AblationSetup()
    seeds, variants = list(seeds), list(variants)
    reports: dict[tuple[str, int], EvalReport] = {}
    for seed in seeds:
        labeled, unlabeled, test = split_dataset(setup, seed)
        net = segnet.NetConfig(
            base_channels=setup.base_channels,
            num_classes=labeled.num_classes,
            num_subclasses=labeled.num_classes,
            height=setup.synth.height,
            width=setup.synth.width,
        )
        partitions = {}
        needs_partition = any(v not in ("A", "B") for v in variants)
        if needs_partition:
            backbone, _ = pretrain_backbone(labeled, net, setup.pretrain_iterations, seed=seed)
            feats = extract_features(backbone, labeled.images)
            for method in {PARTITION_METHOD.get(v, "balanced") for v in variants if v not in ("A", "B")}:
                partitions[method] = build_partition(backbone, labeled, seed=seed, method=method, features=feats)
        for v in variants:
            opts = dict(iterations=setup.iterations, seed=seed)
            opts.update(setup.train_overrides)
            opts.update(VARIANTS[v])
            config = TrainConfig(**opts)
            table = None
            lab = labeled
            if config.use_scs:
                part = partitions[PARTITION_METHOD.get(v, "balanced")]
                table = part.table
                lab = Dataset(labeled.images, labeled.labels, labeled.num_classes, part.sub_labels, table.num_subclasses)
            net_v = replace(net, num_subclasses=table.num_subclasses if table else net.num_classes)
            result = fit(lab, unlabeled if config.semi_supervised else None, table, config, net_config=net_v)
            reports[(v, seed)] = evaluate(result.state, test)
            if progress:
                progress(v, seed, reports[(v, seed)])
    return AblationTable(variants, seeds, reports)

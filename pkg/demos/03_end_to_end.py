"""Synthetic data to pruned teacher, in one script.

The steps mirror the CLI stages: generate, pretrain a backbone, split each
class into balanced subclasses, train the dual-task mean teacher, score it,
and confirm the SCS branch can be dropped at inference.

Run: python demos/03_end_to_end.py [iterations]   (default 300)
"""

import sys
from dataclasses import replace

import numpy as np

from basic_seg import segnet
from basic_seg.data import Dataset, SynthSpec, generate, imbalance_ratio
from basic_seg.evaluation import evaluate
from basic_seg.partition import build_partition, pretrain_backbone
from basic_seg.trainer import TrainConfig, fit

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300

data = generate(SynthSpec(samples=44, seed=0))
labeled, unlabeled, test = data.subset(range(4)), data.subset(range(4, 34)), data.subset(range(34, 44))
print(f"foreground imbalance (largest/smallest area): {imbalance_ratio(data.labels, 6):.0f}x")

net = segnet.NetConfig(num_classes=6, num_subclasses=6)
backbone, _ = pretrain_backbone(labeled, net, iterations=150, seed=0)
part = build_partition(backbone, labeled, seed=0)
print("subclasses per class:", part.table.counts().tolist())

lab = Dataset(labeled.images, labeled.labels, 6, part.sub_labels, part.table.num_subclasses)
result = fit(lab, unlabeled, part.table, TrainConfig(iterations=iterations, seed=0),
             net_config=replace(net, num_subclasses=part.table.num_subclasses))
first, last = result.losses[0], result.losses[-1]
print(f"L_sup {first['sup']:.3f} -> {last['sup']:.3f} over {iterations} steps")

report = evaluate(result.state, test)
print("teacher Dice per class:", {c: round(d, 3) for c, d in report.per_class.items()})
print(f"average {report.average:.3f}, minority classes {report.minority:.3f}")

# Inference reads only the encoder and the MoS decoder.
pruned = result.state.copy()
for name in pruned.teacher:
    if name.startswith("scs."):
        pruned.teacher[name].data[...] = np.nan
x = test.images[:, None]
same = np.array_equal(segnet.inference(pruned, x), segnet.inference(result.state, x))
print("predictions unchanged with the SCS decoder poisoned:", same)

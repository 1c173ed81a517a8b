"""Why balanced clustering: equal-size subclasses versus plain k-means.

Points come from one large blob and one small one. Plain k-means lets
cluster sizes follow the data, while the balanced variant keeps every
cluster within one point of the others at a modest cost in compactness.

Run: python demos/02_balanced_partition.py
"""

import numpy as np

from basic_seg.partition import allocate_subclass_counts, balanced_kmeans, kmeans, objective

rng = np.random.default_rng(1)
points = np.concatenate([rng.normal(0.0, 1.0, size=(180, 2)), rng.normal(6.0, 0.3, size=(20, 2))])

for name, fn in (("k-means", kmeans), ("balanced", balanced_kmeans)):
    assign, _ = fn(points, 4, seed=0)
    sizes = np.bincount(assign, minlength=4)
    print(f"{name:>9}: sizes {sizes.tolist()}, within-cluster SSE {objective(points, assign, 4):.1f}")

# Subclass counts scale with foreground area; the rarest class gets one and
# background (index 0) is never split.
areas = [50000, 1200, 300, 80]
print("pixels per class", areas, "-> subclasses", allocate_subclass_counts(areas).tolist())

"""
Domain gap and client heterogeneity
===================================

"""

import numpy as np

from dpfl import analysis, data
from dpfl.config import DatasetBlock, build_transfer

# LDA on (source, target) with dataset identity as the label
block = DatasetBlock(samples_per_class=500)
for magnitude in (0.0, 0.3, 0.6, 1.2):
    pair, _ = build_transfer(block, seed=0, magnitude=magnitude)
    gap = analysis.lda_project([pair.source, pair.target])
    print(f"rotation {magnitude:.1f} rad -> gap {gap.gap_statistic:.3f}")

# projections are plain (n, 2) arrays, ready for any plotting tool
print("projection shapes:", [p.shape for p in gap.projections])

# smaller alpha concentrates each client on fewer classes
target = pair.target
for alpha in (0.1, 1.0, 10.0):
    part = data.dirichlet_partition(target, 10, alpha, seed=0)
    dev = data.class_proportion_deviation(target, part)
    print(f"alpha={alpha:<5} sizes={part.client_sizes.tolist()} mean deviation={dev.mean():.4f}")

counts = np.bincount(target.labels[part.assignments[0]], minlength=target.num_classes)
print("client 0 class counts at alpha=10:", counts.tolist())

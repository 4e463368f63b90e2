"""Length-homogeneous mini-batching of motion samples."""
from __future__ import annotations

import numpy as np

from .diffcore import Rng
from .motion import MultiModalMotion, SkeletonTopology, derive_streams


def length_batches(lengths, batch_size: int, rng: Rng | None) -> list:
    """Index batches containing a single sequence length each."""
    order = np.arange(len(lengths)) if rng is None else rng.permutation(len(lengths))
    buckets = {}
    for i in order:
        buckets.setdefault(int(lengths[i]), []).append(int(i))
    batches = []
    for L in sorted(buckets):
        idx = buckets[L]
        batches += [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def stack_streams(motions: list, topology: SkeletonTopology, dtype=np.float32) -> MultiModalMotion:
    x = np.stack([np.asarray(m, np.float64) for m in motions])
    mm = derive_streams(x, topology)
    return MultiModalMotion(*(s.astype(dtype) for s in mm.as_tuple()))

"""Small numeric helpers used by several modules."""
import math

import numpy as np

TIE_ATOL = 1e-9


def argmax_lowest(x, atol=TIE_ATOL):
    """Argmax over the last axis; entries within ``atol`` of the max count as
    ties and the lowest index wins."""
    x = np.asarray(x, dtype=float)
    top = x.max(axis=-1, keepdims=True)
    near = x >= top - atol * np.maximum(1.0, np.abs(top))
    return np.argmax(near, axis=-1)


def fsum_stack(arrays):
    """Elementwise compensated sum of equally shaped arrays."""
    stacked = np.stack([np.asarray(a, dtype=float) for a in arrays])
    flat = stacked.reshape(stacked.shape[0], -1)
    out = np.array([math.fsum(flat[:, k]) for k in range(flat.shape[1])])
    return out.reshape(stacked.shape[1:])

"""Random small transport instances shared by the solver tests."""
from __future__ import annotations

import numpy as np

from equitransport.domain import Box
from equitransport.randmeas import DiscreteDensity, PointConfiguration


def random_instance(seed: int, kind: str, d: int | None = None, max_cells: int = 200,
                    max_atoms: int = 8, K: int = 64):
    """Grid density with random cell masses and random atoms satisfying ``kind``.

    Masses are small integer numbers of quanta so exact comparisons are cheap.
    """
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(1, 3))
    if d == 1:
        shape = (int(rng.integers(1, 4)),)
        k = int(rng.integers(1, max(2, max_cells // (shape[0] * 1)) + 1))
        k = min(k, max_cells // shape[0])
    else:
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        k = int(rng.integers(1, 8))
        while k * k * shape[0] * shape[1] > max_cells:
            k -= 1
    box = Box((0,) * d, shape)
    grid = tuple(s * k for s in shape)
    masses = rng.integers(0, 4, size=grid).astype(np.int64)
    if masses.sum() == 0:
        masses.flat[0] = 1
    src = DiscreteDensity(box, k, K, masses)
    m = int(rng.integers(1, max_atoms + 1))
    pos = rng.random((m, d)) * np.array(shape)
    total = int(src.total)
    if kind == "coupling":
        target_total = total
    elif kind == "semicoupling_source":
        target_total = int(rng.integers(0, total + 1))
    else:
        target_total = total + int(rng.integers(0, total + 2))
    cuts = np.sort(rng.integers(0, target_total + 1, size=m - 1))
    w = np.diff(np.concatenate([[0], cuts, [target_total]])).astype(np.int64)
    if kind != "semicoupling_source" and not np.any(w > 0):
        w[0] = target_total
    return src, PointConfiguration(pos, w, K)

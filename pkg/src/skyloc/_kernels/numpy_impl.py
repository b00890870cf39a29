"""Pure-numpy implementations of the per-pixel hot kernels.

Used when the compiled extension is unavailable (or disabled through
``SKYLOC_PURE_PYTHON=1``).  Semantics match ``_native`` exactly; the test
suite asserts equivalence whenever both are importable.
"""

import numpy as np


def soft_detection_components(resp: np.ndarray):
    """Soft local-max and ratio-to-max maps for a positive response volume.

    resp: (h, w, n) strictly positive responses.
    Returns (eta, zeta, phi) where eta is the per-channel softmax of each
    pixel against its 9-pixel neighborhood (clipped at borders), zeta the
    per-pixel ratio to the channelwise max, and phi = max_k(eta * zeta).

    Stabilization subtracts one global shift before exponentiation; the
    shift cancels in the neighborhood ratio, so the values equal the
    per-neighborhood-max formulation used by the compiled kernel.
    """
    h, w, _ = resp.shape
    e = np.exp(resp - resp.max())
    epad = np.pad(e, ((1, 1), (1, 1), (0, 0)))
    denom = np.zeros_like(e)
    for dy in range(3):
        for dx in range(3):
            denom += epad[dy : dy + h, dx : dx + w]
    eta = e / denom
    zeta = resp / resp.max(axis=2, keepdims=True)
    phi = (eta * zeta).max(axis=2)
    return eta, zeta, phi


def hard_detect_mask(resp: np.ndarray) -> np.ndarray:
    """Boolean (h, w) mask of the hard detection rule.

    A pixel passes when its response on the channel-argmax channel is a
    strict local maximum of that channel over the clipped 3x3 neighborhood.
    Argmax ties resolve to the lowest channel index.
    """
    h, w, _ = resp.shape
    kstar = resp.argmax(axis=2)[:, :, None]
    rk = np.take_along_axis(resp, kstar, axis=2)[:, :, 0]
    rpad = np.pad(resp, ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    ok = np.ones((h, w), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            if dy == 1 and dx == 1:
                continue
            neigh = np.take_along_axis(rpad[dy : dy + h, dx : dx + w], kstar, axis=2)[:, :, 0]
            ok &= rk > neigh
    return ok


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance matrix between row vectors of a and b."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d

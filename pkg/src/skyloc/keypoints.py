"""Keypoint detection and description on dense feature maps.

A dense feature map is an (h, w, n) array of per-pixel feature vectors.
Detection responses are the softplus of the raw features, which keeps every
response strictly positive so the ratio-to-max channel selection is well
defined.  Descriptors are the raw per-pixel feature vectors, L2-normalized.

Detection has two faces: a differentiable soft score used as the loss
weighting during training (`soft_detection_score_t`), and the hard rule +
subpixel refinement used at test time.  Both share the same response
definition and border convention (neighborhoods are clipped to valid
pixels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import DegenerateInputError, NumericError, ShapeError


@dataclass
class Keypoint:
    """Subpixel detection in input-image coordinates with a unit descriptor."""

    x: float
    y: float
    score: float
    descriptor: np.ndarray


def detection_responses(dmap: np.ndarray) -> np.ndarray:
    """Softplus of the raw features: strictly positive detection responses."""
    dmap = np.asarray(dmap, dtype=np.float64)
    if dmap.ndim != 3 or dmap.shape[2] < 1:
        raise ShapeError(f"expected (h, w, n) feature map, got shape {dmap.shape}")
    if not np.all(np.isfinite(dmap)):
        raise NumericError("feature map contains non-finite values")
    return np.logaddexp(0.0, dmap)


def soft_detection_components(dmap: np.ndarray):
    """Per-channel neighborhood softmax eta, ratio-to-max zeta, and phi.

    eta[i,j,k] softmaxes response (i,j) against its clipped 9-pixel
    neighborhood on channel k; zeta[i,j,k] = R[i,j,k] / max_t R[i,j,t];
    phi[i,j] = max_k eta*zeta.  Exponentials are stabilized by max
    subtraction inside each neighborhood.
    """
    resp = detection_responses(dmap)
    if resp.min() > 0.0:
        return _kernels.soft_detection_components(np.ascontiguousarray(resp))
    # responses underflowed to exact zero somewhere: guard the ratio and
    # let phi collapse to zero there (score() reports degeneracy)
    h, w, _ = resp.shape
    e = np.exp(resp - resp.max())
    epad = np.pad(e, ((1, 1), (1, 1), (0, 0)))
    denom = np.zeros_like(e)
    for dy in range(3):
        for dx in range(3):
            denom += epad[dy : dy + h, dx : dx + w]
    eta = e / denom
    cmax = resp.max(axis=2, keepdims=True)
    zeta = resp / np.where(cmax == 0.0, 1.0, cmax)
    phi = (eta * zeta).max(axis=2)
    return eta, zeta, phi


def soft_detection_score(dmap: np.ndarray) -> np.ndarray:
    """Image-level normalization of phi: nonnegative, sums to one."""
    _, _, phi = soft_detection_components(dmap)
    total = phi.sum()
    if total <= 0.0:
        raise DegenerateInputError("soft detection map is identically zero")
    return phi / total


def soft_detection_score_t(features: T.Tensor) -> T.Tensor:
    """Differentiable twin of `soft_detection_score` for the training loss.

    The stabilizing shift is a detached constant, so values and gradients
    match the inference kernels (which stabilize per neighborhood; the
    shift cancels in the ratio either way).
    """
    h, w, _ = features.shape
    resp = T.softplus(features)
    e = T.exp(T.sub(resp, float(resp.data.max())))
    epad = T.pad2d(e, 1, 1, 1, 1)
    denom = None
    for dy in range(3):
        for dx in range(3):
            part = epad[dy : dy + h, dx : dx + w]
            denom = part if denom is None else T.add(denom, part)
    eta = T.div(e, denom)
    cmax = T.tmax(resp, axis=2, keepdims=True)
    zeta = T.div(resp, cmax)
    phi = T.tmax(T.mul(eta, zeta), axis=2)
    return T.div(phi, T.tsum(phi))


def hard_detect(
    dmap: np.ndarray,
    score: np.ndarray,
    max_kp: int = 1000,
    score_min: float = 0.0,
) -> np.ndarray:
    """Integer-pixel detections under the hard rule, ranked by soft score.

    A pixel (i, j) is kept when, on its channel-argmax channel, the
    response is a strict local maximum over the clipped 3x3 neighborhood.
    Survivors are filtered by `score >= score_min` and the top `max_kp` by
    score are returned as an (m, 2) array of (row, col), ordered by
    descending score with (row, col) breaking ties.
    """
    if max_kp < 1:
        raise ValueError("max_kp must be >= 1")
    resp = detection_responses(dmap)
    mask = _kernels.hard_detect_mask(np.ascontiguousarray(resp))
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    sc = score[rows, cols]
    keep = sc >= score_min
    rows, cols, sc = rows[keep], cols[keep], sc[keep]
    order = np.lexsort((cols, rows, -sc))[:max_kp]
    return np.stack([rows[order], cols[order]], axis=1).astype(np.int64)


def _quadratic_offset(patch: np.ndarray) -> tuple[float, float]:
    """Peak offset (dy, dx) of a 2D quadratic fitted to a 3x3 patch."""
    gy = 0.5 * (patch[2, 1] - patch[0, 1])
    gx = 0.5 * (patch[1, 2] - patch[1, 0])
    hyy = patch[2, 1] - 2.0 * patch[1, 1] + patch[0, 1]
    hxx = patch[1, 2] - 2.0 * patch[1, 1] + patch[1, 0]
    hxy = 0.25 * (patch[2, 2] - patch[2, 0] - patch[0, 2] + patch[0, 0])
    det = hxx * hyy - hxy * hxy
    if abs(det) < 1e-18:
        return 0.0, 0.0
    dx = (-gx * hyy + gy * hxy) / det
    dy = (-gy * hxx + gx * hxy) / det
    return dy, dx


def bilinear_sample(volume: np.ndarray, y: float, x: float) -> np.ndarray:
    """Bilinear interpolation of an (h, w, n) volume at (row y, col x)."""
    h, w = volume.shape[:2]
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = volume[y0, x0] * (1 - fx) + volume[y0, x1] * fx
    bot = volume[y1, x0] * (1 - fx) + volume[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def refine_and_describe(
    dmap: np.ndarray,
    detections: np.ndarray,
    stride: int = 1,
    score_map: np.ndarray | None = None,
) -> list[Keypoint]:
    """Subpixel refinement plus bilinear descriptors for integer detections.

    The offset comes from a quadratic fit to the 3x3 neighborhood of the
    soft score, clamped to +-0.5 per axis; a singular fit keeps the integer
    position.  Detections on the map border are kept unrefined.  The
    descriptor is sampled from the raw feature map at the refined position
    and L2-normalized.  Positions are scaled by `stride` into input-image
    coordinates, feature cell (i, j) mapping to pixel (x, y) = (j*s, i*s).
    """
    dmap = np.asarray(dmap, dtype=np.float64)
    s = soft_detection_score(dmap) if score_map is None else score_map
    h, w = s.shape
    out: list[Keypoint] = []
    for i, j in np.asarray(detections, dtype=np.int64):
        if 0 < i < h - 1 and 0 < j < w - 1:
            dy, dx = _quadratic_offset(s[i - 1 : i + 2, j - 1 : j + 2])
            dy = float(np.clip(dy, -0.5, 0.5))
            dx = float(np.clip(dx, -0.5, 0.5))
        else:
            dy = dx = 0.0
        ry, rx = i + dy, j + dx
        desc = bilinear_sample(dmap, ry, rx)
        norm = np.linalg.norm(desc)
        if norm == 0.0:
            raise DegenerateInputError(f"zero descriptor at detection ({i}, {j})")
        out.append(
            Keypoint(
                x=rx * stride,
                y=ry * stride,
                score=float(s[i, j]),
                descriptor=desc / norm,
            )
        )
    return out


def detect_keypoints(
    dmap: np.ndarray,
    stride: int = 1,
    max_kp: int = 1000,
    score_min: float = 0.0,
) -> list[Keypoint]:
    """Full test-time path: score, hard-detect, refine, describe."""
    score = soft_detection_score(dmap)
    det = hard_detect(dmap, score, max_kp=max_kp, score_min=score_min)
    return refine_and_describe(dmap, det, stride=stride, score_map=score)


# -- keypoint dump format -------------------------------------------------


def save_keypoints(path, keypoints: list[Keypoint], stride: int) -> None:
    """Columnar text dump: one row per keypoint = x, y, score, descriptor."""
    n = keypoints[0].descriptor.size if keypoints else 0
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# skyloc-keypoints 1\n")
        fh.write(f"# n={n} stride={stride}\n")
        for kp in keypoints:
            vals = [kp.x, kp.y, kp.score, *kp.descriptor.tolist()]
            fh.write("\t".join(f"{v:.17g}" for v in vals) + "\n")


def load_keypoints(path) -> tuple[list[Keypoint], int]:
    """Read a keypoint dump; returns (keypoints, stride)."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "# skyloc-keypoints 1":
            raise ValueError(f"unrecognized keypoint dump header: {header!r}")
        meta = fh.readline().strip().lstrip("# ").split()
        fields = dict(kv.split("=", 1) for kv in meta)
        n, stride = int(fields["n"]), int(fields["stride"])
        kps = []
        for line in fh:
            vals = [float(v) for v in line.split()]
            if len(vals) != 3 + n:
                raise ValueError(f"keypoint row has {len(vals)} fields, expected {3 + n}")
            kps.append(Keypoint(vals[0], vals[1], vals[2], np.array(vals[3:])))
    return kps, stride

"""Evaluation harness: keypoint similarity metrics, Frechet/kernel feature
distances over pluggable extractors, and the boundary-artifact score used
by the blending ablation.

All keypoints are (x, y, visibility) in [0, 1]-normalized coordinates.
The object scale of a match is sqrt(mask-area fraction); a uniform
per-keypoint falloff constant is used unless a table is supplied.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

DEFAULT_OKS_K = 0.1
DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))

# stick-44 subsets
HANDS_SUBSET_STICK44 = tuple(range(2, 44))
FULL_SUBSET_STICK44 = tuple(range(44))


@dataclass
class KeypointMatch:
    """One ground-truth/prediction pair with its OKS constants."""

    gt: np.ndarray              # (N, 3)
    pred: np.ndarray            # (N, 3)
    scale: float                # sqrt of mask-area fraction
    k: np.ndarray = None        # per-keypoint constants, > 0

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.float64)
        if self.gt.shape != self.pred.shape:
            raise ValueError("skeleton layouts do not match")
        if self.k is None:
            self.k = np.full(len(self.gt), DEFAULT_OKS_K)
        self.k = np.asarray(self.k, dtype=np.float64)
        if np.any(self.k <= 0):
            raise ValueError("OKS constants must be positive")
        if self.scale <= 0:
            raise ValueError("object scale must be positive")


def oks(match: KeypointMatch, subset=None) -> float:
    """Mean over visible ground-truth keypoints of
    exp(-d^2 / (2 s^2 k_i^2)); invisible keypoints are excluded."""
    idx = np.arange(len(match.gt)) if subset is None else np.asarray(subset)
    gt = match.gt[idx]
    pred = match.pred[idx]
    k = match.k[idx]
    vis = gt[:, 2] > 0
    if not np.any(vis):
        raise ValueError("no visible ground-truth keypoints")
    d2 = ((gt[vis, 0] - pred[vis, 0]) ** 2
          + (gt[vis, 1] - pred[vis, 1]) ** 2)
    e = d2 / (2.0 * match.scale ** 2 * k[vis] ** 2)
    return float(np.mean(np.exp(-e)))


@dataclass
class Detection:
    """A predicted skeleton with a confidence score."""

    keypoints: np.ndarray
    score: float = 1.0


def _greedy_detections(gt_records, pred_records, thr, subset, k_table):
    """(score, img, pred_idx, is_tp) rows under per-image greedy matching;
    one ground truth per image."""
    rows = []
    for img_idx, (gt_rec, preds) in enumerate(zip(gt_records, pred_records)):
        matched = False
        order = sorted(range(len(preds)), key=lambda j: -preds[j].score)
        taken = {}
        for j in order:
            det = preds[j]
            m = KeypointMatch(gt_rec["keypoints"], det.keypoints,
                              gt_rec["scale"], k_table)
            good = oks(m, subset) >= thr
            if good and not matched:
                matched = True
                taken[j] = True
            else:
                taken[j] = False
        for j, det in enumerate(preds):
            rows.append((det.score, img_idx, j, taken[j]))
    return rows


def _ap_from_rows(rows, total_gt) -> float:
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = fp = 0
    area = 0.0
    prev_recall = 0.0
    for _score, _i, _j, is_tp in rows:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recall = tp / total_gt
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area


def dap(gt_set, pred_set, thresholds=DEFAULT_THRESHOLDS, subset=None,
        k_table=None) -> float:
    """Average precision over OKS thresholds with greedy matching.

    gt_set: list of {"keypoints": (N,3), "scale": float} (one person per
    image); pred_set: list of Detection lists, possibly empty per image.
    """
    if len(gt_set) != len(pred_set):
        raise ValueError("gt and prediction sets differ in length")
    if not gt_set:
        raise ValueError("empty evaluation set")
    n = len(gt_set[0]["keypoints"])
    for rec, preds in zip(gt_set, pred_set):
        if len(rec["keypoints"]) != n or any(
                len(d.keypoints) != n for d in preds):
            raise ValueError("skeleton layouts do not match across the set")
    aps = []
    for thr in thresholds:
        rows = _greedy_detections(gt_set, pred_set, thr, subset, k_table)
        aps.append(_ap_from_rows(rows, len(gt_set)))
    return float(np.mean(aps))


def mpjpe_with_flags(gt: np.ndarray, pred: np.ndarray, subset=None):
    """Mean Euclidean distance over visible ground-truth joints; joints the
    predictor missed count at the maximal normalized distance sqrt(2) and
    are tallied separately. Returns (value, flagged_count)."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    idx = np.arange(len(gt)) if subset is None else np.asarray(subset)
    gt = gt[idx]
    pred = pred[idx]
    vis = gt[:, 2] > 0
    if not np.any(vis):
        raise ValueError("empty joint subset")
    detected = pred[:, 2] > 0
    dists = np.hypot(gt[:, 0] - pred[:, 0], gt[:, 1] - pred[:, 1])
    dists = np.where(detected, dists, math.sqrt(2.0))
    flagged = int(np.sum(vis & ~detected))
    return float(dists[vis].mean()), flagged


def mpjpe(gt: np.ndarray, pred: np.ndarray, subset=None) -> float:
    return mpjpe_with_flags(gt, pred, subset)[0]


# ---------------------------------------------------------------------------
# feature-space distances

def fid(features_a: np.ndarray, features_b: np.ndarray,
        ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits:
    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^1/2)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("features must be 2-D with equal dimension")
    mu_a, mu_b = a.mean(0), b.mean(0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + ridge * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + ridge * np.eye(d)
    sqrt_ab, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    value = (np.sum((mu_a - mu_b) ** 2)
             + np.trace(cov_a) + np.trace(cov_b)
             - 2.0 * np.trace(np.real(sqrt_ab)))
    return float(max(value, 0.0))


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def kid(features_a: np.ndarray, features_b: np.ndarray,
        block_size: int = None, n_blocks: int = 10, seed: int = 0):
    """Squared MMD with the cubic polynomial kernel, unbiased block
    estimator. Returns (mean, std) over blocks."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("features must be 2-D with equal dimension")
    n_min = min(len(a), len(b))
    if block_size is None:
        block_size = min(n_min, 256)
    if block_size > n_min:
        raise ValueError(f"block size {block_size} exceeds sample count "
                         f"{n_min}")
    if block_size < 2:
        raise ValueError("need at least 2 samples per block")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_blocks):
        ia = (np.arange(len(a)) if block_size == len(a)
              else rng.choice(len(a), size=block_size, replace=False))
        ib = (np.arange(len(b)) if block_size == len(b)
              else rng.choice(len(b), size=block_size, replace=False))
        vals.append(_mmd2_unbiased(a[ia], b[ib]))
    return float(np.mean(vals)), float(np.std(vals))


# ---------------------------------------------------------------------------
# boundary-artifact score

def boundary_artifact_score(image: np.ndarray, mask: np.ndarray,
                            reference: np.ndarray, band_px: int = 3) -> float:
    """Mean absolute pixel difference to the reference inside a band of
    band_px around the mask boundary."""
    if image.shape != reference.shape:
        raise ValueError("image and reference shapes differ")
    plane = (mask[0] if mask.ndim == 3 else mask) > 0.5
    if not plane.any():
        raise ValueError("empty mask has no boundary band")
    grown = ndimage.binary_dilation(plane, np.ones((3, 3), bool),
                                    iterations=band_px)
    shrunk = ndimage.binary_erosion(plane, np.ones((3, 3), bool),
                                    iterations=band_px, border_value=1)
    band = grown & ~shrunk
    if not band.any():
        raise ValueError("boundary band is empty")
    diff = np.abs(np.asarray(image, dtype=np.float64)
                  - np.asarray(reference, dtype=np.float64))
    return float(diff[:, band].mean())


# ---------------------------------------------------------------------------
# feature extractors

class RandomProjectionExtractor:
    """Seeded random linear projection of resized images; dependency-free
    deterministic fallback with a fixed output dimension."""

    def __init__(self, dim: int = 192, seed: int = 0, input_size: int = 24):
        self.dim = dim
        self.input_size = input_size
        rng = np.random.default_rng(seed)
        n_in = 3 * input_size * input_size
        self.weight = rng.standard_normal((n_in, dim)).astype(
            np.float64) / math.sqrt(n_in)

    def extract(self, images) -> np.ndarray:
        feats = []
        for img in images:
            t = torch.from_numpy(np.ascontiguousarray(img,
                                                      dtype=np.float32))[None]
            small = F.interpolate(t, size=(self.input_size, self.input_size),
                                  mode="bilinear", align_corners=False)
            flat = small.numpy().reshape(-1).astype(np.float64) - 0.5
            feats.append(flat @ self.weight)
        return np.stack(feats)


class StyleClassifierExtractor(nn.Module):
    """Small convolutional style classifier; features are read from the
    layer with `dim` channels (global average pooled)."""

    def __init__(self, dim: int = 192, num_styles: int = 16, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.dim = dim
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, dim, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Linear(dim, num_styles)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    @torch.no_grad()
    def extract(self, images) -> np.ndarray:
        self.eval()
        batch = torch.from_numpy(np.stack([
            np.ascontiguousarray(i, dtype=np.float32) for i in images]))
        return self.features(batch).numpy().astype(np.float64)


def train_feature_extractor(samples, dim: int = 192, num_styles: int = 16,
                            steps: int = 300, batch_size: int = 16,
                            lr: float = 2e-3, seed: int = 0):
    """Fit the style classifier once on (image, style) pairs."""
    model = StyleClassifierExtractor(dim, num_styles, seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    images = [s[0] for s in samples]
    labels = np.array([s[1] for s in samples])
    model.train()
    for _ in range(steps):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        x = torch.from_numpy(np.stack([images[i] for i in idx]).astype(
            np.float32))
        y = torch.from_numpy(labels[idx]).long()
        loss = F.cross_entropy(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def apply_foreground(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the background before feature extraction ("fg" metric mode)."""
    m = mask[0] if mask.ndim == 3 else mask
    return (image * (m > 0.5)[None].astype(np.float32)).astype(np.float32)


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricsReport:
    dap: float
    dap_hands: float
    mpjpe: float
    mpjpe_hands: float
    fid_fg: float
    kid_fg_mean: float
    kid_fg_std: float
    n_samples: int
    config_hash: str
    flagged_joints: int = 0
    boundary_score: float = None
    per_sample: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

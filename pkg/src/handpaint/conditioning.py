"""Conditioning inputs: finger heatmaps, mask channels, skeleton rasters,
and canvas assembly for the outpainting stage.

Image conventions: arrays are float32, channel-first (C, H, W), values in
[0, 1]. Keypoints are (x, y, visibility) with x, y normalized to [0, 1]
by image width/height. All functions here are pure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

# Fixed channel-to-finger assignment for the 10 heatmap channels. Wrists
# (keypoint 0 of each hand) are assigned to no channel.
FINGER_CHANNELS = [
    "left_thumb", "left_index", "left_middle", "left_ring", "left_pinky",
    "right_thumb", "right_index", "right_middle", "right_ring", "right_pinky",
]

# Per-hand keypoint layout (21 points): wrist, then 4 joints per finger
# ordered base -> tip, fingers ordered thumb..pinky.
HAND_KEYPOINTS = 21
FINGER_SLICES = [slice(1 + 4 * f, 1 + 4 * (f + 1)) for f in range(5)]
WRIST = 0
MIDDLE_BASE = 1 + 4 * 2  # first joint of the middle finger

NEUTRAL_FILL = 0.5


class LayoutError(ValueError):
    pass


class HandPlacementError(ValueError):
    """Raised when canvas assembly cannot find the wrist connectivity it
    relies on."""


@dataclass(frozen=True)
class SkeletonLayout:
    name: str
    num_keypoints: int
    hand_slices: tuple  # ((left_lo, left_hi), (right_lo, right_hi))
    body_indices: tuple
    # segments drawn between absolute keypoint indices, with an RGB color
    segments: tuple


_FINGER_COLORS = [
    (1.0, 0.2, 0.2), (1.0, 0.8, 0.2), (0.2, 1.0, 0.2),
    (0.2, 0.8, 1.0), (0.8, 0.2, 1.0),
]


def _hand_segments(base: int):
    segs = []
    for f in range(5):
        color = _FINGER_COLORS[f]
        lo = base + 1 + 4 * f
        segs.append((base + WRIST, lo, color))
        for j in range(3):
            segs.append((lo + j, lo + j + 1, color))
    return segs


def _stick44_layout() -> SkeletonLayout:
    # 0 = head, 1 = pelvis, 2..22 = left hand, 23..43 = right hand
    segments = [(1, 0, (1.0, 1.0, 1.0))]          # torso
    segments += [(0, 2 + WRIST, (0.3, 0.6, 1.0))]  # left arm (head/neck->wrist)
    segments += [(0, 23 + WRIST, (1.0, 0.6, 0.3))]  # right arm
    segments += _hand_segments(2) + _hand_segments(23)
    return SkeletonLayout(
        name="stick-44", num_keypoints=44,
        hand_slices=((2, 23), (23, 44)),
        body_indices=(0, 1),
        segments=tuple(segments),
    )


def _full133_layout() -> SkeletonLayout:
    # 17 body + 6 feet + 68 face + 21 left hand + 21 right hand
    body_pairs = [
        (0, 1), (0, 2), (1, 3), (2, 4), (5, 7), (7, 9), (6, 8), (8, 10),
        (5, 6), (5, 11), (6, 12), (11, 13), (12, 14), (13, 15), (14, 16),
    ]
    segments = [(a, b, (1.0, 1.0, 1.0)) for a, b in body_pairs]
    segments += _hand_segments(91) + _hand_segments(112)
    return SkeletonLayout(
        name="full-133", num_keypoints=133,
        hand_slices=((91, 112), (112, 133)),
        body_indices=tuple(range(17)),
        segments=tuple(segments),
    )


def _hands42_layout() -> SkeletonLayout:
    segments = _hand_segments(0) + _hand_segments(21)
    return SkeletonLayout(
        name="hands-42", num_keypoints=42,
        hand_slices=((0, 21), (21, 42)),
        body_indices=(),
        segments=tuple(segments),
    )


LAYOUTS = {
    layout.name: layout
    for layout in (_stick44_layout(), _full133_layout(), _hands42_layout())
}


@dataclass
class Skeleton:
    """Keypoints (N, 3) as (x, y, visibility) in normalized coordinates."""

    keypoints: np.ndarray
    layout: str = "stick-44"

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise LayoutError(f"unknown skeleton layout {self.layout!r}")
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        expected = LAYOUTS[self.layout].num_keypoints
        if self.keypoints.shape != (expected, 3):
            raise LayoutError(
                f"layout {self.layout} expects ({expected}, 3) keypoints, "
                f"got {self.keypoints.shape}")

    @property
    def spec(self) -> SkeletonLayout:
        return LAYOUTS[self.layout]

    def hand(self, side: int) -> np.ndarray:
        lo, hi = self.spec.hand_slices[side]
        return self.keypoints[lo:hi]

    def hands(self) -> np.ndarray:
        return np.stack([self.hand(0), self.hand(1)])

    def to_json(self) -> dict:
        return {"layout": self.layout,
                "keypoints": [[float(x), float(y), float(v)]
                              for x, y, v in self.keypoints]}

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        return cls(np.asarray(obj["keypoints"], dtype=np.float64),
                   obj["layout"])


@dataclass
class PoseCondition:
    """Stage-I conditioning: 10 finger heatmap channels + 1 mask channel."""

    heatmaps: np.ndarray            # (10, H, W) in [0, 1]
    mask_channel: np.ndarray        # (1, H, W) binary
    clamped_keypoints: int = 0

    def __post_init__(self):
        if self.heatmaps.shape[0] != len(FINGER_CHANNELS):
            raise ValueError("expected 10 heatmap channels")
        if self.mask_channel.shape != (1,) + self.heatmaps.shape[1:]:
            raise ValueError("mask channel spatial size must match heatmaps")

    def channels(self) -> np.ndarray:
        """Full (11, H, W) conditioning stack."""
        return np.concatenate([self.heatmaps, self.mask_channel], axis=0)

    def to_latent(self, f: int) -> np.ndarray:
        """Conditioning downsized to latent spatial dims."""
        return downsize_to_latent(self.channels(), f)

    def with_mask(self, mask: np.ndarray) -> "PoseCondition":
        m = np.asarray(mask, dtype=np.float32).reshape(
            (1,) + self.heatmaps.shape[1:])
        return PoseCondition(self.heatmaps, m, self.clamped_keypoints)


def render_heatmaps(hand_keypoints: np.ndarray, size,
                    sigma: float = 2.0) -> PoseCondition:
    """Gaussian finger heatmaps, max-composited per channel, peak 1.

    hand_keypoints: (2, 21, 3) normalized (x, y, v); hands ordered
    (left, right). Invisible hands (all v = 0) contribute zero channels.
    Out-of-range keypoints are clamped into [0, 1] and counted.
    """
    hand_keypoints = np.asarray(hand_keypoints, dtype=np.float64)
    if hand_keypoints.shape != (2, HAND_KEYPOINTS, 3):
        raise ValueError(
            f"expected (2, {HAND_KEYPOINTS}, 3) keypoints, got {hand_keypoints.shape}")
    h, w = (size, size) if np.isscalar(size) else size
    xy = hand_keypoints[..., :2]
    clamped = int(np.sum((xy < 0.0) | (xy > 1.0)))
    if clamped:
        log.warning("render_heatmaps: clamped %d out-of-range keypoints", clamped)
        xy = np.clip(xy, 0.0, 1.0)

    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    maps = np.zeros((len(FINGER_CHANNELS), h, w), dtype=np.float32)
    for hand in range(2):
        for finger in range(5):
            ch = hand * 5 + finger
            sl = FINGER_SLICES[finger]
            for k in range(sl.start, sl.stop):
                if hand_keypoints[hand, k, 2] <= 0:
                    continue
                kx = xy[hand, k, 0] * w
                ky = xy[hand, k, 1] * h
                bump = np.exp(-((xs - kx) ** 2 + (ys - ky) ** 2)
                              / (2.0 * sigma * sigma))
                np.maximum(maps[ch], bump, out=maps[ch])
    mask = np.zeros((1, h, w), dtype=np.float32)
    return PoseCondition(maps, mask, clamped)


def downsize_to_latent(x: np.ndarray, f: int) -> np.ndarray:
    """Bilinear downsampling by an integer factor f (f = 1 is identity)."""
    if f < 1:
        raise ValueError(f"factor must be >= 1, got {f}")
    if f == 1:
        return np.asarray(x, dtype=np.float32).copy()
    arr = np.asarray(x, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, h, w = arr.shape
    if h % f or w % f:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by {f}")
    t = torch.from_numpy(arr)[None]
    out = F.interpolate(t, size=(h // f, w // f), mode="bilinear",
                        align_corners=False)
    result = out[0].numpy()
    return result[0] if squeeze else result


def render_skeleton(sk: Skeleton, size) -> np.ndarray:
    """Anti-aliased skeleton raster (3, H, W) with the fixed per-limb
    color table; segments with an invisible endpoint are skipped."""
    h, w = (size, size) if np.isscalar(size) else size
    img = np.zeros((3, h, w), dtype=np.float32)
    kps = sk.keypoints
    radius = max(0.6, 0.015 * min(h, w))
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    for a, b, color in sk.spec.segments:
        if kps[a, 2] <= 0 or kps[b, 2] <= 0:
            continue
        ax, ay = kps[a, 0] * w, kps[a, 1] * h
        bx, by = kps[b, 0] * w, kps[b, 1] * h
        lo_x = int(max(0, min(ax, bx) - radius - 1.5))
        hi_x = int(min(w, max(ax, bx) + radius + 2.5))
        lo_y = int(max(0, min(ay, by) - radius - 1.5))
        hi_y = int(min(h, max(ay, by) + radius + 2.5))
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        px = xs[:, lo_x:hi_x]
        py = ys[lo_y:hi_y, :]
        dx, dy = bx - ax, by - ay
        seg2 = dx * dx + dy * dy
        if seg2 < 1e-12:
            t = np.zeros((hi_y - lo_y, hi_x - lo_x))
        else:
            t = ((px - ax) * dx + (py - ay) * dy) / seg2
            t = np.clip(t, 0.0, 1.0)
        cx = ax + t * dx
        cy = ay + t * dy
        dist = np.sqrt((px - cx) ** 2 + (py - cy) ** 2)
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0).astype(np.float32)
        region = img[:, lo_y:hi_y, lo_x:hi_x]
        for c in range(3):
            np.maximum(region[c], alpha * color[c], out=region[c])
    return img


@dataclass
class Canvas:
    """Stage-II input: hand foreground on a neutral background."""

    image: np.ndarray   # (3, H, W)
    mask: np.ndarray    # (1, H, W) binary, 1 exactly where hands were pasted
    transform: tuple    # (scale, tx, ty) crop -> canvas pixel mapping


def _warp_into(src: np.ndarray, out_shape, scale: float, tx: float,
               ty: float, bilinear: bool) -> np.ndarray:
    """Paste src into a (C, H, W) canvas via p_out = scale * p_src + t."""
    c, sh, sw = src.shape
    oh, ow = out_shape
    ys = (np.arange(oh) + 0.5 - ty) / scale - 0.5
    xs = (np.arange(ow) + 0.5 - tx) / scale - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    inside = (gy >= -0.5) & (gy <= sh - 0.5) & (gx >= -0.5) & (gx <= sw - 0.5)
    out = np.zeros((c, oh, ow), dtype=np.float32)
    if bilinear:
        y0 = np.clip(np.floor(gy).astype(int), 0, sh - 1)
        x0 = np.clip(np.floor(gx).astype(int), 0, sw - 1)
        y1 = np.clip(y0 + 1, 0, sh - 1)
        x1 = np.clip(x0 + 1, 0, sw - 1)
        wy = np.clip(gy - y0, 0.0, 1.0)
        wx = np.clip(gx - x0, 0.0, 1.0)
        for ch in range(c):
            plane = src[ch]
            val = (plane[y0, x0] * (1 - wy) * (1 - wx)
                   + plane[y0, x1] * (1 - wy) * wx
                   + plane[y1, x0] * wy * (1 - wx)
                   + plane[y1, x1] * wy * wx)
            out[ch] = np.where(inside, val, 0.0)
    else:
        yn = np.clip(np.round(gy).astype(int), 0, sh - 1)
        xn = np.clip(np.round(gx).astype(int), 0, sw - 1)
        for ch in range(c):
            out[ch] = np.where(inside, src[ch][yn, xn], 0.0)
    return out


def assemble_canvas(hand_image: np.ndarray, hand_mask: np.ndarray,
                    crop_keypoints: np.ndarray, sk: Skeleton,
                    target_size) -> Canvas:
    """Place a generated hand crop onto a neutral canvas aligned with the
    body skeleton.

    The scale matches the crop's wrist-to-middle-finger-base distance to
    the skeleton's, and the translation aligns the wrists. A crop holding
    both hands is placed rigidly using the first visible hand.
    """
    hand_image = np.asarray(hand_image, dtype=np.float32)
    hand_mask = np.asarray(hand_mask, dtype=np.float32)
    if hand_image.shape[1:] != hand_mask.shape[1:]:
        raise ValueError("hand crop and mask sizes differ")
    crop_keypoints = np.asarray(crop_keypoints, dtype=np.float64)
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    ch_, hh, hw = hand_image.shape

    side = None
    for cand in (0, 1):
        ck = crop_keypoints[cand]
        skk = sk.hand(cand)
        if ck[WRIST, 2] > 0 and ck[MIDDLE_BASE, 2] > 0 \
                and skk[WRIST, 2] > 0 and skk[MIDDLE_BASE, 2] > 0:
            side = cand
            break
    if side is None:
        raise HandPlacementError(
            "no hand with a visible wrist and middle-finger base in both the "
            "crop and the skeleton; wrist connectivity is required")

    ck = crop_keypoints[side]
    skk = sk.hand(side)
    crop_wrist = np.array([ck[WRIST, 0] * hw, ck[WRIST, 1] * hh])
    crop_mid = np.array([ck[MIDDLE_BASE, 0] * hw, ck[MIDDLE_BASE, 1] * hh])
    sk_wrist = np.array([skk[WRIST, 0] * tw, skk[WRIST, 1] * th])
    sk_mid = np.array([skk[MIDDLE_BASE, 0] * tw, skk[MIDDLE_BASE, 1] * th])
    d_crop = np.linalg.norm(crop_mid - crop_wrist)
    d_sk = np.linalg.norm(sk_mid - sk_wrist)
    if d_crop < 1e-9 or d_sk < 1e-9:
        raise HandPlacementError("degenerate wrist-to-finger-base distance")
    scale = float(d_sk / d_crop)
    tx = float(sk_wrist[0] - scale * crop_wrist[0])
    ty = float(sk_wrist[1] - scale * crop_wrist[1])

    warped_mask = _warp_into(hand_mask, (th, tw), scale, tx, ty,
                             bilinear=True)
    mask = (warped_mask >= 0.5).astype(np.float32)
    warped_img = _warp_into(hand_image, (th, tw), scale, tx, ty,
                            bilinear=True)
    image = np.full((3, th, tw), NEUTRAL_FILL, dtype=np.float32)
    image = np.where(mask > 0, warped_img, image)
    return Canvas(image=image, mask=mask, transform=(scale, tx, ty))


def invert_canvas_mask(canvas: Canvas, crop_shape) -> np.ndarray:
    """Map the canvas mask back through the recorded placement transform."""
    scale, tx, ty = canvas.transform
    chh, chw = tuple(crop_shape[-2:])
    # inverse mapping: p_src = (p_canvas - t) / scale
    warped = _warp_into(canvas.mask, (chh, chw), 1.0 / scale,
                        -tx / scale, -ty / scale, bilinear=True)
    return (warped >= 0.5).astype(np.float32)


def postprocess_mask(mask: np.ndarray) -> np.ndarray:
    """One binary dilation with a 5x5 square structuring element."""
    arr = np.asarray(mask)
    squeeze = arr.ndim == 3
    plane = arr[0] if squeeze else arr
    out = ndimage.binary_dilation(plane > 0.5, structure=np.ones((5, 5), bool))
    out = out.astype(np.float32)
    return out[None] if squeeze else out


# ---------------------------------------------------------------------------
# file I/O: keypoint JSON + 8-bit PNGs

def save_keypoints(path, sk: Skeleton):
    Path(path).write_text(json.dumps(sk.to_json()))


def load_keypoints(path) -> Skeleton:
    return Skeleton.from_json(json.loads(Path(path).read_text()))


def save_image(path, image: np.ndarray):
    """(3, H, W) float [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return (arr / 255.0).transpose(2, 0, 1)


def save_mask(path, mask: np.ndarray):
    """(1, H, W) or (H, W) binary -> single-channel 0/255 PNG."""
    arr = np.asarray(mask)
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray(((arr > 0.5) * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    return (arr > 127).astype(np.float32)[None]

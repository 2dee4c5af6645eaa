"""Procedural hand and body samples with exact masks and keypoints.

A 2-D parametric hand (palm ellipse + five capsule-chain fingers) is posed
by per-joint flexion angles, a similarity transform, and a handedness
mirror. Because the silhouette is rasterized from the same parameters that
produce the keypoints, masks and keypoints are exact by construction,
which makes the evaluation oracles trivial: inverse kinematics recovers
pose parameters from keypoints in closed form, and a coordinate-descent
silhouette fit recovers keypoints from images.

Geometry is done in pixel coordinates (square pixels); keypoints are
stored normalized by image width/height.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .conditioning import (
    Skeleton,
    load_image,
    load_mask,
    save_image,
    save_mask,
)

# ---------------------------------------------------------------------------
# canonical right-hand template (unit scale = wrist-to-middle-fingertip ~ 1)

PALM_CENTER = np.array([0.0, -0.30])
PALM_AXES = np.array([0.21, 0.27])

# per finger: base joint position, base direction (pointing away from the
# wrist; -pi/2 is straight up in image coordinates), segment lengths,
# capsule radii, curl sign
FINGERS = {
    "thumb": dict(base=np.array([0.18, -0.16]), direction=-math.pi / 2 + 1.1,
                  lengths=(0.15, 0.12, 0.10), radius=(0.055, 0.050, 0.045),
                  sign=-1.0),
    "index": dict(base=np.array([-0.15, -0.52]), direction=-math.pi / 2 - 0.12,
                  lengths=(0.16, 0.10, 0.08), radius=(0.045, 0.040, 0.035),
                  sign=1.0),
    "middle": dict(base=np.array([-0.05, -0.55]), direction=-math.pi / 2,
                   lengths=(0.18, 0.11, 0.085), radius=(0.045, 0.040, 0.035),
                   sign=1.0),
    "ring": dict(base=np.array([0.05, -0.54]), direction=-math.pi / 2 + 0.10,
                 lengths=(0.16, 0.10, 0.08), radius=(0.042, 0.038, 0.033),
                 sign=1.0),
    "pinky": dict(base=np.array([0.14, -0.49]), direction=-math.pi / 2 + 0.22,
                  lengths=(0.12, 0.08, 0.07), radius=(0.038, 0.034, 0.030),
                  sign=1.0),
}
FINGER_ORDER = ("thumb", "index", "middle", "ring", "pinky")

# flexion limits per joint (radians); thumb bends less
FLEX_MAX = {
    "thumb": (1.0, 1.0, 0.8),
    "index": (1.4, 1.6, 1.1),
    "middle": (1.4, 1.6, 1.1),
    "ring": (1.4, 1.6, 1.1),
    "pinky": (1.4, 1.6, 1.1),
}

GESTURES = {
    "open": {f: (0.08, 0.10, 0.06) for f in FINGER_ORDER},
    "fist": {**{f: (1.2, 1.3, 0.9) for f in FINGER_ORDER},
             "thumb": (0.9, 0.8, 0.5)},
    "point": {**{f: (1.2, 1.3, 0.9) for f in FINGER_ORDER},
              "thumb": (0.7, 0.7, 0.4), "index": (0.05, 0.05, 0.05)},
    "peace": {**{f: (1.2, 1.3, 0.9) for f in FINGER_ORDER},
              "thumb": (0.7, 0.7, 0.4), "index": (0.06, 0.05, 0.05),
              "middle": (0.06, 0.05, 0.05)},
    "thumbs_up": {**{f: (1.2, 1.3, 0.9) for f in FINGER_ORDER},
                  "thumb": (0.05, 0.05, 0.05)},
}
DEFAULT_GESTURE_WEIGHTS = {name: 1.0 / len(GESTURES) for name in GESTURES}

SKIN_TONES = np.array([
    [0.95, 0.80, 0.69],
    [0.82, 0.62, 0.46],
    [0.62, 0.42, 0.28],
    [0.42, 0.27, 0.18],
])
BACKGROUNDS = ("studio", "moss", "slate", "sky")
NUM_STYLES = len(SKIN_TONES) * len(BACKGROUNDS)

HAIR_COLOR = np.array([0.20, 0.12, 0.16])
CLOTH_COLOR = np.array([0.25, 0.30, 0.55])

_SHADE_FLOOR = 0.78
_SHADE_BAND = 0.06   # template units over which the rim shading fades


def style_name(style: int) -> str:
    return f"skin{style // 4}-bg{style % 4}"


def style_parts(style: int):
    if not (0 <= style < NUM_STYLES):
        raise ValueError(f"style must be in [0, {NUM_STYLES}), got {style}")
    return style // 4, style % 4


@dataclass
class HandPose:
    """Pose parameters in pixel units: wrist position, hand length,
    rotation, per-finger flexion (5, 3), handedness."""

    center: np.ndarray          # (2,) wrist position, px
    scale: float                # hand length, px
    rotation: float             # radians
    flex: np.ndarray            # (5, 3)
    side: int                   # 0 = left (mirrored), 1 = right

    def copy(self) -> "HandPose":
        return HandPose(self.center.copy(), self.scale, self.rotation,
                        self.flex.copy(), self.side)


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _canonical_points(flex: np.ndarray):
    """Template-frame joint positions: list of (4, 2) per finger."""
    out = []
    for fi, name in enumerate(FINGER_ORDER):
        spec = FINGERS[name]
        pts = [spec["base"]]
        direction = spec["direction"]
        p = spec["base"].astype(np.float64)
        for j in range(3):
            direction = direction + spec["sign"] * flex[fi, j]
            p = p + spec["lengths"][j] * np.array([math.cos(direction),
                                                   math.sin(direction)])
            pts.append(p)
        out.append(np.stack(pts))
    return out


def hand_keypoints_px(pose: HandPose) -> np.ndarray:
    """21 keypoints in pixel coordinates: wrist, then 4 joints per finger."""
    mirror = np.array([-1.0, 1.0]) if pose.side == 0 else np.array([1.0, 1.0])
    R = _rot(pose.rotation)
    pts = [np.zeros(2)]
    for finger_pts in _canonical_points(pose.flex):
        pts.extend(finger_pts)
    arr = np.stack(pts) * mirror
    return pose.center + pose.scale * arr @ R.T


def fit_pose_to_keypoints(kps_px: np.ndarray, side: int) -> HandPose:
    """Closed-form inverse kinematics from exact keypoints (pixel coords)."""
    kps_px = np.asarray(kps_px, dtype=np.float64)
    center = kps_px[0].copy()
    mirror = np.array([-1.0, 1.0]) if side == 0 else np.array([1.0, 1.0])
    t_m = FINGERS["middle"]["base"] * mirror
    v = kps_px[9] - center  # middle finger base
    scale = float(np.linalg.norm(v) / np.linalg.norm(t_m))
    theta = math.atan2(v[1], v[0]) - math.atan2(t_m[1], t_m[0])
    Rinv = _rot(-theta)
    canon = ((kps_px - center) @ Rinv.T / scale) * mirror
    flex = np.zeros((5, 3))
    for fi, name in enumerate(FINGER_ORDER):
        spec = FINGERS[name]
        base = 1 + 4 * fi
        prev_dir = spec["direction"]
        for j in range(3):
            seg = canon[base + j + 1] - canon[base + j]
            ang = math.atan2(seg[1], seg[0])
            delta = (ang - prev_dir + math.pi) % (2 * math.pi) - math.pi
            flex[fi, j] = spec["sign"] * delta
            prev_dir = ang
    theta = (theta + math.pi) % (2 * math.pi) - math.pi
    return HandPose(center=center, scale=scale, rotation=theta,
                    flex=flex, side=side)


def _segment_distance(px, py, a, b):
    dx, dy = b[0] - a[0], b[1] - a[1]
    seg2 = dx * dx + dy * dy
    if seg2 < 1e-12:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / seg2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * dx), py - (a[1] + t * dy))


def _hand_sdf(pose: HandPose, shape, origin=(0, 0)):
    """Signed-ish distance field in template units: <= 0 inside the hand."""
    h, w = shape
    oy, ox = origin
    ys = (np.arange(h) + 0.5 + oy)[:, None]
    xs = (np.arange(w) + 0.5 + ox)[None, :]
    mirror = np.array([-1.0, 1.0]) if pose.side == 0 else np.array([1.0, 1.0])
    Rinv = _rot(-pose.rotation)
    # pixel -> template frame
    rel_x = (xs - pose.center[0]) / pose.scale
    rel_y = (ys - pose.center[1]) / pose.scale
    tx = (Rinv[0, 0] * rel_x + Rinv[0, 1] * rel_y) * mirror[0]
    ty = (Rinv[1, 0] * rel_x + Rinv[1, 1] * rel_y) * mirror[1]

    ex = (tx - PALM_CENTER[0]) / PALM_AXES[0]
    ey = (ty - PALM_CENTER[1]) / PALM_AXES[1]
    # approximate ellipse distance, exact sign
    enorm = np.sqrt(ex * ex + ey * ey)
    sdf = (enorm - 1.0) * PALM_AXES.min()

    for finger_pts, name in zip(_canonical_points(pose.flex), FINGER_ORDER):
        radii = FINGERS[name]["radius"]
        for j in range(3):
            d = _segment_distance(tx, ty, finger_pts[j], finger_pts[j + 1])
            np.minimum(sdf, d - radii[j], out=sdf)
    return sdf


def render_hand_mask(pose: HandPose, shape) -> np.ndarray:
    return (_hand_sdf(pose, shape) <= 0.0).astype(np.float32)


def _paint_hand(image: np.ndarray, pose: HandPose, skin: np.ndarray):
    """Draw the hand with rim shading; returns the exact mask painted."""
    sdf = _hand_sdf(pose, image.shape[1:])
    mask = sdf <= 0.0
    shade = _SHADE_FLOOR + (1.0 - _SHADE_FLOOR) * np.clip(
        -sdf / _SHADE_BAND, 0.0, 1.0)
    for c in range(3):
        image[c][mask] = (skin[c] * shade)[mask]
    return mask.astype(np.float32)


BACKGROUND_COLORS = np.array([
    [0.72, 0.74, 0.78],   # studio
    [0.27, 0.45, 0.28],   # moss
    [0.23, 0.23, 0.28],   # slate
    [0.35, 0.55, 0.82],   # sky
])


def render_background(shape, bg: int, clutter: bool, rng) -> np.ndarray:
    """Flat style background; clutter adds seeded low-frequency blobs."""
    h, w = shape
    img = np.empty((3, h, w), dtype=np.float32)
    for c in range(3):
        img[c] = BACKGROUND_COLORS[bg][c]
    if clutter:
        ys = (np.arange(h) + 0.5)[:, None]
        xs = (np.arange(w) + 0.5)[None, :]
        n_blobs = rng.integers(6, 12)
        for _ in range(n_blobs):
            cx = rng.uniform(0, w)
            cy = rng.uniform(0, h)
            rad = rng.uniform(0.08, 0.22) * min(h, w)
            color = np.array([rng.uniform(0.1, 0.45), rng.uniform(0.2, 0.7),
                              rng.uniform(0.3, 0.8)])
            rng.shuffle(color[1:])  # keep red low: never skin-like
            blob = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2)
                            / (2.0 * rad * rad))).astype(np.float32)
            alpha = 0.85 * blob
            for c in range(3):
                img[c] = img[c] * (1 - alpha) + color[c] * alpha
    return img


def _draw_capsule(image, a, b, radius, color, mask_out=None):
    h, w = image.shape[1:]
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    d = _segment_distance(xs, ys, a, b)
    inside = d <= radius
    for c in range(3):
        image[c][inside] = color[c]
    if mask_out is not None:
        mask_out[inside] = 1.0


@dataclass
class HandSample:
    """A training record for the hand generator."""

    image: np.ndarray            # (3, H, W) in [0, 1]
    keypoints: np.ndarray        # (2, 21, 3) normalized; absent hand all-zero
    mask: np.ndarray             # (1, H, W) binary union of hand silhouettes
    style: int
    pose_params: list            # [(slot, HandPose)] in this image's pixels
    gesture: str = "open"


@dataclass
class BodySample:
    image: np.ndarray            # (3, H, W)
    skeleton: Skeleton           # stick-44
    hand_masks: np.ndarray       # (2, H, W) exact per-hand silhouettes
    figure_mask: np.ndarray      # (1, H, W) whole-figure foreground
    style: int
    gestures: tuple              # per hand
    hand_poses: list             # [HandPose, HandPose]
    background: np.ndarray = None  # body scene without hands (for cropping)


def _pick_gesture(rng, weights) -> str:
    names = sorted(weights)
    probs = np.array([weights[n] for n in names], dtype=np.float64)
    probs = probs / probs.sum()
    return names[rng.choice(len(names), p=probs)]


def _draw_flex(rng, gesture: str) -> np.ndarray:
    flex = np.zeros((5, 3))
    for fi, name in enumerate(FINGER_ORDER):
        base = GESTURES[gesture][name]
        hi = FLEX_MAX[name]
        for j in range(3):
            flex[fi, j] = np.clip(base[j] + rng.normal(0.0, 0.08),
                                  0.0, hi[j])
    return flex


def _keypoints_in_frame(kps_px, shape, margin=1.5) -> bool:
    h, w = shape
    return bool(np.all(kps_px[:, 0] > margin) and np.all(kps_px[:, 0] < w - margin)
                and np.all(kps_px[:, 1] > margin) and np.all(kps_px[:, 1] < h - margin))


def normalized_keypoints(kps_px: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    out = np.ones((len(kps_px), 3))
    out[:, 0] = kps_px[:, 0] / w
    out[:, 1] = kps_px[:, 1] / h
    return out


def keypoints_to_px(kps: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    return np.stack([kps[:, 0] * w, kps[:, 1] * h], axis=1)


def sample_hand(rng, size: int = 64, style=None, gesture=None,
                gesture_weights=None) -> HandSample:
    """One hand crop: posed parametric hand over a style background."""
    if style is None:
        style = int(rng.integers(0, NUM_STYLES))
    skin_idx, bg_idx = style_parts(style)
    if gesture is None:
        gesture = _pick_gesture(rng, gesture_weights or DEFAULT_GESTURE_WEIGHTS)
    side = int(rng.integers(0, 2))
    flex = _draw_flex(rng, gesture)
    for attempt in range(40):
        pose = HandPose(
            center=np.array([size * rng.uniform(0.40, 0.60),
                             size * rng.uniform(0.68, 0.82)]),
            scale=size * rng.uniform(0.52, 0.70) * 0.96 ** attempt,
            rotation=rng.uniform(-0.7, 0.7),
            flex=flex,
            side=side,
        )
        kps_px = hand_keypoints_px(pose)
        if _keypoints_in_frame(kps_px, (size, size), margin=3.0):
            break
    else:
        pose = HandPose(center=np.array([size * 0.5, size * 0.72]),
                        scale=size * 0.45, rotation=0.0, flex=flex, side=side)
        kps_px = hand_keypoints_px(pose)
    image = render_background((size, size), bg_idx, False, rng)
    mask = _paint_hand(image, pose, SKIN_TONES[skin_idx])
    keypoints = np.zeros((2, 21, 3))
    keypoints[pose.side] = normalized_keypoints(kps_px, (size, size))
    return HandSample(image=image, keypoints=keypoints, mask=mask[None],
                      style=style, pose_params=[(pose.side, pose)],
                      gesture=gesture)


def canonical_hand_sample(size: int = 64, style: int = 0) -> HandSample:
    """Zero-flexion open palm at a fixed placement (golden reference)."""
    pose = HandPose(center=np.array([size * 0.5, size * 0.78]),
                    scale=size * 0.62, rotation=0.0,
                    flex=np.zeros((5, 3)), side=1)
    skin_idx, bg_idx = style_parts(style)
    image = render_background((size, size), bg_idx, False,
                              np.random.default_rng(0))
    mask = _paint_hand(image, pose, SKIN_TONES[skin_idx])
    keypoints = np.zeros((2, 21, 3))
    keypoints[1] = normalized_keypoints(hand_keypoints_px(pose), (size, size))
    return HandSample(image=image, keypoints=keypoints, mask=mask[None],
                      style=style, pose_params=[(1, pose)], gesture="open")


def sample_body(rng, size=(96, 64), style=None, clutter=False,
                gesture_weights=None) -> BodySample:
    """Stick-figure body with two attached parametric hands."""
    h, w = size
    if style is None:
        style = int(rng.integers(0, NUM_STYLES))
    skin_idx, bg_idx = style_parts(style)
    weights = gesture_weights or DEFAULT_GESTURE_WEIGHTS

    background = render_background((h, w), bg_idx, clutter, rng)
    scene = background.copy()
    figure = np.zeros((h, w), dtype=np.float32)

    head = np.array([w * rng.uniform(0.42, 0.58), h * rng.uniform(0.12, 0.20)])
    pelvis = np.array([w * rng.uniform(0.44, 0.56), h * rng.uniform(0.72, 0.84)])
    neck = pelvis + 0.78 * (head - pelvis)
    _draw_capsule(scene, pelvis, neck, 0.11 * w, CLOTH_COLOR, figure)
    _draw_capsule(scene, head, head, 0.085 * w, HAIR_COLOR, figure)

    hand_masks = np.zeros((2, h, w), dtype=np.float32)
    hand_poses = []
    gestures = []
    hands_kps = np.zeros((2, 21, 3))
    for slot in range(2):  # slot 0 = viewer-left hand, modeled as left side
        gesture = _pick_gesture(rng, weights)
        flex = _draw_flex(rng, gesture)
        x_lo, x_hi = (0.14, 0.38) if slot == 0 else (0.62, 0.86)
        for attempt in range(40):
            pose = HandPose(
                center=np.array([w * rng.uniform(x_lo, x_hi),
                                 h * rng.uniform(0.42, 0.62)]),
                scale=min(h, w) * rng.uniform(0.30, 0.42) * 0.96 ** attempt,
                rotation=rng.uniform(-0.6, 0.6),
                flex=flex,
                side=slot,
            )
            kps_px = hand_keypoints_px(pose)
            if _keypoints_in_frame(kps_px, (h, w), margin=2.0):
                break
        else:
            pose = HandPose(
                center=np.array([w * (0.25 if slot == 0 else 0.75), h * 0.52]),
                scale=min(h, w) * 0.26, rotation=0.0, flex=flex, side=slot)
            kps_px = hand_keypoints_px(pose)
        # arm from the neck to the wrist, under the hand
        _draw_capsule(scene, neck, pose.center, 0.035 * w, CLOTH_COLOR, figure)
        hand_poses.append(pose)
        gestures.append(gesture)
        hands_kps[slot] = normalized_keypoints(kps_px, (h, w))

    for slot, pose in enumerate(hand_poses):
        hand_masks[slot] = _paint_hand(scene, pose, SKIN_TONES[skin_idx])
        figure = np.maximum(figure, hand_masks[slot])

    sk_kps = np.zeros((44, 3))
    sk_kps[0] = (head[0] / w, head[1] / h, 1.0)
    sk_kps[1] = (pelvis[0] / w, pelvis[1] / h, 1.0)
    sk_kps[2:23] = hands_kps[0]
    sk_kps[23:44] = hands_kps[1]
    skeleton = Skeleton(sk_kps, "stick-44")
    return BodySample(image=scene, skeleton=skeleton, hand_masks=hand_masks,
                      figure_mask=figure[None], style=style,
                      gestures=tuple(gestures), hand_poses=hand_poses,
                      background=background)


@dataclass
class CropTransform:
    """body px -> crop px: p_crop = (p_body - origin) * factor."""

    origin: np.ndarray
    factor: float

    def apply(self, pts_px: np.ndarray) -> np.ndarray:
        return (pts_px - self.origin) * self.factor

    def invert(self, pts_px: np.ndarray) -> np.ndarray:
        return pts_px / self.factor + self.origin


def _hand_box(mask: np.ndarray, pad_frac=0.16):
    ys, xs = np.nonzero(mask > 0)
    if len(ys) == 0:
        return None
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    pad = pad_frac * max(y1 - y0, x1 - x0)
    return np.array([x0 - pad, y0 - pad, x1 + pad, y1 + pad])


def _boxes_intersect(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _square_box(box, shape):
    h, w = shape
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    side = max(box[2] - box[0], box[3] - box[1])
    side = min(side, min(h, w))
    half = side / 2
    cx = np.clip(cx, half, w - half)
    cy = np.clip(cy, half, h - half)
    return np.array([cx - half, cy - half, cx + half, cy + half])


def crop_hands(sample: BodySample, rng, out_size: int = 64) -> tuple:
    """Square hand crop: both hands when their boxes intersect, otherwise
    one chosen at random. Returns (HandSample, CropTransform)."""
    h, w = sample.image.shape[1:]
    boxes = [_hand_box(m) for m in sample.hand_masks]
    present = [i for i, b in enumerate(boxes) if b is not None]
    if not present:
        raise ValueError("no visible hands to crop")
    if len(present) == 2 and _boxes_intersect(boxes[0], boxes[1]):
        chosen = [0, 1]
        union = np.array([min(boxes[0][0], boxes[1][0]),
                          min(boxes[0][1], boxes[1][1]),
                          max(boxes[0][2], boxes[1][2]),
                          max(boxes[0][3], boxes[1][3])])
        box = _square_box(union, (h, w))
    else:
        pick = int(rng.integers(0, len(present)))
        chosen = [present[pick]]
        box = _square_box(boxes[chosen[0]], (h, w))

    origin = np.array([box[0], box[1]])
    factor = out_size / (box[2] - box[0])
    tf = CropTransform(origin=origin, factor=factor)

    # background from the hand-free scene, hands re-rendered exactly
    sub = _crop_resample(sample.background, box, out_size)
    skin_idx, _ = style_parts(sample.style)
    mask = np.zeros((out_size, out_size), dtype=np.float32)
    keypoints = np.zeros((2, 21, 3))
    poses = []
    gesture = sample.gestures[chosen[0]]
    for slot in chosen:
        pose = sample.hand_poses[slot].copy()
        pose.center = tf.apply(pose.center)
        pose.scale = pose.scale * factor
        m = _paint_hand(sub, pose, SKIN_TONES[skin_idx])
        mask = np.maximum(mask, m)
        kps_px = hand_keypoints_px(pose)
        keypoints[slot] = normalized_keypoints(kps_px, (out_size, out_size))
        poses.append((slot, pose))
    crop = HandSample(image=sub, keypoints=keypoints, mask=mask[None],
                      style=sample.style, pose_params=poses, gesture=gesture)
    return crop, tf


def _crop_resample(img: np.ndarray, box, out_size: int) -> np.ndarray:
    """Bilinear resample of an arbitrary (possibly fractional) box."""
    import torch
    import torch.nn.functional as F
    c, h, w = img.shape
    ys = (np.arange(out_size) + 0.5) / out_size * (box[3] - box[1]) + box[1]
    xs = (np.arange(out_size) + 0.5) / out_size * (box[2] - box[0]) + box[0]
    # grid_sample expects [-1, 1] coords over the input extent
    gy = (ys / h) * 2 - 1
    gx = (xs / w) * 2 - 1
    grid_y, grid_x = np.meshgrid(gy, gx, indexing="ij")
    grid = torch.from_numpy(
        np.stack([grid_x, grid_y], axis=-1).astype(np.float32))[None]
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    out = F.grid_sample(t, grid, mode="bilinear", padding_mode="border",
                        align_corners=False)
    return out[0].numpy()


# ---------------------------------------------------------------------------
# image -> pose fitting (the evaluation-side keypoint "detector")

_SKIN_SHADE_RANGE = (0.74, 1.01)
_SKIN_DIST = 0.085


def skin_mask(image: np.ndarray) -> np.ndarray:
    """Pixels whose color lies near any catalog skin tone ray (shading-
    invariant match)."""
    h, w = image.shape[1:]
    flat = image.reshape(3, -1).T
    best = np.full(flat.shape[0], np.inf)
    for tone in SKIN_TONES:
        denom = float(tone @ tone)
        f = np.clip((flat @ tone) / denom, *_SKIN_SHADE_RANGE)
        d = np.linalg.norm(flat - f[:, None] * tone[None, :], axis=1)
        np.minimum(best, d, out=best)
    return (best < _SKIN_DIST).reshape(h, w).astype(np.float32)


_canon_area_cache = {}


def _canonical_area_unit() -> float:
    """Silhouette area of the mildly-open hand at unit scale."""
    if "area" not in _canon_area_cache:
        res = 512
        pose = HandPose(center=np.array([res / 2, res * 0.75]), scale=160.0,
                        rotation=0.0, flex=np.full((5, 3), 0.3), side=1)
        area = render_hand_mask(pose, (res, res)).sum()
        _canon_area_cache["area"] = area / 160.0 ** 2
    return _canon_area_cache["area"]


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = float(np.logical_and(a > 0, b > 0).sum())
    union = float(np.logical_or(a > 0, b > 0).sum())
    return inter / union if union else 0.0


class _WindowFrame:
    """Template-frame coordinates of a pixel window under fixed global
    pose parameters; lets flexion candidates reuse the transform."""

    def __init__(self, pose: HandPose, window):
        y0, y1, x0, x1 = window
        ys = (np.arange(y0, y1) + 0.5)[:, None]
        xs = (np.arange(x0, x1) + 0.5)[None, :]
        mirror = -1.0 if pose.side == 0 else 1.0
        Rinv = _rot(-pose.rotation)
        rel_x = (xs - pose.center[0]) / pose.scale
        rel_y = (ys - pose.center[1]) / pose.scale
        self.tx = (Rinv[0, 0] * rel_x + Rinv[0, 1] * rel_y) * mirror
        self.ty = Rinv[1, 0] * rel_x + Rinv[1, 1] * rel_y

    def palm(self) -> np.ndarray:
        ex = (self.tx - PALM_CENTER[0]) / PALM_AXES[0]
        ey = (self.ty - PALM_CENTER[1]) / PALM_AXES[1]
        return ex * ex + ey * ey <= 1.0

    def finger(self, fi: int, flex_row) -> np.ndarray:
        name = FINGER_ORDER[fi]
        spec = FINGERS[name]
        direction = spec["direction"]
        p = spec["base"].astype(np.float64)
        inside = np.zeros(self.tx.shape, dtype=bool)
        for j in range(3):
            direction = direction + spec["sign"] * flex_row[j]
            q = p + spec["lengths"][j] * np.array([math.cos(direction),
                                                   math.sin(direction)])
            d = _segment_distance(self.tx, self.ty, p, q)
            inside |= d <= spec["radius"][j]
            p = q
        return inside

    def full(self, flex: np.ndarray) -> np.ndarray:
        inside = self.palm()
        for fi in range(5):
            inside |= self.finger(fi, flex[fi])
        return inside


def fit_hand_to_blob(blob: np.ndarray, side: int,
                     sweeps: int = 3) -> tuple[HandPose, float]:
    """Coordinate-descent silhouette fit of the parametric hand to a
    binary blob. Returns (pose, IoU score)."""
    ys, xs = np.nonzero(blob > 0)
    if len(ys) < 8:
        raise ValueError("blob too small to fit")
    h, w = blob.shape
    area = float(len(ys))
    cy, cx = ys.mean() + 0.5, xs.mean() + 0.5
    scale = math.sqrt(area / _canonical_area_unit())
    pad = int(scale * 1.25 + 3)
    window = (max(0, int(cy - pad)), min(h, int(cy + pad)),
              max(0, int(cx - pad)), min(w, int(cx + pad)))
    target = blob[window[0]:window[1], window[2]:window[3]] > 0

    def score_of(pose):
        frame = _WindowFrame(pose, window)
        return _mask_iou(frame.full(pose.flex), target), frame

    # orientation from second moments; the template's long axis is y
    yc, xc = ys - cy + 0.5, xs - cx + 0.5
    cov_xx = float((xc * xc).mean())
    cov_yy = float((yc * yc).mean())
    cov_xy = float((xc * yc).mean())
    phi = 0.5 * math.atan2(2 * cov_xy, cov_xx - cov_yy)

    # template centroid sits below the fingers
    centroid_offset = np.array([0.02, -0.40])
    mirror = np.array([-1.0, 1.0]) if side == 0 else np.array([1.0, 1.0])
    pose, score = None, -1.0
    for theta in (phi + math.pi / 2, phi - math.pi / 2):
        off = _rot(theta) @ (centroid_offset * mirror)
        cand = HandPose(center=np.array([cx, cy]) - scale * off,
                        scale=scale, rotation=theta,
                        flex=np.full((5, 3), 0.35), side=side)
        sc, _ = score_of(cand)
        if sc > score:
            pose, score = cand, sc
    pose = pose.copy()

    a1_grid = np.linspace(0.0, 1.4, 6)
    a2_grid = np.linspace(0.0, 1.6, 5)
    step = max(1.0, 0.06 * scale)
    for sweep in range(sweeps):
        shrink = 0.6 ** sweep
        for key, deltas in (("cx", (-2 * step, -step, step, 2 * step)),
                            ("cy", (-2 * step, -step, step, 2 * step)),
                            ("s", (0.90, 0.96, 1.04, 1.10)),
                            ("r", (-0.16, -0.06, 0.06, 0.16))):
            for d in deltas:
                cand = pose.copy()
                if key == "cx":
                    cand.center = cand.center + np.array([d * shrink, 0.0])
                elif key == "cy":
                    cand.center = cand.center + np.array([0.0, d * shrink])
                elif key == "s":
                    cand.scale *= 1.0 + (d - 1.0) * shrink
                else:
                    cand.rotation += d * shrink
                sc, _ = score_of(cand)
                if sc > score:
                    pose, score = cand, sc
        # flexion search on the frozen global transform
        frame = _WindowFrame(pose, window)
        others = frame.palm()
        finger_masks = [frame.finger(fi, pose.flex[fi]) for fi in range(5)]
        for fi, name in enumerate(FINGER_ORDER):
            hi = FLEX_MAX[name]
            base = others.copy()
            for fj in range(5):
                if fj != fi:
                    base |= finger_masks[fj]
            best_row, best_sc = tuple(pose.flex[fi]), _mask_iou(
                base | finger_masks[fi], target)
            for a1 in a1_grid:
                for a2 in a2_grid:
                    row = (min(a1, hi[0]), min(a2, hi[1]),
                           min(0.65 * a2, hi[2]))
                    sc = _mask_iou(base | frame.finger(fi, row), target)
                    if sc > best_sc:
                        best_row, best_sc = row, sc
            pose.flex[fi] = best_row
            finger_masks[fi] = frame.finger(fi, best_row)
            score = best_sc
    return pose, score


def _largest_components(mask: np.ndarray, k: int, min_area: int):
    labels, n = ndimage.label(mask > 0)
    if n == 0:
        return []
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, n + 1))
    order = np.argsort(sizes)[::-1]
    out = []
    for idx in order[:k]:
        if sizes[idx] < min_area:
            continue
        out.append((labels == idx + 1).astype(np.float32))
    return out


def estimate_hand_keypoints(image: np.ndarray) -> np.ndarray:
    """(2, 21, 3) keypoints recovered from an image by silhouette fitting;
    undetected hands get visibility 0."""
    h, w = image.shape[1:]
    keypoints = np.zeros((2, 21, 3))
    blobs = _largest_components(skin_mask(image), 2, min_area=40)
    if not blobs:
        return keypoints
    # assign blobs to slots by centroid x (slot 0 = viewer left)
    entries = []
    for blob in blobs:
        ys, xs = np.nonzero(blob)
        entries.append((xs.mean(), blob))
    entries.sort(key=lambda e: e[0])
    if len(entries) == 1:
        # single hand of unknown side: fit both, keep the better
        blob = entries[0][1]
        fits = []
        for side in (0, 1):
            try:
                fits.append((side,) + fit_hand_to_blob(blob, side=side))
            except ValueError:
                pass
        if not fits:
            return keypoints
        side, pose, score = max(fits, key=lambda f: f[2])
        if score >= 0.2:
            keypoints[side] = normalized_keypoints(
                hand_keypoints_px(pose), (h, w))
        return keypoints
    for slot, (_x, blob) in enumerate(entries):
        try:
            pose, score = fit_hand_to_blob(blob, side=slot)
        except ValueError:
            continue
        if score < 0.2:
            continue
        kps_px = hand_keypoints_px(pose)
        keypoints[slot] = normalized_keypoints(kps_px, (h, w))
    return keypoints


def estimate_body_skeleton(image: np.ndarray) -> Skeleton:
    """stick-44 skeleton recovered from a body image: hair/cloth color
    regions locate head and pelvis, silhouette fits locate the hands."""
    h, w = image.shape[1:]
    kps = np.zeros((44, 3))
    flat = image.reshape(3, -1).T

    hair = (np.linalg.norm(flat - HAIR_COLOR, axis=1) < 0.12).reshape(h, w)
    comps = _largest_components(hair.astype(np.float32), 1, min_area=12)
    if comps:
        ys, xs = np.nonzero(comps[0])
        kps[0] = ((xs.mean() + 0.5) / w, (ys.mean() + 0.5) / h, 1.0)

    cloth = (np.linalg.norm(flat - CLOTH_COLOR, axis=1) < 0.14).reshape(h, w)
    comps = _largest_components(cloth.astype(np.float32), 1, min_area=30)
    if comps:
        ys, xs = np.nonzero(comps[0])
        cut = np.quantile(ys, 0.9)
        sel = ys >= cut
        kps[1] = ((xs[sel].mean() + 0.5) / w, (ys[sel].mean() + 0.5) / h, 1.0)

    hands = estimate_hand_keypoints(image)
    kps[2:23] = hands[0]
    kps[23:44] = hands[1]
    return Skeleton(kps, "stick-44")


# ---------------------------------------------------------------------------
# dataset persistence

def write_hand_dataset(root, samples, splits=None):
    root = Path(root)
    for sub in ("images", "masks", "keypoints"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"{i:05d}"
        save_image(root / "images" / f"{name}.png", s.image)
        save_mask(root / "masks" / f"{name}.png", s.mask)
        sk = np.zeros((42, 3))
        sk[:21] = s.keypoints[0]
        sk[21:] = s.keypoints[1]
        (root / "keypoints" / f"{name}.json").write_text(json.dumps(
            Skeleton(sk, "hands-42").to_json()))
        entries.append({"id": name, "style": int(s.style),
                        "gesture": s.gesture,
                        "split": splits[i] if splits else "train"})
    manifest = {"type": "hands", "styles": NUM_STYLES, "entries": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_hand_dataset(root):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("type") != "hands":
        raise ValueError(f"{root} is not a hand dataset")
    samples = []
    for e in manifest["entries"]:
        name = e["id"]
        image = load_image(root / "images" / f"{name}.png")
        mask = load_mask(root / "masks" / f"{name}.png")
        sk = Skeleton.from_json(json.loads(
            (root / "keypoints" / f"{name}.json").read_text()))
        keypoints = np.zeros((2, 21, 3))
        keypoints[0] = sk.keypoints[:21]
        keypoints[1] = sk.keypoints[21:]
        samples.append((HandSample(image=image, keypoints=keypoints,
                                   mask=mask, style=e["style"],
                                   pose_params=[], gesture=e["gesture"]),
                        e.get("split", "train")))
    return samples


def write_body_dataset(root, samples, splits=None):
    root = Path(root)
    for sub in ("images", "masks", "figure_masks", "keypoints", "backgrounds"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"{i:05d}"
        save_image(root / "images" / f"{name}.png", s.image)
        save_image(root / "backgrounds" / f"{name}.png", s.background)
        save_mask(root / "masks" / f"{name}_l.png", s.hand_masks[0][None])
        save_mask(root / "masks" / f"{name}_r.png", s.hand_masks[1][None])
        save_mask(root / "figure_masks" / f"{name}.png", s.figure_mask)
        (root / "keypoints" / f"{name}.json").write_text(
            json.dumps(s.skeleton.to_json()))
        entries.append({"id": name, "style": int(s.style),
                        "gestures": list(s.gestures),
                        "split": splits[i] if splits else "train"})
    manifest = {"type": "bodies", "styles": NUM_STYLES, "entries": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_body_dataset(root):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("type") != "bodies":
        raise ValueError(f"{root} is not a body dataset")
    samples = []
    for e in manifest["entries"]:
        name = e["id"]
        image = load_image(root / "images" / f"{name}.png")
        background = load_image(root / "backgrounds" / f"{name}.png")
        left = load_mask(root / "masks" / f"{name}_l.png")
        right = load_mask(root / "masks" / f"{name}_r.png")
        figure = load_mask(root / "figure_masks" / f"{name}.png")
        sk = Skeleton.from_json(json.loads(
            (root / "keypoints" / f"{name}.json").read_text()))
        hand_masks = np.stack([left[0], right[0]])
        samples.append((BodySample(image=image, skeleton=sk,
                                   hand_masks=hand_masks, figure_mask=figure,
                                   style=e["style"],
                                   gestures=tuple(e["gestures"]),
                                   hand_poses=[], background=background),
                        e.get("split", "train")))
    return samples

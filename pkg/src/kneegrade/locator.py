"""Stage-1 knee localization on a bilateral radiograph.

A convolutional trunk feeds two fixed output slots, one per image half.
Each slot regresses a normalized (cx, cy, w, h) box through sigmoids, a
16x16 coarse mask over that box, and two side logits (left, right).  Every
input holds exactly two knees, so no proposal stage is needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .ingest import GrayImage, minmax_normalize, resize_area
from .layers import Network
from .synthgen import CANVAS_HEIGHT, CANVAS_WIDTH, MASK_GRID, SyntheticSample, derive_rng, mask_grid

log = logging.getLogger(__name__)

INPUT_HEIGHT = CANVAS_HEIGHT // 4
INPUT_WIDTH = CANVAS_WIDTH // 4
SIDES = ("left", "right")
SLOT_WIDTH = 4 + MASK_GRID * MASK_GRID + 2
MIN_BOX = 1e-3

ARCHITECTURE = (
    L.conv2d(8, 3), L.relu(),
    L.conv2d(16, 3, stride=2), L.relu(),
    L.conv2d(16, 3, stride=2), L.relu(),
    L.flatten(),
    L.dense(128), L.relu(),
    L.dense(2 * SLOT_WIDTH),
)


class LocatorError(ValueError):
    pass


@dataclass(frozen=True)
class LocatorConfig:
    epochs: int = 30
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    box_weight: float = 1.0    # lambda
    mask_weight: float = 1.0   # mu
    lr_decay: float = 0.93
    clip_norm: Optional[float] = 1.0


@dataclass
class Detection:
    side: str
    box: tuple[float, float, float, float]
    mask: np.ndarray = field(repr=False)   # (MASK_GRID, MASK_GRID) bool over the box
    score: float

    def to_json(self, width: int, height: int) -> dict:
        return {
            "side": self.side,
            "box": [float(v) for v in self.box],
            "pixel_box": list(box_to_pixels(self.box, width, height)),
            "score": float(self.score),
            "mask": self.mask.astype(int).tolist(),
            "predicted": True,
        }


def build_locator(seed: int = 0) -> Network:
    return Network((1, INPUT_HEIGHT, INPUT_WIDTH), ARCHITECTURE, seed, tags={"model": "locator"}, init="he")


def _check_net(net: Network, allow_untrained: bool) -> None:
    if net.tags.get("model") != "locator" or net.output_shape != (2 * SLOT_WIDTH,) \
            or net.input_shape != (1, INPUT_HEIGHT, INPUT_WIDTH):
        raise LocatorError("network is not a compatible knee locator")
    if not allow_untrained and not net.tags.get("trained"):
        raise LocatorError("locator network has not been trained")


def locator_input(img: GrayImage) -> np.ndarray:
    """Min-max normalize and area-resize to the trunk input, scaled to [0, 1]."""
    px = minmax_normalize(img).pixels
    return resize_area(px, INPUT_HEIGHT, INPUT_WIDTH)[None] / 255.0


def box_to_pixels(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Normalized (cx, cy, w, h) -> half-open pixel rectangle (x0, y0, x1, y1), at least 1x1."""
    cx, cy, w, h = (float(v) for v in box)

    def span(center, extent, size):
        lo = int(np.floor((center - extent / 2) * size + 0.5))
        hi = int(np.floor((center + extent / 2) * size + 0.5))
        lo = min(max(lo, 0), size - 1)
        hi = min(max(hi, lo + 1), size)
        return lo, hi

    x0, x1 = span(cx, w, width)
    y0, y1 = span(cy, h, height)
    return x0, y0, x1, y1


def _clip_box(raw) -> tuple[float, float, float, float]:
    cx, cy, w, h = (float(v) for v in raw)
    x0, x1 = max(0.0, cx - w / 2), min(1.0, cx + w / 2)
    y0, y1 = max(0.0, cy - h / 2), min(1.0, cy + h / 2)
    if x1 - x0 < MIN_BOX:
        x0 = min(max(0.0, cx - MIN_BOX / 2), 1.0 - MIN_BOX)
        x1 = x0 + MIN_BOX
    if y1 - y0 < MIN_BOX:
        y0 = min(max(0.0, cy - MIN_BOX / 2), 1.0 - MIN_BOX)
        y1 = y0 + MIN_BOX
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _decode(out: np.ndarray) -> tuple[Detection, Detection]:
    slots = out.reshape(2, SLOT_WIDTH)
    boxes = [_clip_box(T._stable_sigmoid(s[:4])) for s in slots]
    masks = [(s[4:4 + MASK_GRID * MASK_GRID] > 0).reshape(MASK_GRID, MASK_GRID) for s in slots]
    side_p = [T.softmax(s[None, -2:])[0] for s in slots]   # [p(left), p(right)]
    # joint assignment: exactly one left and one right
    first_left = side_p[0][0] * side_p[1][1]
    first_right = side_p[0][1] * side_p[1][0]
    total = first_left + first_right
    if first_left >= first_right:
        sides, score = ("left", "right"), first_left / total if total > 0 else 0.5
    else:
        sides, score = ("right", "left"), first_right / total if total > 0 else 0.5
    dets = {sides[k]: Detection(sides[k], boxes[k], masks[k], float(score)) for k in range(2)}
    return dets["left"], dets["right"]


def locate_batch(net: Network, images: Sequence[GrayImage], allow_untrained: bool = False
                 ) -> list[tuple[Detection, Detection]]:
    _check_net(net, allow_untrained)
    if not images:
        return []
    x = np.stack([locator_input(img) for img in images])
    out = np.concatenate([L.forward(net, x[i:i + 128]).data for i in range(0, len(x), 128)])
    return [_decode(o) for o in out]


def locate(net: Network, img: GrayImage, allow_untrained: bool = False) -> tuple[Detection, Detection]:
    """Return (left, right) detections for one bilateral radiograph."""
    return locate_batch(net, [img], allow_untrained)[0]


def detection_mask(det: Detection, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the coarse mask into a full-image raster."""
    x0, y0, x1, y1 = box_to_pixels(det.box, width, height)
    rows = (np.arange(y1 - y0) * MASK_GRID // (y1 - y0))
    cols = (np.arange(x1 - x0) * MASK_GRID // (x1 - x0))
    full = np.zeros((height, width), dtype=bool)
    full[y0:y1, x0:x1] = det.mask[rows][:, cols]
    return full


# ------------------------------------------------------------------ training

def _targets(samples: Sequence[SyntheticSample]):
    """Per-slot targets, slots ordered by box centre x (image-left first)."""
    boxes = np.zeros((len(samples), 2, 4))
    masks = np.zeros((len(samples), 2, MASK_GRID * MASK_GRID))
    sides = np.zeros((len(samples), 2), dtype=int)
    for i, s in enumerate(samples):
        knees = sorted(s.knees, key=lambda k: k.box[0])
        for slot, ann in enumerate(knees):
            boxes[i, slot] = ann.box
            pb = ann.pixel_box(s.image.width, s.image.height)
            masks[i, slot] = mask_grid(ann.mask, pb).ravel()
            sides[i, slot] = SIDES.index(ann.side)
    return boxes, masks, sides


def locator_loss(out: T.Tensor, boxes: np.ndarray, masks: np.ndarray, sides: np.ndarray,
                 box_weight: float = 1.0, mask_weight: float = 1.0) -> T.Tensor:
    """side cross-entropy + box_weight * box squared error + mask_weight * mask BCE."""
    total = None
    for slot in range(2):
        base = slot * SLOT_WIDTH
        side_logits = T.take_columns(out, base + SLOT_WIDTH - 2, base + SLOT_WIDTH)
        term = T.cross_entropy_loss(side_logits, sides[:, slot], num_classes=2)
        if box_weight:
            box = T.sigmoid(T.take_columns(out, base, base + 4))
            term = term + box_weight * T.mse_loss(box, boxes[:, slot])
        if mask_weight:
            grid = T.take_columns(out, base + 4, base + 4 + MASK_GRID * MASK_GRID)
            term = term + mask_weight * T.bce_with_logits(grid, masks[:, slot])
        total = term if total is None else total + term
    return total


@dataclass
class LocatorHistory:
    loss: list = field(default_factory=list)   # loss[0] is before any update


def train_locator(samples: Sequence[SyntheticSample], config: LocatorConfig = LocatorConfig()
                  ) -> tuple[Network, LocatorHistory]:
    if not samples:
        raise LocatorError("cannot train a locator on an empty dataset")
    net = build_locator(config.seed)
    x = np.stack([locator_input(s.image) for s in samples])
    boxes, masks, sides = _targets(samples)

    def full_loss() -> float:
        vals = [locator_loss(L.forward(net, x[i:i + 256]), boxes[i:i + 256], masks[i:i + 256],
                             sides[i:i + 256], config.box_weight, config.mask_weight).item()
                * len(x[i:i + 256]) for i in range(0, len(x), 256)]
        return sum(vals) / len(x)

    history = LocatorHistory([full_loss()])
    opt = L.SGD(net.parameters(), config.lr, config.momentum, config.clip_norm)
    for epoch in range(1, config.epochs + 1):
        order = derive_rng(config.seed, "locator", "shuffle", epoch).permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            net.zero_grad()
            loss = locator_loss(L.forward(net, x[idx]), boxes[idx], masks[idx], sides[idx],
                                config.box_weight, config.mask_weight)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        opt.lr *= config.lr_decay
        history.loss.append(total / len(x))
        log.info("locator epoch %d/%d loss %.4f", epoch, config.epochs, history.loss[-1])
    net.tags["trained"] = True
    return net, history

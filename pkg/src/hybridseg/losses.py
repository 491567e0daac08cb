"""Training losses: region overlap (dice, jaccard-with-box), signed-distance
boundary loss, and their weighted composite with a per-epoch decay schedule.

All losses return scalar Tensors and are differentiable in the prediction S.
Level-set maps are plain arrays computed once per ground-truth mask; callers
should cache them across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LossSchedule:
    """Component weights; the boundary weight decays linearly per epoch to a
    floor while the region weights stay fixed."""

    lambda_d: float = 1.0
    lambda_j: float = 1.0
    lambda_b_initial: float = 1.0
    lambda_b_decay: float = 0.01
    lambda_b_floor: float = 0.01

    def lambda_b(self, epoch):
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        # rounding removes accumulated float drift so hundredth-step
        # schedules hit their nominal values exactly
        decayed = round(self.lambda_b_initial - self.lambda_b_decay * epoch, 12)
        return max(decayed, self.lambda_b_floor)


def _check_prob_mask(s, g):
    if s.shape != g.shape:
        raise ShapeError(f"prediction {s.shape} vs mask {g.shape}")
    if s.data.min() < 0.0 or s.data.max() > 1.0:
        raise ValueError("predictions must lie in [0, 1]")
    if not np.isin(g.data, (0.0, 1.0)).all():
        raise ValueError("ground truth must be binary")


def dice_loss(s, g, class_weights=None, xi=1e-6):
    """Overlap loss over one (H, W) plane or a (C, H, W) per-class stack.

    Classes with an empty prediction and empty mask make the ratio undefined
    and surface as a NonFiniteError.
    """
    _check_prob_mask(s, g)
    if s.ndim == 2:
        s = T.reshape(s, (1,) + s.shape)
        g = T.reshape(g, (1,) + g.shape)
    c = s.shape[0]
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, float)
    if w.shape != (c,):
        raise ShapeError(f"need {c} class weights, got {w.shape}")
    inter = T.tsum(s * g, axes=[1, 2])
    denom = T.tsum(s * s, axes=[1, 2]) + T.tsum(g * g, axes=[1, 2])
    per_class = (2.0 * Tensor(w)) * inter / denom
    return 1.0 - T.tsum(per_class) + xi


def _union_bbox(s, g):
    """Tight box covering the union of the mask and the prediction >= 0.5."""
    union = (g >= 0.5) | (s >= 0.5)
    if not union.any():
        raise ValueError("empty prediction and mask: bounding box undefined")
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def jaccard_loss(s, g, xi=1e-6):
    """Soft IoU loss with a bounding-box tightness term.

    The box term subtracts the fraction of the union's bounding box not
    covered by the soft union; as written it rewards masks that fill their
    box and can push the loss below xi for compact shapes in a loose box.
    """
    if s.ndim == 3 and s.shape[0] == 1:
        s = T.reshape(s, s.shape[1:])
        g = T.reshape(g, g.shape[1:])
    _check_prob_mask(s, g)
    if s.ndim != 2:
        raise ShapeError("jaccard_loss operates on a single 2-D mask pair")
    inter = T.tsum(s * g)
    union_mass = T.tsum(s) + T.tsum(g) - inter
    iou = inter / union_mass
    r0, r1, c0, c1 = _union_bbox(s.data, g.data)
    soft_union = s + g - s * g
    box = T.narrow(T.narrow(soft_union, 0, r0, r1 - r0), 1, c0, c1 - c0)
    box_area = float((r1 - r0) * (c1 - c0))
    box_term = (box_area - T.tsum(box)) / box_area
    return 1.0 - iou - box_term + xi


@dataclass
class LevelSetMap:
    """Per-pixel signed Euclidean distance to the mask's boundary pixels
    (foreground pixels with a background 4-neighbor): negative inside the
    mask, positive outside, zero exactly on the boundary set."""

    values: np.ndarray


def boundary_pixels(g):
    """Foreground pixels of a binary mask with at least one background
    4-neighbor; image-edge neighbors do not count as background."""
    fg = g.astype(bool)
    bg_neighbor = np.zeros_like(fg)
    bg_neighbor[1:, :] |= ~fg[:-1, :]
    bg_neighbor[:-1, :] |= ~fg[1:, :]
    bg_neighbor[:, 1:] |= ~fg[:, :-1]
    bg_neighbor[:, :-1] |= ~fg[:, 1:]
    return fg & bg_neighbor


def level_set(g):
    """Exact signed Euclidean distance transform of a binary mask.

    Distances are measured to the boundary pixel set; the mask must contain
    both foreground and background.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 2:
        raise ShapeError("level_set expects a 2-D mask")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("level_set mask must be binary")
    fg_count = int(g.sum())
    if fg_count == 0 or fg_count == g.size:
        raise ValueError("level_set mask must contain foreground and background")

    boundary = np.argwhere(boundary_pixels(g))
    h, w = g.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([ys.reshape(-1), xs.reshape(-1)], axis=1)

    dist = np.empty(pix.shape[0])
    chunk = 4096
    for lo in range(0, pix.shape[0], chunk):
        block = pix[lo : lo + chunk]
        d2 = (
            (block[:, None, 0] - boundary[None, :, 0]) ** 2
            + (block[:, None, 1] - boundary[None, :, 1]) ** 2
        )
        dist[lo : lo + block.shape[0]] = np.sqrt(d2.min(axis=1))
    dist = dist.reshape(h, w)
    return LevelSetMap(np.where(g > 0.5, -dist, dist))


def boundary_loss(s, levelset):
    """Mean over pixels of signed distance times predicted probability.

    Negative inside the mask: moving predicted mass inward strictly lowers
    the loss, scaled by how far the mass sits from the boundary.
    """
    values = levelset.values
    if s.shape != values.shape:
        raise ShapeError(f"prediction {s.shape} vs level-set {values.shape}")
    return T.tmean(Tensor(values) * s)


_COMPONENTS = ("dice", "jaccard", "boundary")


def composite_loss(s, g, schedule, epoch, components=_COMPONENTS,
                   level_set_map=None, class_weights=None, xi=1e-6):
    """Weighted sum of the selected loss components at the given epoch.

    Returns (total, breakdown) where breakdown holds the unweighted value of
    each computed component plus the boundary weight in effect. For
    multi-class inputs (C, H, W with one-hot g), jaccard and boundary are
    averaged over the non-background classes.
    """
    unknown = set(components) - set(_COMPONENTS)
    if unknown or not components:
        raise ValueError(f"loss components must be a non-empty subset "
                         f"of {_COMPONENTS}, got {components!r}")
    multiclass = s.ndim == 3 and s.shape[0] > 1
    breakdown = {"lambda_b": schedule.lambda_b(epoch)}
    total = None

    def acc(term, weight):
        nonlocal total
        weighted = term * weight
        total = weighted if total is None else total + weighted

    if "dice" in components:
        zd = dice_loss(s, g, class_weights=class_weights, xi=xi)
        breakdown["dice"] = zd.item()
        acc(zd, schedule.lambda_d)
    if "jaccard" in components:
        if multiclass:
            planes = [
                jaccard_loss(_plane(s, k), _plane(g, k), xi=xi)
                for k in range(1, s.shape[0])
            ]
            zj = _mean_of(planes)
        else:
            zj = jaccard_loss(s, g, xi=xi)
        breakdown["jaccard"] = zj.item()
        acc(zj, schedule.lambda_j)
    if "boundary" in components:
        if multiclass:
            maps = level_set_map or [
                level_set(_plane(g, k).data) for k in range(1, s.shape[0])
            ]
            planes = [
                boundary_loss(_plane(s, k), m) for k, m in zip(
                    range(1, s.shape[0]), maps)
            ]
            zb = _mean_of(planes)
        else:
            lsm = level_set_map if level_set_map is not None else level_set(
                _as_2d(g).data
            )
            zb = boundary_loss(_as_2d(s), lsm)
        breakdown["boundary"] = zb.item()
        acc(zb, schedule.lambda_b(epoch))
    return total, breakdown


def _plane(t, k):
    return T.reshape(T.narrow(t, 0, k, 1), t.shape[1:])


def _as_2d(t):
    return _plane(t, 0) if t.ndim == 3 else t


def _mean_of(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


def composite_loss_batch(s, g, schedule, epoch, components=_COMPONENTS,
                         level_set_maps=None, xi=1e-6):
    """Mean of per-sample binary composite losses over a (B, H, W) batch.

    Value equals averaging composite_loss over the samples; the per-sample
    reductions are just evaluated as one batched graph so the tape stays
    small. Bounding boxes and level-set maps remain per-sample.
    """
    unknown = set(components) - set(_COMPONENTS)
    if unknown or not components:
        raise ValueError(f"loss components must be a non-empty subset "
                         f"of {_COMPONENTS}, got {components!r}")
    _check_prob_mask(s, g)
    if s.ndim != 3:
        raise ShapeError("composite_loss_batch expects (B, H, W) stacks")
    batch = s.shape[0]
    breakdown = {"lambda_b": schedule.lambda_b(epoch)}
    total = None

    def acc(term, weight):
        nonlocal total
        weighted = term * weight
        total = weighted if total is None else total + weighted

    if "dice" in components:
        inter = T.tsum(s * g, axes=[1, 2])
        denom = T.tsum(s * s, axes=[1, 2]) + T.tsum(g * g, axes=[1, 2])
        zd = T.tmean(1.0 - 2.0 * inter / denom + xi)
        breakdown["dice"] = zd.item()
        acc(zd, schedule.lambda_d)
    if "jaccard" in components:
        inter = T.tsum(s * g, axes=[1, 2])
        union_mass = T.tsum(s, axes=[1, 2]) + T.tsum(g, axes=[1, 2]) - inter
        iou = inter / union_mass
        box_masks = np.zeros(s.shape)
        areas = np.empty(batch)
        for i in range(batch):
            r0, r1, c0, c1 = _union_bbox(s.data[i], g.data[i])
            box_masks[i, r0:r1, c0:c1] = 1.0
            areas[i] = (r1 - r0) * (c1 - c0)
        soft_union = s + g - s * g
        box_mass = T.tsum(soft_union * Tensor(box_masks), axes=[1, 2])
        box_term = (Tensor(areas) - box_mass) / Tensor(areas)
        zj = T.tmean(1.0 - iou - box_term + xi)
        breakdown["jaccard"] = zj.item()
        acc(zj, schedule.lambda_j)
    if "boundary" in components:
        if level_set_maps is None or len(level_set_maps) != batch:
            raise ShapeError("need one level-set map per batch sample")
        values = np.stack([m.values for m in level_set_maps])
        zb = T.tmean(T.tmean(Tensor(values) * s, axes=[1, 2]))
        breakdown["boundary"] = zb.item()
        acc(zb, schedule.lambda_b(epoch))
    return total, breakdown

"""Segmentation metrics and the single-object box-discovery pipeline.

Soft masks are binarized at a fixed threshold, split into connected
components, filtered by area, and reduced to the biggest bounding box for
localization scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLD = 0.5
DEFAULT_BETA = 0.3
F_THRESHOLDS = np.arange(256) / 255.0


def binarize(m: np.ndarray, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Threshold a soft mask; values equal to the threshold count as 1."""
    return (np.asarray(m) >= t).astype(np.uint8)


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float((pred.astype(bool) == gt.astype(bool)).mean())


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1 when both masks are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def f_beta(precision: float, recall: float, beta_sq: float) -> float:
    denom = beta_sq * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta_sq) * precision * recall / denom


def max_f_beta(preds: np.ndarray, gts: np.ndarray,
               beta: float = DEFAULT_BETA,
               beta_sq: float | None = None,
               per_image: bool = True) -> tuple[float, float]:
    """Best F-measure over one dataset-wide threshold sweep.

    preds: soft masks [N,H,W]; gts: binary [N,H,W].  With ``per_image`` the
    per-image precision and recall are averaged before the F formula at each
    threshold; otherwise pixel counts are pooled over the dataset.  Returns
    (score, best threshold).
    """
    preds = np.asarray(preds)
    gts = np.asarray(gts).astype(bool)
    if len(preds) == 0:
        raise ValueError("max_f_beta needs at least one image pair")
    if preds.shape != gts.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {gts.shape}")
    bsq = beta * beta if beta_sq is None else beta_sq
    n = len(preds)
    flat = preds.reshape(n, -1)
    gflat = gts.reshape(n, -1)
    gt_pos = gflat.sum(axis=1)
    best_score, best_t = -1.0, 0.0
    for t in F_THRESHOLDS:
        b = flat >= t
        tp = (b & gflat).sum(axis=1)
        pred_pos = b.sum(axis=1)
        if per_image:
            # empty prediction: precision 1 iff the ground truth is empty too
            prec = np.where(pred_pos > 0, tp / np.maximum(pred_pos, 1),
                            (gt_pos == 0).astype(float))
            rec = np.where(gt_pos > 0, tp / np.maximum(gt_pos, 1), 1.0)
            score = f_beta(float(prec.mean()), float(rec.mean()), bsq)
        else:
            tpp = tp.sum()
            prec = tpp / pred_pos.sum() if pred_pos.sum() else \
                float(gt_pos.sum() == 0)
            rec = tpp / gt_pos.sum() if gt_pos.sum() else 1.0
            score = f_beta(float(prec), float(rec), bsq)
        if score > best_score:
            best_score, best_t = score, float(t)
    return best_score, best_t


# -- connected components ----------------------------------------------------

@dataclass
class ComponentLabeling:
    labels: np.ndarray        # [H,W] int32, 0 = background
    count: int
    areas: list[int]          # per component, index label-1


def connected_components(mask: np.ndarray,
                         connectivity: int = 8) -> ComponentLabeling:
    """Two-pass union-find labeling, labels ordered by first pixel found."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("connected_components expects a binary mask")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    H, W = mask.shape
    labels = np.zeros((H, W), np.int32)
    parent: list[int] = [0]

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    nbrs = [(-1, 0), (0, -1)]
    if connectivity == 8:
        nbrs += [(-1, -1), (-1, 1)]
    next_label = 1
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            hits = []
            for dy, dx in nbrs:
                ny, nx = y + dy, x + dx
                if 0 <= ny < H and 0 <= nx < W and labels[ny, nx]:
                    hits.append(labels[ny, nx])
            if not hits:
                labels[y, x] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                lo = min(hits)
                labels[y, x] = lo
                for h in hits:
                    union(lo, h)
    # second pass: resolve to roots, then relabel by first appearance
    remap: dict[int, int] = {}
    areas: list[int] = []
    for y in range(H):
        for x in range(W):
            lab = labels[y, x]
            if not lab:
                continue
            root = find(lab)
            if root not in remap:
                remap[root] = len(remap) + 1
                areas.append(0)
            labels[y, x] = remap[root]
            areas[labels[y, x] - 1] += 1
    return ComponentLabeling(labels=labels, count=len(remap), areas=areas)


# -- boxes and localization --------------------------------------------------

@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)


def components_to_boxes(labeling: ComponentLabeling,
                        min_area_frac: float = 0.01) -> list[BBox]:
    """Tight box per component above the area cutoff, biggest first."""
    H, W = labeling.labels.shape
    cutoff = min_area_frac * H * W
    boxes = []
    for lab in range(1, labeling.count + 1):
        if labeling.areas[lab - 1] < cutoff:
            continue
        ys, xs = np.nonzero(labeling.labels == lab)
        boxes.append((labeling.areas[lab - 1],
                      BBox(int(xs.min()), int(ys.min()),
                           int(xs.max()), int(ys.max()))))
    boxes.sort(key=lambda ab: -ab[0])
    return [b for _, b in boxes]


def box_iou(a: BBox, b: BBox) -> float:
    """Overlap over union with inclusive pixel coordinates."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0) + 1
    iy = min(a.y1, b.y1) - max(a.y0, b.y0) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def mask_to_box(mask: np.ndarray) -> BBox | None:
    ys, xs = np.nonzero(np.asarray(mask))
    if len(ys) == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def biggest_box(soft_mask: np.ndarray, t: float = DEFAULT_THRESHOLD,
                connectivity: int = 8,
                min_area_frac: float = 0.01) -> BBox | None:
    boxes = components_to_boxes(
        connected_components(binarize(soft_mask, t), connectivity),
        min_area_frac)
    return boxes[0] if boxes else None


def corloc(preds: np.ndarray, gt_boxes: list[list[BBox]],
           t: float = DEFAULT_THRESHOLD, connectivity: int = 8,
           min_area_frac: float = 0.01) -> float:
    """Fraction of images whose biggest predicted box overlaps some
    ground-truth box with IoU above 0.5; no surviving component is a miss."""
    if len(preds) != len(gt_boxes):
        raise ValueError("one ground-truth box list required per image")
    hits = 0
    for pred, gts in zip(preds, gt_boxes):
        if not gts:
            raise ValueError("every image needs at least one ground-truth "
                             "box")
        box = biggest_box(pred, t, connectivity, min_area_frac)
        if box is not None and any(box_iou(box, g) > 0.5 for g in gts):
            hits += 1
    return hits / len(preds)


# -- aggregate report --------------------------------------------------------

@dataclass
class MetricsReport:
    mean_acc: float
    mean_iou: float
    max_f: float
    max_f_threshold: float
    beta_sq: float
    corloc: float
    per_image: list[dict] = field(default_factory=list)

    def as_text(self) -> str:
        lines = [
            f"mean_acc {self.mean_acc:.6f}",
            f"mean_iou {self.mean_iou:.6f}",
            f"max_f_beta {self.max_f:.6f}",
            f"max_f_threshold {self.max_f_threshold:.6f}",
            f"beta_sq {self.beta_sq:.6f}",
            f"corloc {100.0 * self.corloc:.2f}%",
        ]
        return "\n".join(lines)


def evaluate(preds: np.ndarray, gts: np.ndarray,
             t: float = DEFAULT_THRESHOLD,
             beta_sq: float = DEFAULT_BETA ** 2,
             per_image_f: bool = True,
             connectivity: int = 8) -> MetricsReport:
    """Full metric suite for soft predictions against binary references."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {gts.shape}")
    per = []
    gt_boxes = []
    for i in range(len(preds)):
        b = binarize(preds[i], t)
        gbox = mask_to_box(gts[i])
        if gbox is None:
            raise ValueError(f"image {i} has an empty ground-truth mask")
        gt_boxes.append([gbox])
        pbox = biggest_box(preds[i], t, connectivity)
        hit = pbox is not None and box_iou(pbox, gbox) > 0.5
        per.append({
            "acc": pixel_accuracy(b, gts[i]),
            "iou": iou(b, gts[i]),
            "corloc_hit": int(hit),
            "box": None if pbox is None
            else [pbox.x0, pbox.y0, pbox.x1, pbox.y1],
        })
    score, thr = max_f_beta(preds, gts, beta_sq=beta_sq,
                            per_image=per_image_f)
    return MetricsReport(
        mean_acc=float(np.mean([p["acc"] for p in per])),
        mean_iou=float(np.mean([p["iou"] for p in per])),
        max_f=score, max_f_threshold=thr, beta_sq=beta_sq,
        corloc=float(np.mean([p["corloc_hit"] for p in per])),
        per_image=per)

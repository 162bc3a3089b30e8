"""Weakly-supervised lesion localization from a fine-tuned classifier.

Pipeline: Grad-CAM heatmap against the last encoder feature map, min-max
normalization to integer [0, 255], thresholding into candidate boxes, then
IoU-at-delta accuracy against the manifest's ground-truth boxes.

The two-level threshold pair (60, 180) is read as hysteresis by default:
connected components of {heatmap >= low} survive only if their peak reaches
``high``.  Plain single-threshold readings are available through
:func:`threshold_boxes` for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from dira.datasets import BBox, DatasetManifest, load_images, train_test_ids

DEFAULT_LOW = 60
DEFAULT_HIGH = 180

LOCALIZATION_COLUMNS = ("method", "delta", "correct", "total", "accuracy")

# 4-connectivity: diagonal contact does not join components
_STRUCTURE = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def grad_cam(model: torch.nn.Module, image: np.ndarray, target_class: int = 1) -> np.ndarray:
    """Class activation heatmap for one [H, W, C] image in [0, 1].

    Channel weights are the spatial means of d(score)/d(activation); the map
    is the ReLU of the weighted activation sum, bilinearly upsampled to the
    input size.  ``target_class`` 1 attributes the positive (lesion) logit,
    0 its negation.  The model must expose ``forward_with_activations``.
    """
    if not hasattr(model, "forward_with_activations"):
        raise ValueError("model does not expose forward_with_activations; cannot attribute")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]

    model.eval()
    with torch.enable_grad():
        logits, acts = model.forward_with_activations(x)
        if acts.dim() != 4:
            raise ValueError(f"activations must be [1, K, h, w], got {tuple(acts.shape)}")
        if logits.dim() == 1:          # single binary logit
            score = logits[0] if target_class == 1 else -logits[0]
        else:
            score = logits[0, target_class]
        if not acts.requires_grad:
            raise RuntimeError("no gradient path from score to the designated layer")
        grads = torch.autograd.grad(score, acts)[0]

    weights = grads.mean(dim=(2, 3))                       # [1, K]
    cam = F.relu((weights[:, :, None, None] * acts).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=img.shape[:2], mode="bilinear", align_corners=False)
    return cam[0, 0].detach().numpy().astype(np.float32)


def normalize_heatmap(heatmap: np.ndarray) -> np.ndarray:
    """Min-max normalize to integers in [0, 255], rounding half up.  A
    constant map normalizes to all zeros."""
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {h.shape}")
    lo, hi = float(h.min()), float(h.max())
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError("heatmap holds non-finite values")
    if hi <= lo:
        return np.zeros_like(h, dtype=np.int64)
    scaled = (h - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.int64)


def _mask_components_to_boxes(mask: np.ndarray) -> list[tuple[BBox, np.ndarray]]:
    labels, n = ndimage.label(mask, structure=_STRUCTURE)
    out = []
    for k in range(1, n + 1):
        ys, xs = np.nonzero(labels == k)
        out.append((BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1),
                    labels == k))
    return out


def threshold_boxes(heatmap255: np.ndarray, threshold: int) -> list[BBox]:
    """Tight boxes of the 4-connected components of {heatmap >= threshold}."""
    h = _check_heatmap255(heatmap255)
    if not (0 <= threshold <= 255):
        raise ValueError(f"threshold must lie in [0, 255], got {threshold}")
    return [box for box, _ in _mask_components_to_boxes(h >= threshold)]


def heatmap_to_boxes(heatmap255: np.ndarray, low: int = DEFAULT_LOW,
                     high: int = DEFAULT_HIGH) -> list[BBox]:
    """Hysteresis reading of the threshold pair: candidate components come
    from {heatmap >= low}; components whose maximum never reaches ``high``
    are discarded."""
    h = _check_heatmap255(heatmap255)
    if not (0 <= low <= high <= 255):
        raise ValueError(f"thresholds must satisfy 0 <= low <= high <= 255, got ({low}, {high})")
    boxes = []
    for box, comp in _mask_components_to_boxes(h >= low):
        if h[comp].max() >= high:
            boxes.append(box)
    return boxes


def _check_heatmap255(heatmap255: np.ndarray) -> np.ndarray:
    h = np.asarray(heatmap255)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {h.shape}")
    if h.size and (h.min() < 0 or h.max() > 255):
        raise ValueError("heatmap values must lie in [0, 255]")
    return h


def box_iou(a: BBox | Sequence[int], b: BBox | Sequence[int]) -> float:
    """Intersection over union of two half-open boxes."""
    ax0, ay0, ax1, ay1 = (int(v) for v in a)
    bx0, by0, bx1, by1 = (int(v) for v in b)
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    area_a = max(0, ax1 - ax0) * max(0, ay1 - ay0)
    area_b = max(0, bx1 - bx0) * max(0, by1 - by0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class LocalizationScore:
    delta: float
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        # no scoreable images -> report 0.0 rather than NaN
        return self.correct / self.total if self.total else 0.0


def score_localization(pred_boxes: Sequence[Sequence[BBox]],
                       gt_boxes: Sequence[Sequence[BBox]],
                       delta: float) -> LocalizationScore:
    """An image counts as correct when any predicted box overlaps any of its
    ground-truth boxes with IoU >= delta.  Images without ground truth are
    excluded from the total."""
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"prediction and ground-truth lists must align, "
                         f"got {len(pred_boxes)} vs {len(gt_boxes)}")
    correct = total = 0
    for preds, gts in zip(pred_boxes, gt_boxes):
        if not gts:
            continue
        total += 1
        if any(box_iou(p, g) >= delta for p in preds for g in gts):
            correct += 1
    return LocalizationScore(delta=delta, correct=correct, total=total)


READINGS = ("hysteresis", "single_low", "single_high")


def reading_tag(reading: str, low: int, high: int) -> str:
    if reading == "hysteresis":
        return f"low{low}_high{high}"
    if reading == "single_low":
        return f"t{low}"
    if reading == "single_high":
        return f"t{high}"
    raise ValueError(f"unknown reading {reading!r}; choose from {READINGS}")


def localize_dataset(model: torch.nn.Module, dataset_dir: str | Path,
                     deltas: Sequence[float], method_label: str,
                     reading: str = "hysteresis",
                     low: int = DEFAULT_LOW, high: int = DEFAULT_HIGH,
                     test_fraction: float = 0.2,
                     collect_examples: int = 0):
    """Run the full pipeline over the dataset's canonical test split.

    Returns (rows, examples): one CSV-ready row per delta with the reading
    encoded into the method label, plus up to ``collect_examples`` tuples of
    (image_id, image, heatmap255, predicted boxes, gt boxes) for overlays.
    """
    tag = reading_tag(reading, low, high)
    manifest = DatasetManifest.load(dataset_dir)
    _, test_ids = train_test_ids(manifest, test_fraction)
    by_id = {r.image_id: r for r in manifest.records}
    images = load_images(dataset_dir, test_ids, manifest=manifest)

    preds, gts, examples = [], [], []
    for k, image_id in enumerate(test_ids):
        gt = list(by_id[image_id].boxes)
        gts.append(gt)
        if not gt:
            preds.append([])
            continue
        heat = normalize_heatmap(grad_cam(model, images[k], target_class=1))
        if reading == "hysteresis":
            boxes = heatmap_to_boxes(heat, low=low, high=high)
        elif reading == "single_low":
            boxes = threshold_boxes(heat, low)
        else:
            boxes = threshold_boxes(heat, high)
        preds.append(boxes)
        if len(examples) < collect_examples:
            examples.append((image_id, images[k], heat, boxes, gt))

    rows = []
    for delta in deltas:
        score = score_localization(preds, gts, delta)
        rows.append({
            "method": f"{method_label}@{tag}",
            "delta": format(float(delta), ".10g"),
            "correct": score.correct,
            "total": score.total,
            "accuracy": format(score.accuracy, ".10g"),
        })
    return rows, examples


def write_localization_csv(path: str | Path, rows: list[dict]) -> None:
    lines = [",".join(LOCALIZATION_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in LOCALIZATION_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

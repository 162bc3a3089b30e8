"""Independent reference implementations used to cross-check the package.

Everything here is deliberately naive: explicit loops, flood fill, pixel
rasterization.  Slow but hard to get wrong.
"""

import numpy as np

from dira.datasets import BBox


def brute_force_auc(scores, labels) -> float:
    """Mean over all positive-negative pairs of [s_pos > s_neg] + 0.5 [tie]."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def flood_fill_boxes(heatmap255: np.ndarray, low: int, high: int) -> set[tuple[int, int, int, int]]:
    """Hysteresis box extraction by explicit stack-based 4-connected flood
    fill. Returns boxes as (x_min, y_min, x_max, y_max) tuples."""
    h = np.asarray(heatmap255)
    rows, cols = h.shape
    seen = np.zeros(h.shape, dtype=bool)
    boxes = set()
    for i in range(rows):
        for j in range(cols):
            if h[i, j] < low or seen[i, j]:
                continue
            stack = [(i, j)]
            seen[i, j] = True
            comp = []
            while stack:
                y, x = stack.pop()
                comp.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < rows and 0 <= nx < cols and not seen[ny, nx] \
                            and h[ny, nx] >= low:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            if max(h[y][x] for y, x in comp) >= high:
                ys = [c[0] for c in comp]
                xs = [c[1] for c in comp]
                boxes.add((min(xs), min(ys), max(xs) + 1, max(ys) + 1))
    return boxes


def rasterized_box_iou(a: BBox, b: BBox, size: int = 96) -> float:
    """Box IoU by painting both boxes onto a pixel grid and counting."""
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    grid_a[a.y_min:a.y_max, a.x_min:a.x_max] = True
    grid_b[b.y_min:b.y_max, b.x_min:b.x_max] = True
    union = int((grid_a | grid_b).sum())
    if union == 0:
        return 0.0
    return int((grid_a & grid_b).sum()) / union

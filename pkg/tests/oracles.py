"""Independent reference implementations used by the tests."""

from itertools import permutations

import numpy as np

from athresh.postprocess import TextInstance, extract_instances


def mask_iou(a, b):
    a, b = a.mask, b.mask
    return np.count_nonzero(a & b) / np.count_nonzero(a | b)


def exhaustive_tp(dets, gts, iou_thresh=0.5):
    """Maximum one-to-one matching size by trying every assignment."""
    if not dets or not gts:
        return 0
    ok = [[mask_iou(d, g) >= iou_thresh for g in gts] for d in dets]
    small, large = (dets, gts) if len(dets) <= len(gts) else (gts, dets)
    flip = small is gts
    best = 0
    for perm in permutations(range(len(large)), len(small)):
        hits = sum(ok[j][i] if flip else ok[i][j] for i, j in enumerate(perm))
        best = max(best, hits)
    return best


def random_fixture(rng: np.random.Generator, canvas=(24, 24), max_instances=5):
    """Disjoint ground-truth rectangles and perturbed, disjoint detections.

    Detections come from 8-connected components of a perturbed copy of the
    ground-truth raster (shifts, growth, erosion, spurious blobs), so they are
    disjoint like the detector's output.
    """
    H, W = canvas
    occupied = np.zeros(canvas, bool)
    gts = []
    for _ in range(rng.integers(0, max_instances + 1)):
        for _attempt in range(50):
            h, w = rng.integers(2, 7), rng.integers(2, 10)
            y, x = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
            lo_y, lo_x = max(y - 1, 0), max(x - 1, 0)
            if occupied[lo_y:y + h + 1, lo_x:x + w + 1].any():
                continue
            m = np.zeros(canvas, bool)
            m[y:y + h, x:x + w] = True
            occupied |= m
            gts.append(TextInstance.from_mask(m))
            break
    det_map = np.zeros(canvas, bool)
    for g in gts:
        if rng.uniform() < 0.15:
            continue  # missed
        m = np.roll(g.mask, (rng.integers(-2, 3), rng.integers(-2, 3)), axis=(0, 1))
        if rng.uniform() < 0.3:
            m = m | np.roll(m, 1, axis=int(rng.integers(0, 2)))
        det_map |= m
    for _ in range(rng.integers(0, 3)):
        y, x = rng.integers(0, H - 3), rng.integers(0, W - 3)
        det_map[y:y + rng.integers(1, 4), x:x + rng.integers(1, 4)] = True
    prob = rng.uniform(0.5, 1.0, size=canvas)
    dets = extract_instances(det_map, prob, min_area=1)
    return dets[:max_instances], gts

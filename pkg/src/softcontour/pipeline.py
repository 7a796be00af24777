"""Slide-level candidate pipeline and evaluation metrics.

The pipeline works on an RGB overview image: find tissue, threshold the
bright structures inside it, grow each connected component into a padded
bounding box with an initial boundary contour, and hand those candidates to
the one-shot predictor.  Stain appearance is harmonized beforehand with a
two-stain color-deconvolution normalizer.  The metric helpers (Dice,
panoptic quality, F1-optimal threshold) close the loop for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.measure import find_contours

from .contour_ops import resample_equidistant
from .geometry import ensure_ccw

OD_FLOOR = 1e-6          # intensity floor before the log transform
OD_TISSUE_NORM = 0.15    # optical-density norm above which a pixel is stained
MIN_STAIN_PIXELS = 100
PERCENTILE_LOW = 1.0
PERCENTILE_HIGH = 99.0

SATURATION_TISSUE = 0.05
GRAY_TISSUE = 0.85

DEFAULT_THRESHOLD_PERCENTILE = 90.0
DEFAULT_MIN_CC_PIXELS = 20
DEFAULT_MARGIN_FRAC = 0.25

IOU_MATCH = 0.5


class InsufficientTissueError(ValueError):
    """Raised when too few stained pixels exist to estimate stain vectors."""


# ---------------------------------------------------------------------------
# stain normalization


@dataclass
class StainReference:
    """Target stain basis (3 x 2 unit columns) and concentration scales."""

    stain_matrix: np.ndarray = field(
        default_factory=lambda: np.array(
            [[0.5626, 0.2159], [0.7201, 0.8012], [0.4062, 0.5581]]
        )
    )
    max_concentration: np.ndarray = field(
        # classic H&E reference percentiles, rescaled to base-10 optical density
        default_factory=lambda: np.array([1.9705, 1.0308]) / np.log(10.0)
    )


def macenko_normalize(image, reference=None) -> np.ndarray:
    """Map an RGB image onto a reference H&E stain appearance.

    Optical density is ``-log10(max(I, 1e-6))``.  The two stain directions
    are estimated from the 1st/99th percentile angles of stained pixels
    (``|OD| > 0.15``) in the plane of the top two covariance eigenvectors;
    per-stain concentrations are rescaled so their 99th percentiles match
    the reference, and the image is rebuilt as ``10**(-H_ref @ C)``.
    """
    reference = reference or StainReference()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {image.shape}")
    h, w = image.shape[:2]
    od = -np.log10(np.maximum(image.reshape(-1, 3), OD_FLOOR))
    stained = np.linalg.norm(od, axis=1) > OD_TISSUE_NORM
    if int(stained.sum()) < MIN_STAIN_PIXELS:
        raise InsufficientTissueError(
            f"insufficient tissue: {int(stained.sum())} stained pixels"
        )
    od_t = od[stained]
    cov = np.cov(od_t, rowvar=False)
    eigval, eigvec = np.linalg.eigh(cov)
    plane = eigvec[:, [2, 1]]  # top two eigenvectors as columns
    # Orient both axes toward the data so the stain wedge sits near angle 0;
    # eigenvector signs are arbitrary, and a wedge straddling the atan2
    # branch cut at +/-pi would make the percentile angles meaningless.
    plane = plane * np.where(od_t.mean(axis=0) @ plane < 0.0, -1.0, 1.0)
    proj = od_t @ plane
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(angles, [PERCENTILE_LOW, PERCENTILE_HIGH])
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    # sign convention: stain vectors point into positive optical density
    if v_lo.sum() < 0:
        v_lo = -v_lo
    if v_hi.sum() < 0:
        v_hi = -v_hi
    # order stains deterministically: hematoxylin-like first (larger red OD)
    pair = sorted([v_lo, v_hi], key=lambda v: -v[0])
    basis = np.stack(pair, axis=1)  # (3, 2)
    conc, *_ = np.linalg.lstsq(basis, od.T, rcond=None)  # (2, N)
    peaks = np.percentile(conc[:, stained], PERCENTILE_HIGH, axis=1)
    peaks = np.maximum(peaks, 1e-12)
    scaled = conc * (reference.max_concentration / peaks)[:, None]
    rebuilt = np.power(10.0, -(reference.stain_matrix @ scaled))  # (3, N)
    return np.clip(rebuilt.T.reshape(h, w, 3), 0.0, 1.0)


# ---------------------------------------------------------------------------
# candidate extraction


def tissue_mask(image) -> np.ndarray:
    """Tissue = saturated or non-bright pixels, closed with a 3x3 box."""
    image = np.asarray(image, dtype=np.float64)
    c_max = image.max(axis=2)
    c_min = image.min(axis=2)
    saturation = np.where(c_max > 0, (c_max - c_min) / np.maximum(c_max, 1e-12), 0.0)
    gray = image.mean(axis=2)
    raw = (saturation > SATURATION_TISSUE) | (gray < GRAY_TISSUE)
    # close on an edge-replicated pad: the default zero border would erode
    # tissue that touches the image boundary
    padded = np.pad(raw, 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3), bool))
    return closed[1:-1, 1:-1]


@dataclass
class Candidate:
    """One bright structure proposed for segmentation.

    ``box`` is the margin-expanded (row0, col0, row1, col1) crop in pixel
    units, end-exclusive; ``contour`` is the traced component boundary in
    coordinates normalized to that crop.
    """

    cc_id: int
    box: tuple
    contour: np.ndarray
    area_px: int

    def to_dict(self) -> dict:
        return {
            "cc_id": int(self.cc_id),
            "box": [int(v) for v in self.box],
            "area_px": int(self.area_px),
            "contour": [[float(x), float(y)] for x, y in self.contour],
        }

    @classmethod
    def from_dict(cls, payload) -> "Candidate":
        return cls(
            cc_id=int(payload["cc_id"]),
            box=tuple(int(v) for v in payload["box"]),
            contour=np.asarray(payload["contour"], dtype=np.float64),
            area_px=int(payload["area_px"]),
        )


def save_candidates(path, candidates) -> None:
    with open(path, "w") as fh:
        json.dump({"candidates": [c.to_dict() for c in candidates]}, fh, indent=2)
        fh.write("\n")


def load_candidates(path) -> list:
    with open(path) as fh:
        payload = json.load(fh)
    return [Candidate.from_dict(c) for c in payload["candidates"]]


def _component_contour(component, box, n_nodes) -> np.ndarray:
    """Boundary polygon of a component, normalized to its expanded box."""
    r0, c0, r1, c1 = box
    padded = np.pad(component.astype(np.float64), 1)
    loops = find_contours(padded, 0.5)
    boundary = max(loops, key=len)  # outer boundary of the (single) component
    rows = boundary[:, 0] - 1 + 0.5  # pixel centers, minus tracing pad
    cols = boundary[:, 1] - 1 + 0.5
    x = (cols + 0.0) / (c1 - c0)
    y = (rows + 0.0) / (r1 - r0)
    nodes = np.stack([x, y], axis=1)[:-1]  # drop duplicated closing point
    nodes = np.clip(nodes, 0.0, 1.0)
    return ensure_ccw(resample_equidistant(nodes, n_nodes))


def extract_candidates(
    image,
    threshold_percentile=DEFAULT_THRESHOLD_PERCENTILE,
    min_cc_px=DEFAULT_MIN_CC_PIXELS,
    margin_frac=DEFAULT_MARGIN_FRAC,
    n_nodes=100,
) -> list:
    """Bright-structure candidates from an RGB overview.

    The grayscale threshold is a percentile over tissue pixels; candidate
    components are 4-connected, at least ``min_cc_px`` pixels, and must touch
    the (1-pixel dilated) tissue mask.  Boxes grow by ``margin_frac`` of
    their size per side, clamped to the image.  Candidates are sorted by
    (row0, col0) of the expanded box; ``cc_id`` follows that order.
    """
    image = np.asarray(image, dtype=np.float64)
    tissue = tissue_mask(image)
    if not tissue.any():
        return []
    gray = image.mean(axis=2)
    threshold = np.percentile(gray[tissue], threshold_percentile)
    bright = gray > threshold
    labels, n_labels = ndimage.label(bright, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool
    ))
    if n_labels == 0:
        return []
    near_tissue = ndimage.binary_dilation(tissue, np.ones((3, 3), bool))
    h, w = gray.shape
    raw = []
    for lbl in range(1, n_labels + 1):
        component = labels == lbl
        area = int(component.sum())
        if area < min_cc_px:
            continue
        if not (component & near_tissue).any():
            continue
        rows, cols = np.nonzero(component)
        r0, r1 = int(rows.min()), int(rows.max()) + 1
        c0, c1 = int(cols.min()), int(cols.max()) + 1
        mr = int(round((r1 - r0) * margin_frac))
        mc = int(round((c1 - c0) * margin_frac))
        box = (max(0, r0 - mr), max(0, c0 - mc), min(h, r1 + mr), min(w, c1 + mc))
        raw.append((box, component, area))
    raw.sort(key=lambda item: (item[0][0], item[0][1]))
    out = []
    for cc_id, (box, component, area) in enumerate(raw):
        crop = component[box[0]:box[2], box[1]:box[3]]
        contour = _component_contour(crop, box, n_nodes)
        out.append(Candidate(cc_id=cc_id, box=box, contour=contour, area_px=area))
    return out


# ---------------------------------------------------------------------------
# metrics


def dice(mask_a, mask_b) -> float:
    """Dice overlap of two boolean masks; two empty masks count as 1."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _iou(a, b) -> float:
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return int((a & b).sum()) / union


@dataclass
class PanopticResult:
    pq: float
    precision: float
    recall: float
    f1: float
    matches: list          # (pred_index, gt_index, iou)
    unmatched_pred: list
    unmatched_gt: list


def panoptic_quality(pred_instances, gt_instances) -> PanopticResult:
    """Instance-level panoptic quality with IoU > 0.5 matching.

    An IoU above 0.5 makes the match unique, so simple pairwise testing
    suffices.  Both sets empty scores 1 across the board; otherwise
    ``PQ = sum(IoU of TPs) / (TP + FP/2 + FN/2)``.
    """
    pred = [np.asarray(m, dtype=bool) for m in pred_instances]
    gt = [np.asarray(m, dtype=bool) for m in gt_instances]
    if not pred and not gt:
        return PanopticResult(1.0, 1.0, 1.0, 1.0, [], [], [])
    matches = []
    used_gt = set()
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if j in used_gt or p.shape != g.shape:
                continue
            iou = _iou(p, g)
            if iou > IOU_MATCH:
                matches.append((i, j, iou))
                used_gt.add(j)
                break
    matched_pred = {i for i, _, _ in matches}
    unmatched_pred = [i for i in range(len(pred)) if i not in matched_pred]
    unmatched_gt = [j for j in range(len(gt)) if j not in used_gt]
    tp = len(matches)
    fp = len(unmatched_pred)
    fn = len(unmatched_gt)
    pq = sum(iou for *_, iou in matches) / (tp + 0.5 * fp + 0.5 * fn)
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PanopticResult(pq, precision, recall, f1, matches, unmatched_pred, unmatched_gt)


def choose_threshold(scores, labels) -> float:
    """Score threshold maximizing F1 (prediction = score >= threshold).

    Candidate thresholds are the midpoints between consecutive distinct
    scores plus one value below the minimum; ties pick the lowest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1 or len(scores) == 0:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not labels.any():
        raise ValueError("need at least one positive label")
    uniq = np.unique(scores)
    candidates = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0])
    best_thr = None
    best_f1 = -1.0
    for thr in candidates:
        predicted = scores >= thr
        tp = int((predicted & labels).sum())
        fp = int((predicted & ~labels).sum())
        fn = int((~predicted & labels).sum())
        f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
        if f1 > best_f1:  # strict: ties keep the earlier (lower) threshold
            best_f1 = f1
            best_thr = thr
    return float(best_thr)


def evaluate_instance_pairs(pred_masks, gt_masks) -> dict:
    """Name-matched instance metrics for two mask dictionaries.

    Each name is treated as its own frame holding one instance per side: a
    name present in both with IoU > 0.5 is a true positive, present in both
    below that is both a false positive and a false negative, one-sided
    names count accordingly.  ``dice_mean`` averages Dice over the true
    positives (0 when there are none).
    """
    names = sorted(set(pred_masks) | set(gt_masks))
    tp, fp, fn = 0, 0, 0
    iou_sum = 0.0
    dices = []
    matches = []
    for name in names:
        p = pred_masks.get(name)
        g = gt_masks.get(name)
        if p is None:
            fn += 1
            continue
        if g is None:
            fp += 1
            continue
        iou = _iou(np.asarray(p, bool), np.asarray(g, bool))
        if iou > IOU_MATCH:
            tp += 1
            iou_sum += iou
            dices.append(dice(p, g))
            matches.append({"name": name, "iou": iou, "dice": dices[-1]})
        else:
            fp += 1
            fn += 1
    if tp + fp + fn == 0:
        return {
            "pq": 1.0, "precision": 1.0, "recall": 1.0, "f1": 1.0,
            "dice_mean": 1.0, "n_true_positive": 0, "matches": [],
        }
    pq = iou_sum / (tp + 0.5 * fp + 0.5 * fn)
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "pq": pq,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "dice_mean": float(np.mean(dices)) if dices else 0.0,
        "n_true_positive": tp,
        "matches": matches,
    }

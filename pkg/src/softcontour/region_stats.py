"""Soft-region statistics over feature pyramids.

The central primitive is the masked mean: a soft mask (or any non-negative
weight field) over a feature map yields one mean vector per channel.  On top
of that sit the in/out region features driving the unsupervised loss, the
exact distance transform used to describe a support mask, and the Gaussian
isoline bands that slice a distance map into comparable rings.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt

from .geometry import block_mean

EPS_WEIGHT = 1e-8

# exp(-(gap/2)^2 / sigma) = 1/4 at the midpoint between neighboring centers
_SIGMA_RULE = 4.0 * np.log(4.0)


class EmptyRegionError(ValueError):
    """Raised when a weight field has (near-)zero total mass."""


def masked_mean(weight, features) -> np.ndarray:
    """Weighted per-channel mean of ``features`` under ``weight``.

    ``weight`` is (H, W); ``features`` is (H, W, C) or (H, W).  Raises
    :class:`EmptyRegionError` when the total weight is at most ``EPS_WEIGHT``.
    """
    weight = np.asarray(weight, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2:
        features = features[:, :, None]
    if weight.shape != features.shape[:2]:
        raise ValueError(f"weight {weight.shape} does not match features {features.shape}")
    total = float(weight.sum())
    if total <= EPS_WEIGHT:
        raise EmptyRegionError("empty region: total weight below threshold")
    return np.tensordot(weight, features, axes=([0, 1], [0, 1])) / total


def region_features(mask0, pyramid) -> list:
    """Per-scale (inside, outside) mean feature vectors for a scale-0 soft mask.

    The mask is area-averaged down to each pyramid scale; the outside
    weight is its complement.
    """
    masks = [
        mask0 if s == 0 else block_mean(mask0, m.shape[:2])
        for s, m in enumerate(pyramid.maps)
    ]
    return region_features_from_maps(masks, pyramid)


def region_features_from_maps(masks, pyramid) -> list:
    """Like :func:`region_features` but with the per-scale masks given."""
    out = []
    for mask, feat in zip(masks, pyramid.maps):
        out.append((masked_mean(mask, feat), masked_mean(1.0 - mask, feat)))
    return out


def mask_to_distance_map(mask) -> np.ndarray:
    """Exact Euclidean distance of interior pixels to the nearest background
    pixel, zero outside, max-normalized to exactly 1."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyRegionError("mask has no interior pixels")
    if mask.all():
        raise EmptyRegionError("mask has no background pixels")
    dist = distance_transform_edt(mask)
    return dist / dist.max()


def isoline_sigma(centers) -> np.ndarray:
    """Bandwidths making neighboring isolines sum to 1/2 at their midpoint.

    For each center the relevant gap is the smaller of its neighbor gaps
    (endpoints have one); a lone center uses a gap of 1.  Solving
    ``exp(-(gap/2)^2 / sigma) = 1/4`` gives ``sigma = gap^2 / (4 ln 4)``.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 1 or len(centers) == 0:
        raise ValueError("centers must be a non-empty 1-D sequence")
    if np.any(np.diff(centers) <= 0):
        raise ValueError("centers must be strictly increasing")
    if len(centers) == 1:
        gaps = np.array([1.0])
    else:
        diffs = np.diff(centers)
        left = np.concatenate([[np.inf], diffs])
        right = np.concatenate([diffs, [np.inf]])
        gaps = np.minimum(left, right)
    return gaps**2 / _SIGMA_RULE


def isoline_weights(dist, centers) -> list:
    """One Gaussian band ``exp(-(dist - c)^2 / sigma_c)`` per center."""
    dist = np.asarray(dist, dtype=np.float64)
    sigmas = isoline_sigma(centers)
    return [np.exp(-((dist - c) ** 2) / s) for c, s in zip(np.asarray(centers), sigmas)]


def isoline_features(dist0, pyramid, centers) -> list:
    """Masked-mean feature vectors per (center, scale).

    The bands are computed on the scale-0 distance map, bilinearly
    averaged down to each scale, and used as masked-mean weights there.
    Returns ``out[center_index][scale] -> (C_s,)``.
    """
    bands = isoline_weights(dist0, centers)
    out = []
    for band in bands:
        per_scale = []
        for s, feat in enumerate(pyramid.maps):
            w = band if s == 0 else block_mean(band, feat.shape[:2])
            per_scale.append(masked_mean(w, feat))
        out.append(per_scale)
    return out

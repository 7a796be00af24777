"""Contour evolution by gradient descent on feature statistics.

Two training-free procedures share the same machinery:

* the unsupervised loop maximizes the separation between mean features
  inside and outside the contour (optionally with an area reward), clipping
  the per-node step;
* the one-shot loop first distills a support image/mask pair into averaged
  isoline features over random flip/rotation augmentations (``fit_support``),
  then descends a query contour so its soft-distance-map isolines match the
  support's (``predict_query``), smoothing the per-node gradient along the
  contour instead of clipping it.

Feature pyramids are computed once per image and held constant; all
gradients flow through the geometric maps via the hand-written adjoints in
:mod:`softcontour.geometry`.  Both loops stop when the L2 norm of the full
(pre-clip, pre-blur) gradient drops to the configured threshold, and both
re-establish polygon health each epoch: clean out self-crossings, resample
to equidistant nodes, clamp to the image frame.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from . import geometry as geo
from . import region_stats as rs
from .contour_ops import (
    ContourCollapsedError,
    blur_gradient,
    clean,
    clip_gradient,
    resample_equidistant,
)

EPS_NORM = 1e-12   # zero-vector guard for norms and cosines
_TINY = 1e-30      # subgradient cutoff for vector norms at the origin

STATUS_CONVERGED = "converged"
STATUS_MAX_EPOCHS = "max_epochs"
STATUS_COLLAPSED = "collapsed"
STATUS_DEGENERATE = "degenerate"

SIGNATURE_SUFFIX = ".json"


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration fields."""


@dataclass
class EvolutionConfig:
    """Knobs shared by both evolution loops.

    ``clip_max_norm`` caps the per-node displacement of one unsupervised
    step, in normalized units; ``None`` means one pixel of the working grid.
    ``isoline_centers`` / ``isoline_weights`` and ``n_aug`` only matter for
    the one-shot procedure, ``area_weight`` only for the unsupervised one.
    """

    n_nodes: int = 100
    sharpness: float = 1e5
    learning_rate: float = 1e-2
    lr_decay: float = 0.999
    grad_threshold: float = 1e-2
    n_epochs: int = 110
    area_weight: float = 0.0
    clip_max_norm: float | None = None
    blur_sigma: float = 2.0
    isoline_centers: tuple = (0.0, 1.0)
    isoline_weights: tuple = (0.1, 0.9)
    n_aug: int = 100
    mesh_scale: int = 2
    seed: int = 0
    snapshot_stride: int = 0

    def validate(self) -> "EvolutionConfig":
        if self.n_nodes < 3:
            raise ConfigError("n_nodes must be at least 3")
        if self.sharpness <= 0:
            raise ConfigError("sharpness must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.grad_threshold < 0:
            raise ConfigError("grad_threshold must be non-negative")
        if self.n_epochs < 1:
            raise ConfigError("n_epochs must be at least 1")
        if self.clip_max_norm is not None and self.clip_max_norm <= 0:
            raise ConfigError("clip_max_norm must be positive")
        if self.blur_sigma < 0:
            raise ConfigError("blur_sigma must be non-negative")
        if not 0 <= self.mesh_scale < geo.N_SCALES:
            raise ConfigError(f"mesh_scale must be in [0, {geo.N_SCALES - 1}]")
        centers = tuple(float(c) for c in self.isoline_centers)
        if len(centers) == 0 or any(b <= a for a, b in zip(centers, centers[1:])):
            raise ConfigError("isoline_centers must be non-empty and strictly increasing")
        if len(self.isoline_weights) != len(centers):
            raise ConfigError("isoline_weights must match isoline_centers in length")
        if self.n_aug < 1:
            raise ConfigError("n_aug must be at least 1")
        if self.snapshot_stride < 0:
            raise ConfigError("snapshot_stride must be non-negative")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["isoline_centers"] = list(out["isoline_centers"])
        out["isoline_weights"] = list(out["isoline_weights"])
        return out

    @classmethod
    def from_dict(cls, payload) -> "EvolutionConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(payload)
        for key in ("isoline_centers", "isoline_weights"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "EvolutionConfig":
        with open(path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(payload)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


def histology_preset() -> EvolutionConfig:
    """Unsupervised defaults for stained tissue (area reward on).

    The unsupervised loops run at a softer mask edge and a finer working
    mesh than the one-shot loop: region-mean gradients live only in the
    edge's transition band, so a band about one mesh pixel wide keeps every
    node moving each epoch.
    """
    return EvolutionConfig(n_epochs=110, area_weight=5.0, sharpness=1e4, mesh_scale=1)


def real_life_preset() -> EvolutionConfig:
    """Unsupervised defaults for ordinary photographs (no area reward)."""
    return EvolutionConfig(n_epochs=70, area_weight=0.0, sharpness=1e4, mesh_scale=1)


def oneshot_preset() -> EvolutionConfig:
    """One-shot fit/predict defaults."""
    return EvolutionConfig(n_epochs=300, learning_rate=5e-2)


PRESETS = {
    "histology": histology_preset,
    "real-life": real_life_preset,
    "one-shot": oneshot_preset,
}


@dataclass
class EvolutionTrace:
    """Per-epoch bookkeeping of one evolution run."""

    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (epoch, nodes) pairs
    status: str = STATUS_MAX_EPOCHS

    @property
    def n_epochs(self):
        return len(self.losses)


# ---------------------------------------------------------------------------
# padded working frame

# Extractors replicate the image edge up to a multiple of 16, so evolution
# happens in the padded frame; nodes are rescaled on the way in and out and
# clamping keeps them inside the original (unpadded) image region.


def _padded_shape(shape):
    h, w = shape
    return ((h + ft.PAD_MULTIPLE - 1) // ft.PAD_MULTIPLE * ft.PAD_MULTIPLE,
            (w + ft.PAD_MULTIPLE - 1) // ft.PAD_MULTIPLE * ft.PAD_MULTIPLE)


def _frame_scale(orig_shape, padded_shape):
    return (orig_shape[1] / padded_shape[1], orig_shape[0] / padded_shape[0])


def _to_padded(nodes, sx, sy):
    return nodes * np.array([sx, sy])


def _from_padded(nodes, sx, sy):
    return np.clip(nodes / np.array([sx, sy]), 0.0, 1.0)


# ---------------------------------------------------------------------------
# losses and their gradients


def separation_loss(region_stats, pyramid, area=0.0, area_weight=0.0) -> float:
    """Negative scale-weighted in/out separation, minus the area reward.

    ``region_stats`` is the per-scale (inside, outside) list from
    :mod:`softcontour.region_stats`; each scale contributes
    ``-2**-s * |in - out|_2 / |f_s|_F``.
    """
    loss = 0.0
    for s, ((f_in, f_out), fnorm) in enumerate(zip(region_stats, pyramid.norms)):
        if fnorm <= EPS_NORM:
            continue
        loss -= (2.0**-s) * float(np.linalg.norm(f_in - f_out)) / fnorm
    return loss - area_weight * area


def _separation_loss_and_cotangents(masks, pyramid):
    """Loss over per-scale soft masks plus d loss / d mask at each scale."""
    loss = 0.0
    cots = []
    for s, (mask, feat, fnorm) in enumerate(zip(masks, pyramid.maps, pyramid.norms)):
        sum_in = float(mask.sum())
        sum_out = float((1.0 - mask).sum())
        if sum_in <= rs.EPS_WEIGHT or sum_out <= rs.EPS_WEIGHT:
            raise rs.EmptyRegionError("empty region: total weight below threshold")
        f_in = np.tensordot(mask, feat, axes=([0, 1], [0, 1])) / sum_in
        f_out = np.tensordot(1.0 - mask, feat, axes=([0, 1], [0, 1])) / sum_out
        diff = f_in - f_out
        sep = float(np.linalg.norm(diff))
        if fnorm <= EPS_NORM:
            cots.append(np.zeros_like(mask))
            continue
        weight = (2.0**-s) / fnorm
        loss -= weight * sep
        if sep <= _TINY:
            cots.append(np.zeros_like(mask))
            continue
        d_in = -weight * diff / sep           # d loss / d f_in
        # d f_in / d mask(x) = (f(x) - f_in)/sum_in; outside mirrors with -
        cot = (np.tensordot(feat, d_in, axes=([2], [0])) - float(d_in @ f_in)) / sum_in
        cot += (np.tensordot(feat, d_in, axes=([2], [0])) - float(d_in @ f_out)) / sum_out
        cots.append(cot)
    return loss, cots


def unsupervised_loss_and_grad(nodes, shape, pyramid, config) -> tuple:
    """Unsupervised loss and its gradient with respect to the nodes."""
    masks = geo.multiscale_maps(nodes, shape, config.sharpness, config.mesh_scale, "mask")
    loss, cots = _separation_loss_and_cotangents(masks, pyramid)
    grad = geo.multiscale_maps_vjp(
        nodes, shape, config.sharpness, config.mesh_scale, "mask", cots
    )
    if config.area_weight:
        area, d_area = geo.polygon_area_grad(nodes)
        loss -= config.area_weight * area
        grad -= config.area_weight * d_area
    return loss, grad


def matching_loss(signature, query_features) -> float:
    """Mean weighted isoline-feature mismatch between support and query.

    Each (center i, scale s) cell contributes
    ``w_i * 2**-s * |sup - qu|_2 / C_s``, averaged over all cells.  The
    (center, scale) index sets are the signature's own; the query must match
    them cell for cell.
    """
    n_centers = len(signature.centers)
    n_scales = len(signature.iso_features[0]) if n_centers else 0
    if len(query_features) != n_centers:
        raise ValueError(
            f"query has {len(query_features)} isolines, signature has {n_centers}"
        )
    loss = 0.0
    for i in range(n_centers):
        if len(query_features[i]) != n_scales:
            raise ValueError(
                f"query isoline {i} has {len(query_features[i])} scales, expected {n_scales}"
            )
        for s in range(n_scales):
            sup = signature.iso_features[i][s]
            qu = np.asarray(query_features[i][s], dtype=np.float64)
            if qu.shape != np.shape(sup):
                raise ValueError(f"feature shape mismatch at isoline {i}, scale {s}")
            coeff = signature.weights[i] * (2.0**-s) / len(sup)
            loss += coeff * float(np.linalg.norm(qu - sup))
    return loss / (n_centers * n_scales)


def oneshot_loss_and_grad(nodes, shape, pyramid, signature, config) -> tuple:
    """One-shot matching loss and its gradient with respect to the nodes."""
    maps = geo.multiscale_maps(
        nodes, shape, config.sharpness, config.mesh_scale, "distance"
    )
    dist0 = maps[0]
    centers = np.asarray(signature.centers, dtype=np.float64)
    sigmas = rs.isoline_sigma(centers)
    n_centers = len(centers)
    n_cells = n_centers * geo.N_SCALES
    loss = 0.0
    cot_dist0 = np.zeros_like(dist0)
    for i, (center, sigma) in enumerate(zip(centers, sigmas)):
        band0 = np.exp(-((dist0 - center) ** 2) / sigma)
        cot_band0 = np.zeros_like(band0)
        for s, feat in enumerate(pyramid.maps):
            band = band0 if s == 0 else geo.block_mean(band0, feat.shape[:2])
            total = float(band.sum())
            if total <= rs.EPS_WEIGHT:
                raise rs.EmptyRegionError("empty region: total weight below threshold")
            qu = np.tensordot(band, feat, axes=([0, 1], [0, 1])) / total
            sup = signature.iso_features[i][s]
            diff = qu - sup
            mismatch = float(np.linalg.norm(diff))
            coeff = signature.weights[i] * (2.0**-s) / (feat.shape[2] * n_cells)
            loss += coeff * mismatch
            if mismatch <= _TINY:
                continue
            d_qu = coeff * diff / mismatch
            cot_band = (
                np.tensordot(feat, d_qu, axes=([2], [0])) - float(d_qu @ qu)
            ) / total
            if s == 0:
                cot_band0 += cot_band
            else:
                cot_band0 += geo.block_mean_adjoint(cot_band, band0.shape)
        cot_dist0 += cot_band0 * band0 * (-2.0 * (dist0 - center) / sigma)
    cotangents = [cot_dist0] + [None] * (geo.N_SCALES - 1)
    grad = geo.multiscale_maps_vjp(
        nodes, shape, config.sharpness, config.mesh_scale, "distance", cotangents
    )
    return loss, grad


def similarity_score(signature, masks, pyramid) -> float:
    """Scale-weighted cosine between support and query in-region means.

    ``masks`` are the per-scale soft masks of the query contour.  Zero
    vectors score 0 at their scale; the total is bounded by 31/16.
    """
    score = 0.0
    for s, (mask, feat) in enumerate(zip(masks, pyramid.maps)):
        total = float(mask.sum())
        if total <= rs.EPS_WEIGHT:
            continue
        q_in = np.tensordot(mask, feat, axes=([0, 1], [0, 1])) / total
        sup = signature.in_means[s]
        nq = float(np.linalg.norm(q_in))
        ns = float(np.linalg.norm(sup))
        if nq <= EPS_NORM or ns <= EPS_NORM:
            continue
        cos = float(np.clip(q_in @ sup / (nq * ns), -1.0, 1.0))
        score += (2.0**-s) * cos
    return score


MAX_SIMILARITY = sum(2.0**-s for s in range(geo.N_SCALES))  # 31/16


# ---------------------------------------------------------------------------
# unsupervised loop


def evolve_unsupervised(image, init_contour, config=None, extractor=None) -> tuple:
    """Evolve a contour to separate inside from outside feature statistics.

    Returns ``(contour, trace)``; the contour is in the original image frame
    regardless of internal padding.  Collapse or an empty region ends the
    run early with the corresponding trace status instead of raising.
    """
    config = (config or real_life_preset()).validate()
    extractor = extractor or ft.extract_pyramid_identity
    image = np.asarray(image, dtype=np.float64)
    pyramid = extractor(image)
    pshape = pyramid.base_shape
    sx, sy = _frame_scale(image.shape[:2], pshape)
    nodes = resample_equidistant(geo.validate_contour(init_contour), config.n_nodes)
    nodes = _to_padded(nodes, sx, sy)
    step_cap = config.clip_max_norm
    if step_cap is None:
        step_cap = 1.0 / min(pshape)

    trace = EvolutionTrace()
    lr = config.learning_rate
    for epoch in range(config.n_epochs):
        try:
            loss, grad = unsupervised_loss_and_grad(nodes, pshape, pyramid, config)
        except rs.EmptyRegionError:
            trace.status = STATUS_DEGENERATE
            break
        gnorm = float(np.linalg.norm(grad))
        trace.losses.append(loss)
        trace.grad_norms.append(gnorm)
        trace.learning_rates.append(lr)
        if config.snapshot_stride and epoch % config.snapshot_stride == 0:
            trace.snapshots.append((epoch, _from_padded(nodes, sx, sy)))
        if gnorm <= config.grad_threshold:
            trace.status = STATUS_CONVERGED
            break
        step = clip_gradient(lr * grad, step_cap)
        nodes = geo.clamp_nodes(nodes - step, x_max=sx, y_max=sy)
        try:
            nodes = resample_equidistant(clean(nodes), config.n_nodes)
        except (ContourCollapsedError, ValueError):
            trace.status = STATUS_COLLAPSED
            break
        lr *= config.lr_decay
    return _from_padded(nodes, sx, sy), trace


# ---------------------------------------------------------------------------
# one-shot: support signature


@dataclass
class SupportSignature:
    """Distilled description of one segmented support instance.

    ``iso_features[i][s]`` is the mean feature vector of isoline ``i`` at
    scale ``s`` averaged over augmentations; ``in_means[s]`` are the
    in-region mean features under the hard support mask, kept for scoring.
    """

    centers: tuple
    weights: tuple
    iso_features: list
    in_means: list
    extractor: str = "identity"
    config_digest: str = ""

    def save(self, path) -> None:
        tensors = {}
        for i, per_scale in enumerate(self.iso_features):
            for s, vec in enumerate(per_scale):
                tensors[f"iso.{i}.{s}"] = np.asarray(vec, dtype=np.float32)
        for s, vec in enumerate(self.in_means):
            tensors[f"inmean.{s}"] = np.asarray(vec, dtype=np.float32)
        ft.write_weight_container(path, tensors)
        sidecar = {
            "centers": list(self.centers),
            "weights": list(self.weights),
            "channels": [len(v) for v in self.in_means],
            "extractor": self.extractor,
            "config_digest": self.config_digest,
        }
        with open(str(path) + SIGNATURE_SUFFIX, "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SupportSignature":
        store = ft.load_weight_container(path)
        try:
            with open(str(path) + SIGNATURE_SUFFIX) as fh:
                sidecar = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ft.WeightFormatError(f"unreadable signature sidecar: {exc}") from None
        centers = tuple(float(c) for c in sidecar["centers"])
        weights = tuple(float(w) for w in sidecar["weights"])
        iso = []
        for i in range(len(centers)):
            per_scale = []
            for s in range(geo.N_SCALES):
                name = f"iso.{i}.{s}"
                if name not in store:
                    raise ft.WeightFormatError(f"missing tensor '{name}'")
                per_scale.append(store[name].astype(np.float64))
            iso.append(per_scale)
        means = []
        for s in range(geo.N_SCALES):
            name = f"inmean.{s}"
            if name not in store:
                raise ft.WeightFormatError(f"missing tensor '{name}'")
            means.append(store[name].astype(np.float64))
        return cls(
            centers=centers,
            weights=weights,
            iso_features=iso,
            in_means=means,
            extractor=sidecar.get("extractor", "identity"),
            config_digest=sidecar.get("config_digest", ""),
        )


def random_augmentation(image, mask, rng) -> tuple:
    """One random flip/rotation draw applied identically to image and mask.

    Fixed draw order: with probability 1/2 rotate by a uniform multiple of
    90 degrees, then horizontal flip with probability 1/2, then vertical
    flip with probability 1/2.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if rng.random() < 0.5:
        quarter_turns = int(rng.integers(0, 4))
        if quarter_turns:
            image = np.rot90(image, quarter_turns, axes=(0, 1))
            mask = np.rot90(mask, quarter_turns, axes=(0, 1))
    if rng.random() < 0.5:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    if rng.random() < 0.5:
        image = image[::-1]
        mask = mask[::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def fit_support(image, mask, config=None, extractor=None, extractor_name="identity") -> SupportSignature:
    """Distill a support image and hard mask into a reusable signature.

    Isoline features are averaged over ``n_aug`` random augmentations of the
    pair; augmentations whose bands come out empty are skipped (all skipped
    is an error).  In-region means are taken once on the unaugmented pair —
    they are invariant under the flip/rotation group, so averaging them
    would be redundant.
    """
    config = (config or oneshot_preset()).validate()
    extractor = extractor or ft.extract_pyramid_identity
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} disagree")
    if not mask.any():
        raise rs.EmptyRegionError("support mask is empty")
    rng = np.random.default_rng(config.seed)
    centers = np.asarray(config.isoline_centers, dtype=np.float64)

    accum = None
    n_used = 0
    for _ in range(config.n_aug):
        img_a, mask_a = random_augmentation(image, mask, rng)
        pyr = extractor(img_a)
        mask_p = ft.pad_to_multiple(mask_a.astype(np.float64)) > 0.5
        dist = rs.mask_to_distance_map(mask_p)
        try:
            feats = rs.isoline_features(dist, pyr, centers)
        except rs.EmptyRegionError:
            continue
        if accum is None:
            accum = [[vec.copy() for vec in per_scale] for per_scale in feats]
        else:
            for i, per_scale in enumerate(feats):
                for s, vec in enumerate(per_scale):
                    accum[i][s] += vec
        n_used += 1
    if accum is None or n_used == 0:
        raise rs.EmptyRegionError("all augmentations produced empty isolines")
    iso_features = [[vec / n_used for vec in per_scale] for per_scale in accum]

    pyr = extractor(image)
    mask0 = ft.pad_to_multiple(mask.astype(np.float64))
    in_means = [
        rs.masked_mean(mask0 if s == 0 else geo.block_mean(mask0, f.shape[:2]), f)
        for s, f in enumerate(pyr.maps)
    ]
    return SupportSignature(
        centers=tuple(float(c) for c in centers),
        weights=tuple(float(w) for w in config.isoline_weights),
        iso_features=iso_features,
        in_means=in_means,
        extractor=extractor_name,
        config_digest=config.digest(),
    )


# ---------------------------------------------------------------------------
# one-shot: prediction


@dataclass
class PredictResult:
    contour: np.ndarray
    score: float
    trace: EvolutionTrace
    rejected: bool = False


def predict_query(signature, image, init_contour, config=None, extractor=None) -> PredictResult:
    """Evolve a query contour toward the support signature, then score it.

    The per-node gradient is smoothed along the contour (circular Gaussian)
    instead of clipped.  A collapsed or degenerate run is returned with
    score 0 and ``rejected=True`` rather than raised.
    """
    config = (config or oneshot_preset()).validate()
    extractor = extractor or ft.extract_pyramid_identity
    image = np.asarray(image, dtype=np.float64)
    pyramid = extractor(image)
    pshape = pyramid.base_shape
    sx, sy = _frame_scale(image.shape[:2], pshape)
    nodes = resample_equidistant(geo.validate_contour(init_contour), config.n_nodes)
    nodes = _to_padded(nodes, sx, sy)

    trace = EvolutionTrace()
    lr = config.learning_rate
    rejected = False
    for epoch in range(config.n_epochs):
        try:
            loss, grad = oneshot_loss_and_grad(nodes, pshape, pyramid, signature, config)
        except (rs.EmptyRegionError, geo.DegenerateContourError):
            trace.status = STATUS_DEGENERATE
            rejected = True
            break
        gnorm = float(np.linalg.norm(grad))
        trace.losses.append(loss)
        trace.grad_norms.append(gnorm)
        trace.learning_rates.append(lr)
        if config.snapshot_stride and epoch % config.snapshot_stride == 0:
            trace.snapshots.append((epoch, _from_padded(nodes, sx, sy)))
        if gnorm <= config.grad_threshold:
            trace.status = STATUS_CONVERGED
            break
        nodes = geo.clamp_nodes(
            nodes - lr * blur_gradient(grad, config.blur_sigma), x_max=sx, y_max=sy
        )
        try:
            nodes = resample_equidistant(clean(nodes), config.n_nodes)
        except (ContourCollapsedError, ValueError):
            trace.status = STATUS_COLLAPSED
            rejected = True
            break
        lr *= config.lr_decay

    if rejected:
        return PredictResult(_from_padded(nodes, sx, sy), 0.0, trace, rejected=True)
    masks = geo.multiscale_maps(
        nodes, pshape, config.sharpness, config.mesh_scale, "mask"
    )
    score = similarity_score(signature, masks, pyramid)
    return PredictResult(_from_padded(nodes, sx, sy), score, trace, rejected=False)

"""Training-free active-contour segmentation.

A contour (closed polygon in normalized image coordinates) is evolved by
gradient descent on statistics of multi-scale image features, using
differentiable polygon rasterization with hand-written adjoints.  The
package provides an unsupervised inside/outside separation loop, a one-shot
fit/predict procedure built on soft distance-map isolines, and a slide-level
candidate pipeline with evaluation metrics and a CLI.
"""

from .contour_ops import (
    ContourCollapsedError,
    IntersectionEvent,
    blur_gradient,
    clean,
    clip_gradient,
    find_self_intersections,
    resample_equidistant,
)
from .evolution import (
    ConfigError,
    EvolutionConfig,
    EvolutionTrace,
    MAX_SIMILARITY,
    PredictResult,
    SupportSignature,
    evolve_unsupervised,
    fit_support,
    histology_preset,
    matching_loss,
    oneshot_preset,
    predict_query,
    random_augmentation,
    real_life_preset,
    separation_loss,
    similarity_score,
)
from .features import (
    FeaturePyramid,
    WeightFormatError,
    extract_pyramid_conv,
    extract_pyramid_identity,
    load_weight_container,
    make_extractor,
    write_weight_container,
)
from .geometry import (
    DegenerateContourError,
    bilinear_resize,
    bilinear_resize_adjoint,
    block_mean,
    block_mean_adjoint,
    circle_contour,
    contour_to_binary_mask,
    contour_to_distance_map,
    contour_to_distance_map_vjp,
    contour_to_mask,
    contour_to_mask_vjp,
    load_contour,
    min_node_distance,
    multiscale_maps,
    multiscale_maps_vjp,
    oriented_angle,
    polygon_area,
    polygon_area_grad,
    save_contour,
)
from .pipeline import (
    Candidate,
    InsufficientTissueError,
    PanopticResult,
    choose_threshold,
    dice,
    extract_candidates,
    macenko_normalize,
    panoptic_quality,
    tissue_mask,
)
from .region_stats import (
    EmptyRegionError,
    isoline_features,
    isoline_sigma,
    isoline_weights,
    mask_to_distance_map,
    masked_mean,
    region_features,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

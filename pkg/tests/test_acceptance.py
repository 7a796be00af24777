"""Acceptance gate: one test per shipped guarantee, independent oracles inline.

Each test below is self-contained — it re-derives its expected answers from
first principles (brute-force geometry, shifted-slice convolutions, exhaustive
sweeps) rather than trusting any package internals — and enforces both the
accuracy bar and, where one applies, the wall-clock budget.  Run with
``pytest -v`` to get one pass/fail line per guarantee.
"""

import dataclasses
import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from softcontour import contour_ops as co
from softcontour import evolution as ev
from softcontour import features as ft
from softcontour import geometry as geo
from softcontour import pipeline as pl
from softcontour import region_stats as rs

from _synth import bare_blob_patch, disk_image, tubule_patch

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# shared oracle helpers


def _fd_gradient(loss, nodes, h):
    """Central finite differences of a scalar loss, coordinate by coordinate."""
    grad = np.zeros_like(nodes)
    for i in range(nodes.shape[0]):
        for j in range(2):
            p = nodes.copy()
            p[i, j] += h
            m = nodes.copy()
            m[i, j] -= h
            grad[i, j] = (loss(p) - loss(m)) / (2 * h)
    return grad


def _distance_routing(nodes, grid, sharpness):
    """The two discrete choices inside the distance kernel's subgradient."""
    dist, argmin = geo.node_distance_field(nodes, grid)
    star = int(np.argmax(geo.contour_to_mask(nodes, grid, sharpness) * dist))
    return star, argmin


def _switch_coords(nodes, grid, sharpness, h):
    """Coordinates whose argmax-pixel/argmin-node routing flips under +/-h."""
    switches = np.zeros(nodes.shape, dtype=bool)
    base_star, base_argmin = _distance_routing(nodes, grid, sharpness)
    for i in range(nodes.shape[0]):
        for j in range(2):
            for sgn in (+1, -1):
                p = nodes.copy()
                p[i, j] += sgn * h
                star, argmin = _distance_routing(p, grid, sharpness)
                if star != base_star or np.any(argmin != base_argmin):
                    switches[i, j] = True
    return switches


def _relative_errors(fd, an):
    denom = np.maximum(np.abs(fd), np.abs(an))
    rel = np.zeros_like(denom)
    live = denom > 1e-7
    rel[live] = np.abs(fd - an)[live] / denom[live]
    return rel, live


def _smooth_image(seed, size, channels=3):
    """Band-limited random image in roughly [0, 1]."""
    noise = RNG(seed).standard_normal((size, size, channels))
    img = gaussian_filter(noise, sigma=(3.0, 3.0, 0.0))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def _contour_dice(contour, gt_mask):
    pred = geo.contour_to_binary_mask(contour, gt_mask.shape)
    inter = float(np.logical_and(pred, gt_mask).sum())
    return 2.0 * inter / (pred.sum() + gt_mask.sum())


# ---------------------------------------------------------------------------
# 1. soft rasterization converges to the hard disk


def test_01_soft_mask_converges_to_rasterized_disk():
    t0 = time.perf_counter()
    radius, shape = 0.3, (128, 128)
    pts = geo.pixel_centers(shape).reshape(shape + (2,))
    hard = (np.hypot(pts[..., 0] - 0.5, pts[..., 1] - 0.5) <= radius).astype(float)

    def l1(n_nodes, sharpness):
        circle = geo.circle_contour(radius=radius, n_nodes=n_nodes)
        mask = geo.contour_to_mask(circle, shape, sharpness)
        return float(np.abs(mask - hard).mean())

    sharpness_sweep = [l1(100, k) for k in (1e1, 1e2, 1e3, 1e4, 1e5)]
    node_sweep = [l1(n, 1e5) for n in (10, 25, 50, 100)]

    assert sharpness_sweep[-1] < 0.01  # headline fidelity at n=100, k=1e5
    assert all(a >= b - 1e-12 for a, b in zip(sharpness_sweep, sharpness_sweep[1:]))
    assert all(a >= b - 1e-12 for a, b in zip(node_sweep, node_sweep[1:]))
    assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# 2. every hand-written gradient matches central finite differences


def test_02_every_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    shape, sharpness = (32, 32), 1e3
    rng = RNG(7)

    # soft mask: smooth everywhere, full gradient against FD
    nodes = geo.circle_contour(radius=0.3, n_nodes=16)
    cot = RNG(0).standard_normal(shape)
    grad = geo.contour_to_mask_vjp(nodes, shape, sharpness, cot)
    fd = _fd_gradient(
        lambda c: float((geo.contour_to_mask(c, shape, sharpness) * cot).sum()), nodes, 1e-5
    )
    rel, live = _relative_errors(fd, grad)
    assert rel[live].max() < 1e-3

    # distance map: exclude coordinates whose discrete routing flips inside
    # the FD stencil; every remaining coordinate must pass
    nodes = geo.circle_contour(radius=0.3, n_nodes=16, phase=0.17)
    cot = RNG(3).standard_normal(shape)
    grad = geo.contour_to_distance_map_vjp(nodes, shape, sharpness, cot)
    fd = _fd_gradient(
        lambda c: float((geo.contour_to_distance_map(c, shape, sharpness) * cot).sum()),
        nodes, 1e-5,
    )
    rel, live = _relative_errors(fd, grad)
    keep = live & ~_switch_coords(nodes, shape, sharpness, 1e-5)
    assert keep.sum() >= nodes.size // 2
    assert rel[keep].max() < 1e-3

    # multiscale maps, both kernels, exact and meshed modes.  The FD step is
    # small because a coarse-grid pixel can sit mid-transition of the
    # sharpened tanh, where the third derivative (~sharpness^3) makes larger
    # stencils overstate the truncation error.
    nodes = geo.circle_contour(center=(0.47, 0.52), radius=0.3, n_nodes=16, phase=0.3)
    cots = [rng.standard_normal(geo.scale_shape(shape, s)) for s in range(geo.N_SCALES)]
    for kind in ("mask", "distance"):
        for mesh in (0, 2):
            def loss(c):
                maps = geo.multiscale_maps(c, shape, sharpness, mesh, kind)
                return sum(float((m * ct).sum()) for m, ct in zip(maps, cots))

            grad = geo.multiscale_maps_vjp(nodes, shape, sharpness, mesh, kind, cots)
            fd = _fd_gradient(loss, nodes, 3e-7)
            rel, live = _relative_errors(fd, grad)
            keep = live
            if kind == "distance":
                grid = geo.scale_shape(shape, mesh)
                keep = live & ~_switch_coords(nodes, grid, sharpness, 3e-7)
            assert keep.sum() >= nodes.size // 2, (kind, mesh)
            assert rel[keep].max() < 1e-3, (kind, mesh)

    # polygon area: analytic gradient of the shoelace sum
    poly = RNG(5).random((16, 2))
    _, grad = geo.polygon_area_grad(poly)
    fd = _fd_gradient(lambda c: geo.polygon_area_grad(c)[0], poly, 1e-5)
    rel, live = _relative_errors(fd, grad)
    assert rel[live].max() < 1e-3

    # linear resampling adjoints: <A x, c> == <x, A^T c> both directions
    x = rng.standard_normal(shape)
    for out_shape in ((16, 16), (64, 64)):
        c = rng.standard_normal(out_shape)
        lhs = float((geo.bilinear_resize(x, out_shape) * c).sum())
        rhs = float((x * geo.bilinear_resize_adjoint(c, shape)).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)
    c = rng.standard_normal((16, 16))
    lhs = float((geo.block_mean(x, (16, 16)) * c).sum())
    rhs = float((x * geo.block_mean_adjoint(c, shape)).sum())
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)

    # end-to-end losses on 16-node contours over an identity pyramid
    img = _smooth_image(0, 32)
    pyr = ft.extract_pyramid_identity(img)
    nodes = geo.circle_contour(center=(0.48, 0.52), radius=0.31, n_nodes=16, phase=0.3)
    cfg = ev.EvolutionConfig(sharpness=sharpness, mesh_scale=0, area_weight=0.7).validate()
    _, grad = ev.unsupervised_loss_and_grad(nodes, shape, pyr, cfg)
    fd = _fd_gradient(
        lambda c: ev.unsupervised_loss_and_grad(c, shape, pyr, cfg)[0], nodes, 1e-5
    )
    rel, live = _relative_errors(fd, grad)
    assert live.sum() >= nodes.size // 2
    assert rel[live].max() < 1e-2

    img = _smooth_image(1, 32)
    pyr = ft.extract_pyramid_identity(img)
    iso_rng = RNG(5)
    sig = ev.SupportSignature(
        centers=(0.0, 1.0), weights=(0.6, 0.4),
        iso_features=[[iso_rng.standard_normal(3) for _ in range(geo.N_SCALES)]
                      for _ in range(2)],
        in_means=[],
    )
    nodes = geo.circle_contour(center=(0.47, 0.51), radius=0.3, n_nodes=16, phase=0.2)
    cfg = ev.EvolutionConfig(sharpness=sharpness, mesh_scale=0).validate()
    _, grad = ev.oneshot_loss_and_grad(nodes, shape, pyr, sig, cfg)
    fd = _fd_gradient(
        lambda c: ev.oneshot_loss_and_grad(c, shape, pyr, sig, cfg)[0], nodes, 1e-5
    )
    rel, live = _relative_errors(fd, grad)
    keep = live & ~_switch_coords(nodes, shape, sharpness, 1e-5)
    assert keep.sum() >= nodes.size // 2
    assert rel[keep].max() < 1e-2

    assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------------------
# 3. self-intersection finder vs the quadratic all-pairs oracle


def _all_pairs_crossings(nodes):
    """O(n^2) brute-force crossing finder with the same epsilon semantics."""
    n = len(nodes)
    nxt = np.roll(nodes, -1, axis=0)
    found = []
    for i in range(n):
        for j in range(i + 1, n):
            if (i - j) % n in (1, n - 1):
                continue
            p0, p1, q0, q1 = nodes[i], nxt[i], nodes[j], nxt[j]
            rx, ry = p1[0] - p0[0], p1[1] - p0[1]
            sx, sy = q1[0] - q0[0], q1[1] - q0[1]
            denom = rx * sy - ry * sx
            if abs(denom) <= co.EPS:
                continue
            dx, dy = q0[0] - p0[0], q0[1] - p0[1]
            t = (dx * sy - dy * sx) / denom
            u = (dx * ry - dy * rx) / denom
            if co.EPS < t < 1.0 - co.EPS and co.EPS < u < 1.0 - co.EPS:
                found.append((i, j, p0[0] + t * rx, p0[1] + t * ry, t, u))
    found.sort(key=lambda e: (e[0], e[4]))
    return found


def test_03_self_intersections_match_quadratic_oracle():
    t0 = time.perf_counter()
    rng = RNG(10)
    for _ in range(1000):
        nodes = rng.random((50, 2))
        got = co.find_self_intersections(nodes)
        want = _all_pairs_crossings(nodes)
        assert [(e.edge_i, e.edge_j) for e in got] == [(i, j) for i, j, *_ in want]
        got_arr = np.array([(*e.point, e.t_i, e.t_j) for e in got]).reshape(-1, 4)
        want_arr = np.array([(px, py, t, u) for _, _, px, py, t, u in want]).reshape(-1, 4)
        assert np.allclose(got_arr, want_arr, atol=1e-9)

        cleaned = co.clean(nodes)
        assert co.find_self_intersections(cleaned) == []
        np.testing.assert_array_equal(co.clean(cleaned), cleaned)
    assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------------------
# 4. normalized distance transform vs brute force, bitwise


def _brute_force_edt(mask):
    """All-pairs nearest-background distance (integer arithmetic, then sqrt)."""
    fg = np.argwhere(mask)
    bg = np.argwhere(~mask)
    d2 = ((fg[:, None, :] - bg[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    out = np.zeros(mask.shape)
    out[mask] = np.sqrt(d2)
    return out


def test_04_distance_transform_matches_brute_force():
    t0 = time.perf_counter()
    rng = RNG(7)
    checked = 0
    for _ in range(200):
        mask = rng.random((32, 32)) < rng.uniform(0.2, 0.8)
        if not mask.any() or mask.all():
            continue
        brute = _brute_force_edt(mask)
        np.testing.assert_array_equal(rs.mask_to_distance_map(mask), brute / brute.max())
        checked += 1
    assert checked >= 195
    assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------------------
# 5. unsupervised segmentation of a contrast disk from three starts


def test_05_identity_disk_segmentation_from_three_inits():
    t0 = time.perf_counter()
    img, gt = disk_image(size=128, radius=0.25, bg=0.2, fg=0.9)
    cfg = ev.real_life_preset().validate()
    inits = {
        "enclosing": geo.circle_contour(radius=0.4, n_nodes=cfg.n_nodes),
        "inside": geo.circle_contour(radius=0.18, n_nodes=cfg.n_nodes),
        "partial": geo.circle_contour(center=(0.42, 0.5), radius=0.25, n_nodes=cfg.n_nodes),
    }
    for name, init in inits.items():
        contour, trace = ev.evolve_unsupervised(img, init, cfg)
        assert trace.n_epochs <= 70, name
        assert _contour_dice(contour, gt) > 0.95, name
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------------
# 6. area reward inflates the contour until the frame clamps it


def test_06_area_reward_inflates_contour_until_frame_clamp():
    t0 = time.perf_counter()
    img = np.full((32, 32), 0.5)
    init = geo.circle_contour(radius=0.2, n_nodes=24)
    cfg = ev.EvolutionConfig(
        n_nodes=24, n_epochs=40, area_weight=5.0, learning_rate=5e-2,
        lr_decay=1.0, grad_threshold=0.0, snapshot_stride=1,
    )
    contour, trace = ev.evolve_unsupervised(img, init, cfg)
    areas = [geo.polygon_area_grad(nodes)[0] for _, nodes in trace.snapshots]
    areas.append(geo.polygon_area_grad(contour)[0])
    assert np.all(np.diff(areas) > 0)  # strictly grows every epoch
    assert areas[-1] > 0.9             # ends pressed into the frame
    assert contour[:, 0].min() < 1e-9 and contour[:, 0].max() > 1 - 1e-9
    assert contour[:, 1].min() < 1e-9 and contour[:, 1].max() > 1 - 1e-9
    assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------------------
# 7. adjacent isoline bands sum to exactly one half at gap midpoints


def test_07_isoline_band_midpoint_sums_are_half():
    for centers in ([0.0, 1.0], [0.0, 0.5, 1.0]):
        sigma = rs.isoline_sigma(centers)
        for a, b, sa, sb in zip(centers, centers[1:], sigma, sigma[1:]):
            mid = (a + b) / 2.0
            total = np.exp(-((mid - a) ** 2) / sa) + np.exp(-((mid - b) ** 2) / sb)
            assert total == pytest.approx(0.5, abs=1e-12), centers


# ---------------------------------------------------------------------------
# 8. one-shot transfer: fit one ring structure, score and segment a batch


def test_08_one_shot_tubule_fit_and_batch_predict():
    t0 = time.perf_counter()
    weight_rng = RNG(0)
    weights = {}
    for name, shape in ft.conv_tensor_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[:3]))
            weights[name] = weight_rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            weights[name] = np.zeros(shape)

    def extractor(img):
        return ft.extract_pyramid_conv(img, weights)

    cfg = dataclasses.replace(
        ev.oneshot_preset(),
        n_aug=20, n_epochs=200, learning_rate=10.0, grad_threshold=1e-4,
        isoline_weights=(0.9, 0.1), mesh_scale=2, sharpness=1e5, seed=0,
    ).validate()

    rng = RNG(42)
    support_img, support_mask = tubule_patch(rng)
    sig = ev.fit_support(
        support_img, support_mask, config=cfg, extractor=extractor, extractor_name="conv"
    )

    init = geo.circle_contour(radius=0.22, n_nodes=cfg.n_nodes)
    dices, pos_scores, neg_scores = [], [], []
    for _ in range(20):
        query_img, query_gt = tubule_patch(rng)
        res = ev.predict_query(sig, query_img, init, config=cfg, extractor=extractor)
        pos_scores.append(res.score)
        dices.append(_contour_dice(res.contour, query_gt))
    for _ in range(20):
        res = ev.predict_query(sig, bare_blob_patch(rng), init, config=cfg, extractor=extractor)
        neg_scores.append(res.score)

    assert np.mean(dices) > 0.8

    scores = np.array(pos_scores + neg_scores)
    labels = np.array([True] * 20 + [False] * 20)
    threshold = pl.choose_threshold(scores, labels)
    accuracy = float(((scores >= threshold) == labels).mean())
    assert accuracy > 0.8

    assert time.perf_counter() - t0 < 300.0


# ---------------------------------------------------------------------------
# 9. similarity score peaks at 31/16 on identical inputs and never exceeds it


def test_09_similarity_score_peaks_at_and_never_exceeds_bound():
    assert ev.MAX_SIMILARITY == 31.0 / 16.0

    img = _smooth_image(7, 32)
    pyr = ft.extract_pyramid_identity(img)
    contour = geo.circle_contour(radius=0.3, n_nodes=24)
    masks = geo.multiscale_maps(contour, (32, 32), 1e4, 0, "mask")
    in_means = [rs.masked_mean(m, f) for m, f in zip(masks, pyr.maps)]
    sig = ev.SupportSignature(
        centers=(0.0, 1.0), weights=(0.5, 0.5), iso_features=[], in_means=in_means
    )
    score = ev.similarity_score(sig, masks, pyr)
    assert score == pytest.approx(ev.MAX_SIMILARITY, abs=1e-6)

    rng = RNG(12)
    for _ in range(20):
        pyr = ft.extract_pyramid_identity(rng.random((32, 32, 3)))
        sig = ev.SupportSignature(
            centers=(0.0, 1.0), weights=(0.5, 0.5), iso_features=[],
            in_means=[rng.standard_normal(3) for _ in range(geo.N_SCALES)],
        )
        assert abs(ev.similarity_score(sig, masks, pyr)) <= ev.MAX_SIMILARITY + 1e-6


# ---------------------------------------------------------------------------
# 10. coarse-mesh maps match the exact ones and are much cheaper


def test_10_mesh_trick_matches_exact_maps_and_is_faster():
    circle = geo.circle_contour(radius=0.3, n_nodes=100)
    shape = (256, 256)
    for kind in ("mask", "distance"):
        exact = geo.multiscale_maps(circle, shape, 1e5, 0, kind)
        meshed = geo.multiscale_maps(circle, shape, 1e5, 2, kind)
        for s, (a, b) in enumerate(zip(exact, meshed)):
            assert np.abs(a - b).mean() < 0.05, (kind, s)

    def best_time(mesh_scale):
        times = []
        for _ in range(3):
            start = time.perf_counter()
            for kind in ("mask", "distance"):
                geo.multiscale_maps(circle, shape, 1e5, mesh_scale, kind)
            times.append(time.perf_counter() - start)
        return min(times)

    assert best_time(0) / best_time(2) >= 4.0


# ---------------------------------------------------------------------------
# 11. conv feature pyramid vs a naive shifted-slice forward pass


def _naive_conv(x, kernel, bias):
    h, w, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, w, kernel.shape[3])) + bias
    for dy in range(3):
        for dx in range(3):
            out += xp[dy : dy + h, dx : dx + w] @ kernel[dy, dx]
    return np.maximum(out, 0.0)


def _naive_pool(x):
    h, w = x.shape[:2]
    out = np.empty((h // 2, w // 2) + x.shape[2:])
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = x[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(0, 1))
    return out


def test_11_conv_pyramid_matches_naive_forward():
    t0 = time.perf_counter()
    rng = RNG(6)
    weights = {
        name: (
            rng.standard_normal(shape) / np.sqrt(np.prod(shape[:3]))
            if len(shape) == 4
            else rng.standard_normal(shape) * 0.01
        )
        for name, shape in ft.conv_tensor_shapes().items()
    }
    img = rng.random((32, 32, 3))

    x = (img - ft.IMAGENET_MEAN) / ft.IMAGENET_STD
    want = []
    for b, (n_conv, _) in enumerate(ft.CONV_BLOCKS, start=1):
        for c in range(1, n_conv + 1):
            x = _naive_conv(x, weights[f"block{b}.conv{c}.weight"], weights[f"block{b}.conv{c}.bias"])
        want.append(x)
        if b < len(ft.CONV_BLOCKS):
            x = _naive_pool(x)

    pyramid = ft.extract_pyramid_conv(img, weights)
    for got, ref in zip(pyramid.maps, want):
        assert got.shape == ref.shape
        scale = max(float(np.abs(ref).max()), 1e-12)
        assert float(np.abs(got - ref).max()) / scale < 1e-4
    assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------------------
# 12. instance metrics: exact arithmetic and an exhaustive threshold oracle


def _f1_at(scores, labels, threshold):
    predicted = np.asarray(scores) >= threshold
    labels = np.asarray(labels, bool)
    tp = int((predicted & labels).sum())
    fp = int((predicted & ~labels).sum())
    fn = int((~predicted & labels).sum())
    return 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0


def _exhaustive_threshold(scores, labels):
    uniq = np.unique(scores)
    grid = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0])
    f1s = [_f1_at(scores, labels, t) for t in grid]
    return float(grid[int(np.argmax(f1s))])  # argmax takes the first maximum


def test_12_instance_metrics_arithmetic():
    # one matched pair at IoU exactly 0.8 plus one missed instance:
    # quality = 0.8 / (1 + 0/2 + 1/2) = 0.5333...
    pred = np.zeros((10, 20), bool)
    pred[0, 0:9] = True
    gt_a = np.zeros((10, 20), bool)
    gt_a[0, 1:10] = True
    gt_b = np.zeros((10, 20), bool)
    gt_b[8, 0:5] = True
    result = pl.panoptic_quality([pred], [gt_a, gt_b])
    assert result.pq == 0.8 / 1.5
    assert result.matches == [(0, 0, 0.8)]
    assert result.precision == 1.0
    assert result.recall == 0.5
    assert result.f1 == 2.0 / 3.0

    # overlap conventions
    a = np.zeros((8, 8), bool)
    a[2:6, 2:6] = True
    b = np.zeros((8, 8), bool)
    b[2:6, 4:8] = True
    assert pl.dice(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0
    assert pl.dice(a, ~a) == 0.0
    assert pl.dice(a, b) == 2 * 8 / (16 + 16)
    assert pl.dice(a, b) == pl.dice(b, a)
    assert pl.dice(a, a) == 1.0

    # threshold selection equals the exhaustive sweep on random score sets
    rng = RNG(20)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        scores = np.round(rng.random(n), 3)
        labels = rng.random(n) < 0.5
        if not labels.any():
            labels[int(rng.integers(n))] = True
        assert pl.choose_threshold(scores, labels) == _exhaustive_threshold(scores, labels)

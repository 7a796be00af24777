"""Polygon maintenance operators used between gradient steps.

``find_self_intersections`` locates all transversal crossings between
non-adjacent edges with a sweep over edge endpoints: edges enter an active
list at their left endpoint and leave at their right endpoint, and each
entering edge is tested only against the currently active ones.  Every
crossing pair overlaps in x, so each pair is examined exactly once; for the
nearly-simple polygons produced by gradient descent the active list stays
small and the sweep is dominated by the O(n log n) event sort.  Exact
arithmetic is not attempted: orientation and parameter tests use a 1e-12
epsilon with deterministic tie-breaks.

``clean`` splits a self-crossing polygon at its crossing points into simple
loops and keeps the one with the largest unsigned area (ties go to the loop
containing the lowest original node index), re-oriented counter-clockwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ensure_ccw, signed_area, validate_contour

EPS = 1e-12
COLLAPSE_AREA = 1e-8


class ContourCollapsedError(ValueError):
    """Raised when cleaning leaves no loop with meaningful area."""


@dataclass(frozen=True)
class IntersectionEvent:
    """A transversal crossing between non-adjacent edges i < j.

    ``t_i`` and ``t_j`` are the parametric positions of the crossing on each
    edge, both strictly inside (0, 1).
    """

    edge_i: int
    edge_j: int
    point: tuple
    t_i: float
    t_j: float


def _segment_crossing(p0, p1, q0, q1):
    """Parametric crossing of two open segments, or None.

    Returns (t, u, point) with t, u in (EPS, 1 - EPS).  Parallel and
    collinear configurations (|denominator| <= EPS) yield no event.
    """
    rx, ry = p1[0] - p0[0], p1[1] - p0[1]
    sx, sy = q1[0] - q0[0], q1[1] - q0[1]
    denom = rx * sy - ry * sx
    if abs(denom) <= EPS:
        return None
    dx, dy = q0[0] - p0[0], q0[1] - p0[1]
    t = (dx * sy - dy * sx) / denom
    u = (dx * ry - dy * rx) / denom
    if t <= EPS or t >= 1.0 - EPS or u <= EPS or u >= 1.0 - EPS:
        return None
    return t, u, (p0[0] + t * rx, p0[1] + t * ry)


def _adjacent(i, j, n):
    return (i - j) % n in (1, n - 1)


def find_self_intersections(nodes) -> list:
    """All transversal crossings between non-adjacent edges, sorted by (i, t_i).

    Shared endpoints of adjacent edges are not events.
    """
    nodes = validate_contour(nodes)
    n = len(nodes)
    nxt = np.roll(nodes, -1, axis=0)
    x_lo = np.minimum(nodes[:, 0], nxt[:, 0])
    x_hi = np.maximum(nodes[:, 0], nxt[:, 0])
    # (x, kind, edge): inserts (kind 0) before removals (kind 1) on ties
    events = sorted(
        [(x_lo[i], 0, i) for i in range(n)] + [(x_hi[i], 1, i) for i in range(n)]
    )
    active: dict[int, None] = {}
    found = []
    for _, kind, e in events:
        if kind == 1:
            active.pop(e, None)
            continue
        p0, p1 = nodes[e], nxt[e]
        for f in active:
            if _adjacent(e, f, n):
                continue
            hit = _segment_crossing(p0, p1, nodes[f], nxt[f])
            if hit is None:
                continue
            t_e, t_f, pt = hit
            i, j = (f, e) if f < e else (e, f)
            ti, tj = (t_f, t_e) if f < e else (t_e, t_f)
            found.append(IntersectionEvent(i, j, pt, ti, tj))
        active[e] = None
    found.sort(key=lambda ev: (ev.edge_i, ev.t_i))
    return found


def _split_loops(nodes, events):
    """Split a self-crossing polygon at its crossing points into loops.

    Walks the augmented vertex sequence (original nodes plus crossing points
    in edge order) keeping a stack of open crossings; when a crossing is met
    the second time, the chunk since its first occurrence is cut out as one
    loop.  Crossings opened inside a removed chunk are discarded, which
    leaves their partner as a plain subdivision point.  Returns a list of
    ``(points, min_original_index)`` pairs.
    """
    n = len(nodes)
    per_edge: list[list] = [[] for _ in range(n)]
    for cid, ev in enumerate(events):
        per_edge[ev.edge_i].append((ev.t_i, cid, ev.point))
        per_edge[ev.edge_j].append((ev.t_j, cid, ev.point))
    seq = []  # (point, original_index or None, crossing_id or None)
    for i in range(n):
        seq.append((tuple(nodes[i]), i, None))
        for t, cid, pt in sorted(per_edge[i]):
            seq.append((pt, None, cid))

    loops = []
    path: list = []
    open_pos: dict[int, int] = {}
    for entry in seq:
        cid = entry[2]
        if cid is None:
            path.append(entry)
            continue
        if cid not in open_pos:
            open_pos[cid] = len(path)
            path.append(entry)
            continue
        pos = open_pos.pop(cid)
        chunk = path[pos:]
        del path[pos:]
        open_pos = {c: p for c, p in open_pos.items() if p < pos}
        path.append(entry)
        loops.append(chunk)
    loops.append(path)

    out = []
    for chunk in loops:
        pts = np.array([e[0] for e in chunk])
        if len(pts) >= 2:  # drop consecutive (near-)duplicates
            keep = np.ones(len(pts), dtype=bool)
            keep[1:] = np.hypot(*(pts[1:] - pts[:-1]).T) > EPS
            if keep.sum() >= 2 and np.hypot(*(pts[keep][0] - pts[keep][-1])) <= EPS:
                keep[np.nonzero(keep)[0][-1]] = False
            pts = pts[keep]
        orig = [e[1] for e in chunk if e[1] is not None]
        out.append((pts, min(orig) if orig else n))
    return out


def clean(nodes) -> np.ndarray:
    """Remove self-crossings, keeping the largest-area simple loop, CCW.

    A polygon with no crossings is returned unchanged.  If every loop has an
    unsigned area below ``COLLAPSE_AREA`` the contour has collapsed and a
    :class:`ContourCollapsedError` is raised.
    """
    nodes = validate_contour(nodes)
    events = find_self_intersections(nodes)
    if not events:
        return nodes
    loops = [(pts, oi) for pts, oi in _split_loops(nodes, events) if len(pts) >= 3]
    areas = [abs(signed_area(pts)) for pts, _ in loops]
    if not areas or max(areas) < COLLAPSE_AREA:
        raise ContourCollapsedError("contour collapsed")
    best_area = max(areas)
    candidates = [k for k, a in enumerate(areas) if a >= best_area - EPS]
    winner = min(candidates, key=lambda k: loops[k][1])
    return ensure_ccw(loops[winner][0])


def clip_gradient(grad, max_norm) -> np.ndarray:
    """Rescale any per-node vector whose L2 norm exceeds ``max_norm``."""
    grad = np.asarray(grad, dtype=np.float64)
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norms = np.hypot(grad[:, 0], grad[:, 1])
    scale = np.ones_like(norms)
    over = norms > max_norm
    scale[over] = max_norm / norms[over]
    return grad * scale[:, None]


def blur_gradient(grad, sigma_nodes) -> np.ndarray:
    """Circular Gaussian smoothing of a per-node field along the node index.

    The kernel has standard deviation ``sigma_nodes`` (in nodes), is
    truncated at 3 sigma, normalized to unit sum, and wraps around the
    closed contour.  ``sigma_nodes = 0`` is the identity.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if sigma_nodes < 0:
        raise ValueError("sigma_nodes must be non-negative")
    if sigma_nodes == 0:
        return grad.copy()
    n = len(grad)
    radius = int(np.ceil(3.0 * sigma_nodes))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * sigma_nodes**2))
    kernel /= kernel.sum()
    idx = (np.arange(n)[:, None] - offsets[None, :]) % n
    return np.einsum("k,nkd->nd", kernel, grad[idx])


def resample_equidistant(nodes, n_out) -> np.ndarray:
    """Uniform arc-length resampling of the closed polygon, anchored at node 0.

    Output nodes sit on the input polyline at arc positions ``j * P / n_out``
    and the result is re-oriented counter-clockwise.
    """
    nodes = validate_contour(nodes)
    if n_out < 3:
        raise ValueError("need at least 3 output nodes")
    closed = np.concatenate([nodes, nodes[:1]], axis=0)
    seg = np.hypot(*(closed[1:] - closed[:-1]).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    perimeter = arc[-1]
    if perimeter <= EPS:
        raise ValueError("polygon has zero perimeter")
    targets = np.arange(n_out) * (perimeter / n_out)
    out = np.stack(
        [np.interp(targets, arc, closed[:, 0]), np.interp(targets, arc, closed[:, 1])],
        axis=1,
    )
    return ensure_ccw(out)

"""Global camera positions from pairwise and camera-to-landmark directions.

Measurements are unit direction vectors in the world frame: either "camera a
sees camera b along u" (derived from a verified relative pose and the solved
global rotations) or "camera a sees landmark t along u" (derived from a
keypoint ray).  Outlier directions are rejected by projecting all measurements
onto many seeded random axes and scoring how often each measurement disagrees
with a greedy feedback-minimizing node order.  Survivors enter a robust
nonlinear solve over camera and landmark positions with a
normalized-difference residual under a Huber loss.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import Disconnected, Underconstrained
from .geometry import normalized
from .seeding import rng_for

KIND_CAMERA = "camera-camera"
KIND_LANDMARK = "camera-landmark"


@dataclass(frozen=True)
class DirectionMeasurement:
    """Unit world-frame direction from one endpoint toward the other.

    For ``camera-camera`` both endpoints are camera ids and the direction
    points from camera ``a`` toward camera ``b``.  For ``camera-landmark``
    endpoint ``b`` is a landmark key and the direction points from the camera
    toward the landmark.
    """

    kind: str
    a: int
    b: int
    direction: np.ndarray

    def __post_init__(self):
        if self.kind not in (KIND_CAMERA, KIND_LANDMARK):
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.kind == KIND_CAMERA and self.a == self.b:
            raise ValueError("endpoints must be distinct")
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit norm, got {norm}")

    def node_a(self) -> tuple:
        return ("c", self.a)

    def node_b(self) -> tuple:
        return ("c", self.b) if self.kind == KIND_CAMERA else ("l", self.b)


@dataclass(frozen=True)
class TranslationConfig:
    """Knobs for outlier filtering and the position solve.

    ``huber_delta`` of ``None`` disables the robust loss (plain least
    squares); the default 0.1 corresponds to roughly a 5.7 degree direction
    error at the chordal-distance scale.
    """

    n_projections: int = 48
    mfas_rejection_ratio: float = 0.1
    huber_delta: float | None = 0.1
    init_trials: int = 50
    max_iterations: int = 200
    landmark_tracks_per_camera: int = 3

    def __post_init__(self):
        if self.n_projections <= 0 or self.init_trials <= 0:
            raise ValueError("n_projections and init_trials must be positive")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive or None")


@dataclass(frozen=True)
class TranslationSolution:
    """Camera positions (gauge: camera 0 at origin, unit mean baseline)."""

    positions: np.ndarray
    landmarks: dict
    cost: float
    measurements: tuple


def camera_direction_measurements(two_view_measurements: list,
                                  rotations: list) -> list:
    """World-frame camera-to-camera directions from verified pairs.

    A verified pair (i, j) carries the unit translation of the pose mapping
    frame i into frame j; with the global camera-to-world rotation of j this
    yields the world-frame direction from camera i toward camera j.
    """
    out = []
    for m in two_view_measurements:
        i, j = m.pair
        baseline = -(rotations[j] @ m.direction)
        out.append(DirectionMeasurement(KIND_CAMERA, i, j, normalized(baseline)))
    return out


def mfas_projection_axes(n_projections: int, seed: int) -> np.ndarray:
    """Seeded random unit axes used for the 1-D ordering passes."""
    rng = rng_for(seed, "mfas-projections")
    axes = rng.normal(size=(n_projections, 3))
    return axes / np.linalg.norm(axes, axis=1, keepdims=True)


def mfas_projection_pass(axis: np.ndarray, ends_a: np.ndarray,
                         ends_b: np.ndarray, dirs: np.ndarray,
                         n_nodes: int) -> tuple:
    """Violation and total weight charged to each measurement on one axis.

    Pure function of its arguments so passes for different axes can run as
    independent tasks; results are reduced by summation in axis order.
    """
    w = dirs @ axis
    tails = np.where(w >= 0.0, ends_a, ends_b)
    heads = np.where(w >= 0.0, ends_b, ends_a)
    weights = np.abs(w)
    order_pos = _greedy_order(n_nodes, tails, heads, weights)
    backward = order_pos[tails] > order_pos[heads]
    return np.where(backward, weights, 0.0), weights


def mfas_filter(measurements: list, n_projections: int = 48, seed: int = 0,
                rejection_ratio: float = 0.1, map_fn=map) -> tuple:
    """Reject direction outliers by 1-D ordering consistency.

    Every measurement is projected onto ``n_projections`` seeded random unit
    axes; each projection induces weighted order constraints between the two
    endpoints.  A greedy source-first order approximates the minimum-feedback
    order and the weight of arcs pointing backward in it is charged to their
    measurements.  A measurement whose accumulated violation exceeds
    ``rejection_ratio`` of its accumulated projection weight is removed.

    ``map_fn`` may be a parallel map; per-axis results are combined in axis
    order so the outcome does not depend on scheduling.

    Returns:
        (kept measurements, violation fraction array aligned with the input).
    """
    if not measurements:
        raise ValueError("need at least one measurement")
    nodes = sorted({m.node_a() for m in measurements}
                   | {m.node_b() for m in measurements})
    node_index = {node: k for k, node in enumerate(nodes)}
    n_nodes = len(nodes)
    ends_a = np.array([node_index[m.node_a()] for m in measurements])
    ends_b = np.array([node_index[m.node_b()] for m in measurements])
    dirs = np.array([m.direction for m in measurements])

    axes = mfas_projection_axes(n_projections, seed)
    violation = np.zeros(len(measurements))
    total_weight = np.zeros(len(measurements))
    passes = map_fn(
        functools.partial(mfas_projection_pass, ends_a=ends_a, ends_b=ends_b,
                          dirs=dirs, n_nodes=n_nodes),
        list(axes))
    for viol, weights in passes:
        violation += viol
        total_weight += weights

    frac = violation / np.maximum(total_weight, 1e-30)
    kept = [m for m, f in zip(measurements, frac) if f <= rejection_ratio]
    return kept, frac


def _greedy_order(n_nodes: int, tails: np.ndarray, heads: np.ndarray,
                  weights: np.ndarray) -> np.ndarray:
    """Greedy feedback-minimizing order; returns the position of each node.

    Picks a node with zero remaining in-weight when one exists (largest
    out-weight first, smallest id on ties), otherwise the node with the best
    (1 + out) / (1 + in) weight ratio.  Source-first selection reproduces a
    topological order on acyclic inputs, so consistent measurements incur
    zero violation.
    """
    in_w = np.zeros(n_nodes)
    out_w = np.zeros(n_nodes)
    np.add.at(in_w, heads, weights)
    np.add.at(out_w, tails, weights)
    remaining = np.ones(n_nodes, dtype=bool)
    order_pos = np.empty(n_nodes, dtype=int)
    for position in range(n_nodes):
        active = np.nonzero(remaining)[0]
        act_in = in_w[active]
        sources = active[act_in <= 1e-12]
        if len(sources):
            pick = int(sources[int(np.argmax(out_w[sources]))])
        else:
            ratio = (1.0 + out_w[active]) / (1.0 + act_in)
            pick = int(active[int(np.argmax(ratio))])
        order_pos[pick] = position
        remaining[pick] = False
        # retire arcs between the removed node and still-active nodes
        from_pick = (tails == pick) & remaining[heads]
        into_pick = (heads == pick) & remaining[tails]
        np.add.at(in_w, heads[from_pick], -weights[from_pick])
        np.add.at(out_w, tails[into_pick], -weights[into_pick])
    return order_pos


def _huber_total(res_norms: np.ndarray, delta) -> float:
    if delta is None:
        return float(np.sum(res_norms * res_norms))
    return float(np.sum(np.where(res_norms <= delta,
                                 res_norms * res_norms,
                                 delta * (2.0 * res_norms - delta))))


def translation_cost(measurements: list, positions: np.ndarray,
                     landmarks: dict, huber_delta=0.1) -> float:
    """Robust chordal cost of a candidate solution (shift/scale invariant)."""
    res_norms = []
    for m in measurements:
        p_a = np.asarray(positions[m.a], dtype=float)
        p_b = (np.asarray(positions[m.b], dtype=float)
               if m.kind == KIND_CAMERA else np.asarray(landmarks[m.b]))
        diff = p_b - p_a
        norm = np.linalg.norm(diff)
        if norm < 1e-15:
            res_norms.append(2.0)  # coincident endpoints: maximal disagreement
        else:
            res_norms.append(float(np.linalg.norm(m.direction - diff / norm)))
    return _huber_total(np.array(res_norms), huber_delta)


def _check_connected(measurements: list, n_cameras: int, n_nodes: int,
                     node_slot: dict):
    adjacency = [[] for _ in range(n_nodes)]
    for m in measurements:
        a = node_slot[m.node_a()]
        b = node_slot[m.node_b()]
        adjacency[a].append(b)
        adjacency[b].append(a)
    seen = np.zeros(n_nodes, dtype=bool)
    stack = [0]
    while stack:
        v = stack.pop()
        if seen[v]:
            continue
        seen[v] = True
        stack.extend(u for u in adjacency[v] if not seen[u])
    if not seen.all():
        raise Disconnected(
            f"{int((~seen).sum())} of {n_nodes} position nodes unreachable "
            "from camera 0")


def _reduced_laplacian(ends_a: np.ndarray, ends_b: np.ndarray,
                       n_nodes: int) -> np.ndarray:
    """Graph Laplacian with the gauge node (slot 0) removed."""
    lap = np.zeros((n_nodes, n_nodes))
    np.add.at(lap, (ends_a, ends_a), 1.0)
    np.add.at(lap, (ends_b, ends_b), 1.0)
    np.add.at(lap, (ends_a, ends_b), -1.0)
    np.add.at(lap, (ends_b, ends_a), -1.0)
    return lap[1:, 1:]


def solve_translations(measurements: list, n_cameras: int,
                       config: TranslationConfig = TranslationConfig(),
                       seed: int = 0) -> TranslationSolution:
    """Camera (and landmark) positions from filtered direction measurements.

    Minimizes the Huber-robustified chordal disagreement between each
    measured direction and the normalized difference of its endpoint
    positions.  Initialization solves a linear surrogate over joint positions
    and per-measurement scales (mean scale pinned to one) plus random
    restarts refined by alternation; the best start is polished by
    Levenberg-Marquardt with iteratively reweighted residuals.

    Gauge: camera 0 at the origin, unit mean camera-camera baseline.

    Raises:
        Disconnected: measurement graph does not span all position nodes.
        Underconstrained: the network keeps more than the global-scale
            freedom (normal-equations nullity >= 2), e.g. an open chain.
    """
    if not measurements:
        raise Disconnected("no measurements")
    landmark_keys = sorted({m.b for m in measurements
                            if m.kind == KIND_LANDMARK})
    node_slot = {("c", i): i for i in range(n_cameras)}
    node_slot.update({("l", key): n_cameras + k
                      for k, key in enumerate(landmark_keys)})
    n_nodes = n_cameras + len(landmark_keys)
    _check_connected(measurements, n_cameras, n_nodes, node_slot)
    n_free = n_nodes - 1

    ends_a = np.array([node_slot[m.node_a()] for m in measurements])
    ends_b = np.array([node_slot[m.node_b()] for m in measurements])
    dirs = np.array([m.direction for m in measurements])
    delta = config.huber_delta

    def residual_norms(full_pos):
        diff = full_pos[ends_b] - full_pos[ends_a]
        norms = np.linalg.norm(diff, axis=1)
        safe = np.maximum(norms, 1e-15)
        s = np.linalg.norm(dirs - diff / safe[:, None], axis=1)
        return np.where(norms < 1e-15, 2.0, s)

    lap = _reduced_laplacian(ends_a, ends_b, n_nodes)
    lap_factor = scipy.linalg.cho_factor(lap + 1e-12 * np.eye(n_free))

    best_positions = _linear_surrogate_init(ends_a, ends_b, dirs, n_nodes, lap)
    best_cost = _huber_total(residual_norms(best_positions), delta)

    rng = rng_for(seed, "translation-init")
    for _trial in range(config.init_trials - 1):
        full = np.zeros((n_nodes, 3))
        full[1:] = rng.normal(size=(n_free, 3))
        for _round in range(2):
            diff = full[ends_b] - full[ends_a]
            scales = np.maximum(np.einsum("nd,nd->n", diff, dirs), 1e-3)
            rhs = np.zeros((n_nodes, 3))
            scaled = dirs * scales[:, None]
            np.add.at(rhs, ends_b, scaled)
            np.add.at(rhs, ends_a, -scaled)
            full = np.zeros((n_nodes, 3))
            full[1:] = scipy.linalg.cho_solve(lap_factor, rhs[1:])
        cost = _huber_total(residual_norms(full), delta)
        if cost < best_cost:
            best_cost, best_positions = cost, full

    positions, jacobian = _refine_positions(best_positions, ends_a, ends_b,
                                            dirs, config)

    # One zero singular direction (global scale) is the expected gauge
    # freedom; a second one means the network is not parallel-rigid.
    singular = np.linalg.svd(jacobian, compute_uv=False)
    nullity = int(np.sum(singular < 1e-8 * max(singular[0], 1e-30)))
    if nullity >= 2:
        raise Underconstrained(
            f"direction network keeps {nullity} null directions (expected 1)")

    positions = positions - positions[0]
    cam_mask = np.array([m.kind == KIND_CAMERA for m in measurements])
    if cam_mask.any():
        baselines = np.linalg.norm(positions[ends_b[cam_mask]]
                                   - positions[ends_a[cam_mask]], axis=1)
        scale = float(np.mean(baselines))
        if scale > 1e-15:
            positions = positions / scale
    landmarks = {key: positions[n_cameras + k]
                 for k, key in enumerate(landmark_keys)}
    return TranslationSolution(positions[:n_cameras], landmarks,
                               _huber_total(residual_norms(positions), delta),
                               tuple(measurements))


def _linear_surrogate_init(ends_a, ends_b, dirs, n_nodes, lap) -> np.ndarray:
    """Joint linear solve over positions and per-measurement scales.

    Minimizes ``sum_m ||(p_b - p_a) - s_m u_m||^2`` subject to the scales
    summing to the measurement count, assembled as one symmetric system with
    a Lagrange multiplier row.  Falls back to zeros if the surrogate itself
    is rank deficient (random restarts then carry the initialization).
    """
    n_free = n_nodes - 1
    n_meas = len(dirs)
    dim = 3 * n_free + n_meas
    kkt = np.zeros((dim + 1, dim + 1))
    rhs = np.zeros(dim + 1)
    kkt[:3 * n_free, :3 * n_free] = np.kron(lap, np.eye(3))
    for k in range(n_meas):
        col = 3 * n_free + k
        kkt[col, col] = 1.0
        for node, sign in ((ends_b[k], 1.0), (ends_a[k], -1.0)):
            if node == 0:
                continue
            slot = 3 * (node - 1)
            kkt[slot:slot + 3, col] -= sign * dirs[k]
            kkt[col, slot:slot + 3] -= sign * dirs[k]
    kkt[3 * n_free + np.arange(n_meas), dim] = 1.0
    kkt[dim, 3 * n_free + np.arange(n_meas)] = 1.0
    rhs[dim] = float(n_meas)
    full = np.zeros((n_nodes, 3))
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return full
    if not np.all(np.isfinite(sol)):
        return full
    full[1:] = sol[:3 * n_free].reshape(n_free, 3)
    return full


def _refine_positions(full_positions, ends_a, ends_b, dirs, config):
    """Levenberg-Marquardt with iteratively reweighted Huber residuals.

    Node slot 0 stays fixed (translation gauge).  Returns the refined
    positions and the final unweighted Jacobian (used for the rank test).
    """
    n_nodes = len(full_positions)
    n_free = n_nodes - 1
    n_meas = len(dirs)
    delta = config.huber_delta
    positions = full_positions.copy()

    # flat scatter indices for the two 3x3 blocks of each measurement row
    width = 3 * n_free
    row_base = 3 * np.arange(n_meas)
    cell = np.arange(3)
    block_rows = (row_base[:, None, None] + cell[None, :, None]) * width

    def block_indices(nodes):
        mask = nodes != 0
        col_base = 3 * (nodes - 1)
        flat = block_rows + col_base[:, None, None] + cell[None, None, :]
        return mask, flat[mask].ravel()

    mask_b, flat_b = block_indices(ends_b)
    mask_a, flat_a = block_indices(ends_a)

    def residuals(pos):
        diff = pos[ends_b] - pos[ends_a]
        norms = np.maximum(np.linalg.norm(diff, axis=1), 1e-15)
        return dirs - diff / norms[:, None], norms

    def irls_weights(res):
        if delta is None:
            return np.ones(n_meas)
        s = np.maximum(np.linalg.norm(res, axis=1), 1e-30)
        return np.where(s <= delta, 1.0, delta / s)

    def fill_jacobian(jac, norms_now, unit):
        projector = (np.eye(3)[None] - np.einsum("na,nb->nab", unit, unit))
        projector = projector / norms_now[:, None, None]
        jac[:] = 0.0
        np.add.at(jac.ravel(), flat_b, (-projector[mask_b]).ravel())
        np.add.at(jac.ravel(), flat_a, projector[mask_a].ravel())

    res, norms = residuals(positions)
    cost = _huber_total(np.linalg.norm(res, axis=1), delta)
    lam = 1e-4
    jacobian = np.zeros((3 * n_meas, width))
    for _ in range(config.max_iterations):
        diff = positions[ends_b] - positions[ends_a]
        fill_jacobian(jacobian, norms, diff / norms[:, None])

        w = np.sqrt(irls_weights(res))
        jac_w = jacobian * np.repeat(w, 3)[:, None]
        r_vec = (res * w[:, None]).ravel()
        jtj = jac_w.T @ jac_w
        jtr = jac_w.T @ r_vec

        improved = False
        prev_cost = cost
        for _attempt in range(10):
            try:
                step = np.linalg.solve(jtj + lam * np.eye(width), jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = positions.copy()
            cand[1:] -= step.reshape(n_free, 3)
            res_c, norms_c = residuals(cand)
            cost_c = _huber_total(np.linalg.norm(res_c, axis=1), delta)
            if cost_c < cost:
                positions, res, norms, cost = cand, res_c, norms_c, cost_c
                lam = max(lam * 0.1, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved or prev_cost - cost < 1e-15 * (prev_cost + 1e-30):
            break

    diff = positions[ends_b] - positions[ends_a]
    fill_jacobian(jacobian, norms, diff / norms[:, None])
    return positions, jacobian

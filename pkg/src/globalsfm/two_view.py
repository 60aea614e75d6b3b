"""Two-view verification: robust relative-pose estimation and refinement.

Per image pair this runs keypoint cleanup, essential-matrix RANSAC with local
optimization, four-fold pose disambiguation, and a small joint refinement of
the relative pose and triangulated points.  Each pair is a pure function of
its inputs and a seed, so pairs can run on any worker in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheiralityAmbiguous,
    IndeterminateSystem,
    NoModelFound,
    TooFewMatches,
)
from .essential import (
    decompose_essential,
    five_point_essential,
    project_to_essential,
    sampson_distance_px,
    two_view_depths,
)
from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    camera_point_pixel_jacobian,
    pixel_to_normalized,
    project_camera_points,
    so3_exp,
    so3_hat,
)

REASON_OK = "ok"


@dataclass(frozen=True)
class MatchSet:
    """Correspondences of one image pair as keypoint index rows (idx_i, idx_j)."""

    pair: tuple
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class TwoViewMeasurement:
    """Verified relative pose of a pair: p_j = rotation @ p_i + direction * scale.

    ``rotation`` maps camera-i coordinates into camera j, ``direction`` is the
    unit translation of that map (scale unobservable).  ``inliers`` holds the
    surviving correspondence index rows; ``inlier_ratio`` is relative to the
    raw match count of the pair.
    """

    pair: tuple
    rotation: np.ndarray
    direction: np.ndarray
    inliers: np.ndarray
    inlier_ratio: float
    n_inliers: int


@dataclass(frozen=True)
class VerificationConfig:
    """Thresholds for two-view estimation; defaults match the pipeline defaults."""

    ransac_threshold_px: float = 4.0
    ransac_confidence: float = 0.9999
    max_ransac_iters: int = 10000
    min_inlier_ratio: float = 0.10
    min_inliers: int = 15
    two_view_ba_reproj_prune_px: float = 0.5
    two_view_ba_max_iters: int = 100
    nms_radius_px: float = 3.0
    enable_two_view_ba: bool = True  # ablation switch; skips the pair refinement

    def __post_init__(self):
        for name in ("ransac_threshold_px", "ransac_confidence", "max_ransac_iters",
                     "min_inlier_ratio", "min_inliers", "two_view_ba_reproj_prune_px",
                     "two_view_ba_max_iters", "nms_radius_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def merge_keypoints_nms(keypoints: dict, matches: list, radius_px: float) -> tuple:
    """Merge near-duplicate keypoints per image and remap matches.

    Keypoints closer than ``radius_px`` (transitively chained) collapse to
    their cluster centroid.  Correspondences that become identical index rows
    after remapping are deduplicated.

    Args:
        keypoints: image_id -> (K, 2) pixel array.
        matches: list of MatchSet.
        radius_px: merge radius, > 0.

    Returns:
        (merged keypoints dict, remapped MatchSet list).
    """
    merged = {}
    remap = {}
    for image_id, kps in keypoints.items():
        kps = np.atleast_2d(np.asarray(kps, dtype=float))
        n = len(kps)
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        if n > 1:
            diff = kps[:, None, :] - kps[None, :, :]
            close = np.sum(diff * diff, axis=-1) <= radius_px * radius_px
            ii, jj = np.nonzero(np.triu(close, k=1))
            for a, b in zip(ii.tolist(), jj.tolist()):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[rb] = ra
        clusters = {}
        for idx in range(n):
            clusters.setdefault(find(idx), []).append(idx)
        new_positions = []
        index_map = np.empty(n, dtype=int)
        for new_idx, members in enumerate(sorted(clusters.values(), key=min)):
            new_positions.append(kps[members].mean(axis=0))
            for m in members:
                index_map[m] = new_idx
        merged[image_id] = np.array(new_positions) if new_positions else kps
        remap[image_id] = index_map

    out_matches = []
    for ms in matches:
        i, j = ms.pair
        idx = np.atleast_2d(np.asarray(ms.indices, dtype=int))
        if len(idx) == 0:
            out_matches.append(ms)
            continue
        rows = np.column_stack([remap[i][idx[:, 0]], remap[j][idx[:, 1]]])
        rows = np.unique(rows, axis=0)
        out_matches.append(MatchSet(ms.pair, rows))
    return merged, out_matches


def _adaptive_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return cap
    denom = math.log(max(1e-300, 1.0 - inlier_ratio ** 5))
    if denom >= 0.0:
        return cap
    return min(cap, max(1, int(math.ceil(math.log(1.0 - confidence) / denom))))


def _lsq_essential(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    xi = np.column_stack([x_i, np.ones(len(x_i))])
    xj = np.column_stack([x_j, np.ones(len(x_j))])
    rows = np.einsum("ni,nj->nij", xj, xi).reshape(len(xi), 9)
    _, _, vt = np.linalg.svd(rows)
    return project_to_essential(vt[-1].reshape(3, 3))


def estimate_essential_ransac(matches: MatchSet, kp_i: np.ndarray, kp_j: np.ndarray,
                              intr_i: CameraIntrinsics, intr_j: CameraIntrinsics,
                              cfg: VerificationConfig, seed: int) -> tuple:
    """Essential matrix by locally optimized RANSAC over the five-point solver.

    Inliers are correspondences whose first-order epipolar distance, scaled by
    the pair's mean focal length, is at most ``cfg.ransac_threshold_px``.
    Every new best hypothesis is refit on its inliers (least squares plus
    projection onto the essential manifold) and kept if support grows.  The
    iteration budget adapts to the best inlier ratio at ``ransac_confidence``.

    Returns:
        (essential matrix with unit Frobenius norm, boolean inlier mask).

    Raises:
        TooFewMatches: fewer than 5 correspondences.
        NoModelFound: no hypothesis reached 5 inliers.
    """
    idx = np.atleast_2d(np.asarray(matches.indices, dtype=int))
    n = len(idx)
    if n < 5:
        raise TooFewMatches(f"pair {matches.pair}: {n} matches < 5")
    x_i = pixel_to_normalized(kp_i[idx[:, 0]], intr_i)
    x_j = pixel_to_normalized(kp_j[idx[:, 1]], intr_j)
    focal_scale = 0.5 * (intr_i.f + intr_j.f)
    threshold = cfg.ransac_threshold_px

    rng = np.random.default_rng(seed)
    best_mask = None
    best_model = None
    best_count = 0
    needed = cfg.max_ransac_iters
    iteration = 0
    while iteration < needed:
        iteration += 1
        sample = rng.choice(n, size=5, replace=False)
        try:
            candidates = five_point_essential(x_i[sample], x_j[sample])
        except TooFewMatches:  # pragma: no cover - sample size is fixed
            continue
        for e in candidates:
            mask = sampson_distance_px(e, x_i, x_j, focal_scale) <= threshold
            count = int(mask.sum())
            if count <= best_count:
                continue
            best_model, best_mask, best_count = e, mask, count
            if count >= 5:
                refined = _lsq_essential(x_i[mask], x_j[mask])
                r_mask = sampson_distance_px(refined, x_i, x_j, focal_scale) <= threshold
                r_count = int(r_mask.sum())
                if r_count >= count:
                    best_model, best_mask, best_count = refined, r_mask, r_count
            needed = min(cfg.max_ransac_iters,
                         _adaptive_iterations(best_count / n, cfg.ransac_confidence,
                                              cfg.max_ransac_iters))
    if best_count < 5 or best_model is None:
        raise NoModelFound(f"pair {matches.pair}: best support {best_count} < 5")
    return best_model / np.linalg.norm(best_model), best_mask


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    """(3, 2) orthonormal basis of the plane orthogonal to unit vector t."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(t)))] = 1.0
    b1 = np.cross(t, axis)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t, b1)
    return np.column_stack([b1, b2])


def _two_view_residuals(points, rotation, translation, x_px_i, x_px_j, intr_i, intr_j):
    """Residual vector over both views; None if any point loses positive depth."""
    q = points @ rotation.T + translation
    if np.any(points[:, 2] <= MIN_DEPTH) or np.any(q[:, 2] <= MIN_DEPTH):
        return None, None
    r_i = project_camera_points(points, intr_i) - x_px_i
    r_j = project_camera_points(q, intr_j) - x_px_j
    return np.concatenate([r_i.ravel(), r_j.ravel()]), q


def _two_view_lm(points, rotation, translation, x_px_i, x_px_j, intr_i, intr_j,
                 max_iters):
    """Joint LM over (pose, points) with camera i fixed and ``|t|`` pinned to 1.

    Returns (points, rotation, translation, reduced 5x5 camera system).
    """
    n = len(points)
    lam = 1e-4
    residuals, q = _two_view_residuals(points, rotation, translation,
                                       x_px_i, x_px_j, intr_i, intr_j)
    if residuals is None:
        raise IndeterminateSystem("initial two-view state has non-positive depths")
    cost = float(residuals @ residuals)
    schur = None
    for _ in range(max_iters):
        basis = _tangent_basis(translation)
        jac_pt_i = camera_point_pixel_jacobian(points, intr_i)
        a_j = camera_point_pixel_jacobian(q, intr_j)
        jac_pt_j = a_j @ rotation
        hats = np.zeros((n, 3, 3))
        hats[:, 0, 1] = -points[:, 2]
        hats[:, 0, 2] = points[:, 1]
        hats[:, 1, 0] = points[:, 2]
        hats[:, 1, 2] = -points[:, 0]
        hats[:, 2, 0] = -points[:, 1]
        hats[:, 2, 1] = points[:, 0]
        dq_dw = -np.einsum("ab,nbc->nac", rotation, hats)
        jac_cam = np.concatenate([a_j @ dq_dw, a_j @ basis], axis=2)  # (n, 2, 5)

        r_i = residuals[: 2 * n].reshape(n, 2)
        r_j = residuals[2 * n:].reshape(n, 2)
        u_mat = np.einsum("nka,nkb->ab", jac_cam, jac_cam)
        g_cam = np.einsum("nka,nk->a", jac_cam, r_j)
        v_mats = (np.einsum("nka,nkb->nab", jac_pt_i, jac_pt_i)
                  + np.einsum("nka,nkb->nab", jac_pt_j, jac_pt_j))
        w_mats = np.einsum("nka,nkb->nab", jac_cam, jac_pt_j)
        g_pts = (np.einsum("nka,nk->na", jac_pt_i, r_i)
                 + np.einsum("nka,nk->na", jac_pt_j, r_j))
        try:
            schur = u_mat - np.einsum(
                "nab,nbc,ndc->ad", w_mats,
                np.linalg.inv(v_mats + 1e-18 * np.eye(3)), w_mats)
        except np.linalg.LinAlgError as exc:
            raise IndeterminateSystem(
                f"point system degenerate during refinement: {exc}") from exc
        if not np.all(np.isfinite(schur)):
            raise IndeterminateSystem(
                "point system produced non-finite reduced camera system")

        improved = False
        for _attempt in range(8):
            v_damped = v_mats + lam * np.eye(3)
            try:
                v_inv = np.linalg.inv(v_damped)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            s_mat = u_mat + lam * np.eye(5) - np.einsum("nab,nbc,ndc->ad",
                                                        w_mats, v_inv, w_mats)
            rhs = g_cam - np.einsum("nab,nbc,nc->a", w_mats, v_inv, g_pts)
            try:
                delta_cam = np.linalg.solve(s_mat, -rhs)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            delta_pts = -np.einsum("nab,nb->na", v_inv,
                                   g_pts + np.einsum("nba,b->na", w_mats, delta_cam))

            rot_new = rotation @ so3_exp(delta_cam[:3])
            t_new = translation + basis @ delta_cam[3:]
            t_new = t_new / np.linalg.norm(t_new)
            pts_new = points + delta_pts
            res_new, q_new = _two_view_residuals(pts_new, rot_new, t_new,
                                                 x_px_i, x_px_j, intr_i, intr_j)
            if res_new is not None:
                cost_new = float(res_new @ res_new)
                if cost_new < cost:
                    rotation, translation, points = rot_new, t_new, pts_new
                    residuals, q, prev_cost, cost = res_new, q_new, cost, cost_new
                    lam = max(lam * 0.1, 1e-12)
                    improved = True
                    break
            lam *= 10.0
        if not improved:
            break
        if prev_cost - cost < 1e-16 * (prev_cost + 1e-30):
            break
    return points, rotation, translation, schur


def two_view_ba(measurement: TwoViewMeasurement, kp_i: np.ndarray, kp_j: np.ndarray,
                intr_i: CameraIntrinsics, intr_j: CameraIntrinsics,
                cfg: VerificationConfig) -> TwoViewMeasurement:
    """Refine a relative pose jointly with its triangulated points.

    The inlier set is triangulated and refined (camera i fixed, unit
    baseline), points whose refined reprojection error exceeds the prune
    threshold in either view are dropped from the refinement, and the
    survivors are refined once more.  Only the refined rotation and direction
    are written back; the correspondence set and inlier statistics keep their
    estimation-stage values, since the prune selects which points constrain
    the pose rather than which correspondences exist.

    Raises:
        TooFewMatches: fewer than 5 surviving correspondences at any stage.
        IndeterminateSystem: the reduced camera system is numerically singular
            (condition number above 1e12), e.g. pairs with no real overlap.
    """
    idx = np.atleast_2d(np.asarray(measurement.inliers, dtype=int))
    if len(idx) < 5:
        raise TooFewMatches(f"pair {measurement.pair}: {len(idx)} inliers < 5")
    x_px_i = np.asarray(kp_i, dtype=float)[idx[:, 0]]
    x_px_j = np.asarray(kp_j, dtype=float)[idx[:, 1]]
    x_i = pixel_to_normalized(x_px_i, intr_i)
    x_j = pixel_to_normalized(x_px_j, intr_j)

    rotation = measurement.rotation.copy()
    translation = measurement.direction / np.linalg.norm(measurement.direction)

    d_i, d_j = two_view_depths(rotation, translation, x_i, x_j)
    keep = np.isfinite(d_i) & np.isfinite(d_j) & (d_i > MIN_DEPTH) & (d_j > MIN_DEPTH)
    if keep.sum() < 5:
        raise TooFewMatches(
            f"pair {measurement.pair}: {int(keep.sum())} points in front of both views")
    idx, x_px_i, x_px_j, x_i, d_i = (idx[keep], x_px_i[keep], x_px_j[keep],
                                     x_i[keep], d_i[keep])
    points = np.column_stack([x_i, np.ones(len(x_i))]) * d_i[:, None]

    points, rotation, translation, schur = _two_view_lm(
        points, rotation, translation, x_px_i, x_px_j, intr_i, intr_j,
        cfg.two_view_ba_max_iters)

    q = points @ rotation.T + translation
    err_i = np.linalg.norm(project_camera_points(points, intr_i) - x_px_i, axis=1)
    err_j = np.linalg.norm(project_camera_points(q, intr_j) - x_px_j, axis=1)
    keep = np.maximum(err_i, err_j) <= cfg.two_view_ba_reproj_prune_px
    if keep.sum() < 5:
        raise TooFewMatches(
            f"pair {measurement.pair}: {int(keep.sum())} points survive pruning")
    if not np.all(keep):
        points, rotation, translation, schur = _two_view_lm(
            points[keep], rotation, translation, x_px_i[keep], x_px_j[keep],
            intr_i, intr_j, cfg.two_view_ba_max_iters)
        idx = idx[keep]

    if schur is None or np.linalg.cond(schur) > 1e12:
        raise IndeterminateSystem(
            f"pair {measurement.pair}: reduced camera system is singular")

    return TwoViewMeasurement(measurement.pair, rotation, translation,
                              measurement.inliers, measurement.inlier_ratio,
                              measurement.n_inliers)


def accept_pair(measurement: TwoViewMeasurement, cfg: VerificationConfig) -> bool:
    """Keep a pair iff its inlier ratio and absolute inlier count clear the floors."""
    return (measurement.inlier_ratio >= cfg.min_inlier_ratio
            and measurement.n_inliers >= cfg.min_inliers)


@dataclass(frozen=True)
class PairResult:
    """Outcome of verifying one pair: a measurement or a rejection reason."""

    pair: tuple
    measurement: TwoViewMeasurement
    reason: str


def verify_pair(matches: MatchSet, kp_i: np.ndarray, kp_j: np.ndarray,
                intr_i: CameraIntrinsics, intr_j: CameraIntrinsics,
                cfg: VerificationConfig, seed: int) -> PairResult:
    """Full two-view verification of one pair; never raises on rejection."""
    try:
        essential, mask = estimate_essential_ransac(matches, kp_i, kp_j,
                                                    intr_i, intr_j, cfg, seed)
        idx = np.atleast_2d(np.asarray(matches.indices, dtype=int))[mask]
        x_i = pixel_to_normalized(kp_i[idx[:, 0]], intr_i)
        x_j = pixel_to_normalized(kp_j[idx[:, 1]], intr_j)
        rotation, direction = decompose_essential(essential, x_i, x_j)
        measurement = TwoViewMeasurement(matches.pair, rotation, direction, idx,
                                         len(idx) / len(matches), len(idx))
        if cfg.enable_two_view_ba:
            measurement = two_view_ba(measurement, kp_i, kp_j, intr_i, intr_j,
                                      cfg)
    except (TooFewMatches, NoModelFound, CheiralityAmbiguous, IndeterminateSystem) as exc:
        return PairResult(matches.pair, None, f"{type(exc).__name__}: {exc}")
    if not accept_pair(measurement, cfg):
        return PairResult(
            matches.pair, None,
            f"rejected: inlier_ratio={measurement.inlier_ratio:.3f} "
            f"n_inliers={measurement.n_inliers}")
    return PairResult(matches.pair, measurement, REASON_OK)

"""Minimal five-point essential-matrix solver, scoring, and decomposition.

The solver follows the action-matrix recipe: the four-dimensional null space
of the epipolar constraints is combined as ``E = x*E1 + y*E2 + z*E3 + E4``,
the determinant and trace constraints yield ten cubic polynomials in
``(x, y, z)``, Gauss-Jordan elimination expresses the ten cubic monomials in
terms of the ten lower-degree ones, and the eigenvectors of the resulting
10x10 multiplication-by-x operator read off all (up to ten) real solutions.

Conventions: correspondences are undistorted normalized camera coordinates,
the constraint is ``x_j^T E x_i = 0``, and a decomposed pair ``(R, t)`` maps
camera-i coordinates to camera-j coordinates via ``p_j = R p_i + t``.
"""

from __future__ import annotations

import numpy as np

from .errors import CheiralityAmbiguous, DegenerateError, TooFewMatches
from .geometry import so3_hat

# 20 monomials of degree <= 3 in (x, y, z): ten cubics first, then the
# quotient-ring basis [x^2, xy, xz, y^2, yz, z^2, x, y, z, 1]
_MONOMIALS = [
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
    (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1),
    (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]
_MONO_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}


def _pmul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            key = (ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2])
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def _padd(a: dict, b: dict, sb: float = 1.0) -> dict:
    out = dict(a)
    for e, c in b.items():
        out[e] = out.get(e, 0.0) + sb * c
    return out


def _poly_row(p: dict) -> np.ndarray:
    row = np.zeros(20)
    for e, c in p.items():
        row[_MONO_INDEX[e]] = c
    return row


def _homogeneous(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] == 3:
        return x
    return np.column_stack([x, np.ones(len(x))])


def _epipolar_rows(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Rows of the linear system: coefficient of E (row-major) in x_j^T E x_i."""
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    return np.einsum("ni,nj->nij", xj, xi).reshape(len(xi), 9)


def five_point_essential(x_i: np.ndarray, x_j: np.ndarray) -> list:
    """All real essential matrices consistent with >= 5 normalized correspondences.

    Args:
        x_i: (N, 2) or (N, 3) normalized coordinates in image i.
        x_j: matching coordinates in image j.

    Returns:
        List of 3x3 essential matrices, Frobenius-normalized, possibly empty.

    Raises:
        TooFewMatches: fewer than 5 correspondences.
    """
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    if len(xi) < 5 or len(xj) != len(xi):
        raise TooFewMatches(f"need >= 5 matched correspondences, got {len(xi)}/{len(xj)}")

    q = _epipolar_rows(xi, xj)
    _, _, vt = np.linalg.svd(q)
    # the fixed (weight-1) component must be the direction of smallest
    # singular value so overdetermined near-exact data stays solvable
    e_mats = [b.reshape(3, 3) for b in vt[-4:]]

    # entries of E = x*E1 + y*E2 + z*E3 + 1*E4 as degree-1 polynomials
    e_poly = [[{(1, 0, 0): e_mats[0][r, c], (0, 1, 0): e_mats[1][r, c],
                (0, 0, 1): e_mats[2][r, c], (0, 0, 0): e_mats[3][r, c]}
               for c in range(3)] for r in range(3)]

    constraints = [_det3_poly(e_poly)]
    constraints.extend(_trace_constraint_polys(e_poly))
    m = np.array([_poly_row(p) for p in constraints])

    try:
        reduced = np.linalg.solve(m[:, :10], m[:, 10:])
    except np.linalg.LinAlgError:
        return []

    # multiplication-by-x operator on the basis [x^2,xy,xz,y^2,yz,z^2,x,y,z,1]:
    # x*(first six basis monomials) are cubics 0..5, reduced via the ideal
    action = np.zeros((10, 10))
    action[:, :6] = -reduced[:6].T
    action[0, 6] = 1.0  # x * x = x^2
    action[1, 7] = 1.0  # x * y = xy
    action[2, 8] = 1.0  # x * z = xz
    action[6, 9] = 1.0  # x * 1 = x

    eigvals, eigvecs = np.linalg.eig(action.T)
    solutions = []
    for idx in range(10):
        if abs(eigvals[idx].imag) > 1e-6 * (1.0 + abs(eigvals[idx].real)):
            continue
        v = eigvecs[:, idx]
        if abs(v[9]) < 1e-12:
            continue
        v = (v / v[9]).real
        x, y, z = v[6], v[7], v[8]
        e = x * e_mats[0] + y * e_mats[1] + z * e_mats[2] + e_mats[3]
        norm = np.linalg.norm(e)
        if norm < 1e-12:
            continue
        solutions.append(e / norm)
    return solutions


def _det3_poly(ep) -> dict:
    def minor(r0, r1, c0, c1):
        return _padd(_pmul(ep[r0][c0], ep[r1][c1]), _pmul(ep[r0][c1], ep[r1][c0]), -1.0)

    out = _pmul(ep[0][0], minor(1, 2, 1, 2))
    out = _padd(out, _pmul(ep[0][1], minor(1, 2, 0, 2)), -1.0)
    return _padd(out, _pmul(ep[0][2], minor(1, 2, 0, 1)))


def _trace_constraint_polys(ep) -> list:
    # G = 2*E*E^T - trace(E*E^T)*I, constraint matrix = G*E (nine cubics)
    eet = [[None] * 3 for _ in range(3)]
    for r in range(3):
        for c in range(3):
            acc: dict = {}
            for k in range(3):
                acc = _padd(acc, _pmul(ep[r][k], ep[c][k]))
            eet[r][c] = acc
    trace = _padd(_padd(eet[0][0], eet[1][1]), eet[2][2])
    g = [[_padd({}, eet[r][c], 2.0) for c in range(3)] for r in range(3)]
    for d in range(3):
        g[d][d] = _padd(g[d][d], trace, -1.0)
    out = []
    for r in range(3):
        for c in range(3):
            acc = {}
            for k in range(3):
                acc = _padd(acc, _pmul(g[r][k], ep[k][c]))
            out.append(acc)
    return out


def project_to_essential(e: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values (s, s, 0), Frobenius-normalized."""
    u, s, vt = np.linalg.svd(e)
    sigma = (s[0] + s[1]) * 0.5
    e_proj = u @ np.diag([sigma, sigma, 0.0]) @ vt
    return e_proj / np.linalg.norm(e_proj)


def essential_from_rt(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """Essential matrix of a relative pose (p_j = R p_i + t), unit Frobenius norm."""
    e = so3_hat(np.asarray(translation, dtype=float)) @ np.asarray(rotation, dtype=float)
    n = np.linalg.norm(e)
    if n < 1e-15:
        raise DegenerateError("zero translation gives a zero essential matrix")
    return e / n


def sampson_distance_px(e: np.ndarray, x_i: np.ndarray, x_j: np.ndarray,
                        focal_scale: float) -> np.ndarray:
    """First-order epipolar (Sampson) distances, converted to pixels.

    The residual is computed in normalized coordinates and scaled by the
    average focal length of the pair so thresholds can be given in pixels.
    """
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    exi = xi @ e.T       # line in image j for each x_i
    etxj = xj @ e        # line in image i for each x_j
    num = np.einsum("ni,ni->n", xj, exi)
    den = exi[:, 0] ** 2 + exi[:, 1] ** 2 + etxj[:, 0] ** 2 + etxj[:, 1] ** 2
    den = np.maximum(den, 1e-30)
    return focal_scale * np.abs(num) / np.sqrt(den)


def two_view_depths(rotation: np.ndarray, translation: np.ndarray,
                    x_i: np.ndarray, x_j: np.ndarray) -> tuple:
    """Least-squares ray-intersection depths of each correspondence in both frames.

    Rays ``d_i * x_i_hom`` (frame i) and the frame-i expression of the j-rays
    are intersected per point; returns (depths_i, depths_j) arrays.
    """
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    r1 = xi
    r2 = xj @ rotation  # R^T applied to each homogeneous x_j
    c2 = -rotation.T @ np.asarray(translation, dtype=float)

    a11 = np.einsum("ni,ni->n", r1, r1)
    a12 = -np.einsum("ni,ni->n", r1, r2)
    a22 = np.einsum("ni,ni->n", r2, r2)
    b1 = r1 @ c2
    b2 = -(r2 @ c2)
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) < 1e-18, np.nan, det)
    d1 = (b1 * a22 - a12 * b2) / det
    d2 = (a11 * b2 - a12 * b1) / det
    return d1, d2


def decompose_essential(e: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> tuple:
    """Relative pose from an essential matrix via the cheirality test.

    Args:
        e: essential matrix (sign-irrelevant).
        x_i, x_j: inlier correspondences in normalized coordinates, >= 1.

    Returns:
        (rotation, unit translation) with ``p_j = R p_i + t``.

    Raises:
        CheiralityAmbiguous: no candidate puts a strict majority of the points
            in front of both cameras.
    """
    xi = _homogeneous(x_i)
    if len(xi) < 1:
        raise TooFewMatches("cheirality needs at least one correspondence")
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r_a = u @ w @ vt
    r_b = u @ w.T @ vt
    t = u[:, 2]

    candidates = [(r_a, t), (r_a, -t), (r_b, t), (r_b, -t)]
    counts = []
    for rot, trans in candidates:
        d1, d2 = two_view_depths(rot, trans, x_i, x_j)
        counts.append(int(np.sum((d1 > 0) & (d2 > 0) & np.isfinite(d1) & np.isfinite(d2))))
    order = np.argsort(counts)[::-1]
    best, second = counts[order[0]], counts[order[1]]
    if best == 0 or best == second:
        raise CheiralityAmbiguous(
            f"front-of-camera support {counts} has no strict majority")
    rot, trans = candidates[order[0]]
    return rot, trans / np.linalg.norm(trans)

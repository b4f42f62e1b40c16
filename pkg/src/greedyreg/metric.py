"""Windowed normalized cross-correlation and its derivatives.

The dissimilarity is the negative mean of local correlation coefficients over
``(2r+1)^2`` windows centred on masked pixels, with windows clamp-padded at the
image border. Window sums come from cumulative sums along each axis, so the
cost is linear in the pixel count and independent of ``r``.

The derivative with respect to the moving intensities is obtained in closed
form: for a window centred at ``p`` the local score ``cc_p`` has::

    d cc_p / d J_q = (I_q - mean_I(p)) / sqrt(s_II s_JJ) - cc_p (J_q - mean_J(p)) / s_JJ

Summing over every window containing ``q`` reduces to three more box sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DisplacementField, ScalarImage
from .warp import sample_bilinear_grad

VAR_EPS = 1e-6


@dataclass(frozen=True)
class MetricReport:
    value: float
    gradient: DisplacementField
    n_valid: int


def window_radius(k: int, factor: int = 1) -> int:
    """Radius of the NCC window for kernel size ``k`` at a pyramid ``factor``."""
    return max(1, int(np.floor(k / factor / 2)))


def box_valid(a: np.ndarray, r: int) -> np.ndarray:
    """Sums over every full ``(2r+1)^2`` window of the last two axes (shrinks each by 2r)."""
    n = 2 * r + 1
    for axis in (-1, -2):
        c = np.cumsum(a, axis=axis)
        pad = [(0, 0)] * a.ndim
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        hi = [slice(None)] * a.ndim
        lo = [slice(None)] * a.ndim
        hi[axis] = slice(n, None)
        lo[axis] = slice(None, -n)
        a = c[tuple(hi)] - c[tuple(lo)]
    return a


def _edge_pad(a: np.ndarray, r: int) -> np.ndarray:
    pad = [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)]
    return np.pad(a, pad, mode="edge")


def _fold_edge_pad(g: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of ``_edge_pad``: accumulate the replicated border back onto the edge pixels."""
    g = g.copy()
    g[r, :] += g[:r, :].sum(axis=0)
    g[-r - 1, :] += g[-r:, :].sum(axis=0)
    g = g[r:-r, :]
    g[:, r] += g[:, :r].sum(axis=1)
    g[:, -r - 1] += g[:, -r:].sum(axis=1)
    return g[:, r:-r]


def _check_shapes(*arrays):
    shapes = {a.shape[-2:] for a in arrays if a is not None}
    if len(shapes) > 1:
        raise ValueError(f"size mismatch between rasters: {sorted(shapes)}")


def _as_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    if isinstance(mask, ScalarImage):
        mask = mask.data
    mask = np.asarray(mask) != 0
    if mask.shape != tuple(shape):
        raise ValueError(f"size mismatch: mask {mask.shape} vs image {tuple(shape)}")
    return mask


def _local_stats(I: np.ndarray, Jp: np.ndarray, Ip: np.ndarray, r: int):
    n = float((2 * r + 1) ** 2)
    sI = box_valid(Ip, r)
    sJ = box_valid(Jp, r)
    sII = box_valid(Ip * Ip, r) - sI * sI / n
    sJJ = box_valid(Jp * Jp, r) - sJ * sJ / n
    sIJ = box_valid(Ip * Jp, r) - sI * sJ / n
    return n, sI, sJ, sII, sJJ, sIJ


def _scores(sII, sJJ, sIJ, n, mask):
    valid = mask & (np.minimum(sII, sJJ) > VAR_EPS * n)
    denom = np.sqrt(np.where(valid, sII * sJJ, 1.0))
    cc = np.where(valid, sIJ / denom, 0.0)
    return valid, cc, denom


def ncc_values_batch(fixed: np.ndarray, moving_stack: np.ndarray, mask: np.ndarray, r: int) -> np.ndarray:
    """Dissimilarity of ``fixed`` against each image of a ``(N, H, W)`` stack."""
    I = fixed - fixed.mean()
    J = moving_stack - moving_stack.mean(axis=(-2, -1), keepdims=True)
    n, _, _, sII, sJJ, sIJ = _local_stats(I, _edge_pad(J, r), _edge_pad(I, r), r)
    valid, cc, _ = _scores(sII, sJJ, sIJ, n, mask)
    n_valid = valid.sum(axis=(-2, -1))
    total = cc.sum(axis=(-2, -1))
    return np.where(n_valid > 0, -total / np.maximum(n_valid, 1), 0.0)


def ncc_array(fixed: np.ndarray, moving: np.ndarray, mask: np.ndarray | None, r: int,
              with_grad: bool = False):
    """Core evaluation on plain arrays.

    Returns ``(value, n_valid, dmu_dJ, valid)``; ``dmu_dJ`` (the derivative with
    respect to every moving intensity) is None unless ``with_grad``.
    """
    if r < 1:
        raise ValueError(f"window radius must be >= 1, got {r}")
    _check_shapes(fixed, moving)
    mask = _as_mask(mask, fixed.shape)
    I = fixed - fixed.mean()
    J = moving - moving.mean()
    Ip = _edge_pad(I, r)
    Jp = _edge_pad(J, r)
    n, sI, sJ, sII, sJJ, sIJ = _local_stats(I, Jp, Ip, r)
    valid, cc, denom = _scores(sII, sJJ, sIJ, n, mask)
    n_valid = int(valid.sum())
    value = -float(cc.sum()) / n_valid if n_valid else 0.0
    if not with_grad:
        return value, n_valid, None, valid
    if n_valid == 0:
        return value, n_valid, np.zeros_like(I), valid
    w = np.where(valid, -1.0 / n_valid, 0.0)
    a = w / denom
    b = np.where(valid, w * cc / np.where(valid, sJJ, 1.0), 0.0)
    c = -(sI / n) * a + (sJ / n) * b
    spread = 2 * r
    box_a = box_valid(np.pad(a, spread), r)
    box_b = box_valid(np.pad(b, spread), r)
    box_c = box_valid(np.pad(c, spread), r)
    dJp = Ip * box_a - Jp * box_b + box_c
    return value, n_valid, _fold_edge_pad(dJp, r), valid


def ncc_value(fixed: ScalarImage, warped_moving: ScalarImage, mask=None, r: int = 1) -> float:
    value, _, _, _ = ncc_array(fixed.data, warped_moving.data, mask, r)
    return value


def ncc_gradient(fixed: ScalarImage, moving: ScalarImage, field: DisplacementField,
                 mask=None, r: int = 1) -> MetricReport:
    """Value and per-pixel derivative with respect to the displacement ``u``.

    The moving image is sampled at ``x + u(x)``; the derivative at ``p`` is the
    intensity derivative times the bilinear slope of the moving image there
    (central differences on the warped image when ``u`` sits on the grid).
    """
    _check_shapes(fixed.data, moving.data, field.dx)
    h, w = field.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    warped, gx, gy = sample_bilinear_grad(moving.data, xx + field.dx, yy + field.dy)
    mask = _as_mask(mask, fixed.shape)
    value, n_valid, dJ, valid = ncc_array(fixed.data, warped, mask, r, with_grad=True)
    keep = mask & valid
    return MetricReport(value, DisplacementField(np.where(keep, dJ * gx, 0.0),
                                                 np.where(keep, dJ * gy, 0.0)), n_valid)

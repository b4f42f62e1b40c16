"""Affine stage: seeded rigid brute-force search, then L-BFGS over six parameters.

Transforms are stored at working resolution and centred on the working image
centre. Pyramid level ``f`` samples working pixel ``f * x_l``, so the level
version of a transform is ``A.rescaled(1 / f)``.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import line_search

from .core import AffineTransform2D, RegistrationError, RegistrationParams
from .filters import downsample_array
from .metric import ncc_array, ncc_values_batch, window_radius
from .preprocess import PreprocessedPair
from .warp import sample_bilinear, sample_bilinear_grad

log = logging.getLogger(__name__)

BATCH = 64
LBFGS_MEMORY = 10
LBFGS_GTOL = 1e-6
LBFGS_MAXITER = 100


@dataclass(frozen=True)
class AffineResult:
    transform: AffineTransform2D
    final_value: float
    n_evals: int
    init_value: float


@dataclass(frozen=True, eq=False)
class _Level:
    factor: int
    fixed: np.ndarray
    moving: np.ndarray
    mask: np.ndarray
    radius: int


def image_center(shape) -> tuple[float, float]:
    h, w = shape
    return (w - 1) / 2.0, (h - 1) / 2.0


def _level(pair: PreprocessedPair, factor: int) -> _Level:
    return _Level(factor,
                  downsample_array(pair.fixed.data, factor),
                  downsample_array(pair.moving.data, factor),
                  pair.mask[::factor, ::factor],
                  window_radius(pair.k, factor))


def _grid(shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


def affine_value_grad(p: np.ndarray, center, fixed: np.ndarray, moving: np.ndarray,
                      mask: np.ndarray, r: int, with_grad: bool = True):
    """Dissimilarity of ``fixed`` vs ``moving`` sampled at ``A(x)`` and its gradient in
    ``(a11, a12, a21, a22, tx, ty)``."""
    a11, a12, a21, a22, tx, ty = p
    cx, cy = center
    xx, yy = _grid(fixed.shape)
    rx, ry = xx - cx, yy - cy
    x = a11 * rx + a12 * ry + cx + tx
    y = a21 * rx + a22 * ry + cy + ty
    if not with_grad:
        value, _, _, _ = ncc_array(fixed, sample_bilinear(moving, x, y), mask, r)
        return value, None
    warped, gx, gy = sample_bilinear_grad(moving, x, y)
    value, _, dJ, _ = ncc_array(fixed, warped, mask, r, with_grad=True)
    ex, ey = dJ * gx, dJ * gy
    grad = np.array([(ex * rx).sum(), (ex * ry).sum(), (ey * rx).sum(), (ey * ry).sum(),
                     ex.sum(), ey.sum()])
    return value, grad


# --- brute force ----------------------------------------------------------------

def draw_candidates(n: int, shape, seed: int):
    """Candidate 0 is the identity; the rest are seeded random rigid motions."""
    h, w = shape
    rng = np.random.default_rng(seed)
    m = n - 1
    theta = rng.uniform(0.0, 2.0 * np.pi, m)
    tx = rng.uniform(-0.25 * w, 0.25 * w, m)
    ty = rng.uniform(-0.25 * h, 0.25 * h, m)
    return (np.concatenate([[0.0], theta]), np.concatenate([[0.0], tx]),
            np.concatenate([[0.0], ty]))


def score_candidates(level: _Level, center, theta, tx, ty) -> np.ndarray:
    xx, yy = _grid(level.fixed.shape)
    rx, ry = xx - center[0], yy - center[1]
    scores = np.empty(theta.size)
    for start in range(0, theta.size, BATCH):
        sl = slice(start, start + BATCH)
        c = np.cos(theta[sl])[:, None, None]
        s = np.sin(theta[sl])[:, None, None]
        x = c * rx - s * ry + center[0] + tx[sl][:, None, None]
        y = s * rx + c * ry + center[1] + ty[sl][:, None, None]
        stack = sample_bilinear(level.moving, x, y)
        scores[sl] = ncc_values_batch(level.fixed, stack, level.mask, level.radius)
    # candidate 0 must read the moving image exactly as an identity warp would
    scores[0] = ncc_array(level.fixed, level.moving, level.mask, level.radius)[0]
    return scores


def brute_force_init(pair: PreprocessedPair, params: RegistrationParams) -> AffineTransform2D:
    factor = params.pyramid_factors[0]
    level = _level(pair, factor)
    cx, cy = image_center(pair.shape)
    center = (cx / factor, cy / factor)
    theta, tx, ty = draw_candidates(params.n_candidates, level.fixed.shape, params.seed)
    scores = score_candidates(level, center, theta, tx, ty)
    if not np.all(np.isfinite(scores)):
        raise RegistrationError("non-finite NCC value during brute-force search")
    best = int(np.argmin(scores))
    log.info("brute force: best candidate %d of %d, value %.6f", best, theta.size, scores[best])
    if best == 0:
        return AffineTransform2D.identity(cx, cy)
    return AffineTransform2D.rigid(theta[best], tx[best] * factor, ty[best] * factor, cx, cy)


# --- L-BFGS -------------------------------------------------------------------

def lbfgs(fun, x0: np.ndarray, memory: int = LBFGS_MEMORY, gtol: float = LBFGS_GTOL,
          maxiter: int = LBFGS_MAXITER, c1: float = 1e-4, c2: float = 0.9):
    """Minimize ``fun(x) -> (f, g)``.

    Returns ``(x, f, n_iter, ok)``; ``ok`` is False only when the very first line
    search fails, in which case ``x`` is ``x0``.
    """
    cache = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            f, g = fun(x)
            if not np.isfinite(f) or not np.all(np.isfinite(g)):
                raise RegistrationError("non-finite objective in affine refinement")
            cache.clear()
            cache[key] = (f, g)
        return cache[key]

    x = np.array(x0, dtype=np.float64)
    f, g = evaluate(x)
    f_prev = None
    pairs = deque(maxlen=memory)
    n_iter = 0
    for n_iter in range(maxiter):
        if np.max(np.abs(g)) < gtol:
            break
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            q *= (s @ y) / (y @ y)
        else:
            q /= np.linalg.norm(q)
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            q += s * (a - rho * (y @ q))
        d = -q
        with warnings.catch_warnings():
            # line-search non-convergence is reported through alpha=None
            warnings.simplefilter("ignore")
            res = line_search(lambda z: evaluate(z)[0], lambda z: evaluate(z)[1],
                              x, d, gfk=g, old_fval=f, old_old_fval=f_prev, c1=c1, c2=c2)
        alpha = res[0]
        if alpha is None:
            if n_iter == 0:
                return np.array(x0, dtype=np.float64), f, 0, False
            if pairs:
                # stale curvature pairs; retry once along steepest descent
                pairs.clear()
                f_prev = None
                continue
            break
        x_new = x + alpha * d
        f_new, g_new = evaluate(x_new)
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        f_prev, x, f, g = f, x_new, f_new, g_new
    else:
        n_iter = maxiter
    return x, f, n_iter, True


def _refine_level(level: _Level, A: AffineTransform2D, counter: list) -> AffineTransform2D:
    f = level.factor
    A_l = A.rescaled(1.0 / f)
    center = (A_l.cx, A_l.cy)
    h, w = level.fixed.shape
    # scale the matrix entries so a unit step moves the image corners by about a pixel
    L = max(h, w) / 2.0
    scale = np.array([L, L, L, L, 1.0, 1.0])

    def fun(z):
        counter[0] += 1
        value, grad = affine_value_grad(z / scale, center, level.fixed, level.moving,
                                        level.mask, level.radius)
        return value, grad / scale

    z, value, n_iter, ok = lbfgs(fun, A_l.params() * scale)
    log.info("affine level x%d: %d iterations, value %.6f%s", f, n_iter, value,
             "" if ok else " (line search failed at start)")
    if not ok:
        return A
    p = z / scale
    try:
        return AffineTransform2D(p[0], p[1], p[2], p[3], p[4] * f, p[5] * f, A.cx, A.cy)
    except ValueError:
        return A


def lbfgs_refine(pair: PreprocessedPair, A0: AffineTransform2D,
                 params: RegistrationParams) -> AffineResult:
    finest = _level(pair, 1)
    counter = [0]

    def full_value(A):
        counter[0] += 1
        value, _ = affine_value_grad(A.params(), (A.cx, A.cy), finest.fixed, finest.moving,
                                     finest.mask, finest.radius, with_grad=False)
        if not np.isfinite(value):
            raise RegistrationError("non-finite objective in affine refinement")
        return value

    init_value = full_value(A0)
    A = A0
    for factor in params.pyramid_factors:
        level = finest if factor == 1 else _level(pair, factor)
        A = _refine_level(level, A, counter)
    final_value = full_value(A)
    if final_value > init_value:
        A, final_value = A0, init_value
    return AffineResult(A, final_value, counter[0], init_value)


def register_affine(pair: PreprocessedPair, params: RegistrationParams) -> AffineResult:
    A0 = brute_force_init(pair, params)
    return lbfgs_refine(pair, A0, params)

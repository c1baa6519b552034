"""Differentiable 2D Gaussian splatting.

Gaussians are composited front to back in ascending index order (the 2D
analog of depth sorting; the order is fixed and stable so results are
reproducible). Per pixel x and Gaussian g:

    alpha'_g = clamp(alpha_g * exp(-1/2 d^T Sigma_g^-1 d), 0, 0.999)
    C(x)     = sum_g c_g alpha'_g prod_{j<g} (1 - alpha'_j)
    mask(x)  = 1 - prod_g (1 - alpha'_j)

with d the offset from the Gaussian mean in pixel space. Gaussians are
skipped outside a 3-sigma bounding box; the cutoff is treated as constant
support in the backward pass (zero subgradient, standard practice).

The backward pass is analytic and exact for the expression above, returning
per-Gaussian gradients for position, log-scale, rotation angle, color and
opacity. Scale gradients are emitted in log space (see GaussianGrads).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import GaussianGrads, GaussianSet

ALPHA_MAX = 0.999
SIGMA_CUTOFF = 3.0
DET_EPS = 1e-18
JITTER = 1e-8


@dataclass(frozen=True)
class Viewport:
    """Pixel grid with an affine world-to-pixel map.

    A world point w maps to pixel coordinates (w - origin) * scale, with
    pixel (row, col) covering the unit square whose center is
    (col + 0.5, row + 0.5). ``scale`` is pixels per world unit.
    """

    width: int
    height: int
    scale: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"viewport dims must be positive, got {self.width}x{self.height}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"viewport scale must be positive and finite, got {self.scale}")

    def world_to_pixel(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) * self.scale


@dataclass
class RenderStats:
    """Diagnostics accumulated during a render call."""

    jittered_covariances: int = 0
    skipped_offscreen: int = 0


def covariance2d(scale, angle: float) -> np.ndarray:
    """Covariance R(angle) diag(s1^2, s2^2) R(angle)^T of one Gaussian."""
    s = np.asarray(scale, dtype=np.float64)
    if s.shape != (2,):
        raise ValueError(f"scale must be a pair, got shape {s.shape}")
    if np.any(s <= 0):
        raise ValueError(f"scales must be positive, got {s}")
    c, sn = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -sn], [sn, c]])
    return rot @ np.diag(s**2) @ rot.T


def _cov_entries(gs: GaussianSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized world-space covariance entries (a, b, c) per Gaussian."""
    c = np.cos(gs.angle)
    s = np.sin(gs.angle)
    s1sq = gs.scale[:, 0] ** 2
    s2sq = gs.scale[:, 1] ** 2
    a = c * c * s1sq + s * s * s2sq
    b = c * s * (s1sq - s2sq)
    d = s * s * s1sq + c * c * s2sq
    return a, b, d


def _inverse_2x2(a, b, c, stats: RenderStats | None):
    """Inverses of symmetric [[a, b], [b, c]] with jitter on tiny determinants."""
    det = a * c - b * b
    bad = ~(det > DET_EPS)
    if np.any(bad):
        if stats is not None:
            stats.jittered_covariances += int(bad.sum())
        a = np.where(bad, a + JITTER, a)
        c = np.where(bad, c + JITTER, c)
        det = a * c - b * b
    ia = c / det
    ib = -b / det
    ic = a / det
    return a, b, c, ia, ib, ic


def _pixel_box(cx, cy, radius, width, height):
    """Inclusive (row_lo, row_hi, col_lo, col_hi) of pixel centers within radius."""
    col_lo = max(0, int(np.ceil(cx - radius - 0.5)))
    col_hi = min(width - 1, int(np.floor(cx + radius - 0.5)))
    row_lo = max(0, int(np.ceil(cy - radius - 0.5)))
    row_hi = min(height - 1, int(np.floor(cy + radius - 0.5)))
    return row_lo, row_hi, col_lo, col_hi


def _prepare(gs: GaussianSet, vp: Viewport, stats: RenderStats | None):
    mu = vp.world_to_pixel(gs.position)
    aw, bw, cw = _cov_entries(gs)
    s2 = vp.scale * vp.scale
    a, b, c, ia, ib, ic = _inverse_2x2(aw * s2, bw * s2, cw * s2, stats)
    lam_max = 0.5 * (a + c) + np.sqrt((0.5 * (a - c)) ** 2 + b * b)
    radius = SIGMA_CUTOFF * np.sqrt(lam_max)
    return mu, (ia, ib, ic), radius


def render(
    gs: GaussianSet, vp: Viewport, stats: RenderStats | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Composite a Gaussian set into an (H, W, 3) image and (H, W) alpha mask."""
    h, w = vp.height, vp.width
    image = np.zeros((h, w, 3))
    transmit = np.ones((h, w))
    mu, (ia, ib, ic), radius = _prepare(gs, vp, stats)
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5

    for g in range(len(gs)):
        r0, r1, c0, c1 = _pixel_box(mu[g, 0], mu[g, 1], radius[g], w, h)
        if r0 > r1 or c0 > c1:
            if stats is not None:
                stats.skipped_offscreen += 1
            continue
        dx = xs[c0 : c1 + 1] - mu[g, 0]
        dy = ys[r0 : r1 + 1] - mu[g, 1]
        quad = (
            ia[g] * dx[None, :] ** 2
            + 2.0 * ib[g] * dy[:, None] * dx[None, :]
            + ic[g] * dy[:, None] ** 2
        )
        alpha = np.clip(gs.opacity[g] * np.exp(-0.5 * quad), 0.0, ALPHA_MAX)
        t_region = transmit[r0 : r1 + 1, c0 : c1 + 1]
        weight = alpha * t_region
        image[r0 : r1 + 1, c0 : c1 + 1] += weight[:, :, None] * gs.color[g]
        transmit[r0 : r1 + 1, c0 : c1 + 1] = t_region * (1.0 - alpha)

    # the [0, 1] guard only absorbs float dust; gradients treat it as inactive
    return np.clip(image, 0.0, 1.0), 1.0 - transmit


def render_backward(
    gs: GaussianSet,
    vp: Viewport,
    grad_image: np.ndarray,
    grad_mask: np.ndarray,
) -> GaussianGrads:
    """Analytic gradients of the render expression.

    ``grad_image`` is (H, W, 3) and ``grad_mask`` (H, W); returns gradients
    for every Gaussian parameter. The 3-sigma cutoff contributes no
    gradient.
    """
    h, w = vp.height, vp.width
    grad_image = np.asarray(grad_image, dtype=np.float64)
    grad_mask = np.asarray(grad_mask, dtype=np.float64)
    if grad_image.shape != (h, w, 3):
        raise ValueError(f"grad_image shape {grad_image.shape}, expected {(h, w, 3)}")
    if grad_mask.shape != (h, w):
        raise ValueError(f"grad_mask shape {grad_mask.shape}, expected {(h, w)}")

    n = len(gs)
    grads = GaussianGrads.zeros(n)
    mu, (ia, ib, ic), radius = _prepare(gs, vp, None)
    aw, bw, cw = _cov_entries(gs)
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5

    # replay pass 1: totals
    total_image = np.zeros((h, w, 3))
    transmit = np.ones((h, w))
    caches = []
    for g in range(n):
        r0, r1, c0, c1 = _pixel_box(mu[g, 0], mu[g, 1], radius[g], w, h)
        if r0 > r1 or c0 > c1:
            caches.append(None)
            continue
        dx = xs[c0 : c1 + 1] - mu[g, 0]
        dy = ys[r0 : r1 + 1] - mu[g, 1]
        quad = (
            ia[g] * dx[None, :] ** 2
            + 2.0 * ib[g] * dy[:, None] * dx[None, :]
            + ic[g] * dy[:, None] ** 2
        )
        q = np.exp(-0.5 * quad)
        raw_alpha = gs.opacity[g] * q
        alpha = np.minimum(raw_alpha, ALPHA_MAX)
        caches.append((r0, r1, c0, c1, dx, dy, q, alpha, raw_alpha < ALPHA_MAX))
        t_region = transmit[r0 : r1 + 1, c0 : c1 + 1]
        total_image[r0 : r1 + 1, c0 : c1 + 1] += (alpha * t_region)[:, :, None] * gs.color[g]
        transmit[r0 : r1 + 1, c0 : c1 + 1] = t_region * (1.0 - alpha)
    t_final = transmit

    # replay pass 2: prefix state and per-Gaussian accumulation
    prefix = np.zeros((h, w, 3))
    transmit = np.ones((h, w))
    rot_s2 = vp.scale * vp.scale
    cos_t = np.cos(gs.angle)
    sin_t = np.sin(gs.angle)
    for g in range(n):
        cache = caches[g]
        if cache is None:
            continue
        r0, r1, c0, c1, dx, dy, q, alpha, unclamped = cache
        region = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        t_region = transmit[region]
        weight = alpha * t_region
        gi = grad_image[region]

        # color gradient: image is linear in color with weight alpha*T
        grads.color[g] = np.tensordot(gi, weight, axes=((0, 1), (0, 1)))

        # contribution of everything composited after g at each pixel
        contrib_g = weight[:, :, None] * gs.color[g]
        suffix = total_image[region] - prefix[region] - contrib_g
        one_minus = 1.0 - alpha
        dl_dalpha = np.einsum(
            "hwc,hwc->hw", gi, gs.color[g][None, None, :] * t_region[:, :, None] - suffix / one_minus[:, :, None]
        )
        dl_dalpha += grad_mask[region] * t_final[region] / one_minus

        # clamp: zero flow where alpha saturated
        dl_dalpha = dl_dalpha * unclamped
        grads.opacity[g] = float(np.sum(dl_dalpha * q))
        dl_dq = dl_dalpha * gs.opacity[g]
        dl_dquad = dl_dq * q * (-0.5)

        # quad = ia dx^2 + 2 ib dx dy + ic dy^2 with d = pixel - mu
        ax = ia[g] * dx[None, :] + ib[g] * dy[:, None]
        ay = ib[g] * dx[None, :] + ic[g] * dy[:, None]
        grad_mu_pix = np.array(
            [np.sum(dl_dquad * (-2.0) * ax), np.sum(dl_dquad * (-2.0) * ay)]
        )
        grads.position[g] = grad_mu_pix * vp.scale

        # gradient wrt the inverse covariance entries, then to Sigma
        g_ia = float(np.sum(dl_dquad * dx[None, :] ** 2))
        g_ib = float(np.sum(dl_dquad * 2.0 * dy[:, None] * dx[None, :]))
        g_ic = float(np.sum(dl_dquad * dy[:, None] ** 2))
        inv = np.array([[ia[g], ib[g]], [ib[g], ic[g]]])
        grad_inv = np.array([[g_ia, 0.5 * g_ib], [0.5 * g_ib, g_ic]])
        grad_cov_pix = -inv @ grad_inv @ inv
        grad_cov_world = rot_s2 * grad_cov_pix

        # Sigma = R diag(s^2) R^T
        c_, s_ = cos_t[g], sin_t[g]
        rot = np.array([[c_, -s_], [s_, c_]])
        drot = np.array([[-s_, -c_], [c_, -s_]])
        diag = np.diag(gs.scale[g] ** 2)
        dcov_dangle = drot @ diag @ rot.T + rot @ diag @ drot.T
        grads.angle[g] = float(np.sum(grad_cov_world * dcov_dangle))
        for k in range(2):
            dd = np.zeros((2, 2))
            dd[k, k] = 2.0 * gs.scale[g, k]
            dcov_ds = rot @ dd @ rot.T
            # chain to log scale
            grads.scale_log[g, k] = float(np.sum(grad_cov_world * dcov_ds)) * gs.scale[g, k]

        prefix[region] += contrib_g
        transmit[region] = t_region * one_minus

    return grads

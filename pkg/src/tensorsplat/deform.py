"""Skeletal animation for 2D Gaussian sets.

A skeleton is a tree of 2D bones, each a segment with a canonical origin,
direction and length. Forward kinematics turns per-bone pose angles (plus an
optional root translation) into rigid canonical-to-observed transforms.
Gaussians deform by linear blend skinning: each blends the bone transforms
with weights from a fixed analytic field, a softmax over negative
point-to-segment distances with temperature ``tau`` (the weights are strictly
positive and sum to one everywhere).

Blending is done in delta form, T = I + sum_b w_b (B_b - I), which is
identical to sum_b w_b B_b under the weight normalization but keeps the
all-identity case exact in floating point. Only positions and rotation
angles deform; scales, colors and opacities stay canonical. The observed
angle adds the rotation extracted from the blended linear part via atan2 of
its first column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import GaussianGrads, GaussianSet

DEFAULT_TAU = 0.1
COINCIDENT_EPS = 1e-9


@dataclass(frozen=True)
class Bone2D:
    parent: int | None
    origin: tuple[float, float]
    angle: float
    length: float


@dataclass(frozen=True)
class Skeleton2D:
    """Tree of bones; bone 0 is the root and parents precede children."""

    bones: tuple[Bone2D, ...]

    def __post_init__(self):
        if not self.bones:
            raise ValueError("skeleton needs at least one bone")
        for b, bone in enumerate(self.bones):
            if b == 0:
                if bone.parent is not None:
                    raise ValueError("bone 0 must be the root (parent None)")
            else:
                if bone.parent is None or not 0 <= bone.parent < b:
                    raise ValueError(
                        f"bone {b} parent {bone.parent} must point to an earlier bone"
                    )
            if not bone.length > 0:
                raise ValueError(f"bone {b} length must be positive, got {bone.length}")

    def __len__(self) -> int:
        return len(self.bones)

    @property
    def origins(self) -> np.ndarray:
        return np.array([b.origin for b in self.bones])

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Canonical (start, end) points of every bone segment."""
        starts = self.origins
        angles = np.array([b.angle for b in self.bones])
        lengths = np.array([b.length for b in self.bones])
        ends = starts + lengths[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return starts, ends

    @classmethod
    def chain(cls, base: tuple[float, float], lengths, angle: float = np.pi / 2) -> "Skeleton2D":
        """Serial chain starting at ``base``, each bone continuing ``angle``."""
        bones = []
        origin = np.asarray(base, dtype=float)
        direction = np.array([np.cos(angle), np.sin(angle)])
        for b, length in enumerate(lengths):
            bones.append(Bone2D(None if b == 0 else b - 1, tuple(origin), angle, float(length)))
            origin = origin + direction * length
        return cls(tuple(bones))


@dataclass
class Pose:
    """Per-bone rotation angles relative to rest, plus a root translation."""

    angles: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.angles.ndim != 1:
            raise ValueError("pose angles must be a flat array")
        if self.root_translation.shape != (2,):
            raise ValueError("root translation must be a 2-vector")
        if not (np.all(np.isfinite(self.angles)) and np.all(np.isfinite(self.root_translation))):
            raise ValueError("pose contains non-finite values")


@dataclass
class BoneTransforms:
    """Rigid canonical-to-observed transforms, x -> rot @ x + trans."""

    rot: np.ndarray  # (B, 2, 2)
    trans: np.ndarray  # (B, 2)

    def __len__(self) -> int:
        return len(self.rot)

    @classmethod
    def identity(cls, n: int) -> "BoneTransforms":
        return cls(np.tile(np.eye(2), (n, 1, 1)), np.zeros((n, 2)))


def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def forward_kinematics(sk: Skeleton2D, pose: Pose) -> BoneTransforms:
    """Compose per-bone rotations down the parent chain.

    Bone ``b`` rotates by ``pose.angles[b]`` about its canonical origin,
    carried by its parent's transform; the root additionally translates.
    A zero pose yields identity transforms.
    """
    if len(pose.angles) != len(sk):
        raise ValueError(f"pose has {len(pose.angles)} angles for {len(sk)} bones")
    rot = np.empty((len(sk), 2, 2))
    trans = np.empty((len(sk), 2))
    for b, bone in enumerate(sk.bones):
        origin = np.asarray(bone.origin)
        local_rot = _rotation(pose.angles[b])
        local_trans = origin - local_rot @ origin
        if b == 0:
            rot[0] = local_rot
            trans[0] = local_trans + pose.root_translation
        else:
            p = bone.parent
            rot[b] = rot[p] @ local_rot
            trans[b] = rot[p] @ local_trans + trans[p]
    return BoneTransforms(rot, trans)


# --------------------------------------------------------- skinning weights


def _segment_geometry(points: np.ndarray, sk: Skeleton2D):
    """Distances and closest points from each point to each bone segment."""
    starts, ends = sk.segments()
    v = ends - starts  # (B, 2)
    len_sq = np.sum(v * v, axis=1)  # (B,)
    rel = points[:, None, :] - starts[None, :, :]  # (N, B, 2)
    t = np.clip(np.einsum("nbk,bk->nb", rel, v) / len_sq[None, :], 0.0, 1.0)
    closest = starts[None, :, :] + t[:, :, None] * v[None, :, :]
    diff = points[:, None, :] - closest  # (N, B, 2)
    dist = np.sqrt(np.sum(diff * diff, axis=2))  # (N, B)
    return dist, diff


def skinning_weights(points, sk: Skeleton2D, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax over negative point-to-segment distances; rows sum to 1.

    Accepts a single point (2,) or a batch (N, 2); returns (B,) or (N, B).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    dist, _ = _segment_geometry(pts, sk)
    z = -dist / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=1, keepdims=True)
    return w[0] if single else w


def _weight_jacobian(points: np.ndarray, sk: Skeleton2D, tau: float):
    """Weights plus dw[n, b]/dp[n] as an (N, B, 2) array."""
    dist, diff = _segment_geometry(points, sk)
    z = -dist / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=1, keepdims=True)
    safe = np.maximum(dist, COINCIDENT_EPS)
    # dz_b/dp = -(p - closest_b) / (dist_b * tau); zero on a segment
    dz = -diff / (safe * tau)[:, :, None]
    dz[dist < COINCIDENT_EPS] = 0.0
    mean_dz = np.einsum("nb,nbk->nk", w, dz)
    dw = w[:, :, None] * (dz - mean_dz[:, None, :])
    return w, dw


# ------------------------------------------------------------ blend and lbs


def _blend(weights: np.ndarray, bt: BoneTransforms):
    """Delta-form blended affines: A = I + sum_b w_b (rot_b - I), t = sum w_b t_b."""
    rot_delta = bt.rot - np.eye(2)[None, :, :]
    a = np.eye(2)[None, :, :] + np.einsum("nb,bij->nij", weights, rot_delta)
    t = weights @ bt.trans
    return a, t


def lbs_apply(
    gs: GaussianSet, bt: BoneTransforms, sk: Skeleton2D, tau: float = DEFAULT_TAU
) -> GaussianSet:
    """Deform a canonical Gaussian set into observation space."""
    if len(bt) != len(sk):
        raise ValueError(f"{len(bt)} transforms for {len(sk)} bones")
    w = skinning_weights(gs.position, sk, tau)
    if w.ndim == 1:
        w = w[None, :]
    a, t = _blend(w, bt)
    position = np.einsum("nij,nj->ni", a, gs.position) + t
    angle = gs.angle + np.arctan2(a[:, 1, 0], a[:, 0, 0])
    return GaussianSet(
        position=position,
        scale=gs.scale.copy(),
        angle=angle,
        color=gs.color.copy(),
        opacity=gs.opacity.copy(),
    )


def lbs_backward(
    gs: GaussianSet,
    bt: BoneTransforms,
    sk: Skeleton2D,
    upstream: GaussianGrads,
    tau: float = DEFAULT_TAU,
) -> GaussianGrads:
    """Chain upstream observed-space gradients back to the canonical set.

    Includes the dependence of the blended transform on the canonical
    position through the skinning weight field. Scale, color and opacity
    gradients pass through unchanged; the angle gradient passes through plus
    its effect on the extracted blend rotation.
    """
    n = len(gs)
    w, dw = _weight_jacobian(gs.position, sk, tau)
    a, _ = _blend(w, bt)
    rot_delta = bt.rot - np.eye(2)[None, :, :]

    out = GaussianGrads.zeros(n)
    out.scale_log = upstream.scale_log.copy()
    out.color = upstream.color.copy()
    out.opacity = upstream.opacity.copy()
    out.angle = upstream.angle.copy()

    # direct term: mu_o = A mu + t with A treated constant
    out.position = np.einsum("nij,ni->nj", a, upstream.position)

    # per-bone sensitivities through the weight field
    # d mu_o / d w_b = (rot_b - I) mu + trans_b
    dmu_dw = np.einsum("bij,nj->nbi", rot_delta, gs.position) + bt.trans[None, :, :]
    pos_term = np.einsum("ni,nbi->nb", upstream.position, dmu_dw)

    # d angle_o / d w_b = (a00 * d a10 - a10 * d a00) / (a00^2 + a10^2)
    a00 = a[:, 0, 0]
    a10 = a[:, 1, 0]
    denom = a00 * a00 + a10 * a10
    dangle_dw = (
        a00[:, None] * rot_delta[None, :, 1, 0] - a10[:, None] * rot_delta[None, :, 0, 0]
    ) / denom[:, None]
    angle_term = upstream.angle[:, None] * dangle_dw

    out.position += np.einsum("nb,nbk->nk", pos_term + angle_term, dw)
    return out


# -------------------------------------------------------------- iso losses


def knn_edges(positions: np.ndarray, k: int = 5) -> np.ndarray:
    """Unique undirected k-nearest-neighbor pairs over canonical positions.

    Coincident pairs (distance below 1e-9) are dropped. Deterministic: ties
    break by index and the edge list is sorted.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if n < 2 or k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    delta = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(delta * delta, axis=2))
    np.fill_diagonal(dist, np.inf)
    k_eff = min(k, n - 1)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k_eff]
    pairs = set()
    for i in range(n):
        for j in order[i]:
            if dist[i, j] < COINCIDENT_EPS:
                continue
            pairs.add((min(i, int(j)), max(i, int(j))))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def _cov_from(scale: np.ndarray, angle: np.ndarray):
    """Per-Gaussian covariance entries (a, b, c) and derivatives.

    Returns cov (N, 3) packed as [a, b, c] plus d/d angle (N, 3) and
    d/d scale_k (N, 2, 3).
    """
    c = np.cos(angle)
    s = np.sin(angle)
    s1sq = scale[:, 0] ** 2
    s2sq = scale[:, 1] ** 2
    cov = np.stack(
        [c * c * s1sq + s * s * s2sq, c * s * (s1sq - s2sq), s * s * s1sq + c * c * s2sq],
        axis=1,
    )
    # d/d angle: differentiate the trig factors
    dang = np.stack(
        [
            2.0 * c * (-s) * s1sq + 2.0 * s * c * s2sq,
            (c * c - s * s) * (s1sq - s2sq),
            2.0 * s * c * s1sq + 2.0 * c * (-s) * s2sq,
        ],
        axis=1,
    )
    dscale = np.empty((len(scale), 2, 3))
    dscale[:, 0, 0] = c * c * 2.0 * scale[:, 0]
    dscale[:, 0, 1] = c * s * 2.0 * scale[:, 0]
    dscale[:, 0, 2] = s * s * 2.0 * scale[:, 0]
    dscale[:, 1, 0] = s * s * 2.0 * scale[:, 1]
    dscale[:, 1, 1] = -c * s * 2.0 * scale[:, 1]
    dscale[:, 1, 2] = c * c * 2.0 * scale[:, 1]
    return cov, dang, dscale


def _cov_frob(diff_packed: np.ndarray) -> np.ndarray:
    """Frobenius norm of symmetric 2x2 differences packed as [a, b, c]."""
    return np.sqrt(
        diff_packed[:, 0] ** 2 + 2.0 * diff_packed[:, 1] ** 2 + diff_packed[:, 2] ** 2
    )


@dataclass
class IsoResult:
    l_isopos: float
    l_isocov: float
    grad_canonical: GaussianGrads
    grad_observed: GaussianGrads


def iso_losses(
    canonical: GaussianSet,
    observed: GaussianSet,
    edges: np.ndarray,
    w_pos: float = 1.0,
    w_cov: float = 1.0,
) -> IsoResult:
    """As-isometric-as-possible regularizers over a fixed edge set.

    l_isopos penalizes the change of pairwise distances between canonical
    and observed positions; l_isocov the change of pairwise covariance
    differences. Gradients are returned for ``w_pos * l_isopos +
    w_cov * l_isocov``, separately with respect to the canonical and the
    observed set (the two are independent inputs here; any shared
    parameterization is the caller's chain rule).
    """
    n = len(canonical)
    if len(observed) != n:
        raise ValueError("canonical and observed sets must have the same count")
    grad_c = GaussianGrads.zeros(n)
    grad_o = GaussianGrads.zeros(n)
    edges = np.asarray(edges, dtype=np.int64)
    if len(edges) == 0:
        return IsoResult(0.0, 0.0, grad_c, grad_o)

    ea, eb = edges[:, 0], edges[:, 1]
    inv_e = 1.0 / len(edges)

    # positions
    dc_vec = canonical.position[ea] - canonical.position[eb]
    do_vec = observed.position[ea] - observed.position[eb]
    dc = np.linalg.norm(dc_vec, axis=1)
    do = np.linalg.norm(do_vec, axis=1)
    gap = dc - do
    l_isopos = float(np.mean(np.abs(gap)))
    sign = np.sign(gap)
    safe_dc = np.maximum(dc, COINCIDENT_EPS)
    safe_do = np.maximum(do, COINCIDENT_EPS)
    coef_c = (w_pos * inv_e) * sign / safe_dc
    coef_o = -(w_pos * inv_e) * sign / safe_do
    np.add.at(grad_c.position, ea, coef_c[:, None] * dc_vec)
    np.add.at(grad_c.position, eb, -coef_c[:, None] * dc_vec)
    np.add.at(grad_o.position, ea, coef_o[:, None] * do_vec)
    np.add.at(grad_o.position, eb, -coef_o[:, None] * do_vec)

    # covariances
    cov_c, dang_c, dsc_c = _cov_from(canonical.scale, canonical.angle)
    cov_o, dang_o, dsc_o = _cov_from(observed.scale, observed.angle)
    diff_c = cov_c[ea] - cov_c[eb]
    diff_o = cov_o[ea] - cov_o[eb]
    fc = _cov_frob(diff_c)
    fo = _cov_frob(diff_o)
    cgap = fo - fc
    l_isocov = float(np.mean(np.abs(cgap)))
    csign = np.sign(cgap)
    # dF/d(packed diff), accounting for the doubled off-diagonal entry
    pack_w = np.array([1.0, 2.0, 1.0])
    dfo = diff_o * pack_w[None, :] / np.maximum(fo, COINCIDENT_EPS)[:, None]
    dfc = diff_c * pack_w[None, :] / np.maximum(fc, COINCIDENT_EPS)[:, None]
    dfo[fo < COINCIDENT_EPS] = 0.0
    dfc[fc < COINCIDENT_EPS] = 0.0
    coef = w_cov * inv_e * csign

    def scatter(grads: GaussianGrads, dF, dang, dsc, scale, sgn):
        # edge gradient lands on endpoint a with +, endpoint b with -
        per_edge = coef * sgn
        for endpoint, esign in ((ea, 1.0), (eb, -1.0)):
            contrib_ang = esign * per_edge * np.einsum("ek,ek->e", dF, dang[endpoint])
            np.add.at(grads.angle, endpoint, contrib_ang)
            for k in range(2):
                contrib_s = esign * per_edge * np.einsum("ek,ek->e", dF, dsc[endpoint][:, k, :])
                # emitted in log-scale space
                np.add.at(grads.scale_log[:, k], endpoint, contrib_s * scale[endpoint, k])

    scatter(grad_o, dfo, dang_o, dsc_o, observed.scale, 1.0)
    scatter(grad_c, dfc, dang_c, dsc_c, canonical.scale, -1.0)

    return IsoResult(l_isopos, l_isocov, grad_c, grad_o)

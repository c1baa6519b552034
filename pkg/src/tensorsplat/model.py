"""Mapping between factorized raw parameter rows and renderable Gaussian sets.

The parameter tensor stores *raw* (pre-activation) values; activations are
applied when a per-identity slice is materialized, so the factorization is
unconstrained while every activated output satisfies the Gaussian set
invariants (positive scales, colors and opacities in [0, 1]).

Two parameter layouts exist. The 2D layout (9 dims per Gaussian) is the one
exercised end to end: position (2), log-scale (2), rotation angle (1), RGB
color logits (3), opacity logit (1). The 3D layout (43 dims: position 3,
log-scale 3, quaternion 4, 32 appearance features, opacity 1) is defined and
unit-tested at the type level only; there is no 3D renderer here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cp import CPModel, cp_power, reconstruct_full, reconstruct_slice
from .tensor_ops import rel_error


# ------------------------------------------------------------------ layouts


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    length: int

    @property
    def sl(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class ParamLayout:
    """Named contiguous blocks covering the per-Gaussian parameter vector."""

    name: str
    position: Block
    scale_log: Block
    rotation: Block
    appearance: Block
    opacity: Block

    def __post_init__(self):
        blocks = self.blocks()
        offset = 0
        for b in blocks:
            if b.offset != offset:
                raise ValueError(f"block {b.name} at offset {b.offset}, expected {offset}")
            offset += b.length

    def blocks(self) -> tuple[Block, ...]:
        return (self.position, self.scale_log, self.rotation, self.appearance, self.opacity)

    @property
    def total(self) -> int:
        return self.opacity.offset + self.opacity.length

    @property
    def residual_dims(self) -> int:
        """Width of a personalization residual row (appearance + opacity)."""
        return self.appearance.length + self.opacity.length


def layout_2d() -> ParamLayout:
    return ParamLayout(
        "2d",
        position=Block("position", 0, 2),
        scale_log=Block("scale_log", 2, 2),
        rotation=Block("rotation", 4, 1),
        appearance=Block("appearance", 5, 3),
        opacity=Block("opacity", 8, 1),
    )


def layout_3d() -> ParamLayout:
    return ParamLayout(
        "3d",
        position=Block("position", 0, 3),
        scale_log=Block("scale_log", 3, 3),
        rotation=Block("rotation", 6, 4),
        appearance=Block("appearance", 10, 32),
        opacity=Block("opacity", 42, 1),
    )


LAYOUTS = {"2d": layout_2d, "3d": layout_3d}


# -------------------------------------------------------------- activations


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("logit defined only on the open interval (0, 1)")
    return np.log(p) - np.log1p(-p)


def activate_blocks(raw: np.ndarray, layout: ParamLayout) -> dict[str, np.ndarray]:
    """Apply per-block activations to a raw (N_g, M) slice.

    position: identity; scale_log: exp; rotation: identity for the 2D angle,
    unit normalization for the 3D quaternion; appearance: sigmoid for 2D RGB
    logits, identity for 3D feature vectors; opacity: sigmoid.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != layout.total:
        raise ValueError(f"raw slice shape {raw.shape}, expected (*, {layout.total})")
    rotation = raw[:, layout.rotation.sl]
    if layout.rotation.length == 4:
        norms = np.linalg.norm(rotation, axis=1, keepdims=True)
        rotation = rotation / np.where(norms > 0, norms, 1.0)
    else:
        rotation = rotation.copy()
    appearance = raw[:, layout.appearance.sl]
    appearance = sigmoid(appearance) if layout.appearance.length == 3 else appearance.copy()
    return {
        "position": raw[:, layout.position.sl].copy(),
        "scale": np.exp(raw[:, layout.scale_log.sl]),
        "rotation": rotation,
        "appearance": appearance,
        "opacity": sigmoid(raw[:, layout.opacity.sl]),
    }


# ------------------------------------------------------------- gaussian set


@dataclass
class GaussianSet:
    """Activated 2D Gaussians for one identity.

    position: (N, 2) world units; scale: (N, 2) positive world units;
    angle: (N,) radians; color: (N, 3) RGB in [0, 1]; opacity: (N,) in [0, 1].
    """

    position: np.ndarray
    scale: np.ndarray
    angle: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    def __post_init__(self):
        n = len(self.position)
        shapes = {
            "position": (n, 2),
            "scale": (n, 2),
            "angle": (n,),
            "color": (n, 3),
            "opacity": (n,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ValueError(f"{name} has shape {arr.shape}, expected {want}")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.position)

    def validate(self) -> None:
        for name in ("position", "scale", "angle", "color", "opacity"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.scale <= 0.0):
            raise ValueError("scales must be positive")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        if np.any(self.opacity < 0.0) or np.any(self.opacity > 1.0):
            raise ValueError("opacities must lie in [0, 1]")

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.position.copy(),
            self.scale.copy(),
            self.angle.copy(),
            self.color.copy(),
            self.opacity.copy(),
        )


@dataclass
class GaussianGrads:
    """Per-Gaussian gradients flowing through the 2D pipeline.

    Scale gradients are carried with respect to *log* scale: the exp chain
    is applied where a linear-scale derivative first arises (see
    :func:`scale_grad_to_log`), so these rows apply directly to the raw
    scale_log block.
    """

    position: np.ndarray
    scale_log: np.ndarray
    angle: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(
            position=np.zeros((n, 2)),
            scale_log=np.zeros((n, 2)),
            angle=np.zeros(n),
            color=np.zeros((n, 3)),
            opacity=np.zeros(n),
        )

    def add_(self, other: "GaussianGrads") -> "GaussianGrads":
        self.position += other.position
        self.scale_log += other.scale_log
        self.angle += other.angle
        self.color += other.color
        self.opacity += other.opacity
        return self


def scale_grad_to_log(grad_scale: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Chain a d/d(scale) gradient through scale = exp(scale_log)."""
    return np.asarray(grad_scale) * np.asarray(scale)


def activate_2d(raw: np.ndarray) -> GaussianSet:
    """Activate a raw (N_g, 9) slice under the 2D layout."""
    blocks = activate_blocks(raw, layout_2d())
    return GaussianSet(
        position=blocks["position"],
        scale=blocks["scale"],
        angle=blocks["rotation"][:, 0],
        color=blocks["appearance"],
        opacity=blocks["opacity"][:, 0],
    )


def inverse_activate_2d(gs: GaussianSet) -> np.ndarray:
    """Raw (N_g, 9) slice whose activation reproduces ``gs``."""
    layout = layout_2d()
    raw = np.empty((len(gs), layout.total))
    raw[:, layout.position.sl] = gs.position
    raw[:, layout.scale_log.sl] = np.log(gs.scale)
    raw[:, layout.rotation.sl] = gs.angle[:, None]
    raw[:, layout.appearance.sl] = logit(gs.color)
    raw[:, layout.opacity.sl] = logit(gs.opacity)[:, None]
    return raw


def activation_backward(raw: np.ndarray, grads: GaussianGrads) -> np.ndarray:
    """Raw-slice gradient rows from activated-space gradients (2D layout).

    Position, angle and scale rows pass through unchanged (scale gradients
    already live in log space, which *is* the raw parameterization); color
    and opacity chain through the sigmoid derivative at the raw logits.
    """
    layout = layout_2d()
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != layout.total:
        raise ValueError(f"raw slice shape {raw.shape}, expected (*, {layout.total})")
    out = np.zeros_like(raw)
    out[:, layout.position.sl] = grads.position
    out[:, layout.scale_log.sl] = grads.scale_log
    out[:, layout.rotation.sl] = grads.angle[:, None]
    s_col = sigmoid(raw[:, layout.appearance.sl])
    out[:, layout.appearance.sl] = grads.color * s_col * (1.0 - s_col)
    s_op = sigmoid(raw[:, layout.opacity.sl])
    out[:, layout.opacity.sl] = grads.opacity[:, None] * s_op * (1.0 - s_op)
    return out


# -------------------------------------------------------------------- store


@dataclass
class FactorizedAvatarStore:
    """CP model plus layout, activation rules, and optional residuals.

    ``personalization``, when present, holds one additive pre-activation
    residual per identity over the appearance+opacity blocks, shaped
    (N_i, N_g, residual_dims).
    """

    model: CPModel
    layout: ParamLayout = field(default_factory=layout_2d)
    personalization: np.ndarray | None = None

    def __post_init__(self):
        if self.model.u_params.shape[0] != self.layout.total:
            raise ValueError(
                f"params factor has {self.model.u_params.shape[0]} rows, "
                f"layout expects {self.layout.total}"
            )
        if self.personalization is not None:
            want = (self.n_identities, self.n_gaussians, self.layout.residual_dims)
            if self.personalization.shape != want:
                raise ValueError(
                    f"personalization shape {self.personalization.shape}, expected {want}"
                )

    @property
    def n_identities(self) -> int:
        return self.model.u_identity.shape[0]

    @property
    def n_gaussians(self) -> int:
        return self.model.u_gaussian.shape[0]

    def enable_personalization(self) -> None:
        if self.personalization is None:
            self.personalization = np.zeros(
                (self.n_identities, self.n_gaussians, self.layout.residual_dims)
            )

    def raw_slice(self, i: int) -> np.ndarray:
        """Raw (N_g, M) parameters of identity ``i`` with residual applied."""
        raw = reconstruct_slice(self.model, i)
        if self.personalization is not None:
            res = self.personalization[i]
            app = self.layout.appearance
            raw[:, app.sl] += res[:, : app.length]
            raw[:, self.layout.opacity.sl] += res[:, app.length :]
        return raw

    def copy(self) -> "FactorizedAvatarStore":
        return FactorizedAvatarStore(
            self.model.copy(),
            self.layout,
            None if self.personalization is None else self.personalization.copy(),
        )


def slice_identity(store: FactorizedAvatarStore, i: int) -> GaussianSet:
    """Activated canonical-space Gaussians of identity ``i``."""
    if store.layout.name != "2d":
        raise ValueError("slice_identity materializes Gaussian sets for the 2D layout only")
    gs = activate_2d(store.raw_slice(i))
    gs.validate()
    return gs


@dataclass
class InitReport:
    fit_rel_error: float
    seed_rank: int
    low_rank_warning: bool


def init_store(
    seed_set: GaussianSet,
    n_identities: int,
    rank: int,
    seed: int = 0,
    iters_per_component: int = 100,
    restarts: int = 5,
) -> tuple[FactorizedAvatarStore, InitReport]:
    """Build a store from a single identity's Gaussians.

    Inverse activations turn the seed set into a raw slice; greedy power
    iteration factorizes the resulting (1, N_g, M) tensor, and the single
    identity row is copied to all ``n_identities`` rows so every identity
    starts from the same slice.
    """
    if n_identities < 1:
        raise ValueError(f"n_identities must be >= 1, got {n_identities}")
    raw = inverse_activate_2d(seed_set)
    tensor = raw[None, :, :]
    cp = cp_power(tensor, rank, iters_per_component=iters_per_component, restarts=restarts, seed=seed)
    u_identity = np.tile(cp.u_identity[0], (n_identities, 1))
    model = CPModel(rank, cp.u_params.copy(), u_identity, cp.u_gaussian.copy())
    fit = rel_error(tensor, reconstruct_full(cp))
    seed_rank = int(np.linalg.matrix_rank(raw))
    report = InitReport(
        fit_rel_error=fit,
        seed_rank=seed_rank,
        low_rank_warning=seed_rank < min(raw.shape),
    )
    return FactorizedAvatarStore(model), report


def add_identity(store: FactorizedAvatarStore) -> int:
    """Append one identity row initialized to the mean of existing rows.

    Existing slices are untouched; returns the new identity index.
    """
    mean_row = store.model.u_identity.mean(axis=0)
    store.model.u_identity = np.vstack([store.model.u_identity, mean_row[None, :]])
    if store.personalization is not None:
        zero = np.zeros((1, store.n_gaussians, store.layout.residual_dims))
        store.personalization = np.concatenate([store.personalization, zero], axis=0)
    return store.n_identities - 1


# -------------------------------------------------------------- train masks

MASK_MODES = ("full", "per_identity", "novel_identity", "personalization")


@dataclass
class TrainMask:
    """Boolean trainability masks per factor and residual."""

    mode: str
    identity: int | None
    m_params: np.ndarray
    m_identity: np.ndarray
    m_gaussian: np.ndarray
    m_residual: np.ndarray | None

    def trainable_count(self) -> int:
        n = int(self.m_params.sum() + self.m_identity.sum() + self.m_gaussian.sum())
        if self.m_residual is not None:
            n += int(self.m_residual.sum())
        return n


def make_mask(store: FactorizedAvatarStore, mode: str, identity: int | None = None) -> TrainMask:
    """Trainability mask for the given optimization mode.

    full: every CP factor entry, residuals frozen.
    per_identity(i): params and gaussian factors plus identity row i.
    novel_identity(i): only identity row i (plus residual i when present).
    personalization(i): only residual i.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    m = store.model
    m_params = np.zeros(m.u_params.shape, dtype=bool)
    m_identity = np.zeros(m.u_identity.shape, dtype=bool)
    m_gaussian = np.zeros(m.u_gaussian.shape, dtype=bool)
    m_residual = (
        np.zeros(store.personalization.shape, dtype=bool)
        if store.personalization is not None
        else None
    )

    if mode != "full":
        if identity is None:
            raise ValueError(f"mode {mode!r} requires an identity index")
        if not 0 <= identity < store.n_identities:
            raise ValueError(f"identity index {identity} out of range [0, {store.n_identities})")

    if mode == "full":
        m_params[:] = True
        m_identity[:] = True
        m_gaussian[:] = True
    elif mode == "per_identity":
        m_params[:] = True
        m_gaussian[:] = True
        m_identity[identity] = True
    elif mode == "novel_identity":
        m_identity[identity] = True
        if m_residual is not None:
            m_residual[identity] = True
    else:  # personalization
        if m_residual is None:
            raise ValueError("store has no personalization residuals; enable them first")
        m_residual[identity] = True

    return TrainMask(mode, identity, m_params, m_identity, m_gaussian, m_residual)

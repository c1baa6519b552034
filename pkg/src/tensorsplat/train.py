"""Losses, masked Adam with per-block learning rates, and training loops.

One training iteration renders one frame of one identity (round-robin over
identities), backpropagates the photometric, mask and isometry losses
through the renderer, the skinning deformation, the activations and the
factorized reconstruction, and applies a masked Adam step. Everything is
deterministic given the seed and configuration.

Per-block learning rates follow the parameter layout: position rows of the
parameter-mode factor and the whole identity/gaussian factors use an
exponentially decayed rate, while scale, rotation, appearance and opacity
rows use constant block rates. A dense per-identity baseline store (no
factorization, no sharing) trains through the same loop and serves as the
quality oracle for the factorized model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cp import backward_slice
from .dataset import IdentityData, SyntheticDataset
from .deform import DEFAULT_TAU, forward_kinematics, iso_losses, knn_edges, lbs_apply, lbs_backward
from .model import (
    FactorizedAvatarStore,
    GaussianGrads,
    GaussianSet,
    TrainMask,
    activate_2d,
    activation_backward,
    add_identity,
    inverse_activate_2d,
    layout_2d,
    make_mask,
)
from .render import Viewport, render, render_backward

MSE_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, iteration: int, identity: int, terms: dict[str, float]):
        self.iteration = iteration
        self.identity = identity
        self.terms = terms
        super().__init__(
            f"non-finite loss at iteration {iteration} (identity {identity}): {terms}"
        )


# ------------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    mask: float = 0.1
    isopos: float = 1.0
    isocov: float = 100.0

    def __post_init__(self):
        for name in ("l1", "mask", "isopos", "isocov"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class TotalLoss:
    total: float
    l1: float
    mask: float
    isopos: float
    isocov: float
    grad_image: np.ndarray
    grad_mask: np.ndarray
    grad_canonical: GaussianGrads
    grad_observed: GaussianGrads

    def terms(self) -> dict[str, float]:
        return {
            "total": self.total,
            "l1": self.l1,
            "mask": self.mask,
            "isopos": self.isopos,
            "isocov": self.isocov,
        }


def total_loss(
    pred_image: np.ndarray,
    pred_mask: np.ndarray,
    target_image: np.ndarray,
    target_mask: np.ndarray,
    canonical: GaussianSet,
    observed: GaussianSet,
    edges: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> TotalLoss:
    """Weighted L1 photometric + mask + isometry losses with upstream grads."""
    pred_image = np.asarray(pred_image, dtype=np.float64)
    pred_mask = np.asarray(pred_mask, dtype=np.float64)
    if pred_image.shape != np.shape(target_image):
        raise ValueError(f"image shapes differ: {pred_image.shape} vs {np.shape(target_image)}")
    if pred_mask.shape != np.shape(target_mask):
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {np.shape(target_mask)}")

    diff_image = pred_image - target_image
    diff_mask = pred_mask - target_mask
    l1 = float(np.mean(np.abs(diff_image)))
    mask_term = float(np.mean(np.abs(diff_mask)))
    grad_image = weights.l1 * np.sign(diff_image) / diff_image.size
    grad_mask = weights.mask * np.sign(diff_mask) / diff_mask.size

    iso = iso_losses(canonical, observed, edges, weights.isopos, weights.isocov)
    total = (
        weights.l1 * l1
        + weights.mask * mask_term
        + weights.isopos * iso.l_isopos
        + weights.isocov * iso.l_isocov
    )
    return TotalLoss(
        total,
        l1,
        mask_term,
        iso.l_isopos,
        iso.l_isocov,
        grad_image,
        grad_mask,
        iso.grad_canonical,
        iso.grad_observed,
    )


def psnr(pred_image: np.ndarray, target_image: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over RGB in [0, 1], floor-guarded."""
    mse = float(np.mean((np.asarray(pred_image) - np.asarray(target_image)) ** 2))
    return 10.0 * np.log10(1.0 / max(mse, MSE_FLOOR))


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class OptConfig:
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_appearance: float = 2.5e-3
    lr_opacity: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None  # decay horizon; defaults to the run length


def harness_opt() -> OptConfig:
    """Decayed schedule calibrated for desk-scale (~2k iteration) runs.

    The default position/identity/gaussian schedule (1.6e-4 decaying to
    1.6e-6) assumes a production-length run of about 1e5 iterations; over a
    2000-iteration harness run it moves parameters 50x less in total. This
    schedule scales the decayed rates by that iteration ratio so the overall
    movement budget matches, and keeps the constant per-block rates as they
    are (they converge well within the short run already).
    """
    return OptConfig(lr_position=8e-3, lr_position_final=8e-5)


def decayed_lr(step: int, max_steps: int, lr_init: float, lr_final: float) -> float:
    """Exponential decay from lr_init to exactly lr_final at step == max_steps."""
    if step >= max_steps:
        return lr_final
    if lr_init == 0.0:
        return 0.0
    return lr_init * (lr_final / lr_init) ** (step / max_steps)


def _block_rates(opt: OptConfig, decayed: float) -> dict[str, float]:
    return {
        "position": decayed,
        "scale_log": opt.lr_scale,
        "rotation": opt.lr_rotation,
        "appearance": opt.lr_appearance,
        "opacity": opt.lr_opacity,
    }


def _layout_row_rates(opt: OptConfig, decayed: float) -> np.ndarray:
    """Per-parameter-dim learning rates for the 2D layout (length M)."""
    layout = layout_2d()
    rates = np.empty(layout.total)
    by_block = _block_rates(opt, decayed)
    for block in layout.blocks():
        rates[block.sl] = by_block[block.name]
    return rates


class AdamState:
    """Masked Adam over named parameter groups with per-entry learning rates."""

    def __init__(self, opt: OptConfig, shapes: dict[str, tuple[int, ...]]):
        self.opt = opt
        self.step_count = 0
        self.skipped_nonfinite = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        masks: dict[str, np.ndarray],
        lrs: dict[str, np.ndarray],
    ) -> None:
        """One bias-corrected Adam update applied only where masks are true."""
        opt = self.opt
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - opt.beta1**t
        bc2 = 1.0 - opt.beta2**t
        for key, theta in params.items():
            g = grads[key]
            sel = masks[key]
            if not sel.any():
                continue
            finite = np.isfinite(g)
            bad = sel & ~finite
            if bad.any():
                self.skipped_nonfinite += int(bad.sum())
                sel = sel & finite
                if not sel.any():
                    continue
            gm = g[sel]
            m = self.m[key]
            v = self.v[key]
            m[sel] = opt.beta1 * m[sel] + (1.0 - opt.beta1) * gm
            v[sel] = opt.beta2 * v[sel] + (1.0 - opt.beta2) * gm * gm
            m_hat = m[sel] / bc1
            v_hat = v[sel] / bc2
            lr = lrs[key][sel] if isinstance(lrs[key], np.ndarray) else lrs[key]
            theta[sel] = theta[sel] - lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    lrs: dict[str, np.ndarray],
) -> None:
    state.step(params, grads, masks, lrs)


# ----------------------------------------------------------- store adapters


@dataclass
class DenseAvatarStore:
    """Per-identity raw parameters with no sharing (the rank-full baseline)."""

    raw: np.ndarray  # (N_i, N_g, M)

    @property
    def n_identities(self) -> int:
        return self.raw.shape[0]

    @property
    def n_gaussians(self) -> int:
        return self.raw.shape[1]

    def raw_slice(self, i: int) -> np.ndarray:
        return self.raw[i].copy()

    def copy(self) -> "DenseAvatarStore":
        return DenseAvatarStore(self.raw.copy())


def init_dense_store(seed_set: GaussianSet, n_identities: int) -> DenseAvatarStore:
    raw = inverse_activate_2d(seed_set)
    return DenseAvatarStore(np.tile(raw, (n_identities, 1, 1)))


def _param_groups(store) -> dict[str, np.ndarray]:
    if isinstance(store, DenseAvatarStore):
        return {"dense": store.raw}
    groups = {
        "params": store.model.u_params,
        "identity": store.model.u_identity,
        "gaussian": store.model.u_gaussian,
    }
    if store.personalization is not None:
        groups["residual"] = store.personalization
    return groups


def _mask_groups(store, mask: TrainMask | None) -> dict[str, np.ndarray]:
    if isinstance(store, DenseAvatarStore):
        return {"dense": np.ones(store.raw.shape, dtype=bool)}
    if mask is None:
        raise ValueError("factorized store requires a TrainMask")
    groups = {
        "params": mask.m_params,
        "identity": mask.m_identity,
        "gaussian": mask.m_gaussian,
    }
    if store.personalization is not None:
        groups["residual"] = (
            mask.m_residual
            if mask.m_residual is not None
            else np.zeros(store.personalization.shape, dtype=bool)
        )
    return groups


def _lr_groups(store, opt: OptConfig, step: int) -> dict[str, np.ndarray]:
    decayed = decayed_lr(step, opt.max_steps, opt.lr_position, opt.lr_position_final)
    row_rates = _layout_row_rates(opt, decayed)
    if isinstance(store, DenseAvatarStore):
        return {"dense": np.broadcast_to(row_rates, store.raw.shape)}
    r = store.model.rank
    groups = {
        "params": np.broadcast_to(row_rates[:, None], (len(row_rates), r)),
        "identity": np.full(store.model.u_identity.shape, decayed),
        "gaussian": np.full(store.model.u_gaussian.shape, decayed),
    }
    if store.personalization is not None:
        layout = store.layout
        res_rates = np.empty(layout.residual_dims)
        res_rates[: layout.appearance.length] = opt.lr_appearance
        res_rates[layout.appearance.length :] = opt.lr_opacity
        groups["residual"] = np.broadcast_to(res_rates, store.personalization.shape)
    return groups


def _grad_groups(store, identity: int, grad_raw: np.ndarray) -> dict[str, np.ndarray]:
    if isinstance(store, DenseAvatarStore):
        g = np.zeros_like(store.raw)
        g[identity] = grad_raw
        return {"dense": g}
    fg = backward_slice(store.model, identity, grad_raw)
    groups = {"params": fg.g_params, "identity": fg.g_identity, "gaussian": fg.g_gaussian}
    if store.personalization is not None:
        layout = store.layout
        res = np.zeros_like(store.personalization)
        res[identity, :, : layout.appearance.length] = grad_raw[:, layout.appearance.sl]
        res[identity, :, layout.appearance.length :] = grad_raw[:, layout.opacity.sl]
        groups["residual"] = res
    return groups


# ------------------------------------------------------------ training loop


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    warmup: int = 0
    mode: str = "full"
    mode_identity: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    opt: OptConfig = field(default_factory=OptConfig)
    tau: float = DEFAULT_TAU
    knn_k: int = 5
    knn_rebuild_rms: float = 1e-3

    def resolved_opt(self) -> OptConfig:
        if self.opt.max_steps is not None:
            return self.opt
        return dataclasses.replace(self.opt, max_steps=max(self.iterations, 1))


@dataclass
class TrainHistory:
    iteration: np.ndarray
    identity: np.ndarray
    loss_total: np.ndarray
    loss_l1: np.ndarray
    loss_mask: np.ndarray
    loss_isopos: np.ndarray
    loss_isocov: np.ndarray
    psnr: np.ndarray

    @classmethod
    def empty(cls) -> "TrainHistory":
        z = np.zeros(0)
        return cls(np.zeros(0, dtype=int), np.zeros(0, dtype=int), z, z, z, z, z, z)


class _EdgeCache:
    """Per-identity k-NN edges, rebuilt when canonical positions drift."""

    def __init__(self, k: int, rebuild_rms: float):
        self.k = k
        self.rebuild_rms = rebuild_rms
        self._built: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def edges_for(self, identity: int, positions: np.ndarray) -> np.ndarray:
        cached = self._built.get(identity)
        if cached is not None:
            ref, edges = cached
            rms = float(np.sqrt(np.mean((positions - ref) ** 2)))
            if rms <= self.rebuild_rms:
                return edges
        edges = knn_edges(positions, self.k)
        self._built[identity] = (positions.copy(), edges)
        return edges


def _train_step_forward(store, dataset: SyntheticDataset, identity: int, frame, config, cache):
    data = dataset.identities[identity]
    raw = store.raw_slice(identity)
    canonical = activate_2d(raw)
    canonical.validate()
    edges = cache.edges_for(identity, canonical.position)
    bt = forward_kinematics(data.skeleton, frame.pose)
    observed = lbs_apply(canonical, bt, data.skeleton, config.tau)
    image, mask_img = render(observed, dataset.viewport)
    tl = total_loss(
        image, mask_img, frame.image, frame.mask, canonical, observed, edges, config.weights
    )
    return raw, canonical, observed, bt, image, tl


def train(store, dataset: SyntheticDataset, config: TrainConfig) -> TrainHistory:
    """Optimize ``store`` in place against the dataset's train split.

    Round-robin over identities, one frame per identity per cycle. In
    ``per_identity``/``novel_identity``/``personalization`` modes only the
    selected identity's frames are visited and the corresponding mask
    freezes everything else. Returns the per-iteration loss/PSNR history.
    """
    if store.n_identities < dataset.spec.n_identities:
        raise ValueError(
            f"store has {store.n_identities} identities, dataset needs {dataset.spec.n_identities}"
        )
    opt = config.resolved_opt()
    dense = isinstance(store, DenseAvatarStore)
    mask = None if dense else make_mask(store, config.mode, config.mode_identity)
    if config.mode == "full":
        identity_cycle = list(range(dataset.spec.n_identities))
    else:
        identity_cycle = [config.mode_identity]
    params = _param_groups(store)
    masks = _mask_groups(store, mask)
    state = AdamState(opt, {k: v.shape for k, v in params.items()})
    cache = _EdgeCache(config.knn_k, config.knn_rebuild_rms)
    frame_counter = {i: 0 for i in identity_cycle}

    hist = {k: [] for k in ("iteration", "identity", "total", "l1", "mask", "isopos", "isocov", "psnr")}

    for it in range(config.iterations):
        identity = identity_cycle[it % len(identity_cycle)]
        frames = dataset.identities[identity].train_frames
        frame = frames[frame_counter[identity] % len(frames)]
        frame_counter[identity] += 1

        raw, canonical, observed, bt, image, tl = _train_step_forward(
            store, dataset, identity, frame, config, cache
        )
        if not np.isfinite(tl.total):
            raise TrainingDivergedError(it, identity, tl.terms())

        hist["iteration"].append(it)
        hist["identity"].append(identity)
        hist["total"].append(tl.total)
        hist["l1"].append(tl.l1)
        hist["mask"].append(tl.mask)
        hist["isopos"].append(tl.isopos)
        hist["isocov"].append(tl.isocov)
        hist["psnr"].append(psnr(image, frame.image))

        if it < config.warmup:
            continue

        sk = dataset.identities[identity].skeleton
        obs_grads = render_backward(observed, dataset.viewport, tl.grad_image, tl.grad_mask)
        obs_grads.add_(tl.grad_observed)
        can_grads = lbs_backward(canonical, bt, sk, obs_grads, config.tau)
        can_grads.add_(tl.grad_canonical)
        grad_raw = activation_backward(raw, can_grads)
        grads = _grad_groups(store, identity, grad_raw)
        lrs = _lr_groups(store, opt, state.step_count + 1)
        state.step(params, grads, masks, lrs)

    return TrainHistory(
        iteration=np.array(hist["iteration"], dtype=int),
        identity=np.array(hist["identity"], dtype=int),
        loss_total=np.array(hist["total"]),
        loss_l1=np.array(hist["l1"]),
        loss_mask=np.array(hist["mask"]),
        loss_isopos=np.array(hist["isopos"]),
        loss_isocov=np.array(hist["isocov"]),
        psnr=np.array(hist["psnr"]),
    )


# ------------------------------------------------------------- evaluation


@dataclass
class FrameMetric:
    identity: int
    frame: int
    psnr: float


@dataclass
class Metrics:
    frames: list[FrameMetric]
    mean_psnr: float
    per_identity: dict[int, float]


def render_identity_frame(store, dataset: SyntheticDataset, identity: int, pose) -> tuple[np.ndarray, np.ndarray]:
    """Deform and render one identity under one pose."""
    data = dataset.identities[identity]
    canonical = activate_2d(store.raw_slice(identity))
    observed = lbs_apply(canonical, forward_kinematics(data.skeleton, pose), data.skeleton)
    return render(observed, dataset.viewport)


def evaluate(store, dataset: SyntheticDataset, split: str) -> Metrics:
    """Render every frame of the split and aggregate PSNR."""
    if split not in ("train", "held_out"):
        raise ValueError(f"split must be 'train' or 'held_out', got {split!r}")
    frames: list[FrameMetric] = []
    per_identity: dict[int, float] = {}
    for i in range(dataset.spec.n_identities):
        values = []
        for k, frame in enumerate(dataset.frames(i, split)):
            image, _ = render_identity_frame(store, dataset, i, frame.pose)
            value = psnr(image, frame.image)
            frames.append(FrameMetric(i, k, value))
            values.append(value)
        if values:
            per_identity[i] = float(np.mean(values))
    mean = float(np.mean([f.psnr for f in frames])) if frames else float("nan")
    return Metrics(frames, mean, per_identity)


# ------------------------------------------------- novel identity and tuning


def fit_novel_identity(
    store: FactorizedAvatarStore,
    dataset: SyntheticDataset,
    novel: IdentityData,
    config: TrainConfig,
    with_residual: bool = False,
) -> tuple[int, TrainHistory]:
    """Add one identity row and fit it on the novel identity's frames.

    Shared factors stay frozen; every pre-existing identity's slice is
    bit-identical afterwards. Returns the new identity index.
    """
    idx = add_identity(store)
    if with_residual:
        store.enable_personalization()
    extended = dataset.with_identity(novel)
    run_cfg = dataclasses.replace(config, mode="novel_identity", mode_identity=idx)
    history = train(store, extended, run_cfg)
    return idx, history


def personalize(
    store: FactorizedAvatarStore,
    dataset: SyntheticDataset,
    identity: int,
    config: TrainConfig,
) -> TrainHistory:
    """Optimize only identity ``identity``'s appearance/opacity residual."""
    if not 0 <= identity < store.n_identities:
        raise ValueError(f"identity {identity} out of range")
    store.enable_personalization()
    run_cfg = dataclasses.replace(config, mode="personalization", mode_identity=identity)
    return train(store, dataset, run_cfg)

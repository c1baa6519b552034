import numpy as np
import pytest

from tensorsplat.cp import CPModel, reconstruct_slice
from tensorsplat.model import (
    FactorizedAvatarStore,
    GaussianGrads,
    GaussianSet,
    activate_2d,
    activate_blocks,
    activation_backward,
    add_identity,
    init_store,
    inverse_activate_2d,
    layout_2d,
    layout_3d,
    logit,
    make_mask,
    scale_grad_to_log,
    sigmoid,
    slice_identity,
)

from fdcheck import assert_grad_close, central_diff


def random_gaussian_set(n, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianSet(
        position=rng.uniform(-1, 1, (n, 2)),
        scale=rng.uniform(0.05, 0.3, (n, 2)),
        angle=rng.uniform(-np.pi, np.pi, n),
        color=rng.uniform(0.1, 0.9, (n, 3)),
        opacity=rng.uniform(0.2, 0.9, n),
    )


def zero_store(n_identities=2, n_gaussians=4, rank=2):
    m = CPModel(
        rank,
        np.zeros((9, rank)),
        np.zeros((n_identities, rank)),
        np.zeros((n_gaussians, rank)),
    )
    return FactorizedAvatarStore(m)


def random_store(n_identities=3, n_gaussians=5, rank=2, seed=0):
    rng = np.random.default_rng(seed)
    m = CPModel(
        rank,
        rng.normal(0, 0.4, (9, rank)),
        rng.normal(0, 0.4, (n_identities, rank)),
        rng.normal(0, 0.4, (n_gaussians, rank)),
    )
    return FactorizedAvatarStore(m)


# ------------------------------------------------------------------ layouts


def test_layout_totals():
    assert layout_2d().total == 9
    assert layout_3d().total == 43
    assert layout_2d().residual_dims == 4
    assert layout_3d().residual_dims == 33


def test_layout_blocks_contiguous_cover():
    for layout in (layout_2d(), layout_3d()):
        offset = 0
        for b in layout.blocks():
            assert b.offset == offset
            offset += b.length
        assert offset == layout.total


def test_3d_layout_activations():
    rng = np.random.default_rng(1)
    layout = layout_3d()
    raw = rng.normal(size=(6, layout.total))
    blocks = activate_blocks(raw, layout)
    assert blocks["position"].shape == (6, 3)
    assert np.all(blocks["scale"] > 0)
    norms = np.linalg.norm(blocks["rotation"], axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)
    # 32-dim feature block passes through untouched
    assert np.array_equal(blocks["appearance"], raw[:, layout.appearance.sl])
    assert np.all((blocks["opacity"] > 0) & (blocks["opacity"] < 1))


# ----------------------------------------------------------------- slicing


def test_slice_identity_zero_raw_activation_identities():
    store = zero_store()
    gs = slice_identity(store, 0)
    assert np.all(gs.position == 0.0)
    assert np.all(gs.scale == 1.0)
    assert np.all(gs.angle == 0.0)
    assert np.all(gs.color == 0.5)
    assert np.all(gs.opacity == 0.5)


def test_slice_identity_zero_residual_is_noop():
    store = random_store(seed=2)
    base = slice_identity(store, 1)
    store.enable_personalization()
    with_res = slice_identity(store, 1)
    for name in ("position", "scale", "angle", "color", "opacity"):
        assert np.array_equal(getattr(base, name), getattr(with_res, name))


def test_slice_identity_residual_shifts_appearance_only():
    store = random_store(seed=3)
    base = slice_identity(store, 0)
    store.enable_personalization()
    store.personalization[0, :, :3] = 0.7
    shifted = slice_identity(store, 0)
    assert np.array_equal(shifted.position, base.position)
    assert np.array_equal(shifted.scale, base.scale)
    assert np.all(shifted.color > base.color)


def test_sigmoid_limits():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(40.0) > 1.0 - 1e-12
    assert sigmoid(-40.0) < 1e-12


def test_slice_identity_index_error():
    store = zero_store(n_identities=2)
    with pytest.raises(ValueError):
        slice_identity(store, 2)


def test_activated_outputs_satisfy_invariants_fuzz():
    rng = np.random.default_rng(4)
    for _ in range(20):
        raw = rng.normal(0, 3, size=(8, 9))
        gs = activate_2d(raw)
        gs.validate()


# ------------------------------------------------------------- activations


def test_inverse_activation_round_trip():
    gs = random_gaussian_set(10, seed=5)
    back = activate_2d(inverse_activate_2d(gs))
    for name in ("position", "scale", "angle", "color", "opacity"):
        assert np.allclose(getattr(back, name), getattr(gs, name), atol=1e-12)


def test_logit_domain():
    with pytest.raises(ValueError):
        logit(np.array([0.0]))
    with pytest.raises(ValueError):
        logit(np.array([1.0]))


def test_activation_backward_sigmoid_derivative_at_zero():
    raw = np.zeros((1, 9))
    grads = GaussianGrads.zeros(1)
    grads.opacity[:] = 1.0
    grads.color[:] = 1.0
    out = activation_backward(raw, grads)
    layout = layout_2d()
    assert np.allclose(out[:, layout.opacity.sl], 0.25)
    assert np.allclose(out[:, layout.appearance.sl], 0.25)


def test_scale_grad_exp_chain_at_zero():
    # at scale_log = 0 the exp chain multiplies by exactly 1
    assert scale_grad_to_log(np.array([1.0]), np.exp(np.array([0.0])))[0] == 1.0


def test_activation_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    raw = rng.normal(0, 0.8, size=(4, 9))
    w = {
        "position": rng.normal(size=(4, 2)),
        "scale": rng.normal(size=(4, 2)),
        "angle": rng.normal(size=4),
        "color": rng.normal(size=(4, 3)),
        "opacity": rng.normal(size=4),
    }

    def loss(flat):
        gs = activate_2d(flat.reshape(4, 9))
        return float(
            np.sum(w["position"] * gs.position)
            + np.sum(w["scale"] * gs.scale)
            + np.sum(w["angle"] * gs.angle)
            + np.sum(w["color"] * gs.color)
            + np.sum(w["opacity"] * gs.opacity)
        )

    gs = activate_2d(raw)
    grads = GaussianGrads(
        position=w["position"],
        scale_log=scale_grad_to_log(w["scale"], gs.scale),
        angle=w["angle"],
        color=w["color"],
        opacity=w["opacity"],
    )
    analytic = activation_backward(raw, grads)
    fd = central_diff(loss, raw.ravel()).reshape(raw.shape)
    assert_grad_close(analytic, fd, 1e-6, what="activation")


# --------------------------------------------------------------- init store


def test_init_store_copies_row_to_all_identities():
    seed_set = random_gaussian_set(16, seed=7)
    store, report = init_store(seed_set, n_identities=4, rank=8, seed=7)
    base = slice_identity(store, 0)
    for i in range(1, 4):
        gs = slice_identity(store, i)
        for name in ("position", "scale", "angle", "color", "opacity"):
            assert np.max(np.abs(getattr(gs, name) - getattr(base, name))) <= 1e-9


def test_init_store_fit_quality():
    seed_set = random_gaussian_set(64, seed=8)
    store, report = init_store(seed_set, n_identities=2, rank=16, seed=8)
    raw_truth = inverse_activate_2d(seed_set)
    raw_fit = store.raw_slice(0)
    err = np.linalg.norm(raw_fit - raw_truth) / np.linalg.norm(raw_truth)
    assert err < 0.05
    assert report.fit_rel_error < 0.05
    assert not report.low_rank_warning


def test_init_store_degenerate_seed_warns():
    n = 12
    gs = GaussianSet(
        position=np.zeros((n, 2)),
        scale=np.full((n, 2), 0.5),
        angle=np.zeros(n),
        color=np.full((n, 3), 0.5),
        opacity=np.full(n, 0.5),
    )
    store, report = init_store(gs, n_identities=2, rank=4, seed=9)
    assert report.low_rank_warning
    slice_identity(store, 0).validate()


# ------------------------------------------------------------- add identity


def test_add_identity_preserves_existing_slices():
    store = random_store(n_identities=4, seed=10)
    before = [store.raw_slice(i).copy() for i in range(4)]
    new = add_identity(store)
    assert new == 4
    assert store.n_identities == 5
    for i in range(4):
        assert np.array_equal(store.raw_slice(i), before[i])


def test_add_identity_mean_row_linearity():
    store = random_store(n_identities=3, seed=11)
    mean_row = store.model.u_identity.mean(axis=0)
    new = add_identity(store)
    got = reconstruct_slice(store.model, new)
    expected = np.einsum(
        "r,gr,pr->gp", mean_row, store.model.u_gaussian, store.model.u_params
    )
    assert np.allclose(got, expected, atol=1e-15)


def test_add_identity_repeated_appends_in_order():
    store = random_store(n_identities=2, seed=12)
    idx1 = add_identity(store)
    idx2 = add_identity(store)
    assert (idx1, idx2) == (2, 3)
    assert store.model.u_identity.shape[0] == 4


def test_add_identity_extends_personalization():
    store = random_store(n_identities=2, seed=13)
    store.enable_personalization()
    store.personalization[:] = 1.0
    add_identity(store)
    assert store.personalization.shape[0] == 3
    assert np.all(store.personalization[2] == 0.0)
    assert np.all(store.personalization[:2] == 1.0)


# -------------------------------------------------------------------- masks


def test_make_mask_novel_identity_counts():
    store = random_store(n_identities=3, rank=2, seed=14)
    mask = make_mask(store, "novel_identity", 1)
    assert mask.m_identity.sum() == store.model.rank
    assert mask.m_identity[1].all()
    assert mask.m_params.sum() == 0
    assert mask.m_gaussian.sum() == 0


def test_make_mask_full_covers_cp_param_count():
    store = random_store(n_identities=3, n_gaussians=5, rank=2, seed=15)
    mask = make_mask(store, "full")
    assert mask.trainable_count() == (9 + 3 + 5) * 2


def test_make_mask_per_identity():
    store = random_store(n_identities=3, seed=16)
    mask = make_mask(store, "per_identity", 2)
    assert mask.m_params.all()
    assert mask.m_gaussian.all()
    assert mask.m_identity[2].all()
    assert mask.m_identity[:2].sum() == 0


def test_make_mask_personalization_requires_residuals():
    store = random_store(seed=17)
    with pytest.raises(ValueError):
        make_mask(store, "personalization", 0)
    store.enable_personalization()
    mask = make_mask(store, "personalization", 0)
    assert mask.m_residual[0].all()
    assert mask.m_residual[1:].sum() == 0
    assert mask.m_params.sum() + mask.m_identity.sum() + mask.m_gaussian.sum() == 0


def test_make_mask_errors():
    store = random_store(seed=18)
    with pytest.raises(ValueError):
        make_mask(store, "bogus")
    with pytest.raises(ValueError):
        make_mask(store, "per_identity", 99)
    with pytest.raises(ValueError):
        make_mask(store, "per_identity")

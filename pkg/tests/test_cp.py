import numpy as np
import pytest

from tensorsplat.cp import (
    CPModel,
    backward_full,
    backward_slice,
    cp_als,
    cp_power,
    param_count,
    reconstruct_full,
    reconstruct_slice,
)
from tensorsplat.tensor_ops import fold, khatri_rao, rel_error

from fdcheck import assert_grad_close, central_diff


def random_model(dims, rank, seed=0):
    rng = np.random.default_rng(seed)
    n1, n2, n3 = dims
    return CPModel(
        rank,
        u_params=rng.standard_normal((n3, rank)),
        u_identity=rng.standard_normal((n1, rank)),
        u_gaussian=rng.standard_normal((n2, rank)),
    )


def rank1_tensor(a, b, c):
    return np.einsum("i,j,k->ijk", a, b, c)


# ---------------------------------------------------------------- reconstruct


def test_reconstruct_all_ones_rank1_and_rank2():
    for rank, value in ((1, 1.0), (2, 2.0)):
        m = CPModel(rank, np.ones((3, rank)), np.ones((2, rank)), np.ones((4, rank)))
        t = reconstruct_full(m)
        assert t.shape == (2, 4, 3)
        assert np.all(t == value)


def test_reconstruct_matches_matrix_product_path():
    m = random_model((3, 4, 5), 3, seed=1)
    t = reconstruct_full(m)
    # mode-2 unfolding equals u_gaussian @ khatri_rao(u_identity, u_params)^T
    w2 = m.u_gaussian @ khatri_rao(m.u_identity, m.u_params).T
    t_alt = fold(w2, 2, m.dims)
    assert np.max(np.abs(t - t_alt)) <= 1e-12


def test_reconstruct_slice_matches_full_exact():
    m = random_model((4, 5, 3), 2, seed=2)
    full = reconstruct_full(m)
    for i in range(4):
        assert np.array_equal(reconstruct_slice(m, i), full[i])


def test_reconstruct_slice_ignores_other_rows():
    m = random_model((4, 5, 3), 2, seed=3)
    before = reconstruct_slice(m, 1)
    m2 = m.copy()
    m2.u_identity[0] = 0.0
    m2.u_identity[3] = 0.0
    assert np.array_equal(reconstruct_slice(m2, 1), before)


def test_reconstruct_slice_rank1_scaling():
    rng = np.random.default_rng(4)
    g = rng.standard_normal((5, 1))
    p = rng.standard_normal((3, 1))
    m = CPModel(1, p, np.array([[2.0], [1.0]]), g)
    expected = 2.0 * np.outer(g[:, 0], p[:, 0])
    assert np.allclose(reconstruct_slice(m, 0), expected, atol=1e-15)


def test_reconstruct_slice_bad_index():
    m = random_model((2, 2, 2), 1)
    with pytest.raises(ValueError):
        reconstruct_slice(m, 2)
    with pytest.raises(ValueError):
        reconstruct_slice(m, -1)


# ---------------------------------------------------------------------- ALS


def test_cp_als_exact_rank1():
    rng = np.random.default_rng(5)
    t = rank1_tensor(rng.standard_normal(4), rng.standard_normal(5), rng.standard_normal(3))
    model, history = cp_als(t, 1, max_sweeps=50, seed=5)
    assert history[-1] < 1e-10


def test_cp_als_exact_rank5_recovery():
    rng = np.random.default_rng(7)
    truth = CPModel(
        5,
        u_params=rng.standard_normal((15, 5)),
        u_identity=rng.standard_normal((20, 5)),
        u_gaussian=rng.standard_normal((30, 5)),
    )
    t = reconstruct_full(truth)
    model, history = cp_als(t, 5, max_sweeps=200, tol=1e-14, seed=7)
    assert history[-1] < 1e-8
    diffs = np.diff(history)
    assert np.all(diffs <= 1e-12)


def test_cp_als_history_monotone_non_increasing():
    rng = np.random.default_rng(8)
    t = rng.standard_normal((6, 7, 5))
    _, history = cp_als(t, 3, max_sweeps=60, tol=0.0, seed=8)
    assert np.all(np.diff(history) <= 1e-12)


def test_cp_als_overparameterized_rank_degrades_gracefully():
    rng = np.random.default_rng(9)
    t = rng.standard_normal((2, 2, 2))
    _, hist_small = cp_als(t, 7, max_sweeps=40, seed=9)
    _, hist_big = cp_als(t, 8, max_sweeps=40, seed=9)
    assert np.isfinite(hist_big[-1])
    assert hist_big[-1] <= hist_small[-1] + 1e-8


def test_cp_als_rejects_non_finite():
    t = np.zeros((2, 2, 2))
    t[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        cp_als(t, 1)


# --------------------------------------------------------------- power iter


def test_cp_power_exact_rank1_recovery():
    rng = np.random.default_rng(10)
    a = rng.standard_normal(4)
    b = rng.standard_normal(6)
    c = rng.standard_normal(5)
    t = rank1_tensor(a, b, c)
    model = cp_power(t, 1, seed=10)
    for truth, found in ((a, model.u_identity[:, 0]), (b, model.u_gaussian[:, 0]), (c, model.u_params[:, 0])):
        cos = np.dot(truth, found) / (np.linalg.norm(truth) * np.linalg.norm(found))
        assert abs(cos) > 0.999
    assert rel_error(t, reconstruct_full(model)) < 1e-8


def test_cp_power_weight_absorbed_in_gaussian_factor():
    rng = np.random.default_rng(11)
    t = rank1_tensor(rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(2))
    model = cp_power(t, 1, seed=11)
    assert abs(np.linalg.norm(model.u_identity[:, 0]) - 1.0) < 1e-12
    assert abs(np.linalg.norm(model.u_params[:, 0]) - 1.0) < 1e-12
    assert rel_error(t, reconstruct_full(model)) < 1e-8


def test_cp_power_orthogonal_three_component_recovery():
    rng = np.random.default_rng(12)
    qa, _ = np.linalg.qr(rng.standard_normal((5, 3)))
    qb, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    qc, _ = np.linalg.qr(rng.standard_normal((4, 3)))
    weights = np.array([3.0, 2.0, 1.0])
    t = sum(weights[r] * rank1_tensor(qa[:, r], qb[:, r], qc[:, r]) for r in range(3))
    model = cp_power(t, 3, seed=12)
    assert rel_error(t, reconstruct_full(model)) < 1e-6
    # every true component matched by some recovered one, any order
    for r in range(3):
        cosines = [
            abs(np.dot(qa[:, r], model.u_identity[:, s]))
            for s in range(3)
        ]
        assert max(cosines) > 0.999


def test_cp_power_zero_tensor_gives_zero_weight_model():
    model = cp_power(np.zeros((3, 4, 2)), 2, seed=13)
    assert np.all(np.isfinite(model.u_identity))
    assert np.all(model.u_gaussian == 0.0)
    assert np.all(reconstruct_full(model) == 0.0)


# ---------------------------------------------------------------- gradients


def test_backward_full_matches_finite_differences():
    m = random_model((3, 4, 2), 2, seed=14)
    rng = np.random.default_rng(15)
    target = rng.standard_normal(m.dims)

    def loss_from(model):
        return 0.5 * np.sum((reconstruct_full(model) - target) ** 2)

    grad_t = reconstruct_full(m) - target
    grads = backward_full(m, grad_t)

    for name, base in (("u_params", m.u_params), ("u_identity", m.u_identity), ("u_gaussian", m.u_gaussian)):
        def f(flat, name=name, base=base):
            model = m.copy()
            setattr(model, name, flat.reshape(base.shape))
            return loss_from(model)

        fd = central_diff(f, base.ravel()).reshape(base.shape)
        analytic = {"u_params": grads.g_params, "u_identity": grads.g_identity, "u_gaussian": grads.g_gaussian}[name]
        assert_grad_close(analytic, fd, 1e-6, what=name)


def test_backward_full_zero_upstream():
    m = random_model((2, 3, 2), 2, seed=16)
    grads = backward_full(m, np.zeros(m.dims))
    assert np.all(grads.g_params == 0.0)
    assert np.all(grads.g_identity == 0.0)
    assert np.all(grads.g_gaussian == 0.0)


def test_backward_full_hand_sum():
    m = CPModel(1, np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1)))
    grads = backward_full(m, np.ones((2, 2, 2)))
    for g in (grads.g_params, grads.g_identity, grads.g_gaussian):
        assert np.all(g == 4.0)


def test_backward_full_shape_mismatch():
    m = random_model((2, 3, 2), 1)
    with pytest.raises(ValueError):
        backward_full(m, np.zeros((2, 3, 3)))


def test_backward_slice_locality_and_padding_equivalence():
    m = random_model((4, 3, 5), 2, seed=17)
    rng = np.random.default_rng(18)
    grad_slice = rng.standard_normal((3, 5))
    grads = backward_slice(m, 2, grad_slice)
    assert np.all(grads.g_identity[[0, 1, 3]] == 0.0)

    padded = np.zeros(m.dims)
    padded[2] = grad_slice
    full = backward_full(m, padded)
    assert np.array_equal(grads.g_params, full.g_params)
    assert np.array_equal(grads.g_identity, full.g_identity)
    assert np.array_equal(grads.g_gaussian, full.g_gaussian)


def test_backward_slice_matches_finite_differences():
    m = random_model((3, 4, 2), 2, seed=19)
    rng = np.random.default_rng(20)
    target = rng.standard_normal((4, 2))
    i = 1

    grad_slice = reconstruct_slice(m, i) - target
    grads = backward_slice(m, i, grad_slice)

    def f(flat):
        model = m.copy()
        model.u_identity = flat.reshape(m.u_identity.shape)
        return 0.5 * np.sum((reconstruct_slice(model, i) - target) ** 2)

    fd = central_diff(f, m.u_identity.ravel()).reshape(m.u_identity.shape)
    assert_grad_close(grads.g_identity, fd, 1e-6, what="u_identity")


# -------------------------------------------------------------- param count


def test_param_count_headline_sizes():
    factorized, dense, ratio = param_count(43, 30, 50000, 100)
    assert factorized == 5_007_300
    assert dense == 64_500_000
    assert ratio > 10


def test_param_count_small_cases():
    assert param_count(1, 1, 1, 1) == (3, 1, 1 / 3)
    factorized, dense, ratio = param_count(9, 4, 64, 16)
    assert factorized == 1232
    assert dense == 2304
    assert abs(ratio - 2304 / 1232) < 1e-12


def test_param_count_rejects_non_positive():
    with pytest.raises(ValueError):
        param_count(0, 1, 1, 1)

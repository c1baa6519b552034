import numpy as np
import pytest

from tensorsplat.model import GaussianSet
from tensorsplat.render import (
    ALPHA_MAX,
    RenderStats,
    Viewport,
    covariance2d,
    render,
    render_backward,
    _pixel_box,
    _prepare,
)

from fdcheck import assert_grad_close


def make_set(position, scale, angle, color, opacity):
    return GaussianSet(
        position=np.asarray(position, dtype=float),
        scale=np.asarray(scale, dtype=float),
        angle=np.asarray(angle, dtype=float),
        color=np.asarray(color, dtype=float),
        opacity=np.asarray(opacity, dtype=float),
    )


def random_scene(n, seed, size=16):
    rng = np.random.default_rng(seed)
    vp = Viewport(size, size, scale=float(size) / 4.0, origin=(-2.0, -2.0))
    gs = make_set(
        position=rng.uniform(-1.4, 1.4, (n, 2)),
        scale=rng.uniform(0.15, 0.45, (n, 2)),
        angle=rng.uniform(-np.pi, np.pi, n),
        color=rng.uniform(0.1, 0.9, (n, 3)),
        opacity=rng.uniform(0.3, 0.9, n),
    )
    return gs, vp


def naive_render(gs, vp):
    """Scalar per-pixel reference with the same 3-sigma support rule."""
    mu, (ia, ib, ic), radius = _prepare(gs, vp, None)
    image = np.zeros((vp.height, vp.width, 3))
    mask = np.zeros((vp.height, vp.width))
    for row in range(vp.height):
        for col in range(vp.width):
            transmit = 1.0
            for g in range(len(gs)):
                r0, r1, c0, c1 = _pixel_box(mu[g, 0], mu[g, 1], radius[g], vp.width, vp.height)
                if not (r0 <= row <= r1 and c0 <= col <= c1):
                    continue
                dx = col + 0.5 - mu[g, 0]
                dy = row + 0.5 - mu[g, 1]
                quad = ia[g] * dx * dx + 2.0 * ib[g] * dx * dy + ic[g] * dy * dy
                alpha = min(gs.opacity[g] * np.exp(-0.5 * quad), ALPHA_MAX)
                image[row, col] += gs.color[g] * alpha * transmit
                transmit *= 1.0 - alpha
            mask[row, col] = 1.0 - transmit
    return np.clip(image, 0.0, 1.0), mask


# ------------------------------------------------------------- covariance2d


def test_covariance_axis_aligned():
    cov = covariance2d((1.0, 2.0), 0.0)
    assert np.allclose(cov, np.diag([1.0, 4.0]), atol=1e-12)


def test_covariance_axis_swap():
    cov = covariance2d((1.0, 2.0), np.pi / 2)
    assert np.allclose(cov, np.diag([4.0, 1.0]), atol=1e-12)


def test_covariance_det_rotation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = rng.uniform(0.1, 3.0, 2)
        theta = rng.uniform(-np.pi, np.pi)
        cov = covariance2d(s, theta)
        assert np.isclose(np.linalg.det(cov), (s[0] * s[1]) ** 2, rtol=1e-10)
        assert np.allclose(cov, cov.T)
        assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_covariance_rejects_bad_scale():
    with pytest.raises(ValueError):
        covariance2d((0.0, 1.0), 0.0)
    with pytest.raises(ValueError):
        covariance2d((1.0, -0.5), 0.0)


# ------------------------------------------------------------------- render


def test_single_gaussian_at_mean_pixel():
    vp = Viewport(8, 8, scale=1.0)
    # mean exactly at the center of pixel (3, 4)
    gs = make_set([[4.5, 3.5]], [[1.0, 1.0]], [0.0], [[0.2, 0.5, 0.8]], [0.7])
    image, mask = render(gs, vp)
    assert np.allclose(image[3, 4], 0.7 * np.array([0.2, 0.5, 0.8]), atol=1e-12)
    assert np.isclose(mask[3, 4], 0.7, atol=1e-12)


def test_two_coincident_gaussians_composite():
    vp = Viewport(8, 8, scale=1.0)
    gs = make_set(
        [[4.5, 3.5], [4.5, 3.5]],
        [[1.0, 1.0], [1.0, 1.0]],
        [0.0, 0.0],
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        [0.6, 0.5],
    )
    image, mask = render(gs, vp)
    assert np.isclose(image[3, 4, 0], 0.6, atol=1e-12)
    assert np.isclose(image[3, 4, 1], 0.5 * (1 - 0.6), atol=1e-12)
    assert np.isclose(mask[3, 4], 1 - (1 - 0.6) * (1 - 0.5), atol=1e-12)


def test_empty_set_black_image():
    vp = Viewport(4, 6, scale=1.0)
    gs = make_set(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0))
    image, mask = render(gs, vp)
    assert np.all(image == 0.0)
    assert np.all(mask == 0.0)


def test_render_matches_naive_reference():
    gs, vp = random_scene(7, seed=1, size=12)
    image, mask = render(gs, vp)
    ref_image, ref_mask = naive_render(gs, vp)
    assert np.max(np.abs(image - ref_image)) < 1e-13
    assert np.max(np.abs(mask - ref_mask)) < 1e-13


def test_outputs_in_unit_range_fuzz():
    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(1, 12))
        gs, vp = random_scene(n, seed=200 + seed)
        gs.opacity[:] = rng.uniform(0.0, 1.0, n)
        image, mask = render(gs, vp)
        assert np.all(image >= 0.0) and np.all(image <= 1.0)
        assert np.all(mask >= 0.0) and np.all(mask <= 1.0)


def test_compositing_weights_bounded_by_mask():
    gs, vp = random_scene(9, seed=2)
    _, mask = render(gs, vp)
    assert np.all(mask <= 1.0)
    # weights sum exactly to the mask value, hence <= 1 per pixel
    _, ref_mask = naive_render(gs, vp)
    assert np.allclose(mask, ref_mask, atol=1e-13)


def test_translation_equivariance_bit_exact():
    rng = np.random.default_rng(3)
    n = 6
    # dyadic rationals keep all shifted inputs exactly representable
    pos = rng.integers(-16, 16, (n, 2)).astype(float) / 8.0
    gs = make_set(
        pos,
        rng.uniform(0.2, 0.5, (n, 2)),
        rng.uniform(-1, 1, n),
        rng.uniform(0.2, 0.8, (n, 3)),
        rng.uniform(0.3, 0.9, n),
    )
    vp = Viewport(16, 16, scale=4.0, origin=(-2.0, -2.0))
    image, mask = render(gs, vp)

    shift = np.array([3.25, -1.5])
    gs2 = gs.copy()
    gs2.position = gs.position + shift
    vp2 = Viewport(16, 16, scale=4.0, origin=(-2.0 + shift[0], -2.0 + shift[1]))
    image2, mask2 = render(gs2, vp2)
    assert np.array_equal(image, image2)
    assert np.array_equal(mask, mask2)


def test_render_deterministic():
    gs, vp = random_scene(10, seed=4)
    a = render(gs, vp)
    b = render(gs, vp)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_jitter_diagnostic_counted():
    vp = Viewport(8, 8, scale=1.0)
    gs = make_set([[4.0, 4.0]], [[1e-160, 1e-160]], [0.0], [[1.0, 1.0, 1.0]], [0.9])
    stats = RenderStats()
    render(gs, vp, stats)
    assert stats.jittered_covariances == 1


# ----------------------------------------------------------------- backward


def scene_loss(gs, vp, w_image, w_mask):
    image, mask = render(gs, vp)
    return float(np.sum(w_image * image) + np.sum(w_mask * mask))


def test_backward_matches_finite_differences():
    gs, vp = random_scene(10, seed=5)
    rng = np.random.default_rng(6)
    w_image = rng.normal(size=(vp.height, vp.width, 3))
    w_mask = rng.normal(size=(vp.height, vp.width))
    grads = render_backward(gs, vp, w_image, w_mask)

    h = 1e-5
    for field, shape in (
        ("position", (len(gs), 2)),
        ("scale_log", (len(gs), 2)),
        ("angle", (len(gs),)),
        ("color", (len(gs), 3)),
        ("opacity", (len(gs),)),
    ):
        fd = np.zeros(shape)
        for idx in np.ndindex(shape):
            gp = gs.copy()
            gm = gs.copy()
            if field == "scale_log":
                logs = np.log(gs.scale)
                lp, lm = logs.copy(), logs.copy()
                lp[idx] += h
                lm[idx] -= h
                gp.scale = np.exp(lp)
                gm.scale = np.exp(lm)
            else:
                getattr(gp, field)[idx] += h
                getattr(gm, field)[idx] -= h
            fd[idx] = (scene_loss(gp, vp, w_image, w_mask) - scene_loss(gm, vp, w_image, w_mask)) / (2 * h)
        assert_grad_close(getattr(grads, field), fd, 1e-4, what=field)


def test_backward_zero_upstream():
    gs, vp = random_scene(5, seed=7)
    grads = render_backward(gs, vp, np.zeros((vp.height, vp.width, 3)), np.zeros((vp.height, vp.width)))
    for field in ("position", "scale_log", "angle", "color", "opacity"):
        assert np.all(getattr(grads, field) == 0.0)


def test_backward_color_gradient_at_mean_pixel():
    vp = Viewport(8, 8, scale=1.0)
    alpha = 0.7
    gs = make_set([[4.5, 3.5]], [[1.0, 1.0]], [0.0], [[0.3, 0.3, 0.3]], [alpha])
    grad_image = np.zeros((8, 8, 3))
    grad_image[3, 4, 1] = 1.0
    grads = render_backward(gs, vp, grad_image, np.zeros((8, 8)))
    assert np.isclose(grads.color[0, 1], alpha, atol=1e-12)
    assert grads.color[0, 0] == 0.0


def test_backward_shape_validation():
    gs, vp = random_scene(2, seed=8)
    with pytest.raises(ValueError):
        render_backward(gs, vp, np.zeros((3, 3, 3)), np.zeros((vp.height, vp.width)))

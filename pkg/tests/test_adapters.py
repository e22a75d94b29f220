import numpy as np
import pytest

from losa.adapters import (
    AdamConfig,
    Adapter,
    OptState,
    adam_step,
    clip_by_global_norm,
    init_adapter,
    linear_lr,
    recon_grads,
    recon_loss,
    resize,
)
from losa.errors import ShapeError
from losa.linalg import make_rng
from losa.masks import Mask, unstructured_mask

from oracles import masked_loss


def random_case(r, c_out=None, c_in=None, rank=None, s=None, samples=None):
    c_out = c_out or int(r.integers(2, 9))
    c_in = c_in or int(r.integers(2, 9))
    rank = int(r.integers(0, min(c_out, c_in) + 1)) if rank is None else rank
    s = float(r.random()) if s is None else s
    samples = samples or int(r.integers(3, 15))
    w = r.standard_normal((c_out, c_in))
    mask = unstructured_mask(r.random((c_out, c_in)), s)
    ad = Adapter(r.standard_normal((c_out, rank)), r.standard_normal((rank, c_in)))
    x = r.standard_normal((samples, c_in))
    return w, mask, ad, x


def finite_diff(w, mask, ad, x, h=1e-5, masked=True):
    def grad_of(param):
        g = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + h
            up = recon_loss(w, mask, ad, x, masked)
            param[idx] = old - h
            dn = recon_loss(w, mask, ad, x, masked)
            param[idx] = old
            g[idx] = (up - dn) / (2 * h)
        return g

    return grad_of(ad.b), grad_of(ad.a)


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), atol / rtol)
    assert np.all(err < rtol), err.max()


def test_init_adapter_is_zero_product():
    ad = init_adapter(5, 4, 3, 0.02, make_rng(0))
    assert ad.rank == 3 and ad.b.shape == (5, 3) and ad.a.shape == (3, 4)
    assert np.all(ad.delta() == 0.0)
    assert np.any(ad.a != 0.0)
    empty = init_adapter(5, 4, 0, 0.02, make_rng(0))
    assert empty.b.shape == (5, 0) and np.all(empty.delta() == 0.0)
    np.testing.assert_array_equal(init_adapter(5, 4, 3, 0.02, make_rng(1)).a, init_adapter(5, 4, 3, 0.02, make_rng(1)).a)
    with pytest.raises(ShapeError):
        init_adapter(5, 4, 5, 0.02, make_rng(0))


def test_resize_grow_preserves_product_and_loss(rng):
    w, mask, ad, x = random_case(rng, 6, 5, rank=2, s=0.4)
    grown = resize(ad, 4, 0.5, make_rng(3))
    assert grown.rank == 4
    np.testing.assert_array_equal(grown.delta(), ad.delta())
    assert recon_loss(w, mask, grown, x) == recon_loss(w, mask, ad, x)
    back = resize(grown, 2, 0.5, make_rng(3))
    np.testing.assert_array_equal(back.b, ad.b)
    np.testing.assert_array_equal(back.a, ad.a)
    assert np.all(resize(ad, 0, 0.5, make_rng(3)).delta() == 0.0)
    with pytest.raises(ShapeError):
        resize(ad, 6, 0.5, make_rng(3))


def test_recon_loss_examples(rng):
    w, _, _, x = random_case(rng, 4, 3, samples=7)
    zero_ad = Adapter(np.zeros((4, 2)), rng.standard_normal((2, 3)))
    assert recon_loss(w, Mask.ones(w.shape), zero_ad, x) == 0.0
    full = recon_loss(w, Mask(np.zeros(w.shape)), zero_ad, x)
    assert abs(full - np.sum((x @ w.T) ** 2) / 7) < 1e-12 * full


def test_recon_loss_direct_oracle(rng):
    for _ in range(10):
        w, mask, ad, x = random_case(rng)
        ref = masked_loss(w, mask.bits, ad.b, ad.a, x)
        got = recon_loss(w, mask, ad, x)
        assert abs(got - ref) <= 1e-12 * max(ref, 1e-300)
    raw = recon_loss(w, mask, ad, x, normalize=False)
    assert abs(raw / x.shape[0] - recon_loss(w, mask, ad, x)) < 1e-12 * max(raw, 1)


def test_recon_shape_errors(rng):
    w, mask, ad, x = random_case(rng, 4, 3, rank=1)
    with pytest.raises(ShapeError):
        recon_loss(w, mask, ad, np.ones((5, 4)))
    with pytest.raises(ShapeError):
        recon_grads(w, Mask.ones((3, 3)), ad, x)


def test_grads_trivial_cases(rng):
    w, _, _, x = random_case(rng, 4, 3)
    ad = init_adapter(4, 3, 2, 0.1, make_rng(0))
    g_b, g_a = recon_grads(w, Mask.ones(w.shape), ad, x)
    assert np.all(g_b == 0.0) and np.all(g_a == 0.0)
    ad = Adapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 3)))
    g_b, g_a = recon_grads(w, Mask(np.zeros(w.shape)), ad, x)
    assert np.all(g_b == 0.0) and np.all(g_a == 0.0)


@pytest.mark.parametrize("masked", [True, False])
def test_grads_match_finite_differences(masked):
    r = np.random.default_rng(99)
    for _ in range(20):
        w, mask, ad, x = random_case(r)
        if ad.rank == 0:
            continue
        analytic = recon_grads(w, mask, ad, x, masked)
        numeric = finite_diff(w, mask, ad, x, masked=masked)
        for a, n in zip(analytic, numeric):
            assert_grads_close(a, n)


def test_clip_by_global_norm():
    g = [np.array([[6.0]]), np.array([[8.0]])]
    (a, b), norm = clip_by_global_norm(g, 0.3)
    assert norm == 10.0
    assert abs(np.sqrt(a[0, 0] ** 2 + b[0, 0] ** 2) - 0.3) < 1e-15
    (a, b), _ = clip_by_global_norm(g, 100.0)
    assert a[0, 0] == 6.0


def test_adam_zero_grads():
    ad = Adapter(np.array([[0.5]]), np.array([[-0.25]]))
    opt = OptState.zeros_like(ad, AdamConfig(lr=0.1))
    new, _ = adam_step(ad, opt, np.zeros((1, 1)), np.zeros((1, 1)))
    np.testing.assert_array_equal(new.b, ad.b)
    np.testing.assert_array_equal(new.a, ad.a)
    opt = OptState.zeros_like(ad, AdamConfig(lr=0.1, weight_decay=0.5))
    new, _ = adam_step(ad, opt, np.zeros((1, 1)), np.zeros((1, 1)))
    assert new.b[0, 0] == 0.5 - 0.1 * 0.5 * 0.5


def test_adam_hand_computed_two_steps():
    hp = AdamConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, max_grad_norm=0.0)
    ad = Adapter(np.array([[0.5]]), np.array([[2.0]]))
    opt = OptState.zeros_like(ad, hp)
    ad, opt = adam_step(ad, opt, np.array([[0.2]]), np.array([[-0.4]]))
    # step 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert abs(ad.b[0, 0] - (0.5 - 0.1 * 0.2 / (0.2 + 1e-8))) < 1e-15
    assert abs(ad.a[0, 0] - (2.0 + 0.1 * 0.4 / (0.4 + 1e-8))) < 1e-15
    b1 = ad.b[0, 0]
    ad, opt = adam_step(ad, opt, np.array([[0.1]]), np.array([[0.0]]))
    # step 2 for B: m = 0.9*0.02 + 0.1*0.1 = 0.028, v = 0.999*4e-5 + 0.001*0.01 = 4.996e-5
    m_hat = 0.028 / (1 - 0.81)
    v_hat = 4.996e-5 / (1 - 0.998001)
    assert abs(ad.b[0, 0] - (b1 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8))) < 1e-14
    assert opt.step == 2


def test_adam_clip_applies_max_norm():
    hp = AdamConfig(lr=0.1, max_grad_norm=0.3)
    ad = Adapter(np.zeros((1, 1)), np.ones((1, 1)))
    opt = OptState.zeros_like(ad, hp)
    _, opt = adam_step(ad, opt, np.array([[6.0]]), np.array([[8.0]]))
    # first moment holds (1 - beta1) * applied gradient
    applied = np.hypot(opt.m_b[0, 0], opt.m_a[0, 0]) / (1 - hp.beta1)
    assert abs(applied - 0.3) < 1e-12


def test_adam_step_decreases_loss():
    r = np.random.default_rng(5)
    for _ in range(10):
        w, mask, ad, x = random_case(r, 6, 5, rank=3, s=0.5, samples=12)
        ad = Adapter(0.1 * ad.b, 0.1 * ad.a)
        opt = OptState.zeros_like(ad, AdamConfig(lr=1e-3))
        before = recon_loss(w, mask, ad, x)
        ad2, _ = adam_step(ad, opt, *recon_grads(w, mask, ad, x))
        assert recon_loss(w, mask, ad2, x) < before


def test_zero_mask_training_is_fixed_point(rng):
    w, _, ad, x = random_case(rng, 5, 4, rank=2)
    mask = Mask(np.zeros(w.shape))
    opt = OptState.zeros_like(ad, AdamConfig(lr=0.05))
    before = recon_loss(w, mask, ad, x)
    for _ in range(5):
        ad, opt = adam_step(ad, opt, *recon_grads(w, mask, ad, x))
    assert recon_loss(w, mask, ad, x) == before


def test_optstate_resize_tracks_adapter():
    ad = Adapter(np.ones((3, 2)), np.ones((2, 4)))
    opt = OptState.zeros_like(ad)
    opt.m_b[:] = 1.0
    grown = opt.resized(3)
    assert grown.m_b.shape == (3, 3) and np.all(grown.m_b[:, 2] == 0.0) and np.all(grown.m_b[:, :2] == 1.0)
    assert grown.v_a.shape == (3, 4)
    shrunk = opt.resized(1)
    assert shrunk.m_b.shape == (3, 1) and shrunk.m_a.shape == (1, 4)


def test_adam_rejects_mismatched_state():
    ad = Adapter(np.ones((3, 2)), np.ones((2, 4)))
    opt = OptState.zeros_like(Adapter(np.ones((3, 1)), np.ones((1, 4))))
    with pytest.raises(ShapeError):
        adam_step(ad, opt, np.zeros((3, 2)), np.zeros((2, 4)))


def test_linear_lr():
    assert linear_lr(2e-4, 0, 10) == 2e-4
    assert abs(linear_lr(2e-4, 5, 10) - 1e-4) < 1e-20
    assert linear_lr(2e-4, 10, 10) == 0.0

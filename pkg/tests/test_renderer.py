import numpy as np
import pytest

from srf import tensor as T
from srf.config import ModelConfig
from srf.geometry import Camera, Ray, look_at
from srf.model import SRFModel
from srf.renderer import composite, composite_samples, decode, init_decoder, render_image, render_ray, to_uint8

from conftest import ring_conditioning, small_model_config
from helpers import check_gradients


def naive_weights(sigma, delta):
    """Straight loop evaluation of the compositing weights, independent of the tape."""
    w, trans = [], 1.0
    for s, d in zip(sigma, delta):
        a = 1.0 - np.exp(-s * d)
        w.append(trans * a)
        trans *= np.exp(-s * d)
    return np.array(w)


def test_decode_zero_weights():
    raw = init_decoder(ModelConfig(bank_size=8), np.random.default_rng(0))
    params = {k: T.Tensor(np.zeros_like(v)) for k, v in raw.items()}
    color, sigma = decode(np.random.default_rng(1).normal(size=(5, 8)), params)
    np.testing.assert_array_equal(color.data, 0.5)
    np.testing.assert_array_equal(sigma.data, 0.0)


def test_decode_density_never_negative():
    raw = init_decoder(ModelConfig(bank_size=8), np.random.default_rng(2))
    params = {k: T.Tensor(v) for k, v in raw.items()}
    y = np.random.default_rng(3).normal(scale=10, size=(200, 8))
    color, sigma = decode(y, params, noise=np.random.default_rng(4).normal(scale=5, size=200))
    assert np.all(sigma.data >= 0)
    assert np.all((color.data >= 0) & (color.data <= 1))


def test_decode_width_mismatch():
    raw = init_decoder(ModelConfig(bank_size=8), np.random.default_rng(0))
    with pytest.raises(ValueError, match="width"):
        decode(np.zeros((2, 7)), {k: T.Tensor(v) for k, v in raw.items()})


def test_decode_gradients():
    raw = init_decoder(ModelConfig(bank_size=4, decoder_hidden=(6, 5)), np.random.default_rng(5))
    names = sorted(raw)
    y = np.random.default_rng(6).normal(size=(3, 4))

    def build(code, *ps):
        c, s = decode(code, dict(zip(names, ps)))
        return T.concat([c, s.reshape(s.shape + (1,))], axis=-1)

    rng = np.random.default_rng(7)
    arrays = [raw[k] + 0.1 * rng.normal(size=raw[k].shape) for k in names]
    assert check_gradients(build, [y] + arrays) < 1e-4


def test_composite_transparent():
    rgb, w = composite(np.zeros((1, 5)), np.ones((1, 5, 3)), np.full((1, 5), 0.2), return_weights=True)
    np.testing.assert_array_equal(rgb.data, 0.0)
    np.testing.assert_array_equal(w.data, 0.0)


def test_composite_opaque_first_sample():
    rng = np.random.default_rng(8)
    color = rng.uniform(size=(1, 4, 3))
    with T.precision(np.float64):
        rgb = composite(np.array([[50.0, 3.0, 1.0, 2.0]]), color, np.array([[1.0, 0.1, 0.1, 0.1]])).data
    assert np.abs(rgb[0] - color[0, 0]).max() < 1e-15


def test_composite_identity_random():
    rng = np.random.default_rng(9)
    sigma = rng.exponential(2.0, size=(50, 16))
    delta = rng.uniform(0.0, 0.3, size=(50, 16))
    with T.precision(np.float64):
        _, w = composite(sigma, rng.uniform(size=(50, 16, 3)), delta, return_weights=True)
    w = w.data
    assert np.all((w >= 0) & (w <= 1))
    np.testing.assert_allclose(w.sum(axis=1), 1 - np.exp(-(sigma * delta).sum(axis=1)), atol=1e-12)
    for r in range(50):
        np.testing.assert_allclose(w[r], naive_weights(sigma[r], delta[r]), atol=1e-14)


def test_composite_gradients():
    rng = np.random.default_rng(10)
    delta = rng.uniform(0.05, 0.3, size=(2, 5))
    err = check_gradients(lambda s, c: composite(s, c, delta), [rng.uniform(0, 3, (2, 5)), rng.uniform(size=(2, 5, 3))])
    assert err < 1e-4


def test_composite_rejects_negative_delta():
    with pytest.raises(ValueError):
        composite(np.ones((1, 2)), np.ones((1, 2, 3)), np.array([[0.1, -0.1]]))


def test_composite_samples_requires_sorted():
    s = [((1, 0, 0), 1.0, 2.0, 0.1), ((0, 1, 0), 1.0, 1.0, 0.1)]
    with pytest.raises(ValueError, match="sorted"):
        composite_samples(s)
    out = composite_samples(s[::-1])
    assert out.shape == (3,)


@pytest.fixture
def model64():
    with T.precision(np.float64):
        return SRFModel.init(small_model_config())


def test_single_bin_is_one_decode_times_opacity(model64):
    cond = ring_conditioning(3)
    cam_R, cam_t = cond.R[0], cond.t[0]
    origin = -cam_R.T @ cam_t
    d = -origin / np.linalg.norm(origin)
    ray = Ray(origin, d, 2.0, 4.0)
    with T.precision(np.float64), T.no_grad():
        pyr = model64.encode(cond)
        rgb = render_ray(model64, cond, pyr, ray, 1).data
        c, s = model64.query(cond, pyr, ray.at(np.array([3.0])))
    expect = (1 - np.exp(-s.data[0] * 1.0)) * c.data[0]
    np.testing.assert_allclose(rgb, expect, rtol=1e-12)


def test_untrained_render_finite(small_model, cond3):
    R, t = look_at([0.0, -3.0, 1.0], [0.0, 0.0, 0.0])
    cam = Camera(18.0, 18.0, 5.5, 5.5, 12, 12, R, t)
    img = render_image(small_model, cond3, cam, 2.0, 4.0, 8, batch_size=50)
    assert img.shape == (3, 12, 12)
    assert np.all(np.isfinite(img)) and img.min() >= 0 and img.max() <= 1


def test_batch_size_invariance(small_model, cond3):
    R, t = look_at([1.0, -3.0, 1.0], [0.0, 0.0, 0.0])
    cam = Camera(18.0, 18.0, 5.5, 5.5, 12, 12, R, t)
    a = render_image(small_model, cond3, cam, 2.0, 4.0, 8, batch_size=144)
    b = render_image(small_model, cond3, cam, 2.0, 4.0, 8, batch_size=7)
    np.testing.assert_array_equal(a, b)


def test_to_uint8():
    img = np.array([0.0, 0.5, 1.0, 1.2, -0.1]).reshape(1, 1, 5).repeat(3, axis=0)
    out = to_uint8(img)
    assert out.shape == (1, 5, 3) and out.dtype == np.uint8
    np.testing.assert_array_equal(out[0, :, 0], [0, 128, 255, 255, 0])


def end_to_end_error(seed=0):
    cfg = small_model_config()
    cond = ring_conditioning(3, size=12, seed=seed)
    with T.precision(np.float64):
        model = SRFModel.init(cfg)
    names = sorted(model.params)
    rng = np.random.default_rng(seed)
    arrays = []
    for k in names:
        a = model.params[k].data.astype(np.float64)
        if k.endswith("bias"):
            a = a + 0.05 * rng.normal(size=a.shape)  # move off exact ReLU kinks
        arrays.append(a)
    # last decoder bias shifted so the density is active along the ray
    arrays[names.index(f"decoder.fc{len(cfg.decoder_hidden)}.bias")][3] += 1.0
    origin = -cond.R[0].T @ cond.t[0]
    ray_dir = -origin / np.linalg.norm(origin)
    target = np.array([0.2, 0.6, 0.4])
    ray = Ray(origin, ray_dir, 2.0, 4.0)

    def build(*ps):
        m = SRFModel(cfg, dict(zip(names, ps)))
        rgb = render_ray(m, cond, m.encode(cond), ray, 6)
        return T.mean_squared_error(rgb, T.Tensor(target))

    return check_gradients(build, arrays)


def test_end_to_end_gradient():
    assert end_to_end_error() < 1e-3


def test_end_to_end_gradient_reaches_every_group():
    cfg = small_model_config()
    cond = ring_conditioning(3)
    model = SRFModel.init(cfg)
    model.params[f"decoder.fc{len(cfg.decoder_hidden)}.bias"].data[3] = 1.0
    origin = -cond.R[0].T @ cond.t[0]
    ray = Ray(origin, -origin / np.linalg.norm(origin), 2.0, 4.0)
    rgb = render_ray(model, cond, model.encode(cond), ray, 6)
    T.mean_squared_error(rgb, T.Tensor([0.2, 0.6, 0.4])).backward()
    for group in ("encoder.", "stereo.bank.", "stereo.agg", "decoder."):
        grads = [p.grad for k, p in model.params.items() if k.startswith(group)]
        assert grads and any(np.any(g != 0) for g in grads), group


@pytest.mark.parametrize("color_bias,density_bias", [(0.0, 0.0), (-2.5, 0.2), (1.0, -3.0)])
def test_decoder_output_bias_init(color_bias, density_bias):
    cfg = ModelConfig(bank_size=4, decoder_hidden=(6, 5), color_bias_init=color_bias, density_bias_init=density_bias)
    raw = init_decoder(cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(raw["decoder.fc2.bias"], [color_bias] * 3 + [density_bias])
    assert not np.any(raw["decoder.fc0.bias"]) and not np.any(raw["decoder.fc1.bias"])

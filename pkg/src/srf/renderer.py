"""Radiance decoding and emission-absorption volume rendering."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .geometry import Camera, Ray, image_rays, stratified_t
from .tensor import Tensor


def init_decoder(cfg, rng: np.random.Generator) -> dict:
    sizes = (cfg.bank_size,) + tuple(cfg.decoder_hidden) + (4,)
    params = {}
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"decoder.fc{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / d_in), (d_out, d_in))
        params[f"decoder.fc{i}.bias"] = np.zeros(d_out)
    # Start from dark, thin fog. With a neutral start (gray color, dense fog)
    # the quickest way to cut the loss on mostly dark images is to push every
    # density logit below zero, after which the ReLU passes no gradient.
    last = params[f"decoder.fc{len(sizes) - 2}.bias"]
    last[:3] = cfg.color_bias_init
    last[3] = cfg.density_bias_init
    return params


def decode(y, params: dict, noise=None):
    """MLP decoder: code ``[..., K]`` -> color ``[..., 3]``, density ``[...]``.

    ``noise`` (same shape as the density) is added to the density logit
    before the ReLU.
    """
    n_layers = sum(1 for k in params if k.startswith("decoder.fc") and k.endswith(".weight"))
    K = params["decoder.fc0.weight"].shape[1]
    h = y if isinstance(y, Tensor) else Tensor(y)
    if h.shape[-1] != K:
        raise ValueError(f"decoder expects codes of width {K}, got {h.shape[-1]}")
    for i in range(n_layers):
        h = T.linear(h, params[f"decoder.fc{i}.weight"], params[f"decoder.fc{i}.bias"])
        if i < n_layers - 1:
            h = T.relu(h)
    color = T.sigmoid(h[..., :3])
    logit = h[..., 3]
    if noise is not None:
        logit = logit + Tensor(noise)
    return color, T.relu(logit)


def composite(sigma, color, delta, return_weights: bool = False):
    """Fuse samples along rays.

    ``sigma [R, B]``, ``color [R, B, 3]`` and ``delta [R, B]`` with samples in
    increasing depth. Transmittance ``T_i = exp(-sum_{j<i} sigma_j delta_j)``,
    weight ``w_i = T_i (1 - exp(-sigma_i delta_i))``, pixel ``sum_i w_i c_i``.
    """
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    color = color if isinstance(color, Tensor) else Tensor(color)
    delta = np.asarray(delta)
    if np.any(delta < 0):
        raise ValueError("segment lengths must be non-negative")
    optical = sigma * Tensor(delta)
    trans = T.exp(-T.cumsum(optical, axis=-1, exclusive=True))
    alpha = 1.0 - T.exp(-optical)
    weights = trans * alpha
    rgb = T.sum(weights.reshape(weights.shape + (1,)) * color, axis=-2)
    return (rgb, weights) if return_weights else rgb


def composite_samples(samples) -> np.ndarray:
    """Composite a list of ``(color, sigma, t, delta)`` samples of one ray."""
    ts = np.array([s[2] for s in samples])
    if np.any(np.diff(ts) < 0):
        raise ValueError("samples must be sorted by increasing t")
    color = np.array([s[0] for s in samples], dtype=np.float64)[None]
    sigma = np.array([s[1] for s in samples], dtype=np.float64)[None]
    delta = np.array([s[3] for s in samples], dtype=np.float64)[None]
    with T.precision(np.float64), T.no_grad():
        return composite(sigma, color, delta).data[0]


def render_rays(model, cond, pyramid, origins, dirs, t_near, t_far, n_bins: int,
                rng=None, noise_std: float = 0.0):
    """Render ``R`` rays; stochastic when ``rng`` is given, bin centres otherwise."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = origins.shape[0]
    t, delta = stratified_t(t_near, t_far, n_bins, n_rays, rng)
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    noise = None
    if noise_std > 0 and rng is not None:
        noise = rng.normal(0.0, noise_std, n_rays * n_bins)
    color, sigma = model.query(cond, pyramid, points.reshape(-1, 3), noise=noise)
    return composite(sigma.reshape(n_rays, n_bins), color.reshape(n_rays, n_bins, 3), delta)


def render_ray(model, cond, pyramid, ray: Ray, n_bins: int, rng=None) -> Tensor:
    rgb = render_rays(model, cond, pyramid, ray.origin, ray.direction, ray.t_near, ray.t_far, n_bins, rng)
    return rgb.reshape(3)


def render_image(model, cond, camera: Camera, t_near: float, t_far: float, n_bins: int,
                 batch_size: int = 1024, pyramid=None) -> np.ndarray:
    """Deterministic render ``[3, H, W]`` in ``[0, 1]``."""
    origins, dirs = image_rays(camera)
    out = np.empty((origins.shape[0], 3), dtype=np.float64)
    with T.no_grad():
        if pyramid is None:
            pyramid = model.encode(cond)
        for start in range(0, origins.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            rgb = render_rays(model, cond, pyramid, origins[sl], dirs[sl], t_near, t_far, n_bins)
            out[sl] = rgb.data
    return np.clip(out.reshape(camera.height, camera.width, 3).transpose(2, 0, 1), 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` floats in ``[0,1]`` -> ``[H,W,3]`` bytes via ``round(255 x)``."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)

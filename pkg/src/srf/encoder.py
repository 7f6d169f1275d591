"""Shared 2-D CNN image encoder and multi-scale point descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class FeaturePyramid:
    """Encoder outputs for a stack of ``N`` reference images.

    ``image`` is the raw ``[N,3,H,W]`` stack (descriptor level 0) and
    ``maps[l]`` the ``[N,C_l,H_l,W_l]`` output of conv layer ``l`` whose
    cumulative stride is ``factors[l]``.
    """

    image: Tensor
    maps: list
    factors: tuple

    @property
    def n_views(self) -> int:
        return self.image.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.image.shape[1] + sum(m.shape[1] for m in self.maps)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    params = {}
    c_in = 3
    k = cfg.encoder_kernel
    for i, c_out in enumerate(cfg.encoder_channels):
        std = np.sqrt(2.0 / (c_in * k * k))
        params[f"encoder.conv{i}.weight"] = rng.normal(0.0, std, (c_out, c_in, k, k))
        params[f"encoder.conv{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    return params


def cumulative_factors(strides) -> tuple:
    return tuple(int(x) for x in np.cumprod(strides))


def min_image_size(cfg: ModelConfig) -> int:
    return max(cfg.encoder_kernel, int(np.prod(cfg.encoder_strides)))


def encode_image(params: dict, cfg: ModelConfig, images) -> FeaturePyramid:
    """Run the shared CNN on ``[3,H,W]`` or ``[N,3,H,W]`` images."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim == 3:
        images = images.reshape((1,) + images.shape)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"encode_image expects [N,3,H,W] images, got {images.shape}")
    H, W = images.shape[2:]
    need = min_image_size(cfg)
    if H < need or W < need:
        raise ValueError(f"image {H}x{W} is smaller than the encoder minimum {need}x{need}")
    maps = []
    x = images
    for i, stride in enumerate(cfg.encoder_strides):
        x = T.relu(
            T.conv2d(x, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"],
                     stride=stride, padding="same")
        )
        maps.append(x)
    return FeaturePyramid(images, maps, cumulative_factors(cfg.encoder_strides))


def extract_descriptors(pyramid: FeaturePyramid, u, v, behind=None) -> Tensor:
    """Descriptors ``[..., N, D]`` for pixel coordinates ``u, v`` of shape ``[..., N]``.

    Column ``n`` of the coordinates refers to view ``n``. Layer maps are read
    at ``(u / d, v / d)`` for cumulative stride ``d``; behind-camera or
    non-finite coordinates give all-zero descriptors.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    mask = None
    if behind is not None:
        mask = ~np.asarray(behind, dtype=bool)
    parts = [T.bilinear_sample(pyramid.image, u, v, mask)]
    for fmap, d in zip(pyramid.maps, pyramid.factors):
        parts.append(T.bilinear_sample(fmap, u / d, v / d, mask))
    return T.concat(parts, axis=-1)


def extract_descriptor(pyramid: FeaturePyramid, view: int, u: float, v: float, behind: bool = False) -> Tensor:
    """Single-view, single-point descriptor ``[D]``."""
    n = pyramid.n_views
    uu = np.full((1, n), np.nan)
    vv = np.full((1, n), np.nan)
    uu[0, view], vv[0, view] = u, v
    desc = extract_descriptors(pyramid, uu, vv, np.full((1, n), behind))
    return desc[0, view]

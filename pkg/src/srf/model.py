"""The conditioned radiance field: encoder, stereo module and decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import FeaturePyramid, encode_image, extract_descriptors, init_encoder
from .geometry import project_many, stack_cameras
from .renderer import decode, init_decoder
from .stereo import g_stereo, init_stereo
from .tensor import Tensor


@dataclass
class Conditioning:
    """Reference images and their stacked cameras."""

    images: np.ndarray  # [N, 3, H, W] in [0, 1]
    R: np.ndarray
    t: np.ndarray
    intr: np.ndarray

    @classmethod
    def from_views(cls, images, cameras) -> "Conditioning":
        if len(cameras) < 2:
            raise ValueError(f"at least 2 reference views are required, got {len(cameras)}")
        R, t, intr = stack_cameras(cameras)
        return cls(np.stack([np.asarray(im) for im in images]), R, t, intr)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    def project(self, points: np.ndarray):
        return project_many(self.R, self.t, self.intr, points)


class SRFModel:
    """Parameter container plus the point pipeline ``project -> describe -> stereo -> decode``."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = None) -> "SRFModel":
        config.validate()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        raw = {}
        raw.update(init_encoder(config, rng))
        raw.update(init_stereo(config, config.descriptor_dim, rng))
        raw.update(init_decoder(config, rng))
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        return cls(config, params)

    def subset(self, prefix: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def encode(self, cond: Conditioning) -> FeaturePyramid:
        return encode_image(self.params, self.config, Tensor(cond.images))

    def descriptors(self, cond: Conditioning, pyramid: FeaturePyramid, points: np.ndarray) -> Tensor:
        u, v, z = cond.project(points)
        return extract_descriptors(pyramid, u, v, behind=~(z > 0))

    def stereo_code(self, cond: Conditioning, pyramid: FeaturePyramid, points: np.ndarray) -> Tensor:
        return g_stereo(self.descriptors(cond, pyramid, points), self.params)

    def query(self, cond: Conditioning, pyramid: FeaturePyramid, points, noise=None):
        """Color ``[P,3]`` and density ``[P]`` at world points ``[P,3]``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        y = self.stereo_code(cond, pyramid, points)
        return decode(y, self.params, noise=noise)

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self.params.items():
            a = arrays[k]
            if a.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} != {p.shape}")
            p.data = np.array(a, dtype=T.get_default_dtype(), copy=True)

    def cast(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

import numpy as np
import pytest

from srf.config import ModelConfig
from srf.geometry import Camera, look_at
from srf.model import Conditioning, SRFModel
from srf.scenegen import SyntheticScene, Sphere, generate_scene, load_scene

# criterion number -> (title, passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")


def small_model_config(**overrides) -> ModelConfig:
    """A model small enough for finite differences over every parameter."""
    kw = dict(encoder_channels=(3, 4), encoder_strides=(1, 2), bank_size=4, decoder_hidden=(6, 5), seed=3)
    kw.update(overrides)
    return ModelConfig(**kw)


def ring_conditioning(n_views=3, size=12, seed=0) -> Conditioning:
    rng = np.random.default_rng(seed)
    cams = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views + 0.3
        eye = 3.0 * np.array([np.cos(az), np.sin(az), 0.4])
        R, t = look_at(eye, np.zeros(3))
        c = (size - 1) / 2
        cams.append(Camera(1.5 * size, 1.5 * size, c, c, size, size, R, t))
    images = [rng.uniform(0, 1, (3, size, size)) for _ in cams]
    return Conditioning.from_views(images, cams)


@pytest.fixture
def small_config():
    return small_model_config()


@pytest.fixture
def small_model(small_config):
    return SRFModel.init(small_config)


@pytest.fixture
def cond3():
    return ring_conditioning(3)


def small_sphere_spec(**overrides) -> SyntheticScene:
    kw = dict(
        primitives=[Sphere((0.0, 0.0, 0.0), 0.6, (0.9, 0.15, 0.1))],
        n_reference=4,
        n_target=3,
        n_val=1,
        n_test=1,
        image_size=16,
        focal=20.0,
        seed=2,
    )
    kw.update(overrides)
    return SyntheticScene(**kw)


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_scene")
    generate_scene(small_sphere_spec(), out)
    return out


@pytest.fixture
def small_scene(small_scene_dir):
    return load_scene(small_scene_dir)

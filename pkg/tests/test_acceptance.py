"""End-to-end acceptance criteria.

Each test checks one criterion at its stated tolerance and records a
PASS/FAIL line that is printed in the terminal summary. The training
criteria share session-scoped runs, so the whole module takes roughly an
hour on a single CPU core.
"""

import contextlib
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from srf import tensor as T
from srf.config import Config, ModelConfig
from srf.geometry import Camera, look_at
from srf.mesher import color_vertices, evaluate_grid, default_threshold, marching_cubes, scene_bbox
from srf.model import Conditioning, SRFModel
from srf.renderer import composite, render_image
from srf.scenegen import generate_scene, load_scene, preset, random_scene
from srf.stereo import aggregate, g_stereo, init_stereo, pairwise_bank
from srf.trainer import Checkpoint, evaluate, finetune, train

from conftest import ACCEPTANCE

pytestmark = pytest.mark.acceptance

TESTS = Path(__file__).parent

# Desk-scale training setup shared by the training criteria.
BANK_SIZE = 16
RAYS = 128
BINS = 32
LR = 5e-4
NOISE = 0.5

OVERFIT_BUDGET_S = 1800.0
OVERFIT_MAX_STEPS = 800
SPHERE_STEPS = 500
GENERAL_BUDGET_S = 1200.0
FINETUNE_BUDGET_S = 120.0
GENERAL_TRAIN_SEEDS = (1, 2, 3)
GENERAL_HELD_OUT_SEED = 4


def acceptance_config(**train) -> Config:
    cfg = Config()
    cfg.model.bank_size = BANK_SIZE
    cfg.train.rays_per_batch = RAYS
    cfg.train.n_bins = BINS
    cfg.train.lr = LR
    cfg.train.density_noise_std = NOISE
    cfg.train.val_every = 0
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Collect named checks; record PASS only if all hold and nothing raised."""
    checks = {}
    detail = ""
    try:
        yield checks
    except Exception as exc:  # recorded, then re-raised so pytest reports it
        detail = f"raised {type(exc).__name__}: {exc}"
        ACCEPTANCE[number] = (title, False, detail)
        raise
    ok = all(passed for passed, _ in checks.values())
    detail = "; ".join(f"{name} {text}".strip() for name, (_, text) in checks.items())
    ACCEPTANCE[number] = (title, ok, detail)
    failed = [name for name, (passed, _) in checks.items() if not passed]
    assert ok, f"criterion {number} failed checks {failed}: {detail}"


def held_out(scene):
    return scene.indices("test")


# -- shared training runs -------------------------------------------------------------


@pytest.fixture(scope="session")
def acceptance_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def two_primitive_scene(acceptance_root):
    out = acceptance_root / "two_primitives"
    generate_scene(preset("two_primitives"), out)
    return load_scene(out)


@pytest.fixture(scope="session")
def overfit_run(two_primitive_scene):
    cfg = acceptance_config(max_steps=OVERFIT_MAX_STEPS, max_seconds=OVERFIT_BUDGET_S)
    start = time.perf_counter()
    result = train(cfg, [two_primitive_scene])
    wall = time.perf_counter() - start
    return result, wall


@pytest.fixture(scope="session")
def general_scenes(acceptance_root):
    scenes = []
    for seed in GENERAL_TRAIN_SEEDS + (GENERAL_HELD_OUT_SEED,):
        out = acceptance_root / f"random{seed}"
        generate_scene(random_scene(seed), out)
        scenes.append(load_scene(out))
    return scenes[:-1], scenes[-1]


@pytest.fixture(scope="session")
def general_run(general_scenes):
    train_scenes, unseen = general_scenes
    cfg = acceptance_config(max_steps=10**6, max_seconds=GENERAL_BUDGET_S)
    result = train(cfg, train_scenes)
    views = held_out(unseen)
    trained = evaluate(result.checkpoint.model(), unseen, views, BINS)["mean_psnr"]
    baseline = evaluate(SRFModel.init(cfg.model), unseen, views, BINS)["mean_psnr"]
    return result.checkpoint, trained, baseline


# -- 1 gradient suite ------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite") as checks:
        start = time.perf_counter()
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "gradient",
             str(TESTS / "test_tensor.py"), str(TESTS / "test_stereo.py"), str(TESTS / "test_renderer.py")],
            capture_output=True, text=True, cwd=TESTS.parent,
        )
        elapsed = time.perf_counter() - start
        summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
        checks["finite differences"] = (proc.returncode == 0, f"[{summary}]")
        checks["runtime"] = (elapsed < 120.0, f"{elapsed:.1f}s < 120s")


# -- 2 compositing identities -------------------------------------------------------------


def test_criterion_2_compositing_identities():
    rng = np.random.default_rng(2024)
    n_rays, n_samples = 1000, 48
    with criterion(2, "compositing identities") as checks, T.precision(np.float64), T.no_grad():
        sigma = rng.exponential(2.0, (n_rays, n_samples)) * (rng.random((n_rays, n_samples)) > 0.2)
        delta = rng.uniform(0.0, 0.3, (n_rays, n_samples))
        color = rng.uniform(size=(n_rays, n_samples, 3))
        _, w = composite(sigma, color, delta, return_weights=True)
        w = w.data
        # independent straightforward evaluation of the closed form
        closed = np.array([1.0 - np.exp(-sum(s * d for s, d in zip(sigma[r], delta[r]))) for r in range(n_rays)])
        err = float(np.max(np.abs(w.sum(axis=1) - closed)))
        checks["sum of weights"] = (err < 1e-12, f"max err {err:.1e} < 1e-12")
        checks["weights in [0,1]"] = (bool(np.all((w >= 0) & (w <= 1))), "")
        opaque = sigma.copy()
        opaque[:, 0] = 50.0 / np.maximum(delta[:, 0], 1e-3)
        d0 = delta.copy()
        d0[:, 0] = np.maximum(delta[:, 0], 1e-3)
        rgb = composite(opaque, color, d0).data
        err0 = float(np.max(np.abs(rgb - color[:, 0])))
        checks["opaque first sample"] = (err0 < 1e-12, f"max err {err0:.1e} < 1e-12")


# -- 3 shape laws ----------------------------------------------------------------------


def test_criterion_3_shape_laws():
    cfg = ModelConfig()
    D = cfg.descriptor_dim
    params = {k: T.Tensor(v) for k, v in init_stereo(cfg, D, np.random.default_rng(3)).items()}
    rng = np.random.default_rng(4)
    with criterion(3, "shape laws") as checks, T.no_grad():
        X = pairwise_bank(T.Tensor(rng.uniform(size=(10, D))), params)
        checks["N=10 rows"] = (X.shape == (90, cfg.bank_size), f"X {X.shape} == (90, {cfg.bank_size})")
        for n in (3, 4, 8, 10):
            y = g_stereo(T.Tensor(rng.uniform(size=(n, D))), params)
            checks[f"N={n}"] = (y.shape == (cfg.bank_size,) and bool(np.all(np.isfinite(y.data))),
                                f"y {y.shape}")


# -- 4 overfit oracle -----------------------------------------------------------------------


def test_criterion_4_overfit(overfit_run, two_primitive_scene):
    result, wall = overfit_run
    scene = two_primitive_scene
    losses = [r["loss"] for r in result.log]
    with criterion(4, "overfit oracle") as checks:
        score = evaluate(result.checkpoint.model(), scene, held_out(scene), BINS)["mean_psnr"]
        checks["held-out PSNR"] = (score >= 22.0, f"{score:.2f} dB >= 22 dB")
        checks["within budget"] = (wall <= OVERFIT_BUDGET_S, f"{wall:.0f}s <= {OVERFIT_BUDGET_S:.0f}s")
        ratio = losses[499] / losses[0] if len(losses) >= 500 else float("inf")
        checks["loss at step 500"] = (ratio < 0.5, f"{ratio:.3f} x initial < 0.5")


# -- 5 generalization oracle --------------------------------------------------------------


def test_criterion_5_generalization(general_run):
    _, trained, baseline = general_run
    with criterion(5, "generalization oracle") as checks:
        gain = trained - baseline
        checks["unseen scene gain"] = (gain >= 4.0, f"{trained:.2f} vs random init {baseline:.2f} dB, "
                                                    f"+{gain:.2f} >= 4 dB")


# -- 6 fine-tuning oracle ---------------------------------------------------------------------


def test_criterion_6_finetune(general_run, general_scenes):
    checkpoint, before, _ = general_run
    _, unseen = general_scenes
    with criterion(6, "fine-tuning oracle") as checks:
        gains = []
        for seed in range(3):
            tuned = finetune(checkpoint, unseen, steps=10**6, seconds=FINETUNE_BUDGET_S, lr=LR,
                             rays_per_batch=RAYS, n_bins=BINS, seed=seed)
            gains.append(evaluate(tuned.model(), unseen, held_out(unseen), BINS)["mean_psnr"] - before)
        median = float(np.median(gains))
        checks["median gain"] = (median >= 1.0, f"{median:+.2f} dB >= +1 dB over seeds "
                                                f"{[round(g, 2) for g in gains]}")


# -- 7 meshing oracle -----------------------------------------------------------------------


def test_criterion_7_meshing(acceptance_root):
    out = acceptance_root / "sphere"
    spec = preset("sphere")
    generate_scene(spec, out)
    scene = load_scene(out)
    radius = spec.primitives[0].radius
    with criterion(7, "meshing oracle") as checks:
        model = train(acceptance_config(max_steps=SPHERE_STEPS), [scene]).checkpoint.model()
        cond = scene.conditioning()
        refs = scene.indices("reference")
        lo, hi = scene_bbox([scene.views[i].camera for i in refs], scene.t_near, scene.t_far)
        pyramid = model.encode(cond)
        grid = evaluate_grid(model, cond, (lo, hi), 64, pyramid=pyramid)
        mesh = color_vertices(marching_cubes(grid, default_threshold(grid)), model, cond, pyramid=pyramid)
        checks["non-empty"] = (mesh.n_vertices > 0, f"{mesh.n_vertices} vertices")
        dev = abs(float(np.median(np.linalg.norm(mesh.vertices - np.asarray(spec.primitives[0].center), axis=1)))
                  - radius)
        diag = grid.voxel_diagonal
        checks["median radius"] = (dev < 2 * diag, f"|median - r| {dev:.3f} < {2 * diag:.3f}")
        mean_color = mesh.colors.mean(axis=0)
        dominant = int(np.argmax(mean_color))
        albedo = int(np.argmax(spec.primitives[0].albedo))
        checks["dominant channel"] = (dominant == albedo, f"mean color {np.round(mean_color, 3).tolist()}")


# -- 8 determinism ----------------------------------------------------------------------------


def test_criterion_8_determinism(two_primitive_scene, tmp_path):
    scene = two_primitive_scene
    cfg = acceptance_config(max_steps=10, rays_per_batch=32)
    with criterion(8, "determinism") as checks:
        a = train(cfg, [scene])
        b = train(cfg, [scene])
        la = [r["loss"] for r in a.log]
        lb = [r["loss"] for r in b.log]
        checks["loss trajectory"] = (len(la) == 10 and la == lb, "10 steps bit-identical")
        a.checkpoint.save(tmp_path / "m.bin")
        back = Checkpoint.load(tmp_path / "m.bin")
        cam = scene.views[held_out(scene)[0]].camera
        cond = scene.conditioning()
        x = render_image(a.checkpoint.model(), cond, cam, scene.t_near, scene.t_far, 8)
        y = render_image(back.model(), cond, cam, scene.t_near, scene.t_far, 8)
        checks["checkpoint forward"] = (x.tobytes() == y.tobytes(), "render bit-identical after reload")


# -- 9 robustness ----------------------------------------------------------------------------


def _ring(n, size=24):
    cams = []
    for k in range(n):
        az = 2 * np.pi * k / n
        R, t = look_at(3.0 * np.array([np.cos(az), np.sin(az), 0.5]), np.zeros(3))
        c = (size - 1) / 2
        cams.append(Camera(1.5 * size, 1.5 * size, c, c, size, size, R, t))
    return cams


def test_criterion_9_robustness():
    cfg = ModelConfig(bank_size=8)
    model = SRFModel.init(cfg)
    rng = np.random.default_rng(9)
    cams = _ring(3)
    cond = Conditioning.from_views([rng.uniform(size=(3, 24, 24)) for _ in cams], cams)
    with criterion(9, "robustness") as checks, T.no_grad():
        pyramid = model.encode(cond)

        # zero density everywhere: transparent rays, black pixels, zero weights
        dead = SRFModel(cfg, dict(model.params))
        last = f"decoder.fc{len(cfg.decoder_hidden)}"
        dead.params[last + ".weight"] = T.Tensor(np.zeros_like(model.params[last + ".weight"].data))
        dead.params[last + ".bias"] = T.Tensor(np.array([0.0, 0.0, 0.0, -1.0]))
        img = render_image(dead, cond, cams[0], 2.0, 4.0, 8)
        checks["zero density"] = (bool(np.all(img == 0)), "image exactly black")

        # a point behind camera k (farther out along its own axis), and points
        # projecting outside every image
        behind = 2.0 * np.stack([c.center for c in cams])
        u, v, z = cond.project(behind)
        own = (np.arange(3), np.arange(3))
        d_behind = model.descriptors(cond, pyramid, behind).data
        checks["behind camera"] = (bool(np.all(z[own] < 0)) and bool(np.all(d_behind[own] == 0)),
                                   "own-view descriptors zero")
        # in front of camera k but far off to the side of its image
        outside = np.stack([c.R.T @ (np.array([5.0, -5.0, 1.0]) - c.t) for c in cams])
        u, v, z = cond.project(outside)
        off = bool(np.all((z[own] > 0) & ((u[own] < -1) | (u[own] > 24)) & ((v[own] < -1) | (v[own] > 24))))
        d_out = model.descriptors(cond, pyramid, outside).data
        checks["out of image"] = (off and bool(np.all(d_out[own] == 0)), "own-view descriptors zero")
        for name, pts in (("behind", behind), ("outside", outside)):
            c, s = model.query(cond, pyramid, pts)
            checks[f"{name} finite"] = (bool(np.all(np.isfinite(c.data)) and np.all(np.isfinite(s.data))), "")

        # two reference views: pair rows padded with zero rows up to the window
        cond2 = Conditioning.from_views(list(cond.images[:2]), cams[:2])
        pts = rng.uniform(-0.5, 0.5, (16, 3))
        p2 = model.encode(cond2)
        X = pairwise_bank(model.descriptors(cond2, p2, pts), model.params)
        padded = T.concat([X, T.Tensor(np.zeros(X.shape[:-2] + (2, X.shape[-1])))], axis=-2)
        same = np.array_equal(aggregate(X, model.params).data, aggregate(padded, model.params).data)
        checks["N=2 zero-padded rows"] = (X.shape[-2] == 2 and same, "")
        img2 = render_image(model, cond2, cams[2], 2.0, 4.0, 8)
        checks["N=2 render finite"] = (bool(np.all(np.isfinite(img2))), "")

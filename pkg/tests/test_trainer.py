import json

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from srf import tensor as T
from srf.checkpoint import CheckpointError, load_arrays, save_arrays
from srf.config import Config
from srf.metrics import PSNR_CAP, mse, psnr, ssim
from srf.renderer import render_image
from srf.trainer import Checkpoint, NumericalError, SceneData, evaluate, finetune, train, train_step

from conftest import small_model_config


def small_train_config(**train):
    cfg = Config()
    cfg.model = small_model_config()
    cfg.train.rays_per_batch = 16
    cfg.train.n_bins = 6
    cfg.train.max_steps = 10
    cfg.train.val_every = 0
    cfg.train.lr = 1e-2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


# -- metrics -----------------------------------------------------------------


def test_psnr_identical_is_capped():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert psnr(img, img) == PSNR_CAP
    assert ssim(img, img) == pytest.approx(1.0)


def test_psnr_uniform_offset():
    img = np.random.default_rng(1).uniform(0, 0.9, size=(3, 16, 16))
    assert mse(img, img + 0.1) == pytest.approx(0.01)
    assert psnr(img, img + 0.1) == pytest.approx(20.0)


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(3, 32, 40))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ref = structural_similarity(a, b, channel_axis=0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_constant_worse_than_noise_at_matched_mse():
    rng = np.random.default_rng(3)
    yy, xx = np.mgrid[0:32, 0:32]
    img = np.stack([0.5 + 0.3 * np.sin(xx / 3.0 + c) * np.cos(yy / 4.0) for c in range(3)])
    const = np.full_like(img, img.mean())
    target_mse = mse(img, const)
    noisy = img + rng.normal(size=img.shape) * np.sqrt(target_mse)
    assert mse(img, noisy) == pytest.approx(target_mse, rel=0.05)
    assert ssim(img, const) < ssim(img, noisy)


def test_metric_shape_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ValueError, match="at least"):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


# -- checkpoint container --------------------------------------------------------


def test_checkpoint_container_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5),
              "c": np.arange(6, dtype=np.int64).reshape(2, 3), "d": np.float32(np.nan) * np.ones(2, np.float32)}
    save_arrays(tmp_path / "x.bin", arrays, {"hello": [1, 2]})
    back, meta = load_arrays(tmp_path / "x.bin")
    assert meta == {"hello": [1, 2]}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="checkpoint not found"):
        load_arrays(tmp_path / "none.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(tmp_path / "junk.bin")
    save_arrays(tmp_path / "t.bin", {"a": np.zeros(100)}, {})
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(tmp_path / "t.bin")


def test_model_checkpoint_forward_bit_exact(tmp_path, small_scene):
    cfg = small_train_config(max_steps=2)
    result = train(cfg, [small_scene])
    result.checkpoint.save(tmp_path / "m.bin")
    back = Checkpoint.load(tmp_path / "m.bin")
    assert back.config.to_dict() == cfg.to_dict()
    assert back.step == 2
    view = small_scene.indices("val")[0]
    cam = small_scene.views[view].camera
    cond = small_scene.conditioning()
    a = render_image(result.checkpoint.model(), cond, cam, small_scene.t_near, small_scene.t_far, 6)
    b = render_image(back.model(), cond, cam, small_scene.t_near, small_scene.t_far, 6)
    assert a.tobytes() == b.tobytes()
    for k, v in result.checkpoint.optimizer.items():
        assert back.optimizer[k].tobytes() == v.tobytes()


# -- training ----------------------------------------------------------------


def test_first_loss_finite_positive(small_scene):
    from srf.model import SRFModel
    from srf.optim import Adam

    cfg = small_train_config()
    model = SRFModel.init(cfg.model)
    loss = train_step(model, Adam(model.params, 1e-3), SceneData.build(small_scene), cfg.train,
                      np.random.default_rng(0))
    assert np.isfinite(loss) and loss > 0


def test_loss_trajectory_deterministic(small_scene):
    cfg = small_train_config(max_steps=10)
    a = [r["loss"] for r in train(cfg, [small_scene]).log]
    b = [r["loss"] for r in train(cfg, [small_scene]).log]
    assert len(a) == 10
    assert a == b


def test_resume_matches_uninterrupted(tmp_path, small_scene):
    cfg = small_train_config(max_steps=8)
    full = train(cfg, [small_scene])
    part = train(cfg, [small_scene], stop_at_step=3, checkpoint_path=tmp_path / "p.bin")
    resumed = train(cfg, [small_scene], resume=Checkpoint.load(tmp_path / "p.bin"))
    losses = [r["loss"] for r in part.log] + [r["loss"] for r in resumed.log]
    assert losses == [r["loss"] for r in full.log]
    for k, v in full.checkpoint.params.items():
        assert resumed.checkpoint.params[k].tobytes() == v.tobytes()


def test_multi_scene_round_robin(small_scene_dir, small_scene):
    from srf.scenegen import load_scene

    other = load_scene(small_scene_dir)
    other.name = "other"
    log = train(small_train_config(max_steps=4), [small_scene, other]).log
    assert [r["scene"] for r in log] == [small_scene.name, "other"] * 2


def test_validation_and_metrics_log(tmp_path, small_scene):
    cfg = small_train_config(max_steps=4, val_every=2)
    result = train(cfg, [small_scene], log_path=tmp_path / "log.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3, 4]
    assert "psnr" in lines[1] and "psnr" not in lines[0]
    assert all({"step", "loss", "wall"} <= set(r) for r in lines)
    assert result.best is not None


def test_validation_plateau_stops_early(small_scene):
    cfg = small_train_config(max_steps=50, val_every=1, patience=2, lr=0.0)
    log = train(cfg, [small_scene]).log
    assert len(log) == 3


def test_nan_guard(small_scene):
    from srf.model import SRFModel
    from srf.optim import Adam

    cfg = small_train_config()
    model = SRFModel.init(cfg.model)
    model.params["decoder.fc0.weight"].data[:] = np.nan
    with pytest.raises(NumericalError, match="non-finite"):
        train_step(model, Adam(model.params, 1e-3), SceneData.build(small_scene), cfg.train, np.random.default_rng(0))


def test_training_reduces_loss(small_scene):
    cfg = small_train_config(max_steps=60, rays_per_batch=64)
    losses = [r["loss"] for r in train(cfg, [small_scene]).log]
    assert np.mean(losses[-10:]) < 0.7 * np.mean(losses[:5])


# -- evaluation and fine-tuning -------------------------------------------------------


def test_evaluate_requires_disjoint_views(small_scene):
    ckpt = train(small_train_config(max_steps=0), [small_scene]).checkpoint
    with pytest.raises(ValueError, match="disjoint"):
        evaluate(ckpt.model(), small_scene, small_scene.indices("reference")[:1], n_bins=4)
    with pytest.raises(ValueError, match="at least one"):
        evaluate(ckpt.model(), small_scene, [], n_bins=4)
    out = evaluate(ckpt.model(), small_scene, small_scene.indices("test"), n_bins=4)
    assert len(out["psnr"]) == 1 and np.isfinite(out["mean_psnr"]) and -1 <= out["mean_ssim"] <= 1


def test_finetune_zero_steps_leaves_params(small_scene):
    ckpt = train(small_train_config(max_steps=1), [small_scene]).checkpoint
    tuned = finetune(ckpt, small_scene, steps=0)
    for k, v in ckpt.params.items():
        assert tuned.params[k].tobytes() == v.tobytes()


def test_finetune_negative_budget(small_scene):
    ckpt = train(small_train_config(max_steps=0), [small_scene]).checkpoint
    with pytest.raises(ValueError, match="non-negative"):
        finetune(ckpt, small_scene, steps=-1)


def test_finetune_reads_only_reference_views(small_scene_dir):
    from srf.scenegen import load_scene

    scene = load_scene(small_scene_dir)
    ckpt = train(small_train_config(max_steps=0), [scene]).checkpoint
    scene.access_log.clear()
    finetune(ckpt, scene, steps=5, rays_per_batch=8, n_bins=4)
    refs = set(scene.indices("reference"))
    assert scene.access_log and set(scene.access_log) <= refs


def test_finetune_improves_reference_fit(small_scene):
    ckpt = train(small_train_config(max_steps=0), [small_scene]).checkpoint
    refs = small_scene.indices("reference")

    def ref_psnr(c):
        model = c.model()
        scores = []
        for held in refs:
            cond = small_scene.conditioning([r for r in refs if r != held])
            cam = small_scene.views[held].camera
            scores.append(psnr(render_image(model, cond, cam, small_scene.t_near, small_scene.t_far, 6),
                               small_scene.image(held)))
        return np.mean(scores)

    before = ref_psnr(ckpt)
    gains = [ref_psnr(finetune(ckpt, small_scene, steps=40, lr=1e-2, rays_per_batch=64, n_bins=6, seed=s)) - before
             for s in range(3)]
    assert np.median(gains) > 0
    assert min(gains) > -0.1

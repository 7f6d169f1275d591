"""Self-supervised training, fine-tuning, checkpoints and evaluation."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .config import Config
from .geometry import pixel_rays
from .metrics import psnr, ssim
from .model import Conditioning, SRFModel
from .optim import Adam, grad_is_finite
from .renderer import render_image, render_rays
from .scenegen import Scene, load_scene

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "srf-model"


class NumericalError(FloatingPointError):
    pass


@dataclass
class Checkpoint:
    config: Config
    params: dict
    optimizer: dict = field(default_factory=dict)
    adam_step: int = 0
    step: int = 0
    rng_state: Optional[dict] = None
    info: dict = field(default_factory=dict)

    @classmethod
    def from_training(cls, config, model, optimizer=None, step=0, rng=None, info=None) -> "Checkpoint":
        return cls(
            config=copy.deepcopy(config),
            params={k: v.copy() for k, v in model.state_arrays().items()},
            optimizer={k: v.copy() for k, v in optimizer.state_arrays().items()} if optimizer else {},
            adam_step=optimizer.state.step if optimizer else 0,
            step=step,
            rng_state=copy.deepcopy(rng.bit_generator.state) if rng is not None else None,
            info=dict(info or {}),
        )

    def save(self, path) -> None:
        meta = {
            "kind": CHECKPOINT_KIND,
            "config": self.config.to_dict(),
            "step": self.step,
            "adam_step": self.adam_step,
            "rng_state": self.rng_state,
            "info": self.info,
        }
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays.update({f"optim.{k}": v for k, v in self.optimizer.items()})
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise ValueError(f"{path}: not a model checkpoint")
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        optim = {k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")}
        return cls(Config.from_dict(meta["config"]), params, optim, meta["adam_step"], meta["step"],
                   meta.get("rng_state"), meta.get("info", {}))

    def model(self) -> SRFModel:
        model = SRFModel.init(copy.deepcopy(self.config.model))
        model.load_state_arrays(self.params)
        return model


@dataclass
class SceneData:
    """A loaded scene with its fixed reference conditioning."""

    scene: Scene
    cond: Conditioning
    targets: list

    @classmethod
    def build(cls, scene: Scene, target_split: str = "target") -> "SceneData":
        targets = scene.indices(target_split)
        if not targets:
            raise ValueError(f"scene {scene.name} has no {target_split!r} views to supervise training")
        refs = set(scene.indices("reference"))
        if refs & set(targets):
            raise ValueError(f"scene {scene.name}: target views overlap reference views")
        return cls(scene, scene.conditioning(), targets)


def sample_pixels(scene: Scene, view: int, n: int, rng: np.random.Generator):
    """Rays and colors for ``n`` random pixels of ``view``."""
    cam = scene.views[view].camera
    img = scene.image(view)
    pix = rng.integers(0, cam.width * cam.height, size=n)
    u, v = pix % cam.width, pix // cam.width
    origins, dirs = pixel_rays(cam, u, v)
    colors = img[:, v, u].T
    return origins, dirs, colors


def supervised_step(model, optimizer, scene: Scene, cond: Conditioning, view: int, rays: int, n_bins: int,
                    rng: np.random.Generator, noise_std: float = 0.0) -> float:
    """One Adam step on an L2 rendering loss over random pixels of ``view``."""
    origins, dirs, colors = sample_pixels(scene, view, rays, rng)
    pyramid = model.encode(cond)
    rgb = render_rays(model, cond, pyramid, origins, dirs, scene.t_near, scene.t_far, n_bins, rng, noise_std)
    loss = T.mean_squared_error(rgb, T.Tensor(colors))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} on scene {scene.name} view {view}")
    optimizer.zero_grad()
    loss.backward()
    if not grad_is_finite(optimizer.params):
        bad = [k for k, p in optimizer.params.items() if p.grad is not None and not np.isfinite(p.grad).all()]
        raise NumericalError(f"non-finite gradients in {bad} on scene {scene.name} view {view}")
    optimizer.step()
    return value


def train_step(model, optimizer, data: SceneData, cfg, rng: np.random.Generator) -> float:
    """Sample a target view of ``data``, render a pixel batch, L2 loss, Adam step."""
    view = data.targets[int(rng.integers(len(data.targets)))]
    return supervised_step(model, optimizer, data.scene, data.cond, view, cfg.rays_per_batch, cfg.n_bins, rng,
                           cfg.density_noise_std)


def evaluate(model, scene: Scene, views, n_bins: int = 64, batch_size: int = 1024, cond=None) -> dict:
    """Per-view PSNR and SSIM of deterministic renders against held-out images."""
    views = list(views)
    if not views:
        raise ValueError("evaluation needs at least one view")
    refs = set(scene.indices("reference"))
    if refs & set(views):
        raise ValueError("evaluation views must be disjoint from the reference views")
    cond = scene.conditioning() if cond is None else cond
    with T.no_grad():
        pyramid = model.encode(cond)
    out = {"views": [], "psnr": [], "ssim": []}
    for i in views:
        cam = scene.views[i].camera
        pred = render_image(model, cond, cam, scene.t_near, scene.t_far, n_bins, batch_size, pyramid=pyramid)
        gt = scene.image(i)
        out["views"].append(scene.views[i].name)
        out["psnr"].append(psnr(pred, gt))
        out["ssim"].append(ssim(pred, gt))
    out["mean_psnr"] = float(np.mean(out["psnr"]))
    out["mean_ssim"] = float(np.mean(out["ssim"]))
    return out


class MetricsLog:
    """Append-only JSON-lines log."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Optional[Checkpoint]
    log: list


def train(config: Config, scenes=None, resume: Optional[Checkpoint] = None, log_path=None,
          checkpoint_path=None, stop_at_step: Optional[int] = None) -> TrainResult:
    """Round-robin training over ``scenes`` (loaded from ``config.train.scenes`` if omitted).

    ``stop_at_step`` ends the loop early without altering the trajectory, used
    to emulate interruptions.
    """
    tc = config.train
    if scenes is None:
        if not tc.scenes:
            raise ValueError("train.scenes is empty")
        scenes = [load_scene(s) for s in tc.scenes]
    data = [SceneData.build(s) for s in scenes]
    if resume is not None:
        model = resume.model()
        optimizer = Adam(model.params, tc.lr, (tc.beta1, tc.beta2), tc.eps)
        optimizer.load_state_arrays(resume.optimizer, resume.adam_step)
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        step = resume.step
        info = dict(resume.info)
    else:
        model = SRFModel.init(config.model)
        optimizer = Adam(model.params, tc.lr, (tc.beta1, tc.beta2), tc.eps)
        rng = np.random.default_rng(tc.seed)
        step = 0
        info = {"best_val_psnr": None, "stale": 0}
    log = MetricsLog(log_path)
    start = time.perf_counter()
    best = None
    end_step = tc.max_steps if stop_at_step is None else min(stop_at_step, tc.max_steps)
    while step < end_step:
        if tc.max_seconds and time.perf_counter() - start >= tc.max_seconds:
            break
        d = data[step % len(data)]
        loss = train_step(model, optimizer, d, tc, rng)
        step += 1
        record = {"step": step, "loss": loss, "scene": d.scene.name, "wall": time.perf_counter() - start}
        if tc.val_every and step % tc.val_every == 0:
            val = [evaluate(model, x.scene, x.scene.indices("val"), tc.n_bins, cond=x.cond)["mean_psnr"]
                   for x in data if x.scene.indices("val")]
            if val:
                record["psnr"] = float(np.mean(val))
                prev = info.get("best_val_psnr")
                if prev is None or record["psnr"] > prev:
                    info["best_val_psnr"] = record["psnr"]
                    info["stale"] = 0
                    best = Checkpoint.from_training(config, model, None, step)
                else:
                    info["stale"] = info.get("stale", 0) + 1
        log.write(**record)
        if "psnr" in record:
            logger.info("step %d loss %.5f val psnr %.2f", step, loss, record["psnr"])
        if checkpoint_path and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            Checkpoint.from_training(config, model, optimizer, step, rng, info).save(checkpoint_path)
        if tc.patience and info.get("stale", 0) >= tc.patience:
            logger.info("validation plateau after %d steps", step)
            break
    final = Checkpoint.from_training(config, model, optimizer, step, rng, info)
    if checkpoint_path:
        final.save(checkpoint_path)
    return TrainResult(final, best, log.records)


def finetune(checkpoint: Checkpoint, scene: Scene, steps: int = 100, seconds: float = 0.0, lr: float = 5e-4,
             rays_per_batch: int = 512, n_bins: int = 64, seed: int = 0, log_path=None) -> Checkpoint:
    """Continue training on ``scene``'s reference views only.

    Each step holds one reference view out as the supervision target and
    conditions on the remaining references. Stops after ``steps`` steps or
    ``seconds`` of wall time, whichever comes first (0 disables the time limit).
    """
    if steps < 0 or seconds < 0:
        raise ValueError("fine-tuning budget must be non-negative")
    refs = scene.indices("reference")
    if len(refs) < 3:
        raise ValueError("fine-tuning needs at least 3 reference views (one held out per step)")
    model = checkpoint.model()
    optimizer = Adam(model.params, lr, (checkpoint.config.train.beta1, checkpoint.config.train.beta2),
                     checkpoint.config.train.eps)
    rng = np.random.default_rng(seed)
    conds = {}
    log = MetricsLog(log_path)
    start = time.perf_counter()
    done = 0
    while done < steps:
        if seconds and time.perf_counter() - start >= seconds:
            break
        held = refs[int(rng.integers(len(refs)))]
        if held not in conds:
            conds[held] = scene.conditioning([r for r in refs if r != held])
        loss = supervised_step(model, optimizer, scene, conds[held], held, rays_per_batch, n_bins, rng)
        done += 1
        log.write(step=done, loss=loss, scene=scene.name, wall=time.perf_counter() - start, phase="finetune")
    info = dict(checkpoint.info)
    info["finetune_steps"] = info.get("finetune_steps", 0) + done
    info["finetune_scene"] = scene.name
    return Checkpoint.from_training(checkpoint.config, model, optimizer, checkpoint.step, None, info)

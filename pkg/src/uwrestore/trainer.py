"""Two-stage training loop.

Stage 1 fits the paired prior generator and the restorer on priors computed
from ground truth. Stage 2 freezes that generator, learns the degraded-only
generator and the prior denoiser, and keeps fine-tuning the restorer on
denoised priors.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .config import RunConfig
from .core import ImagePlane, InvalidInputError
from .lcdm import q_sample, reverse_chain, schedule_from_config
from .losses import LossReport, stage1_losses, stage2_losses
from .pipeline import DepthService, Models, build_models

Pair = Tuple[torch.Tensor, torch.Tensor]


class StagingError(RuntimeError):
    pass


def cosine_lr(it: int, total: int, lr0: float, lr1: float) -> float:
    """Cosine annealing from ``lr0`` at 0 to ``lr1`` at ``total``; clamps to ``lr1`` past the end."""
    if it < 0 or total < 1:
        raise InvalidInputError(f"need 0 <= iter and total >= 1, got iter={it} total={total}")
    if it >= total:
        return lr1
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * it / total))


def augment_tensors(lq: torch.Tensor, gt: torch.Tensor, crop: int,
                    generator: Optional[torch.Generator] = None) -> Pair:
    """Same random ``crop x crop`` window and the same flips for both ``[C, H, W]`` images."""
    if lq.shape != gt.shape:
        raise InvalidInputError(f"pair shapes differ: {tuple(lq.shape)} vs {tuple(gt.shape)}")
    h, w = lq.shape[-2:]
    if h < crop or w < crop:
        raise InvalidInputError(
            f"image {h}x{w} is smaller than the {crop}x{crop} training crop; "
            f"upscale or pad the dataset, or lower 'crop' in the config")
    top = int(torch.randint(0, h - crop + 1, (1,), generator=generator))
    left = int(torch.randint(0, w - crop + 1, (1,), generator=generator))
    hflip, vflip = (torch.rand(2, generator=generator) < 0.5).tolist()
    out = []
    for x in (lq, gt):
        x = x[..., top:top + crop, left:left + crop]
        if hflip:
            x = x.flip(-1)
        if vflip:
            x = x.flip(-2)
        out.append(x)
    return out[0], out[1]


def augment(pair: Tuple[ImagePlane, ImagePlane], crop: int,
            generator: Optional[torch.Generator] = None) -> Tuple[ImagePlane, ImagePlane]:
    a, b = augment_tensors(pair[0].to_tensor()[0], pair[1].to_tensor()[0], crop, generator)
    return ImagePlane.from_tensor(a), ImagePlane.from_tensor(b)


@dataclass
class TrainState:
    stage: int
    iteration: int
    total: int
    lr0: float
    lr1: float

    @property
    def lr(self) -> float:
        return cosine_lr(self.iteration, self.total, self.lr0, self.lr1)


STAGE_COLUMNS = {1: ["l1", "depth_l1", "depth_grad"], 2: ["l1", "diff", "eps"]}


class Trainer:
    """Owns the optimizer, the data sampler and the log for one stage.

    Every random draw (epoch order, crops, flips, timesteps, noise) comes from
    ``self.generator``, which is checkpointed with the weights.
    """

    def __init__(self, cfg: RunConfig, models: Models, data: Sequence[Pair], stage: int = 1,
                 depth: Optional[DepthService] = None, out_dir=None, total: Optional[int] = None):
        if stage not in (1, 2):
            raise StagingError(f"unknown stage {stage}")
        if stage == 2 and getattr(models, "trained_stage", 0) < 1:
            raise StagingError("stage 2 needs weights from a stage-1 checkpoint (pass --resume)")
        if len(data) < cfg.batch:
            raise InvalidInputError(f"{len(data)} training pairs but batch size {cfg.batch}")
        self.cfg, self.models, self.data = cfg, models, list(data)
        self.depth = depth or DepthService()
        self.sched = schedule_from_config(cfg)
        total = total or (cfg.iters_stage1 if stage == 1 else cfg.iters_stage2)
        self.state = TrainState(stage, 0, total, cfg.lr_init, cfg.lr_final)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self._order: List[int] = []
        self._pos = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None

        models.backbone.set_routing(None)
        if stage == 1:
            trainable = [models.sfpg, models.backbone]
        else:
            models.sfpg.requires_grad_(False)
            models.sfpg.eval()
            trainable = [models.sfpg_star, models.denoiser, models.backbone]
        for m in trainable:
            m.train()
        self.params = [p for m in trainable for p in m.parameters()]
        self.optimizer = torch.optim.AdamW(self.params, lr=self.state.lr, betas=(0.9, 0.999),
                                           weight_decay=cfg.weight_decay)

    # data
    def _next_indices(self) -> List[int]:
        b = self.cfg.batch
        if self._pos + b > len(self._order):
            self._order = torch.randperm(len(self.data), generator=self.generator).tolist()
            self._pos = 0
        idx = self._order[self._pos:self._pos + b]
        self._pos += b
        return idx

    def next_batch(self) -> Pair:
        pairs = [augment_tensors(*self.data[i], self.cfg.crop, self.generator) for i in self._next_indices()]
        return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])

    # steps
    def _update(self, report: LossReport):
        if not math.isfinite(report.components["l1"]) or not torch.isfinite(report.total):
            raise FloatingPointError(f"non-finite loss at iteration {self.state.iteration}: {report.components}")
        for g in self.optimizer.param_groups:
            g["lr"] = self.state.lr
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.optimizer.step()
        self.state.iteration += 1

    def stage1_losses(self, lq, gt) -> LossReport:
        m, cfg = self.models, self.cfg
        z = m.sfpg(lq, gt)
        x_hq = m.backbone(lq, z, self.depth(lq), clip=False)
        return stage1_losses(x_hq, gt, self.depth(gt), self.depth(x_hq), cfg.lambda1, cfg.lambda2)

    def stage2_losses(self, lq, gt) -> LossReport:
        m, cfg, sched = self.models, self.cfg, self.sched
        with torch.no_grad():
            z = m.sfpg(lq, gt)
        c = m.sfpg_star(lq)
        b = z.shape[0]
        t = torch.randint(1, sched.T + 1, (b,), generator=self.generator)
        eps = torch.randn(z.shape, generator=self.generator)
        eps_pred = m.denoiser(q_sample(z, t, eps, sched), c, t)
        z_T = q_sample(z, sched.T, torch.randn(z.shape, generator=self.generator), sched)
        z_hat = reverse_chain(z_T, c, m.denoiser, sched, self.generator)
        x_hq = m.backbone(lq, z_hat, self.depth(lq), clip=False)
        return stage2_losses(x_hq, gt, z, z_hat, eps_pred, eps, cfg.eps_weight)

    def stage1_step(self, batch: Pair) -> LossReport:
        if self.state.stage != 1:
            raise StagingError("stage1_step called on a stage-2 trainer")
        report = self.stage1_losses(*batch)
        self._update(report)
        return report

    def stage2_step(self, batch: Pair) -> LossReport:
        if self.state.stage != 2:
            raise StagingError("stage2_step called on a stage-1 trainer")
        report = self.stage2_losses(*batch)
        self._update(report)
        return report

    def step(self) -> Tuple[float, LossReport]:
        lr = self.state.lr
        batch = self.next_batch()
        report = self.stage1_step(batch) if self.state.stage == 1 else self.stage2_step(batch)
        return lr, report

    # loop
    def run(self, iterations: Optional[int] = None, log_every: int = 0) -> List[dict]:
        """Train up to ``iterations`` more steps (default: to the end of the schedule).

        Rows go to ``out_dir/train_log.csv``; wall time per step goes to
        ``out_dir/timing.csv`` so the loss log stays reproducible.
        """
        end = self.state.total if iterations is None else min(self.state.total, self.state.iteration + iterations)
        rows = []
        cols = ["iter", "stage", "lr", "total"] + STAGE_COLUMNS[self.state.stage]
        log = timing = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log = _CsvAppender(self.out_dir / "train_log.csv", cols)
            timing = _CsvAppender(self.out_dir / "timing.csv", ["iter", "stage", "seconds"])
        try:
            while self.state.iteration < end:
                t0 = time.perf_counter()
                lr, report = self.step()
                row = {"iter": self.state.iteration, "stage": self.state.stage, "lr": lr, **report.as_row()}
                rows.append(row)
                if log is not None:
                    log.write(row)
                    timing.write({"iter": self.state.iteration, "stage": self.state.stage,
                                  "seconds": round(time.perf_counter() - t0, 4)})
                    it = self.state.iteration
                    if it % self.cfg.checkpoint_every == 0 or it == end:
                        self.save(self.out_dir / f"stage{self.state.stage}_iter{it:07d}.ckpt")
                if log_every and self.state.iteration % log_every == 0:
                    print(f"[stage {self.state.stage}] iter {self.state.iteration} lr {lr:.3g} "
                          f"loss {report.components}", flush=True)
            if self.state.iteration >= self.state.total:
                self.models.trained_stage = max(self.models.trained_stage, self.state.stage)
        finally:
            if log is not None:
                log.close()
                timing.close()
        return rows

    # checkpoints
    def save(self, path):
        arrays = {}
        for name in ("sfpg", "sfpg_star", "denoiser", "backbone"):
            arrays.update(module_arrays(f"model.{name}", getattr(self.models, name)))
        opt = self.optimizer.state_dict()
        for i, st in opt["state"].items():
            for k, v in st.items():
                arrays[f"optim.{i}.{k}"] = v
        arrays["rng.generator"] = self.generator.get_state()
        meta = {
            "config": self.cfg.to_dict(),
            "stage": self.state.stage,
            "iteration": self.state.iteration,
            "total": self.state.total,
            "sampler": {"order": self._order, "pos": self._pos},
        }
        save_checkpoint(arrays, meta, path)

    def restore_training_state(self, arrays, meta):
        """Continue a same-stage run: optimizer moments, RNG, sampler and iteration."""
        if meta["stage"] != self.state.stage:
            raise StagingError(f"checkpoint is from stage {meta['stage']}, trainer is stage {self.state.stage}")
        opt = self.optimizer.state_dict()
        state = {}
        for key, v in arrays.items():
            if key.startswith("optim."):
                _, i, k = key.split(".", 2)
                state.setdefault(int(i), {})[k] = torch.from_numpy(np.array(v))
        opt["state"] = state
        self.optimizer.load_state_dict(opt)
        self.generator.set_state(torch.from_numpy(np.array(arrays["rng.generator"])))
        self._order = list(meta["sampler"]["order"])
        self._pos = int(meta["sampler"]["pos"])
        self.state.iteration = int(meta["iteration"])
        self.state.total = int(meta["total"])


def load_models(path, cfg: Optional[RunConfig] = None) -> Tuple[Models, dict, dict]:
    """Rebuild the model bundle from a checkpoint; returns ``(models, arrays, meta)``."""
    arrays, meta = load_checkpoint(path)
    cfg = cfg or RunConfig.from_dict(meta["config"])
    models = build_models(cfg)
    for name in ("sfpg", "sfpg_star", "denoiser", "backbone"):
        load_module_arrays(f"model.{name}", getattr(models, name), arrays)
    models.trained_stage = int(meta.get("stage", 0))
    return models, arrays, meta


def trainer_from_checkpoint(path, data, stage: int, depth=None, out_dir=None,
                            cfg: Optional[RunConfig] = None) -> Trainer:
    """Resume a run. A stage-1 checkpoint passed with ``stage=2`` starts stage 2 from its weights."""
    arrays, meta = load_checkpoint(path)
    cfg = cfg or RunConfig.from_dict(meta["config"])
    models, _, _ = load_models(path, cfg)
    if meta["stage"] > stage:
        raise StagingError(f"checkpoint is from stage {meta['stage']}; cannot go back to stage {stage}")
    trainer = Trainer(cfg, models, data, stage=stage, depth=depth, out_dir=out_dir)
    if meta["stage"] == stage:
        trainer.restore_training_state(arrays, meta)
    return trainer


class _CsvAppender:
    def __init__(self, path: Path, columns):
        new = not path.exists() or path.stat().st_size == 0
        self.columns = columns
        self.fh = open(path, "a", newline="", encoding="utf-8")
        self.writer = csv.DictWriter(self.fh, fieldnames=columns, extrasaction="ignore")
        if new:
            self.writer.writeheader()

    def write(self, row):
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        self.fh.flush()

    def close(self):
        self.fh.close()

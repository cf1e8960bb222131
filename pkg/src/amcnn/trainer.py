"""Two-stage training: each column alone, then the whole network; plus evaluation."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from . import formats
from .autodiff import Parameter, adam_step, backward, conv2d, grad_norm, relu
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import AugmentSpec, Sample, attach_density, augment, roi_mask, sample_rng, target_map
from .density import DOWNSAMPLE
from .errors import DataError, DivergenceError
from .losses import EvalReport, combined_loss, euclidean_loss, mae_mse, masked_count, relative_deviation_loss
from .model import ModelParams, build_model, forward, forward_branch, pretrain_head

logger = logging.getLogger(__name__)


@dataclass
class LogRow:
    stage: str
    step: int
    l_ed: float
    l_rd: float
    loss: float
    grad_norm: float


@dataclass
class TrainLog:
    rows: List[LogRow] = field(default_factory=list)
    evals: List[tuple] = field(default_factory=list)
    wall_seconds: float = 0.0

    HEADER = "stage,step,l_ed,l_rd,loss,grad_norm"

    def append(self, row: LogRow):
        if self.rows and self.rows[-1].stage == row.stage and row.step <= self.rows[-1].step:
            raise ValueError(f"log steps must increase: {row.step} after {self.rows[-1].step}")
        self.rows.append(row)

    def to_csv(self) -> str:
        lines = [self.HEADER]
        lines += [f"{r.stage},{r.step},{r.l_ed!r},{r.l_rd!r},{r.loss!r},{r.grad_norm!r}" for r in self.rows]
        lines += [f"eval:{stage},{step},MAE,{mae!r},MSE,{mse!r}" for stage, step, mae, mse in self.evals]
        return "\n".join(lines) + "\n"

    def losses(self, stage=None) -> np.ndarray:
        return np.array([r.loss for r in self.rows if stage is None or r.stage == stage])


def prepare(samples: Sequence[Sample], cfg: TrainConfig) -> List[Sample]:
    """Attach ground-truth densities where missing."""
    policy = cfg.sigma_policy
    return [s if s.density is not None else attach_density(s, policy) for s in samples]


def patch_stream(samples: Sequence[Sample], spec: AugmentSpec, seed: int, stage: str) -> Iterator[Sample]:
    """Endless stream of augmented patches.

    Each epoch visits images in a shuffled order; the patches of one image
    come from that image's own RNG stream and are shuffled among themselves.
    """
    if not samples:
        raise DataError("training set is empty")
    order_rng = np.random.default_rng([seed, sum(map(ord, stage))])
    rngs = [sample_rng(seed, s.id) for s in samples]
    while True:
        for i in order_rng.permutation(len(samples)):
            patches = augment(samples[i], spec, rngs[i])
            for j in order_rng.permutation(len(patches)):
                yield patches[j]


def patches_per_epoch(n_images: int, spec: AugmentSpec) -> int:
    per = spec.crop_count if spec.crop_count > 0 else 1
    return n_images * per * (2 if spec.flip else 1)


def _step(params: List[Parameter], predict: Callable, batch: Sequence[Sample], cfg: TrainConfig,
          stage: str, step: int, use_rd: bool, lr: float) -> LogRow:
    preds, targets, masks, gt_counts, pred_counts = [], [], [], [], []
    for s in batch:
        d = predict(s.image)
        t = target_map(s)
        m = roi_mask(s)
        preds.append(d)
        targets.append(t)
        masks.append(m)
        gt_counts.append(float(t.sum()))
        pred_counts.append(masked_count(d, m))
    ed = euclidean_loss(preds, targets, masks)
    rd = relative_deviation_loss(gt_counts, pred_counts, cfg.z)
    loss = combined_loss(ed, rd, cfg.loss) if use_rd else ed
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(step, value)
    backward(loss)
    gn = grad_norm(params)
    adam_step(params, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    return LogRow(stage, step, ed.item(), rd.item(), value, gn)


def pretrain_branch(label: str, dataset: Sequence[Sample], cfg: TrainConfig, log: Optional[TrainLog] = None,
                    specs=None) -> List[Parameter]:
    """Train one column plus a temporary 1x1 head on random crops, Euclidean loss only.

    Returns the column's parameters; the head is discarded.
    """
    dataset = prepare(dataset, cfg)
    kwargs = {} if specs is None else {"specs": specs}
    single = build_model(f"AM-CNN({label})", seed=cfg.seed, init_std=cfg.init_std, head_init=cfg.head_init, **kwargs)
    params = single.branch_parameters(label)
    head = pretrain_head(single.specs[label], seed=cfg.seed, init_std=cfg.init_std, head_init=cfg.head_init)

    def predict(image):
        f = forward_branch(single, label, image)
        return relu(conv2d(f, head[0].tensor, head[1].tensor))

    spec = AugmentSpec(cfg.c_p, 0.5, flip=False)
    stream = patch_stream(dataset, spec, cfg.seed, f"pretrain.{label}")
    log = log if log is not None else TrainLog()
    every = max(1, cfg.pretrain_iters // 20)
    for step in range(1, cfg.pretrain_iters + 1):
        batch = [next(stream) for _ in range(cfg.batch)]
        row = _step(params + head, predict, batch, cfg, f"pretrain.{label}", step, False, cfg.effective_pretrain_lr)
        log.append(row)
        if step % every == 0:
            logger.info("pretrain %s step %d  L_ED %.4g", label, step, row.l_ed)
    return params


def finetune(model: ModelParams, dataset: Sequence[Sample], cfg: TrainConfig, log: Optional[TrainLog] = None,
             checkpoint_path=None, eval_set: Optional[Sequence[Sample]] = None):
    """Train the whole network on crops and their mirror images with L_ED + alpha * L_RD."""
    dataset = prepare(dataset, cfg)
    params = model.parameters()
    for p in params:
        p.reset_state()
        p.zero_grad()
    spec = AugmentSpec(cfg.c_f, 0.5, flip=cfg.flip)
    stream = patch_stream(dataset, spec, cfg.seed, "finetune")
    log = log if log is not None else TrainLog()

    def predict(image):
        return forward(model, image)[0]

    every = max(1, cfg.finetune_iters // 20)
    for step in range(1, cfg.finetune_iters + 1):
        batch = [next(stream) for _ in range(cfg.batch)]
        row = _step(params, predict, batch, cfg, "finetune", step, cfg.use_rd, cfg.lr)
        log.append(row)
        if step % every == 0:
            logger.info("finetune step %d  L %.4g  L_ED %.4g  L_RD %.4g", step, row.loss, row.l_ed, row.l_rd)
        if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
        if eval_set is not None and cfg.eval_every and step % cfg.eval_every == 0:
            rep = evaluate(model, eval_set, cfg)
            log.evals.append(("finetune", step, rep.mae, rep.mse))
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model, log


def train(dataset: Sequence[Sample], cfg: TrainConfig, init: Optional[ModelParams] = None,
          from_scratch: bool = False, checkpoint_path=None, eval_set=None):
    """Full procedure.  Columns are pretrained unless ``init`` supplies them or ``from_scratch`` is set."""
    t0 = time.perf_counter()
    dataset = prepare(dataset, cfg)
    log = TrainLog()
    model = build_model(cfg.variant, seed=cfg.seed, rescale=cfg.rescale, attention_kernel=cfg.attention_kernel,
                        in_channels=_channels(dataset), init_std=cfg.init_std, head_init=cfg.head_init)
    if init is not None:
        from .checkpoint import load_branch_weights

        load_branch_weights(model, init)
    elif not from_scratch:
        for label in model.branches:
            pretrained = pretrain_branch(label, dataset, cfg, log, specs=list(model.specs.values()))
            for p in pretrained:
                model[p.name].tensor.data[...] = p.data
    finetune(model, dataset, cfg, log, checkpoint_path, eval_set)
    log.wall_seconds = time.perf_counter() - t0
    return model, log


def pretrain_all(dataset: Sequence[Sample], cfg: TrainConfig, log: Optional[TrainLog] = None) -> ModelParams:
    """Pretrain every column the configured variant uses; returns a model holding them."""
    dataset = prepare(dataset, cfg)
    model = build_model(cfg.variant, seed=cfg.seed, rescale=cfg.rescale, attention_kernel=cfg.attention_kernel,
                        in_channels=_channels(dataset), init_std=cfg.init_std, head_init=cfg.head_init)
    for label in model.branches:
        for p in pretrain_branch(label, dataset, cfg, log, specs=list(model.specs.values())):
            model[p.name].tensor.data[...] = p.data
    return model


def _channels(dataset):
    return dataset[0].image.shape[0] if dataset and dataset[0].image.ndim == 3 else 1


def predict_maps(model: ModelParams, image, rescale=None):
    """Density grid and probability maps as plain arrays."""
    density, maps = forward(model, image, rescale=rescale)
    return density.data[0], [m.data[0] for m in maps]


def evaluate(model, dataset: Sequence[Sample], cfg: Optional[TrainConfig] = None, out_dir=None) -> EvalReport:
    """Count error over a dataset.

    ``model`` is a :class:`ModelParams` or any callable mapping a sample to a
    quarter-resolution density grid.  Counts are taken inside the ROI when the
    sample has one.  With ``out_dir``, density and probability maps are written
    per image.
    """
    cfg = cfg or TrainConfig()
    dataset = prepare(dataset, cfg)
    pairs, ids = [], []
    for s in dataset:
        maps = []
        if isinstance(model, ModelParams):
            grid, maps = predict_maps(model, s.image)
        else:
            grid = np.asarray(model(s), dtype=np.float64)
        m = roi_mask(s)
        y = float(target_map(s).sum())
        yp = float((grid * m).sum()) if m is not None else float(grid.sum())
        pairs.append((y, yp))
        ids.append(s.id)
        if out_dir:
            export_maps(out_dir, s.id, grid, maps)
    return mae_mse(pairs, ids)


def export_maps(out_dir, sample_id, density, maps):
    """``<id>.density.dmap`` plus, per probability map, raw ``.dmap`` and a max-scaled 8-bit ``.pgm``."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, sample_id)
    formats.write_dmap(base + ".density.dmap", density, scale=DOWNSAMPLE)
    for k, m in enumerate(maps):
        suffix = f".prob{k}" if len(maps) > 1 else ".prob"
        formats.write_dmap(base + suffix + ".dmap", m, scale=DOWNSAMPLE)
        peak = m.max()
        formats.write_pgm(base + suffix + ".pgm", m / peak if peak > 0 else m)


def head_proximity_mask(sample: Sample, shape, radius: float) -> np.ndarray:
    """Quarter-scale cells whose centre lies within ``radius`` image pixels of some head."""
    h, w = shape
    cy = (np.arange(h) + 0.5) * DOWNSAMPLE - 0.5
    cx = (np.arange(w) + 0.5) * DOWNSAMPLE - 0.5
    near = np.zeros((h, w), dtype=bool)
    for x, y in sample.annotations.points:
        near |= (cx[None, :] - x) ** 2 + (cy[:, None] - y) ** 2 <= radius * radius
    return near


def attention_contrast(model: ModelParams, samples: Sequence[Sample], sigma: float = 4.0, rescale=None):
    """Per image: mean probability within 2 sigma of a head over mean probability elsewhere."""
    ratios = []
    for s in samples:
        _, maps = predict_maps(model, s.image, rescale=rescale)
        for m in maps:
            near = head_proximity_mask(s, m.shape, 2.0 * sigma)
            if near.all() or not near.any():
                continue
            ratios.append(float(m[near].mean() / m[~near].mean()))
    return np.array(ratios)

"""Multitask objective, label construction, training loop and checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionMismatch, EmptyDataset
from .graphs import Box, VisualScene, iou
from .model import RCRN, ModelConfig, SampleOutput
from .propagate import GROUNDING, MATCHING
from .readout import box_offsets, itm_score
from .sample import Sample, build_vocab

CHECKPOINT_VERSION = 1
REG_IOU = 0.5


@dataclass
class TrainConfig:
    mu: float = 3.0
    omega: float = 1.0
    k: int = 5
    lr_reasoning: float = 5e-4
    lr_encoder: float | None = None
    batch_size: int = 32
    iterations: int = 5000
    warmup: int | None = None
    seed: int = 0
    grad_clip: float | None = 5.0
    log_every: int = 50

    def __post_init__(self):
        for name in ("mu", "omega", "lr_reasoning"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.k < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("k, batch_size must be positive and iterations non-negative")

    @property
    def encoder_lr(self) -> float:
        return self.lr_reasoning if self.lr_encoder is None else self.lr_encoder

    @property
    def warmup_iterations(self) -> int:
        return int(round(0.1 * self.iterations)) if self.warmup is None else min(self.warmup, self.iterations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **kw) -> "TrainConfig":
        """``desk`` is the default small schedule; ``full`` mirrors a
        large-scale schedule (batch 64, 80k iterations, tiny encoder lr)."""
        presets = {
            "desk": {},
            "full": {"batch_size": 64, "iterations": 80000, "lr_encoder": 5e-7},
            "smoke": {"batch_size": 4, "iterations": 20, "log_every": 5},
        }
        if name not in presets:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **kw})


def grounding_label(scene: VisualScene, gt_box: Box) -> tuple[int, float]:
    """Proposal id with the largest IoU against ``gt_box`` (ties to the lowest id)."""
    best_id, best = None, -1.0
    for p in sorted(scene.proposals, key=lambda p: p.id):
        v = iou(p.box, gt_box)
        if v > best:
            best_id, best = p.id, v
    return best_id, best


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Summed smooth L1: ``0.5 x^2`` below 1, ``|x| - 0.5`` above."""
    if pred.shape != target.shape:
        raise DimensionMismatch(f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.smooth_l1_loss(pred, target, reduction="sum", beta=1.0)


@dataclass
class LossBundle:
    grd: torch.Tensor
    match: torch.Tensor
    reg: torch.Tensor
    mu: float = 3.0
    omega: float = 1.0

    @property
    def total(self) -> torch.Tensor:
        return self.grd + self.mu * self.match + self.omega * self.reg

    def to_dict(self) -> dict:
        return {k: float(v.detach()) for k, v in (("grd", self.grd), ("match", self.match), ("reg", self.reg), ("total", self.total))}


def grounding_loss(root_values: torch.Tensor, label_pos: int, scale: torch.Tensor | float) -> torch.Tensor:
    """Cross-entropy of ``softmax(scale * b_root)`` against the labelled position."""
    logits = root_values * scale
    return F.cross_entropy(logits.unsqueeze(0), torch.tensor([label_pos]))


def match_loss(p_match: torch.Tensor, y: int) -> torch.Tensor:
    p = p_match.clamp(1e-7, 1 - 1e-7)
    return F.binary_cross_entropy(p, torch.tensor(float(y), dtype=p.dtype))


def compute_losses(out: SampleOutput, model: RCRN, config: TrainConfig, with_match: bool = True) -> LossBundle:
    """Per-sample loss terms. Mismatched samples contribute only the match
    term; regression is counted only when the labelled proposal overlaps the
    ground truth by at least ``REG_IOU``."""
    s = out.sample
    zero = torch.zeros((), dtype=model.dtype)
    grd, reg, mt = zero, zero, zero
    if s.match and s.referent_box is not None and out.grounding is not None:
        pid, ov = grounding_label(s.scene, s.referent_box)
        root = out.grounding.root_belief(s.graph)
        grd = grounding_loss(root.values, root.ids.index(pid), model.grounding_log_scale.exp())
        if ov >= REG_IOU:
            delta = box_offsets(out.features, s.graph, pid, model)
            prop_box = out.features.boxes[out.features.proposal_ids.index(pid)]
            target = torch.tensor([g - b for g, b in zip(s.referent_box, prop_box)], dtype=delta.dtype)
            reg = smooth_l1(delta, target)
    if with_match and out.matching is not None:
        mt = match_loss(itm_score(out.matching), s.match)
    return LossBundle(grd, mt, reg, config.mu, config.omega)


def make_optimizer(model: RCRN, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam([
        {"params": model.reasoning_parameters(), "lr": config.lr_reasoning, "name": "reasoning"},
        {"params": model.encoder_parameters(), "lr": config.encoder_lr, "name": "encoder"},
    ])


def batch_loss(model: RCRN, batch: Sequence[Sample], config: TrainConfig, stage: int) -> tuple[torch.Tensor, dict]:
    tasks = (GROUNDING,) if stage == 0 else (MATCHING, GROUNDING)
    if stage == 0:
        batch = [s for s in batch if s.match]
    if not batch:
        return torch.zeros((), dtype=model.dtype, requires_grad=True), {"grd": 0.0, "match": 0.0, "reg": 0.0, "total": 0.0}
    outs = model.run(batch, tasks)
    bundles = [compute_losses(o, model, config, with_match=stage == 1) for o in outs]
    total = torch.stack([b.total for b in bundles]).mean()
    log = {k: float(np.mean([b.to_dict()[k] for b in bundles])) for k in ("grd", "match", "reg", "total")}
    return total, log


def default_model_config(samples: Sequence[Sample], k: int = 5, **kw) -> ModelConfig:
    obj_dim = int(samples[0].scene.feats().shape[1])
    return ModelConfig(vocab=build_vocab(samples), obj_dim=obj_dim, k=k, **kw)


def train(samples: Sequence[Sample], config: TrainConfig, model: RCRN | None = None,
          model_config: ModelConfig | None = None, log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None,
          callback: Callable[[int, dict], None] | None = None) -> tuple[RCRN, list[dict]]:
    """Grounding-only warmup followed by the full multitask objective.
    Deterministic for a fixed seed."""
    samples = [s for s in samples if s.split == "train"] or list(samples)
    if not samples:
        raise EmptyDataset("no training samples")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = RCRN(model_config or default_model_config(samples, config.k))
    model.train()
    opt = make_optimizer(model, config)
    log: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    t0 = time.time()
    order = rng.permutation(len(samples))
    cursor = 0
    try:
        for it in range(config.iterations):
            stage = 0 if it < config.warmup_iterations else 1
            idx = []
            while len(idx) < config.batch_size:
                if cursor == len(order):
                    order, cursor = rng.permutation(len(samples)), 0
                take = min(config.batch_size - len(idx), len(order) - cursor)
                idx.extend(order[cursor:cursor + take].tolist())
                cursor += take
            loss, parts = batch_loss(model, [samples[i] for i in idx], config, stage)
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
            if not math.isfinite(parts["total"]):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
            rec = {"iteration": it, "stage": stage, **parts,
                   "lr": {g["name"]: g["lr"] for g in opt.param_groups}, "elapsed": round(time.time() - t0, 3)}
            log.append(rec)
            if fh and (it % config.log_every == 0 or it == config.iterations - 1):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            if callback:
                callback(it, rec)
    finally:
        if fh:
            fh.close()
    model.eval()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, config, iteration=config.iterations)
    return model, log


def parameter_manifest(model: torch.nn.Module) -> list[dict]:
    return [{"name": n, "shape": list(p.shape), "dtype": str(p.dtype).replace("torch.", "")}
            for n, p in model.state_dict().items()]


def save_checkpoint(model: RCRN, path: str | Path, train_config: TrainConfig | None = None,
                    iteration: int | None = None) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "iteration": iteration,
        "manifest": parameter_manifest(model),
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: str | Path) -> tuple[RCRN, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    model = RCRN(ModelConfig.from_dict(blob["model_config"]))
    if parameter_manifest(model) != blob["manifest"]:
        raise ValueError("checkpoint parameters do not match the model architecture")
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob

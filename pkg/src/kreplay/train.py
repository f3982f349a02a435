"""Mixed caption/replay training with AdamW and cosine annealing.

Each mini-batch may hold caption samples and replay samples. Caption samples
contribute label-smoothed cross-entropy. For replay samples a pseudo-caption is
decoded (no gradients) by the teacher or the student, then both models are
forced over it: the student logits feed the keyword loss and, with the teacher
logits, the distillation loss. One AdamW update per batch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import CaptionSample, Dataset, ReplaySample, mix_batches
from .decode import BeamConfig, beam_decode_batch, greedy_decode_batch
from .evaluation import caption_split, cider, recognition_accuracy
from .losses import (
    LossBundle,
    LossWeights,
    caption_ce,
    coverage_loss,
    distill_loss,
    keyword_probs,
    repetition_penalty,
)
from .model import Model, as_patch_tensor, backward, load_checkpoint, save_checkpoint
from .seeds import derive_seed
from .text import PAD

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", *LossBundle.CSV_FIELDS, "lr")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, bundle: LossBundle | None = None):
        super().__init__(f"non-finite loss at step {step}: {bundle}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr_max: float = 3e-3
    lr_min: float = 3e-5
    smoothing: float = 0.1
    lambda_k: float = 1.0
    lambda_d: float = 1.0
    temperature: float = 16.0
    beam_width: int = 5
    pseudo_caption_source: str = "teacher"
    pseudo_decode: str = "beam"
    use_scheduler: bool = True
    seed: int = 0
    checkpoint_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    select_by: str = "rec"
    cider_floor: float = 0.95
    eval_method: str = "beam"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.pseudo_caption_source not in ("teacher", "student"):
            raise ValueError("pseudo_caption_source must be teacher or student")
        if self.pseudo_decode not in ("beam", "greedy"):
            raise ValueError("pseudo_decode must be beam or greedy")
        if self.select_by not in ("rec", "cider"):
            raise ValueError("select_by must be rec or cider")
        if not 0 <= self.cider_floor <= 1:
            raise ValueError("cider_floor must be in [0, 1]")
        LossWeights(self.lambda_k, self.lambda_d)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_k, self.lambda_d)


# -- schedule and optimizer ------------------------------------------------


@dataclass
class SchedulerState:
    lr_max: float
    lr_min: float
    total_steps: int
    step: int = 0
    constant: bool = False

    @property
    def lr(self) -> float:
        return cosine_lr(self)

    def advance(self) -> None:
        if self.step >= self.total_steps:
            raise RuntimeError("scheduler advanced past total_steps")
        self.step += 1


def cosine_lr(state: SchedulerState) -> float:
    if state.total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if state.constant:
        return state.lr_max
    frac = state.step / state.total_steps
    return state.lr_min + 0.5 * (state.lr_max - state.lr_min) * (1 + math.cos(math.pi * frac))


class OptimizerState:
    """AdamW moments kept in flat buffers; ``m[name]`` / ``v[name]`` are views."""

    def __init__(self, model: Model, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.names = [n for n, _ in model.named_parameters()]
        self.shapes = [p.shape for _, p in model.named_parameters()]
        self.sizes = [p.numel() for _, p in model.named_parameters()]
        total = sum(self.sizes)
        self.m_flat = torch.zeros(total, dtype=torch.float64)
        self.v_flat = torch.zeros(total, dtype=torch.float64)
        self.m = dict(zip(self.names, (t.view(s) for t, s in zip(self.m_flat.split(self.sizes), self.shapes))))
        self.v = dict(zip(self.names, (t.view(s) for t, s in zip(self.v_flat.split(self.sizes), self.shapes))))
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.step = 0


def optimizer_step(model: Model, grads: dict, lr: float, state: OptimizerState) -> None:
    """One bias-corrected AdamW update with decoupled weight decay, in place."""
    if model.frozen:
        raise RuntimeError("teacher is frozen")
    params = dict(model.named_parameters())
    for name, shape in zip(state.names, state.shapes):
        if grads[name].shape != shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    g = torch.cat([grads[n].reshape(-1) for n in state.names])
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m_flat.mul_(b1).add_(g, alpha=1 - b1)
    state.v_flat.mul_(b2).addcmul_(g, g, value=1 - b2)
    m_hat = state.m_flat / (1 - b1**state.step)
    v_hat = state.v_flat / (1 - b2**state.step)
    update = lr * m_hat / (v_hat.sqrt() + state.eps)
    with torch.no_grad():
        flat = torch.cat([params[n].reshape(-1) for n in state.names])
        flat.mul_(1 - lr * state.weight_decay).sub_(update)
        for name, chunk, shape in zip(state.names, flat.split(state.sizes), state.shapes):
            params[name].copy_(chunk.view(shape))


# -- one step ---------------------------------------------------------------


def _pad(seqs) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    return torch.tensor([list(s) + [PAD] * (width - len(s)) for s in seqs], dtype=torch.long)


def pseudo_captions(source: Model, samples: list[ReplaySample], config: TrainConfig, cache: dict | None = None):
    """Decoded token sequences for the replay images (cached when the source is frozen)."""
    todo = [s for s in samples if cache is None or s.image.image_id not in cache]
    if todo:
        images = [s.image for s in todo]
        if config.pseudo_decode == "beam":
            cfg = BeamConfig(config.beam_width, source.max_len)
            hyps = [r.best for r in beam_decode_batch(source, images, cfg)]
        else:
            hyps = greedy_decode_batch(source, images, source.max_len)
        fresh = {s.image.image_id: h.tokens for s, h in zip(todo, hyps)}
        if cache is None:
            return [fresh[s.image.image_id] for s in samples]
        cache.update(fresh)
    return [cache[s.image.image_id] for s in samples]


def batch_losses(batch, student: Model, teacher: Model | None, config: TrainConfig, cache=None):
    """Differentiable total loss and the bundle of its components."""
    captions = [s for s in batch if isinstance(s, CaptionSample)]
    replays = [s for s in batch if isinstance(s, ReplaySample)]
    zero = torch.zeros((), dtype=torch.float64)
    l_ce = l_cov = l_rep = l_distill = zero
    if captions:
        tokens = _pad([s.tokens for s in captions])
        logits = student(as_patch_tensor([s.image for s in captions]), tokens)
        l_ce = torch.stack([caption_ce(logits[b], tokens[b], config.smoothing) for b in range(len(captions))]).mean()
    if replays:
        if teacher is None:
            raise ValueError("replay samples need a teacher model")
        source = teacher if config.pseudo_caption_source == "teacher" else student
        use_cache = cache if source.frozen else None
        pseudo = pseudo_captions(source, replays, config, use_cache)
        tokens = _pad(pseudo)
        patches = as_patch_tensor([s.image for s in replays])
        z_s = student(patches, tokens)
        with torch.no_grad():
            z_t = teacher(patches, tokens)
        covs, reps, kds = [], [], []
        for b, (s, seq) in enumerate(zip(replays, pseudo)):
            rows = len(seq) - 1
            probs = keyword_probs(z_s[b, :rows], s.keyword.subword_ids)
            covs.append(coverage_loss(probs))
            reps.append(repetition_penalty(probs))
            kds.append(distill_loss(z_t[b, :rows], z_s[b, :rows], config.temperature))
        l_cov, l_rep, l_distill = (torch.stack(x).mean() for x in (covs, reps, kds))
    l_kpred = l_cov + l_rep
    w = config.weights
    total = l_ce + w.lambda_k * l_kpred + w.lambda_d * l_distill
    bundle = LossBundle(
        *(float(x.detach()) for x in (l_ce, l_cov, l_rep, l_kpred, l_distill, total)),
        len(captions), len(replays),
    )
    return total, bundle


def train_step(batch, student: Model, teacher: Model | None, config: TrainConfig,
               optimizer: OptimizerState, scheduler: SchedulerState, cache=None) -> LossBundle:
    total, bundle = batch_losses(batch, student, teacher, config, cache)
    if not math.isfinite(bundle.l_total):
        raise DivergenceError(scheduler.step, bundle)
    grads = backward(student, total)
    optimizer_step(student, grads, scheduler.lr, optimizer)
    scheduler.advance()
    return bundle


# -- runs -------------------------------------------------------------------


@dataclass
class CheckpointMeta:
    step: int
    epoch: int
    cider: float
    rec: float
    path: str


def select_best_checkpoint(metas: list[CheckpointMeta], criterion: str = "rec", cider_floor: float = 0.0) -> CheckpointMeta:
    """Highest primary metric; ties go to the other metric, then the earlier step.

    With ``criterion="rec"`` only checkpoints whose CIDEr reaches ``cider_floor``
    times the run's best CIDEr compete, so an early checkpoint that has not yet
    learned the caption style cannot win on recognition alone.
    """
    if not metas:
        raise ValueError("no checkpoints to select from")
    if criterion == "rec":
        top = max(m.cider for m in metas)
        metas = [m for m in metas if m.cider >= cider_floor * top]
        key = lambda m: (-m.rec, -m.cider, m.step)  # noqa: E731
    elif criterion == "cider":
        key = lambda m: (-m.cider, -m.rec, m.step)  # noqa: E731
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    return min(metas, key=key)


def validate(model: Model, dataset: Dataset, config: TrainConfig) -> tuple[float, float]:
    """Generic-validation CIDEr and concept-validation recognition accuracy."""
    gen = caption_split(model, dataset, "generic_val", config.eval_method, config.beam_width)
    con = caption_split(model, dataset, "concept_val", config.eval_method, config.beam_width)
    return cider(gen, dataset.references("generic_val")), recognition_accuracy(con, dataset.keywords["concept_val"])


@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list[CheckpointMeta]
    best: CheckpointMeta
    log_path: Path
    steps: int
    final_lr: float
    bundles: list[LossBundle] = field(default_factory=list, repr=False)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_training(dataset: Dataset, student: Model, config: TrainConfig, out_dir: str | Path,
                 teacher: Model | None = None, caption_split_name: str = "generic_train",
                 use_replay: bool = True, stream: str = "downstream") -> TrainResult:
    """Train ``student`` in place, validating and checkpointing each epoch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if teacher is not None and not teacher.frozen:
        raise ValueError("teacher must be frozen")
    captions = dataset.captions[caption_split_name]
    replay = dataset.replay if use_replay else []
    if replay and teacher is None:
        raise ValueError("replay training needs a teacher checkpoint")
    n_batches = math.ceil((len(captions) + len(replay)) / config.batch_size)
    scheduler = SchedulerState(config.lr_max, config.lr_min, config.epochs * n_batches,
                               constant=not config.use_scheduler)
    optimizer = OptimizerState(student, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    cache: dict = {}
    metas: list[CheckpointMeta] = []
    bundles: list[LossBundle] = []
    log_path = out / "loss_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for epoch in range(1, config.epochs + 1):
            batches = mix_batches(captions, replay, config.batch_size,
                                  derive_seed(config.seed, "train", stream, epoch))
            for batch in batches:
                lr = scheduler.lr
                step = scheduler.step
                bundle = train_step(batch, student, teacher, config, optimizer, scheduler, cache)
                bundle.check(config.weights, rtol=1e-9)
                bundles.append(bundle)
                writer.writerow([step, *(_fmt(getattr(bundle, f)) for f in LossBundle.CSV_FIELDS), _fmt(lr)])
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                val_cider, val_rec = validate(student, dataset, config)
                path = out / f"epoch{epoch:03d}.ckpt"
                save_checkpoint(student, path, {"epoch": epoch, "step": scheduler.step})
                metas.append(CheckpointMeta(scheduler.step, epoch, val_cider, val_rec, path.name))
                log.info("epoch %d: val cider %.4f rec %.4f", epoch, val_cider, val_rec)
    best = select_best_checkpoint(metas, config.select_by, config.cider_floor)
    shutil.copyfile(out / best.path, out / "best.ckpt")
    (out / "checkpoints.json").write_text(json.dumps(
        {"checkpoints": [asdict(m) for m in metas], "best": asdict(best), "select_by": config.select_by},
        indent=2, sort_keys=True) + "\n")
    return TrainResult(out, metas, best, log_path, scheduler.step, scheduler.lr, bundles)


def load_best(run_dir: str | Path) -> Model:
    model, _ = load_checkpoint(Path(run_dir) / "best.ckpt")
    return model

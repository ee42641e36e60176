"""End-to-end optimization: decoupled-weight-decay adaptive-moment updates,
linear warmup + step decay, global-norm gradient clipping, checkpointing
with resume, and validation-driven model selection (best tumor Dice).

Runs are deterministic given the seed: shuffling, augmentation, and dropout
all draw from counter-based RNG streams keyed by (seed, purpose, epoch, ...),
so resuming from the last checkpoint reproduces an uninterrupted run
bitwise.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import losses, metrics, nn
from .autodiff import Tensor, no_grad
from .config import ModelConfig, TrainConfig
from .data import SegmentationSample, augment
from .model import DualSwinUnet, save_checkpoint, load_checkpoint

ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from base_lr/warmup_epochs to base_lr, then step decay
    by decay_rate every decay_epochs."""
    base = cfg.base_lr
    w = cfg.warmup_epochs
    if w > 0 and epoch < w:
        start = base / w
        return start + (base - start) * (epoch / w)
    steps = (epoch - w) // cfg.decay_epochs
    return base * cfg.decay_rate ** steps


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(self, store: nn.ParameterStore, betas=(0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = ADAM_EPS):
        self.store = store
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update.astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int):
        for name in self.m:
            self.m[name] = np.array(arrays[f"adam.m/{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(arrays[f"adam.v/{name}"], dtype=self.v[name].dtype)
        self.step_count = step_count


def clip_gradients(store: nn.ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for t in store.tensors():
        if t.grad is not None:
            total += float(np.square(t.grad, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for t in store.tensors():
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return norm


def batch_arrays(samples: list[SegmentationSample], dtype=np.float32):
    x = np.stack([s.image for s in samples]).astype(dtype)[..., None]
    y_thy = np.stack([s.thyroid_mask for s in samples]).astype(dtype)
    y_ptmc = np.stack([s.ptmc_mask for s in samples]).astype(dtype)
    return x, y_thy, y_ptmc


def train_step(model: DualSwinUnet, batch, opt: AdamW, tcfg: TrainConfig, lr: float,
               drop_rng=None) -> float:
    """One optimization step; returns the pre-step loss."""
    x, y_thy, y_ptmc = batch
    model.params.zero_grad()
    pred = model.forward(Tensor(x), drop_rng=drop_rng)
    loss = losses.combined_loss(pred, y_thy, y_ptmc,
                                losses.LossWeights(tcfg.alpha, tcfg.beta),
                                dual_decoder=model.cfg.dual_decoder,
                                label_smoothing=tcfg.label_smoothing)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite training loss {value!r}")
    loss.backward()
    clip_gradients(model.params, tcfg.clip_grad)
    opt.step(lr)
    return value


def predict_probs(model: DualSwinUnet, samples, batch_size: int = 8,
                  collect_times: bool = False):
    """Forward passes without tape; returns (thyroid, tumor) probability maps
    as float32 arrays [N,H,W], in sample order. With collect_times, also
    returns per-sample forward seconds (batch wall time / batch size)."""
    probs1, probs2, times = [], [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x, _, _ = batch_arrays(chunk, model.dtype)
            t0 = time.perf_counter()
            pred = model.forward(Tensor(x))
            per_sample = (time.perf_counter() - t0) / len(chunk)
            times.extend([per_sample] * len(chunk))
            probs1.append(expit(pred.thyroid_logits.data[..., 0]))
            probs2.append(expit(pred.ptmc_logits.data[..., 0]))
    out = (np.concatenate(probs1), np.concatenate(probs2))
    return out + (np.asarray(times),) if collect_times else out


def evaluate_model(model: DualSwinUnet, samples, threshold: float, batch_size: int = 8):
    """Per-decoder MetricsReports plus per-image rows and pooled ROC curves.
    Latency fields reflect the shared forward pass (both decoders at once)."""
    if not samples:
        raise metrics.MetricError("cannot evaluate an empty sample set")
    probs1, probs2, times = predict_probs(model, samples, batch_size, collect_times=True)
    gts1 = [s.thyroid_mask for s in samples]
    gts2 = [s.ptmc_mask for s in samples]
    report1, rows1 = metrics.evaluate_decoder(probs1, gts1, threshold)
    report2, rows2 = metrics.evaluate_decoder(probs2, gts2, threshold)
    for report in (report1, report2):
        report.latency_mean_s = float(times.mean())
        report.latency_std_s = float(times.std())
    return {
        "thyroid": (report1, rows1, probs1, gts1),
        "ptmc": (report2, rows2, probs2, gts2),
    }


@dataclass
class FitResult:
    best_val_dice_ptmc: float
    epochs_run: int
    history_path: str
    best_path: str
    last_path: str


HISTORY_HEADER = "epoch,train_loss,val_jaccard_thy,val_dice_thy,val_jaccard_ptmc,val_dice_ptmc,lr"


def fit(model: DualSwinUnet, train_samples, val_samples, tcfg: TrainConfig,
        out_dir, augment_ops=(), resume: bool = False, log=None,
        epochs_override: int | None = None) -> FitResult:
    """Full training loop. Writes history.csv, checkpoint_best.dswc and
    checkpoint_last.dswc under out_dir; with resume=True continues from the
    last checkpoint in out_dir.

    Validation metrics fall back to the training set when val_samples is
    empty. Model selection tracks the best validation tumor Dice.
    """
    os.makedirs(out_dir, exist_ok=True)
    history_path = os.path.join(out_dir, "history.csv")
    best_path = os.path.join(out_dir, "checkpoint_best.dswc")
    last_path = os.path.join(out_dir, "checkpoint_last.dswc")
    epochs = epochs_override if epochs_override is not None else tcfg.epochs
    eval_samples = val_samples if val_samples else train_samples

    opt = AdamW(model.params, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    start_epoch = 0
    best = -1.0
    history_lines: list[str] = []

    if resume:
        if not os.path.exists(last_path):
            raise FileNotFoundError(f"resume requested but {last_path} does not exist")
        cfg, params, extras, meta = load_checkpoint(last_path)
        model.params.load_state(params)
        opt.load_state(extras, int(meta["step_count"]))
        start_epoch = int(meta["epoch"]) + 1
        best = float(meta["best_val_dice_ptmc"])
        with open(history_path) as fh:
            lines = fh.read().splitlines()
        history_lines = lines[1:1 + start_epoch]

    n = len(train_samples)
    for epoch in range(start_epoch, epochs):
        lr = lr_at(epoch, tcfg)
        order = nn.rng_for(tcfg.seed, nn.STREAM_SHUFFLE, epoch).permutation(n)
        epoch_losses = []
        for b0 in range(0, n, tcfg.batch_size):
            idx = order[b0:b0 + tcfg.batch_size]
            chunk = []
            for i in idx:
                s = train_samples[int(i)]
                if augment_ops:
                    s = augment(s, augment_ops,
                                nn.rng_for(tcfg.seed, nn.STREAM_AUGMENT, epoch, int(i)))
                chunk.append(s)
            batch = batch_arrays(chunk, model.dtype)
            drop_rng = (nn.rng_for(tcfg.seed, nn.STREAM_DROPOUT, epoch, b0)
                        if model.cfg.drop_rate > 0 else None)
            epoch_losses.append(train_step(model, batch, opt, tcfg, lr, drop_rng))
        train_loss = float(np.mean(epoch_losses))

        reports = evaluate_model(model, eval_samples, tcfg.threshold,
                                 batch_size=tcfg.batch_size)
        r1 = reports["thyroid"][0]
        r2 = reports["ptmc"][0]
        history_lines.append(
            f"{epoch},{train_loss:.10g},{r1.jaccard:.10g},{r1.dice:.10g},"
            f"{r2.jaccard:.10g},{r2.dice:.10g},{lr:.10g}"
        )
        with open(history_path, "w") as fh:
            fh.write(HISTORY_HEADER + "\n")
            fh.write("\n".join(history_lines) + "\n")

        if r2.dice > best:
            best = r2.dice
            save_checkpoint(best_path, model.cfg, model.params.state(),
                            meta={"epoch": epoch, "step_count": opt.step_count,
                                  "best_val_dice_ptmc": repr(best), "seed": tcfg.seed})
        save_checkpoint(last_path, model.cfg, model.params.state(), extras=opt.state(),
                        meta={"epoch": epoch, "step_count": opt.step_count,
                              "best_val_dice_ptmc": repr(best), "seed": tcfg.seed})
        if log:
            log(f"epoch {epoch}: loss {train_loss:.5f} "
                f"val dice thy {r1.dice:.4f} ptmc {r2.dice:.4f} lr {lr:.2e}")

    return FitResult(best_val_dice_ptmc=best, epochs_run=epochs,
                     history_path=history_path, best_path=best_path, last_path=last_path)

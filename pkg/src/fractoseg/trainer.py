"""Supervised and semi-supervised (weak-to-strong consistency) training, evaluation and sweeps."""
from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .augment import StrategyConfig, apply_strong, apply_weak, resolve_strategy, sample_seed
from .data import CLASS_NAMES
from .errors import DivergedLoss, EmptyDataset
from .losses import RampSchedule, lambda_at
from .metrics import ClassIoUReport, mean_report, miou
from .models import ModelConfig, build_model, forward, save_checkpoint, to_tensor
from .patching import slice_patches, stitch

log = logging.getLogger(__name__)

LABELED_STREAM, WEAK_STREAM, STRONG_STREAM = 0, 1, 2


@dataclass
class Example:
    id: str
    image: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class TrainerConfig:
    mode: str = "semi_supervised"  # or "supervised"
    strategy: str | dict = "HET1"
    lr: float = 1e-3
    epochs: int = 40
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    tau: float = 0.8
    ramp: RampSchedule = field(default_factory=RampSchedule)
    consistency_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    steps_per_epoch: int | None = None
    labeled_strong: bool = False  # also pass labeled samples through the strong pipeline
    patch_size: int = 512
    model: ModelConfig = field(default_factory=ModelConfig)
    device: str = "cpu"

    def __post_init__(self):
        if isinstance(self.ramp, dict):
            self.ramp = RampSchedule(**self.ramp)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.consistency_weights = tuple(self.consistency_weights)
        if self.mode not in ("supervised", "semi_supervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.epochs < 1 or self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if tuple(self.model.input_size) != (self.patch_size, self.patch_size):
            self.model.input_size = (self.patch_size, self.patch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["consistency_weights"] = list(self.consistency_weights)
        d["model"]["input_size"] = list(self.model.input_size)
        d["model"]["mean"] = list(self.model.mean)
        d["model"]["std"] = list(self.model.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    L: float
    L_s: float
    L_u: float
    lam: float
    val_dice_loss: float
    valid_pixel_fraction: float
    wall_time: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    first_step: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must increase")
        self.records.append(rec)

    @property
    def best_epoch(self) -> int:
        return min(self.records, key=lambda r: r.val_dice_loss).epoch

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(EpochRecord.__dataclass_fields__))
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))

    def summary(self) -> dict:
        return {"epochs": len(self.records), "best_epoch": self.best_epoch,
                "best_val_dice_loss": min(r.val_dice_loss for r in self.records),
                "first_step": self.first_step, "records": [asdict(r) for r in self.records]}


# ---------------------------------------------------------------------------
# data plumbing


def as_examples(items) -> list[Example]:
    out = []
    for it in items:
        if isinstance(it, Example):
            out.append(it)
        elif hasattr(it, "record") and hasattr(it, "mask"):  # SynthSample
            out.append(Example(it.record.id, it.record.pixels, it.mask if it.record.labeled else None))
        else:
            out.append(Example(*it))
    return out


def patchify(examples: Sequence[Example], patch_size: int, with_masks: bool = True):
    images, masks = [], []
    for ex in examples:
        images.extend(slice_patches(ex.image, patch_size, kind="image")[1])
        if with_masks:
            if ex.mask is None:
                raise EmptyDataset(f"example {ex.id} has no mask")
            masks.extend(slice_patches(ex.mask, patch_size, kind="mask")[1])
    imgs = np.stack(images) if images else np.zeros((0, patch_size, patch_size, 3), np.uint8)
    return imgs, (np.stack(masks) if with_masks and masks else None)


class BatchStream:
    """Endless reshuffled passes over ``n`` items; yields (cycle, indices) batches."""

    def __init__(self, n: int, batch: int, seed: int, stream: int):
        self.n, self.batch, self.seed, self.stream = n, batch, seed, stream
        self.cycle, self.queue = -1, []

    def _refill(self):
        self.cycle += 1
        rng = np.random.default_rng([self.seed, self.stream, self.cycle])
        self.queue += [(self.cycle, int(i)) for i in rng.permutation(self.n)]

    def next(self) -> list[tuple[int, int]]:
        while len(self.queue) < self.batch:
            self._refill()
        out, self.queue = self.queue[:self.batch], self.queue[self.batch:]
        return out


def _labeled_batch(images, masks, picks, strategy, cfg: TrainerConfig):
    xs, ys = [], []
    for cycle, i in picks:
        s = apply_weak(images[i], masks[i], strategy, sample_seed(cfg.seed, cycle, i, LABELED_STREAM))
        if cfg.labeled_strong:
            s = apply_strong(s, strategy, sample_seed(cfg.seed, cycle, i, STRONG_STREAM + 10))
        xs.append(s.image)
        ys.append(s.mask)
    return np.stack(xs), np.stack(ys)


def _unlabeled_batch(images, picks, strategy, cfg: TrainerConfig):
    weak, strong = [], []
    for cycle, i in picks:
        w = apply_weak(images[i], None, strategy, sample_seed(cfg.seed, cycle, i, WEAK_STREAM))
        s = apply_strong(w, strategy, sample_seed(cfg.seed, cycle, i, STRONG_STREAM))
        weak.append(w.image)
        strong.append(s.image)
    return np.stack(weak), np.stack(strong)


@contextlib.contextmanager
def _no_side_effects(model):
    """Run unlabeled forwards without touching BN running stats or the global torch RNG.

    Parameter gradients still flow. This keeps the labeled stream (and everything
    evaluated in eval mode) identical to a supervised run whenever L_u cannot act.
    """
    saved = [(m, dict(m._buffers)) for m in model.modules() if m._buffers]
    for m, bufs in saved:
        # the forward updates fresh copies; autograd may still hold them, so rebind rather than overwrite
        m._buffers.update({k: None if v is None else v.clone() for k, v in bufs.items()})
    with torch.random.fork_rng(devices=[]):
        yield
    for m, bufs in saved:
        m._buffers.update(bufs)


def _make_optimizer(model, cfg: TrainerConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


@torch.no_grad()
def validation_loss(model, images, masks, cfg: TrainerConfig, batch: int = 16) -> float:
    """Mean Dice loss over clean validation patches (eval mode)."""
    model.eval()
    device = next(model.parameters()).device
    total, count = 0.0, 0
    for i in range(0, len(images), batch):
        x = to_tensor(images[i:i + batch], cfg.model).to(device)
        y = torch.from_numpy(masks[i:i + batch].astype(np.int64)).to(device)
        total += float(losses.validation_dice_loss(model(x), y)) * len(x)
        count += len(x)
    model.train()
    return total / max(count, 1)


def _fit(cfg: TrainerConfig, labeled, val, unlabeled=None, out_dir: str | Path | None = None, progress=None):
    labeled, val = as_examples(labeled), as_examples(val)
    if not labeled:
        raise EmptyDataset("labeled training set is empty")
    if not val:
        raise EmptyDataset("validation set is empty")
    ssl = cfg.mode == "semi_supervised"
    if ssl:
        unlabeled = as_examples(unlabeled or [])
        if not unlabeled:
            raise EmptyDataset("semi-supervised training needs unlabeled data")
    strategy: StrategyConfig = resolve_strategy(cfg.strategy)

    torch.manual_seed(cfg.seed)
    device = torch.device(cfg.device)
    if device.type == "cuda":
        # deterministic cuDNN convolutions; a few CUDA kernels stay nondeterministic
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
    model = build_model(cfg.model).to(device)
    model.train()
    opt = _make_optimizer(model, cfg)

    li, lm = patchify(labeled, cfg.patch_size)
    vi, vm = patchify(val, cfg.patch_size)
    ui = patchify(unlabeled, cfg.patch_size, with_masks=False)[0] if ssl else None

    lab_stream = BatchStream(len(li), cfg.batch_labeled, cfg.seed, LABELED_STREAM)
    unl_stream = BatchStream(len(ui), cfg.batch_unlabeled, cfg.seed, WEAK_STREAM) if ssl else None
    if cfg.steps_per_epoch:
        steps = cfg.steps_per_epoch
    elif ssl:
        steps = math.ceil(len(ui) / cfg.batch_unlabeled)
    else:
        steps = math.ceil(len(li) / cfg.batch_labeled)

    train_log = TrainingLog()
    best = (math.inf, -1, None)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lam = lambda_at(epoch, cfg.ramp)
        sums = np.zeros(4)  # L, L_s, L_u, valid fraction
        for step in range(steps):
            x, y = _labeled_batch(li, lm, lab_stream.next(), strategy, cfg)
            z = model(to_tensor(x, cfg.model).to(device))
            l_s = losses.supervised_loss(z, torch.from_numpy(y.astype(np.int64)).to(device))
            l_u = torch.zeros((), dtype=l_s.dtype, device=device)
            frac = 0.0
            if ssl:
                xw, xs = _unlabeled_batch(ui, unl_stream.next(), strategy, cfg)
                with _no_side_effects(model):
                    with torch.no_grad():
                        zw = model(to_tensor(xw, cfg.model).to(device))
                    _, _, valid = losses.weak_targets(zw, cfg.tau)
                    frac = float(valid.float().mean())
                    if valid.any():
                        zs = model(to_tensor(xs, cfg.model).to(device))
                        l_u = losses.consistency_terms(zw, zs, cfg.tau, cfg.consistency_weights).loss
            total = l_s + lam * l_u
            if not torch.isfinite(total):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if epoch == 0 and step == 0:
                train_log.first_step = {"L": total.item(), "L_s": l_s.item(), "L_u": l_u.item()}
            sums += (total.item(), l_s.item(), l_u.item(), frac)
        sums /= steps
        val_loss = validation_loss(model, vi, vm, cfg)
        rec = EpochRecord(epoch, *map(float, sums[:3]), lam, val_loss, float(sums[3]), time.perf_counter() - t0)
        if not all(math.isfinite(v) for v in (rec.L, rec.L_s, rec.L_u, rec.val_dice_loss)):
            raise DivergedLoss(f"non-finite values in epoch {epoch}")
        train_log.append(rec)
        if val_loss < best[0]:
            best = (val_loss, epoch, copy.deepcopy(model.state_dict()))
        if progress:
            progress(rec)
        log.info("epoch %d L=%.4f Ls=%.4f Lu=%.4f lam=%.3f val=%.4f valid=%.2f",
                 epoch, rec.L, rec.L_s, rec.L_u, lam, val_loss, rec.valid_pixel_fraction)

    model.load_state_dict(best[2])
    model.eval()
    checkpoint = {
        "model": model,
        "model_config": cfg.model,
        "best_epoch": best[1],
        "best_val_dice_loss": best[0],
        "trainer_config": cfg.to_dict(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "best.pt", model, cfg.model, best[1],
                        {"trainer_config": cfg.to_dict(), "best_val_dice_loss": best[0],
                         "torch_rng_state": torch.get_rng_state()})
        train_log.to_csv(out / "training_log.csv")
        (out / "training_summary.json").write_text(json.dumps(train_log.summary(), indent=2))
    return checkpoint, train_log


def train_supervised(cfg: TrainerConfig, labeled, val, out_dir=None, progress=None):
    """Minimize CE + Dice on weakly augmented labeled patches; keep the best-validation weights."""
    cfg = copy.deepcopy(cfg)
    cfg.mode = "supervised"
    return _fit(cfg, labeled, val, None, out_dir, progress)


def train_semi_supervised(cfg: TrainerConfig, labeled, unlabeled, val, out_dir=None, progress=None):
    """Supervised loss plus the ramped, confidence-gated weak-to-strong consistency loss."""
    cfg = copy.deepcopy(cfg)
    cfg.mode = "semi_supervised"
    return _fit(cfg, labeled, val, unlabeled, out_dir, progress)


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_image(model, model_cfg: ModelConfig, image: np.ndarray, return_logits: bool = False):
    """Patch-sliced inference stitched back to full resolution (logit stitching, then argmax)."""
    size = model_cfg.input_size
    grid, patches = slice_patches(image, size, kind="image")
    z = forward(model, np.stack(patches), model_cfg)
    full = stitch(grid, list(z), kind="logits")
    labels = full.argmax(axis=-1).astype(np.uint8)
    return (labels, full) if return_logits else labels


def evaluate(model, model_cfg: ModelConfig, examples) -> list[ClassIoUReport]:
    reports = []
    for ex in as_examples(examples):
        if ex.mask is None:
            raise EmptyDataset(f"test example {ex.id} has no mask")
        reports.append(miou(predict_image(model, model_cfg, ex.image), ex.mask, image_id=ex.id))
    return reports


def sweep(strategies: Sequence[str | dict], cfg: TrainerConfig, labeled, val, test, unlabeled=None,
          out_csv: str | Path | None = None) -> list[dict]:
    """Train one model per strategy (shared seed) and report per-class IoU and mIoU on ``test``."""
    if not strategies:
        raise ValueError("need at least one strategy")
    rows = []
    for strat in strategies:
        name = strat if isinstance(strat, str) else strat.get("name", "custom")
        run = copy.deepcopy(cfg)
        run.strategy = strat
        try:
            if run.mode == "supervised":
                ckpt, _ = train_supervised(run, labeled, val)
            else:
                ckpt, _ = train_semi_supervised(run, labeled, unlabeled, val)
            summary = mean_report(evaluate(ckpt["model"], ckpt["model_config"], test))
            rows.append({"model": name, **summary, "error": ""})
        except Exception as exc:  # one failed row must not abort the sweep
            log.exception("strategy %s failed", name)
            rows.append({"model": name, **{f"iou_{c}": None for c in CLASS_NAMES}, "miou": None, "error": repr(exc)})
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows

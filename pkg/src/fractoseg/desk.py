"""Desk-scale SSL vs supervised comparison on a synthetic heterogeneous dataset."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .losses import RampSchedule
from .metrics import mean_report
from .models import ModelConfig
from .synth import generate_dataset
from .trainer import TrainerConfig, evaluate, train_semi_supervised, train_supervised


@dataclass
class DeskConfig:
    profile: str = "HET"
    n_labeled: int = 12
    n_unlabeled: int = 60
    n_val: int = 6
    n_test: int = 24
    image_size: int = 128
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(
        strategy="HET1",
        epochs=40,
        batch_labeled=8,
        batch_unlabeled=8,
        ramp=RampSchedule(lambda_max=1.0, ramp_epochs=20),
        patch_size=64,
        model=ModelConfig(architecture="small_unet", encoder="tiny", width=8, input_size=(64, 64)),
    ))


@dataclass
class DeskResult:
    seed: int
    miou_supervised: float
    miou_ssl: float
    seconds: float
    ssl_checkpoint: dict
    test: list
    summaries: dict


def desk_data(cfg: DeskConfig, seed: int):
    """Disjoint labeled / unlabeled / validation / test pools generated from one seed."""
    n = cfg.n_labeled + cfg.n_unlabeled + cfg.n_val + cfg.n_test
    _, samples = generate_dataset(cfg.profile, n, seed=seed, size=(cfg.image_size, cfg.image_size),
                                  n_labeled=n)
    a, b, c = cfg.n_labeled, cfg.n_labeled + cfg.n_unlabeled, cfg.n_labeled + cfg.n_unlabeled + cfg.n_val
    labeled = [(s.record.id, s.record.pixels, s.mask) for s in samples[:a]]
    unlabeled = [(s.record.id, s.record.pixels, None) for s in samples[a:b]]
    val = [(s.record.id, s.record.pixels, s.mask) for s in samples[b:c]]
    return labeled, unlabeled, val, samples[c:]


def run_desk(cfg: DeskConfig, seed: int, progress=None) -> DeskResult:
    t0 = time.perf_counter()
    labeled, unlabeled, val, test = desk_data(cfg, seed)
    tcfg = copy.deepcopy(cfg.trainer)
    tcfg.seed = seed
    # the baseline gets the same number of optimizer steps as the SSL run
    tcfg.steps_per_epoch = tcfg.steps_per_epoch or int(np.ceil(4 * len(unlabeled) / tcfg.batch_unlabeled))
    sup, _ = train_supervised(tcfg, labeled, val, progress=progress)
    ssl, ssl_log = train_semi_supervised(tcfg, labeled, unlabeled, val, progress=progress)
    s_sup = mean_report(evaluate(sup["model"], sup["model_config"], test))
    s_ssl = mean_report(evaluate(ssl["model"], ssl["model_config"], test))
    return DeskResult(seed, s_sup["miou"], s_ssl["miou"], time.perf_counter() - t0, ssl, test,
                      {"supervised": s_sup, "ssl": s_ssl, "ssl_log": ssl_log.summary()})

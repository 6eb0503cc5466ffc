import copy

import numpy as np
import pytest
import torch

from fractoseg.errors import DivergedLoss, EmptyDataset
from fractoseg.losses import RampSchedule, lambda_at, supervised_loss
from fractoseg.models import ModelConfig, build_model, to_tensor
from fractoseg.synth import SynthSpec, generate, generate_dataset
from fractoseg.trainer import (
    BatchStream,
    TrainerConfig,
    TrainingLog,
    evaluate,
    predict_image,
    sweep,
    train_semi_supervised,
    train_supervised,
)

SMALL = ModelConfig(architecture="small_unet", encoder="tiny", width=4, input_size=(32, 32))


def _cfg(**kw):
    base = dict(strategy="HET1", epochs=2, batch_labeled=4, batch_unlabeled=4, patch_size=32, model=copy.deepcopy(SMALL),
                ramp=RampSchedule(1.0, 2), steps_per_epoch=3)
    base.update(kw)
    return TrainerConfig(**base)


@pytest.fixture(scope="module")
def data():
    _, samples = generate_dataset("HET", 12, seed=0, size=(64, 64), n_labeled=12)
    labeled = [(s.record.id, s.record.pixels, s.mask) for s in samples[:4]]
    unlabeled = [(s.record.id, s.record.pixels, None) for s in samples[4:8]]
    val = [(s.record.id, s.record.pixels, s.mask) for s in samples[8:10]]
    test = [(s.record.id, s.record.pixels, s.mask) for s in samples[10:]]
    return labeled, unlabeled, val, test


def test_supervised_smoke_on_two_images(data):
    labeled, _, val, _ = data
    ckpt, log = train_supervised(_cfg(epochs=1), labeled[:2], val[:1])
    assert len(log.records) == 1
    rec = log.records[0]
    assert np.isfinite([rec.L, rec.L_s, rec.val_dice_loss]).all() and rec.L_u == 0.0
    assert ckpt["best_epoch"] == 0


def test_loss_decreases_on_fixed_batch():
    torch.manual_seed(0)
    s = generate(SynthSpec(size=(64, 64), box=(4, 4, 56, 56), notch=14, precrack=8, ductile=6, side_groove=5))
    cfg = ModelConfig(architecture="small_unet", encoder="tiny", width=8, input_size=(64, 64))
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    x = to_tensor(s.record.pixels[None], cfg)
    y = torch.from_numpy(s.mask[None].astype(np.int64))
    losses = []
    for _ in range(50):
        loss = supervised_loss(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0] and ups <= 5


def test_same_seed_same_epoch0(data):
    labeled, unlabeled, val, _ = data
    a = train_semi_supervised(_cfg(epochs=1), labeled, unlabeled, val)[1]
    b = train_semi_supervised(_cfg(epochs=1), labeled, unlabeled, val)[1]
    assert a.records[0].L == b.records[0].L and a.first_step == b.first_step


def _params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


@pytest.mark.parametrize("arch", ["small_unet", "deeplabv3plus"])
def test_tau_one_equals_supervised(data, arch):
    labeled, unlabeled, val, _ = data
    model = ModelConfig(architecture=arch, encoder="tiny", width=8, input_size=(32, 32))
    sup, slog = train_supervised(_cfg(model=model, tau=1.0), labeled, val)
    ssl, ulog = train_semi_supervised(_cfg(model=model, tau=1.0), labeled, unlabeled, val)
    assert all(r.L_u == 0.0 and r.valid_pixel_fraction == 0.0 for r in ulog.records)
    assert [(r.L, r.L_s, r.val_dice_loss) for r in slog.records] == [(r.L, r.L_s, r.val_dice_loss) for r in ulog.records]
    a, b = _params(sup["model"]), _params(ssl["model"])
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_lambda_zero_equals_supervised(data):
    labeled, unlabeled, val, _ = data
    cfg = _cfg(tau=0.0, ramp=RampSchedule(0.0, 2))
    sup, slog = train_supervised(cfg, labeled, val)
    ssl, ulog = train_semi_supervised(cfg, labeled, unlabeled, val)
    assert [r.L_s for r in slog.records] == [r.L_s for r in ulog.records]
    assert all(r.valid_pixel_fraction == 1.0 and r.L_u > 0 for r in ulog.records)
    a, b = _params(sup["model"]), _params(ssl["model"])
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_log_invariants(data, tmp_path):
    labeled, unlabeled, val, _ = data
    ckpt, log = train_semi_supervised(_cfg(epochs=3, tau=0.3), labeled, unlabeled, val, out_dir=tmp_path)
    assert [r.epoch for r in log.records] == [0, 1, 2]
    assert all(r.lam == lambda_at(r.epoch, RampSchedule(1.0, 2)) for r in log.records)
    assert ckpt["best_epoch"] == log.best_epoch
    assert ckpt["best_val_dice_loss"] == min(r.val_dice_loss for r in log.records)
    for f in ("best.pt", "training_log.csv", "training_summary.json"):
        assert (tmp_path / f).exists()
    with pytest.raises(ValueError):
        log.append(log.records[0])


def test_unlabeled_data_does_not_touch_evaluation(data):
    labeled, unlabeled, val, test = data
    ckpt, _ = train_supervised(_cfg(epochs=1), labeled, val)
    before = [r.miou for r in evaluate(ckpt["model"], ckpt["model_config"], test)]
    _ = [predict_image(ckpt["model"], ckpt["model_config"], u[1]) for u in unlabeled]
    after = [r.miou for r in evaluate(ckpt["model"], ckpt["model_config"], test)]
    assert before == after


def test_errors(data):
    labeled, unlabeled, val, _ = data
    with pytest.raises(EmptyDataset):
        train_supervised(_cfg(), [], val)
    with pytest.raises(EmptyDataset):
        train_semi_supervised(_cfg(), labeled, [], val)
    with pytest.raises(ValueError):
        _cfg(lr=0.0)
    with pytest.raises(DivergedLoss):
        train_supervised(_cfg(lr=1e30, epochs=3), labeled, val)


def test_sweep_rows(data, tmp_path):
    labeled, unlabeled, val, test = data
    rows = sweep(["HET0", "HET1", "HET1", "NOPE"], _cfg(epochs=1), labeled, val, test, unlabeled,
                 out_csv=tmp_path / "sweep.csv")
    assert len(rows) == 4
    assert all(len([k for k in r if k.startswith("iou_")]) == 7 and "miou" in r for r in rows)
    assert rows[1] == {**rows[2]}
    assert rows[3]["miou"] is None and "NOPE" in rows[3]["error"]
    assert (tmp_path / "sweep.csv").exists()


def test_predict_full_resolution(data):
    labeled, _, val, _ = data
    ckpt, _ = train_supervised(_cfg(epochs=1), labeled, val)
    img = np.random.default_rng(0).integers(0, 256, (75, 91, 3)).astype(np.uint8)
    labels, logits = predict_image(ckpt["model"], ckpt["model_config"], img, return_logits=True)
    assert labels.shape == (75, 91) and logits.shape == (75, 91, 7)
    assert np.array_equal(labels, logits.argmax(-1))


def test_batch_stream_covers_each_cycle():
    s = BatchStream(10, 4, seed=0, stream=0)
    picks = [s.next() for _ in range(5)]
    flat = [p for b in picks for p in b]
    assert sorted(i for c, i in flat if c == 0) == list(range(10))
    assert sorted(i for c, i in flat if c == 1) == list(range(10))


def test_config_round_trip():
    cfg = _cfg()
    assert TrainerConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainerConfig.from_dict({"bogus": 1})
    assert isinstance(TrainingLog().records, list)

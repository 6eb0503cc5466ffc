"""``fractoseg`` command line: gen, ssim, split, train, sweep, predict, eval, measure.

Exit codes: 0 success, 1 unexpected error, 2 invalid config or arguments,
3 missing path, 4 error raised by a library module.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .augment import builtin_strategy
from .data import DatasetManifest, load_image, load_mask, load_pairs, save_mask, split_dataset
from .errors import ConfigInvalid, FractosegError, NoCrackPixels, PathMissing
from .measure import SpecimenGeometry, area_average_a0, measurement_stats, write_measurements
from .metrics import miou, write_reports
from .models import load_checkpoint
from .ssim import SsimConfig, dataset_stats, save_heatmap, ssim_matrix
from .synth import generate_dataset
from .trainer import TrainerConfig, evaluate, predict_image, sweep, train_semi_supervised, train_supervised

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_PATH, EXIT_MODULE = 0, 1, 2, 3, 4
PROFILES = {"hom": "HOM", "het": "HET", "har": "HAR"}
log = logging.getLogger("fractoseg")


@dataclass
class RunConfig:
    dataset: str
    out: str = "runs"
    seed: int = 0
    strategy: str | dict = "HET1"
    split_method: str = "stratified"
    split_fractions: tuple[float, float] = (0.6, 0.2)
    trainer: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigInvalid("config must be a mapping")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in doc:
            raise ConfigInvalid("config needs a 'dataset' entry")
        cfg = cls(**doc)
        cfg.split_fractions = tuple(cfg.split_fractions)
        if base is not None:
            # relative paths are taken from the config file's directory
            if not Path(cfg.dataset).is_absolute():
                cfg.dataset = str((base / cfg.dataset).resolve())
            if not Path(cfg.out).is_absolute():
                cfg.out = str((base / cfg.out).resolve())
        if isinstance(cfg.strategy, str) and cfg.strategy.endswith((".yaml", ".yml")):
            path = Path(cfg.strategy) if base is None or Path(cfg.strategy).is_absolute() else base / cfg.strategy
            if not path.exists():
                raise PathMissing(str(path))
            cfg.strategy = yaml.safe_load(path.read_text())
        try:
            cfg.trainer_config()
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise PathMissing(str(path))
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigInvalid(str(exc)) from exc
        return cls.from_dict(doc, path.parent)

    def validate_paths(self) -> None:
        if not (Path(self.dataset) / "manifest.json").exists():
            raise PathMissing(f"no manifest.json under {self.dataset}")

    def trainer_config(self) -> TrainerConfig:
        d = copy.deepcopy(self.trainer)
        d["seed"] = self.seed
        d["strategy"] = self.strategy
        return TrainerConfig.from_dict(d)

    def resolved(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["trainer"] = {k: v for k, v in self.trainer_config().to_dict().items() if k not in ("seed", "strategy")}
        return d


def run_dir(out: str | Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{stamp}"
    path, k = base, 1
    while path.exists():
        path, k = Path(f"{base}-{k}"), k + 1
    path.mkdir(parents=True)
    return path


def stamped(args, command: str) -> Path:
    """Run directory for a flag-driven command, with its resolved arguments copied in."""
    out = run_dir(args.out, command)
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=False))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=str))


def _need(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise PathMissing(str(p))
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> Path:
    profile = PROFILES[args.profile]
    out = Path(args.out)
    manifest, _ = generate_dataset(profile, args.n, seed=args.seed, ratio=args.ratio, out_dir=out,
                                   size=(args.size, args.size) if args.size else None)
    # the dataset directory is the output; keep the generating arguments beside the manifest
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=False))
    print(f"wrote {manifest.n} images ({manifest.n_labeled} labeled) to {out}")
    return out


def cmd_ssim(args) -> Path:
    root = _need(args.dataset)
    manifest = DatasetManifest.load(_need(root / "manifest.json"))
    out = stamped(args, "ssim")
    images = [load_image(root / e.image) for e in manifest.entries]
    matrix = ssim_matrix(images, SsimConfig(), ids=manifest.records, workers=args.workers)
    matrix.to_csv(out / "ssim_matrix.csv")
    stats = {sel: asdict(dataset_stats(matrix, sel)) for sel in ("vs_first", "all_pairs")}
    _write_json(out / "ssim_stats.json", stats)
    save_heatmap(matrix, out / "ssim_heatmap.png", title=manifest.name)
    print(json.dumps(stats["all_pairs"]))
    return out


def cmd_split(args) -> Path:
    root = _need(args.dataset)
    manifest = DatasetManifest.load(_need(root / "manifest.json"))
    report = split_dataset(manifest, args.method, args.seed, tuple(args.fractions))
    out = stamped(args, "split")
    _write_json(out / "split.json", asdict(report))
    print(json.dumps({k: len(v) for k, v in report.as_splits().items()}))
    return out


def _load_run_data(cfg: RunConfig):
    cfg.validate_paths()
    root = Path(cfg.dataset)
    manifest = DatasetManifest.load(root / "manifest.json")
    report = split_dataset(manifest, cfg.split_method, cfg.seed, cfg.split_fractions)
    data = {name: load_pairs(manifest, root, ids) for name, ids in report.as_splits().items()}
    return report, data


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strategy is not None:
        cfg.strategy = args.strategy
    if args.device is not None:
        cfg.trainer["device"] = "cuda" if args.device == "gpu" else "cpu"
    if args.out is not None:
        cfg.out = args.out
    return cfg


def cmd_train(args) -> Path:
    cfg = _config_from_args(args)
    report, data = _load_run_data(cfg)
    out = run_dir(cfg.out, "train")
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=False))
    _write_json(out / "split.json", asdict(report))
    tcfg = cfg.trainer_config()
    if tcfg.mode == "supervised":
        ckpt, tlog = train_supervised(tcfg, data["train"], data["val"], out_dir=out)
    else:
        ckpt, tlog = train_semi_supervised(tcfg, data["train"], data["unlabeled"], data["val"], out_dir=out)
    result = {"best_epoch": ckpt["best_epoch"], "best_val_dice_loss": ckpt["best_val_dice_loss"],
              "epoch0": asdict(tlog.records[0]) | {"wall_time": None}, "first_step": tlog.first_step}
    if data["test"]:
        result["test"] = write_reports(evaluate(ckpt["model"], ckpt["model_config"], data["test"]), out / "test_eval")
    _write_json(out / "result.json", result)
    print(f"run directory: {out}")
    return out


def cmd_sweep(args) -> Path:
    cfg = _config_from_args(args)
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for n in names:
        builtin_strategy(n)
    _, data = _load_run_data(cfg)
    if not data["test"]:
        raise ConfigInvalid("sweep needs a nonempty test split; lower split_fractions")
    out = run_dir(cfg.out, "sweep")
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=False))
    rows = sweep(names, cfg.trainer_config(), data["train"], data["val"], data["test"], data["unlabeled"],
                 out_csv=out / "sweep.csv")
    for r in rows:
        print(r["model"], r["miou"], r["error"])
    return out


def cmd_predict(args) -> Path:
    model, mcfg, _ = load_checkpoint(_need(args.checkpoint))
    src = _need(args.images)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise PathMissing(f"no images under {src}")
    out = stamped(args, "predict")
    masks = out / "masks"
    masks.mkdir()
    for f in files:
        save_mask(masks / f.name, predict_image(model, mcfg, load_image(f)))
    print(f"wrote {len(files)} masks to {masks}")
    return out


def cmd_eval(args) -> Path:
    pred_dir, truth_dir = _need(args.pred), _need(args.truth)
    reports = []
    for t in sorted(truth_dir.glob("*.png")):
        p = pred_dir / t.name
        if not p.exists():
            raise PathMissing(f"no prediction for {t.name}")
        reports.append(miou(load_mask(p), load_mask(t), image_id=t.stem))
    if not reports:
        raise PathMissing(f"no masks under {truth_dir}")
    out = stamped(args, "eval")
    summary = write_reports(reports, out)
    print(json.dumps(summary))
    return out


def cmd_measure(args) -> Path:
    pred_dir, meta_dir = _need(args.pred), _need(args.meta)
    rows, pairs, ids = [], [], []
    for m in sorted(meta_dir.glob("*.json")):
        p = pred_dir / f"{m.stem}.png"
        if not p.exists():
            continue
        meta = json.loads(m.read_text())
        geom = SpecimenGeometry(**meta["geometry"])
        ref = meta.get("reference_a0")
        try:
            res = area_average_a0(load_mask(p), geom, scale=meta.get("scale"), with_5pa=True)
        except FractosegError as exc:
            # a bad prediction is reported, not fatal for the rest
            log.warning("%s: %s", m.stem, exc)
            rows.append({"id": m.stem, "a0_aa": None, "a0_5pa": None, "reference": ref, "unit": None,
                         "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append({"id": m.stem, "a0_aa": res.a0, "a0_5pa": res.a0_5pa, "reference": ref, "unit": res.unit,
                     "error": None})
        if ref is not None:
            pairs.append((ref, res.a0))
            ids.append(m.stem)
    if not pairs:
        raise NoCrackPixels("no measurable prediction with a reference a0") if rows else \
            PathMissing("no prediction/metadata pairs with a reference a0")
    stats = measurement_stats(pairs, ids)
    out = stamped(args, "measure")
    write_measurements(rows, stats, out, unit=next(r["unit"] for r in rows if r["unit"]))
    print(json.dumps({k: getattr(stats, k) for k in ("n", "delta_mean", "sigma", "mean_abs_rel")}))
    return out


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fractoseg", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--profile", choices=sorted(PROFILES), default="het")
    p.add_argument("-n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=5.25, help="unlabeled/labeled ratio")
    p.add_argument("--size", type=int, default=None, help="square image size (default varies per profile)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ssim", help="pairwise SSIM matrix, statistics and heatmap")
    p.add_argument("--dataset", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_ssim)

    p = sub.add_parser("split", help="train/val/test split report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=("stratified", "randomized"), default="stratified")
    p.add_argument("--fractions", type=float, nargs=2, default=(0.6, 0.2), help="train and val fractions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_split)

    for name, func in (("train", cmd_train), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help=f"{name} from a YAML run config")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--strategy", default=None)
        p.add_argument("--device", choices=("cpu", "gpu"), default=None)
        p.add_argument("--out", default=None)
        if name == "sweep":
            p.add_argument("--strategies", default="HET0,HET1")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="patch-sliced inference to mask PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="IoU/mIoU reports and diagnostics plots")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("measure", help="initial crack size a0 from predicted masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_measure)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigInvalid as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PathMissing as exc:
        print(f"error: missing path: {exc}", file=sys.stderr)
        return EXIT_PATH
    except FractosegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODULE
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

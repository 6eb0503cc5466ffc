"""Train one SSL model per augmentation strategy and tabulate per-class test IoU.

    python3 scripts/strategy_sweep.py --strategies HET0 HET1 HET4 --epochs 20 --out runs/sweep.csv
"""
import argparse

from fractoseg.desk import DeskConfig, desk_data
from fractoseg.trainer import sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--strategies", nargs="+", default=[f"HET{i}" for i in range(9)])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweep.csv")
    args = ap.parse_args()

    cfg = DeskConfig()
    cfg.trainer.epochs = args.epochs
    cfg.trainer.seed = args.seed
    labeled, unlabeled, val, test = desk_data(cfg, args.seed)
    test = [(s.record.id, s.record.pixels, s.mask) for s in test]
    rows = sweep(args.strategies, cfg.trainer, labeled, val, test, unlabeled, out_csv=args.out)
    for r in rows:
        miou = "failed" if r["miou"] is None else f"{r['miou']:.4f}"
        print(f"{r['model']:6s} {miou}  {r['error'] or ''}")


if __name__ == "__main__":
    main()

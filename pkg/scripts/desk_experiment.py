"""Desk-scale SSL experiment: supervised baseline vs weak-to-strong SSL on synthetic HET data.

    python3 scripts/desk_experiment.py --seeds 0 1 2 --epochs 60 --out runs/desk.json
"""
import argparse
import json
import time
from pathlib import Path

from fractoseg.desk import DeskConfig, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=None, help="override the default epoch budget")
    ap.add_argument("--out", default=None, help="optional JSON summary path")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()

    cfg = DeskConfig()
    if args.epochs:
        cfg.trainer.epochs = args.epochs

    def progress(r):
        if not args.quiet and r.epoch % 5 == 0:
            print(f"  epoch {r.epoch:3d}  L={r.L:.3f}  L_u={r.L_u:.3f}  lam={r.lam:.2f}  "
                  f"val={r.val_dice_loss:.3f}  valid={r.valid_pixel_fraction:.2f}", flush=True)

    rows, start = [], time.perf_counter()
    for seed in args.seeds:
        r = run_desk(cfg, seed, progress)
        gain = 100 * (r.miou_ssl - r.miou_supervised)
        print(f"seed {seed}: supervised {r.miou_supervised:.4f}  ssl {r.miou_ssl:.4f}  "
              f"gain {gain:+.2f} points  ({r.seconds:.0f} s)", flush=True)
        rows.append({"seed": seed, "miou_supervised": r.miou_supervised, "miou_ssl": r.miou_ssl,
                     "gain_points": gain, "seconds": r.seconds, "summaries": r.summaries})
    total = time.perf_counter() - start
    wins = sum(row["gain_points"] >= 2.0 for row in rows)
    print(f"SSL >= supervised + 2 points on {wins}/{len(rows)} seeds, {total / 60:.1f} min total")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({"runs": rows, "minutes": total / 60}, indent=2, default=str))


if __name__ == "__main__":
    main()

"""Final val top-1 of tiny34 per squeeze kind, mean and sd over seeds.

    python scripts/compare_squeeze.py --kinds gap,random,ortho --seeds 0,1,2 --out runs/compare
"""

import argparse
import time
from pathlib import Path

from orthoattn.backbone import preset
from orthoattn.config import SYNTHETIC_DEFAULTS
from orthoattn.data import make_synthetic
from orthoattn.tensor import STREAM_DATA, derive_seed
from orthoattn.train import TrainConfig, compare_squeeze, format_comparison


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--preset", default="tiny34")
    p.add_argument("--placement", default="standard")
    p.add_argument("--kinds", default="gap,random,ortho")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", default="runs/compare")
    args = p.parse_args()

    d = SYNTHETIC_DEFAULTS
    full = make_synthetic(derive_seed(args.data_seed, STREAM_DATA), d["classes"], d["n_per_class"], d["h"], d["w"],
                          d["noise"])
    train_ds, val_ds = full.split(d["val_fraction"], args.data_seed)
    spec = preset(args.preset, attention=args.placement, classes=d["classes"])
    t0 = time.perf_counter()
    rows = compare_squeeze(train_ds, val_ds, spec, args.kinds.split(","), [int(s) for s in args.seeds.split(",")],
                           TrainConfig(epochs=args.epochs))
    text = format_comparison(rows)
    print(text)
    for r in rows:
        print(f"{r['kind']}: per-seed final top-1 {r['runs']}")
    print(f"total {time.perf_counter() - t0:.0f} s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.txt").write_text(text + "\n")


if __name__ == "__main__":
    main()

"""tiny34 with an ortho bank on the synthetic 3-class task vs a raw-pixel linear baseline.

    python scripts/desk_experiment.py --epochs 30 --out runs/desk
"""

import argparse
import time
from pathlib import Path

from orthoattn.backbone import Network, preset
from orthoattn.config import SYNTHETIC_DEFAULTS
from orthoattn.data import make_synthetic
from orthoattn.tensor import STREAM_DATA, derive_seed
from orthoattn.train import TrainConfig, linear_baseline, save_checkpoint, train


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kind", default="ortho")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/desk")
    args = p.parse_args()

    d = SYNTHETIC_DEFAULTS
    full = make_synthetic(derive_seed(args.seed, STREAM_DATA), d["classes"], d["n_per_class"], d["h"], d["w"], d["noise"])
    train_ds, val_ds = full.split(d["val_fraction"], args.seed)
    lin_train, lin_val = linear_baseline(train_ds, val_ds, epochs=50, seed=args.seed)
    print(f"linear baseline (50 epochs): train {lin_train:.4f}  val {lin_val:.4f}")

    net = Network(preset("tiny34", kind=args.kind, classes=d["classes"]), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    metrics, _ = train(net, train_ds, TrainConfig(epochs=args.epochs, seed=args.seed), val_ds, out / "checkpoint.ock")
    print(metrics.table())
    last = metrics.epochs[-1]
    print(f"tiny34/{args.kind}: train {last.train_acc:.4f}  val {last.val_top1:.4f}  "
          f"({time.perf_counter() - t0:.0f} s)")
    (out / "metrics.csv").write_text(metrics.to_csv())


if __name__ == "__main__":
    main()

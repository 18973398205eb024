"""Run every finite-difference preset and print the worst relative error of each."""

import argparse
import time

from orthoattn.gradcheck import GRADCHECK_PRESETS, run_preset


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    for name in GRADCHECK_PRESETS:
        t0 = time.perf_counter()
        rep = run_preset(name, args.seed)
        print(f"{name:<10} max rel err {rep.max_error:.2e}  checked {rep.checked:>6}  "
              f"kink-skipped {rep.skipped:>3}  {time.perf_counter() - t0:5.1f} s")


if __name__ == "__main__":
    main()

"""Generate the three-task corpus, train a conditioned adapter and print the eval grid.

    python3 scripts/run_conditioning.py --out runs/toy [--variant square] [--steps 2000]
"""
import argparse
import sys
from pathlib import Path

from zhyper.cli import run_command

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--variant", choices=("diag", "square"), default="diag")
    ap.add_argument("--mode", choices=("mtl", "oracle"), help="train a baseline instead")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    common = ["--config", str(CONFIG), "--seed", str(args.seed)]
    train = ["train", *common, "--data", str(out / "data"), "--out", str(out / "run"), "-v"]
    train += ["--mode", args.mode] if args.mode else ["--variant", args.variant]
    if args.steps:
        train += ["--steps", str(args.steps)]
    for argv in (["gen-data", *common, "--out", str(out / "data")], train,
                 ["eval", "--run", str(out / "run"), "--data", str(out / "data"), "--out", str(out / "eval")]):
        rc = run_command(argv)
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Fit the desk network to a 5-utterance fixture and report the loss ratio.

    python scripts/overfit.py
    python scripts/overfit.py --rt60 0.5 0.5 --snr 20 20 --max-steps 500
"""
import argparse
import json
import math

from wrndereverb.experiments import overfit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=5)
    ap.add_argument("--max-steps", type=int, default=500)
    ap.add_argument("--time-limit", type=float, default=600.0)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rt60", type=float, nargs=2, default=(0.05, 0.1))
    ap.add_argument("--snr", type=float, nargs=2, default=(math.inf, math.inf),
                    help="SNR range in dB; inf inf mixes no noise")
    args = ap.parse_args()

    res = overfit(args.n, args.max_steps, args.time_limit, lr=args.lr, seed=args.seed,
                  rt60_range=tuple(args.rt60), snr_range_db=tuple(args.snr))
    print(json.dumps({"steps": len(res.losses), "initial": res.initial, "final": res.final,
                      "ratio": res.ratio, "seconds": round(res.seconds, 1)}))


if __name__ == "__main__":
    main()

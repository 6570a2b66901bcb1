"""Train the desk network on rt60 = 0.5 s / 20 dB fixtures and score a held-out set.

    python scripts/directional_check.py --steps 150 --eval-every 50
"""
import argparse
import json
import time

from wrndereverb.augment import AugmentSpec, BlockStream
from wrndereverb.experiments import fixture_corpus, held_out_set, score_held_out
from wrndereverb.nn.network import WideResNet, WrbConfig
from wrndereverb.nn.train import TrainConfig, Trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--eval-every", type=int, default=50)
    ap.add_argument("--n-train", type=int, default=20)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    pairs = held_out_set()
    corpus = fixture_corpus(args.n_train, seed=args.seed, floor=1e-4)
    spec = AugmentSpec(rt60_range=(0.5, 0.5), snr_range_db=(20, 20), seed=args.seed)
    stream = BlockStream(corpus, [], spec)
    trainer = Trainer(WideResNet(WrbConfig.desk(args.seed)), TrainConfig(lr=args.lr, batch_size=1))
    t0 = time.time()
    while trainer.step < args.steps:
        hist = trainer.run(stream, args.eval_every)
        summary = score_held_out(trainer.net, pairs).summary()
        summary.update(step=trainer.step, train_loss=sum(h["loss"] for h in hist) / len(hist),
                       seconds=round(time.time() - t0, 1))
        print(json.dumps(summary), flush=True)


if __name__ == "__main__":
    main()

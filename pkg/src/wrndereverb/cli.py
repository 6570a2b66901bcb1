"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import signal
import sys
import tempfile

import numpy as np

from . import synth
from .augment import (AugmentSpec, BlockStream, GeometryError, RirTooShortError, corrupt,
                      example_rng, load_noise_pool, measure_rt60, synth_rir)
from .config import ConfigError, RunConfig
from .dsp import AudioSignal
from .enhance import enhance
from .metrics import CorpusItem, MetricReport, evaluate_corpus, parse_tags
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.network import WideResNet
from .nn.train import Trainer, TrainingDivergedError, jsonl_sink, relative_drop_reached
from .wavio import WavFormatError, wav_read, wav_write

log = logging.getLogger("wrndereverb")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _triple(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return vals


def _wav_files(directory: str) -> list[str]:
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(".wav"))


# ---------------------------------------------------------------------------
# synth-rir


def cmd_synth_rir(args) -> int:
    try:
        rir = synth_rir(args.room, args.src, args.mic, args.rt60, max_len_s=args.max_len)
    except (GeometryError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        measured = measure_rt60(rir)
    except RirTooShortError:
        measured = None
    wav_write(args.out, AudioSignal(rir.taps, rir.sample_rate))
    sidecar = {
        "room_dims": list(rir.room_dims),
        "source_pos": list(rir.source_pos),
        "mic_pos": list(rir.mic_pos),
        "target_rt60": args.rt60,
        "measured_rt60": measured,
        "direct_index": rir.direct_index,
        "n_taps": int(rir.taps.size),
        "sample_rate": rir.sample_rate,
    }
    atomic_write_text(os.path.splitext(args.out)[0] + ".json",
                      json.dumps(sidecar, indent=2, sort_keys=True))
    print(f"wrote {args.out} (measured rt60 {measured})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fixture corpus and corruption


def cmd_make_fixture(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        sig = synth.speech_like(args.duration, np.random.default_rng([args.seed, i]),
                                floor=args.floor)
        wav_write(os.path.join(args.out, f"utt{i:03d}.wav"), sig)
    print(f"wrote {args.n} utterances to {args.out}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    """Reverberate and add noise to every WAV in a directory; writes a manifest."""
    if not os.path.isdir(args.input):
        raise UsageError(f"input directory not found: {args.input}")
    if args.noise and not os.path.isdir(args.noise):
        raise UsageError(f"noise directory not found: {args.noise}")
    spec = AugmentSpec(rt60_range=(args.rt60, args.rt60), snr_range_db=(args.snr, args.snr),
                       seed=args.seed)
    pool = load_noise_pool(args.noise) if args.noise else []
    os.makedirs(args.out, exist_ok=True)
    rows, failures = [], 0
    names = _wav_files(args.input)
    for i, name in enumerate(names):
        src = os.path.join(args.input, name)
        try:
            clean = wav_read(src)
            noisy, info = corrupt(clean, pool, spec, example_rng(args.seed, i))
        except Exception as exc:
            failures += 1
            print(f"{name}: {exc}", file=sys.stderr)
            continue
        dst = os.path.join(args.out, name)
        wav_write(dst, noisy)
        tags = f"rt60={args.rt60:g} snr={args.snr:g}"
        rows.append([os.path.splitext(name)[0], os.path.abspath(dst), os.path.abspath(src), tags])
    _write_manifest(os.path.join(args.out, "manifest.csv"), rows)
    print(f"corrupted {len(rows)} of {len(names)} files")
    return EXIT_FAIL if names and failures == len(names) else EXIT_OK


def _write_manifest(path, rows) -> None:
    buf = [("id", "path", "reference", "tags")] + [tuple(r) for r in rows]
    out = io.StringIO()
    csv.writer(out, lineterminator="\n").writerows(buf)
    atomic_write_text(path, out.getvalue())


# ---------------------------------------------------------------------------
# train


class _Interrupt:
    def __init__(self):
        self.hit = False

    def __call__(self, signum, frame):
        self.hit = True


def _load_corpus(directory):
    corpus = []
    for name in _wav_files(directory):
        try:
            corpus.append((os.path.splitext(name)[0], wav_read(os.path.join(directory, name))))
        except WavFormatError as exc:
            log.warning("skipping %s: %s", name, exc)
    return corpus


def cmd_train(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
        if args.steps is not None:
            cfg.train.steps = args.steps
        cfg.validate_paths()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    ck = None
    if args.resume:
        try:
            ck = load_checkpoint(args.resume)
        except (OSError, CheckpointError) as exc:
            raise UsageError(f"cannot resume from {args.resume}: {exc}") from exc
    corpus = _load_corpus(cfg.paths.corpus)
    if not corpus:
        print(f"no readable WAV files in {cfg.paths.corpus}", file=sys.stderr)
        return EXIT_FAIL
    pool = load_noise_pool(cfg.paths.noise) if cfg.paths.noise else []
    out = cfg.paths.out
    os.makedirs(out, exist_ok=True)
    atomic_write_text(os.path.join(out, "resolved_config.json"), cfg.to_json() + "\n")

    stream = BlockStream(corpus, pool, cfg.augment, redraw=cfg.redraw)
    if ck is not None:
        trainer = Trainer.from_checkpoint(ck, cfg.train)
        if ck.extra.get("stream"):
            stream.restore(ck.extra["stream"])
    else:
        trainer = Trainer(WideResNet(cfg.model), cfg.train)
    remaining = max(cfg.train.steps - trainer.step, 0)

    interrupt = _Interrupt()
    previous = signal.signal(signal.SIGINT, interrupt)
    ratio_stop = (relative_drop_reached(cfg.stop_ratio, cfg.stop_window)
                  if cfg.stop_ratio else None)

    def stop(history):
        return interrupt.hit or (ratio_stop is not None and ratio_stop(history))

    def extra():
        return {"stream": stream.state(), "seed": cfg.seed}

    def sink(ck_):
        save_checkpoint(os.path.join(out, f"step{ck_.step:07d}.wrnc"), ck_)

    mode = "a" if ck is not None else "w"
    status = EXIT_OK
    try:
        with open(os.path.join(out, "train_log.jsonl"), mode) as fh:
            trainer.run(stream, remaining, log_sink=jsonl_sink(fh), checkpoint_sink=sink,
                        extra_state=extra, stop=stop)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        status = EXIT_FAIL
    finally:
        signal.signal(signal.SIGINT, previous)
        save_checkpoint(os.path.join(out, "last.wrnc"), trainer.checkpoint(extra()))
    if interrupt.hit:
        print(f"interrupted at step {trainer.step}; checkpoint written to {out}/last.wrnc",
              file=sys.stderr)
        return EXIT_FAIL
    if status == EXIT_OK:
        print(f"trained to step {trainer.step}; checkpoint {out}/last.wrnc")
    return status


# ---------------------------------------------------------------------------
# enhance


def cmd_enhance(args) -> int:
    try:
        net = load_checkpoint(args.ckpt).build_network()
    except (OSError, CheckpointError) as exc:
        print(f"cannot load checkpoint {args.ckpt}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if os.path.isdir(args.input):
        os.makedirs(args.out, exist_ok=True)
        jobs = [(os.path.join(args.input, n), os.path.join(args.out, n))
                for n in _wav_files(args.input)]
    elif os.path.isfile(args.input):
        if os.path.isdir(args.out):
            jobs = [(args.input, os.path.join(args.out, os.path.basename(args.input)))]
        else:
            jobs = [(args.input, args.out)]
    else:
        raise UsageError(f"input not found: {args.input}")
    failures = 0
    for src, dst in jobs:
        try:
            sig = wav_read(src)
            wav_write(dst, enhance(sig, net))
        except Exception as exc:  # per-file failure, keep going
            failures += 1
            print(f"{src}: {exc}", file=sys.stderr)
    print(f"enhanced {len(jobs) - failures} of {len(jobs)} files")
    return EXIT_FAIL if jobs and failures == len(jobs) else EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def read_manifest(path) -> list[CorpusItem]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "path"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: manifest header must be id,path,reference,tags")
        rows = list(reader)
    items = []
    for row in rows:
        try:
            tags = parse_tags(row.get("tags") or "")
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from exc
        item = CorpusItem(row["id"], None, None, tags)
        try:
            item.signal = wav_read(os.path.join(base, row["path"]))
            if row.get("reference"):
                item.reference = wav_read(os.path.join(base, row["reference"]))
        except (OSError, WavFormatError) as exc:
            item.error = f"{type(exc).__name__}: {exc}"
        items.append(item)
    return items


def cmd_evaluate(args) -> int:
    if not os.path.isfile(args.pairs):
        raise UsageError(f"manifest not found: {args.pairs}")
    items = read_manifest(args.pairs)
    baseline = None
    if args.baseline:
        try:
            with open(args.baseline) as fh:
                baseline = MetricReport.from_dict(json.load(fh))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read baseline report {args.baseline}: {exc}") from exc
    report = evaluate_corpus(items, args.system, baseline)
    atomic_write_text(args.out, report.to_json() + "\n")
    if args.csv:
        atomic_write_text(args.csv, report.to_csv())
    ok = sum(1 for u in report.per_utterance if u.error is None)
    for u in report.per_utterance:
        if u.error is not None:
            print(f"{u.id}: {u.error}", file=sys.stderr)
    allm = report.strata.get("all", {})
    print(f"scored {ok} of {len(items)}; mean llr {allm.get('llr')} mean srmr {allm.get('srmr')}")
    return EXIT_FAIL if items and ok == 0 else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wrndereverb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-rir", help="synthesize a shoebox room impulse response")
    s.add_argument("--room", type=_triple, required=True, metavar="L,W,H")
    s.add_argument("--src", type=_triple, required=True, metavar="X,Y,Z")
    s.add_argument("--mic", type=_triple, required=True, metavar="X,Y,Z")
    s.add_argument("--rt60", type=float, required=True)
    s.add_argument("--max-len", type=float, default=None, help="RIR length in seconds")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_rir)

    s = sub.add_parser("make-fixture", help="write a synthetic speech-like corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=5)
    s.add_argument("--duration", type=float, default=2.5)
    s.add_argument("--floor", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_fixture)

    s = sub.add_parser("corrupt", help="reverberate and add noise to a directory of WAVs")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rt60", type=float, required=True)
    s.add_argument("--snr", type=float, required=True)
    s.add_argument("--noise", default=None, help="directory of noise WAVs (white noise if absent)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("train", help="train a network from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", default=None, metavar="CHECKPOINT")
    s.add_argument("--steps", type=int, default=None, help="override train.steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="dereverberate a WAV file or directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", help="score a manifest with LLR and SRMR")
    s.add_argument("--pairs", required=True, help="CSV manifest: id,path,reference,tags")
    s.add_argument("--baseline", default=None, help="earlier JSON report to compare against")
    s.add_argument("--out", required=True, help="JSON report path")
    s.add_argument("--csv", default=None, help="optional per-utterance CSV path")
    s.add_argument("--system", default="system", help="name of the scored system")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

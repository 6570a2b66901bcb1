import csv
import json
import os
import signal
import subprocess
import sys
import time
import wave

import numpy as np
import pytest

from wrndereverb.cli import main
from wrndereverb.config import ConfigError, RunConfig
from wrndereverb.dsp import AudioSignal
from wrndereverb.nn.checkpoint import load_checkpoint, save_checkpoint, Checkpoint
from wrndereverb.nn.network import WideResNet, WrbConfig
from wrndereverb.synth import speech_like
from wrndereverb.wavio import wav_read, wav_write

TINY_MODEL = {"n_wrb": 2, "blocks_per_wrb": 1, "base_channels": 2, "widths": [2, 3]}


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("clean")
    assert main(["make-fixture", "--out", str(d), "--n", "2", "--duration", "2.6"]) == 0
    return d


def write_config(path, corpus, out, steps=3, **extra):
    cfg = {"seed": 7, "model": TINY_MODEL,
           "train": {"steps": steps, "batch_size": 1, "lr": 1e-3, "checkpoint_every": 2},
           "paths": {"corpus": str(corpus), "out": str(out)}, **extra}
    path.write_text(json.dumps(cfg))
    return path


def read_log(path):
    return [json.loads(line) for line in open(path)]


# -- synth-rir ------------------------------------------------------------------

def test_synth_rir_sidecar(tmp_path):
    out = tmp_path / "rir.wav"
    code = main(["synth-rir", "--room", "6,4,3", "--src", "2,1.5,1.5", "--mic", "4,2.5,1.2",
                 "--rt60", "0.3", "--out", str(out)])
    assert code == 0
    side = json.loads((tmp_path / "rir.json").read_text())
    assert 0.24 <= side["measured_rt60"] <= 0.36
    assert side["direct_index"] == int(np.argmax(np.abs(wav_read(out).samples)))


def test_synth_rir_short_decay(tmp_path):
    out = tmp_path / "rir.wav"
    assert main(["synth-rir", "--room", "6,4,3", "--src", "2,1.5,1.5", "--mic", "4,2.5,1.2",
                 "--rt60", "0.05", "--out", str(out)]) == 0
    assert json.loads((tmp_path / "rir.json").read_text())["measured_rt60"] <= 0.1


def test_synth_rir_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth-rir", "--room", "6,4,3", "--src", "2,1.5,1.5", "--rt60", "0.3",
              "--out", str(tmp_path / "x.wav")])
    assert exc.value.code == 2
    code = main(["synth-rir", "--room", "6,4,3", "--src", "9,1.5,1.5", "--mic", "4,2.5,1.2",
                 "--rt60", "0.3", "--out", str(tmp_path / "x.wav")])
    assert code == 2
    assert "outside the room" in capsys.readouterr().err


# -- config -----------------------------------------------------------------------

def test_config_defaults_echoed(tmp_path):
    cfg = RunConfig.from_dict({"seed": 3})
    d = cfg.to_dict()
    assert d["augment"]["seed"] == 3 and d["model"]["seed"] == 3
    assert d["model"]["widths"] == [8, 16, 24, 32]
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sede": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"augment": {"rt60_range": [0.5, 0.1]}})


def test_full_preset_widths():
    assert RunConfig.from_dict({"preset": "full"}).model.widths == (32, 64, 128, 256)
    assert RunConfig.from_dict({"preset": "full", "model": {"widen_factor": 2}}).model.widths == \
        (8, 16, 32, 64)


# -- train --------------------------------------------------------------------------

def test_train_writes_artifacts(tmp_path, fixture_dir):
    cfg = write_config(tmp_path / "cfg.json", fixture_dir, tmp_path / "run")
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    log = read_log(run / "train_log.jsonl")
    assert [r["step"] for r in log] == [1, 2, 3]
    assert set(log[0]) == {"step", "loss", "lr", "wall_ms"}
    assert (run / "step0000002.wrnc").exists() and (run / "last.wrnc").exists()
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["train"]["weight_decay"] == 0.01
    assert load_checkpoint(run / "last.wrnc").step == 3


def test_train_deterministic(tmp_path, fixture_dir):
    logs, blobs = [], []
    for name in ("a", "b"):
        cfg = write_config(tmp_path / f"{name}.json", fixture_dir, tmp_path / name)
        assert main(["train", "--config", str(cfg)]) == 0
        logs.append([(r["step"], r["loss"], r["lr"]) for r in read_log(tmp_path / name / "train_log.jsonl")])
        blobs.append((tmp_path / name / "last.wrnc").read_bytes())
    assert logs[0] == logs[1]
    assert blobs[0] == blobs[1]


def test_train_resume(tmp_path, fixture_dir):
    full = write_config(tmp_path / "full.json", fixture_dir, tmp_path / "full", steps=4)
    assert main(["train", "--config", str(full)]) == 0
    part = write_config(tmp_path / "part.json", fixture_dir, tmp_path / "part", steps=4)
    assert main(["train", "--config", str(part), "--steps", "2"]) == 0
    assert main(["train", "--config", str(part), "--resume",
                 str(tmp_path / "part" / "last.wrnc")]) == 0
    resumed = read_log(tmp_path / "part" / "train_log.jsonl")
    assert [r["step"] for r in resumed] == [1, 2, 3, 4]
    reference = read_log(tmp_path / "full" / "train_log.jsonl")
    assert [r["loss"] for r in resumed] == [r["loss"] for r in reference]
    assert (tmp_path / "part" / "last.wrnc").read_bytes() == \
        (tmp_path / "full" / "last.wrnc").read_bytes()


def test_train_bad_config(tmp_path, fixture_dir):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    cfg = write_config(tmp_path / "c.json", tmp_path / "missing", tmp_path / "run")
    assert main(["train", "--config", str(cfg)]) == 2
    assert not (tmp_path / "run").exists()


def test_train_sigint_writes_checkpoint(tmp_path, fixture_dir):
    cfg = write_config(tmp_path / "cfg.json", fixture_dir, tmp_path / "run", steps=100000)
    proc = subprocess.Popen([sys.executable, "-m", "wrndereverb.cli", "train", "--config", str(cfg)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    log = tmp_path / "run" / "train_log.jsonl"
    deadline = time.time() + 120
    while time.time() < deadline:
        if log.exists() and log.read_text().count("\n") >= 2:
            break
        time.sleep(0.2)
    proc.send_signal(signal.SIGINT)
    _, err = proc.communicate(timeout=120)
    assert proc.returncode == 1
    assert "interrupted" in err
    ck = load_checkpoint(tmp_path / "run" / "last.wrnc")
    assert ck.step == read_log(log)[-1]["step"]


# -- enhance ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "model.wrnc"
    save_checkpoint(path, Checkpoint.capture(WideResNet(WrbConfig(**TINY_MODEL))))
    return path


def test_enhance_directory(tmp_path, fixture_dir, checkpoint, capsys):
    indir = tmp_path / "in"
    indir.mkdir()
    for name in ("a.wav", "b.wav"):
        wav_write(indir / name, speech_like(1.2, np.random.default_rng(len(name) + ord(name[0]))))
    with wave.open(str(indir / "c.wav"), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(b"\0\0" * 400)
    before = {p.name: p.read_bytes() for p in indir.iterdir()}
    assert main(["enhance", "--in", str(indir), "--ckpt", str(checkpoint), "--out",
                 str(tmp_path / "out")]) == 0
    assert "channels" in capsys.readouterr().err
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["a.wav", "b.wav"]
    for name in ("a.wav", "b.wav"):
        assert len(wav_read(tmp_path / "out" / name)) == len(wav_read(indir / name))
    assert before == {p.name: p.read_bytes() for p in indir.iterdir()}
    first = (tmp_path / "out" / "a.wav").read_bytes()
    main(["enhance", "--in", str(indir / "a.wav"), "--ckpt", str(checkpoint), "--out",
          str(tmp_path / "again.wav")])
    assert (tmp_path / "again.wav").read_bytes() == first


def test_enhance_bad_checkpoint(tmp_path):
    (tmp_path / "bad.wrnc").write_bytes(b"WRNC\x01\x00")
    wav_write(tmp_path / "a.wav", AudioSignal(np.zeros(1600)))
    assert main(["enhance", "--in", str(tmp_path / "a.wav"), "--ckpt", str(tmp_path / "bad.wrnc"),
                 "--out", str(tmp_path / "o.wav")]) == 1


# -- corrupt + evaluate ---------------------------------------------------------------

def test_corrupt_writes_aligned_manifest(tmp_path, fixture_dir):
    out = tmp_path / "noisy"
    assert main(["corrupt", "--in", str(fixture_dir), "--out", str(out), "--rt60", "0.4",
                 "--snr", "15", "--seed", "3"]) == 0
    rows = list(csv.DictReader(open(out / "manifest.csv")))
    assert [r["id"] for r in rows] == ["utt000", "utt001"]
    assert rows[0]["tags"] == "rt60=0.4 snr=15"
    assert len(wav_read(rows[0]["path"])) == len(wav_read(rows[0]["reference"]))


def test_evaluate_identity_manifest(tmp_path, fixture_dir):
    man = tmp_path / "m.csv"
    with open(man, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "reference", "tags"])
        w.writerow(["a", str(fixture_dir / "utt000.wav"), str(fixture_dir / "utt000.wav"), "k=1"])
        w.writerow(["b", str(fixture_dir / "utt001.wav"), str(fixture_dir / "utt001.wav"), "k=2"])
        w.writerow(["c", "missing.wav", "", "k=2"])
    out = tmp_path / "r.json"
    assert main(["evaluate", "--pairs", str(man), "--out", str(out), "--csv",
                 str(tmp_path / "r.csv")]) == 0
    rep = json.loads(out.read_text())
    rows = {r["id"]: r for r in rep["per_utterance"]}
    assert rows["a"]["llr"] == 0.0 and rows["b"]["llr"] == 0.0
    assert rows["c"]["error"] is not None
    assert rep["strata"]["all"]["n"] == 2
    assert rep["strata"]["all"]["srmr"] == pytest.approx((rows["a"]["srmr"] + rows["b"]["srmr"]) / 2)
    assert (tmp_path / "r.csv").read_text().startswith("id,llr,srmr,tags,error")


def test_evaluate_baseline_comparison(tmp_path, fixture_dir):
    noisy = tmp_path / "noisy"
    main(["corrupt", "--in", str(fixture_dir), "--out", str(noisy), "--rt60", "0.6", "--snr", "30"])
    clean_man = tmp_path / "clean.csv"
    with open(clean_man, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "reference", "tags"])
        for r in csv.DictReader(open(noisy / "manifest.csv")):
            w.writerow([r["id"], r["reference"], r["reference"], r["tags"]])
    assert main(["evaluate", "--pairs", str(noisy / "manifest.csv"), "--out",
                 str(tmp_path / "noisy.json"), "--system", "reverberant"]) == 0
    assert main(["evaluate", "--pairs", str(clean_man), "--out", str(tmp_path / "clean.json"),
                 "--system", "clean", "--baseline", str(tmp_path / "noisy.json")]) == 0
    cmp = json.loads((tmp_path / "clean.json").read_text())["comparison"]
    assert cmp["all"]["llr"]["best"] == "clean"
    assert cmp["all"]["srmr"]["best"] == "clean"
    assert cmp["rt60=0.6"]["srmr"]["delta"] > 0


def test_evaluate_all_rows_fail(tmp_path):
    man = tmp_path / "m.csv"
    man.write_text("id,path,reference,tags\nx,nope.wav,,\n")
    assert main(["evaluate", "--pairs", str(man), "--out", str(tmp_path / "r.json")]) == 1
    assert json.loads((tmp_path / "r.json").read_text())["per_utterance"][0]["error"]


def test_evaluate_missing_manifest(tmp_path):
    assert main(["evaluate", "--pairs", str(tmp_path / "none.csv"), "--out",
                 str(tmp_path / "r.json")]) == 2


def test_console_script_usage():
    out = subprocess.run([sys.executable, "-m", "wrndereverb.cli"], capture_output=True, text=True)
    assert out.returncode == 2

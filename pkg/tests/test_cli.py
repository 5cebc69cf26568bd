import json
import os
import re
import subprocess
import sys

import pytest

from stylemt.cli import main, resolve_configs
from stylemt.data import SYNTH_TAXONOMY
from stylemt.errors import ConfigError

SMALL = ["--set", "input_size=32", "--set", "patch_div=2", "--set", "gram_channels=8", "--set", "d_model=64"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(small_synth, tmp_path_factory):
    ds, _, _ = small_synth
    out = tmp_path_factory.mktemp("cli")
    ckpt = str(out / "pmg.ckpt")
    code = main(["train", "--family", "PMG", "--train", ds.train_manifest, "--val", ds.test_manifest,
                 "--taxonomy", ds.taxonomy_file, *SMALL, "--epochs", "3", "--seed", "2", "--out", ckpt,
                 "--metrics-out", str(out / "val.txt")])
    assert code == 0
    return ds, ckpt, out


def test_train_then_evaluate_reproduces_final_f1(trained, capsys):
    ds, ckpt, out = trained
    manifest = json.load(open(ckpt + ".run.json"))
    assert manifest["command"] == "train" and manifest["seed"] == 2
    assert manifest["resolved"]["model"]["patch_div"] == 2
    assert set(manifest["outputs"]) == {ckpt, str(out / "val.txt")}
    code, text, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--manifest", ds.test_manifest,
                        "--out", out / "eval.txt")
    assert code == 0
    assert open(out / "eval.txt").read() == open(out / "val.txt").read()
    assert re.search(r"^mean F1 \d\.\d{6}$", text, re.M)


def test_evaluate_head_subset(trained, capsys):
    ds, ckpt, out = trained
    code, text, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--manifest", ds.test_manifest, "--heads", "veil",
                        "--run-manifest", out / "sub.run.json")
    assert code == 0 and text.startswith("veil: n=") and "tint" not in text


def test_infer_prints_one_line_per_enabled_task(trained, capsys, tmp_path):
    ds, ckpt, _ = trained
    image = os.path.join(ds.root, "images", "test_00000.ppm")
    code, text, _ = run(capsys, "infer", "--checkpoint", ckpt, image, "--run-manifest", tmp_path / "r.json")
    assert code == 0
    lines = text.strip().splitlines()
    assert [ln.split("\t")[0] for ln in lines] == list(SYNTH_TAXONOMY.names)
    for ln in lines:
        task, label, conf = ln.split("\t")
        assert label in SYNTH_TAXONOMY.task(task).classes and 0 < float(conf) <= 1
    amap = tmp_path / "veil.pgm"
    code, text, _ = run(capsys, "infer", "--checkpoint", ckpt, image, "--heads", "grain,veil",
                        "--attention-map", "veil", "--map-out", amap, "--run-manifest", tmp_path / "r.json")
    assert code == 0 and len(text.strip().splitlines()) == 2
    assert amap.read_bytes().startswith(b"P5\n2 2\n255\n")


def test_split_twice_is_byte_identical(small_synth, tmp_path, capsys):
    ds, _, _ = small_synth
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "split", "--manifest", ds.train_manifest, "--taxonomy", ds.taxonomy_file,
                         "--out", tmp_path / name, "--seed", 7, "--test-fraction", 0.25)
        assert code == 0
        outs.append([(tmp_path / name / f).read_bytes() for f in ("train_ids.txt", "test_ids.txt")])
    assert outs[0] == outs[1]
    assert json.load(open(tmp_path / "a" / "split.run.json"))["seed"] == 7


def test_inspect_and_hpo_stub(trained, capsys, tmp_path):
    _, ckpt, _ = trained
    code, text, _ = run(capsys, "inspect", "--checkpoint", ckpt, "--run-manifest", tmp_path / "i.json")
    summary = json.loads(text)
    assert code == 0 and summary["family"] == "PMG" and summary["epochs_trained"] == 3
    assert summary["parameters"]["total"] == sum(v for k, v in summary["parameters"].items() if k != "total")
    code, text, _ = run(capsys, "hpo", "--family", "RTM", "--stub", "--generations", 4, "--out", tmp_path / "ga.log")
    assert code == 0 and "best fitness" in text
    assert len((tmp_path / "ga.log").read_text().splitlines()) == 5


def test_bench_subcommand(trained, capsys, tmp_path):
    _, ckpt, _ = trained
    before = open(ckpt, "rb").read()
    code, text, _ = run(capsys, "bench", "--checkpoint", ckpt, "--duration", 0.3, "--warmup", 0.1,
                        "--repetitions", 2, "--heads", "tint", "--out", tmp_path / "b.json")
    assert code == 0 and text.startswith("fps ") and "heads tint" in text
    assert open(ckpt, "rb").read() == before
    code, _, err = run(capsys, "bench", "--checkpoint", ckpt, "--duration", 0.1, "--warmup", 0.1)
    assert code == 4 and "duration" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(small_synth, tmp_path, capsys):
    ds, _, _ = small_synth
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "train", "--bogus")[0] == 2
    assert run(capsys, "train", "--train", tmp_path / "missing.csv", "--out", tmp_path / "x")[0] == 3
    code, _, err = run(capsys, "train", "--train", ds.train_manifest, "--taxonomy", ds.taxonomy_file,
                       "--set", "wings=3", "--out", tmp_path / "x")
    assert code == 4 and "wings" in err
    assert run(capsys, "train", "--train", ds.train_manifest, "--taxonomy", ds.taxonomy_file, *SMALL,
               "--set", "patch_div=3", "--out", tmp_path / "x")[0] == 4
    code, _, err = run(capsys, "train", "--family", "PMG", "--train", ds.train_manifest, "--taxonomy",
                       ds.taxonomy_file, *SMALL, "--set", "optimizer=\"sgd_momentum\"", "--lr", "1e30",
                       "--epochs", 2, "--out", tmp_path / "div.ckpt")
    assert code == 5 and os.path.exists(str(tmp_path / "div.ckpt") + ".last_good")
    assert run(capsys, "--version")[0] == 0


def test_resolve_configs_family_defaults():
    mc, tc = resolve_configs("RTM", {"truncate_layer": 3, "class_weight_cap": 4.0}, SYNTH_TAXONOMY, 1)
    assert mc.encoder.family == "residual" and mc.encoder.truncate_after_layer == 3 and mc.weight_cap == 4.0
    assert tc.optimizer == "sgd_momentum" and tc.schedule == "constant"
    mc, tc = resolve_configs("PMG", {"use_focal": True, "attention_layers": 2}, SYNTH_TAXONOMY, 1)
    assert mc.loss == "focal" and mc.refiner_layers == 2 and tc.optimizer == "adamw"
    with pytest.raises(ConfigError):
        resolve_configs("PM", {"nope": 1}, SYNTH_TAXONOMY, 0)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "stylemt.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("stylemt ")

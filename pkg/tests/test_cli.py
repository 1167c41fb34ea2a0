import numpy as np
import pytest

from bcpnn.cli import main
from bcpnn.config import format_config
from bcpnn.model_io import encode_params, import_params
from bcpnn.network import build_network
from bcpnn.precision import FP32

from .conftest import tiny_config, write_idx


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    imgs = (rng.random((24, 6, 6)) * 255).astype(np.uint8)
    labels = np.arange(24) % 3
    ti, tl = write_idx(tmp_path, imgs[:18], labels[:18], "train")
    vi, vl = write_idx(tmp_path, imgs[18:], labels[18:], "test")
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(format_config(tiny_config()))
    return dict(cfg=str(cfg), ti=str(ti), tl=str(tl), vi=str(vi), vl=str(vl), dir=tmp_path)


def train(f, model, *extra):
    return main(["train", "--config", f["cfg"], "--images", f["ti"], "--labels", f["tl"],
                 "--test-images", f["vi"], "--test-labels", f["vl"], "--model", str(model), *extra])


def strip_timing(csv_text):
    rows = [ln.split(",") for ln in csv_text.strip().splitlines() if not ln.startswith("#")]
    return [[c for k, c in enumerate(r) if k != 2] for r in rows]


def test_train_eval_inspect(files, capsys):
    model = files["dir"] / "m.bcpn"
    metrics = files["dir"] / "metrics.csv"
    assert train(files, model, "--csv", str(metrics)) == 0
    text = metrics.read_text()
    assert text.startswith("# alpha=")
    assert "epoch,phase,wall_ms,test_accuracy" in text
    capsys.readouterr()

    per_sample = files["dir"] / "eval.csv"
    counters = files["dir"] / "counters.csv"
    assert main(["eval", "--model", str(model), "--test-images", files["vi"], "--test-labels", files["vl"],
                 "--precision", "fp16", "--csv", str(per_sample), "--counters-csv", str(counters)]) == 0
    out = capsys.readouterr().out
    assert "fp16/strict" in out and "<- bottleneck" in out
    assert "config_id,precision,accuracy" in out
    assert per_sample.read_text().splitlines()[0] == "sample,label,pred,latency_us"
    assert len(per_sample.read_text().splitlines()) == 7
    assert counters.read_text().startswith("stage,items,send_stalls,recv_stalls,busy_us")

    assert main(["inspect", str(model)]) == 0
    out = capsys.readouterr().out
    assert "crc_ok = True" in out and "n_hidden_hcu = 3" in out


def test_missing_dataset_exit_2(files, capsys):
    rc = main(["train", "--config", files["cfg"], "--images", "/nonexistent/x", "--labels", files["tl"],
               "--model", str(files["dir"] / "m")])
    err = capsys.readouterr().err
    assert rc == 2
    assert "dataset not found" in err
    assert len(err.strip().splitlines()) == 1 and err.startswith("error: ")


def test_usage_errors_exit_2(files, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["eval", "--precision", "fp8"]) == 2
    assert main(["sweep", "--sweep", ""]) == 2
    assert main(["sweep", "--sweep", "colour=red"]) == 2
    bad = files["dir"] / "bad.bcpn"
    bad.write_bytes(b"nope")
    assert main(["inspect", str(bad)]) == 2
    assert main(["eval", "--model", str(bad), "--images", files["vi"], "--labels", files["vl"]]) == 2


def test_runtime_failure_exit_1(files, monkeypatch, capsys):
    import bcpnn.cli as cli

    def broken(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "train_full", broken)
    assert train(files, files["dir"] / "m") == 1
    assert "error: RuntimeError: disk on fire" in capsys.readouterr().err


def test_train_is_deterministic(files):
    outs = []
    for k in range(2):
        model, csv = files["dir"] / f"m{k}", files["dir"] / f"c{k}.csv"
        assert train(files, model, "--seed", "3", "--shuffle", "--csv", str(csv)) == 0
        outs.append((model.read_bytes(), strip_timing(csv.read_text())))
    assert outs[0] == outs[1]


def test_zero_epochs_exports_fresh_network(files):
    model = files["dir"] / "zero"
    assert train(files, model, "--epochs-unsup", "0", "--epochs-sup", "0") == 0
    fresh = build_network(tiny_config(epochs_unsup=0, epochs_sup=0))
    assert model.read_bytes() == encode_params(fresh, FP32)


def test_export_reencodes(files, capsys):
    model = files["dir"] / "m"
    assert train(files, model) == 0
    out16 = files["dir"] / "m16"
    assert main(["export", "--model", str(model), "--precision", "fp16", "--out", str(out16)]) == 0
    assert "precision=fp16/strict" in capsys.readouterr().out
    assert import_params(out16).precision.name == "fp16"


def test_bench_and_sweep(files, capsys):
    model = files["dir"] / "m"
    assert train(files, model) == 0
    capsys.readouterr()
    lat = files["dir"] / "lat.csv"
    assert main(["bench", "--model", str(model), "--images", files["vi"], "--labels", files["vl"],
                 "--repeats", "2", "--warmup", "3", "--csv", str(lat)]) == 0
    assert len(lat.read_text().splitlines()) == 1 + 2 * 6
    capsys.readouterr()
    sweep_csv = files["dir"] / "sweep.csv"
    assert main(["sweep", "--config", files["cfg"], "--sweep", "hcu=3,1;precision=fp32,fp16",
                 "--csv", str(sweep_csv)]) == 0
    rows = sweep_csv.read_text().strip().splitlines()
    assert rows[0].startswith("config_id,precision")
    assert [r.split(",")[0] for r in rows[1:]] == ["hcu=3", "hcu=1", "precision=fp32", "precision=fp16"]


def test_raw_gray_needs_dimensions(files):
    raw = files["dir"] / "img.raw"
    raw.write_bytes(bytes(36 * 2))
    lab = files["dir"] / "lab.csv"
    lab.write_text("0,1\n1,0\n")
    args = ["train", "--config", files["cfg"], "--images", str(raw), "--labels", str(lab),
            "--model", str(files["dir"] / "r")]
    assert main(args) == 2
    assert main(args + ["--width", "6", "--height", "6"]) == 0

import json
import subprocess
import sys

import numpy as np
import pytest

from splatmark.cli import format_message, main, parse_message
from splatmark.errors import FormatError

TINY = {
    "codec": {"L": 8},
    "encoder": {"text_dim": 32, "text_ff": 64, "text_layers": 1, "image_channels": [8, 16, 16]},
    "decoder": {"d": 16, "phi_hidden": 64, "hidden": 64, "ff": 32},
    "sampler": {"K": 64, "epochs": 3, "freeze_epoch": 2},
    "pretrain": {"batch_size": 32},
    "embed": {"epochs": 3, "steps_per_epoch": 1, "batch_size": 4, "clean_views": 1},
    "protocol": {"sample_count": 2, "distortions": ["none", "blur"]},
    "scene": {"count": 24, "height": 16, "width": 16},
}


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("SPLATMARK_OUTPUT_DIR", str(tmp_path))
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_parse_and_format_messages():
    assert format_message(parse_message("a5", 8, hex_input=True)) == "10100101"
    assert format_message(parse_message("0xA5", 8, hex_input=True), hex_output=True) == "a5"
    assert format_message(parse_message("00000001", 8)) == "00000001"
    for text, hex_input in (("a5f", False), ("a5f", True), ("zz", True), ("0102", False)):
        with pytest.raises(FormatError):
            parse_message(text, 8, hex_input)
    with pytest.raises(FormatError):
        format_message(np.ones(6, np.uint8), hex_output=True)


def test_pretrain_embed_extract_round_trip(workdir, capsys):
    cfg = str(workdir / "tiny.json")
    code, out, _ = run(capsys, "pretrain", "--config", cfg, "--quiet", "--out", "dec.npz")
    assert code == 0 and (workdir / "dec.npz").exists()
    log = [json.loads(line) for line in (workdir / "dec.log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3]
    assert run(capsys, "gen-scene", "--config", cfg, "--out", "scene.json")[0] == 0
    code, out, _ = run(capsys, "embed", "--config", cfg, "--checkpoint", str(workdir / "dec.npz"),
                       "--scene", str(workdir / "scene.json"), "--message", "b4", "--hex", "--quiet",
                       "--out", "w.npz", "--image-out", "w.npy")
    assert code == 0
    summary = json.loads(out)
    assert 0 <= summary["clean_bit_acc"] <= 1
    code, out, _ = run(capsys, "extract", "--checkpoint", str(workdir / "dec.npz"), "--image", str(workdir / "w.npy"))
    assert code == 0
    bits = out.strip()
    assert len(bits) == 8 and set(bits) <= {"0", "1"}
    agreement = np.mean([a == b for a, b in zip(bits, "10110100")])
    assert agreement == pytest.approx(summary["clean_bit_acc"])
    code, out, _ = run(capsys, "extract", "--checkpoint", str(workdir / "dec.npz"), "--image", str(workdir / "w.npy"),
                       "--hex")
    assert code == 0 and len(out.strip()) == 2


def test_attack_and_evaluate(workdir, capsys):
    cfg = str(workdir / "tiny.json")
    run(capsys, "pretrain", "--config", cfg, "--quiet", "--out", "dec.npz")
    run(capsys, "gen-scene", "--config", cfg, "--out", "scene.json")
    code, _, _ = run(capsys, "attack", "--config", cfg, "--attack", "prune", "--scene", str(workdir / "scene.json"),
                     "--out", "pruned.json")
    assert code == 0
    assert len(json.loads((workdir / "pruned.json").read_text())["primitives"]) == 20
    np.save(workdir / "img.npy", np.full((16, 16, 3), 0.5, np.float32))
    code, _, _ = run(capsys, "attack", "--kind", "brightness", "--image", str(workdir / "img.npy"), "--out", "b.npy")
    assert code == 0 and np.load(workdir / "b.npy").shape == (16, 16, 3)
    code, out, _ = run(capsys, "evaluate", "--config", cfg, "--checkpoint", str(workdir / "dec.npz"),
                       "--scene", str(workdir / "scene.json"), "--out", "report.json")
    assert code == 0 and "Random protocol" in out
    first = (workdir / "report.json").read_bytes()
    run(capsys, "evaluate", "--config", cfg, "--checkpoint", str(workdir / "dec.npz"),
        "--scene", str(workdir / "scene.json"), "--out", "report.json")
    assert (workdir / "report.json").read_bytes() == first
    code, out, _ = run(capsys, "evaluate", "--config", cfg, "--checkpoint", str(workdir / "dec.npz"),
                       "--decoder-only", "--samples", "6", "--out", "dec_report.json")
    assert code == 0 and set(json.loads(out)) == {"In", "Out", "accuracy"}


def test_error_exit_codes(workdir, capsys):
    code, _, err = run(capsys, "pretrain", "--bits", "64", "--groups", "3", "--out", "x.npz")
    assert code == 2 and "error (config)" in err and "L mod G" in err
    code, _, err = run(capsys, "pretrain", "--bits", "96", "--chunk-bits", "1", "--out", "x.npz")
    assert code == 3 and "error (capacity)" in err
    (workdir / "junk.npz").write_bytes(b"junk")
    code, _, err = run(capsys, "extract", "--checkpoint", str(workdir / "junk.npz"), "--image", "none.npy")
    assert code == 6 and "error (format)" in err


def test_tampered_checkpoint_exits_with_corruption(workdir, capsys):
    run(capsys, "pretrain", "--config", str(workdir / "tiny.json"), "--quiet", "--out", "dec.npz")
    with np.load(workdir / "dec.npz") as z:
        arrays = {k: z[k] for k in z.files}
    name = next(k for k in arrays if k.startswith("param/"))
    arrays[name] = arrays[name] * 1.01
    with open(workdir / "bad.npz", "wb") as fh:
        np.savez(fh, **arrays)
    np.save(workdir / "img.npy", np.full((16, 16, 3), 0.5, np.float32))
    code, _, err = run(capsys, "extract", "--checkpoint", str(workdir / "bad.npz"), "--image", str(workdir / "img.npy"))
    assert code == 4 and "error (corruption)" in err


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "splatmark.cli", "gen-scene", "--count", "8", "--height", "8",
                           "--width", "8", "--out", str(tmp_path / "s.json")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "s.json").read_text())["format"] == "splatmark-scene"

import json

import numpy as np
import pytest

from midiseg.cli import main
from midiseg.synth import SongSpec, song_bytes


@pytest.fixture
def corpus(tmp_path):
    root = tmp_path / "corpus"
    root.mkdir()
    for i in range(6):
        spec = SongSpec(sections=(8,) * 6, seed=i, transpose=i, author="Tubb" if i == 0 else "")
        (root / f"s{i}.mid").write_bytes(song_bytes(spec))
    (root / "broken.mid").write_bytes(b"MThd\x00\x00\x00\x06\x00\x01\x00\x01\x01\xe0MTrk\x00\x00\x01\x00")
    return root


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    conv = [{"out_channels": 4, "kernel": [3, 3], "stride": s, "padding": 1} for s in (2, 1, 1, 1)]
    path.write_text(json.dumps({"model": {"conv": conv, "hidden": 8},
                                "train": {"max_epochs": 2, "batch_size": 32}}))
    return path


def splits_file(tmp_path):
    path = tmp_path / "splits.jsonl"
    names = {0: "train", 1: "train", 2: "train", 3: "validation", 4: "test", 5: "test"}
    rows = [{"file_id": f"s{i}", "boundaries_beats": [], "boundaries_seconds": [], "split": s}
            for i, s in names.items()]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_inspect(corpus, capsys):
    assert main(["inspect", str(corpus / "s0.mid")]) == 0
    out = capsys.readouterr().out
    assert "markers: 6" in out and "measures/markers: 8.00" in out and "keep: true" in out
    assert "subset: tubb" in out


def test_inspect_bad_file(corpus, capsys):
    assert main(["inspect", "--jobs", "2", str(corpus / "broken.mid"), str(corpus / "s1.mid")]) == 1
    out = capsys.readouterr()
    assert "TruncatedChunk" in out.err and "s1.mid" in out.out


def test_missing_upstream_stage(tmp_path, capsys):
    assert main(["--run-dir", str(tmp_path / "run"), "train"]) == 1
    assert "encode" in capsys.readouterr().err


def test_full_pipeline(corpus, small_config, tmp_path, capsys):
    run = tmp_path / "run"
    base = ["--config", str(small_config), "--run-dir", str(run)]
    assert main(base + ["curate", str(corpus), "--splits", str(splits_file(tmp_path))]) == 0
    log = [json.loads(x) for x in (run / "curation_log.jsonl").read_text().splitlines()]
    assert {r["file_id"] for r in log if r["error"]} == {"broken"}

    assert main(base + ["encode", str(corpus)]) == 0
    index = json.loads((run / "patches" / "s4.json").read_text())
    assert index["split"] == "test"
    assert index["patch_measures"] == list(range(16, 32))

    assert main(base + ["train", "--seed", "1"]) == 0
    first = (run / "model.ckpt").read_bytes()
    assert main(base + ["train", "--seed", "1"]) == 0
    assert (run / "model.ckpt").read_bytes() == first
    assert main(base + ["predict"]) == 0
    assert main(base + ["predict", "--ensemble", f"{run / 'model.ckpt'},{run / 'model.ckpt'}"]) == 0
    preds = {p.name: p.read_bytes() for p in (run / "predictions").iterdir()}
    assert main(base + ["predict", "--jobs", "2"]) == 0
    assert preds == {p.name: p.read_bytes() for p in (run / "predictions").iterdir()}
    assert main(base + ["evaluate"]) == 0
    report = json.loads((run / "report.json").read_text())
    assert [s["file_id"] for s in report["songs"]] == ["s4", "s5"]
    assert set(report["micro_tolerance"]) == {"1bar", "0.5s", "3s"}

    manifest = json.loads((run / "manifest.json").read_text())
    assert set(manifest) == {"curate", "encode", "train", "predict", "evaluate"}
    assert manifest["train"]["seeds"]["train"] == 1
    assert manifest["curate"]["config_hash"] != manifest["train"]["config_hash"]


def test_encode_is_idempotent(corpus, tmp_path):
    run = tmp_path / "run"
    main(["--run-dir", str(run), "curate", str(corpus)])
    main(["--run-dir", str(run), "encode", str(corpus)])
    first = {p.name: p.read_bytes() for p in sorted((run / "patches").iterdir())}
    manifest = (run / "manifest.json").read_bytes()
    main(["--run-dir", str(run), "encode", str(corpus)])
    assert first == {p.name: p.read_bytes() for p in sorted((run / "patches").iterdir())}
    assert manifest == (run / "manifest.json").read_bytes()


def test_render_patch(corpus, tmp_path, capsys):
    out = tmp_path / "p.png"
    assert main(["render-patch", str(corpus / "s1.mid"), "--measure", "3", "-o", str(out)]) == 0
    from PIL import Image
    assert np.asarray(Image.open(out)).shape == (128, 512, 3)
    assert main(["render-patch", str(corpus / "s1.mid"), "--measure", "3", "--per-channel",
                 "--no-overtones", "-o", str(out)]) == 0
    assert not np.asarray(Image.open(tmp_path / "p_c2.png")).any()


def test_config_env(monkeypatch, tmp_path, corpus, capsys):
    cfg = tmp_path / "c.json"
    monkeypatch.setenv("MIDISEG_CONFIG", str(cfg))
    for bad in ({"bogus": {}}, {"eval": {"bogus": 1}}, {"eval": {"threshold": 2}}):
        cfg.write_text(json.dumps(bad))
        assert main(["inspect", str(corpus / "s0.mid")]) == 1
    cfg.write_text(json.dumps({"eval": {"threshold": 0.3}}))
    assert main(["inspect", str(corpus / "s0.mid")]) == 0


def test_config_round_trip(tmp_path):
    from midiseg.config import PipelineConfig, load_config, save_config

    cfg = PipelineConfig().with_overrides("encode", k=2, overtones=False)
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()
    assert cfg.digest() != PipelineConfig().digest()
    assert cfg.with_overrides("paths", run_dir="elsewhere").digest() == cfg.digest()


def test_tubb_list_overrides_detection(corpus, tmp_path):
    ids = tmp_path / "tubb.txt"
    ids.write_text("s1\ns2\n")
    run = tmp_path / "run"
    assert main(["--run-dir", str(run), "curate", str(corpus), "--tubb-list", str(ids),
                 "--keep-list", str(ids)]) == 0
    rows = [json.loads(x) for x in (run / "annotations.jsonl").read_text().splitlines()]
    assert [(r["file_id"], r["subset"]) for r in rows] == [("s1", "tubb"), ("s2", "tubb")]

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cellflow.cli import main
from cellflow.io import read_image, read_mask, read_raster, write_mask, write_raster
from cellflow.synth import SynthSpec, synth_dataset

SPEC = dict(height=300, width=260)


@pytest.fixture
def data(tmp_path):
    synth_dataset(3, 4, SynthSpec(**SPEC), out_dir=tmp_path / "data")
    return tmp_path / "data"


def run(*args):
    return main([str(a) for a in args])


def test_budget(capsys):
    assert run("budget", "--height", 8415, "--width", 10496) == 0
    assert capsys.readouterr().out.strip() == "883.238400"
    run("budget", "--height", 1000, "--width", 1000)
    assert capsys.readouterr().out.strip() == "10.000000"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cellflow", "budget", "--height", "512",
                          "--width", "512"], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "10.000000"


def test_genflow_track_eval(data, tmp_path):
    mask = data / "masks/img_0000.png"
    assert run("genflow", "--mask", mask, "--out", tmp_path / "f.cft") == 0
    pred = read_raster(tmp_path / "f.cft")
    assert pred.channels == 3
    (tmp_path / "pred").mkdir()
    assert run("track", "--pred", tmp_path / "f.cft", "--out", tmp_path / "pred/img_0000.png") == 0
    assert run("eval", "--gt-dir", data / "masks", "--pred-dir", tmp_path / "pred",
               "--report", tmp_path / "r.json") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["report_version"] == 1 and rep["mean_f1"] >= 0.95
    assert rep["strict_iou"] is True and rep["aggregate"] == "mean"


def test_track_rejects_wrong_channels(tmp_path):
    write_raster(np.zeros((4, 4, 2), np.float32), tmp_path / "p.cft")
    with pytest.raises(SystemExit):
        run("track", "--pred", tmp_path / "p.cft", "--out", tmp_path / "o.png")


def test_infer_and_tta(data, tmp_path):
    args = ["infer", "--image", data / "images/img_0001.cft", "--predictor",
            f"oracle:{data / 'masks'}", "--window", 128]
    assert run(*args, "--out", tmp_path / "a.cft") == 0
    assert run(*args, "--tta", "--out", tmp_path / "b.cft") == 0
    a, b = read_raster(tmp_path / "a.cft").array, read_raster(tmp_path / "b.cft").array
    assert a.shape == (300, 260, 3) and np.abs(a - b).max() < 1e-5


def test_infer_noise_predictor_seeded(data, tmp_path):
    base = ["infer", "--image", data / "images/img_0001.cft", "--predictor",
            f"oracle-noise:{data / 'masks'}:0.2", "--predictor", f"oracle:{data / 'masks'}"]
    run(*base, "--seed", 1, "--out", tmp_path / "a.cft")
    run(*base, "--seed", 1, "--out", tmp_path / "b.cft")
    run(*base, "--seed", 2, "--out", tmp_path / "c.cft")
    a, b, c = (read_raster(tmp_path / f"{n}.cft").array for n in "abc")
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_stats(tmp_path):
    m = np.zeros((12, 12), np.uint32)
    m[1:5, 1:5] = 1
    m[7, 1:10] = 2
    write_mask(m, tmp_path / "m.pgm")
    assert run("stats", "--mask", tmp_path / "m.pgm", "--out", tmp_path / "s.csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["id"] for r in rows] == ["1", "2"]
    assert rows[0]["size"] == "16" and float(rows[0]["solidity"]) == 1.0
    assert float(rows[1]["eccentricity"]) <= 0.2


def test_augment(data, tmp_path):
    args = ["augment", "--image", data / "images/img_0000.cft", "--mask",
            data / "masks/img_0000.png", "--seed", 3, "--p", 1.0]
    run(*args, "--out", tmp_path / "a.cft")
    run(*args, "--out", tmp_path / "b.cft")
    assert (tmp_path / "a.cft").read_bytes() == (tmp_path / "b.cft").read_bytes()
    img = read_image(data / "images/img_0000.cft")
    out = read_image(tmp_path / "a.cft")
    bg = read_mask(data / "masks/img_0000.png") == 0
    assert np.array_equal(out[bg], img[bg]) and not np.array_equal(out, img)


def test_cluster(tmp_path):
    rng = np.random.default_rng(0)
    with open(tmp_path / "e.csv", "w") as f:
        f.write("name,a,b\n")
        for i in range(30):
            f.write(f"s{i},{rng.normal() + 10 * (i < 5)},{rng.normal()}\n")
    assert run("cluster", "--embeddings", tmp_path / "e.csv", "--k", 2, "--seed", 1,
               "--out", tmp_path / "c.json") == 0
    d = json.loads((tmp_path / "c.json").read_text())
    assert d["k"] == 2 and len(d["assignments"]) == 30 and abs(sum(d["weights"]) - 30) < 1e-9
    assert len(set(d["assignments"][:5])) == 1 and d["assignments"][0] != d["assignments"][10]
    assert d["weights"][0] == 3.0


def test_synth(tmp_path):
    assert run("synth", "--n", 2, "--seed", 1, "--height", 64, "--width", 80,
               "--out", tmp_path / "s") == 0
    assert read_image(tmp_path / "s/images/img_0001.cft").shape == (64, 80, 1)
    assert read_mask(tmp_path / "s/masks/img_0001.png").shape == (64, 80)


def test_pipeline_empty_dir(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    (tmp_path / "gt").mkdir()
    code = run("pipeline", "--input-dir", tmp_path / "in", "--output-dir", tmp_path / "out",
               "--predictor", f"oracle:{tmp_path / 'gt'}")
    assert code == 0
    rep = json.loads((tmp_path / "out/report.json").read_text())
    assert rep["images"] == [] and rep["mean_f1"] is None


def pipeline_cfg(data, out, **extra):
    cfg = {"input_dir": str(data / "images"), "output_dir": str(out),
           "gt_dir": str(data / "masks"), "predictors": [f"oracle:{data / 'masks'}"],
           "stitch": {"window": 128}, "seed": 0}
    cfg.update(extra)
    return cfg


def test_pipeline_oracle_and_determinism(data, tmp_path):
    reports = []
    for name in ("r1", "r2"):
        (tmp_path / f"{name}.json").write_text(json.dumps(pipeline_cfg(data, tmp_path / name)))
        assert run("pipeline", "--config", tmp_path / f"{name}.json", "--tta") == 0
        reports.append(json.loads((tmp_path / name / "report.json").read_text()))
    for r in reports:
        assert r["mean_f1"] >= 0.95 and len(r["images"]) == 3
        for img in r["images"]:
            img.pop("wall_seconds")
            img.pop("io_seconds")
            img.pop("within_budget")
    assert reports[0] == reports[1]
    for i in range(3):
        a = (tmp_path / "r1" / f"img_{i:04d}.png").read_bytes()
        assert a == (tmp_path / "r2" / f"img_{i:04d}.png").read_bytes()


def test_pipeline_single_window_equals_genflow_track(data, tmp_path):
    cfg = pipeline_cfg(data, tmp_path / "p", stitch={"window": 512})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("pipeline", "--config", tmp_path / "c.json") == 0
    run("genflow", "--mask", data / "masks/img_0002.png", "--out", tmp_path / "f.cft")
    run("track", "--pred", tmp_path / "f.cft", "--out", tmp_path / "manual.png")
    assert np.array_equal(read_mask(tmp_path / "p/img_0002.png"), read_mask(tmp_path / "manual.png"))
    assert (tmp_path / "p/img_0002.png").read_bytes() == (tmp_path / "manual.png").read_bytes()


def test_pipeline_strict_budget_exit_code(data, tmp_path, monkeypatch):
    import cellflow.metrics as metrics
    import cellflow.pipeline as pipeline
    monkeypatch.setattr(pipeline, "evaluate_image",
                        lambda *a, **k: metrics.evaluate_image(a[0], a[1], a[2], 1e9, *a[4:], **k))
    cfg = pipeline_cfg(data, tmp_path / "o")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("pipeline", "--config", tmp_path / "c.json") == 0
    assert run("pipeline", "--config", tmp_path / "c.json", "--strict-budget") == 2


def test_pipeline_partial_failure(data, tmp_path, capsys):
    (data / "images" / "img_0001.cft").write_bytes(b"junk")
    cfg = pipeline_cfg(data, tmp_path / "o")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("pipeline", "--config", tmp_path / "c.json") == 0
    rep = json.loads((tmp_path / "o/report.json").read_text())
    errs = {r["name"]: r["error"] for r in rep["images"]}
    assert errs["img_0001"].startswith("BadMagicError") and errs["img_0000"] is None
    with pytest.raises(Exception):
        run("pipeline", "--config", tmp_path / "c.json", "--fail-fast")


def test_pipeline_config_errors(data, tmp_path):
    bad = pipeline_cfg(data, tmp_path / "o", predictors=["magic:/nowhere"])
    (tmp_path / "c.json").write_text(json.dumps(bad))
    with pytest.raises(ValueError):
        run("pipeline", "--config", tmp_path / "c.json")
    bad = pipeline_cfg(data, tmp_path / "o", bogus=1)
    (tmp_path / "c.json").write_text(json.dumps(bad))
    with pytest.raises(ValueError):
        run("pipeline", "--config", tmp_path / "c.json")
    with pytest.raises(FileNotFoundError):
        run("pipeline", "--input-dir", tmp_path / "missing", "--output-dir", tmp_path / "o",
            "--predictor", f"oracle:{data / 'masks'}")


def test_pipeline_jobs_env(data, tmp_path, monkeypatch):
    monkeypatch.setenv("CELLFLOW_JOBS", "2")
    cfg = pipeline_cfg(data, tmp_path / "o")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("pipeline", "--config", tmp_path / "c.json") == 0
    serial = pipeline_cfg(data, tmp_path / "s")
    (tmp_path / "s.json").write_text(json.dumps(serial))
    assert run("pipeline", "--config", tmp_path / "s.json", "--jobs", 1) == 0
    for i in range(3):
        assert (tmp_path / f"o/img_{i:04d}.png").read_bytes() == \
            (tmp_path / f"s/img_{i:04d}.png").read_bytes()
    assert os.environ["CELLFLOW_JOBS"] == "2"

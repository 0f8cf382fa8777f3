import hashlib
import json
import os

import numpy as np
import pytest

from glandseg.cli import main
from glandseg.imaging import load_label_map, load_mask

TINY_SETS = [
    "synth.height=48", "synth.width=48", "synth.min_glands=1",
    "synth.max_glands=2", "synth.min_radius=7", "synth.max_radius=10",
    "synth.min_border=2", "synth.max_border=3", "synth.margin=3",
    "spm.feature_dim=4", "spm.iterations=3", "spm.kmeans_restarts=2",
    "spm.kmeans_max_iters=10",
    "msg.epochs=1", "msg.patch=48", "msg.stride=48", "msg.batch=4",
    "msg.embed_dim=4",
    "pipeline.train_count=3", "pipeline.eval_count=2",
]


def run(workdir, *argv):
    args = list(argv) + ["--workdir", str(workdir)]
    for s in TINY_SETS:
        args += ["--set", s]
    return main(args)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_unknown_config_key_exits_3(tmp_path):
    assert main(["synth", "--out", "ds", "--workdir", str(tmp_path),
                 "--set", "bogus.key=1"]) == 3


def test_invalid_config_value_exits_3(tmp_path):
    assert run(tmp_path, "synth", "--out", "ds",
               "--set", "synth.border_high=0.5") == 3


def test_bad_value_type_exits_3(tmp_path):
    assert run(tmp_path, "synth", "--out", "ds",
               "--set", "synth.count=many") == 3


def test_missing_input_exits_2(tmp_path):
    assert run(tmp_path, "spm", "--in", "absent", "--out", "props") == 2


def test_missing_model_exits_2(tmp_path):
    (tmp_path / "imgs").mkdir()
    assert run(tmp_path, "predict", "--model", "no.mssg",
               "--in", "imgs", "--out", "pred") == 2


def test_empty_image_dir_exits_2(tmp_path):
    (tmp_path / "imgs").mkdir()
    assert run(tmp_path, "spm", "--in", "imgs", "--out", "props") == 2


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in ("msg.beta", "spm.kmeans_k", "synth.noise_sigma"):
        assert key in out


def test_stage_chain(tmp_path):
    assert run(tmp_path, "synth", "--out", "ds", "--count", "3") == 0
    ds = tmp_path / "ds"
    manifest = json.load(open(ds / "manifest.json"))
    assert manifest["count"] == 3
    assert (ds / "config.txt").exists()

    assert run(tmp_path, "spm", "--in", "ds", "--out", "props") == 0
    for i in range(3):
        prop = load_label_map(str(tmp_path / "props" / f"{i:03d}.png"))
        assert prop.data.shape == (48, 48)
        side = json.load(open(tmp_path / "props" / f"{i:03d}.json"))
        assert side["image"] == f"{i:03d}.png"
        assert side["seed"] == i
        assert len(side["loss_curve"]) == 3
        assert len(side["region_counts"]) == 5

    assert run(tmp_path, "train", "--patches", "ds",
               "--proposals", "props", "--out", "model.mssg") == 0
    assert (tmp_path / "model.mssg").exists()
    log_rows = [json.loads(l) for l in
                open(tmp_path / "model.mssg.log.jsonl")]
    assert len(log_rows) == 1 and log_rows[0]["epoch"] == 0

    assert run(tmp_path, "predict", "--model", "model.mssg",
               "--in", "ds", "--out", "pred") == 0
    for i in range(3):
        mask = load_mask(str(tmp_path / "pred" / f"{i:03d}_mask.png"))
        label = load_label_map(str(tmp_path / "pred" / f"{i:03d}_label.png"))
        assert np.array_equal(mask, label.data > 0)

    assert run(tmp_path, "eval", "--pred", "pred", "--gt", "ds/gt",
               "--out", "report.json", "--csv", "report.csv") == 0
    report = json.load(open(tmp_path / "report.json"))
    assert report["count"] == 3
    assert len(report["images"]) == 3
    assert {"image", "f1", "dice", "miou"} <= set(report["images"][0])
    assert {"f1", "dice", "miou"} <= set(report["mean"])
    csv_lines = open(tmp_path / "report.csv").read().splitlines()
    assert csv_lines[0] == "image,f1,dice,miou"
    assert csv_lines[-1].startswith("MEAN,")


def test_eval_of_ground_truth_is_perfect(tmp_path):
    assert run(tmp_path, "synth", "--out", "ds", "--count", "2") == 0
    assert run(tmp_path, "eval", "--pred", "ds/gt", "--gt", "ds/gt",
               "--out", "r.json") == 0
    report = json.load(open(tmp_path / "r.json"))
    assert report["mean"]["miou"] == 1.0 and report["mean"]["f1"] == 1.0


def test_pipeline_end_to_end(tmp_path):
    assert run(tmp_path / "run", "pipeline") == 0
    wd = tmp_path / "run"
    manifest = json.load(open(wd / "run_manifest.json"))
    assert manifest["status"] == "ok"
    assert [s["stage"] for s in manifest["stages"]] == [
        "synth_train", "synth_eval", "spm", "train", "predict", "eval"]
    assert all(s["status"] == "ok" for s in manifest["stages"])
    report = json.load(open(wd / "report.json"))
    assert report["count"] == 2
    assert report["fingerprint"] == manifest["fingerprint"]
    listed = manifest["stages"][3]["artifacts"]
    assert any(p.endswith("model.mssg") for p in listed)
    for rel, digest in listed.items():
        assert sha(str(wd / rel)) == digest


def test_pipeline_repeats_bit_identical(tmp_path):
    assert run(tmp_path / "a", "pipeline") == 0
    assert run(tmp_path / "b", "pipeline") == 0
    for rel in ("report.json", "model.mssg", "proposals/000.png"):
        assert sha(str(tmp_path / "a" / rel)) == sha(str(tmp_path / "b" / rel))


def test_pipeline_failure_recorded(tmp_path):
    wd = tmp_path / "run"
    code = main(["pipeline", "--workdir", str(wd)] +
                sum((["--set", s] for s in TINY_SETS), []) +
                ["--set", "pipeline.train_count=0"])
    assert code in (1, 2)
    manifest = json.load(open(wd / "run_manifest.json"))
    assert manifest["status"] == "failed"
    failed = [s for s in manifest["stages"] if s["status"] == "failed"]
    assert len(failed) == 1 and "error" in failed[0]


def test_ablate_writes_table(tmp_path):
    assert run(tmp_path / "ab", "ablate") == 0
    wd = tmp_path / "ab"
    table = json.load(open(wd / "ablation.json"))
    names = [r["variant"] for r in table["rows"]]
    assert names == ["none", "v_only", "o_only", "both"]
    flags = {r["variant"]: (r["msgv"], r["msgo"]) for r in table["rows"]}
    assert flags == {"none": (False, False), "v_only": (True, False),
                     "o_only": (False, True), "both": (True, True)}
    assert table["rows"][0]["delta"] == 0.0
    csv_lines = open(wd / "ablation.csv").read().splitlines()
    assert csv_lines[0] == "variant,msgv,msgo,miou,delta"
    assert len(csv_lines) == 5
    for name in names:
        assert (wd / f"variant_{name}" / "report.json").exists()


def test_config_file_applies(tmp_path):
    (tmp_path / "run.cfg").write_text("synth.seed = 9\n")
    args = ["synth", "--out", "ds", "--count", "1",
            "--workdir", str(tmp_path), "--config", "run.cfg"]
    for s in TINY_SETS:
        args += ["--set", s]
    assert main(args) == 0
    manifest = json.load(open(tmp_path / "ds" / "manifest.json"))
    assert manifest["seed"] == 9
    snapshot = (tmp_path / "ds" / "config.txt").read_text()
    assert "synth.seed = 9" in snapshot

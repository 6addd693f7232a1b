import json
import subprocess
import sys

import numpy as np
import pytest

from sid import __version__
from sid.cli import PRESETS, config_hash, estimate_co2, main
from sid.datasets import make_manifest, read_manifest, split_manifest, write_manifest
from sid.errors import ConfigError
from sid.fixtures import make_texture_corpus, table7_fixture
from sid.imageops import encode_png, read_image

from conftest import write_images

A = "authentic"


@pytest.fixture
def workspace(tmp_path):
    """Manifests plus stub descriptors for eval/cross/sweep configs."""
    auth = write_images(tmp_path / "img", A, 4, size=(448, 448), seed=1)
    sdxl = write_images(tmp_path / "img", "sdxl", 4, size=(448, 448), seed=2)
    mj = write_images(tmp_path / "img", "mj56", 4, size=(448, 448), seed=3)
    write_manifest(make_manifest(auth + sdxl + mj, (A, "sdxl", "mj56")), tmp_path / "all.jsonl")
    write_manifest(make_manifest(auth, (A,)), tmp_path / "auth.jsonl")
    write_manifest(make_manifest(sdxl, (A, "sdxl")), tmp_path / "sdxl.jsonl")
    write_manifest(make_manifest(mj, (A, "mj56")), tmp_path / "mj.jsonl")
    stub = {"kind": "stub", "label_space": [A, "syn"], "stub": {
        "default": [0.8, 0.2],
        "rules": [{"source": "*sdxl_00[01].png", "probs": [0.1, 0.9]},
                  {"source": "*mj56_*", "rank": 0, "probs": [0.3, 0.7]},
                  {"source": "*authentic_000.png", "probs": [0.4, 0.6]}]}}
    (tmp_path / "stub.json").write_text(json.dumps(stub))
    return tmp_path


def write_cfg(path, **fields):
    path.write_text(json.dumps({"schema_version": 1, "seed": 0, **fields}))
    return path


def configs(ws, out_dir):
    eval_cfg = write_cfg(ws / "eval.json", backend="stub.json", mode="voted",
                         data={"manifest": "all.jsonl"}, output=f"{out_dir}/eval.json")
    cross_cfg = write_cfg(
        ws / "cross.json", output=f"{out_dir}/cross.json",
        runs=[{"id": "s1", "backend": "stub.json"},
              {"id": "s2", "backend": {"kind": "stub", "label_space": [A, "x"],
                                       "stub": {"default": [0.0, 1.0]}}}],
        eval_sets=[{"id": "sdxl", "data": "sdxl.jsonl"}, {"id": "mj", "data": "mj.jsonl"}])
    sweep_cfg = write_cfg(ws / "sweep.json", backend="stub.json", authentic="auth.jsonl",
                          synthetic={"manifest": "all.jsonl", "labels": ["sdxl", "mj56"]},
                          output=f"{out_dir}/sweep.json")
    return {"eval": eval_cfg, "cross": cross_cfg, "sweep": sweep_cfg}


def artifacts(ws, out_dir):
    return {p.name: p.read_bytes() for p in sorted((ws / out_dir).iterdir())}


def test_artifacts_byte_identical_across_runs_and_workers(workspace, capsys):
    runs = {}
    cfgs = configs(workspace, "out")
    for tag, workers in (("a", "1"), ("b", "1"), ("c", "8")):
        for cmd, cfg in cfgs.items():
            assert main([cmd, "--config", str(cfg), "--workers", workers]) == 0
        runs[tag] = artifacts(workspace, "out")
    assert set(runs["a"]) == {"eval.json", "cross.json", "cross.csv", "sweep.json"}
    assert runs["a"] == runs["b"] == runs["c"]


def test_eval_artifact_envelope(workspace, capsys):
    cfg = configs(workspace, "out")["eval"]
    assert main(["eval", "--config", str(cfg), "--workers", "2"]) == 0
    art = json.loads((workspace / "out" / "eval.json").read_text())
    assert art["tool"] == "sid" and art["version"] == __version__
    assert art["config_sha256"] == config_hash(json.loads(cfg.read_text()))
    res = art["result"]
    # 3 of 5 voting: authentic_000, sdxl_000 and sdxl_001 are flagged on every patch,
    # mj56 images only on their top-ranked patch
    assert res["recall"] == {"authentic": 75.0, "sdxl": 50.0, "mj56": 0.0}
    assert "timing" not in res


def test_cross_csv_layout(workspace, capsys):
    cfg = configs(workspace, "out")["cross"]
    assert main(["cross", "--config", str(cfg), "--mode", "center"]) == 0
    lines = (workspace / "out" / "cross.csv").read_text().splitlines()
    # the center crop carries rank 0, so the mj56 rule fires on it
    assert lines == [",sdxl,mj,Avg.", "s1,50.00,100.00,75.00", "s2,100.00,100.00,100.00",
                     "Avg.,75.00,100.00,"]


def test_sweep_table(workspace, capsys):
    cfg = configs(workspace, "out")["sweep"]
    assert main(["sweep", "--config", str(cfg), "--workers", "1"]) == 0
    rows = json.loads((workspace / "out" / "sweep.json").read_text())["result"]
    assert [r["synthetic_recall"] for r in rows] == [75.0, 25.0, 25.0, 25.0, 25.0]
    assert [r["authentic_recall"] for r in rows] == [75.0] * 5


def test_workers_env_default(workspace, monkeypatch, capsys):
    monkeypatch.setenv("SID_WORKERS", "3")
    cfg = configs(workspace, "out")["eval"]
    assert main(["eval", "--config", str(cfg), "--timing"]) == 0
    res = json.loads((workspace / "out" / "eval.json").read_text())["result"]
    assert res["timing"]["workers"] == 3


def test_flag_overrides_change_hash(workspace, capsys):
    cfg = configs(workspace, "out")["eval"]
    main(["eval", "--config", str(cfg)])
    first = json.loads((workspace / "out" / "eval.json").read_text())
    main(["eval", "--config", str(cfg), "--threshold", "1"])
    second = json.loads((workspace / "out" / "eval.json").read_text())
    assert first["config_sha256"] != second["config_sha256"]
    assert second["result"]["policy"]["threshold_k"] == 1


def test_usage_and_validation_exit_codes(workspace, capsys):
    assert main(["eval", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    cfg = workspace / "bad.json"
    cfg.write_text(json.dumps({"schema_version": 1, "backend": "stub.json"}))
    assert main(["eval", "--config", str(cfg)]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "validation" and "seed" in err["message"]
    write_cfg(cfg, backend="missing.json", data="all.jsonl", output="o.json")
    assert main(["eval", "--config", str(cfg)]) == 3
    write_cfg(cfg, backend="stub.json", data="nope.jsonl", output="o.json")
    assert main(["eval", "--config", str(cfg)]) == 3
    cfg.write_text(json.dumps({"schema_version": 9, "seed": 0}))
    assert main(["eval", "--config", str(cfg)]) == 3
    assert main(["eval", "--config", str(workspace / "absent.json")]) == 3
    assert main(["eval", "--config", str(configs(workspace, "o")["eval"]), "--workers", "0"]) == 3


def test_runtime_error_exit_code(workspace, capsys):
    (workspace / "ref.json").write_text(json.dumps({"kind": "reference",
                                                    "model_path": "no_model.json"}))
    cfg = write_cfg(workspace / "e.json", backend="ref.json", data="all.jsonl", output="o.json")
    assert main(["eval", "--config", str(cfg)]) == 1
    assert json.loads(capsys.readouterr().err)["type"] == "BackendLoadError"


def test_co2(tmp_path, monkeypatch, capsys):
    assert estimate_co2(0, 0.3).emissions_kg == 0
    assert estimate_co2(10, 0.25).emissions_kg == 2.5
    with pytest.raises(ConfigError):
        estimate_co2(-1, 0.25)
    monkeypatch.delenv("SID_CO2_INTENSITY", raising=False)
    assert main(["co2", "--kwh", "10", "--intensity", "0.25"]) == 0
    assert capsys.readouterr().out.strip() == "2.5 kg CO2"
    assert main(["co2", "--kwh", "10"]) == 3
    cfg = write_cfg(tmp_path / "c.json", co2_intensity_kg_per_kwh=0.5)
    assert main(["co2", "--kwh", "4", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.strip() == "2 kg CO2"
    monkeypatch.setenv("SID_CO2_INTENSITY", "0.1")
    assert main(["co2", "--kwh", "4", "--out", str(tmp_path / "co2.json")]) == 0
    assert json.loads((tmp_path / "co2.json").read_text())["result"]["emissions_kg"] == \
        pytest.approx(0.4)
    assert main(["co2", "--kwh", "-1", "--intensity", "1"]) == 3


def test_dataset_subcommands(tmp_path, capsys):
    write_images(tmp_path / "raw", "a", 10)
    write_images(tmp_path / "raw", "b", 20)
    for lab in ("a", "b"):
        assert main(["dataset", "ingest", "--root", str(tmp_path / "raw" / lab), "--label", lab,
                     "--year", "2023", "--out", str(tmp_path / f"{lab}.jsonl")]) == 0
    assert main(["dataset", "merge", "--manifest", str(tmp_path / "a.jsonl"),
                 str(tmp_path / "b.jsonl"), "--out", str(tmp_path / "ab.jsonl")]) == 0
    assert main(["dataset", "split", "--manifest", str(tmp_path / "ab.jsonl"), "--seed", "1",
                 "--out", str(tmp_path / "split.jsonl")]) == 0
    m = read_manifest(tmp_path / "split.jsonl")
    assert m.counts()["b"] == {"train": 12, "val": 4, "test": 4}
    assert main(["dataset", "undersample", "--manifest", str(tmp_path / "split.jsonl"),
                 "--label", "b", "--cap", "10", "--seed", "0", "--out",
                 str(tmp_path / "u.jsonl")]) == 0
    assert read_manifest(tmp_path / "u.jsonl").counts()["b"] == {"train": 6, "val": 2, "test": 2}
    capsys.readouterr()
    assert main(["dataset", "validate", "--manifest", str(tmp_path / "u.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out) == []
    (tmp_path / "raw" / "a" / "a_000.png").unlink()
    assert main(["dataset", "validate", "--manifest", str(tmp_path / "u.jsonl"), "--strict"]) == 1
    assert main(["dataset", "ingest", "--root", str(tmp_path / "none"), "--label", "a",
                 "--out", str(tmp_path / "x.jsonl")]) == 1


def test_patchify_and_alter(tmp_path, capsys):
    img = np.random.default_rng(0).integers(0, 256, (300, 460, 3), dtype=np.uint8)
    (tmp_path / "in.png").write_bytes(encode_png(img))
    assert main(["patchify", "--image", str(tmp_path / "in.png"), "--out",
                 str(tmp_path / "p")]) == 0
    index = json.loads((tmp_path / "p" / "index.json").read_text())
    assert [p["rank"] for p in index["patches"]] == [0, 1, 2, 3, 4]
    first = index["patches"][0]
    crop = read_image(tmp_path / "p" / first["file"])
    y, x = first["origin_y"], first["origin_x"]
    assert np.array_equal(crop, img[y:y + 224, x:x + 224])

    assert main(["alter", "--image", str(tmp_path / "in.png"), "--out", str(tmp_path / "g.png"),
                 "--kind", "Gamma", "--param", "gamma=2.0"]) == 0
    out = read_image(tmp_path / "g.png")
    assert out[0, 0, 0] == int(np.floor(255 * (img[0, 0, 0] / 255) ** 2 + 0.5))
    for name in ("s1.png", "s2.png"):
        assert main(["alter", "--image", str(tmp_path / "in.png"), "--out", str(tmp_path / name),
                     "--policy", "susy", "--seed", "4", "--index", "7"]) == 0
    assert (tmp_path / "s1.png").read_bytes() == (tmp_path / "s2.png").read_bytes()
    assert main(["alter", "--image", str(tmp_path / "in.png"), "--out", str(tmp_path / "z.png"),
                 "--kind", "Gamma", "--param", "gamma"]) == 2


def test_presets_parse(capsys):
    for name in PRESETS:
        assert main(["preset", name]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["schema_version"] == 1 and "seed" in cfg
    assert PRESETS["susy-train"]["augmentation"] == "susy"
    assert PRESETS["susy-train"]["optimizer"]["monitor"] == "validation_loss"
    assert PRESETS["table7"]["policy"] == {"n_patches": 5, "threshold_k": 3}


def test_train_then_eval_reference(tmp_path, capsys):
    m = make_texture_corpus(tmp_path / "corpus", n_per_class=10, size=96,
                            classes=("authentic", "noisy"))
    write_manifest(split_manifest(m, seed=0), tmp_path / "m.jsonl")
    cfg = write_cfg(tmp_path / "train.json", data={"manifest": "m.jsonl"}, side=96,
                    output="model.json", optimizer={"max_epochs": 3})
    assert main(["train", "--config", str(cfg)]) == 0
    report = json.loads((tmp_path / "model.report.json").read_text())["result"]
    assert 1 <= len(report["epochs"]) <= 3
    (tmp_path / "ref.json").write_text(json.dumps({
        "kind": "reference", "model_path": "model.json", "input_spec": {"height": 96, "width": 96}}))
    ecfg = write_cfg(tmp_path / "eval.json", backend="ref.json",
                     data={"manifest": "m.jsonl", "split": "test"}, output="eval.json")
    assert main(["eval", "--config", str(ecfg), "--mode", "center"]) == 0
    res = json.loads((tmp_path / "eval.json").read_text())["result"]
    assert res["n_images"] == 4 and set(res["recall"]) == {"authentic", "noisy"}


def test_table7_preset_shape_on_fixture(tmp_path, capsys):
    auth, syn, script = table7_fixture(tmp_path / "t7")
    write_manifest(auth, tmp_path / "auth.jsonl")
    write_manifest(syn, tmp_path / "syn.jsonl")
    (tmp_path / "stub.json").write_text(json.dumps(
        {"kind": "stub", "label_space": ["authentic", "synthetic"], "stub": script}))
    cfg = dict(PRESETS["table7"], backend="stub.json", authentic={"manifest": "auth.jsonl"},
               synthetic={"manifest": "syn.jsonl"}, output="t7.json")
    (tmp_path / "t7cfg.json").write_text(json.dumps(cfg))
    assert main(["sweep", "--config", str(tmp_path / "t7cfg.json")]) == 0
    rows = {r["k"]: r for r in json.loads((tmp_path / "t7.json").read_text())["result"]}
    assert (rows[3]["authentic_recall"], rows[3]["synthetic_recall"]) == (40.0, 90.0)
    assert (rows[5]["authentic_recall"], rows[5]["synthetic_recall"]) == (90.0, 50.0)


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "sid.cli", "--version"], capture_output=True,
                          text=True)
    assert done.returncode == 0 and done.stdout.strip() == f"sid {__version__}"

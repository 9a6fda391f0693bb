import json
import os

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from attndistill import synthetic
from attndistill.backbone import build_toy
from attndistill.bench import BenchRow, bench, format_table, scaling_ok
from attndistill.cli import main
from attndistill.image_io import (
    ImageFormatError,
    load_image,
    load_labels,
    pixel_sha256,
    read_metadata,
    save_image,
    save_labels,
    to_tensor,
    to_uint8,
)
from attndistill.tasks import ConfigError, TaskConfig, load_task_config, manifest_path, run_task

# image io ---------------------------------------------------------------------------


def test_rgb_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (17, 23, 3), dtype=np.uint8)
    path = save_image(to_tensor(pixels), tmp_path / "x.png", seed=11)
    assert np.array_equal(to_uint8(load_image(path)), pixels)
    assert read_metadata(path)["seed"] == "11"


def test_label_values_preserved(tmp_path):
    labels = np.array([[0, 1, 2], [2, 2, 0]])
    assert set(np.unique(load_labels(save_labels(labels, tmp_path / "l.png")))) == {0, 1, 2}
    assert np.array_equal(load_labels(save_labels(labels, tmp_path / "l.png")), labels)
    np.save(tmp_path / "l.npy", labels)
    assert np.array_equal(load_labels(tmp_path / "l.npy"), labels)


def test_paletted_and_rgb_labels(tmp_path):
    p = Image.fromarray(np.array([[3, 7], [7, 3]], dtype=np.uint8), "P")
    p.putpalette([0, 0, 0] * 3 + [255, 0, 0] + [0, 0, 0] * 3 + [0, 255, 0] + [0, 0, 0] * 248)
    p.save(tmp_path / "p.png")
    assert load_labels(tmp_path / "p.png").tolist() == [[3, 7], [7, 3]]
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    Image.fromarray(rgb).save(tmp_path / "rgb.png")
    assert load_labels(tmp_path / "rgb.png").tolist() == [[1, 0], [0, 0]]


def test_unsupported_formats_named(tmp_path):
    (tmp_path / "a.xyz").write_bytes(b"")
    with pytest.raises(ImageFormatError, match=".xyz"):
        load_image(tmp_path / "a.xyz")
    with pytest.raises(ImageFormatError, match=".jpg"):
        save_image(torch.zeros(3, 4, 4), tmp_path / "out.jpg")


# task configs -------------------------------------------------------------------------


@pytest.fixture
def inputs(tmp_path):
    d = tmp_path / "inputs"
    d.mkdir()
    save_image(synthetic.stripes(32, 32), d / "style.png")
    save_image(synthetic.scene(32, 32), d / "content.png")
    img, seg = synthetic.two_texture_image(32, 32)
    save_image(img, d / "src.png")
    save_labels(seg, d / "seg.png")
    save_labels(np.ascontiguousarray(seg[::-1].T), d / "tgt.png")
    return d


def test_missing_content_names_field(inputs, tmp_path):
    cfg = TaskConfig(task="style-transfer", out=str(tmp_path / "o.png"), style=str(inputs / "style.png"))
    with pytest.raises(ConfigError, match="content") as err:
        cfg.validate()
    assert err.value.field == "content"


@pytest.mark.parametrize("data,field", [
    ({"task": "texture"}, "out"),
    ({"task": "nope", "out": "a.png", "style": "s.png"}, "task"),
    ({"task": "texture", "out": "a.png", "style": "s.png", "colour": 1}, "colour"),
    ({"task": "texture", "out": "a.png", "style": "s.png", "lr": -1}, "lr"),
    ({"task": "texture", "out": "a.jpg", "style": "s.png"}, "out"),
    ({"task": "t2i-style", "out": "a.png", "style": "s.png"}, "prompt"),
    ({"task": "texture", "out": "a.png", "style": "s.png", "schema_version": 9}, "schema_version"),
])
def test_validation_field_messages(data, field):
    with pytest.raises(ConfigError) as err:
        TaskConfig.from_dict(data).validate()
    assert err.value.field == field


def test_task_defaults():
    t2i = TaskConfig(task="t2i-style", out="a.png", style="s", prompt="p").params()
    assert (t2i["steps"], t2i["cfg_scale"], t2i["inner_steps"], t2i["lr"]) == (50, 7.0, 2, 0.015)
    assert TaskConfig(task="style-transfer", out="a.png").params()["content_weight"] == 0.25
    assert TaskConfig(task="appearance-transfer", out="a.png").params()["content_weight"] == 0.2
    assert TaskConfig(task="texture-controlled", out="a.png").params()["content_weight"] == 0.15
    assert TaskConfig(task="texture", out="a.png").params()["iterations"] == 100
    assert TaskConfig(task="texture-expand", out="a.png").params()["inner_steps"] == 3
    assert TaskConfig(task="texture", out="a.png", lr=0.1).params()["lr"] == 0.1


def test_texture_run_is_deterministic(inputs, tmp_path):
    runs = [run_task(TaskConfig(task="texture", style=str(inputs / "style.png"), out=str(tmp_path / f"t{i}.png"),
                                iterations=4, seed=5)) for i in range(2)]
    assert runs[0].manifest["output_sha256"] == runs[1].manifest["output_sha256"]
    assert pixel_sha256(load_image(runs[0].image_path)) == runs[0].manifest["output_sha256"]


def test_t2i_manifest_records_sampler_defaults(inputs, tmp_path):
    out = run_task(TaskConfig(task="t2i-style", style=str(inputs / "style.png"), prompt="a striped rug",
                              out=str(tmp_path / "t2i.png")))
    params = out.manifest["params"]
    assert (params["steps"], params["cfg_scale"], params["inner_steps"], params["lr"]) == (50, 7.0, 2, 0.015)
    assert len(out.manifest["trace"]["steps"]) == 50


def test_manifest_reproduces_output(inputs, tmp_path):
    cfg = {"task": "texture-controlled", "style": "src.png", "seg_src": "seg.png", "seg_tgt": "tgt.png",
           "out": "../runs/ctl.png", "iterations": 3, "seed": 2}
    (inputs / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    first = run_task(load_task_config(inputs / "cfg.yaml"))
    assert first.image_path.resolve() == (tmp_path / "runs" / "ctl.png").resolve()
    manifest = manifest_path(first.image_path)
    data = json.loads(manifest.read_text())
    assert data["schema_version"] == 1 and data["seed"] == 2 and len(data["trace"]["loss"]) == 3
    os.remove(first.image_path)
    again = run_task(load_task_config(manifest))
    assert again.manifest["output_sha256"] == data["output_sha256"]


def test_no_writes_outside_output_dir(inputs, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = {p for p in tmp_path.rglob("*")}
    out_dir = tmp_path / "results"
    run_task(TaskConfig(task="style-transfer", style=str(inputs / "style.png"), content=str(inputs / "content.png"),
                        out=str(out_dir / "st.png"), iterations=2, vae_finetune=True, vae_steps=2))
    new = {p for p in tmp_path.rglob("*")} - before
    assert new and all(out_dir == p or out_dir in p.parents for p in new)


def test_resolution_error_before_compute(tmp_path):
    save_image(torch.zeros(3, 511, 511), tmp_path / "big.png")
    bb = build_toy({"codec_factor": 8})
    cfg = TaskConfig(task="texture", style=str(tmp_path / "big.png"), out=str(tmp_path / "o.png"))
    with pytest.raises(ConfigError, match="divisible") as err:
        run_task(cfg, backbone=bb)
    assert err.value.field == "style" and bb.forward_calls == 0
    assert not (tmp_path / "o.png").exists()


def test_all_tasks_run(inputs, tmp_path):
    common = {"seed": 1}
    cases = {
        "appearance-transfer": {"style": "style.png", "content": "content.png", "iterations": 2},
        "layout-texture": {"style": "style.png", "layout": "content.png", "steps": 3},
        "texture-expand": {"style": "style.png", "size": [32, 96], "steps": 2, "tile_window": 8},
    }
    for task, extra in cases.items():
        data = {"task": task, "out": str(tmp_path / f"{task}.png"), **common,
                **{k: str(inputs / v) if isinstance(v, str) else v for k, v in extra.items()}}
        out = run_task(TaskConfig.from_dict(data))
        assert out.image.shape[0] == 3
    assert json.loads(manifest_path(tmp_path / "layout-texture.png").read_text())["notes"]["t_start"] == 600
    assert load_image(tmp_path / "texture-expand.png").shape == (3, 32, 96)


# bench ---------------------------------------------------------------------------------


def test_bench_empty_and_scaling_helpers(toy32):
    assert bench(toy32, []) == []
    rows = [BenchRow("optimize", 100, 1.0), BenchRow("optimize", 200, 2.2), BenchRow("optimize", 300, 2.9)]
    assert scaling_ok(rows)
    assert not scaling_ok(rows[:2] + [BenchRow("optimize", 300, 4.0)])
    assert scaling_ok([BenchRow("sample", m, s) for m, s in ((1, 1.0), (2, 1.2), (3, 1.5))])
    assert not scaling_ok([BenchRow("sample", m, s) for m, s in ((1, 1.0), (2, 0.9), (3, 1.5))])
    assert "ratio" in format_table(rows)


def test_bench_runs_small(toy32):
    rows = bench(toy32, [1, 2], "sample", steps=2, example=synthetic.stripes(32, 32))
    assert [r.iterations for r in rows] == [1, 2] and all(r.seconds > 0 for r in rows)


# CLI -------------------------------------------------------------------------------------


def test_cli_run_texture(inputs, tmp_path, capsys):
    out = tmp_path / "cli" / "tex.png"
    code = main(["run", "texture", "--style", str(inputs / "style.png"), "--iters", "2", "--seed", "3",
                 "--out", str(out)])
    assert code == 0 and out.exists()
    manifest = json.loads(manifest_path(out).read_text())
    assert manifest["params"]["iterations"] == 2 and manifest["seed"] == 3


def test_cli_config_with_overrides(inputs, tmp_path):
    (inputs / "run.yaml").write_text(yaml.safe_dump({"task": "style-transfer", "style": "style.png",
                                                     "content": "content.png", "out": "st.png", "iterations": 5}))
    out = tmp_path / "override.png"
    code = main(["run", "--config", str(inputs / "run.yaml"), "--iters", "2", "--lambda", "0.5", "--out", str(out)])
    assert code == 0
    params = json.loads(manifest_path(out).read_text())["params"]
    assert params["iterations"] == 2 and params["content_weight"] == 0.5


def test_cli_exit_codes(inputs, tmp_path, capsys):
    assert main(["run", "style-transfer", "--style", str(inputs / "style.png"), "--out", str(tmp_path / "a.png")]) == 2
    assert "content" in capsys.readouterr().err
    assert main(["run", "texture", "--style", str(inputs / "missing.png"), "--out", str(tmp_path / "a.png")]) == 4
    assert main(["run", "texture", "--style", str(inputs / "style.png"), "--out", str(tmp_path / "a.png"),
                 "--backbone", str(tmp_path / "nothing.yaml")]) == 3
    assert "nothing.yaml" in capsys.readouterr().err


def test_cli_bench_empty(capsys):
    assert main(["bench", "--iterations", "--json"]) == 0
    assert capsys.readouterr().out.strip() == "[]"


def test_cli_finetune_vae(inputs, tmp_path, capsys):
    out = tmp_path / "dec.pt"
    assert main(["finetune-vae", "--style", str(inputs / "style.png"), "--steps", "3", "--out", str(out)]) == 0
    state = torch.load(out)
    assert "refine.weight" in state

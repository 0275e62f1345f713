import json
from pathlib import Path

import pytest

from convdissect import cli, micronet, shapeworld, tensorio


def run(*argv):
    return cli.main([str(a) for a in argv])


def _dir_snapshot(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_gen_data_twice_identical_trees(tmp_path):
    assert run("gen-data", "--seed", 7, "--per-class", 10, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--seed", 7, "--per-class", 10, "--out", tmp_path / "b") == 0
    assert _dir_snapshot(tmp_path / "a") == _dir_snapshot(tmp_path / "b")


def test_unknown_flag_exits_1(capsys):
    assert run("gen-data", "--bogus", "x", "--out", "/tmp/x") == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_1():
    assert run("explode") == 1


def test_dissect_missing_inputs_exits_1(tmp_path, capsys):
    assert run("dissect", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "error" in err


def test_dissect_empty_maps_dir_exits_1(tmp_path, capsys):
    (tmp_path / "maps").mkdir()
    code = run(
        "dissect", "--maps-old", tmp_path / "maps", "--maps-new", tmp_path / "maps",
        "--out", tmp_path / "out",
    )
    assert code == 1
    assert "no exported images" in capsys.readouterr().err


def test_config_file_precedence(tmp_path):
    cfgfile = tmp_path / "cfg.txt"
    cfgfile.write_text("per_class=11\nseed=9\n")
    assert run("gen-data", "--config", cfgfile, "--seed", 2, "--out", tmp_path / "d") == 0
    echoed = dict(
        line.split("=", 1)
        for line in (tmp_path / "d/config.txt").read_text().splitlines()
    )
    assert echoed["per_class"] == "11"  # from config file
    assert echoed["seed"] == "2"  # flag wins over config
    samples = shapeworld.load_dataset(tmp_path / "d")
    assert len(samples) == 6 * 11


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfgfile = tmp_path / "cfg.txt"
    cfgfile.write_text("plutonium=1\n")
    assert run("gen-data", "--config", cfgfile, "--out", tmp_path / "d") == 1
    assert "plutonium" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_pipeline(tmp_path_factory):
    """gen-data + train-base once for the CLI integration tests."""
    root = tmp_path_factory.mktemp("pipe")
    data = root / "data"
    model = root / "base"
    assert run("gen-data", "--seed", 5, "--per-class", 16, "--out", data) == 0
    assert (
        run(
            "train-base", "--data", data, "--seed", 5, "--epochs", 4,
            "--out", model,
        )
        == 0
    )
    return {"root": root, "data": data, "model": model}


def test_train_base_outputs(tiny_pipeline):
    model = micronet.load_model(tiny_pipeline["model"])
    assert model.num_classes == 4
    doc = json.loads((tiny_pipeline["model"] / "metrics.json").read_text())
    assert 0.0 <= doc["base_accuracy"] <= 1.0


def test_pda_export_and_report_heatmap(tiny_pipeline, tmp_path):
    data, model = tiny_pipeline["data"], tiny_pipeline["model"]
    maps = tmp_path / "maps"
    code = run(
        "pda", "--model", model, "--data", data, "--image-id", "circle_0012",
        "--window", 16, "--stride", 16, "--out", maps,
    )
    assert code == 0
    td = tensorio.TensorDir(maps / "circle_0012")
    assert "fm/micronet/1/0" in td and "gt/circle_0012" in td
    assert td.read("fm/micronet/1/0").shape == (64, 64)

    out = tmp_path / "rep"
    code = run(
        "report", "--maps", maps, "--image-id", "circle_0012",
        "--name", "fm/micronet/1/0", "--out", out,
    )
    assert code == 0
    assert (out / "heatmap.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")


def test_dissect_live_and_report_curves(tiny_pipeline, tmp_path):
    data, model = tiny_pipeline["data"], tiny_pipeline["model"]
    out = tmp_path / "diss"
    code = run(
        "dissect", "--model-old", model, "--model-new", model, "--data", data,
        "--sample-count" if False else "--sample-set-size", 4,
        "--window", 16, "--stride", 16, "--out", out,
    )
    assert code == 0
    doc = json.loads((out / "dissection.json").read_text())
    assert set(doc) == {"F", "per_image"}
    assert all(img["ious"] == [1.0] * 4 for img in doc["per_image"])

    rep = tmp_path / "rep"
    assert run("report", "--dissection", out / "dissection.json", "--out", rep) == 0
    svg = (rep / "iou_curves.svg").read_text()
    assert svg.count("<polyline") == 1 + len(doc["per_image"])  # mean + images


def test_increment_finetune_and_freeze_train(tiny_pipeline, tmp_path):
    data, model = tiny_pipeline["data"], tiny_pipeline["model"]
    inc = tmp_path / "inc"
    code = run(
        "increment", "--model", model, "--data", data, "--task-index", 1,
        "--strategy", "finetune", "--epochs", 1, "--out", inc,
    )
    assert code == 0
    grown = micronet.load_model(inc)
    assert grown.num_classes == 5
    plan = json.loads((inc / "plan.json").read_text())
    assert plan["strategy"] == "finetune" and plan["frozen_blocks"] == []

    frz = tmp_path / "frz"
    code = run(
        "freeze-train", "--model", model, "--data", data, "--task-index", 1,
        "--block", 3, "--epochs", 1, "--out", frz,
    )
    assert code == 0
    plan = json.loads((frz / "plan.json").read_text())
    assert plan["frozen_blocks"] == [1, 2] and plan["forgetting_block"] == 3
    before = micronet.load_model(tiny_pipeline["model"])
    after = micronet.load_model(frz)
    assert after.blocks[0].w.tobytes() == before.blocks[0].w.tobytes()
    assert after.blocks[1].w.tobytes() == before.blocks[1].w.tobytes()


def test_increment_bad_task_index(tiny_pipeline, tmp_path, capsys):
    code = run(
        "increment", "--model", tiny_pipeline["model"], "--data", tiny_pipeline["data"],
        "--task-index", 9, "--strategy", "finetune", "--out", tmp_path / "x",
    )
    assert code == 1
    assert "task index" in capsys.readouterr().err


def test_report_without_inputs_exits_1(tmp_path):
    assert run("report", "--out", tmp_path) == 1

import json

import pytest

from segrobust.cli import main, parse_eps
from segrobust.core import ConfigError

SMALL = ["--widths", "4,5", "--backbone-layers", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset, both backbones and a PIR-style model, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    argv_sets = [
        ["gen", "--out", root / "data", "--n-train", 6, "--n-val", 3, "--n-pretrain", 4,
         "--size", 16],
        ["pretrain", "--data", root / "data", "--out", root / "clean_bb.json", "--eps", 0,
         "--epochs", 1, *SMALL],
        ["pretrain", "--data", root / "data", "--out", root / "robust_bb.json", "--epochs", 1,
         *SMALL],
        ["train", "--data", root / "data", "--out", root / "pir", "--init", "robust",
         "--backbone", root / "robust_bb.json", "--epochs", 1, "--workers", 1, *SMALL],
        ["train", "--data", root / "data", "--out", root / "at", "--backbone",
         root / "clean_bb.json", "--epochs", 1, "--workers", 1, *SMALL],
    ]
    for argv in argv_sets:
        assert main([str(a) for a in argv]) == 0, argv
    return root


def test_parse_eps():
    assert parse_eps("0,8/255, 0.1") == [0.0, 8 / 255, 0.1]
    for bad in ("", "x", "1/0", "0.6", "-1/255"):
        with pytest.raises(ConfigError):
            parse_eps(bad)


def test_gen_layout(workspace):
    for split in ("train", "val", "pretrain"):
        manifest = json.loads((workspace / "data" / split / "manifest.json").read_text())
        assert manifest["split"] == split
        assert (workspace / "data" / split / manifest["images"][0]["mask"]).exists()
    assert json.loads((workspace / "robust_bb.json").read_text())["provenance"] == "adv-pretrained"
    assert (workspace / "pir" / "train_log.jsonl").exists()


def test_sea_end_to_end(workspace, capsys):
    out = workspace / "sea"
    code, stdout, _ = run(capsys, "sea", "--data", workspace / "data", "--model",
                          workspace / "pir" / "model.json", "--out", out, "--eps", "0,8/255",
                          "--iters", 10, "--max-images", 2, "--baselines", "segpgd",
                          "--workers", 1)
    assert code == 0 and json.loads(stdout)["command"] == "sea"
    report = json.loads((out / "sea.json").read_text())
    assert report["config"]["iters"] == 10 and report["config"]["seed"] == 0
    zero, eight = report["table"]
    for cell in zero["cells"].values():
        assert cell["aacc"] == pytest.approx(report["clean"]["aacc"])
        assert cell["miou"] == pytest.approx(report["clean"]["miou"])
    assert set(eight["cells"]) == {"mce", "mce-bal", "js", "segpgd", "SEA"}
    sea = eight["cells"]["SEA"]
    assert sea["aacc"] <= min(eight["cells"][k]["aacc"] for k in ("mce", "mce-bal", "js"))
    header = (out / "sea.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["epsilon", "attack", "aacc", "miou", "balanced_acc"]
    assert header[5:] == [f"iou_{s}" for s in range(6)]


def test_other_commands(workspace, capsys):
    data, model = workspace / "data", workspace / "pir" / "model.json"
    common = ["--data", data, "--model", model, "--max-images", 2, "--workers", 1]
    assert run(capsys, "attack", *common, "--out", workspace / "atk", "--iters", 10,
               "--loss", "mce-bal")[0] == 0
    assert run(capsys, "ablate", *common, "--out", workspace / "abl", "--iters", 12,
               "--runs", 1, "--eps", "8/255")[0] == 0
    abl = json.loads((workspace / "abl" / "ablate.json").read_text())
    assert [r["setting"] for r in abl["rows"]] == ["const-eps x1", "const-eps 3x4", "red-eps"]
    assert run(capsys, "transfer", *common, "--out", workspace / "tr", "--iters", 10,
               "--targets", workspace / "at" / "model.json")[0] == 0
    rows = json.loads((workspace / "tr" / "transfer.json").read_text())["rows"]
    assert [r["kind"] for r in rows] == ["white-box", "transfer"]
    code, _, _ = run(capsys, "report", "--input", workspace / "atk" / "attack.json",
                     "--out", workspace / "rep", "--masks", 1, "--data", data, "--model", model,
                     "--iters", 10, "--workers", 1)
    assert code == 0
    assert (workspace / "rep" / "attack.md").exists()
    assert len(list((workspace / "rep").glob("masks_*.png"))) == 1


def test_zero_radius_attack_is_clean(workspace, capsys):
    out = workspace / "zero"
    assert run(capsys, "attack", "--data", workspace / "data", "--model",
               workspace / "at" / "model.json", "--out", out, "--eps", 0, "--iters", 10,
               "--workers", 1)[0] == 0
    report = json.loads((out / "attack.json").read_text())
    assert report["rows"][0]["aacc"] == report["clean"]["aacc"]


def test_error_records(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "sea", "--data", tmp_path / "missing", "--model",
                       workspace / "pir" / "model.json", "--out", tmp_path / "o")
    record = json.loads(err)
    assert code == 2 and record["error"] == "ConfigError"
    assert json.loads((tmp_path / "o" / "error.json").read_text()) == record
    code, _, err = run(capsys, "attack", "--data", workspace / "data", "--model",
                       workspace / "pir" / "model.json", "--out", tmp_path / "o2",
                       "--loss", "hinge")
    assert code == 2 and "hinge" in json.loads(err)["message"]
    code, _, err = run(capsys, "sea", "--data", workspace / "data")
    assert code == 2 and "--model" in json.loads(err)["message"]


def test_config_file_and_flag_override(workspace, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(workspace / "data"), "iters": 20, "eps": "4/255",
                               "model": str(workspace / "pir" / "model.json"),
                               "max_images": 1, "workers": 1}))
    code, _, _ = run(capsys, "attack", "--config", cfg, "--iters", 10, "--out", tmp_path / "a")
    report = json.loads((tmp_path / "a" / "attack.json").read_text())
    assert code == 0 and report["config"]["iters"] == 10
    assert report["rows"][0]["epsilon"] == pytest.approx(4 / 255)
    cfg.write_text(json.dumps({"data": "x", "itres": 5}))
    code, _, err = run(capsys, "attack", "--config", cfg, "--out", tmp_path / "b")
    assert code == 2 and "itres" in json.loads(err)["message"]
    cfg.write_text(json.dumps({"iters": "many"}))
    assert run(capsys, "attack", "--config", cfg, "--out", tmp_path / "c")[0] == 2


def test_robust_init_rejects_clean_backbone(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", workspace / "data", "--out", tmp_path,
                       "--init", "robust", "--backbone", workspace / "clean_bb.json", *SMALL)
    assert code == 2 and "adv-pretrained" in json.loads(err)["message"]


def test_report_rejects_non_report(tmp_path, capsys):
    bad = tmp_path / "x.json"
    bad.write_text("{}")
    assert run(capsys, "report", "--input", bad)[0] == 2

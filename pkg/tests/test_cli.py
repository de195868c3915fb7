import json
from pathlib import Path
from xml.etree import ElementTree

import pytest

from tdet.cli import main, render_svg


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One gen -> split -> train -> eval x2 pipeline shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {"image_size": 16, "object_size": [6, 8], "velocity": [0.3, 0.8],
           "num_occluders": 1, "occluder_size": [7, 9], "num_frames": 10,
           "seed": 0}
    cfg_path = root / "scene.json"
    cfg_path.write_text(json.dumps(cfg))
    assert run("gen", "--config", str(cfg_path), "--out", str(root / "ds"),
               "--videos", "2", "--seed", "5") == 0
    assert run("split", "--data", str(root / "ds"), "--out", str(root / "sp")) == 0
    assert run("train", "--data", str(root / "sp" / "train"),
               "--out", str(root / "run"), "--input-size", "16",
               "--epochs", "1", "--steps-per-epoch", "3", "--seq-len", "3",
               "--pretrain-epochs", "0") == 0
    for mode in ("plain", "sequenced"):
        assert run("eval", "--model", str(root / "run" / "best.ckpt"),
                   "--data", str(root / "sp" / "test"), "--mode", mode,
                   "--report", str(root / f"rep_{mode}")) == 0
    return root


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert run("frobnicate") == 1

    def test_missing_required_flag_is_usage_error(self):
        assert run("gen") == 1

    def test_runtime_failure(self, tmp_path):
        assert run("eval", "--model", str(tmp_path / "missing.ckpt"),
                   "--data", str(tmp_path), "--mode", "plain",
                   "--report", str(tmp_path / "r")) == 2

    def test_help_exits_zero(self):
        assert run("--help") == 0


class TestArtifacts:
    def test_dataset_layout(self, workspace):
        ds = workspace / "ds"
        assert (ds / "config.json").exists()
        assert (ds / "manifest.json").exists()
        vids = sorted(p.name for p in ds.iterdir() if p.is_dir())
        assert vids == ["video_000", "video_001"]
        assert (ds / "video_000" / "gt.txt").exists()

    def test_manifest_records_seed_and_version(self, workspace):
        manifest = json.loads((workspace / "ds" / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 5
        assert manifest["version"]
        assert "num_frames" in manifest["config"]

    def test_split_layout(self, workspace):
        assert (workspace / "sp" / "train" / "video_000").is_dir()
        assert (workspace / "sp" / "test" / "video_000").is_dir()

    def test_train_artifacts(self, workspace):
        run_dir = workspace / "run"
        for name in ("manifest.json", "final.ckpt", "best.ckpt", "loss.csv",
                     "train_config.json"):
            assert (run_dir / name).exists()
        assert (run_dir / "best.ckpt").read_bytes() == \
            (run_dir / "final.ckpt").read_bytes()

    def test_eval_report_files(self, workspace):
        rep = workspace / "rep_sequenced"
        assert (rep / "report.json").exists()
        for variant in ("all", "hidden", "visible"):
            assert (rep / f"curve_{variant}.csv").exists()
            assert (rep / f"curve_{variant}.svg").exists()
        assert (rep / "proneness.csv").exists()

    def test_compare_prints_table_and_writes_overlays(self, workspace, capsys, tmp_path):
        out = tmp_path / "cmp"
        assert run("compare", str(workspace / "rep_plain"),
                   str(workspace / "rep_sequenced"), "--out", str(out)) == 0
        table = capsys.readouterr().out
        for key in ("ap_all", "ap_hidden", "ap_visible"):
            assert key in table
        assert (out / "curve_all.svg").exists()
        assert (out / "proneness.svg").exists()

    def test_plot_from_report_dir(self, workspace, tmp_path):
        out = tmp_path / "plots"
        assert run("plot", "--report", str(workspace / "rep_plain"),
                   "--out", str(out)) == 0
        assert (out / "curve_all.svg").exists()


class TestReproducibility:
    def test_gen_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen", "--out", str(tmp_path / name), "--videos", "1",
                       "--seed", "9") == 0
        a, b = tmp_path / "a", tmp_path / "b"
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestSvg:
    def test_well_formed_xml(self, tmp_path):
        path = tmp_path / "p.svg"
        render_svg(path, [("x", [(0.0, 0.0), (0.5, 0.7), (1.0, 1.0)], "#000")],
                   "Recall", "Precision", title="t")
        root = ElementTree.parse(path).getroot()
        assert root.tag.endswith("svg")
        polylines = [e for e in root.iter() if e.tag.endswith("polyline")]
        assert len(polylines) == 1

    def test_empty_series_still_renders_axes(self, tmp_path):
        path = tmp_path / "e.svg"
        render_svg(path, [], "Recall", "Precision")
        assert ElementTree.parse(path).getroot().tag.endswith("svg")

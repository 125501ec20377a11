"""CLI and pipeline behavior: exit codes, config validation, idempotence."""

import json
import os

import numpy as np
import pytest

from voxreason.cli import main
from voxreason.pipeline import ConfigError, load_config, merge_config, run_pipeline


TINY = {
    "scenes": {"count": 3, "rooms": [1, 2], "objects_per_room": [2, 3],
               "resolution": 24, "palette_size": 6},
    "render": {"width": 16, "height": 16, "waypoints": 2,
               "samples_per_ray": 32, "focal_px": 14.0},
    "fit": {"iterations": 40, "feature_iterations": 20, "rays_per_batch": 256},
    "bench": {"questions": 25, "train_questions": 20, "split": [1, 1, 1]},
    "relnet": {"epochs": 1},
    "eval": {"evaluator": "geometric"},
}


def write_config(tmp_path, overrides=None, **extra):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(extra)
    if overrides:
        for k, v in overrides.items():
            cfg.setdefault(k, {}).update(v)
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return str(p)


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"scenes": {"coun": 3}}))
        with pytest.raises(ConfigError, match="scenes.coun"):
            load_config(str(p))

    def test_unknown_top_level_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"sceness": {}}))
        with pytest.raises(ConfigError, match="sceness"):
            load_config(str(p))

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"scenes": \n !}')
        with pytest.raises(ConfigError, match=":2"):
            load_config(str(p))

    def test_defaults_filled(self):
        cfg = merge_config({"seed": 9})
        assert cfg["seed"] == 9
        assert cfg["render"]["feature_dim"] == 16
        assert cfg["bench"]["split"] == [7, 1, 2]

    def test_cli_exit_code_2_on_bad_config(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"scenes": {"bogus": 1}}))
        rc = main(["--config", str(p), "synth"])
        assert rc == 2
        assert "config error" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("pipe"))
    cfg = merge_config(json.loads(json.dumps(TINY)))
    cfg["seed"] = 3
    cfg["out_dir"] = out
    logs = []
    run_pipeline(cfg, log=logs.append)
    return out, cfg, logs


class TestPipeline:
    def test_all_artifacts_exist(self, pipeline_dir):
        out, cfg, _ = pipeline_dir
        for rel in ["vocab.json", "scenes/scene_0000.json", "grids/scene_0000.vxg",
                    "views/scene_0000/poses.json", "models/scene_0000/model.json",
                    "ground/scene_0000.jsonl", "bench/dataset.jsonl",
                    "bench/stats.json", "eval/report.json", "eval/report.txt"]:
            assert os.path.exists(os.path.join(out, rel)), rel

    def test_rerun_is_noop(self, pipeline_dir):
        out, cfg, _ = pipeline_dir
        before = {}
        for root, _, files in os.walk(out):
            for f in files:
                p = os.path.join(root, f)
                before[p] = os.path.getmtime(p)
        logs = []
        run_pipeline(cfg, log=logs.append)
        assert all("up to date" in l for l in logs if l.startswith("["))
        for p, t in before.items():
            assert os.path.getmtime(p) == t, f"{p} was rewritten"

    def test_eval_report_consistency(self, pipeline_dir):
        out, _, _ = pipeline_dir
        with open(os.path.join(out, "eval", "report.json")) as f:
            rep = json.load(f)
        total_c = sum(v["correct"] for v in rep["per_type"].values())
        total_n = sum(v["count"] for v in rep["per_type"].values())
        assert rep["overall"]["count"] == total_n
        assert rep["overall"]["correct"] == total_c
        if total_n:
            assert abs(rep["overall"]["accuracy"] - total_c / total_n) < 1e-12
        for v in rep["per_type"].values():
            if v["count"]:
                assert 0.0 <= v["accuracy"] <= 1.0

    def test_dataset_answers_match_program_reexecution(self, pipeline_dir):
        out, cfg, _ = pipeline_dir
        from voxreason.benchgen import SceneGraphEnv, load_dataset, symbolic_answer
        from voxreason.scene import GroundTruthGrids, SceneGraph

        records = load_dataset(os.path.join(out, "bench", "dataset.jsonl"))
        scenes = {}
        for i in range(cfg["scenes"]["count"]):
            s = SceneGraph.load(os.path.join(out, "scenes", f"scene_{i:04d}.json"))
            g = GroundTruthGrids.load(os.path.join(out, "grids", f"scene_{i:04d}.vxg"), s)
            scenes[s.scene_id] = SceneGraphEnv(s, grids=g)
        for rec in records[:10]:
            env = scenes[rec.scene_id]
            assert symbolic_answer(rec.program, env.scene, env=env) == rec.answer

    def test_ask_command(self, pipeline_dir, capsys):
        out, cfg, _ = pipeline_dir
        cfgp = os.path.join(out, "cfg.json")
        raw = json.loads(json.dumps(TINY))
        raw["seed"] = 3
        raw["out_dir"] = out
        with open(cfgp, "w") as f:
            json.dump(raw, f)
        rc = main(["--config", cfgp, "ask", "How many rooms are there in the scene?"])
        assert rc == 0
        got = json.loads(capsys.readouterr().out)
        assert got["answer"].isdigit()

    def test_ask_program_form(self, pipeline_dir, capsys):
        out, cfg, _ = pipeline_dir
        cfgp = os.path.join(out, "cfg.json")
        rc = main(["--config", cfgp, "ask", '(exist (get_instance (filter SCENE "chair")))'])
        assert rc == 0
        assert json.loads(capsys.readouterr().out)["answer"] in ("yes", "no")

    def test_corrupt_grids_magic_error(self, pipeline_dir):
        out, cfg, _ = pipeline_dir
        from voxreason.scene import GroundTruthGrids, SceneGraph
        from voxreason.vxg import FormatError

        gp = os.path.join(out, "grids", "scene_0000.vxg")
        s = SceneGraph.load(os.path.join(out, "scenes", "scene_0000.json"))
        raw = open(gp, "rb").read()
        bad = os.path.join(out, "grids", "corrupt.vxg")
        open(bad, "wb").write(b"XXXX" + raw[4:])
        with pytest.raises(FormatError, match="corrupt.vxg"):
            GroundTruthGrids.load(bad, s)

    def test_missing_upstream_reports_stage(self, tmp_path):
        cfg = merge_config(json.loads(json.dumps(TINY)))
        cfg["out_dir"] = str(tmp_path / "empty")
        from voxreason.pipeline import StageError

        with pytest.raises(StageError, match="eval"):
            run_pipeline(cfg, log=lambda m: None, only="eval")

    def test_stage_failure_exit_code_3(self, tmp_path, capsys):
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps({"out_dir": str(tmp_path / "o")}))
        rc = main(["--config", str(cfgp), "eval"])
        assert rc == 3

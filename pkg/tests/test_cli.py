import csv
import hashlib
import json
import re
import shutil
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from treecrop import cli
from treecrop.raster import RasterStack, load_mask
from treecrop.rstk import read_array
from treecrop.stca import argmax_uncertainty, mc_moments


def digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["run", "--out", str(out)]) == 0
    return out


class TestPipeline:
    def test_every_stage_leaves_artifacts(self, pipeline):
        for rel in ("synth/scenes.json", "norm/year_0.rstk", "stca/model.pset",
                    "infer/year_1.field.rstk", "grow/year_1.map.rstk", "castc/clusters.clus",
                    "density/year_0.class.rstk", "sample/points.csv", "evaluate/accuracy.json",
                    "report/summary.json"):
            assert (pipeline / rel).is_file(), rel

    def test_every_artifact_has_provenance(self, pipeline):
        files = [p for p in pipeline.rglob("*") if p.is_file() and not p.name.endswith(".prov.json")]
        for p in files:
            prov = json.loads(p.with_name(p.name + ".prov.json").read_text())
            assert prov["seed"] == 0
            assert len(prov["config_sha256"]) == 64
        grow = json.loads((pipeline / "grow/year_0.map.rstk.prov.json").read_text())
        assert [op["op"] for op in grow["operations"]] == [
            "assemble_classmap", "temporal_persistence", "apply_external_mask",
            "uncertainty_filter"]
        assert "infer/year_0.field.rstk" in grow["inputs"]

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        assert cli.main(["run", "--out", str(tmp_path)]) == 0
        assert digests(tmp_path) == digests(pipeline)

    def test_curves_are_epoch_value_csv(self, pipeline):
        for rel in ("stca/train_loss.csv", "stca/val_loss.csv", "castc/pretrain_loss.csv",
                    "castc/kl.csv"):
            rows = list(csv.reader(open(pipeline / rel)))
            assert rows[0] == ["epoch", "value"]
            assert [int(r[0]) for r in rows[1:]] == list(range(len(rows) - 1))

    def test_stored_runs_reproduce_field(self, pipeline):
        _, runs = read_array(pipeline / "infer/year_0.runs.rstk")
        field = RasterStack.load(pipeline / "infer/year_0.field.rstk").values[0]
        mean, std = mc_moments(runs)
        np.testing.assert_allclose(field[:-1], mean, atol=1e-6)
        np.testing.assert_allclose(field[-1], argmax_uncertainty(mean, std, axis=0), atol=1e-6)

    def test_density_scores_are_exact(self, pipeline):
        report = json.loads((pipeline / "density/year_1.json").read_text())
        assert report["components"]
        for comp in report["components"]:
            s = Fraction(comp["score_exact"])
            assert s == Fraction(comp["n_high"], comp["n_all"])
            assert comp["label"] == ("high" if s >= Fraction(1, 2) else "low")

    def test_area_estimates_sum_to_total(self, pipeline):
        acc = json.loads((pipeline / "evaluate/accuracy.json").read_text())
        areas = acc["area_estimates"]
        assert sum(Fraction(a) for a in areas["area_exact"]) == areas["total_area"]
        design = json.loads((pipeline / "sample/design.json").read_text())
        assert areas["total_area"] == sum(design["strata_areas"])

    def test_maps_are_persistent(self, pipeline):
        a = load_mask(pipeline / "grow/year_0.map.rstk")
        b = load_mask(pipeline / "grow/year_1.map.rstk")
        assert np.all(b[a == 1] != 0) and np.all(b[a == 1] != 3)


class TestErrors:
    def test_invalid_thresholds(self, pipeline, capsys):
        before = digests(pipeline)
        code = cli.main(["grow", "--out", str(pipeline), "--seed-threshold", "0.3",
                         "--neighbor-low", "0.5"])
        assert code == cli.EXIT_CONFIG
        assert "invalid thresholds" in capsys.readouterr().err
        assert digests(pipeline) == before

    def test_missing_input_names_path(self, tmp_path, capsys):
        assert cli.main(["grow", "--out", str(tmp_path)]) == cli.EXIT_INPUT
        assert str(tmp_path / "synth" / "scenes.json") in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        code = cli.main(["synth", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)])
        assert code == cli.EXIT_INPUT
        assert "none.ini" in capsys.readouterr().err

    @pytest.mark.parametrize("text", ["no header", "[stca]\nepochs = many\n",
                                      "[stca]\nbogus = 1\n", "[nowhere]\nx = 1\n",
                                      "[synth]\nmixture = 0.5, 0.5, 0.5, 0.5\n"])
    def test_config_errors(self, tmp_path, text):
        ini = tmp_path / "c.ini"
        ini.write_text(text)
        cmd = "train-stca" if "stca" in text else "synth"
        assert cli.main([cmd, "--config", str(ini), "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, pipeline, tmp_path):
        for d in ("synth", "norm"):
            shutil.copytree(pipeline / d, tmp_path / d)
        code = cli.main(["train-stca", "--out", str(tmp_path), "--epochs", "1", "--lr", "1e30"])
        assert code == cli.EXIT_DIVERGED
        assert not (tmp_path / "stca" / "model.pset").exists()


class TestConfig:
    def test_stage_seeds_are_independent_substreams(self):
        seeds = {cli.stage_seed(0, s) for s in cli.STAGES}
        assert len(seeds) == len(cli.STAGES)
        assert cli.stage_seed(0, "synth") == cli.stage_seed(0, "synth")
        assert cli.stage_seed(1, "synth") != cli.stage_seed(0, "synth")

    def test_overrides_change_the_hash(self):
        a = cli.config_digest(cli.load_config())
        b = cli.config_digest(cli.load_config(overrides={("stca", "runs"): 7}))
        assert a != b
        assert cli.load_config(overrides={("stca", "runs"): 7})["stca"]["runs"] == "7"

    def test_seed_flag_changes_outputs(self, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["synth", "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
        a = (tmp_path / "a/synth/year_0.rstk").read_bytes()
        b = (tmp_path / "b/synth/year_0.rstk").read_bytes()
        assert a != b
        prov = json.loads((tmp_path / "b/synth/year_0.rstk.prov.json").read_text())
        assert prov["seed"] == 5

    def test_readme_lists_the_defaults(self, tmp_path):
        readme = (Path(__file__).parents[1] / "README.md").read_text()
        ini = tmp_path / "readme.ini"
        ini.write_text(re.search(r"```ini\n(.*?)```", readme, re.S).group(1))
        cfg = cli.load_config(ini)
        cli.validate_config(cfg)
        assert {s: dict(cfg[s]) for s in cfg.sections()} == cli.DEFAULTS

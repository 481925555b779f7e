import csv
import json
import os

import pytest

from patchgraph.cli import main

TINY_MODEL = ["--set", "model.n=8", "--set", "model.k=2",
              "--set", "model.arch=gcn", "--set", "model.featurizer=fixed_hist"]
TINY_SYNTH = ["--set", "synth.scenes=2", "--set", "synth.lights=2",
              "--set", "synth.signs=2", "--set", "synth.poles=1",
              "--set", "synth.windows=0", "--set", "synth.occlusion=0",
              "--set", "synth.sigma_loc=0.05", "--set", "synth.max_pairs=40"]
TINY_TRAIN = ["--set", "train.epochs=2", "--set", "train.batch=8",
              "--set", "train.lr=0.002"]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth + train run shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run = str(root / "run")
    assert main(["synth", "--seed", "3", "--out", data]
                + TINY_SYNTH + TINY_MODEL) == 0
    assert main(["train", "--seed", "3", "--data", data, "--out", run]
                + TINY_SYNTH + TINY_MODEL + TINY_TRAIN) == 0
    return {"data": data, "run": run,
            "checkpoint": os.path.join(run, "model.json")}


class TestSynth:
    def test_dataset_files_exist(self, workspace):
        data = workspace["data"]
        assert os.path.exists(os.path.join(data, "manifest.jsonl"))
        assert os.path.exists(os.path.join(data, "pairs.csv"))
        assert os.path.isdir(os.path.join(data, "images"))

    def test_report_is_stamped(self, workspace):
        rep = read_json(os.path.join(workspace["data"], "synth_report.json"))
        assert rep["scenes"] == 2
        assert rep["frames"] == 4
        assert rep["pairs"] == rep["matched"] + rep["unmatched"]
        assert rep["matched"] > 0 and rep["unmatched"] > 0
        assert len(rep["config_hash"]) == 16
        assert rep["seed"] == 3
        assert "version" in rep

    def test_same_seed_same_pairs(self, workspace, tmp_path):
        other = str(tmp_path / "again")
        assert main(["synth", "--seed", "3", "--out", other]
                    + TINY_SYNTH + TINY_MODEL) == 0
        a = open(os.path.join(workspace["data"], "pairs.csv")).read()
        b = open(os.path.join(other, "pairs.csv")).read()
        assert a == b


class TestTrain:
    def test_checkpoint_and_history(self, workspace):
        run = workspace["run"]
        assert os.path.exists(workspace["checkpoint"])
        assert os.path.exists(workspace["checkpoint"] + ".config.json")
        header, rows = read_csv(os.path.join(run, "loss_history.csv"))
        assert header == ["epoch", "loss"]
        assert len(rows) == 2
        assert [r[0] for r in rows] == ["1", "2"]
        float(rows[0][1])  # parses

    def test_report_contents(self, workspace):
        rep = read_json(os.path.join(workspace["run"], "train_report.json"))
        assert rep["epochs"] == 2
        assert rep["pairs"] > 0
        assert isinstance(rep["final_loss"], float)


class TestEval:
    def test_perfect_oracle_is_perfect(self, workspace, tmp_path):
        out = str(tmp_path / "ev")
        assert main(["eval", "--data", workspace["data"], "--out", out,
                     "--perfect-oracle"] + TINY_MODEL) == 0
        rep = read_json(os.path.join(out, "eval_report.json"))
        assert rep["precision"] == 1.0
        assert rep["recall"] == 1.0
        assert rep["f1"] == 1.0
        assert rep["auc"] == 1.0
        assert rep["perfect_oracle"] is True
        assert rep["fn"] == 0 and rep["fp"] == 0

    def test_trained_checkpoint_runs(self, workspace, tmp_path):
        out = str(tmp_path / "ev")
        assert main(["eval", "--data", workspace["data"], "--out", out,
                     "--checkpoint", workspace["checkpoint"]]) == 0
        header, rows = read_csv(os.path.join(out, "eval_pairs.csv"))
        assert header == ["patch_a", "patch_b", "label", "score", "decision"]
        assert rows
        for _, _, label, score, decision in rows:
            assert label in ("0", "1") and decision in ("0", "1")
            assert 0.0 <= float(score) <= 1.0
        mheader, mrows = read_csv(os.path.join(out, "metrics.csv"))
        assert mheader == ["metric", "value"]
        assert [r[0] for r in mrows] == ["precision", "recall", "f1", "auc",
                                         "tp", "fp", "fn", "tn"]

    def test_missing_checkpoint_is_usage_error(self, workspace, tmp_path,
                                               capsys):
        rc = main(["eval", "--data", workspace["data"],
                   "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "--checkpoint" in capsys.readouterr().err


class TestMatch:
    def test_scores_all_cross_pairs(self, workspace, tmp_path):
        out = str(tmp_path / "m")
        assert main(["match", "--data", workspace["data"], "--out", out,
                     "--checkpoint", workspace["checkpoint"],
                     "--frame-a", "s000/a", "--frame-b", "s000/b"]) == 0
        header, rows = read_csv(os.path.join(out, "matches.csv"))
        assert header == ["patch_a", "patch_b", "score", "decision"]
        rep = read_json(os.path.join(out, "match_report.json"))
        assert rep["pairs"] == len(rows)
        assert all(r[0].startswith("s000/a/") for r in rows)
        assert all(r[1].startswith("s000/b/") for r in rows)

    def test_unknown_frame_id(self, workspace, tmp_path, capsys):
        rc = main(["match", "--data", workspace["data"],
                   "--out", str(tmp_path / "m"),
                   "--checkpoint", workspace["checkpoint"],
                   "--frame-a", "s000/a", "--frame-b", "zz"])
        assert rc == 1
        assert "zz" in capsys.readouterr().err


class TestPlace:
    def test_end_to_end(self, workspace, tmp_path):
        out = str(tmp_path / "p")
        assert main(["place", "--data", workspace["data"], "--out", out,
                     "--checkpoint", workspace["checkpoint"],
                     "--set", "place.iters=50"]) == 0
        header, rows = read_csv(os.path.join(out, "place_pairs.csv"))
        assert header == ["frame_a", "frame_b", "score", "decision",
                          "same_place"]
        rep = read_json(os.path.join(out, "place_report.json"))
        # 4 frames -> 6 unordered pairs, half held out for tuning
        assert rep["total_pairs"] == 6
        assert rep["evaluated_pairs"] == len(rows) == 3
        assert 0.0 <= rep["accuracy"] <= 1.0
        assert isinstance(rep["threshold"], float)

    def test_fixed_threshold_skips_tuning(self, workspace, tmp_path):
        out = str(tmp_path / "p")
        assert main(["place", "--data", workspace["data"], "--out", out,
                     "--checkpoint", workspace["checkpoint"],
                     "--set", "place.tune=false",
                     "--set", "place.gamma_f=0.25",
                     "--set", "place.iters=50"]) == 0
        rep = read_json(os.path.join(out, "place_report.json"))
        assert rep["threshold"] == 0.25
        assert rep["evaluated_pairs"] == 6  # nothing held out


class TestStereo:
    def test_oracle_depths_are_exact(self, tmp_path):
        out = str(tmp_path / "s")
        assert main(["stereo", "--seed", "11", "--out", out,
                     "--set", "stereo.oracle_match=true",
                     "--set", "stereo.landmarks=4"] + TINY_MODEL) == 0
        rep = read_json(os.path.join(out, "stereo_report.json"))
        assert rep["valid"] > 0
        assert rep["rmse_m"] < 1e-6  # rectified views, exact boxes
        header, rows = read_csv(os.path.join(out, "stereo.csv"))
        assert header == ["left_patch", "right_patch", "score",
                          "disparity_px", "valid", "depth_m", "true_depth_m",
                          "abs_error_m"]
        for row in rows:
            if row[4] == "1":
                assert abs(float(row[5]) - float(row[6])) < 1e-6

    def test_depth_range_respected(self, tmp_path):
        out = str(tmp_path / "s")
        assert main(["stereo", "--seed", "5", "--out", out,
                     "--set", "stereo.oracle_match=true",
                     "--set", "stereo.depth_min=9",
                     "--set", "stereo.depth_max=11"] + TINY_MODEL) == 0
        _, rows = read_csv(os.path.join(out, "stereo.csv"))
        for row in rows:
            if row[6]:
                assert 9.0 <= float(row[6]) <= 11.0


class TestAblate:
    def test_grid_rows(self, workspace, tmp_path):
        out = str(tmp_path / "a")
        assert main(["ablate", "--data", workspace["data"], "--out", out,
                     "--set", "train.epochs=1", "--set", "train.batch=8"]
                    + TINY_MODEL) == 0
        header, rows = read_csv(os.path.join(out, "ablation.csv"))
        assert header == ["pairing", "discriminator", "auc", "f1",
                          "precision", "recall"]
        combos = {(r[0], r[1]) for r in rows}
        assert len(rows) == 15  # 5 pairings x (bilinear + cosine + l2)
        assert ("phi_psi", "bilinear") in combos
        assert ("f_f", "l2") in combos
        rep = read_json(os.path.join(out, "ablation_report.json"))
        assert len(rep["rows"]) == 15


class TestVerifyTheory:
    ARGS = ["--set", "theory.kl_models=8", "--set", "theory.scaling_models=3",
            "--set", "theory.tv_models=8"]

    def test_passes_and_is_byte_identical(self, tmp_path):
        out1, out2 = str(tmp_path / "t1"), str(tmp_path / "t2")
        assert main(["verify-theory", "--seed", "7", "--out", out1]
                    + self.ARGS) == 0
        assert main(["verify-theory", "--seed", "7", "--out", out2]
                    + self.ARGS) == 0
        b1 = open(os.path.join(out1, "theory_report.json"), "rb").read()
        b2 = open(os.path.join(out2, "theory_report.json"), "rb").read()
        assert b1 == b2
        rep = json.loads(b1)
        assert rep["all_pass"] is True
        assert rep["kl_bound"]["min_margin"] >= -1e-9

    def test_different_seed_changes_report(self, tmp_path):
        out1, out2 = str(tmp_path / "t1"), str(tmp_path / "t2")
        main(["verify-theory", "--seed", "7", "--out", out1] + self.ARGS)
        main(["verify-theory", "--seed", "8", "--out", out2] + self.ARGS)
        r1 = read_json(os.path.join(out1, "theory_report.json"))
        r2 = read_json(os.path.join(out2, "theory_report.json"))
        assert r1["kl_bound"]["min_margin"] != r2["kl_bound"]["min_margin"]


class TestErrors:
    def test_config_problems_exit_2_and_list_keys(self, capsys):
        rc = main(["synth", "--set", "model.n=0", "--set", "bad.key=1"])
        assert rc == 2
        err = capsys.readouterr().err
        assert "model.n" in err
        assert "bad.key" in err

    def test_config_file_and_override_both_applied(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("theory.kl_models = 4\n")
        out = str(tmp_path / "t")
        assert main(["verify-theory", "--config", str(cfgfile), "--out", out,
                     "--set", "theory.scaling_models=2",
                     "--set", "theory.tv_models=4"]) == 0
        rep = read_json(os.path.join(out, "theory_report.json"))
        assert rep["kl_bound"]["models"] == 4
        assert rep["perturbation_scaling"]["models"] == 2

    def test_missing_dataset_exits_1(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "o")] + TINY_TRAIN)
        assert rc == 1
        assert "error" in capsys.readouterr().err

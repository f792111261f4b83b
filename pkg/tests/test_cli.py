"""End-to-end command-line checks: every subcommand exercised through
main() with argv lists, JSON captured from stdout, exit codes asserted."""

import json

import numpy as np
import pytest

from attnreg import cli, netpbm, synthdata

TINY_CONFIG = """\
# small model so the whole CLI suite stays fast
vit.patch_size = 4
vit.grid = 4x4
vit.embed_dim = 8
vit.num_layers = 2
vit.num_heads = 2
vit.num_classes = 2
vit.in_channels = 3
weights.alpha = 1.0
weights.beta = 1.0
epochs = 1
batch_size = 4
learning_rate = 0.05
seed = 0
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    rc = cli.main(["gen-data", "--out", str(out), "--samples", "6",
                   "--classes", "2", "--seed", "3",
                   "--height", "16", "--width", "16"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, config_file, dataset_dir):
    out = tmp_path_factory.mktemp("run") / "train_out"
    rc = cli.main(["train", "--config", str(config_file),
                   "--data", str(dataset_dir), "--out", str(out)])
    assert rc == 0
    return out


def run_json(capsys, argv):
    rc = cli.main(argv)
    out = capsys.readouterr().out
    return rc, json.loads(out)


class TestGenData:
    def test_writes_loadable_dataset(self, dataset_dir, capsys):
        rc, payload = run_json(capsys, ["gen-data", "--out", str(dataset_dir),
                                        "--samples", "6", "--classes", "2",
                                        "--seed", "3", "--height", "16",
                                        "--width", "16"])
        assert rc == 0
        assert payload["num_samples"] == 6
        samples, config = synthdata.load_dataset(dataset_dir)
        assert len(samples) == 6
        assert config.num_classes == 2

    def test_same_seed_same_bytes(self, tmp_path):
        dirs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["gen-data", "--out", str(out), "--samples", "4",
                             "--classes", "2", "--seed", "11",
                             "--height", "16", "--width", "16"]) == 0
            dirs.append(out)
        for rel in ("index.jsonl", "meta.json", "images/00000.ppm", "masks/00003.pgm"):
            assert (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes()

    def test_bad_class_count_exits_1(self, tmp_path):
        rc = cli.main(["gen-data", "--out", str(tmp_path / "x"),
                       "--samples", "2", "--classes", "99"])
        assert rc == 1


class TestTrain:
    def test_writes_artifacts_and_reports_final_loss(self, trained_dir, capsys):
        assert (trained_dir / "checkpoint.ckpt").is_file()
        assert (trained_dir / "log.jsonl").is_file()

    def test_stdout_reports_final_epoch(self, config_file, dataset_dir,
                                        tmp_path, capsys):
        rc, payload = run_json(capsys, ["train", "--config", str(config_file),
                                        "--data", str(dataset_dir),
                                        "--out", str(tmp_path / "t")])
        assert rc == 0
        assert payload["epochs"] == 1
        assert np.isfinite(payload["final"]["total"])

    def test_override_flags_change_the_saved_config(self, config_file, dataset_dir,
                                                    tmp_path):
        out = tmp_path / "o"
        rc = cli.main(["train", "--config", str(config_file),
                       "--data", str(dataset_dir), "--out", str(out),
                       "--alpha", "0", "--beta", "0", "--distance", "l2",
                       "--aug", "rot90,rot270", "--epochs", "2", "--lr", "0.01"])
        assert rc == 0
        text = (out / "train_config.txt").read_text()
        assert "weights.alpha = 0.0" in text
        assert "weights.distance = l2" in text
        assert "augmentations = rot90,rot270" in text
        assert "epochs = 2" in text

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_divergence_exits_2(self, config_file, dataset_dir, tmp_path, capsys):
        rc = cli.main(["train", "--config", str(config_file),
                       "--data", str(dataset_dir), "--out", str(tmp_path / "d"),
                       "--lr", "1e200", "--epochs", "2"])
        assert rc == 2
        assert "numerical failure" in capsys.readouterr().err


class TestEval:
    def test_refined_on(self, trained_dir, dataset_dir, capsys):
        rc, payload = run_json(capsys, ["eval", "--checkpoint",
                                        str(trained_dir / "checkpoint.ckpt"),
                                        "--data", str(dataset_dir),
                                        "--refined", "on"])
        assert rc == 0
        assert "refined" in payload and "unrefined" not in payload
        assert payload["num_images"] == 6
        miou = payload["refined"]["miou"]
        assert miou is None or 0.0 <= miou <= 1.0

    def test_refined_off_and_layer_range(self, trained_dir, dataset_dir, capsys):
        argv = ["eval", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
                "--data", str(dataset_dir), "--refined", "off",
                "--layers", "0..2", "--jobs", "2"]
        rc, payload = run_json(capsys, argv)
        assert rc == 0
        assert "unrefined" in payload and "refined" not in payload
        # colon spelling of the range is accepted too and agrees
        argv[argv.index("0..2")] = "0:2"
        rc2, payload2 = run_json(capsys, argv)
        assert rc2 == 0
        assert payload2 == payload

    def test_sweep_layers_table(self, trained_dir, dataset_dir, capsys):
        rc, payload = run_json(capsys, ["eval", "--checkpoint",
                                        str(trained_dir / "checkpoint.ckpt"),
                                        "--data", str(dataset_dir),
                                        "--sweep-layers"])
        assert rc == 0
        starts = [row["start_layer"] for row in payload["layer_sweep"]]
        assert starts == [0, 1]

    def test_missing_checkpoint_exits_1(self, dataset_dir, capsys):
        rc = cli.main(["eval", "--checkpoint", "/nonexistent.ckpt",
                       "--data", str(dataset_dir)])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestSeeds:
    def test_writes_both_maps_with_sidecars(self, trained_dir, dataset_dir,
                                            tmp_path, capsys):
        image = dataset_dir / "images" / "00000.ppm"
        rc, payload = run_json(capsys, ["seeds", "--checkpoint",
                                        str(trained_dir / "checkpoint.ckpt"),
                                        "--image", str(image),
                                        "--class", "1", "--out", str(tmp_path)])
        assert rc == 0
        assert len(payload["written"]) == 4
        pgms = sorted(p for p in payload["written"] if p.endswith(".pgm"))
        assert [p.rsplit("_", 1)[1] for p in pgms] == ["refined.pgm", "unrefined.pgm"]
        for p in pgms:
            values = netpbm.read_netpbm(p)
            assert values.shape == (4, 4)  # patch-grid resolution
        sidecars = [p for p in payload["written"] if p.endswith(".json")]
        flags = sorted(json.loads(open(p).read())["refined"] for p in sidecars)
        assert flags == [False, True]

    def test_out_of_range_class_exits_1(self, trained_dir, dataset_dir, tmp_path):
        rc = cli.main(["seeds", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
                       "--image", str(dataset_dir / "images" / "00000.ppm"),
                       "--class", "7", "--out", str(tmp_path)])
        assert rc == 1


class TestCheckInversion:
    @pytest.mark.parametrize("transform", ["fliph", "rot90", "fliphv"])
    def test_roundtrip_and_oracle_agree(self, transform, capsys):
        rc, payload = run_json(capsys, ["check-inversion", "--grid", "3x4",
                                        "--transform", transform, "--oracle",
                                        "--trials", "5"])
        assert rc == 0
        assert payload["roundtrip_error"] <= 1e-12
        assert payload["fast_vs_kronecker_error"] <= 1e-12

    def test_impossible_tolerance_exits_2(self):
        rc = cli.main(["check-inversion", "--grid", "2x2", "--transform", "rot90",
                       "--oracle", "--trials", "1", "--tolerance", "-1"])
        assert rc == 2

    def test_unknown_transform_exits_1(self, capsys):
        rc = cli.main(["check-inversion", "--grid", "2x2", "--transform", "swirl"])
        assert rc == 1
        assert "unknown transform" in capsys.readouterr().err


class TestGradCheck:
    def test_small_model_passes(self, config_file, capsys):
        rc, payload = run_json(capsys, ["grad-check", "--config", str(config_file),
                                        "--max-coords", "4"])
        assert rc == 0
        assert payload["passed"] is True
        assert payload["max_relative_error"] < 1e-4
        assert len(payload["checks"]) == 5


class TestAblate:
    def test_three_tables(self, config_file, dataset_dir, tmp_path, capsys):
        out = tmp_path / "tables"
        rc, payload = run_json(capsys, ["ablate", "--config", str(config_file),
                                        "--data", str(dataset_dir),
                                        "--out", str(out)])
        assert rc == 0
        assert [row["cell"] for row in payload["regularizer_grid"]] == \
            ["baseline", "act_only", "aff_only", "full"]
        assert [row["distance"] for row in payload["distance_sweep"]] == \
            ["l1", "l2", "smooth_l1"]
        assert len(payload["augmentation_sweep"]) == 4
        for name in ("regularizer_grid", "distance_sweep", "augmentation_sweep"):
            assert json.loads((out / f"{name}.json").read_text()) == payload[name]


class TestPlumbing:
    def test_usage_error_exits_1(self, capsys):
        assert cli.main(["train"]) == 1  # missing required flags
        assert cli.main(["no-such-command"]) == 1
        capsys.readouterr()

    def test_help_exits_0_and_documents_exit_codes(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "exit codes" in capsys.readouterr().out

    def test_pretty_indents_json(self, capsys):
        rc = cli.main(["check-inversion", "--grid", "2x2",
                       "--transform", "identity", "--pretty", "--trials", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("{\n  ")

    def test_acr_log_env_raises_verbosity(self, dataset_dir, tmp_path,
                                          monkeypatch, capsys):
        monkeypatch.setenv("ACR_LOG", "info")
        rc = cli.main(["gen-data", "--out", str(tmp_path / "v"), "--samples", "1",
                       "--classes", "1", "--seed", "0"])
        assert rc == 0
        assert "wrote 1 samples" in capsys.readouterr().err

    def test_default_logging_is_quiet(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("ACR_LOG", raising=False)
        rc = cli.main(["gen-data", "--out", str(tmp_path / "q"), "--samples", "1",
                       "--classes", "1", "--seed", "0"])
        assert rc == 0
        assert capsys.readouterr().err == ""

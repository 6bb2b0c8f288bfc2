import hashlib
import json
import subprocess
import sys

import pytest

from sslvit.cli import main

MICRO_CONFIG = {
    "vit": {"image_size": 8, "patch_size": 4, "channels": 1, "depth": 1, "heads": 2,
            "dim": 8, "mlp_ratio": 2.0, "out_dim": 4},
    "distill": {"global_size": 8, "local_size": 4, "num_local_views": 1,
                "epochs": 1, "steps_per_epoch": 2, "probe_size": 1},
    "retrieval": {"out_channels": 8, "epochs": 1, "steps_per_epoch": 2,
                  "classes_per_batch": 2, "samples_per_class": 2},
    "fewshot": {"n_augment": 10, "max_iter": 200},
    "data": {"num_classes": 3, "per_class": 6, "image_size": 8},
    "seed": 11,
}


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    report = None
    if captured.out.strip():
        lines = captured.out.strip().splitlines()
        assert len(lines) == 1, f"stdout must be single-line JSON, got: {captured.out!r}"
        report = json.loads(lines[0])
    return code, report, captured.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config_path(workdir):
    p = workdir / "config.json"
    p.write_text(json.dumps(MICRO_CONFIG))
    return str(p)


class TestSynth:
    def test_minimal_run(self, capsys, workdir, config_path):
        out = str(workdir / "data.svds")
        code, report, _ = run_cli(capsys, "synth", "--config", config_path,
                                  "--out", out)
        assert code == 0
        assert report["samples"] == 18
        assert open(out, "rb").read(4) == b"SVDS"

    def test_malformed_json_exit_2(self, capsys, workdir):
        bad = workdir / "bad.json"
        bad.write_text("{not json")
        code, report, err = run_cli(capsys, "synth", "--config", str(bad),
                                    "--out", str(workdir / "x.svds"))
        assert code == 2 and report is None
        assert "line 1" in err

    def test_same_seed_same_hash(self, capsys, workdir, config_path):
        hashes = []
        for name in ("r1.svds", "r2.svds"):
            out = str(workdir / name)
            code, report, _ = run_cli(capsys, "synth", "--config", config_path,
                                      "--out", out)
            assert code == 0
            hashes.append(sha(out))
            assert report["sha256"] == hashes[-1]
        assert hashes[0] == hashes[1]

    def test_seed_flag_overrides_config(self, capsys, workdir, config_path):
        out1, out2 = str(workdir / "s1.svds"), str(workdir / "s2.svds")
        run_cli(capsys, "synth", "--config", config_path, "--out", out1)
        code, _, _ = run_cli(capsys, "synth", "--config", config_path,
                             "--seed", "99", "--out", out2)
        assert code == 0
        assert sha(out1) != sha(out2)

    def test_missing_seed_exit_2(self, capsys, workdir):
        cfg = {k: v for k, v in MICRO_CONFIG.items() if k != "seed"}
        p = workdir / "noseed.json"
        p.write_text(json.dumps(cfg))
        code, _, err = run_cli(capsys, "synth", "--config", str(p),
                               "--out", str(workdir / "n.svds"))
        assert code == 2
        assert "seed" in err


@pytest.fixture(scope="module")
def dataset_path(workdir, config_path):
    out = str(workdir / "pipeline.svds")
    assert main(["synth", "--config", config_path, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def teacher_path(workdir, config_path, dataset_path):
    out = str(workdir / "teacher.svtc")
    assert main(["pretrain", "--config", config_path, "--data", dataset_path,
                 "--out", out]) == 0
    return out


class TestPretrain:
    def test_report_and_monotone_lambda(self, capsys, workdir, config_path,
                                        dataset_path):
        out = str(workdir / "t2.svtc")
        code, report, _ = run_cli(capsys, "pretrain", "--config", config_path,
                                  "--data", dataset_path, "--out", out)
        assert code == 0
        assert report["steps"] == 2
        log = json.load(open(report["log_out"]))
        lams = [rec["lambda"] for rec in log["steps"]]
        assert all(b >= a for a, b in zip(lams, lams[1:]))

    def test_rerun_identical_final_loss_and_hash(self, capsys, workdir, config_path,
                                                 dataset_path):
        results = []
        for name in ("d1.svtc", "d2.svtc"):
            out = str(workdir / name)
            code, report, _ = run_cli(capsys, "pretrain", "--config", config_path,
                                      "--data", dataset_path, "--out", out)
            assert code == 0
            results.append((report["final_loss"], sha(out)))
        assert results[0] == results[1]


class TestEmbed:
    def test_embed_store(self, capsys, workdir, dataset_path, teacher_path):
        out = str(workdir / "emb.ssle")
        code, report, _ = run_cli(capsys, "embed", "--model", teacher_path,
                                  "--data", dataset_path, "--out", out)
        assert code == 0
        assert report["rows"] == 18 and report["dim"] == 8

    def test_missing_model_exit_1(self, capsys, workdir, dataset_path):
        code, _, err = run_cli(capsys, "embed", "--model", str(workdir / "ghost.svtc"),
                               "--data", dataset_path, "--out", str(workdir / "g.ssle"))
        assert code == 1
        assert "error" in err


class TestFewshot:
    def test_report(self, capsys, workdir, config_path, dataset_path, teacher_path):
        emb = str(workdir / "fs.ssle")
        assert main(["embed", "--model", teacher_path, "--data", dataset_path,
                     "--out", emb]) == 0
        capsys.readouterr()  # drop the embed report
        code, report, _ = run_cli(
            capsys, "fewshot", "--config", config_path, "--base-emb", emb,
            "--novel-emb", emb, "--way", "2", "--shot", "1",
            "--query-per-class", "2", "--tasks", "3")
        assert code == 0
        assert report["way"] == 2 and report["tasks"] == 3
        assert 0.0 <= report["mean"] <= 1.0
        assert report["config"]["seed"] == 11

    def test_single_task_null_ci(self, capsys, workdir, config_path, dataset_path,
                                 teacher_path):
        emb = str(workdir / "fs1.ssle")
        assert main(["embed", "--model", teacher_path, "--data", dataset_path,
                     "--out", emb]) == 0
        capsys.readouterr()  # drop the embed report
        code, report, _ = run_cli(
            capsys, "fewshot", "--config", config_path, "--base-emb", emb,
            "--novel-emb", emb, "--way", "2", "--shot", "1",
            "--query-per-class", "2", "--tasks", "1")
        assert code == 0
        assert report["ci95"] is None


class TestRetrieval:
    def test_train_and_eval(self, capsys, workdir, config_path, dataset_path,
                            teacher_path):
        out = str(workdir / "ret.svtr")
        code, report, _ = run_cli(capsys, "retrieval", "train", "--config", config_path,
                                  "--model", teacher_path, "--data", dataset_path,
                                  "--loss", "margin", "--out", out)
        assert code == 0
        assert report["loss_kind"] == "margin"
        code, report, _ = run_cli(capsys, "retrieval", "eval", "--config", config_path,
                                  "--model", out, "--data", dataset_path,
                                  "--k", "1", "--k", "2")
        assert code == 0
        assert sorted(report["recall"]) == ["1", "2"]

    def test_eval_only_on_untrained_model(self, capsys, config_path, dataset_path,
                                          teacher_path):
        code, report, _ = run_cli(capsys, "retrieval", "eval", "--config", config_path,
                                  "--model", teacher_path, "--data", dataset_path)
        assert code == 0
        assert report["loss_kind"] is None

    def test_unknown_loss_usage_error(self, capsys, config_path, dataset_path,
                                      teacher_path, workdir):
        with pytest.raises(SystemExit) as exc:
            main(["retrieval", "train", "--config", config_path, "--model", teacher_path,
                  "--data", dataset_path, "--loss", "bogus",
                  "--out", str(workdir / "b.svtr")])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        assert "margin" in err and "proxy_nca" in err and "multi_similarity" in err

    def test_train_without_loss_usage_error(self, capsys, config_path, dataset_path,
                                            teacher_path, workdir):
        with pytest.raises(SystemExit) as exc:
            main(["retrieval", "train", "--config", config_path, "--model", teacher_path,
                  "--data", dataset_path, "--out", str(workdir / "c.svtr")])
        assert exc.value.code == 2


class TestThreads:
    def test_env_fallback_bad_value_exit_2(self, capsys, monkeypatch, workdir,
                                           config_path):
        monkeypatch.setenv("SSLVIT_THREADS", "many")
        code, _, err = run_cli(capsys, "synth", "--config", config_path,
                               "--out", str(workdir / "th.svds"))
        assert code == 2
        assert "SSLVIT_THREADS" in err

    def test_env_fallback_used(self, capsys, monkeypatch, workdir, config_path):
        monkeypatch.setenv("SSLVIT_THREADS", "2")
        code, _, _ = run_cli(capsys, "synth", "--config", config_path,
                             "--out", str(workdir / "th2.svds"))
        assert code == 0


class TestEntryPoint:
    def test_module_help_runs(self):
        proc = subprocess.run([sys.executable, "-m", "sslvit.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "synth" in proc.stdout and "retrieval" in proc.stdout

    def test_usage_error_is_exit_2(self):
        proc = subprocess.run([sys.executable, "-m", "sslvit.cli", "frobnicate"],
                              capture_output=True, text=True)
        assert proc.returncode == 2

"""Command-line workflow: subcommands, artifacts on disk, and exit codes."""

import json
import subprocess
import sys

import pytest

from ptmrec.corpus import load_dataset

TINY = {
    "seed": 0,
    "seeds": [0],
    "mode": "ptmrec",
    "strategy": "prompt",
    "synth": {"num_users": 40, "num_items": 50, "num_clusters": 4, "vocab_size": 64,
              "patch_count": 4, "patch_dim": 8, "interactions_per_user": 8},
    "encoder": {"layers": 2, "d_model": 32, "n_heads": 2, "d_proj": 16,
                "patch_count": 4, "d_patch": 8, "vocab_size": 64, "max_text_len": 16},
    "train": {"embed_dim": 32, "eval_ks": [5, 10], "early_stop_metric": "recall@10",
              "stage1_batch_size": 64, "max_epochs": 4, "patience": 50,
              "stage0_epochs": 2, "stage2_batch_size": 16, "accum_steps": 2,
              "stage2_max_epochs": 2, "stage2_periods_per_epoch": 1,
              "joint_max_epochs": 2, "prompt_depth": 1, "prompt_length": 2},
}


def run_cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "ptmrec.cli", *argv],
        capture_output=True, text=True, timeout=600,
    )


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "config.json"
    config_path.write_text(json.dumps(TINY))
    return root, str(config_path)


@pytest.fixture(scope="module")
def dataset_dir(workdir):
    root, config = workdir
    out = root / "data"
    result = run_cli("synth", "--config", config, "--out", str(out))
    assert result.returncode == 0, result.stderr
    return out, result.stdout


class TestSynth:
    def test_printed_counts_match_files(self, dataset_dir):
        out, stdout = dataset_dir
        corpus, bundles = load_dataset(out)
        assert f"users={corpus.num_users} items={corpus.num_items}" in stdout
        counts = (sum(len(x) for x in corpus.train),
                  sum(len(x) for x in corpus.val),
                  sum(len(x) for x in corpus.test))
        assert f"train={counts[0]} val={counts[1]} test={counts[2]}" in stdout
        assert bundles.num_items == corpus.num_items


class TestTrainingChain:
    def test_pretrain_stage1_stage2_eval(self, workdir, dataset_dir):
        root, config = workdir
        data, _ = dataset_dir

        result = run_cli("pretrain", "--config", config, "--data", str(data),
                         "--out", str(root / "pre"))
        assert result.returncode == 0, result.stderr
        stack = root / "pre" / "stack.ckpt"
        assert stack.exists()
        assert (root / "pre" / "pretrain.json").exists()

        result = run_cli("stage1", "--config", config, "--data", str(data),
                         "--stack", str(stack), "--out", str(root / "s1"))
        assert result.returncode == 0, result.stderr
        s1_best = root / "s1" / "best.ckpt"
        assert s1_best.exists()
        assert (root / "s1" / "report.json").exists()
        assert (root / "s1" / "eval-val.json").exists()

        result = run_cli("stage2", "--config", config, "--data", str(data),
                         "--stack", str(stack), "--stage1", str(s1_best),
                         "--out", str(root / "s2"))
        assert result.returncode == 0, result.stderr
        s2_best = root / "s2" / "best.ckpt"
        assert s2_best.exists()

        result = run_cli("eval", "--config", config, "--data", str(data),
                         "--checkpoint", str(s2_best), "--split", "test",
                         "--out", str(root / "ev"))
        assert result.returncode == 0, result.stderr
        payload = json.loads((root / "ev" / "eval-test.json").read_text())
        assert payload["split"] == "test"
        assert "recall@10" in payload["metrics"]

    def test_eval_stage1_checkpoint_needs_stack(self, workdir, dataset_dir):
        root, config = workdir
        data, _ = dataset_dir
        result = run_cli("eval", "--config", config, "--data", str(data),
                         "--checkpoint", str(root / "s1" / "best.ckpt"),
                         "--out", str(root / "ev1"))
        assert result.returncode == 2
        assert "--stack" in result.stderr
        result = run_cli("eval", "--config", config, "--data", str(data),
                         "--checkpoint", str(root / "s1" / "best.ckpt"),
                         "--stack", str(root / "pre" / "stack.ckpt"),
                         "--split", "val", "--out", str(root / "ev1"))
        assert result.returncode == 0, result.stderr


class TestPipeline:
    def test_single_command_end_to_end(self, workdir):
        root, config = workdir
        result = run_cli("pipeline", "--config", config, "--out", str(root / "pipe"))
        assert result.returncode == 0, result.stderr
        assert "stage 1:" in result.stdout
        assert "stage 2 (prompt):" in result.stdout
        assert "test (ptmrec):" in result.stdout
        assert (root / "pipe" / "eval-test.json").exists()
        assert (root / "pipe" / "config.json").exists()


class TestPrintConfig:
    def test_outputs_effective_json(self, workdir):
        root, config = workdir
        result = run_cli("print-config", "--config", config, "--seed", "9")
        assert result.returncode == 0
        payload = json.loads(result.stdout)
        assert payload["seed"] == 9
        assert payload["train"]["stage0_epochs"] == 2


class TestExitCodes:
    def test_unknown_config_key_exits_2(self, workdir):
        root, _ = workdir
        bad = root / "bad.json"
        bad.write_text(json.dumps({"bogus_key": 1}))
        result = run_cli("print-config", "--config", str(bad))
        assert result.returncode == 2
        assert "bogus_key" in result.stderr

    def test_missing_dataset_exits_3(self, workdir, dataset_dir):
        root, config = workdir
        result = run_cli("stage1", "--config", config,
                         "--data", str(root / "no_such_dir"),
                         "--stack", str(root / "pre" / "stack.ckpt"),
                         "--out", str(root / "tmp1"))
        assert result.returncode == 3

    def test_numerical_abort_exits_4(self, workdir, dataset_dir):
        root, config = workdir
        data, _ = dataset_dir
        blowup = dict(TINY)
        blowup["train"] = {**TINY["train"], "lr": 1e20, "stage1_batch_size": 512}
        bad = root / "blowup.json"
        bad.write_text(json.dumps(blowup))
        result = run_cli("stage1", "--config", str(bad), "--data", str(data),
                         "--stack", str(root / "pre" / "stack.ckpt"),
                         "--out", str(root / "tmp2"))
        assert result.returncode == 4
        assert "numerical abort" in result.stderr


class TestConsoleScript:
    def test_installed_entry_point(self):
        result = subprocess.run(["ptmrec", "--help"], capture_output=True,
                                text=True, timeout=120)
        assert result.returncode == 0
        assert "synth" in result.stdout and "pipeline" in result.stdout

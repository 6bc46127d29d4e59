import csv
import subprocess
import sys

import pytest

from motelab.checkpoint import MANIFEST, PAYLOAD, expert_blocks_in_manifest
from motelab.cli import ExperimentConfig, UsageError, main

FAST = ["--set", "hidden_dim=16", "--set", "mlp_hidden_dim=32", "--set", "num_layers=4", "--set", "num_heads=2",
        "--set", "corpus_pairs_per_dataset=24", "--set", "corpus_datasets_per_task=2", "--set", "corpus_topics=8",
        "--set", "corpus_entities=32", "--steps", "4", "--batch-size", "8"]


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_data_is_deterministic_and_has_task_dirs(tmp_path):
    assert main(["generate-data", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["generate-data", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    for task in ("retrieval", "classification", "clustering"):
        assert (tmp_path / "a" / task).is_dir()
    assert (tmp_path / "a" / "vocab.txt").exists() and (tmp_path / "a" / "corpus.jsonl").exists()


def test_missing_out_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate-data"])
    assert exc.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_console_entry_point_exit_codes(tmp_path):
    run = subprocess.run([sys.executable, "-m", "motelab.cli", "generate-data"], capture_output=True)
    assert run.returncode == 2
    run = subprocess.run([sys.executable, "-m", "motelab.cli", "compress", "--checkpoint", str(tmp_path / "none"),
                          "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert run.returncode == 1 and "none" in run.stderr


def test_train_writes_run_dir_and_is_deterministic(tmp_path):
    for name in ("r1", "r2"):
        assert main(["train", "--arch", "mote", "--batching", "tacl", "--out", str(tmp_path / name)] + FAST) == 0
    assert files(tmp_path / "r1") == files(tmp_path / "r2")
    run = tmp_path / "r1"
    assert not (run / "INCOMPLETE").exists()
    assert {"config.txt", "loss_log.csv", f"checkpoint/{MANIFEST}", f"checkpoint/{PAYLOAD}"} <= set(files(run))
    rows = list(csv.DictReader((run / "loss_log.csv").open()))
    for row in rows:
        if row["task_id"] == "retrieval":
            assert row["strategy"] == "homogeneous"
        if row["task_id"] == "clustering":
            assert float(row["temperature"]) == 0.06


def test_train_from_snapshotted_config_reproduces(tmp_path):
    assert main(["train", "--arch", "ic", "--out", str(tmp_path / "a")] + FAST) == 0
    assert main(["train", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_train_eob_manifest_has_two_expert_blocks(tmp_path):
    assert main(["train", "--arch", "mote", "--placement", "eob", "--out", str(tmp_path / "r")] + FAST) == 0
    assert expert_blocks_in_manifest(tmp_path / "r" / "checkpoint") == [1, 3]


def test_failed_run_is_marked_incomplete(tmp_path):
    bad = ["--set", "corpus_path=" + str(tmp_path / "missing.jsonl")]
    assert main(["train", "--out", str(tmp_path / "r")] + FAST + bad) == 1
    assert "run failed" in (tmp_path / "r" / "INCOMPLETE").read_text()


def test_train_from_jsonl_corpus(tmp_path):
    assert main(["generate-data", "--out", str(tmp_path / "d"), "--num-topics", "8", "--num-entities", "32",
                 "--pairs-per-dataset", "24", "--datasets-per-task", "2"]) == 0
    extra = ["--set", f"corpus_path={tmp_path / 'd' / 'corpus.jsonl'}"]
    assert main(["train", "--arch", "mote", "--out", str(tmp_path / "r")] + FAST + extra) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"), "--config",
                 str(tmp_path / "r" / "config.txt"), "--out", str(tmp_path / "ev")]) == 0


def test_config_parsing_errors(tmp_path):
    with pytest.raises(UsageError):
        ExperimentConfig.parse({"colour": "blue"})
    with pytest.raises(UsageError):
        ExperimentConfig.parse({"steps": "many"})
    with pytest.raises(UsageError):
        ExperimentConfig(arch="gpt")
    cfg = tmp_path / "c.txt"
    cfg.write_text("arch = ic  # baseline\nsteps = 3\n\n")
    assert ExperimentConfig.from_file(cfg).arch == "ic"
    assert main(["train", "--set", "bogus=1", "--out", str(tmp_path / "x")]) == 2


def test_init_upcycle_compress_round_trip(tmp_path):
    assert main(["init", "--out", str(tmp_path / "dense")] + FAST) == 0
    assert main(["upcycle", "--checkpoint", str(tmp_path / "dense"), "--out", str(tmp_path / "mote")]) == 0
    assert main(["compress", "--checkpoint", str(tmp_path / "mote"), "--out", str(tmp_path / "ea")]) == 0
    for name in (MANIFEST, PAYLOAD):
        assert (tmp_path / "ea" / name).read_bytes() == (tmp_path / "dense" / name).read_bytes()


def test_eval_checkpoint_and_run_file(tmp_path):
    assert main(["train", "--arch", "mote", "--out", str(tmp_path / "r")] + FAST) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"), "--config",
                 str(tmp_path / "r" / "config.txt"), "--out", str(tmp_path / "ev")]) == 0
    for task in ("retrieval", "classification", "clustering"):
        assert (tmp_path / "ev" / f"{task}.csv").exists()
    run = tmp_path / "perfect.csv"
    lines = ["query_id,item_id,score,relevance"]
    for q in range(5):
        lines += [f"q{q},rel,0.9,1", f"q{q},n1,0.5,0", f"q{q},n2,0.1,0"]
    run.write_text("\n".join(lines) + "\n")
    assert main(["eval", "--run-file", str(run), "--out", str(tmp_path / "rep.csv")]) == 0
    rows = list(csv.DictReader((tmp_path / "rep.csv").open()))
    assert len(rows) == 5 and all(float(r["ndcg_at_10"]) == 1.0 for r in rows)
    assert main(["eval", "--out", str(tmp_path / "x.csv")]) == 2


def test_analyze_writes_six_pair_rows(tmp_path):
    for arch in ("ic", "mote"):
        assert main(["train", "--arch", arch, "--out", str(tmp_path / arch)] + FAST) == 0
    assert main(["analyze", "--a", str(tmp_path / "mote" / "checkpoint"), "--b", str(tmp_path / "ic" / "checkpoint"),
                 "--out", str(tmp_path / "an"), "--probes", "16"]) == 0
    rows = list(csv.DictReader((tmp_path / "an" / "welch.csv").open()))
    assert len(rows) == 6 and all(r["t"] and r["df"] and r["p"] for r in rows)
    sims = list(csv.DictReader((tmp_path / "an" / "similarity_mote.csv").open()))
    assert len(sims) == 16 * 6


def test_offload_demo_reports_identity(tmp_path, capsys):
    assert main(["init", "--out", str(tmp_path / "dense")] + FAST) == 0
    assert main(["upcycle", "--checkpoint", str(tmp_path / "dense"), "--out", str(tmp_path / "mote")]) == 0
    assert main(["offload-demo", "--checkpoint", str(tmp_path / "mote"), "--spill-dir", str(tmp_path / "spill"),
                 "--probes", "4"]) == 0
    out = capsys.readouterr().out
    assert out.count("embeddings bit-identical: True") == 4 and "fraction=0.2500" in out


@pytest.mark.parametrize("preset", ["static-vs-tacl", "slr-vs-tlr", "eb-vs-eob", "ic-vs-mote"])
def test_presets_are_byte_reproducible(tmp_path, preset):
    for name in ("a", "b"):
        assert main(["preset", preset, "--out", str(tmp_path / name)] + FAST) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b
    assert "summary.csv" in a and sum(k.endswith(PAYLOAD) for k in a) == 2

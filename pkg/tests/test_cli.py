import json

import pytest
import yaml

from faser import FaserPipeline, dispatch
from utils import load_config

SMALL = {
    "encoder": {"input_len": 64, "num_blocks": 1, "hidden_dim": 16, "intermediate_dim": 32,
                "num_heads": 2, "window": 8, "embed_dim": 8, "dropout": 0.0},
    "sampler": {"m": 2, "batch_size": 4},
    "optimizer": {"accumulation_steps": 1},
    "train": {"epochs": 1},
    "evaluate": {"num_pools": 10, "pool_negatives": 5},
    "fixtures": {"num_labels": 12, "variants_per_label": 3, "min_instructions": 4, "max_instructions": 8},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert "pipeline" in capsys.readouterr().out
    assert dispatch(["eval", "pools", "--help"]) == 0


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["ingest", "--in", "a.jsonl"],
    ["ingest", "--in", "a.jsonl", "--out", "b.jsonl", "--bogus"],
    ["eval", "pools", "--corpus", "c", "--checkpoint", "k", "--vocab", "v", "--out-dir", "o", "--task", "zz"],
])
def test_usage_errors_exit_one(argv):
    assert dispatch(argv) == 1


def test_malformed_corpus_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"name": "f"}\n')
    assert dispatch(["ingest", "--in", str(bad), "--out", str(tmp_path / "out.jsonl")]) == 2
    assert capsys.readouterr().out == ""
    assert not (tmp_path / "out.jsonl").exists()


def test_missing_config_file_exits_two(tmp_path):
    assert dispatch(["--config", str(tmp_path / "nope.yaml"), "fixtures", "generate",
                     "--out", str(tmp_path / "x.jsonl")]) == 2


def test_error_is_recorded(tmp_path, isolated_logs):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    dispatch(["ingest", "--in", str(bad), "--out", str(tmp_path / "out.jsonl")])
    logged = list((isolated_logs / "errors").glob("*.json"))
    assert logged
    assert "line 1" in logged[0].read_text()


def test_stage_commands_write_manifests(tmp_path, small_config, capsys):
    corpus, strings = tmp_path / "corpus.jsonl", tmp_path / "strings.jsonl"
    assert dispatch(["fixtures", "generate", "--out", str(corpus), "--config", str(small_config),
                     "--num-labels", "3", "--seed", "4"]) == 0
    assert json.loads(capsys.readouterr().out) == {"functions": 9, "labels": 3}
    assert dispatch(["ingest", "--in", str(corpus), "--out", str(strings)]) == 0

    manifest = json.loads((tmp_path / "strings.jsonl.manifest.json").read_text())
    assert manifest["status"] == "success"
    assert manifest["inputs"][str(corpus)].startswith("sha256:")
    assert str(strings) in manifest["outputs"]
    assert manifest["command"][:2] == ["faser", "ingest"]
    assert json.loads((tmp_path / "corpus.jsonl.manifest.json").read_text())["seed"] == 4


def test_pipeline_end_to_end(tmp_path, small_config, capsys):
    work = tmp_path / "work"
    code = dispatch(["pipeline", "--work-dir", str(work), "--config", str(small_config), "--seed", "1"])

    assert code == 0
    stages = json.loads(capsys.readouterr().out)
    assert list(stages) == ["fixtures", "ingest", "normalize", "dedup", "vocab", "train", "index", "eval"]
    assert set(stages.values()) == {"success"}
    for name in ("corpus.jsonl", "dedup_report.json", "vocab.txt", "index.fasx", "manifest.json",
                 "train/checkpoint.fasr", "train/train_summary.json",
                 "eval/pools_results.jsonl", "eval/pools_summary.json"):
        assert (work / name).exists(), name


@pytest.mark.slow
def test_training_beats_untrained_encoder(tmp_path):
    import numpy as np

    from corpus import CorpusIndex, read_normalized
    from encoder import EncoderConfig, FaserEncoder
    from evaluate import ModelEmbedder, build_pools, rank_pool, summarize
    from vocab import Vocabulary

    config = load_config()
    config["optimizer"]["accumulation_steps"] = 1
    config["train"]["epochs"] = 30
    config["evaluate"].update(num_pools=200, pool_negatives=20)

    results = FaserPipeline(config).run(tmp_path, seed=0)

    summary = json.loads((tmp_path / "train" / "train_summary.json").read_text())
    assert summary["final_loss"] <= 0.5 * summary["initial_loss"]
    trained = results["eval"]["recall_at_1"]
    assert trained >= 0.8

    vocab = Vocabulary.load(tmp_path / "vocab.txt")
    untrained = FaserEncoder.create(EncoderConfig.from_config(config, vocab_size=len(vocab)), seed=0)
    index = CorpusIndex(read_normalized(tmp_path / "dedup.jsonl"))
    pools = build_pools(index, 200, negatives=20, seed=0)
    baseline = summarize([rank_pool(p, ModelEmbedder(untrained, vocab)) for p in pools]).recall_at_1
    assert np.isfinite(baseline)
    assert baseline <= 0.10
    assert trained > baseline

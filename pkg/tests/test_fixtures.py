from difflib import SequenceMatcher

import numpy as np
import pytest

from dedup import deduplicate
from error_recovery import ConfigError
from fixtures import FixtureGenerator, SynthConfig, generate, register_alphabet
from ingest import Ingestor, parse_corpus, to_function_string
from normalize import FUNC, NormalizationMode, Normalizer, RegisterTable, normalize_function


def normalized(corpus, register_normalization=False):
    mode = NormalizationMode(register_normalization=register_normalization)
    regs = RegisterTable.builtin()
    return [normalize_function(to_function_string(fn), mode, regs) for fn in corpus]


def test_counts_and_label_order():
    corpus = generate(SynthConfig(num_labels=5, variants_per_label=3))
    assert len(corpus) == 15
    assert [fn.name for fn in corpus[:4]] == ["fn_00000"] * 3 + ["fn_00001"]
    assert [fn.architecture for fn in corpus[:3]] == ["arm64", "mips64", "x86-64"]
    assert len({(fn.name, fn.binary_id) for fn in corpus}) == 15


def test_same_seed_same_corpus():
    cfg = SynthConfig(num_labels=6, substitution=0.2, insertion=0.1, deletion=0.1, register_renaming=0.5)
    assert generate(cfg) == generate(cfg)
    other = SynthConfig(**{**cfg.to_dict(), "architectures": tuple(cfg.architectures), "seed": 1})
    assert generate(cfg) != generate(other)


def test_zero_rates_are_fully_deduplicated():
    kept, report = deduplicate(normalized(generate(SynthConfig(num_labels=20, variants_per_label=3))))
    assert kept == []
    assert report.removal_fraction == 1.0


def test_register_renaming_is_removed_by_register_normalization():
    corpus = generate(SynthConfig(num_labels=20, variants_per_label=3, register_renaming=1.0))

    _, nrm = deduplicate(normalized(corpus))
    _, rn = deduplicate(normalized(corpus, register_normalization=True))

    assert nrm.removal_fraction == 0.0
    assert rn.removal_fraction == 1.0


def test_renamed_registers_come_from_variant_architecture():
    corpus = generate(SynthConfig(num_labels=3, variants_per_label=3, register_renaming=1.0))
    for fn in corpus:
        alphabet = set(register_alphabet(fn.architecture))
        foreign = set().union(*(register_alphabet(a) for a in ("arm64", "mips64", "x86-64"))) - alphabet
        tokens = {tok for ins in fn.instructions for tok in ins.tokens()}
        assert tokens & alphabet
        assert not tokens & foreign


def test_calls_survive_mutation_and_normalize_to_func():
    cfg = SynthConfig(num_labels=10, call_rate=0.5, substitution=0.5, deletion=0.3)
    for fn, norm in zip(generate(cfg), normalized(generate(cfg))):
        calls = [ins for ins in fn.instructions if ins.opcode_category == "call"]
        for ins in calls:
            assert ins.esil.endswith(",pc,:=")
        assert norm.tokens().count(FUNC) == len(calls)


def test_intra_label_closer_than_inter_label():
    cfg = SynthConfig(num_labels=20, variants_per_label=2, substitution=0.1, insertion=0.1,
                      deletion=0.1, register_renaming=0.1, seed=3)
    fns = normalized(generate(cfg))

    def similarity(a, b):
        return SequenceMatcher(None, a.tokens(), b.tokens(), autojunk=False).ratio()

    intra = [similarity(fns[2 * i], fns[2 * i + 1]) for i in range(20)]
    inter = [similarity(fns[2 * i], fns[2 * j + 1]) for i in range(20) for j in range(20) if i != j]
    assert np.mean(intra) > np.mean(inter) + 0.1


def test_output_passes_ingest_normalize_and_dedup(tmp_path):
    from dedup import Deduplicator

    raw = tmp_path / "synth.jsonl"
    stats = FixtureGenerator({"fixtures": {"num_labels": 8, "variants_per_label": 4}}).run(
        raw, substitution=0.1, insertion=0.1, deletion=0.1, register_renaming=0.1)
    assert stats["functions"] == 32

    with open(raw, "rb") as f:
        assert len(parse_corpus(f)) == 32
    ingested = Ingestor({}).run(raw, tmp_path / "strings.jsonl")
    assert ingested["functions_written"] == 32
    Normalizer({}).run(tmp_path / "strings.jsonl", tmp_path / "normalized.jsonl")
    report = Deduplicator().run(tmp_path / "normalized.jsonl", tmp_path / "dedup.jsonl")
    assert report.output_count > 0


@pytest.mark.parametrize("overrides", [
    {"variants_per_label": 1},
    {"substitution": 1.5},
    {"architectures": ()},
    {"architectures": ("sparc",)},
    {"min_instructions": 10, "max_instructions": 5},
])
def test_config_invariants(overrides):
    with pytest.raises(ConfigError):
        SynthConfig(**overrides).validate()


def test_unknown_fixture_settings_rejected():
    with pytest.raises(ConfigError, match="colour"):
        SynthConfig.from_config({"fixtures": {"colour": "red"}})

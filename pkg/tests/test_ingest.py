import io
import json

import pytest

from error_recovery import CorpusFormatError, DataError
from ingest import (EsilInstruction, FunctionString, Ingestor, RawFunction, instruction_boundaries,
                    parse_corpus, read_function_strings, serialize_corpus, to_function_string)

FIG2_PUSH = "rbp,8,rsp,0,=[8],8,rsp,-="
FIG2_CALL = "4176,rip,8,rsp,-=,rsp,=[8],rip,="
FIG2_MOV = "0,0x8,rbp,-,=[4]"


def record(**overrides):
    data = {
        "name": "main", "binary_id": "b1", "architecture": "x86-64", "bitness": 64,
        "compiler": "gcc", "opt_level": "O2",
        "instructions": [
            {"esil": FIG2_PUSH, "opcode_category": "other"},
            {"esil": FIG2_CALL, "opcode_category": "call"},
            {"esil": FIG2_MOV, "opcode_category": "other"},
        ],
    }
    data.update(overrides)
    return data


def stream_of(*records):
    return io.BytesIO(b"".join(json.dumps(r).encode() + b"\n" for r in records))


def test_parse_one_line_with_three_instructions():
    functions = parse_corpus(stream_of(record()))
    assert len(functions) == 1
    assert len(functions[0].instructions) == 3
    assert functions[0].instructions[1].opcode_category == "call"


def test_parse_empty_stream():
    assert parse_corpus(io.BytesIO(b"")) == []


def test_missing_instructions_reports_line():
    bad = record()
    del bad["instructions"]
    with pytest.raises(CorpusFormatError) as exc:
        parse_corpus(stream_of(bad))
    assert str(exc.value) == "line 1: missing field instructions"
    assert exc.value.line_number == 1


@pytest.mark.parametrize("field,value", [
    ("bitness", 16),
    ("instructions", []),
    ("instructions", [{"esil": "a, ,b"}]),
    ("instructions", [{"esil": "a", "opcode_category": "jump"}]),
])
def test_invalid_records_are_rejected(field, value):
    with pytest.raises(CorpusFormatError):
        parse_corpus(stream_of(record(**{field: value})))


def test_error_carries_line_number_of_bad_line():
    with pytest.raises(CorpusFormatError) as exc:
        parse_corpus(io.BytesIO(json.dumps(record()).encode() + b"\n{not json\n"))
    assert exc.value.line_number == 2


def test_duplicate_name_and_binary_rejected():
    with pytest.raises(CorpusFormatError, match="duplicate"):
        parse_corpus(stream_of(record(), record()))


def test_unknown_architecture_accepted_verbatim():
    functions = parse_corpus(stream_of(record(architecture="sparc-weird")))
    assert functions[0].architecture == "sparc-weird"


def test_function_string_joins_instructions():
    fs = to_function_string(RawFunction("f", "b", "x", 32, "gcc", "O0",
                                        [EsilInstruction("a,b"), EsilInstruction("c")]))
    assert fs.body == "a,b,c"
    assert fs.token_count == 3


def test_fig2_function_string():
    fs = to_function_string(parse_corpus(stream_of(record()))[0])
    assert fs.body == "rbp,8,rsp,0,=[8],8,rsp,-=,4176,rip,8,rsp,-=,rsp,=[8],rip,=,0,0x8,rbp,-,=[4]"
    assert fs.token_count == 22
    assert fs.categories == "o" * 8 + "c" * 9 + "o" * 5
    assert fs.label == "main"
    assert fs.meta.architecture == "x86-64"


def test_single_instruction_body_is_identity():
    fs = to_function_string(RawFunction("f", "b", "x86-64", 64, "gcc", "O0", [EsilInstruction(FIG2_MOV)]))
    assert fs.body == FIG2_MOV


def test_boundaries_recover_instructions():
    f = parse_corpus(stream_of(record()))[0]
    tokens = to_function_string(f).tokens()
    bounds = instruction_boundaries(f) + [len(tokens)]
    regrouped = [",".join(tokens[a:b]) for a, b in zip(bounds, bounds[1:])]
    assert regrouped == [ins.esil for ins in f.instructions]


def test_serialize_then_parse_is_identity():
    functions = parse_corpus(stream_of(record(), record(name="other", architecture="arm32", bitness=32)))
    buf = io.BytesIO()
    assert serialize_corpus(functions, buf) == 2
    buf.seek(0)
    assert parse_corpus(buf) == functions


def test_ingestor_writes_function_strings(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_bytes(stream_of(record(), record(name="tiny", instructions=[{"esil": "a"}])).getvalue())
    out = tmp_path / "strings.jsonl"

    stats = Ingestor({"ingest": {"min_instructions": 2}}).run(corpus, out)

    assert stats["functions_read"] == 2
    assert stats["functions_filtered"] == 1
    strings = read_function_strings(out)
    assert [s.label for s in strings] == ["main"]
    assert strings[0].token_count == 22


@pytest.mark.parametrize("categories", ["oo", "ooooo", "ocxo"])
def test_function_string_rejects_bad_categories(categories):
    data = to_function_string(parse_corpus(stream_of(record(instructions=[{"esil": "a,b,c,d"}])))[0]).to_dict()
    data["categories"] = categories
    with pytest.raises(DataError):
        FunctionString.from_dict(data)


def test_function_string_without_categories_loads():
    data = to_function_string(parse_corpus(stream_of(record()))[0]).to_dict()
    del data["categories"]
    assert FunctionString.from_dict(data).categories is None

import json

from conftest import make_function
from dedup import DedupReport, Deduplicator, dedup_exact, dedup_key, deduplicate, prune_singletons
from corpus import read_normalized, write_normalized


def test_first_occurrence_kept():
    a1, a1_dup, a2 = make_function("A", "x,y"), make_function("A", "x,y", binary_id="b2"), make_function("A", "x,z")
    kept, removed = dedup_exact([a1, a1_dup, a2])
    assert kept == [a1, a2]
    assert removed == 1
    assert kept[0].meta.binary_id == "bin0"


def test_all_distinct_unchanged():
    fns = [make_function("A", "x"), make_function("B", "y")]
    assert dedup_exact(fns) == (fns, 0)


def test_same_body_different_labels_both_kept():
    fns = [make_function("A", "x,y"), make_function("B", "x,y")]
    assert dedup_key(fns[0]) != dedup_key(fns[1])
    assert dedup_exact(fns)[1] == 0


def test_separator_prevents_concatenation_ambiguity():
    assert dedup_key(make_function("b", "a")) != dedup_key(make_function("", "ab"))


def test_prune_singletons():
    fns = [make_function("X", "1")] + [make_function("Y", body) for body in ("1", "2", "3")]
    kept, removed = prune_singletons(fns)
    assert [f.label for f in kept] == ["Y", "Y", "Y"]
    assert removed == 1
    assert prune_singletons([]) == ([], 0)


def test_two_variants_per_label_unchanged():
    fns = [make_function(label, f"{label},{v}") for label in "ABC" for v in range(2)]
    assert prune_singletons(fns) == (fns, 0)


def test_report_arithmetic_on_known_structure():
    fns = [
        make_function("A", "1"), make_function("A", "1"), make_function("A", "2"),   # 1 duplicate
        make_function("B", "1"), make_function("B", "1"),                            # duplicate, then singleton
        make_function("C", "1"),                                                     # singleton
        make_function("D", "1"), make_function("D", "2"), make_function("D", "3"),
    ]
    kept, report = deduplicate(fns)
    assert report.exact_dup_removed == 2
    assert report.singleton_removed == 2
    assert report.output_count == len(kept) == 5
    assert report.output_count == report.input_count - report.exact_dup_removed - report.singleton_removed
    assert report.removal_fraction == 1 - 5 / 9

    labels = {f.label for f in kept}
    for label in labels:
        bodies = [f.body for f in kept if f.label == label]
        assert len(bodies) >= 2 and len(set(bodies)) == len(bodies)


def test_empty_report():
    assert DedupReport.from_counts(0, 0, 0).removal_fraction == 0.0


def test_deduplicator_writes_report(tmp_path):
    src, out, report_path = tmp_path / "in.jsonl", tmp_path / "out.jsonl", tmp_path / "report.json"
    write_normalized(src, [make_function("A", "1"), make_function("A", "2"), make_function("B", "1")])

    report = Deduplicator().run(src, out, report_path)

    assert report.output_count == 2
    assert json.loads(report_path.read_text())["singleton_removed"] == 1
    assert [f.body for f in read_normalized(out)] == ["1", "2"]


def test_deduplicator_takes_no_settings(tmp_path):
    dedup = Deduplicator()
    assert not hasattr(dedup, "config")
    src, out = tmp_path / "in.jsonl", tmp_path / "out.jsonl"
    write_normalized(src, [make_function("A", "1"), make_function("A", "1"), make_function("A", "2")])
    assert dedup.run(src, out).exact_dup_removed == 1

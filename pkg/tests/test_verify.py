import pytest

from avfulldit import synthworld as W
from avfulldit import verify as V


def test_clean_build_passes_every_check():
    results = V.run_checks()
    failed = [name for name, ok, _ in results if not ok]
    assert not failed
    names = {name for name, _, _ in results}
    assert {"joint.masked_equivalence", "rope.sync_alignment", "world.manifest_filters"} <= names


@pytest.mark.parametrize("mutation", ["attention-mask", "rope-audio-positions", "backward:softmax"])
def test_mutations_are_caught_and_then_undone(mutation):
    assert not all(ok for _, ok, _ in V.run_checks(mutation))
    assert all(ok for _, ok, _ in V.run_checks(only="rope"))
    assert all(ok for _, ok, _ in V.run_checks(only="joint"))


def test_unknown_mutation_is_rejected():
    with pytest.raises(KeyError):
        V.run_checks("no-such-defect")


def test_constructed_manifest_shape():
    records = V.constructed_manifest()
    kept, dropped = W.filter_manifest(records)
    assert len(records) == 10 and len(kept) == 6
    assert sorted(why for _, why in dropped) == ["duplicate", "duplicate", "portrait", "silent"]


def test_results_format_one_line_each():
    results = V.run_checks(only="flow")
    text = V.format_results(results)
    assert len(text.splitlines()) == len(results)

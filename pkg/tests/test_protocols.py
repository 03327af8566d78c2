import json
from collections import Counter

import numpy as np
import pytest

from knowledge_exposure.errors import ConfigurationError, ParseError, ValidationError
from knowledge_exposure.protocols import (SemanticMap, build_protocol, build_sad, build_spa, build_ssa,
                                          derive_semantic_map, materialize, parse_overrides, read_manifest,
                                          write_manifest)
from knowledge_exposure.transforms import apply_by_id, transform_ids
from knowledge_exposure.transport import TransformRanking

BANK = transform_ids()


def ranking(class_id="car"):
    # farthest last: rot90 then rot270
    order = ["flip", "gaussian-blur", "jpeg-compression", "color-jitter", "random-crop",
             "gaussian-noise", "glass-blur", "snow", "rot270", "rot90"]
    return TransformRanking(class_id, [(t, 0.1 * (i + 1)) for i, t in enumerate(order)])


def expected_label(normal_class, sample_class, transform, shifting):
    """Ground truth written out as a plain truth table."""
    if sample_class != normal_class:
        return "anomaly"
    if transform is None:
        return "normal"
    return "anomaly" if transform in shifting else "normal"


def test_semantic_map_from_ranking_marks_top_k_as_shifting():
    sm = derive_semantic_map(ranking(), 2)
    assert sm.shifting("car") == ["rot270", "rot90"]
    verdicts = Counter(sm.verdict("car", t) for t in BANK)
    assert verdicts == {"shifting": 2, "preserving": 8}
    assert {sm.provenance("car", t) for t in BANK} == {"ke_ranking"}
    assert sm.missing("car") == []


def test_overrides_win_and_are_tagged():
    sm = derive_semantic_map(ranking(), 1, overrides="# comment\ncar flip shifting\n\ncar rot90 preserving  # ok\n")
    assert sm.verdict("car", "flip") == "shifting" and sm.provenance("car", "flip") == "human_override"
    assert sm.verdict("car", "rot90") == "preserving"
    assert sm.provenance("car", "snow") == "ke_ranking"


def test_overrides_from_a_file(tmp_path):
    p = tmp_path / "ov.txt"
    p.write_text("car snow shifting\n")
    sm = derive_semantic_map(ranking(), 1, overrides=str(p))
    assert sm.verdict("car", "snow") == "shifting"


@pytest.mark.parametrize("text, line", [
    ("car flip shifting\ncar flip\n", 2),
    ("car warp shifting\n", 1),
    ("\n\ncar flip maybe\n", 3),
])
def test_override_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as err:
        parse_overrides(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_semantic_map_validation_and_round_trip():
    with pytest.raises(ValidationError):
        derive_semantic_map(TransformRanking("car", [("flip", 0.1)]), 1)
    with pytest.raises(ValidationError):
        derive_semantic_map(ranking(), 6)
    sm = derive_semantic_map(ranking(), 2)
    assert SemanticMap.from_dict(json.loads(json.dumps(sm.to_dict()))).to_dict() == sm.to_dict()
    with pytest.raises(ValidationError):
        sm.set("car", "flip", "unsure", "x")


def test_sad_is_one_vs_rest_without_transforms(tiny_dataset):
    m = build_sad(tiny_dataset, "fruit")
    assert m.severity == 0 and all(r.transform_id is None for r in m.records)
    for r in m.records:
        assert r.ground_truth == expected_label("fruit", r.class_id, None, set())
    assert m.counts() == {"normal": 12, "anomaly": 24}


@pytest.mark.parametrize("normal", ["car", "fruit", "flower"])
def test_spa_labels_depend_only_on_class(tiny_dataset, normal):
    m = build_spa(tiny_dataset, normal, seed=3)
    sad = build_sad(tiny_dataset, normal, seed=3)
    assert [r.ground_truth for r in m.records] == [r.ground_truth for r in sad.records]
    assert [r.sample_id for r in m.records] == [r.sample_id for r in sad.records]
    assert m.severity == 1


@pytest.mark.parametrize("normal", ["car", "fruit"])
def test_ssa_labels_follow_the_truth_table(tiny_dataset, normal):
    sm = derive_semantic_map(ranking(normal), 2)
    m = build_ssa(tiny_dataset, normal, sm, seed=5)
    shifting = set(sm.shifting(normal))
    for r in m.records:
        assert r.ground_truth == expected_label(normal, r.class_id, r.transform_id, shifting)
    assert m.severity == 6
    assert m.semantic_map == {normal: sm.to_dict()[normal]}


def test_ssa_on_a_larger_split_flips_some_normals(tiny_dataset):
    from knowledge_exposure.datasets import make_procedural_dataset

    ds = make_procedural_dataset(["car", "fruit"], n_train=1, n_test=200, seed=1)
    sm = derive_semantic_map(ranking(), 2)
    m = build_ssa(ds, "car", sm, seed=0)
    spa = build_spa(ds, "car", seed=0)
    # same seed, same draws
    assert [r.transform_id for r in m.records] == [r.transform_id for r in spa.records]
    flipped = [r for r in m.records if r.class_id == "car" and r.ground_truth == "anomaly"]
    assert flipped and {r.transform_id for r in flipped} <= {"rot90", "rot270"}
    drawn = Counter(r.transform_id for r in m.records)
    assert set(drawn) == {None, *BANK}
    # uniform over 11 outcomes: each near 400/11
    assert max(drawn.values()) < 70 and min(drawn.values()) > 15


def test_ssa_requires_a_complete_map(tiny_dataset):
    sm = SemanticMap()
    sm.set("car", "flip", "preserving", "x")
    with pytest.raises(ValidationError, match="lacks verdicts"):
        build_ssa(tiny_dataset, "car", sm)
    with pytest.raises(ConfigurationError):
        build_protocol("SSA", tiny_dataset, "car")
    with pytest.raises(ConfigurationError):
        build_protocol("XYZ", tiny_dataset, "car")
    with pytest.raises(ValidationError):
        build_sad(tiny_dataset, "boat")
    with pytest.raises(ValidationError):
        build_spa(tiny_dataset, "car", severity=9)


def test_manifest_is_byte_reproducible_and_round_trips(tiny_dataset, tmp_path):
    sm = derive_semantic_map(ranking(), 2)
    a = build_protocol("SSA", tiny_dataset, "car", semantic_map=sm, seed=11)
    b = build_protocol("SSA", tiny_dataset, "car", semantic_map=sm, seed=11)
    pa, pb = write_manifest(tmp_path / "a.json", a), write_manifest(tmp_path / "b.json", b)
    assert pa.read_bytes() == pb.read_bytes()
    back = read_manifest(pa)
    assert back.dumps() == a.dumps()
    assert np.array_equal(back.labels(), a.labels())
    c = build_protocol("SSA", tiny_dataset, "car", semantic_map=sm, seed=12)
    assert c.dumps() != a.dumps()
    assert [p.name for p in tmp_path.iterdir()] and not list(tmp_path.glob("*.tmp"))


def test_materialize_applies_each_records_transform(tiny_dataset):
    m = build_spa(tiny_dataset, "car", seed=2, severity=3)
    out = materialize(m, tiny_dataset)
    assert out.sample_ids == tuple(r.sample_id for r in m.records)
    from knowledge_exposure.seeding import derive_seed

    seed = derive_seed(2, "protocol-apply")
    for i, r in enumerate(m.records):
        original = tiny_dataset.pixels_of([r.sample_id])
        if r.transform_id is None:
            assert np.array_equal(out.pixels[i], original[0])
        else:
            one = apply_by_id(r.transform_id, tiny_dataset.test.batch.subset([i]), seed, 3)
            assert np.array_equal(out.pixels[i], one.pixels[0])
    with pytest.raises(ValidationError):
        m.dataset_id = "other"
        materialize(m, tiny_dataset)

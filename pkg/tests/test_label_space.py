import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffmix.errors import InvariantViolation, ShapeMismatch, VocabularyMismatch
from diffmix.label_space import (ClassVocabulary, SemanticLabelMap, class_histogram, decode_one_hot,
                                 extract_instances, fragmented_instances, from_instances, null_condition,
                                 one_hot_encode)

from conftest import CONSEP, GLYSAC, VOCAB3, counts_fixture, random_rect_map


def test_vocabulary_rules():
    with pytest.raises(InvariantViolation):
        ClassVocabulary(("nucleus", "background"))
    with pytest.raises(InvariantViolation):
        ClassVocabulary(("background",))
    with pytest.raises(InvariantViolation):
        ClassVocabulary(("background", "a", "a"))
    v = ClassVocabulary.from_dict(VOCAB3.to_dict())
    assert v == VOCAB3


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        SemanticLabelMap(np.zeros((3, 3)), np.zeros((3, 4)), VOCAB3)


def test_two_disjoint_blobs():
    inst = np.zeros((8, 8), int)
    cls = np.zeros((8, 8), int)
    inst[1:3, 1:4], cls[1:3, 1:4] = 1, 1
    inst[5:8, 5:7], cls[5:8, 5:7] = 2, 2
    got = extract_instances(SemanticLabelMap(inst, cls, VOCAB3))
    assert [(n.id, n.class_id, n.area) for n in got] == [(1, 1, 6), (2, 2, 6)]
    assert got[0].bbox == (1, 1, 3, 4)
    np.testing.assert_allclose(got[1].centroid, (6.0, 5.5))


def test_all_background():
    assert extract_instances(SemanticLabelMap(np.zeros((5, 5)), np.zeros((5, 5)), VOCAB3)) == []


def test_random_rectangles_areas(rng):
    for _ in range(20):
        m = random_rect_map(rng, (64, 64), n=10)
        got = extract_instances(m)
        ids = sorted(set(np.unique(m.instance_ids)) - {0})
        assert [n.id for n in got] == ids
        for n in got:
            assert n.area == int((m.instance_ids == n.id).sum())


def test_multi_class_instance_rejected():
    inst = np.array([[1, 1]])
    cls = np.array([[1, 2]])
    m = SemanticLabelMap(inst, cls, VOCAB3)
    assert m.violations()
    with pytest.raises(InvariantViolation):
        extract_instances(m)


def test_background_disagreement_reported():
    m = SemanticLabelMap(np.array([[0, 1]]), np.array([[2, 1]]), VOCAB3)
    assert any("background" in v for v in m.violations())
    with pytest.raises(InvariantViolation):
        m.validate()


def test_fragmented_warning_only():
    inst = np.array([[1, 0, 1]])
    m = SemanticLabelMap(inst, inst, VOCAB3)
    assert m.violations() == []
    assert fragmented_instances(m) == [1]


def test_one_hot_single_pixel():
    m = SemanticLabelMap(np.array([[1]]), np.array([[2]]), VOCAB3)
    np.testing.assert_array_equal(one_hot_encode(m)[:, 0, 0], [0, 0, 1, 0])


def test_null_condition_is_all_zero():
    z = null_condition(4, 2, 2)
    assert z.shape == (4, 2, 2) and not z.any()


def test_glysac_table():
    stats = class_histogram(counts_fixture(GLYSAC, {"lymphocyte": 7409, "epithelial": 7154, "miscellaneous": 3386}))
    p = stats.proportions
    assert (round(100 * p["lymphocyte"], 1), round(100 * p["epithelial"], 1), round(100 * p["miscellaneous"], 1)) \
        == (41.3, 39.9, 18.9)
    assert stats.rarest()[0] == "miscellaneous"


def test_consep_table():
    stats = class_histogram(counts_fixture(CONSEP, {"epithelial": 3941, "inflammatory": 5537,
                                                    "miscellaneous": 371, "spindle": 5700}))
    assert stats.total == 15549
    assert round(100 * stats.proportions["miscellaneous"], 1) == 2.4
    assert abs(sum(stats.proportions.values()) - 1) < 1e-9


def test_single_nucleus_histogram():
    inst = np.zeros((4, 4), int)
    inst[1:3, 1:3] = 7
    stats = class_histogram([SemanticLabelMap(inst, inst * 0 + (inst > 0) * 3, VOCAB3)])
    assert stats.proportions["miscellaneous"] == 1.0
    assert stats.counts["lymphocyte"] == 0


def test_histogram_counts_instances_not_pixels():
    inst = np.zeros((6, 6), int)
    inst[0:4, 0:4] = 1
    inst[5, 5] = 2
    cls = np.where(inst == 1, 1, np.where(inst == 2, 2, 0))
    assert class_histogram([SemanticLabelMap(inst, cls, VOCAB3)]).counts == \
        {"lymphocyte": 1, "epithelial": 1, "miscellaneous": 0}


def test_vocabulary_mismatch():
    a = SemanticLabelMap(np.zeros((2, 2)), np.zeros((2, 2)), VOCAB3)
    b = SemanticLabelMap(np.zeros((2, 2)), np.zeros((2, 2)), CONSEP)
    with pytest.raises(VocabularyMismatch):
        class_histogram([a, b])


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_round_trip(seed):
    m = random_rect_map(np.random.default_rng(seed), (24, 24), n=6)
    back = from_instances(extract_instances(m), m.shape, m.vocab)
    assert back == m


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_one_hot_partition_and_inverse(seed):
    m = random_rect_map(np.random.default_rng(seed), (16, 16), n=5)
    enc = one_hot_encode(m)
    np.testing.assert_array_equal(enc.sum(0), np.ones(m.shape))
    np.testing.assert_array_equal(decode_one_hot(enc), m.class_ids)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_histogram_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    m = random_rect_map(rng, (24, 24), n=8)
    ids = np.unique(m.instance_ids)
    perm = np.zeros(m.instance_ids.max() + 1, dtype=np.int64)
    perm[ids[1:]] = rng.permutation(np.arange(100, 100 + len(ids) - 1))
    relabelled = SemanticLabelMap(perm[m.instance_ids], m.class_ids, m.vocab)
    assert class_histogram([relabelled]).counts == class_histogram([m]).counts

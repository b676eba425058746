import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import confusion, iou_from_counts
from pseg import evalkit
from pseg.errors import ParameterError, ShapeError, UndefinedMetricError
from pseg.evalkit import ConfusionMatrix, accumulate, miou


def test_accumulate_examples(rng):
    c = accumulate(ConfusionMatrix.empty(3), [1, 1, 2], [1, 1, 2])
    assert c.counts[1, 1] == 2 and c.counts[2, 2] == 1 and c.total == 3
    assert accumulate(c, [], []).counts.tolist() == c.counts.tolist()
    t, p = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    c = accumulate(ConfusionMatrix.empty(4), t, p)
    assert c.counts.sum(axis=1).tolist() == np.bincount(t, minlength=4).tolist()
    np.testing.assert_array_equal(c.counts, confusion(t, p, 4))
    with pytest.raises(ParameterError):
        accumulate(ConfusionMatrix.empty(2), [2], [0])
    with pytest.raises(ShapeError):
        accumulate(ConfusionMatrix.empty(2), [1, 0], [0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=60), st.randoms())
def test_accumulate_order_independent(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = accumulate(ConfusionMatrix.empty(4), [t for t, _ in pairs], [p for _, p in pairs])
    b = accumulate(ConfusionMatrix.empty(4), [t for t, _ in shuffled], [p for _, p in shuffled])
    np.testing.assert_array_equal(a.counts, b.counts)
    half = len(pairs) // 2
    merged = accumulate(ConfusionMatrix.empty(4), [t for t, _ in pairs[:half]], [p for _, p in pairs[:half]]) + \
        accumulate(ConfusionMatrix.empty(4), [t for t, _ in pairs[half:]], [p for _, p in pairs[half:]])
    np.testing.assert_array_equal(merged.counts, a.counts)


def test_miou_examples():
    perfect = accumulate(ConfusionMatrix.empty(3), [0, 1, 2, 2], [0, 1, 2, 2])
    ious, m = miou(perfect)
    assert ious == [1.0, 1.0, 1.0] and m == 1.0
    disjoint = accumulate(ConfusionMatrix.empty(3), [1, 1], [2, 2])
    assert miou(disjoint)[0][1] == 0.0
    # classes 1 and 2: TP=[3,2], FP=[1,0], FN=[0,2]
    conf = ConfusionMatrix(np.array([[0, 1, 0], [0, 3, 0], [2, 0, 2]]))
    ious, m = miou(conf)
    assert ious[1:] == [0.75, 0.5] and m == 0.625
    assert math.isclose(miou(conf, include_background=True)[1], (0 + 0.75 + 0.5) / 3)
    with pytest.raises(UndefinedMetricError):
        miou(accumulate(ConfusionMatrix.empty(3), [0, 0], [0, 0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=80))
def test_iou_matches_oracle_and_bounds(pairs):
    t, p = [a for a, _ in pairs], [b for _, b in pairs]
    conf = accumulate(ConfusionMatrix.empty(4), t, p)
    ious = evalkit.iou_per_class(conf)
    for c in range(4):
        ref = iou_from_counts(confusion(t, p, 4).tolist(), c)
        assert (math.isnan(ref) and math.isnan(ious[c])) or ious[c] == ref
    defined = ious[1:][~np.isnan(ious[1:])]
    if len(defined):
        m = miou(conf)[1]
        assert defined.min() <= m <= defined.max() and 0 <= m <= 1


def outcome(m):
    return evalkit.RunOutcome(m, {"hole": m, "pocket": None})


def test_summarize_runs():
    one = evalkit.summarize_runs("2-way 1-shot", [outcome(0.3)])
    assert one["best_miou"] == one["mean_miou"] == 0.3
    two = evalkit.summarize_runs("2-way 1-shot", [outcome(0.4), outcome(0.5)])
    assert two["best_miou"] == 0.5 and math.isclose(two["mean_miou"], 0.45)
    assert two["per_class"] == {"hole": 0.45, "pocket": None}
    with pytest.raises(ParameterError):
        evalkit.summarize_runs("2-way 1-shot", [])


def test_report_schema_and_table(tmp_path):
    rep = evalkit.build_report("ours", [evalkit.summarize_runs(evalkit.setting_name(2, k), [outcome(0.4 + k / 100)])
                                        for k in (1, 3, 5)])
    evalkit.validate_report(rep)
    table = evalkit.format_table([rep])
    assert table.splitlines()[0].startswith("Method") and "45.00" in table
    evalkit.dump_report(rep, tmp_path / "r.json")
    bad = dict(rep, extra=1)
    with pytest.raises(jsonschema.ValidationError):
        evalkit.validate_report(bad)


def test_evaluate_run_on_oracle_features(small_corpus):
    """Features that encode the true label make every query point correct."""
    from pseg.episodes import episode_stream, split_classes
    from pseg.geom import CAD_CLASSES
    split = split_classes(CAD_CLASSES, 0, 0)
    eps = list(episode_stream(small_corpus, split, 2, 1, 1, 5, 0, "test"))
    feats = lambda i: np.eye(5)[small_corpus[i].labels] * 10.0  # noqa: E731
    out = evalkit.evaluate_run(eps, feats, CAD_CLASSES, 3, evalkit.LpaConfig(k=5))
    assert out.miou == 1.0
    with pytest.raises(ParameterError):
        evalkit.evaluate_run([], feats, CAD_CLASSES)

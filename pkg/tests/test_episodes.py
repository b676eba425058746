import numpy as np
import pytest

from pseg import episodes as ep_mod
from pseg.episodes import episode_manifest, episode_stream, episodes_from_manifest, sample_episode, split_classes
from pseg.errors import FormatError, ParameterError, SamplingError
from pseg.geom import CAD_CLASSES, ClassAlphabet


def test_split_folds_partition_foreground():
    a, b = split_classes(CAD_CLASSES, 0, 3), split_classes(CAD_CLASSES, 1, 3)
    assert set(a.train_classes) & set(b.train_classes) == set()
    assert set(a.train_classes) | set(b.train_classes) == {1, 2, 3, 4}
    assert a.train_classes == b.test_classes and len(a.train_classes) == 2
    assert split_classes(CAD_CLASSES, 0, 3) == a
    with pytest.raises(ParameterError):
        split_classes(CAD_CLASSES, 2)
    with pytest.raises(ParameterError):
        split_classes(ClassAlphabet(("plane", "hole")), 0)
    assert ep_mod.SplitConfig.from_dict(a.to_dict()) == a


def test_two_way_one_shot(small_corpus):
    split = split_classes(CAD_CLASSES, 0, 0)
    ep = sample_episode(small_corpus, split, 2, 1, 1, seed=5)
    assert len(ep.support) == 2 and len(ep.query) == 1
    assert set(ep.classes) <= set(split.train_classes)
    assert set(np.unique(ep.query[0].labels)) <= {0, 1, 2}
    for s in ep.support:
        np.testing.assert_array_equal(s.mask, small_corpus[s.cloud].labels == s.cls)
        assert s.mask.any()
    q = ep.query[0]
    raw = small_corpus[q.cloud].labels
    for i, c in enumerate(ep.classes):
        np.testing.assert_array_equal(q.labels == i + 1, raw == c)
    assert q.cloud not in {s.cloud for s in ep.support}
    again = sample_episode(small_corpus, split, 2, 1, 1, seed=5)
    assert again.classes == ep.classes and [s.cloud for s in again.support] == [s.cloud for s in ep.support]


def test_missing_class_is_a_sampling_error(small_corpus):
    split = split_classes(CAD_CLASSES, 0, 0)
    c = split.train_classes[0]
    stripped = [lc for lc in small_corpus if not (lc.labels == c).any()]
    with pytest.raises(SamplingError, match=CAD_CLASSES.names[c]):
        sample_episode(stripped, split, 2, 1, 1, seed=0)
    with pytest.raises(SamplingError):
        sample_episode(small_corpus, split, 3, 1, 1, seed=0)


def test_stream_counts_and_determinism(small_corpus):
    split = split_classes(CAD_CLASSES, 1, 2)
    assert list(episode_stream(small_corpus, split, 2, 1, 1, 0, 9)) == []
    a = list(episode_stream(small_corpus, split, 2, 1, 1, 100, 9))
    b = list(episode_stream(small_corpus, split, 2, 1, 1, 100, 9))
    assert len(a) == 100
    assert all(x.classes == y.classes and [s.cloud for s in x.support] == [s.cloud for s in y.support]
               and [q.cloud for q in x.query] == [q.cloud for q in y.query] for x, y in zip(a, b))


def test_no_test_class_leaks_into_training(small_corpus):
    split = split_classes(CAD_CLASSES, 0, 4)
    for ep in episode_stream(small_corpus, split, 2, 1, 1, 1000, 1):
        assert not set(ep.classes) & set(split.test_classes)
        ep.check()


def test_manifest_round_trip(small_corpus):
    split = split_classes(CAD_CLASSES, 0, 0)
    eps = list(episode_stream(small_corpus, split, 2, 2, 1, 5, 3, "test"))
    back = episodes_from_manifest(episode_manifest(eps, small_corpus), small_corpus)
    for x, y in zip(eps, back):
        assert x.classes == y.classes and x.index == y.index
        for s, t in zip(x.support, y.support):
            np.testing.assert_array_equal(s.mask, t.mask)
        np.testing.assert_array_equal(x.query[0].labels, y.query[0].labels)
    doc = episode_manifest(eps[:1], small_corpus)
    remap = doc["episodes"][0]["query"][0]["remap"]
    a, b = list(remap)
    remap[a], remap[b] = remap[b], remap[a]
    with pytest.raises(FormatError):
        episodes_from_manifest(doc, small_corpus)
    with pytest.raises(FormatError):
        episodes_from_manifest({"episodes": [{"classes": ["hole"]}]}, small_corpus)

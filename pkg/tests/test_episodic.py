import numpy as np
import pytest

from tokenbreak.episodic import DatasetIndex, classify, classify_batch, evaluate, prototypes, sample_episode
from tokenbreak.errors import EpisodeError, EpisodeShapeError
from tokenbreak.rng import keyed_rng


@pytest.fixture
def separable():
    """Ten classes, thirty samples each, far-apart centers and small noise."""
    gen = np.random.default_rng(77)
    centers = gen.normal(0.0, 10.0, size=(10, 16))
    table = {}
    classes = {}
    for c in range(10):
        refs = []
        for i in range(30):
            ref = f"c{c}/s{i}"
            table[ref] = centers[c] + gen.normal(0.0, 0.1, size=16)
            refs.append(ref)
        classes[f"class{c}"] = tuple(refs)
    return DatasetIndex(classes), table.__getitem__


def test_dataset_index_validation():
    ds = DatasetIndex({"b": ("2",), "a": ("1",)})
    assert ds.class_names == ["a", "b"]
    with pytest.raises(EpisodeError):
        DatasetIndex({"a": ()})
    with pytest.raises(EpisodeError):
        DatasetIndex({"a": ("x",), "b": ("x",)})
    with pytest.raises(EpisodeError):
        DatasetIndex({})


def test_from_labels_groups_rows():
    ds = DatasetIndex.from_labels([1, 0, 1, 2])
    assert list(ds.classes.values()) == [("1",), ("0", "2"), ("3",)]


def test_episode_sizes(separable):
    ds, _ = separable
    ep = sample_episode(ds, 5, 1, 15, keyed_rng(0))
    assert len(ep.support) == 5 and len(ep.query_set) == 75
    ep = sample_episode(ds, 5, 5, 15, keyed_rng(0))
    assert len(ep.support) == 25
    refs = [r for r, _ in ep.support + ep.query_set]
    assert len(set(refs)) == len(refs)


def test_episode_with_all_classes(separable):
    ds, _ = separable
    ep = sample_episode(ds, 10, 2, 3, keyed_rng(1))
    assert sorted(ep.classes) == ds.class_names
    labels = [label for _, label in ep.support]
    assert sorted(set(labels)) == list(range(10))


def test_episode_errors(separable):
    ds, _ = separable
    with pytest.raises(EpisodeShapeError):
        sample_episode(ds, 0, 1, 1, keyed_rng(0))
    with pytest.raises(EpisodeError):
        sample_episode(ds, 11, 1, 1, keyed_rng(0))
    with pytest.raises(EpisodeError):
        sample_episode(ds, 5, 20, 15, keyed_rng(0))


def test_prototypes_examples(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(prototypes(x, [0, 1, 2]), x)
    assert prototypes(np.array([[0.0, 0.0], [2.0, 2.0]]), [0, 0]).tolist() == [[1.0, 1.0]]
    dup = np.vstack([x[:1], x[:1]])
    assert np.allclose(prototypes(dup, [0, 0]), x[:1])
    with pytest.raises(EpisodeError):
        prototypes(x, [0, 2, 2], num_classes=3)


def test_classify_examples():
    protos = np.array([[0.0, 0.0], [10.0, 0.0], [3.0, 3.0]])
    assert classify(np.array([3.0, 3.0]), protos) == 2
    assert classify(np.array([6.0, 0.0]), protos[:2]) == 1
    assert classify(np.array([5.0, 0.0]), protos[:2]) == 0
    assert classify(np.array([1.0, 0.1]), np.array([[1.0, 0.0], [0.0, 1.0]]), "cosine") == 0
    assert classify_batch(np.array([[6.0, 0.0], [1.0, 0.0]]), protos[:2]).tolist() == [1, 0]
    with pytest.raises(EpisodeShapeError):
        classify(np.array([1.0, 0.0]), protos, "manhattan")


def test_evaluate_separable(separable):
    ds, extract = separable
    report = evaluate(extract, ds, 5, 5, 15, 100, seed=0)
    assert report.accuracy >= 0.99
    assert report.episodes == 100
    assert (report.way, report.shot, report.query) == (5, 5, 15)


def test_evaluate_single_class_is_perfect(separable):
    ds, extract = separable
    report = evaluate(extract, ds, 1, 1, 5, 20, seed=3)
    assert report.accuracy == 1.0
    assert report.ci95 == 0.0


def test_evaluate_is_deterministic_across_threads(separable):
    ds, _ = separable
    gen = np.random.default_rng(5)
    noisy = {r: gen.normal(size=8) for refs in ds.classes.values() for r in refs}
    a = evaluate(noisy.__getitem__, ds, 5, 1, 5, 30, seed=9)
    b = evaluate(noisy.__getitem__, ds, 5, 1, 5, 30, seed=9, threads=4)
    assert a == b
    assert 0.0 < a.ci95 < 1.0


def test_evaluate_ci_uses_population_std():
    ds = DatasetIndex({"a": ("0", "1"), "b": ("2", "3")})
    feats = {"0": np.array([0.0]), "1": np.array([0.0]), "2": np.array([0.0]), "3": np.array([0.0])}
    report = evaluate(feats.__getitem__, ds, 2, 1, 1, 10, seed=0)
    # all distances tie, so every query goes to class 0 and accuracy is 0.5
    assert report.accuracy == 0.5
    assert report.std == 0.0


def test_evaluate_rejects_bad_shapes(separable):
    ds, extract = separable
    with pytest.raises(EpisodeShapeError):
        evaluate(extract, ds, 0, 5, 15, 10, seed=0)
    with pytest.raises(EpisodeShapeError):
        evaluate(extract, ds, 5, 5, 15, 0, seed=0)
    with pytest.raises(EpisodeShapeError):
        evaluate(extract, ds, 5, 5, 15, 10, seed=0, metric="chebyshev")


def test_cosine_distance_is_an_alias(separable):
    protos = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]])
    queries = np.array([[0.9, 0.2], [0.1, 2.0], [-3.0, 0.0]])
    assert classify_batch(queries, protos, "cosine-distance").tolist() == classify_batch(queries, protos, "cosine").tolist()
    assert classify(np.array([1.0, 0.1]), protos, "cosine-distance") == 0

    ds, extract = separable
    report = evaluate(extract, ds, 5, 1, 5, 10, seed=2, metric="cosine-distance")
    assert report.metric == "cosine"
    assert report == evaluate(extract, ds, 5, 1, 5, 10, seed=2, metric="cosine")

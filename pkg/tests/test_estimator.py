import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from prompt_pyramid.data import SynthCorpusSpec, generate_corpus
from prompt_pyramid.errors import ShapeError
from prompt_pyramid.estimator import PyramidRetriever
from prompt_pyramid.validation import check_queries, check_targets, check_videos

TOY = dict(width=32, layers=2, heads=2, text_width=32, batch_size=4, steps=8)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SynthCorpusSpec(num_videos=6, seed=2))


@pytest.fixture(scope="module")
def fitted(corpus):
    videos = corpus.video_array()
    index = {v: i for i, v in enumerate(corpus.video_ids)}
    queries = [q.tokens for q in corpus.queries]
    y = [index[q.video_id] for q in corpus.queries]
    return PyramidRetriever(**TOY).fit(videos, queries, y), videos, queries, y


def test_params_roundtrip():
    est = PyramidRetriever(variant="S", steps=5)
    params = est.get_params()
    assert params["variant"] == "S" and params["steps"] == 5
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(variant="PC")
    assert est.variant == "PC"


def test_not_fitted():
    with pytest.raises(NotFittedError):
        PyramidRetriever().transform(np.zeros((1, 32, 32, 32, 3)))


def test_fit_transform_predict(fitted):
    est, videos, queries, y = fitted
    feats = est.transform(videos)
    assert feats.shape == (len(videos), 42, 32)
    assert est.encode_queries(queries).shape == (len(queries), 32)
    pred = est.predict(queries)
    assert pred.shape == (len(queries),) and set(pred) <= set(range(len(videos)))
    rankings = est.predict_rankings(queries)
    assert all(sorted(r) == list(range(len(videos))) for r in rankings)
    assert [r[0] for r in rankings] == pred.tolist()
    assert 0.0 <= est.score(queries, y) <= 1.0
    report = est.report(queries, y)
    assert set(report.recall) == {"1", "5", "10", "100"}
    assert len(est.history_) == TOY["steps"]


def test_similarity_levels(fitted):
    est, _, queries, _ = fitted
    s_all, arg_all = est.similarity(queries, levels=None)
    s_top, arg_top = est.similarity(queries, levels=[5])
    assert (s_all >= s_top - 1e-6).all()
    assert (arg_top == 0).all()


def test_fit_is_reproducible(corpus, fitted):
    est, videos, queries, y = fitted
    again = PyramidRetriever(**TOY).fit(videos, queries, y)
    assert np.array_equal(again.transform(videos), est.transform(videos))


def test_single_video_accepted(fitted):
    est, videos, _, _ = fitted
    assert est.transform(videos[0]).shape == (1, 42, 32)


def test_fit_rejects_one_video(corpus):
    videos = corpus.video_array()[:1]
    with pytest.raises(ValueError):
        PyramidRetriever(**TOY).fit(videos, [[1, 3, 2], [1, 4, 2]], [0, 0])


def test_validation_helpers():
    with pytest.raises(ShapeError):
        check_videos(np.zeros((2, 16, 32, 32, 3)), 32, 32)
    with pytest.raises(ValueError):
        check_videos(np.full((1, 32, 32, 32, 3), np.nan), 32, 32)
    with pytest.raises(TypeError):
        check_queries("a red square", 64)
    with pytest.raises(ValueError):
        check_queries([[1, 99, 2]], 64)
    with pytest.raises(ShapeError):
        check_queries([[1, 3]], 64)
    with pytest.raises(ShapeError):
        check_targets([0, 1], 3, 2)
    with pytest.raises(ValueError):
        check_targets([0, 5], 2, 2)

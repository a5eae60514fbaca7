import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dataless_intent.embedding import (
    CacheOnlyProvider,
    EmbeddingCache,
    HashingEmbedder,
    HTTPEmbedder,
    cosine,
    cosine_matrix,
    embed_all,
    test_embedder,
    text_digest,
)
from dataless_intent.exceptions import (
    CacheCorruptionError,
    InvalidInputError,
    MissingEmbeddingError,
    ProviderError,
    TransportError,
)


class CountingProvider:
    def __init__(self, dim=16):
        self.inner = HashingEmbedder(dim=dim, seed=3)
        self.model_id = self.inner.model_id
        self.dim = dim
        self.calls = []

    def embed(self, texts):
        self.calls.append(list(texts))
        return self.inner.embed(texts)


class TestCosine:
    def test_self_similarity(self):
        v = np.array([0.3, -2.0, 5.0])
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine([1, 0], [0, 1]) == 0.0

    def test_forty_five_degrees(self):
        assert abs(cosine([1, 0], [1, 1]) - 0.70710678) < 1e-8
        assert cosine([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            cosine([1, 0], [1, 0, 0])

    def test_zero_vector(self):
        with pytest.raises(InvalidInputError):
            cosine([0, 0], [1, 0])

    def test_matrix_agrees(self):
        rng = np.random.default_rng(0)
        Q, K = rng.normal(size=(5, 7)), rng.normal(size=(4, 7))
        M = cosine_matrix(Q, K)
        for i in range(5):
            for j in range(4):
                assert M[i, j] == pytest.approx(cosine(Q[i], K[j]), abs=1e-12)

    grid = st.integers(-100_000, 100_000).map(lambda i: i / 100)
    vecs = arrays(np.float64, 6, elements=grid)

    @given(vecs, vecs)
    def test_symmetric_and_bounded(self, u, v):
        if np.sum(u * u) == 0 or np.sum(v * v) == 0:
            return
        assert cosine(u, v) == pytest.approx(cosine(v, u), abs=1e-12)
        assert abs(cosine(u, v)) <= 1 + 1e-12

    @settings(max_examples=50)
    @given(arrays(np.float64, (5, 6), elements=grid), vecs, st.floats(1e-3, 1e3))
    def test_argmax_scale_invariant(self, protos, u, a):
        if np.sum(u * u) == 0 or not np.all(np.sum(protos * protos, axis=1) > 0):
            return
        s1 = cosine_matrix(u, protos)[0]
        s2 = cosine_matrix(a * u, protos)[0]
        assert np.allclose(s1, s2, atol=1e-12)
        best = np.flatnonzero(np.isclose(s1, s1.max(), atol=1e-12, rtol=0))
        assert int(np.argmax(s2)) in best


class TestHashingEmbedder:
    def test_deterministic(self):
        a = test_embedder(64, 1).embed_one("play some jazz")
        b = test_embedder(64, 1).embed_one("play some jazz")
        assert a.tobytes() == b.tobytes()

    def test_bag_of_words(self):
        e = test_embedder(64, 1)
        assert np.array_equal(e.embed_one("play some jazz"), e.embed_one("jazz some play"))

    def test_seed_changes_vector(self):
        assert not np.array_equal(test_embedder(64, 1).embed_one("x y z"), test_embedder(64, 2).embed_one("x y z"))

    def test_not_normalized(self):
        v = test_embedder(64, 0).embed_one("a b c d e f g h")
        assert np.sum(np.abs(v)) > 1

    def test_disjoint_vocabulary_regression(self):
        # computed once with this implementation and pinned
        e = test_embedder(64, 7)
        value = cosine(e.embed_one("book a table for two tonight"), e.embed_one("play the latest album by adele"))
        assert value == pytest.approx(1 / 6, abs=1e-12)

    def test_min_dim(self):
        with pytest.raises(InvalidInputError):
            HashingEmbedder(dim=4)


class TestEmbedAll:
    def test_second_call_hits_cache(self):
        provider, cache = CountingProvider(), EmbeddingCache()
        first = embed_all(provider, ["a b", "c d"], cache)
        n = len(provider.calls)
        second = embed_all(provider, ["a b", "c d"], cache)
        assert len(provider.calls) == n
        assert np.array_equal(first, second)

    def test_only_misses_fetched_in_order(self):
        provider, cache = CountingProvider(), EmbeddingCache()
        embed_all(provider, ["one", "three"], cache)
        provider.calls.clear()
        out = embed_all(provider, ["one", "two", "three", "four", "two"], cache)
        assert provider.calls == [["two", "four"]]
        expected = provider.inner.embed(["one", "two", "three", "four", "two"])
        assert np.array_equal(out, expected)

    def test_batches(self):
        provider = CountingProvider()
        embed_all(provider, [f"t{i}" for i in range(7)], EmbeddingCache(), batch_size=3)
        assert [len(c) for c in provider.calls] == [3, 3, 1]

    def test_dim_mismatch_is_corruption(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        path.write_text(json.dumps({"model": "m", "sha256": text_digest("x"), "dim": 384,
                                    "vector": [0.0] * 384}) + "\n")
        cache = EmbeddingCache(path)

        class Big:
            model_id, dim = "m", 1024

            def embed(self, texts):
                return np.ones((len(texts), 1024))

        with pytest.raises(CacheCorruptionError):
            embed_all(Big(), ["y"], cache)

    def test_persist_and_reload(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        provider = HTTPLessProvider()
        vecs = embed_all(provider, ["alpha", "beta"], EmbeddingCache(path))
        reloaded = EmbeddingCache(path)
        offline = CacheOnlyProvider(provider.model_id)
        again = embed_all(offline, ["beta", "alpha"], reloaded)
        np.testing.assert_allclose(again, vecs[::-1], atol=1e-7)

    def test_cache_only_miss(self):
        with pytest.raises(MissingEmbeddingError):
            embed_all(CacheOnlyProvider("m"), ["nothing"], EmbeddingCache())

    def test_rejects_empty(self):
        with pytest.raises(InvalidInputError):
            embed_all(CountingProvider(), [""], EmbeddingCache())


class HTTPLessProvider:
    model_id = "float-model"
    dim = 5

    def embed(self, texts):
        rng = np.random.default_rng(len(texts))
        return rng.normal(size=(len(texts), 5)) / 3.0


def embeddings_handler(dim=4, fail_first=0, status=None):
    state = {"n": 0, "bodies": []}

    def handler(request):
        state["n"] += 1
        body = json.loads(request.content)
        state["bodies"].append(body)
        state["auth"] = request.headers.get("authorization")
        if state["n"] <= fail_first:
            if status is None:
                raise httpx.ConnectError("boom", request=request)
            return httpx.Response(status)
        data = [{"index": i, "embedding": [float(len(t))] + [float(i)] * (dim - 1)}
                for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": list(reversed(data))})

    return handler, state


class TestHTTPEmbedder:
    def test_reorders_by_index_and_batches(self, monkeypatch):
        monkeypatch.setenv("EMB_TOKEN", "s3cret")
        handler, state = embeddings_handler()
        p = HTTPEmbedder("http://x/v1", "m", api_key_env="EMB_TOKEN", batch_size=2,
                         transport=httpx.MockTransport(handler))
        out = p.embed(["a", "bbb", "cc"])
        assert out[:, 0].tolist() == [1.0, 3.0, 2.0]
        assert state["n"] == 2
        assert state["bodies"][0] == {"model": "m", "input": ["a", "bbb"]}
        assert state["auth"] == "Bearer s3cret"
        assert p.dim == 4

    def test_retries_then_succeeds(self):
        handler, state = embeddings_handler(fail_first=2)
        p = HTTPEmbedder("http://x", "m", max_retries=3, backoff=0, transport=httpx.MockTransport(handler))
        assert p.embed(["a"]).shape == (1, 4)
        assert state["n"] == 3

    def test_retry_budget_exhausted(self):
        handler, state = embeddings_handler(fail_first=10, status=503)
        p = HTTPEmbedder("http://x", "m", max_retries=2, backoff=0, transport=httpx.MockTransport(handler))
        with pytest.raises(TransportError):
            p.embed(["a"])
        assert state["n"] == 3

    def test_client_error_not_retried(self):
        handler, state = embeddings_handler(fail_first=10, status=400)
        p = HTTPEmbedder("http://x", "m", max_retries=5, backoff=0, transport=httpx.MockTransport(handler))
        with pytest.raises(ProviderError):
            p.embed(["a"])
        assert state["n"] == 1

    def test_through_cache(self):
        handler, state = embeddings_handler()
        p = HTTPEmbedder("http://x", "m", transport=httpx.MockTransport(handler))
        cache = EmbeddingCache()
        embed_all(p, ["a", "b"], cache)
        embed_all(p, ["b", "a"], cache)
        assert state["n"] == 1

import base64
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamterm.embedding import (AudioSpan, FileStoreProvider, GoldSpan, MockProvider, OracleProvider, PoolingHead,
                                  RemoteProvider, attention_pool, input_hash, l2_normalize, pool_and_project)
from streamterm.errors import DegenerateVectorError, EmbeddingError, RetryableEmbeddingError
from streamterm.glossary import write_matrix


def span(samples, start=0.0, rate=100):
    samples = np.asarray(samples, dtype=np.float32)
    return AudioSpan(samples, rate, start, start + len(samples) / rate)


def reference_pool(H, head):
    # loop-level evaluation: score each row, stable softmax, weighted sum
    scores = []
    for row in H:
        hidden = [math.tanh(sum(row[a] * head.w1[a, j] for a in range(len(row))) + head.b1[j])
                  for j in range(head.w1.shape[1])]
        scores.append(sum(h * w for h, w in zip(hidden, head.w2)) + head.b2)
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    z = sum(e)
    return np.array([sum(e[t] / z * H[t, c] for t in range(len(H))) for c in range(H.shape[1])])


def test_l2_normalize_examples():
    assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=0, rtol=1e-15)
    u = l2_normalize(np.array([0.3, -1.2, 2.0]))
    assert np.max(np.abs(l2_normalize(u) - u)) <= 1e-12
    with pytest.raises(DegenerateVectorError):
        l2_normalize(np.zeros(4))
    with pytest.raises(DegenerateVectorError):
        l2_normalize(np.full(3, 1e-14))


def test_pool_single_row_is_identity():
    head = PoolingHead.random(6, 3, seed=1)
    H = np.arange(6, dtype=float)[None, :]
    assert np.array_equal(attention_pool(H, head), H[0])


def test_pool_zero_mlp_is_mean():
    D = 5
    head = PoolingHead(np.zeros((D, 2)), np.zeros(2), np.zeros(2), 0.0, np.eye(D))
    H = np.random.default_rng(0).standard_normal((4, D))
    assert np.allclose(attention_pool(H, head), H.mean(axis=0), atol=1e-15)


def test_pool_matches_reference_implementation():
    rng = np.random.default_rng(7)
    H = rng.standard_normal((5, 8))
    head = PoolingHead.random(8, 4, seed=3)
    head.b1 = rng.standard_normal(head.b1.shape)
    assert np.max(np.abs(attention_pool(H, head) - reference_pool(H, head))) < 1e-10


def test_pool_default_hidden_width():
    head = PoolingHead.random(16, 4)
    assert head.w1.shape == (16, 4) and head.proj_bias is None


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(-50, 50, allow_nan=False)), st.integers(0, 100))
def test_pool_is_convex_combination(H, seed):
    head = PoolingHead.random(H.shape[1], 2, seed=seed)
    v = attention_pool(H, head)
    slack = 1e-9 * (1 + np.abs(H).max())
    assert np.all(v >= H.min(axis=0) - slack) and np.all(v <= H.max(axis=0) + slack)


def test_pool_errors():
    head = PoolingHead.random(3, 2)
    with pytest.raises(ValueError):
        attention_pool(np.zeros((0, 3)), head)
    with pytest.raises(ValueError):
        attention_pool(np.array([[1.0, np.nan, 0.0]]), head)
    with pytest.raises(ValueError):
        PoolingHead(np.full((3, 1), np.inf), np.zeros(1), np.zeros(1), 0.0, np.eye(3))


def test_pool_and_project_unit_and_roundtrip(tmp_path):
    head = PoolingHead.random(8, 4, seed=2)
    head.proj_bias = np.ones(4)
    H = np.random.default_rng(1).standard_normal((6, 8))
    v = pool_and_project(H, head)
    assert v.shape == (4,) and abs(np.linalg.norm(v) - 1) < 1e-12
    path = tmp_path / "head.npz"
    head.save(path)
    back = PoolingHead.load(path)
    assert np.array_equal(pool_and_project(H, back), v)


def test_mock_deterministic_and_distinct():
    p = MockProvider(32, seed=5)
    a = span(np.sin(np.arange(200)))
    assert np.array_equal(p.embed_window(a), p.embed_window(span(np.sin(np.arange(200)))))
    assert np.array_equal(p.embed_term("abc"), MockProvider(32, seed=5).embed_term("abc"))
    assert float(p.embed_term("abc") @ p.embed_term("abd")) < 1 - 1e-6
    assert not np.array_equal(p.embed_term("abc"), MockProvider(32, seed=6).embed_term("abc"))
    for v in (p.embed_window(a), p.embed_term("x")):
        assert v.shape == (32,) and abs(np.linalg.norm(v) - 1) < 1e-6


def test_mock_audio_and_text_namespaces_differ():
    p = MockProvider(8)
    raw = np.frombuffer(b"abcd", dtype=np.float32)
    assert not np.array_equal(p.embed_window(span(raw)), p.embed_term("abcd"))


def test_mock_rejects_empty_inputs():
    p = MockProvider(8)
    with pytest.raises(ValueError):
        p.embed_term("")
    with pytest.raises(ValueError):
        p.embed_window(span([]))


def _oracle(n_terms=30, d=16, spans=()):
    term = MockProvider(d, seed=11)
    vecs = np.array([term.embed_term(f"term{i}") for i in range(n_terms)])
    return OracleProvider(vecs, list(spans), term), vecs


def test_oracle_single_gold_term():
    p, vecs = _oracle(spans=[GoldSpan(4, 1.0, 1.5)])
    v = p.embed_window(AudioSpan(np.zeros(10, np.float32), 100, 0.5, 2.0))
    assert abs(float(v @ vecs[4]) - 1.0) < 1e-12


def test_oracle_two_gold_terms_beat_every_other_term():
    p, vecs = _oracle(spans=[GoldSpan(2, 0.1, 0.4), GoldSpan(9, 0.6, 0.9)])
    v = p.embed_window(AudioSpan(np.zeros(10, np.float32), 100, 0.0, 1.0))
    assert np.allclose(v, l2_normalize(vecs[2] + vecs[9]))
    scores = vecs @ v
    others = [scores[i] for i in range(len(vecs)) if i not in (2, 9)]
    assert min(scores[2], scores[9]) > max(others)


def test_oracle_partial_span_and_null_window():
    p, vecs = _oracle(spans=[GoldSpan(3, 0.9, 1.3)])
    v = p.embed_window(AudioSpan(np.zeros(10, np.float32), 100, 0.0, 1.0))
    assert np.array_equal(v, p.null_vector)
    assert abs(np.linalg.norm(v) - 1) < 1e-12


def test_oracle_top_set_is_gold_set_by_enumeration():
    # general position, made checkable: with mutual coherence mu < 1 / (2|S| - 1) every gold
    # cosine provably exceeds every non-gold cosine, so the top-|S| set must equal S
    rng = np.random.default_rng(0)
    checked = 0
    for trial in range(50):
        n = int(rng.integers(1, 5))
        ids = rng.choice(40, size=n, replace=False)
        spans = [GoldSpan(int(t), 0.1 * k, 0.1 * k + 0.05) for k, t in enumerate(ids)]
        p, vecs = _oracle(n_terms=40, d=2048, spans=spans)
        gram = vecs @ vecs.T
        mu = np.max(np.abs(gram - np.eye(len(vecs))))
        if not mu < 1 / (2 * n - 1):
            continue
        checked += 1
        v = p.embed_window(AudioSpan(np.zeros(4, np.float32), 100, 0.0, 1.0))
        top = set(np.argsort(-(vecs @ v))[:n].tolist())
        assert top == set(ids.tolist()), trial
    assert checked >= 40


def test_file_store_provider(tmp_path):
    vecs = np.random.default_rng(0).standard_normal((3, 6))
    write_matrix(tmp_path / "m.tidx", vecs)
    s = span(np.linspace(-1, 1, 50))
    keys = [input_hash(s.pcm_bytes()), input_hash("BERT".encode())]
    (tmp_path / "m.jsonl").write_text("".join(json.dumps({"hash": k, "row": i}) + "\n" for i, k in enumerate(keys)))
    p = FileStoreProvider(tmp_path / "m.tidx", tmp_path / "m.jsonl")
    assert np.allclose(p.embed_window(s), l2_normalize(vecs[0].astype(np.float32)))
    assert np.allclose(p.embed_term("BERT"), l2_normalize(vecs[1].astype(np.float32)))
    with pytest.raises(EmbeddingError):
        p.embed_term("unknown")


def test_remote_provider_protocol(json_server):
    def handler(path, body):
        v = np.arange(1, body["dim"] + 1, dtype=float)
        return 200, {"vector": v.tolist()}

    with json_server(handler) as srv:
        p = RemoteProvider(srv.url, 1024, api_key="k123")
        v = p.embed_term("masked language model")
        assert v.shape == (1024,) and abs(np.linalg.norm(v) - 1) < 1e-9
        audio = span([0.25, -0.5])
        p.embed_window(audio)
    (path1, body1, headers1), (path2, body2, _) = srv.requests
    assert path1 == "/embed" and body1 == {"kind": "text", "data": "masked language model", "dim": 1024}
    assert headers1.get("Authorization") == "Bearer k123"
    assert body2["kind"] == "audio" and base64.b64decode(body2["data"]) == audio.pcm_bytes()


def test_remote_provider_retries_then_fails(json_server):
    with json_server(lambda path, body: (503, {"error": "busy"})) as srv:
        p = RemoteProvider(srv.url, 4, retries=3, backoff_s=0.0)
        with pytest.raises(RetryableEmbeddingError) as ei:
            p.embed_term("x")
    assert ei.value.attempts == 3 and len(srv.requests) == 3


def test_remote_provider_recovers_after_transient_failure(json_server):
    calls = []

    def handler(path, body):
        calls.append(1)
        return (500, {}) if len(calls) == 1 else (200, {"vector": [1.0, 0.0]})

    with json_server(handler) as srv:
        v = RemoteProvider(srv.url, 2, retries=3, backoff_s=0.0).embed_term("x")
    assert np.array_equal(v, [1.0, 0.0]) and len(calls) == 2


def test_remote_provider_rejects_wrong_dim(json_server):
    with json_server(lambda path, body: (200, {"vector": [1.0, 2.0]})) as srv:
        with pytest.raises(EmbeddingError):
            RemoteProvider(srv.url, 3).embed_term("x")


def test_unreachable_remote_reports_attempts():
    p = RemoteProvider("http://127.0.0.1:9", 4, timeout=0.5, retries=2, backoff_s=0.0)
    with pytest.raises(RetryableEmbeddingError, match="after 2 attempts"):
        p.embed_term("x")

import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamterm.embedding import MockProvider
from streamterm.errors import (DimensionError, DuplicateTermError, GlossaryFormatError, IndexingError,
                               MissingTranslationError, SchemaVersionError)
from streamterm.glossary import (Glossary, TermIndex, build_index, glossary_sidecar, load_glossary, load_index,
                                 read_matrix, save_index, search)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def brute_search(vectors, q, k):
    # per-row product-sum, row by row, independent of the index code path
    scores = [(float(np.sum(vectors[i] * q)), i) for i in range(len(vectors))]
    scores.sort(key=lambda x: (-x[0], x[1]))
    return [(i, s) for s, i in scores[:k]]


def random_unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_two_line_tsv(tmp_path):
    p = write(tmp_path, "g.tsv", "term\tzh\nBERT\tBERT\nattention mechanism\t注意力机制\n")
    g = load_glossary(p, ["zh"])
    assert [(e.term_id, e.source_term, e.translations["zh"]) for e in g] == [
        (0, "BERT", "BERT"), (1, "attention mechanism", "注意力机制")]


def test_jsonl_format(tmp_path):
    rows = [{"term": "BERT", "target_translations": {"zh": "BERT", "de": "BERT"}},
            {"term": " attention mechanism ", "target_translations": {"zh": "注意力机制", "de": "Aufmerksamkeit"}}]
    p = write(tmp_path, "g.jsonl", "\n".join(json.dumps(r, ensure_ascii=False) for r in rows) + "\n")
    g = load_glossary(p, ["zh", "de"])
    assert len(g) == 2
    assert g[1].source_term == "attention mechanism"  # trimmed, case preserved
    assert g.find("ATTENTION MECHANISM").term_id == 1


def test_empty_file_is_empty_glossary(tmp_path):
    g = load_glossary(write(tmp_path, "e.tsv", ""), ["zh"])
    assert len(g) == 0


def test_duplicate_names_later_line(tmp_path):
    lines = ["term\tzh", "a\t1", "dup\t2", "b\t3", "c\t4", "d\t5", "DUP\t6"]
    with pytest.raises(DuplicateTermError) as ei:
        load_glossary(write(tmp_path, "d.tsv", "\n".join(lines) + "\n"), ["zh"])
    assert ei.value.line == 7
    assert "line 7" in str(ei.value)


def test_missing_language_rejected_with_line(tmp_path):
    p = write(tmp_path, "m.tsv", "term\tzh\tde\nBERT\tBERT\t\n")
    with pytest.raises(GlossaryFormatError) as ei:
        load_glossary(p, ["zh", "de"])
    assert ei.value.line == 2


@pytest.mark.parametrize("text,line", [
    ("nonsense header\nx\n", 1),
    ("term\tzh\nonly-one-column\n", 2),
    ('{"term": "a", "target_translations": {"zh": "b"}}\n{broken\n', 2),
    ('{"term": "a", "target_translations": {"zh": 3}}\n', 1),
    ("term\tzh\n \tx\n", 2),
])
def test_parse_errors_carry_line(tmp_path, text, line):
    with pytest.raises(GlossaryFormatError) as ei:
        load_glossary(write(tmp_path, "bad.txt", text), ["zh"])
    assert ei.value.line == line


def test_missing_translation_lookup(small_glossary):
    with pytest.raises(MissingTranslationError, match="valor"):
        small_glossary[3].translation("ja")


def test_build_index_single_term():
    g = Glossary.from_pairs([("BERT", {"zh": "BERT"})])
    idx = build_index(g, MockProvider(16, seed=0))
    assert idx.vectors.shape == (1, 16)
    assert abs(np.linalg.norm(idx.vectors[0]) - 1) < 1e-12


def test_build_index_100_terms_unit_rows():
    g = Glossary.from_pairs((f"term {i}", {"zh": str(i)}) for i in range(100))
    idx = build_index(g, MockProvider(32, seed=3))
    norms = np.linalg.norm(idx.vectors, axis=1)
    assert idx.vectors.shape == (100, 32)
    assert np.all((norms >= 1 - 1e-6) & (norms <= 1 + 1e-6))


def test_build_index_bit_identical():
    g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(20))
    a = build_index(g, MockProvider(24, seed=9))
    b = build_index(g, MockProvider(24, seed=9))
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_build_index_reports_failing_term():
    class Flaky(MockProvider):
        def embed_term(self, text):
            if text == "bad":
                raise RuntimeError("boom")
            return super().embed_term(text)

    g = Glossary.from_pairs([("ok", {"zh": "1"}), ("bad", {"zh": "2"})])
    with pytest.raises(IndexingError) as ei:
        build_index(g, Flaky(8))
    assert ei.value.term == "bad"


def test_search_self_match_and_k0(rng):
    g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(20))
    idx = TermIndex(g, random_unit(rng, 20, 16))
    hits = search(idx, idx.vectors[7], 5)
    assert hits[0][0] == 7 and abs(hits[0][1] - 1.0) < 1e-6
    assert search(idx, idx.vectors[7], 0) == []
    assert len(search(idx, idx.vectors[7], 50)) == 20


def test_search_matches_exhaustive_sort(rng):
    g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(50))
    idx = TermIndex(g, random_unit(rng, 50, 16))
    q = random_unit(rng, 1, 16)[0]
    got = search(idx, q, 10)
    want = brute_search(idx.vectors, q, 10)
    assert [i for i, _ in got] == [i for i, _ in want]
    assert np.allclose([s for _, s in got], [s for _, s in want], rtol=0, atol=1e-12)


def test_search_oracle_1000_seeded_cases():
    for seed in range(1000):
        r = np.random.default_rng(seed)
        n, d, k = int(r.integers(0, 40)), int(r.integers(1, 12)), int(r.integers(0, 45))
        # duplicated rows force exact ties so the id rule is exercised
        base = random_unit(r, max(n, 1), d)[:n]
        if n > 2:
            base[int(r.integers(0, n))] = base[0]
        g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(n))
        idx = TermIndex(g, base)
        q = random_unit(r, 1, d)[0]
        got = search(idx, q, k)
        want = brute_search(idx.vectors, q, k)
        assert [i for i, _ in got] == [i for i, _ in want], seed
        assert len(got) == min(k, n)


def test_ties_break_by_ascending_id():
    g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(4))
    v = np.array([[0, 1.0], [1.0, 0], [1.0, 0], [0, 1.0]])
    idx = TermIndex(g, v)
    assert [i for i, _ in search(idx, np.array([1.0, 0]), 4)] == [1, 2, 0, 3]


def test_search_errors(rng):
    g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(3))
    idx = TermIndex(g, random_unit(rng, 3, 4))
    with pytest.raises(DimensionError):
        search(idx, np.ones(5) / np.sqrt(5), 2)
    with pytest.raises(ValueError):
        search(idx, np.ones(4), 2)
    with pytest.raises(ValueError):
        search(idx, idx.vectors[0], -1)


def test_index_is_immutable_and_search_pure(rng):
    g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(30))
    idx = TermIndex(g, random_unit(rng, 30, 8))
    before = idx.vectors.copy()
    with pytest.raises(ValueError):
        idx.vectors[0, 0] = 2.0
    queries = random_unit(rng, 64, 8)
    serial = [search(idx, q, 5) for q in queries]
    with ThreadPoolExecutor(max_workers=8) as pool:
        parallel = list(pool.map(lambda q: search(idx, q, 5), queries))
    assert serial == parallel
    assert np.array_equal(before, idx.vectors)


def test_rejects_non_unit_rows():
    g = Glossary.from_pairs([("a", {"zh": "b"})])
    with pytest.raises(ValueError):
        TermIndex(g, np.array([[1.0, 1.0]]))


def test_save_load_roundtrip(tmp_path, small_glossary):
    idx = build_index(small_glossary, MockProvider(12, seed=1))
    path = tmp_path / "idx.tidx"
    save_index(idx, path)
    raw = path.read_bytes()
    assert raw[:4] == b"TIDX"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 4
    assert int.from_bytes(raw[12:16], "little") == 12
    assert len(raw) == 16 + 4 * 4 * 12
    assert glossary_sidecar(path).exists()
    back = load_index(path, ["zh"])
    assert [e.source_term for e in back.entries] == [e.source_term for e in small_glossary]
    assert np.allclose(back.vectors, idx.vectors, atol=1e-7)


def test_load_rejects_unknown_version(tmp_path, small_glossary):
    idx = build_index(small_glossary, MockProvider(4, seed=1))
    path = tmp_path / "idx.tidx"
    save_index(idx, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(SchemaVersionError):
        read_matrix(path)


@given(st.lists(st.text(alphabet="abcAB ", min_size=1, max_size=6), max_size=12))
def test_loaded_ids_sequential_and_unique(tmp_path_factory, terms):
    seen, kept = set(), []
    for t in terms:
        k = t.strip().casefold()
        if k and k not in seen:
            seen.add(k)
            kept.append(t.strip())
    p = tmp_path_factory.mktemp("g") / "g.tsv"
    p.write_text("term\tzh\n" + "".join(f"{t}\tx\n" for t in kept), encoding="utf-8")
    g = load_glossary(p, ["zh"])
    assert [e.term_id for e in g] == list(range(len(kept)))
    assert [e.source_term for e in g] == kept


def test_identical_rows_tie_wherever_they_sit(rng):
    # regression: a BLAS matrix-vector product can score equal rows differently by position
    for _ in range(200):
        n, d = int(rng.integers(2, 400)), int(rng.integers(1, 65))
        v = random_unit(rng, n, d)
        j = int(rng.integers(1, n))
        v[j] = v[0]
        g = Glossary.from_pairs((f"t{i}", {"zh": str(i)}) for i in range(n))
        hits = dict(search(TermIndex(g, v), random_unit(rng, 1, d)[0], n))
        assert hits[0] == hits[j]

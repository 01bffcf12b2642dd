import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamterm.driver import AUDIO_PLACEHOLDER, parse_term_map, system_prompt
from streamterm.embedding import MockProvider
from streamterm.glossary import Glossary, TermIndex, build_index
from streamterm.synth import (MAP_BUDGET, AlignedWord, MinedNegatives, Pattern, PhraseSpan, RandomNegatives,
                              TermMapSample, TermPair, choose_pattern, dedup_candidates, mine_hard_negatives,
                              negative_cap, normalize_phrase, pair_windows, render_user_turn,
                              sample_negative_count, synth_sst_instance, synth_term_map, term_duration_stats)


def P(text, s, e):
    return PhraseSpan(text, s, e)


def big_glossary(n=100, lang="zh"):
    return Glossary.from_pairs((f"term {i}", {lang: f"译{i}"}) for i in range(n))


def test_pair_windows_examples():
    words = [AlignedWord("x", 0.0, 2.5)]
    pairs = pair_windows(words, [P("attention", 1.0, 1.5)])
    assert [(p.start_s, p.end_s) for p in pairs] == [(0.0, 1.92), (0.96, 2.88)]
    assert [[q.text for q in p.positives] for p in pairs] == [["attention"], ["attention"]]

    pairs = pair_windows(words, [P("late", 1.8, 2.1)])
    assert [[q.text for q in p.positives] for p in pairs] == [[], ["late"]]


def test_pair_windows_cover_utterance_and_keep_empty_windows():
    words = [AlignedWord("a", 0.0, 0.4), AlignedWord("b", 5.0, 5.3)]
    pairs = pair_windows(words, [])
    assert pairs[0].start_s == 0.0 and pairs[-1].end_s >= 5.3
    assert pairs[-2].end_s < 5.3
    assert all(not p.positives for p in pairs)
    assert pair_windows([], []) == []


def brute_pairs(phrases, start, W=1.92):
    return sorted(q.text for q in phrases if q.start_s >= start - 1e-9 and q.end_s <= start + W + 1e-9)


@given(st.lists(st.tuples(st.floats(0, 8), st.floats(0.05, 2.5)), max_size=10))
def test_pair_windows_match_brute_force(spans):
    phrases = [P(f"p{i}", round(s, 3), round(s + d, 3)) for i, (s, d) in enumerate(spans)]
    words = [AlignedWord("w", 0.0, 0.5)]
    for pair in pair_windows(words, phrases):
        assert sorted(q.text for q in pair.positives) == brute_pairs(phrases, pair.start_s)
        assert pair.end_s - pair.start_s == pytest.approx(1.92)


def test_dedup_examples():
    ps = [P("neural network", 0, 1), P("network", 1, 2), P("neural network", 3, 4), P("bert", 5, 6),
          P("network architecture", 6, 7), P("a network", 8, 9)]
    out = dedup_candidates(ps)
    assert [p.text for p in out] == ["neural network", "bert", "network architecture", "a network"]
    assert out[0].start_s == 0  # first occurrence kept


def test_dedup_single_word_never_swallows():
    ps = [P("net", 0, 1), P("netflix", 1, 2)]
    assert [p.text for p in dedup_candidates(ps)] == ["net", "netflix"]


@given(st.lists(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=3), max_size=8))
def test_dedup_idempotent_and_subset(token_lists):
    ps = [P(" ".join(t), i, i + 1) for i, t in enumerate(token_lists)]
    once = dedup_candidates(ps)
    assert dedup_candidates(once) == once
    assert all(p in ps for p in once)
    texts = [p.text for p in once]
    assert len(set(texts)) == len(texts)


def test_normalize_phrase():
    assert normalize_phrase("  Attention   Mechanism, ") == "attention mechanism"
    assert normalize_phrase('"BERT model"') == "BERT model"
    assert normalize_phrase("...") == ""


def test_negative_count_support():
    for dur, cap in [(1.92, 17), (0.96, 8), (0.05, 0), (1.0, 9)]:
        assert negative_cap(dur) == cap
        rng = np.random.default_rng(0)
        seen = {sample_negative_count(dur, rng) for _ in range(4000)}
        assert seen == set(range(cap + 1))
    with pytest.raises(ValueError):
        sample_negative_count(0.0, np.random.default_rng(0))


def test_standard_map_three_gold_capped_at_budget():
    g = big_glossary()
    gold = [TermPair("term 1", "译1"), TermPair("term 2", "译2"), TermPair("term 3", "译3")]

    class Fixed:
        def integers(self, lo, hi):
            return 19

        def permutation(self, n):
            return np.arange(n)

    sample = synth_term_map(gold, Pattern.STANDARD, 2.5, RandomNegatives(g, "zh", np.random.default_rng(1)),
                            Fixed())
    assert sample.n_sampled == 19
    assert len(sample.entries) == 20
    assert sum(is_gold for _, _, is_gold in sample.entries) == 3
    assert not {s for s, _, gold_flag in sample.entries if not gold_flag} & {"term 1", "term 2", "term 3"}


def test_none_and_all_wrong_maps():
    g = big_glossary()
    rng = np.random.default_rng(3)
    gold = [TermPair("term 5", "译5")]
    assert synth_term_map(gold, "none", 1.92, RandomNegatives(g, "zh", rng), rng).entries == []
    for _ in range(200):
        s = synth_term_map(gold, "all_wrong", 1.92, RandomNegatives(g, "zh", rng), rng)
        assert 1 <= len(s.entries) <= 17
        assert all(src != "term 5" and not flag for src, _, flag in s.entries)


def test_all_wrong_with_no_candidates_raises():
    g = Glossary.from_pairs([("only", {"zh": "唯一"})])
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="exhausted"):
        synth_term_map([TermPair("only", "唯一")], "all_wrong", 1.92, RandomNegatives(g, "zh", rng), rng)


def test_standard_rejects_oversized_gold():
    gold = [TermPair(f"g{i}", "x") for i in range(21)]
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        synth_term_map(gold, "standard", 1.92, RandomNegatives(big_glossary(), "zh", rng), rng)


@given(st.integers(0, 10_000), st.floats(0.05, 4.0), st.integers(0, 6))
def test_maps_never_exceed_budget(seed, dur, n_gold):
    rng = np.random.default_rng(seed)
    g = big_glossary(60)
    gold = [TermPair(f"term {i}", f"译{i}") for i in range(n_gold)]
    pattern = choose_pattern((0.8, 0.1, 0.1), rng)
    s = synth_term_map(gold, pattern, dur, RandomNegatives(g, "zh", rng), rng)
    assert len(s.entries) <= MAP_BUDGET
    if pattern is Pattern.STANDARD:
        assert {x[0] for x in s.entries if x[2]} == {x.source for x in gold}
    srcs = [x[0] for x in s.entries]
    assert len(set(srcs)) == len(srcs)


def test_term_map_sample_enforces_budget():
    with pytest.raises(ValueError):
        TermMapSample(Pattern.STANDARD, [("a", "b", False)] * 21)


def test_choose_pattern():
    rng = np.random.default_rng(0)
    assert {choose_pattern((1, 0, 0), rng) for _ in range(50)} == {Pattern.STANDARD}
    with pytest.raises(ValueError):
        choose_pattern((0, 0, 0), rng)
    with pytest.raises(ValueError):
        choose_pattern((1, -1, 1), rng)


def test_mine_hard_negatives_matches_sorted_cosines():
    g = big_glossary(50)
    idx = build_index(g, MockProvider(16, seed=2))
    anchor = idx.vectors[7]
    got = mine_hard_negatives(idx, anchor, 5, exclude=[7, "TERM 3"])
    scores = [(float(np.sum(idx.vectors[i] * anchor)), i) for i in range(50) if i not in (7, 3)]
    want = [i for _, i in sorted(scores, key=lambda x: (-x[0], x[1]))[:5]]
    assert [e.term_id for e in got] == want
    assert mine_hard_negatives(idx, anchor, 0) == []


def test_mined_negatives_prefer_similar_terms():
    v = np.array([[1.0, 0, 0], [0.8, 0.6, 0], [0, 1.0, 0], [0, 0, 1.0]])
    g = Glossary.from_pairs([("gold", {"de": "G"}), ("near", {"de": "N"}), ("mid", {"de": "M"}), ("far", {"de": "F"})])
    src = MinedNegatives(TermIndex(g, v), "de", v[0])
    assert [p.source for p in src.draw(2, {"gold"})] == ["near", "mid"]


def test_term_duration_stats_examples():
    ps = [P(str(i), 0.0, d) for i, d in enumerate([0.2, 0.4, 0.4, 1.0])]
    s = term_duration_stats(ps)
    assert s["count"] == 4 and s["mean_s"] == pytest.approx(0.5)
    assert (s["p50"], s["p90"], s["max_s"]) == (0.4, 1.0, 1.0)
    assert sum(b["count"] for b in s["histogram"]) == 4
    assert s["histogram"][-1]["hi"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        term_duration_stats([])


def test_render_user_turn_matches_prompt_format():
    s = TermMapSample(Pattern.STANDARD, [("DORAL", "多拉尔", True), ("valor", "勇气", False)])
    text = render_user_turn(s)
    assert text == "<audio>\n\nterm_map:\nDORAL=多拉尔\nvalor=勇气"
    assert parse_term_map(text) == [("DORAL", "多拉尔"), ("valor", "勇气")]
    assert render_user_turn(TermMapSample(Pattern.NONE, [])) == AUDIO_PLACEHOLDER


def utterance():
    return {"id": "u1", "chunks": [
        {"audio": "c1.wav", "dur_s": 1.92, "gold": [{"term": "term 4", "translation": "译4"}], "translation": "一"},
        {"audio": "c2.wav", "dur_s": 1.92, "gold": [], "translation": "二"},
        {"audio": "c3.wav", "dur_s": 0.7, "gold": [{"term": "term 9", "translation": "译9"}], "translation": "三"},
    ]}


@pytest.mark.parametrize("strategy", ["random", "mined"])
def test_sst_instance_structure(strategy):
    g = big_glossary(80)
    emb = MockProvider(16, seed=1)
    idx = build_index(g, emb)
    inst = synth_sst_instance(utterance(), "zh", (0.8, 0.1, 0.1), np.random.default_rng(5), g, idx, emb, strategy)
    msgs = inst["messages"]
    assert msgs[0] == {"role": "system", "content": system_prompt("zh")}
    assert [m["role"] for m in msgs[1:]] == ["user", "assistant"] * 3
    assert [m["content"] for m in msgs[2::2]] == ["一", "二", "三"]
    assert inst["audios"] == ["c1.wav", "c2.wav", "c3.wav"]
    assert all(n <= MAP_BUDGET for n in inst["map_sizes"])
    assert inst["negatives"] == strategy
    for m, pattern in zip(msgs[1::2], inst["patterns"]):
        assert m["content"].startswith(AUDIO_PLACEHOLDER)
        if pattern == "none":
            assert m["content"] == AUDIO_PLACEHOLDER


def test_sst_instance_deterministic_and_standard_only():
    g = big_glossary(80)
    a = synth_sst_instance(utterance(), "zh", (1, 0, 0), np.random.default_rng(9), g)
    b = synth_sst_instance(utterance(), "zh", (1, 0, 0), np.random.default_rng(9), g)
    assert a == b
    assert a["patterns"] == ["standard"] * 3
    assert "term 4=译4" in a["messages"][1]["content"]

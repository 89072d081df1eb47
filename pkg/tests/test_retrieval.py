import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcmeval.corpus import Corpus, make_record
from tcmeval.retrieval import (
    DEFAULT_B,
    DEFAULT_K1,
    Index,
    build_index,
    render_entry,
    search,
    tokenize,
)


class TestTokenize:
    def test_single_cjk_run_unigrams_then_bigrams(self):
        assert tokenize("甘草") == ["甘", "草", "甘草"]

    def test_five_char_run(self):
        assert tokenize("护肝宁胶囊") == [
            "护", "肝", "宁", "胶", "囊",
            "护肝", "肝宁", "宁胶", "胶囊",
        ]

    def test_latin_words_lowercased(self):
        assert tokenize("BM25 Retrieval") == ["bm25", "retrieval"]

    def test_mixed_runs_stay_separate(self):
        # the latin stretch splits the CJK text into two runs: no bigram bridges it
        tokens = tokenize("丹参ABC片剂")
        assert tokens == ["丹", "参", "丹参", "abc", "片", "剂", "片剂"]

    def test_punctuation_breaks_runs(self):
        assert tokenize("丹参、红花") == ["丹", "参", "丹参", "红", "花", "红花"]

    def test_empty(self):
        assert tokenize("") == []
        assert tokenize("  ，。") == []

    @settings(max_examples=150, deadline=None)
    @given(st.text(alphabet="当归川芎红花丹参甘草", min_size=1, max_size=20))
    def test_counting_oracle_single_run(self, text):
        # one uninterrupted CJK run of length n yields n + (n-1) tokens
        tokens = tokenize(text)
        n = len(text)
        assert len(tokens) == n + (n - 1)
        assert tokens[:n] == list(text)
        assert tokens[n:] == [text[i : i + 2] for i in range(n - 1)]


def brute_force_scores(corpus, query, k1=DEFAULT_K1, b=DEFAULT_B):
    """Independent BM25 oracle: per-document recount, no inverted index."""
    docs = []
    for rec in corpus.records:
        parts = [rec.name] + rec.display_ingredients()
        if rec.source_text:
            parts.append(rec.source_text)
        docs.append(tokenize(" ".join(parts)))
    n_docs = len(docs)
    avg_len = sum(len(d) for d in docs) / n_docs
    scores = {}
    for doc_id, doc in enumerate(docs):
        total = 0.0
        for token in tokenize(query):
            tf = doc.count(token)
            if tf == 0:
                continue
            df = sum(1 for d in docs if token in d)
            idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
            total += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len(doc) / avg_len))
        if total > 0.0:
            scores[doc_id] = total
    return scores


class TestSearch:
    def test_matches_brute_force_oracle(self, sample_corpus, sample_index):
        queries = [rec.name for rec in sample_corpus.records[:12]]
        queries += ["甘草", "丹参 红花", "当归（酒炙）", "感冒", "bm25", "不存在词组"]
        for query in queries:
            expected = brute_force_scores(sample_corpus, query)
            got = {e.doc_id: e.score for e in search(sample_index, query, k=len(sample_corpus))}
            assert set(got) == set(expected), query
            for doc_id, score in expected.items():
                assert got[doc_id] == pytest.approx(score, abs=1e-9), query

    def test_exact_name_hit_at_1(self, sample_corpus, sample_index):
        for rec in sample_corpus.records:
            top = search(sample_index, rec.name, k=1)
            assert top and top[0].drug_name == rec.name

    def test_prefix_consistency(self, sample_corpus, sample_index):
        for query in ("甘草", "丹参", "六味地黄丸", "感冒颗粒"):
            small = search(sample_index, query, k=3)
            large = search(sample_index, query, k=10)
            assert [e.doc_id for e in small] == [e.doc_id for e in large][: len(small)]

    def test_ties_break_by_ascending_doc_id(self):
        # two docs identical except for equal-length names: same score
        corpus = Corpus(
            [
                make_record("甲甲", ["黄芪"]),
                make_record("乙乙", ["黄芪"]),
                make_record("丙丙", ["当归"]),
            ]
        )
        results = search(build_index(corpus), "黄芪", k=3)
        assert [e.doc_id for e in results] == [0, 1]
        assert results[0].score == pytest.approx(results[1].score, abs=1e-12)

    def test_zero_scores_dropped(self, sample_index):
        assert search(sample_index, "qqq zzz", k=5) == []

    def test_k_bounds_results(self, sample_index):
        assert len(search(sample_index, "甘草", k=4)) == 4
        with pytest.raises(ValueError):
            search(sample_index, "甘草", k=0)

    def test_duplicate_query_tokens_double_weight(self, sample_corpus, sample_index):
        single = {e.doc_id: e.score for e in search(sample_index, "甘草", k=36)}
        double = {e.doc_id: e.score for e in search(sample_index, "甘草 甘草", k=36)}
        assert set(single) == set(double)
        for doc_id, score in single.items():
            assert double[doc_id] == pytest.approx(2 * score, rel=1e-12)


class TestIndex:
    def test_doc_ids_are_load_order(self, sample_corpus, sample_index):
        assert sample_index.doc_names == [rec.name for rec in sample_corpus.records]
        assert sample_index.doc_count == len(sample_corpus.records)

    def test_postings_sorted_by_doc_id(self, sample_index):
        for plist in sample_index.postings.values():
            ids = [doc_id for doc_id, _ in plist]
            assert ids == sorted(ids)

    def test_text_field_optional(self):
        with_text = Corpus([make_record("药甲", ["当归"], "说明文字")])
        without = Corpus([make_record("药甲", ["当归"])])
        longer = build_index(with_text).doc_lengths[0]
        shorter = build_index(without).doc_lengths[0]
        assert longer > shorter

    def test_save_load_roundtrip(self, tmp_path, sample_corpus, sample_index):
        path = tmp_path / "index.json"
        sample_index.save(path)
        loaded = Index.load(path)
        assert loaded.corpus_fingerprint == sample_corpus.fingerprint()
        assert loaded.postings == sample_index.postings
        assert loaded.doc_lengths == sample_index.doc_lengths
        for query in ("甘草", "心脑健片"):
            a = [(e.doc_id, e.score) for e in search(sample_index, query)]
            b = [(e.doc_id, e.score) for e in search(loaded, query)]
            assert a == b

    def test_render_entry_contains_name_and_ingredients(self, sample_corpus):
        rec = sample_corpus.lookup("复方丹参片")
        rendered = render_entry(rec)
        assert rendered.splitlines()[0] == "复方丹参片"
        assert "丹参" in rendered and "三七" in rendered and "冰片" in rendered

    def test_rendered_text_in_results(self, sample_index):
        top = search(sample_index, "复方丹参片", k=1)[0]
        assert top.rendered_text.startswith("复方丹参片")

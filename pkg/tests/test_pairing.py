import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

import oracles
from dualview.corpus import Corpus, TranscriptSentence, WorldConfig, generate_corpus
from dualview.errors import ConfigError, ContractError, ParseError
from dualview.pairing import (
    ClipTextPair,
    FilterConfig,
    build_pairs,
    contains_keyword,
    filter_a,
    filter_w,
    find_overlaps,
    read_pairs,
    sample_clip,
    segment_sentences,
    write_pairs,
)

CFG = FilterConfig(keyword_list=frozenset({"trocar", "clip", "hook"}))
WORDS = ["we", "the", "trocar", "clip", "hook", "now", "place", "a", "here", "this", "is", "cut"]


def A(text, conf, start=0.0, end=4.0, vid="v"):
    if isinstance(conf, float):
        conf = (conf,) * len(text.split())
    return TranscriptSentence(vid, "A", start, end, text, tuple(conf))


def W(start, end, text="we now place the trocar", vid="v"):
    return TranscriptSentence(vid, "W", start, end, text)


def random_a(rng, n_words=None):
    n = n_words or int(rng.integers(1, 9))
    words = list(rng.choice(WORDS, size=n))
    return A(" ".join(words), tuple(float(c) for c in rng.uniform(0, 1, n)))


def world_corpus(seed=0, **kw):
    return generate_corpus(WorldConfig(seed=seed, n_videos=3, duration_s=60.0, **kw))


def world_filter(corpus_cfg=WorldConfig()):
    return FilterConfig(keyword_list=frozenset(corpus_cfg.keywords()))


class TestFilterConfig:
    def test_bad_values(self):
        with pytest.raises(ConfigError):
            FilterConfig(confidence_threshold=1.2)
        with pytest.raises(ConfigError):
            FilterConfig(min_words=0)

    def test_round_trip(self):
        assert FilterConfig.from_dict(CFG.to_dict()) == CFG

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="colour"):
            FilterConfig.from_dict({"colour": 1})


class TestSegmentation:
    def test_even_split(self):
        out = segment_sentences([W(0, 4, "we clip. we cut.")], CFG)
        assert [(s.start_s, s.end_s, s.text) for s in out] == [(0, 2, "we clip."), (2, 4, "we cut.")]

    def test_symbol_free_identity(self):
        s = W(1, 3, "we place the trocar")
        assert segment_sentences([s], CFG) == [s]

    def test_confidences_partitioned(self):
        text = "a b c, d e f. g h i; j k l"
        confs = tuple(np.linspace(0.1, 0.9, 12))
        out = segment_sentences([A(text, confs, 0.0, 12.0)], CFG)
        assert len(out) == 4
        assert sum((s.word_confidences for s in out), ()) == confs
        assert [s.start_s for s in out] == [0, 3, 6, 9]

    @given(st.lists(st.sampled_from(["we", "cut.", "the", "hook,", "now;", "go"]), min_size=1, max_size=20))
    def test_preserves_words_and_time(self, words):
        s = A(" ".join(words), tuple(range(len(words))), 2.0, 9.0)
        out = segment_sentences([s], CFG)
        assert " ".join(o.text for o in out) == s.text
        assert sum((o.word_confidences for o in out), ()) == s.word_confidences
        assert out[0].start_s == 2.0 and out[-1].end_s == 9.0
        assert all(a.end_s == b.start_s for a, b in zip(out, out[1:]))


class TestFilters:
    def test_low_confidence_dropped(self):
        assert filter_a([A("place the trocar now", 0.39)], CFG) == []

    def test_threshold_inclusive(self):
        assert len(filter_a([A("place the trocar now", 0.4)], CFG)) == 1

    def test_all_pass(self):
        s = A("we place the trocar here", 1.0)
        assert filter_a([s], CFG) == [s]

    def test_no_keyword_dropped(self):
        assert filter_a([A("we place it here now", 1.0)], CFG) == []

    def test_keyword_must_be_whole_word(self):
        assert not contains_keyword("the trocars", ["trocar"])
        assert contains_keyword("The Trocar.", ["trocar"])

    def test_source_contract(self):
        with pytest.raises(ContractError):
            filter_a([W(0, 1)], CFG)
        with pytest.raises(ContractError):
            filter_w([A("a b c", 1.0)], CFG)

    def test_predicate_replay(self, rng):
        sentences = [random_a(rng) for _ in range(1000)]
        kept = filter_a(sentences, CFG)

        def brute(s):
            words = [w.strip(".,;?!").lower() for w in s.text.split()]
            return np.mean(s.word_confidences) >= 0.4 and bool(set(words) & CFG.keyword_list) and len(words) >= 3

        assert kept == [s for s in sentences if brute(s)]
        assert 0 < len(kept) < 1000

    def test_w_length_rule(self):
        assert filter_w([W(0, 1, "the trocar")], CFG) == []

    def test_w_fluent_without_keyword_kept(self):
        s = W(0, 5, "now we slowly continue to work on this part of it")
        assert filter_w([s], CFG) == [s]

    def test_w_stop_words_only_dropped(self):
        assert filter_w([W(0, 1, "we the a it")], CFG) == []

    def test_w_superset_of_a(self, rng):
        sentences = [random_a(rng) for _ in range(500)]
        kept_a = {s.text for s in filter_a(sentences, CFG)}
        as_w = [W(s.start_s, s.end_s, s.text) for s in sentences]
        kept_w = {s.text for s in filter_w(as_w, CFG)}
        assert kept_a <= kept_w


class TestOverlaps:
    def test_basic(self):
        pool = [W(3, 6), W(6, 8), W(10, 12)]
        assert find_overlaps(A("a b c", 1.0, 5, 9), pool) == pool[:2]

    def test_touching_excluded(self):
        assert find_overlaps(A("a b c", 1.0, 5, 9), [W(9, 11)]) == []

    def test_mixed_videos_rejected(self):
        with pytest.raises(ContractError):
            find_overlaps(A("a b c", 1.0), [W(0, 1, vid="other")])

    def test_against_pairwise_oracle(self, rng):
        for _ in range(20):
            starts = rng.uniform(0, 100, 500)
            ivs = sorted((float(s), float(s + rng.uniform(0.1, 8))) for s in starts)
            pool = [W(s, e) for s, e in ivs]
            a0 = float(rng.uniform(0, 100))
            a = A("a b c", 1.0, a0, a0 + float(rng.uniform(0.5, 10)))
            got = [(w.start_s, w.end_s) for w in find_overlaps(a, pool)]
            assert got == oracles.overlaps((a.start_s, a.end_s), ivs)


class TestSampleClip:
    def test_center_in_boundary(self, rng):
        a = A("place the trocar", 1.0, 4.5, 5.5)
        for _ in range(1000):
            p = sample_clip(a, [W(4, 6)], rng, video_duration=60.0)
            assert 4 <= p.center_s <= 6
            assert 0 < p.clip_length <= 10
            assert p.check(10.0, 60.0) == []

    def test_clamped_to_video(self, rng):
        a = A("place the trocar", 1.0, 0.0, 1.0)
        for _ in range(200):
            p = sample_clip(a, [W(0, 1)], rng, video_duration=3.0)
            assert p.clip_start_s == 0.0 and p.clip_end_s <= 3.0

    def test_empty_overlaps(self, rng):
        with pytest.raises(ContractError):
            sample_clip(A("a b c", 1.0), [], rng, video_duration=10.0)

    def test_fixed_length(self, rng):
        p = sample_clip(A("a b c", 1.0, 20, 22), [W(20, 22)], rng, video_duration=60.0, fixed_length=4.0)
        assert p.clip_length == pytest.approx(4.0)

    def test_center_uniform_ks(self):
        rng = np.random.default_rng(7)
        ws = [W(3, 5), W(4, 9)]
        a = A("a b c", 1.0, 4, 6)
        centers = np.array([sample_clip(a, ws, rng, video_duration=60.0).center_s for _ in range(100_000)])
        stat = sps.kstest(centers, sps.uniform(loc=3, scale=6).cdf).statistic
        assert stat < 0.02

    def test_length_range(self, rng):
        a = A("a b c", 1.0, 20, 22)
        lengths = [sample_clip(a, [W(20, 22)], rng, video_duration=60.0).clip_length for _ in range(2000)]
        assert min(lengths) > 2.0 and max(lengths) <= 10.0
        assert np.mean(lengths) == pytest.approx(6.0, abs=0.2)


class TestBuildPairs:
    def test_empty_corpus(self):
        assert build_pairs(Corpus(), CFG, 0) == []

    def test_no_keyword_sentences(self):
        corpus = world_corpus()
        assert build_pairs(corpus, FilterConfig(keyword_list=frozenset({"zzz"})), 0) == []

    def test_deterministic(self):
        corpus, cfg = world_corpus(), world_filter()
        assert build_pairs(corpus, cfg, 5, 2) == build_pairs(corpus, cfg, 5, 2)
        assert build_pairs(corpus, cfg, 5) != build_pairs(corpus, cfg, 6)

    def test_stats_consistent(self):
        stats = {}
        pairs = build_pairs(world_corpus(), world_filter(), 0, 2, stats=stats)
        assert stats["pairs"] == len(pairs) == 2 * (stats["a_kept"] - stats["a_without_overlap"])
        dropped = stats["a_dropped_confidence"] + stats["a_dropped_keyword"] + stats["a_dropped_length"]
        assert dropped + stats["a_kept"] == stats["a_segments"]

    def test_fuzz_invariants(self):
        count = 0
        for seed in range(8):
            wc = WorldConfig(seed=seed, n_videos=20, duration_s=120.0, a_misalignment=0.3, narration_lag_s=2.0)
            corpus = generate_corpus(wc)
            for p in build_pairs(corpus, world_filter(), seed, 8):
                assert p.check(10.0, corpus.videos[p.video_id].duration_s) == []
                count += 1
        assert count >= 10_000

    def test_threshold_monotone(self):
        corpus = world_corpus(1)
        sizes = []
        for t in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
            cfg = dataclasses.replace(world_filter(), confidence_threshold=t)
            sizes.append(len(build_pairs(corpus, cfg, 0)))
        assert sizes == sorted(sizes, reverse=True)

    def test_noise_free_timeline_cross_check(self):
        wc = WorldConfig(
            seed=4, n_videos=3, a_fragmentation=0.0, w_keyword_corruption=0.0,
            a_confidence_noise=0.0, a_misalignment=0.0, w_filler=0.0,
        )
        corpus = generate_corpus(wc)
        kws = wc.keywords()
        pairs = build_pairs(corpus, world_filter(wc), 0)
        assert pairs
        for p in pairs:
            words = {w.strip(".,;?!") for w in p.a_sentence.words}
            cls = next(i for i, k in enumerate(kws) if k in words)
            timeline = corpus.videos[p.video_id].event_timeline
            assert any(c == cls and min(e, p.clip_end_s) > max(s, p.clip_start_s) for c, s, e in timeline)

    def test_pairs_file_round_trip(self, tmp_path):
        pairs = build_pairs(world_corpus(), world_filter(), 0)
        write_pairs(tmp_path / "pairs.jsonl", pairs)
        assert read_pairs(tmp_path / "pairs.jsonl") == pairs

    def test_pairs_file_bad_line(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"video_id": "v"}\n')
        with pytest.raises(ParseError, match=":1:"):
            read_pairs(path)


def test_pair_check_reports_violations():
    a = A("a b c", 1.0, 0, 1)
    bad = ClipTextPair("v", 0.0, 12.0, 5.0, a, (W(2, 3),))
    problems = bad.check(10.0, 60.0)
    assert len(problems) == 3

import csv
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from dualview import zeroshot as zs
from dualview.corpus import VideoRecord
from dualview.encoders import HyperConfig, encode_clip, encode_frames, embed_texts, init_params
from dualview.errors import (
    ContractError,
    DimensionError,
    EmptyInputError,
    MissingGroundTruthError,
    UndefinedAPError,
)


def result(qid, ids):
    return zs.RankedResult(qid, tuple(ids), np.linspace(1, 0, len(ids)))


def video(features, fps=8.0, vid="v"):
    features = np.asarray(features, dtype=np.float64)
    dur = features.shape[0] / fps
    return VideoRecord(vid, dur, fps, features, [(0, 0.0, dur)])


TINY = HyperConfig(d=6, embed_dim=4, hidden_dim=8)


class TestRanking:
    def test_self_retrieval(self, rng):
        q = rng.normal(size=8)
        fillers = np.eye(8)[1:4] * 5
        q[1:4] = 0
        index = zs.RetrievalIndex.build(["a", "b", "c", "self"], np.vstack([fillers, q]))
        assert zs.rank_gallery(q, index).ids[0] == "self"

    def test_ties_by_ascending_id(self):
        index = zs.RetrievalIndex.build([3, 1, 2], np.ones((3, 4)))
        assert zs.rank_gallery(np.ones(4), index).ids == (1, 2, 3)

    def test_matches_sort_oracle(self, rng):
        lat = rng.normal(size=(100, 5))
        q = rng.normal(size=5)
        index = zs.RetrievalIndex.build(range(100), lat)
        cos = [oracles.cosine(q.tolist(), row.tolist()) for row in lat]
        expected = sorted(range(100), key=lambda i: (-cos[i], i))
        res = zs.rank_gallery(q, index)
        assert list(res.ids) == expected
        assert np.all(np.diff(res.scores) <= 0)

    @given(arrays(np.float64, (12, 3), elements=st.integers(-2, 2).map(float)))
    def test_is_permutation(self, lat):
        lat = lat + np.array([0.0, 0.0, 10.0])  # keep rows away from zero
        index = zs.RetrievalIndex.build(range(12), lat)
        res = zs.rank_gallery(np.array([1.0, 0.5, 0.2]), index)
        assert sorted(res.ids) == list(range(12))

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            zs.rank_gallery(np.ones(3), zs.RetrievalIndex.build([], np.zeros((0, 3))))
        with pytest.raises(DimensionError):
            zs.rank_gallery(np.ones(2), zs.RetrievalIndex.build([0], np.ones((1, 3))))
        with pytest.raises(ContractError):
            zs.RetrievalIndex.build([0, 0], np.ones((2, 3)))

    def test_index_rows_unit(self, rng):
        index = zs.RetrievalIndex.build(range(5), rng.normal(size=(5, 3)) * 7)
        np.testing.assert_allclose(np.linalg.norm(index.latents, axis=1), 1.0)


class TestRecall:
    def test_identity_matrix(self):
        index = zs.RetrievalIndex.build(range(6), np.eye(6))
        results = zs.rank_all(np.eye(6), range(6), index)
        gt = {i: i for i in range(6)}
        assert zs.recall_at_k(results, gt, 1) == 1.0
        assert zs.median_rank(results, gt) == 1

    def test_gt_last(self):
        results = [result(q, [x for x in range(10) if x != q] + [q]) for q in range(10)]
        assert zs.recall_at_k(results, {q: q for q in range(10)}, 5) == 0.0
        assert zs.recall_at_k(results, {q: q for q in range(10)}, 10) == 1.0

    def test_missing_ground_truth_names_query(self):
        with pytest.raises(MissingGroundTruthError, match="'lost'"):
            zs.recall_at_k([result("lost", [1, 2])], {}, 1)

    def test_gt_set_uses_best_rank(self):
        assert zs.gt_rank(result("q", [5, 4, 3]), {3, 4}) == 2

    def test_random_scores_monte_carlo(self):
        rng = np.random.default_rng(0)
        n, k, trials = 537, 10, 1000
        ids = list(range(n))
        hits = []
        for t in range(trials):
            scores = rng.normal(size=n)
            order = sorted(ids, key=lambda i: (-scores[i], i))
            hits.append(zs.recall_at_k([result(t, order)], {t: 0}, k))
        p = k / n
        se = np.sqrt(p * (1 - p) / trials)
        assert abs(np.mean(hits) - p) < 4 * se

    @given(st.lists(st.integers(0, 19), min_size=1, max_size=20))
    def test_monotone_in_k(self, gts):
        results = [result(i, range(20)) for i in range(len(gts))]
        gt = dict(enumerate(gts))
        values = [zs.recall_at_k(results, gt, k) for k in range(1, 21)]
        assert values == sorted(values) and values[-1] == 1.0


class TestMedianRank:
    @pytest.mark.parametrize("ranks,expected", [([1, 3, 5], 3), ([1, 2, 3, 4], 2), ([1], 1)])
    def test_examples(self, ranks, expected):
        results = [result(i, range(10)) for i in range(len(ranks))]
        gt = {i: r - 1 for i, r in enumerate(ranks)}
        assert zs.median_rank(results, gt) == expected


class TestGrounding:
    def test_tiling_count(self):
        segs = zs.sliding_segments(30.0, 6.0, 6.0)
        assert len(segs) == 5 and segs[-1] == (24.0, 30.0)
        assert len(zs.sliding_segments(31.0, 6.0, 2.0)) == (31 - 6) // 2 + 1

    def test_window_too_long(self):
        with pytest.raises(ContractError):
            zs.sliding_segments(5.0, 6.0, 2.0)

    def test_iou(self):
        assert zs.temporal_iou((0, 6), (3, 9)) == pytest.approx(1 / 3)
        assert zs.temporal_iou((0, 1), (2, 3)) == 0.0

    def test_planted_segment(self):
        # five disjoint 2 s windows, each filled with its own one-hot feature
        feats = np.repeat(np.eye(5), 16, axis=0)
        params = init_params(10, 5, TINY, 0)
        target = encode_frames(np.eye(5)[[3]], params).data[0]
        res, segs = zs.ground_query(video(feats), target, 2.0, 2.0, params, 4, "q")
        gt = zs.grounding_hits(segs, (6.0, 8.0))
        assert gt == {3}
        assert zs.recall_at_k([res], {"q": gt}, 1) == 1.0

    def test_random_features_match_hit_fraction(self):
        rng = np.random.default_rng(1)
        params = init_params(10, 4, TINY, 2)
        gt_interval = (10.0, 16.0)
        trials, hits, expected = 600, 0, None
        for t in range(trials):
            v = video(rng.normal(size=(240, 4)))
            res, segs = zs.ground_query(v, rng.normal(size=TINY.d), 6.0, 2.0, params, 4, t)
            good = zs.grounding_hits(segs, gt_interval)
            expected = len(good) / len(segs)
            hits += zs.recall_at_k([res], {t: good}, 1)
        se = np.sqrt(expected * (1 - expected) / trials)
        assert abs(hits / trials - expected) < 4 * se


class TestPrompts:
    def test_bundled_files(self):
        phase = zs.bundled_prompts("cholec80_phase")
        tool = zs.bundled_prompts("cholec80_tool")
        assert len(phase.classes) == len(tool.classes) == 7
        assert not phase.multi_label and tool.multi_label
        assert any("hook" in p.lower() for p in tool.prompts)

    def test_round_trip(self, tmp_path):
        ps = zs.bundled_prompts("cholec80_phase")
        ps.save(tmp_path / "p.json")
        assert zs.PromptClassSet.load(tmp_path / "p.json") == ps

    def test_triplet_template(self):
        assert zs.triplet_prompt("hook", "dissect", "gallbladder") == "I use hook to dissect the gallbladder"
        ps = zs.triplet_prompt_set({0: ("grasper", "retract", "liver")})
        assert ps.task == "triplet" and ps.prompts == ["I use grasper to retract the liver"]

    def test_invalid_sets(self):
        with pytest.raises(ContractError):
            zs.PromptClassSet("organ", (zs.PromptClass(0, "a", "b"),))
        with pytest.raises(ContractError):
            zs.PromptClassSet("tool", (zs.PromptClass(0, "a", " "),))
        with pytest.raises(ContractError):
            zs.PromptClassSet("tool", (zs.PromptClass(0, "a", "x"), zs.PromptClass(0, "b", "y")))
        with pytest.raises(EmptyInputError):
            zs.PromptClassSet("tool", ())


class TestClassify:
    @pytest.fixture
    def prompt_set(self):
        return zs.PromptClassSet("phase", tuple(zs.PromptClass(i, f"c{i}", f"p{i}") for i in range(5)))

    def test_planted_class(self, prompt_set):
        lookup = dict(zip(prompt_set.prompts, np.eye(5)))
        scores = zs.classify(np.eye(5)[3], prompt_set, lambda texts: np.stack([lookup[t] for t in texts]))
        assert zs.predict_single_label(scores, prompt_set).tolist() == [3]

    def test_scale_invariance(self, prompt_set, rng):
        basis = rng.normal(size=(5, 6))
        enc = lambda texts: basis[[int(t[1:]) for t in texts]]
        x = rng.normal(size=(3, 6))
        a = zs.classify(x, prompt_set, enc)
        b = zs.classify(x * 17.5, prompt_set, enc)
        c = zs.classify(x, prompt_set, lambda texts: 0.01 * enc(texts))
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a, c, atol=1e-12)
        assert np.array_equal(a.argmax(1), b.argmax(1))


class TestAveragePrecision:
    def test_perfect(self):
        assert zs.average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_second_of_two(self):
        assert zs.average_precision([0.9, 0.1], [0, 1]) == 0.5

    def test_no_positives(self):
        with pytest.raises(UndefinedAPError):
            zs.average_precision([0.3, 0.2], [0, 0])

    def test_against_oracle(self, rng):
        for _ in range(50):
            scores = np.round(rng.normal(size=200), 1)  # ties on purpose
            labels = rng.random(200) < 0.2
            labels[0] = True
            assert abs(zs.average_precision(scores, labels) - oracles.average_precision(scores.tolist(), labels.tolist())) < 1e-12

    @given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30, unique=True), st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariant(self, scores, seed):
        labels = np.random.default_rng(seed).random(len(scores)) < 0.5
        labels[0] = True
        s = np.array(scores, dtype=np.float64)
        # exact in float64, so strictly monotone after rounding too
        assert zs.average_precision(s, labels) == zs.average_precision(2 * s**3 + 5, labels)

    def test_map_skips_absent_classes(self):
        aps, mean = zs.mean_average_precision(np.array([[0.9, 0.1], [0.2, 0.3]]), np.array([[1, 0], [0, 0]]))
        assert aps[0] == 1.0 and np.isnan(aps[1]) and mean == 1.0


class TestF1:
    def test_perfect(self):
        f1, mean = zs.f1_per_class([0, 1, 2], [0, 1, 2])
        assert f1.tolist() == [1, 1, 1] and mean == 1.0

    def test_absent_class_is_zero(self):
        f1, _ = zs.f1_per_class([0, 0], [0, 0], n_classes=2)
        assert f1.tolist() == [1.0, 0.0]

    def test_confusion_oracle(self, rng):
        for _ in range(30):
            pred, true = rng.integers(0, 5, 100), rng.integers(0, 5, 100)
            f1, mean = zs.f1_per_class(pred, true, 5)
            expected = oracles.f1_from_confusion(pred.tolist(), true.tolist(), 5)
            np.testing.assert_allclose(f1, expected, atol=1e-15)
            assert mean == pytest.approx(np.mean(expected))


def enumerate_and_pool(scores, labels, cmap, which):
    """Explicit component pooling: one column per distinct component key."""
    keys = sorted({tuple(cmap[k][p] for p in which) for k in cmap})
    s = np.array([[max(row[k] for k in cmap if tuple(cmap[k][p] for p in which) == key) for key in keys] for row in scores])
    y = np.array([[max(row[k] for k in cmap if tuple(cmap[k][p] for p in which) == key) for key in keys] for row in labels])
    aps = [oracles.average_precision(s[:, c].tolist(), y[:, c].tolist()) for c in range(len(keys)) if y[:, c].any()]
    return float(np.mean(aps))


class TestTriplets:
    def test_single_class_perfect(self):
        out = zs.triplet_component_ap(np.array([[0.9], [0.1]]), np.array([[1], [0]]), {0: (0, 0, 0)})
        assert all(v == 1.0 for v in out.values()) and len(out) == 6

    def test_shared_instrument_max_pool(self):
        keys, pooled = zs.pool_components(np.array([[0.2, 0.7], [0.5, 0.1]]), {0: (0, 1, 2), 1: (0, 3, 4)}, (0,))
        assert keys == [(0,)] and pooled[:, 0].tolist() == [0.7, 0.5]

    def test_unmapped_class(self):
        with pytest.raises(ContractError):
            zs.pool_components(np.zeros((2, 2)), {0: (0, 0, 0)}, (0,))

    def test_against_enumeration_oracle(self, rng):
        cmap = {k: t for k, t in enumerate(itertools.islice(itertools.product(range(3), range(2), range(3)), 0, 18, 2))}
        scores = rng.random((60, len(cmap)))
        labels = (rng.random((60, len(cmap))) < 0.3).astype(int)
        out = zs.triplet_component_ap(scores, labels, cmap)
        for name, which in zs.COMPONENTS.items():
            assert abs(out[f"AP_{name}"] - enumerate_and_pool(scores, labels, cmap, which)) < 1e-12


class TestActivationMap:
    def test_self_similarity(self, rng):
        params = init_params(10, 4, TINY, 0)
        v = video(rng.normal(size=(40, 4)))
        k = 17
        query = encode_clip(v.frame_features[[k]], params, 1).data[0]
        series = zs.activation_map(v, query, params)
        assert abs(series[k] - 1.0) < 1e-9
        assert np.all(np.abs(series) <= 1 + 1e-12)

    def test_constant_video(self, rng):
        params = init_params(10, 4, TINY, 0)
        series = zs.activation_map(video(np.tile(rng.normal(size=4), (30, 1))), rng.normal(size=TINY.d), params)
        assert np.ptp(series) < 1e-12

    def test_csv(self, tmp_path, rng):
        v = video(rng.normal(size=(16, 4)))
        zs.write_activation_csv(tmp_path / "a.csv", v, np.linspace(0, 1, 16))
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert rows[0] == ["frame_index", "time_s", "similarity"] and rows[2][:2] == ["1", "0.125"]
        assert len(rows) == 17


def test_metrics_csv(tmp_path):
    zs.write_metrics_csv(tmp_path / "m.csv", {"R@1": 0.5, "MedR": 3})
    assert (tmp_path / "m.csv").read_text() == "metric,value\nR@1,0.5\nMedR,3.0\n"


class TestTrainedModel:
    def test_planted_event_activation(self, demo_models):
        for m in demo_models:
            inside, outside = [], []
            for vid in sorted(m.test.videos)[:4]:
                v = m.test.videos[vid]
                cls, s, e = max(v.event_timeline, key=lambda ev: ev[2] - ev[1])
                query = embed_texts([f"now we work on the {m.keywords[cls]}"], m.vocab, m.params, m.hyper)[0]
                series = zs.activation_map(v, query, m.params)
                mask = (v.frame_times() >= s) & (v.frame_times() < e)
                inside.append(series[mask].mean())
                outside.append(series[~mask].mean())
            assert np.mean(inside) > np.mean(outside)

    def test_classification_beats_random_params(self, demo_models):
        from dualview import experiments as ex

        for m in demo_models:
            prompts = ex.synthetic_prompts(m.keywords)
            trained, _ = ex.zeroshot_eval(m.params, m.vocab, m.hyper, m.test, prompts, 2.0)
            rand, _ = ex.zeroshot_eval(m.random_params, m.vocab, m.hyper, m.test, prompts, 2.0)
            assert trained["mAP"] > rand["mAP"]

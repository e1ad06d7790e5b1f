import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualview import gradcore as gc
from dualview.encoders import (
    BYTE_BASE,
    PAD,
    SPACE,
    UNK,
    WORD_BASE,
    HyperConfig,
    SubwordVocab,
    build_vocab,
    encode_clip,
    encode_frames,
    encode_text,
    init_params,
    load_params,
    normalize_text,
    sample_frames,
    save_params,
    tokenize,
)
from dualview.errors import ConfigError, ContractError, DimensionError, EmptyInputError, IntegrityError

CORPUS = [
    "we place the trocar and then the clip",
    "the hook is used on the jejunostomy",
    "we clip the duct, then cut it",
]
HYPER = HyperConfig(N=12, d=8, embed_dim=6, hidden_dim=10)


@pytest.fixture
def vocab():
    return build_vocab(CORPUS, 300)


@pytest.fixture
def params(vocab):
    return init_params(len(vocab), 5, HYPER, 0)


class TestVocab:
    def test_frequency_order(self):
        v = build_vocab(["a a b"], 300)
        assert v.words[:2] == ["a", "b"]

    def test_ties_by_first_appearance(self):
        assert build_vocab(["z y x"], 300).words == ["z", "y", "x"]

    def test_deterministic(self):
        assert build_vocab(CORPUS, 300) == build_vocab(CORPUS, 300)

    def test_target_size_caps_words(self):
        v = build_vocab(CORPUS, WORD_BASE + 3)
        assert len(v) == WORD_BASE + 3 and v.words[0] == "the"

    def test_empty_corpus(self):
        with pytest.raises(EmptyInputError):
            build_vocab([], 300)
        with pytest.raises(EmptyInputError):
            build_vocab(["  "], 300)

    def test_target_below_byte_space(self):
        with pytest.raises(ConfigError):
            build_vocab(CORPUS, 100)

    def test_unseen_word_falls_back(self, vocab):
        ids = vocab.encode("zzxq")
        assert UNK not in ids and ids[0] == ids[-1] == SPACE
        assert all(vocab.is_byte(i) for i in ids)

    def test_json_round_trip(self, vocab, tmp_path):
        vocab.save(tmp_path / "vocab.json")
        assert SubwordVocab.load(tmp_path / "vocab.json") == vocab

    def test_incompatible_layout(self):
        with pytest.raises(IntegrityError):
            SubwordVocab.from_json({"specials": ["x"], "n_bytes": 256, "words": []})

    def test_misspelling_shares_prefix(self):
        v = build_vocab(["jejunostomy " * 3 + "jejun stomy"], 300)
        good = [v.token_string(t) for t in v.encode("jejunostomy")]
        bad = [v.token_string(t) for t in v.encode("jejunstomy") if t != SPACE]
        assert good == ["jejunostomy"]
        # greedy longest match picks the in-vocab piece first
        assert bad[0] == "jejun"
        joined = "".join(bad)
        lcp = next(i for i, (x, y) in enumerate(zip(joined + "\0", good[0])) if x != y)
        assert joined == "jejunstomy" and lcp == 5

    @given(st.text(max_size=40))
    def test_round_trip_up_to_normalization(self, text):
        v = build_vocab(CORPUS, 300)
        assert v.decode(v.encode(text)) == normalize_text(text)


class TestTokenize:
    def test_empty_string(self, vocab):
        assert tokenize("", vocab, 7).tolist() == [PAD] * 7

    def test_truncates(self, vocab):
        assert len(tokenize(" ".join(CORPUS * 10), vocab, 5)) == 5

    @settings(max_examples=300)
    @given(st.text(max_size=200), st.integers(1, 80))
    def test_exact_length(self, text, n):
        ids = tokenize(text, build_vocab(CORPUS, 300), n)
        assert ids.shape == (n,) and ids.min() >= 0

    def test_length_fuzz_10k(self, vocab, rng):
        alphabet = np.array(list("abc xyz.,é日\t"))
        for _ in range(10_000):
            text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 60))))
            assert len(tokenize(text, vocab, 77)) == 77

    def test_every_nonblank_string_gets_a_token(self, vocab):
        for s in ("?", "é", "日本", "a_b"):
            assert len(vocab.encode(s)) >= 1


class TestSampleFrames:
    def test_even_spacing(self):
        assert sample_frames(0.0, 10 / 8, 8.0, 4).tolist() == [0, 3, 6, 9]

    def test_single_frame_repeated(self):
        assert sample_frames(1.0, 1.1, 8.0, 4).tolist() == [8, 8, 8, 8]

    def test_empty_clip(self):
        with pytest.raises(ContractError):
            sample_frames(1.01, 1.1, 8.0, 4)

    @given(st.floats(0, 50), st.floats(0.2, 10), st.integers(1, 9))
    def test_containment(self, start, length, T):
        idx = sample_frames(start, start + length, 8.0, T)
        assert len(idx) == T
        assert np.all(idx / 8.0 >= start - 1e-9) and np.all(idx / 8.0 < start + length)
        assert np.all(np.diff(idx) >= 0)

    def test_clamped_to_video(self):
        assert sample_frames(0.0, 10.0, 8.0, 3, n_frames=40).tolist() == [0, 20, 39]


class TestEncodeClip:
    def test_identical_frames(self, params, rng):
        z = rng.normal(size=(1, 5))
        out = encode_clip(np.repeat(z, 4, axis=0), params, 4).data
        np.testing.assert_allclose(out, encode_frames(z, params).data, atol=1e-12)

    def test_permutation_invariant(self, params, rng):
        z = rng.normal(size=(4, 5))
        a = encode_clip(z, params, 4).data
        b = encode_clip(z[[2, 0, 3, 1]], params, 4).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_two_frames_average(self, params, rng):
        z = rng.normal(size=(2, 5))
        both = encode_clip(z, params, 2).data[0]
        singles = encode_clip(z, params, 1).data
        np.testing.assert_allclose(both, singles.mean(axis=0), atol=1e-12)

    def test_batch_shape(self, params, rng):
        assert encode_clip(rng.normal(size=(12, 5)), params, 4).shape == (3, HYPER.d)

    def test_feature_dim_mismatch(self, params):
        with pytest.raises(DimensionError):
            encode_clip(np.zeros((4, 6)), params, 4)


class TestEncodeText:
    def test_identical_sentences(self, vocab, params):
        ids = np.stack([tokenize(CORPUS[0], vocab, 12)] * 2)
        out = encode_text(ids, params).data
        assert np.array_equal(out[0], out[1])

    @given(st.integers(1, 30))
    def test_shape_any_n(self, n):
        v = build_vocab(CORPUS, 300)
        p = init_params(len(v), 5, HYPER, 0)
        ids = np.stack([tokenize(t, v, n) for t in CORPUS])
        assert encode_text(ids, p).shape == (3, HYPER.d)

    def test_id_out_of_range(self, params):
        with pytest.raises(DimensionError):
            encode_text(np.array([[params.vocab_size]]), params)

    def test_token_permutation_invariant(self, vocab, params):
        ids = tokenize("we place the trocar", vocab, 12)
        perm = ids.copy()
        perm[:4] = perm[[3, 1, 0, 2]]
        a = encode_text(ids[None], params).data
        b = encode_text(perm[None], params).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_pads_count_unless_masked(self, vocab, params):
        short = tokenize("the hook", vocab, 6)[None]
        long = tokenize("the hook", vocab, 12)[None]
        assert not np.allclose(encode_text(short, params).data, encode_text(long, params).data)
        np.testing.assert_allclose(
            encode_text(short, params, masked=True).data, encode_text(long, params, masked=True).data, atol=1e-12
        )

    def test_embedding_gradient_matches_finite_differences(self, vocab, rng):
        p = init_params(len(vocab), 5, HYPER, 1)
        ids = np.stack([tokenize(t, vocab, 12) for t in CORPUS])
        probe = rng.normal(size=(3, HYPER.d))

        def loss_of(table):
            p.tok_emb = table
            return gc.sum_all(gc.mul(encode_text(ids, p), gc.constant(probe)))

        table = gc.Tensor(p.tok_emb.data.copy(), requires_grad=True)
        with gc.Tape() as tape:
            loss = loss_of(table)
        gc.backward(loss, tape, wrt=[table])
        rows = sorted(set(ids.reshape(-1).tolist()))[:6]
        h = 1e-6
        for r in rows:
            for c in range(HYPER.embed_dim):
                up, dn = table.data.copy(), table.data.copy()
                up[r, c] += h
                dn[r, c] -= h
                num = (loss_of(gc.Tensor(up)).item() - loss_of(gc.Tensor(dn)).item()) / (2 * h)
                ana = table.grad[r, c]
                assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-3)
        unused = np.setdiff1d(np.arange(len(vocab)), ids)
        assert np.all(table.grad[unused] == 0)


class TestParams:
    def test_same_d_both_branches(self, params):
        params.check()
        assert params.text_proj_w.shape[1] == params.frame_proj_w.shape[1] == HYPER.d

    def test_save_load(self, params, tmp_path):
        save_params(tmp_path, params)
        loaded = load_params(tmp_path)
        for (name, a), (_, b) in zip(params.named(), loaded.named()):
            np.testing.assert_array_equal(b.data, a.data.astype(np.float32), err_msg=name)

    def test_truncated_checkpoint(self, params, tmp_path):
        save_params(tmp_path, params)
        blob = tmp_path / "encoder.f32"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(IntegrityError, match="expected"):
            load_params(tmp_path)

    def test_non_finite_rejected(self, params):
        params.text_b1.data[0] = np.nan
        with pytest.raises(IntegrityError, match="text_b1"):
            params.check()

    def test_init_deterministic(self, vocab):
        a, b = init_params(len(vocab), 5, HYPER, 3), init_params(len(vocab), 5, HYPER, 3)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), b.tensors()))


class TestHyperConfig:
    def test_validate_lists_offenders(self):
        with pytest.raises(ConfigError) as err:
            HyperConfig(tau=0, eps=2, views="x").validate()
        assert len(err.value.offenders) == 3

    def test_round_trip(self):
        h = HyperConfig(T=2, symmetric=True)
        assert HyperConfig.from_dict(h.to_dict()) == h

    def test_byte_ids_layout(self):
        assert BYTE_BASE == 4 and WORD_BASE == 260 and SPACE == BYTE_BASE + ord(" ")

"""Encoder behavior: purity, locality, snapshots, and the embedding file format."""

import numpy as np
import pytest

from muco.encoder import (
    EncoderState,
    UNK_ID,
    Vocabulary,
    WordEmbeddings,
    encode,
    encode_batch,
    encode_values,
    load_embeddings,
    load_encoder,
    save_encoder,
    write_embeddings,
)
from muco.grad import SGD, Tape, Tensor, grad_check, softmax_xent, sum_all


def tiny_embeddings(n_tokens=6, dim=4, seed=0) -> WordEmbeddings:
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.from_tokens([f"tok{i}" for i in range(n_tokens)])
    return WordEmbeddings(vocab=vocab, table=rng.normal(size=(n_tokens + 2, dim)))


def make_encoder(window=1, seed=0, **kw) -> EncoderState:
    return EncoderState.create(tiny_embeddings(), hidden_dim=5, window=window, seed=seed, **kw)


class TestVocabulary:
    def test_ids_are_dense_and_stable(self):
        v = Vocabulary.from_tokens(["a", "b"])
        assert [v.id_of(t) for t in ("a", "b")] == [2, 3]

    def test_unknown_maps_to_reserved_id(self):
        v = Vocabulary.from_tokens(["a"])
        assert v.id_of("never-seen") == UNK_ID
        assert v.id_of("a") != UNK_ID


class TestEncode:
    def test_pure_function(self):
        enc = make_encoder()
        toks = ("tok0", "tok1", "tok2")
        a = encode(enc, toks, 1).values
        b = encode(enc, toks, 1).values
        np.testing.assert_array_equal(a, b)

    def test_boundary_uses_padding(self):
        # single-token sentence with window 1: same as explicit (pad, token, pad)
        enc = make_encoder(window=1)
        single = encode(enc, ("tok0",), 0).values
        explicit = encode(enc, ("<pad>", "tok0", "<pad>"), 1).values
        np.testing.assert_array_equal(single, explicit)
        with_neighbor = encode(enc, ("tok3", "tok0"), 1).values
        assert not np.array_equal(single, with_neighbor)

    def test_locality_outside_window(self):
        enc = make_encoder(window=1)
        a = encode(enc, ("tok0", "tok1", "tok2", "tok3"), 1).values
        b = encode(enc, ("tok0", "tok1", "tok2", "tok5"), 1).values
        np.testing.assert_array_equal(a, b)
        c = encode(enc, ("tok5", "tok1", "tok2", "tok3"), 1).values
        assert not np.array_equal(a, c)

    def test_index_out_of_range(self):
        enc = make_encoder()
        with pytest.raises(IndexError):
            encode(enc, ("tok0",), 1)

    def test_unknown_token_uses_unk_embedding(self):
        enc = make_encoder(window=0)
        a = encode(enc, ("zzz",), 0).values
        b = encode(enc, ("yyy",), 0).values
        np.testing.assert_array_equal(a, b)

    def test_batch_matches_single(self):
        enc = make_encoder()
        items = [(("tok0", "tok1"), 0), (("tok2", "tok3", "tok4"), 2)]
        batched = encode_batch(enc, items).values
        singles = np.stack([encode(enc, t, i).values for t, i in items])
        # batch size changes BLAS reduction order, so agreement is to rounding
        np.testing.assert_allclose(batched, singles, atol=1e-12)
        np.testing.assert_array_equal(encode_values(enc, items, batch_size=1), singles)

    def test_gradcheck_through_encoder(self):
        enc = make_encoder(seed=3)
        target = np.array([1.0, 0.0, 0.0, 0.0, 0.0])

        def loss_with_mix_w(x):
            state = EncoderState(
                vocab=enc.vocab, embedding=enc.embedding, window=enc.window,
                mix_w=x, mix_b=enc.mix_b, out_w=enc.out_w, out_b=enc.out_b,
            )
            out = encode(state, ("tok0", "tok1", "tok2"), 1)
            return softmax_xent(out, target)

        assert grad_check(loss_with_mix_w, enc.mix_w, h=1e-5) <= 1e-4


class TestSnapshot:
    def train_one_step(self, enc, steps=1):
        opt = SGD(enc.parameters(), lr=0.1)
        for _ in range(steps):
            with Tape() as tape:
                loss = sum_all(encode(enc, ("tok0", "tok1"), 0))
            opt.zero_grad()
            tape.backward(loss)
            opt.step()

    def test_snapshot_unchanged_by_training(self):
        enc = make_encoder()
        snap = enc.snapshot()
        before = encode(snap, ("tok0", "tok1"), 0).values.copy()
        self.train_one_step(enc, steps=100)
        np.testing.assert_array_equal(encode(snap, ("tok0", "tok1"), 0).values, before)

    def test_snapshot_of_snapshot_equal(self):
        enc = make_encoder()
        s1 = enc.snapshot()
        s2 = s1.snapshot()
        for a, b in zip(s1.state_arrays().values(), s2.state_arrays().values()):
            np.testing.assert_array_equal(a, b)

    def test_training_changes_live_outputs(self):
        enc = make_encoder()
        snap = enc.snapshot()
        self.train_one_step(enc)
        h = encode(snap, ("tok0", "tok1"), 0).values
        h_tilde = encode(enc, ("tok0", "tok1"), 0).values
        assert not np.array_equal(h, h_tilde)

    def test_restore_reproduces_bit_identical_outputs(self):
        enc = make_encoder()
        snap = enc.snapshot()
        before = encode(enc, ("tok1", "tok2"), 1).values.copy()
        self.train_one_step(enc, steps=5)
        enc.restore(snap)
        np.testing.assert_array_equal(encode(enc, ("tok1", "tok2"), 1).values, before)

    def test_frozen_embeddings_flag(self):
        enc = make_encoder(train_embeddings=False)
        assert enc.embedding not in enc.parameters()


class TestEmbeddingFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("alpha 1 2 3\nbeta 4 5 6\n", encoding="utf-8")
        emb = load_embeddings(path, seed=0)
        assert len(emb.vocab) == 4  # 2 tokens + 2 specials
        assert emb.table.shape == (4, 3)
        np.testing.assert_array_equal(emb.vector("alpha"), [1.0, 2.0, 3.0])

    def test_duplicate_token_names_token(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("alpha 1 2\nalpha 3 4\n", encoding="utf-8")
        with pytest.raises(ValueError, match="alpha"):
            load_embeddings(path)

    def test_dimension_change_names_line(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("a 1 2\nb 1 2\nc 1 2\nd 1 2\ne 1 2 3\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 5"):
            load_embeddings(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValueError, match="empty"):
            load_embeddings(path)

    def test_write_then_load_round_trips(self, tmp_path):
        emb = tiny_embeddings()
        path = tmp_path / "emb.txt"
        write_embeddings(emb, path)
        again = load_embeddings(path, seed=0)
        np.testing.assert_array_equal(again.table[2:], emb.table[2:])
        assert again.vocab.tokens == emb.vocab.tokens


class TestEncoderFile:
    def test_save_load_bit_identical(self, tmp_path):
        enc = make_encoder(seed=11)
        path = tmp_path / "enc.txt"
        save_encoder(enc, path)
        again = load_encoder(path)
        for a, b in zip(enc.state_arrays().values(), again.state_arrays().values()):
            np.testing.assert_array_equal(a, np.asarray(b).reshape(a.shape))
        np.testing.assert_array_equal(
            encode(enc, ("tok0", "tok1"), 0).values, encode(again, ("tok0", "tok1"), 0).values
        )

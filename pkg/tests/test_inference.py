import math

import numpy as np
import pytest

from capgen import tensor as T
from capgen.errors import ConfigError
from capgen.imageio import read_pgm
from capgen.inference import (
    Beam,
    DecodeConfig,
    attention_map,
    beam_search,
    decode,
    export_attention,
    greedy_decode,
    words_and_alphas,
)
from capgen.vocab import END_ID, START_ID, Vocab

import oracles
from conftest import random_encoding, tiny_decoder


def sharpened(seed, scales=(3, 6, 10)):
    """Random tiny decoder with weights scaled up so distributions are peaked."""
    rng = np.random.default_rng(seed)
    n, max_len = int(rng.integers(3, 7)), int(rng.integers(3, 6))
    model = tiny_decoder(rng, vocab_size=n)
    s = float(rng.choice(scales))
    for p in model.decoder.parameters():
        p.data = p.data * s
    return model, random_encoding(rng, scale=2.0), n, max_len


class TestConfig:
    def test_bounds(self):
        with pytest.raises(ConfigError):
            DecodeConfig(beam_width=0)
        with pytest.raises(ConfigError):
            DecodeConfig(max_len=1)

    def test_batch_of_images_rejected(self):
        model = tiny_decoder(np.random.default_rng(0))
        with pytest.raises(ConfigError):
            greedy_decode(model, random_encoding(np.random.default_rng(0), batch=2), DecodeConfig())


class TestGreedy:
    @pytest.mark.parametrize("seed", range(10))
    def test_equals_width_one_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        model, enc = tiny_decoder(rng), random_encoding(rng)
        cfg = DecodeConfig(beam_width=1, max_len=6)
        g = greedy_decode(model, enc, cfg)
        b = beam_search(model, enc, cfg)
        assert g.tokens == b.tokens
        assert g.logprob == b.logprob
        assert all(x.tobytes() == y.tobytes() for x, y in zip(g.alphas, b.alphas))

    def test_terminates_within_max_len(self):
        model = tiny_decoder(np.random.default_rng(0))
        for p in model.decoder.parameters():
            p.data[...] = 0
        beam = greedy_decode(model, random_encoding(np.random.default_rng(0)), DecodeConfig(1, 5))
        # all logits tie, so the smallest id (0) wins every step and the end marker never comes
        assert beam.tokens == (START_ID, 0, 0, 0, 0, 0)
        assert not beam.finished
        assert beam.logprob == pytest.approx(-5 * math.log(5), rel=1e-6)


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(8))
    def test_exhaustive_width_matches_enumeration(self, seed, f64):
        rng = np.random.default_rng(100 + seed)
        n, max_len = int(rng.integers(3, 6)), int(rng.integers(3, 5))
        model, enc = tiny_decoder(rng, vocab_size=n), random_encoding(rng, scale=2.0)
        beam = beam_search(model, enc, DecodeConfig(n**max_len, max_len))
        seq, lp = oracles.exhaustive_best(oracles.decoder_params(model.decoder), enc.features.data[0], n, max_len)
        assert beam.tokens == seq
        assert beam.logprob == pytest.approx(lp, abs=1e-9)

    def test_result_ranks_above_every_sequence_of_its_pool(self, f64):
        model, enc, n, max_len = sharpened(5)
        table = oracles.all_sequence_logprobs(oracles.decoder_params(model.decoder), enc.features.data[0], n, max_len)
        for k in (1, 2, 3, n**max_len):
            beam = beam_search(model, enc, DecodeConfig(k, max_len))
            assert beam.logprob == pytest.approx(table[beam.tokens], abs=1e-9)
            assert beam.logprob <= max(table.values()) + 1e-12

    def test_width_monotonicity_is_not_guaranteed(self, f64):
        # witness: pruning to two beams drops the greedy prefix and ends lower
        model, enc, n, max_len = sharpened(2399)
        g = greedy_decode(model, enc, DecodeConfig(1, max_len))
        b = beam_search(model, enc, DecodeConfig(2, max_len))
        assert b.logprob < g.logprob
        full = beam_search(model, enc, DecodeConfig(n**max_len, max_len))
        assert full.logprob >= max(g.logprob, b.logprob)

    def test_exhaustive_width_dominates_any_width(self, f64):
        for seed in range(20):
            model, enc, n, max_len = sharpened(seed)
            full = beam_search(model, enc, DecodeConfig(n**max_len, max_len)).logprob
            for k in (1, 2, 3):
                assert decode(model, enc, DecodeConfig(k, max_len)).logprob <= full + 1e-12

    def test_logprob_non_increasing_along_the_beam(self):
        rng = np.random.default_rng(4)
        model, enc = tiny_decoder(rng, vocab_size=6), random_encoding(rng)
        beam = beam_search(model, enc, DecodeConfig(3, 6))
        assert beam.logprob <= 0
        state = model.decoder.init_state(enc)
        total, totals = 0.0, []
        for prev, tok in zip(beam.tokens[:-1], beam.tokens[1:]):
            logits, state = model.decoder.decode_step([prev], state, enc)
            total += float(T.log_softmax(logits).data[0, tok])
            totals.append(total)
        assert all(b <= a + 1e-7 for a, b in zip(totals, totals[1:]))
        assert totals[-1] == pytest.approx(beam.logprob, abs=1e-5)

    def test_tie_break_prefers_finished_short_beam(self):
        model = tiny_decoder(np.random.default_rng(0), vocab_size=4)
        for p in model.decoder.parameters():
            p.data[...] = 0
        enc = random_encoding(np.random.default_rng(0))
        # uniform logits: with 3 beams the one-step end beam survives and beats longer ones
        beam = beam_search(model, enc, DecodeConfig(3, 4))
        assert beam.tokens == (START_ID, END_ID) and beam.finished
        assert beam.logprob == pytest.approx(-math.log(4), rel=1e-6)
        # with 2 beams it is cut by the lexicographically smaller (1,0), (1,1) at step one
        assert beam_search(model, enc, DecodeConfig(2, 4)).tokens == (START_ID, 0, 0, 0, 0)

    def test_finished_flag_matches_end_marker(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            model, enc = tiny_decoder(rng), random_encoding(rng)
            beam = beam_search(model, enc, DecodeConfig(2, 4))
            assert beam.finished == (beam.tokens[-1] == END_ID)
            assert beam.tokens[0] == START_ID and len(beam.tokens) - 1 <= 4
            assert len(beam.alphas) == len(beam.tokens) - 1

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        model, enc = tiny_decoder(rng), random_encoding(rng)
        a = beam_search(model, enc, DecodeConfig(2, 8))
        b = beam_search(model, enc, DecodeConfig(2, 8))
        assert a.tokens == b.tokens and a.logprob == b.logprob

    def test_sort_key(self):
        a = Beam((1, 5), -1.0, None)
        b = Beam((1, 4), -1.0, None)
        c = Beam((1, 9), -0.5, None)
        assert sorted([a, b, c], key=Beam.sort_key) == [c, b, a]


class TestAttentionExport:
    def test_uniform_alpha_gives_constant_map(self):
        m = attention_map(np.full(16, 1 / 16), 4, 4, 32)
        assert m.shape == (32, 32) and m.dtype == np.uint8
        assert np.unique(m).size == 1

    def test_one_hot_alpha_gives_one_block(self):
        alpha = np.zeros(16)
        alpha[6] = 1.0  # grid cell (1, 2)
        m = attention_map(alpha, 4, 4, 32)
        bright = np.argwhere(m == 255)
        assert len(bright) == 8 * 8
        assert bright.min(axis=0).tolist() == [8, 16] and bright.max(axis=0).tolist() == [15, 23]
        assert np.count_nonzero(m) == 64

    def test_files(self, tmp_path):
        alphas = [np.random.default_rng(i).dirichlet(np.ones(4)) for i in range(3)]
        paths = export_attention(alphas, 2, 2, 8, tmp_path / "maps", ["một", "hai/ba", "bốn"])
        assert [p.name for p in paths] == ["0_một.pgm", "1_hai_ba.pgm", "2_bốn.pgm"]
        for p, a in zip(paths, alphas):
            raw = p.read_bytes()
            assert raw.startswith(b"P5\n8 8\n255\n")
            img = read_pgm(p)
            r, c = np.unravel_index(np.argmax(img), img.shape)
            assert (r // 4) * 2 + c // 4 == int(np.argmax(a))

    def test_words_and_alphas_skip_markers(self):
        vocab = Vocab(["a", "b"])
        alphas = tuple(np.full(2, i, dtype=float) for i in range(4))
        beam = Beam((START_ID, 4, 0, 5, END_ID), -1.0, None, True, alphas)
        words, maps = words_and_alphas(beam, vocab)
        assert words == ["a", "b"]
        assert [m[0] for m in maps] == [0.0, 2.0]

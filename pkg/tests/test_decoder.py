import numpy as np
import pytest

from capgen import tensor as T
from capgen.decoder import Decoder, DecoderConfig, DecoderState, LSTMLayer, attend, decode_step, lstm_cell
from capgen.encoder import EncoderOutput
from capgen.errors import ConfigError, UsageError
from capgen.tensor import Tensor

import oracles
from conftest import random_encoding


def make_decoder(seed=0, **kw):
    cfg = dict(vocab_size=7, enc_dim=6, embed_dim=4, hidden_dim=5)
    cfg.update(kw)
    return Decoder(DecoderConfig(**cfg), np.random.default_rng(seed))


def enc_from(feats):
    feats = np.asarray(feats)
    return EncoderOutput(Tensor(feats[None]), 1, feats.shape[0])


class TestConfig:
    def test_room_for_markers(self):
        with pytest.raises(ConfigError):
            DecoderConfig(vocab_size=2, enc_dim=4)
        DecoderConfig(vocab_size=3, enc_dim=4)

    def test_projection_only_when_widths_differ(self):
        assert make_decoder(hidden_dim=6).att_proj is None
        assert make_decoder(hidden_dim=5).att_proj.shape == (5, 6)


class TestAttend:
    def test_identical_rows(self, f64):
        dec = make_decoder(hidden_dim=6)
        row = np.array([0.3, -0.2, 0.5, 1.0, 0.0, -1.0])
        att = attend(Tensor(np.ones((1, 6))), enc_from(np.tile(row, (5, 1))), dec)
        np.testing.assert_allclose(att.alpha.data, np.full((1, 5), 0.2), rtol=1e-12)
        np.testing.assert_allclose(att.h_attended.data[0], row, rtol=1e-12)

    def test_saturation(self, f64):
        dec = make_decoder(enc_dim=2, hidden_dim=2)
        feats = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 0.0]])
        att = attend(Tensor([[1.0, 0.0]]), enc_from(feats), dec)
        assert att.alpha.data[0, 1] > 0.999

    def test_hand_values(self, f64):
        dec = make_decoder(enc_dim=2, hidden_dim=2)
        feats = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]])
        h = np.array([1.0, 0.5])
        # scores = [1, 1, -0.5]
        e = np.exp([1.0, 1.0, -0.5])
        alpha = e / e.sum()
        att = attend(Tensor(h[None]), enc_from(feats), dec)
        np.testing.assert_allclose(att.alpha.data[0], alpha, rtol=1e-14)
        np.testing.assert_allclose(att.h_attended.data[0], alpha @ feats, rtol=1e-14)

    def test_convex_combination(self):
        dec = make_decoder()
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(9, 6)) * 2
        att = attend(Tensor(rng.normal(size=(1, 5))), enc_from(feats), dec)
        assert np.all(att.alpha.data >= 0)
        np.testing.assert_allclose(att.alpha.data.sum(), 1.0, atol=1e-6)
        ha = att.h_attended.data[0]
        assert np.all(ha >= feats.min(axis=0) - 1e-6) and np.all(ha <= feats.max(axis=0) + 1e-6)

    def test_scores_are_unscaled(self, f64):
        # witness: scaling the features by a constant changes alpha
        dec = make_decoder(enc_dim=2, hidden_dim=2)
        feats = np.array([[1.0, 0.0], [0.0, 1.0]])
        h = Tensor([[1.0, 0.0]])
        a1 = attend(h, enc_from(feats), dec).alpha.data
        a3 = attend(h, enc_from(3 * feats), dec).alpha.data
        assert not np.allclose(a1, a3)

    def test_empty_grid(self):
        dec = make_decoder()
        with pytest.raises(UsageError):
            attend(Tensor(np.zeros((1, 5))), EncoderOutput(Tensor(np.zeros((1, 0, 6))), 0, 0), dec)


class TestLSTM:
    def _layer(self, d_in=3, hidden=4, seed=0):
        return LSTMLayer(np.random.default_rng(seed), d_in, hidden)

    def test_zero_weights(self):
        layer = self._layer()
        for p in layer.parameters():
            p.data[...] = 0
        h, c = lstm_cell(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), layer)
        np.testing.assert_array_equal(h.data, 0)
        np.testing.assert_array_equal(c.data, 0)

    def test_forget_gate_saturation(self, f64):
        layer = self._layer()
        for p in layer.parameters():
            p.data[...] = 0
        layer.bias.data[4:8] = 20.0
        c0 = np.array([[0.7, -1.3, 2.0, 0.1]])
        _, c = lstm_cell(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4))), Tensor(c0), layer)
        np.testing.assert_allclose(c.data, c0, atol=1e-6)

    def test_gate_equations(self, f64):
        layer = self._layer(d_in=4, hidden=4, seed=3)
        rng = np.random.default_rng(4)
        x, h, c = (rng.normal(size=4) for _ in range(3))
        h2, c2 = lstm_cell(Tensor(x[None]), Tensor(h[None]), Tensor(c[None]), layer)
        eh, ec = oracles.lstm(x, h, c, layer.w_x.data, layer.w_h.data, layer.bias.data)
        np.testing.assert_allclose(h2.data[0], eh, rtol=1e-13)
        np.testing.assert_allclose(c2.data[0], ec, rtol=1e-13)


class TestInitState:
    def test_zero_features(self, f64):
        dec = make_decoder()
        state = dec.init_state(enc_from(np.zeros((4, 6))))
        np.testing.assert_allclose(state.h.data[0], np.tanh(dec.init_h[0].bias.data), rtol=1e-15)
        np.testing.assert_allclose(state.c.data[0], np.tanh(dec.init_c[0].bias.data), rtol=1e-15)

    def test_range_and_mean_pooling(self, f64):
        dec = make_decoder()
        feats = np.random.default_rng(0).normal(size=(5, 6)) * 10
        state = dec.init_state(enc_from(feats))
        assert np.all(np.abs(state.h.data) < 1) and np.all(np.abs(state.c.data) < 1)
        eh, ec = oracles.init_state(oracles.decoder_params(dec), feats)
        np.testing.assert_allclose(state.h.data[0], eh, rtol=1e-13)
        np.testing.assert_allclose(state.c.data[0], ec, rtol=1e-13)


class TestDecodeStep:
    def test_shape(self):
        dec = make_decoder()
        enc = random_encoding(np.random.default_rng(0), length=4, dim=6)
        logits, state = decode_step([3], dec.init_state(enc), enc, dec)
        assert logits.shape == (1, 7)
        np.testing.assert_allclose(state.alpha.data.sum(), 1.0, atol=1e-6)

    def test_deterministic(self):
        dec = make_decoder()
        enc = random_encoding(np.random.default_rng(0))
        s = dec.init_state(enc)
        a, _ = decode_step([4], s, enc, dec)
        b, _ = decode_step([4], s, enc, dec)
        assert a.data.tobytes() == b.data.tobytes()

    @pytest.mark.parametrize("hidden", [5, 6])
    def test_straight_line_oracle(self, hidden, f64):
        dec = make_decoder(hidden_dim=hidden)
        feats = np.random.default_rng(2).normal(size=(4, 6))
        enc = enc_from(feats)
        p = oracles.decoder_params(dec)
        h, c = oracles.init_state(p, feats)
        state = dec.init_state(enc)
        for tok in (1, 5, 3):
            logits, state = decode_step([tok], state, enc, dec)
            e_logits, h, c, e_alpha = oracles.step(p, tok, h, c, feats)
            np.testing.assert_allclose(logits.data[0], e_logits, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(state.alpha.data[0], e_alpha, rtol=1e-12)

    def test_unknown_token(self):
        dec = make_decoder()
        enc = random_encoding(np.random.default_rng(0))
        with pytest.raises(UsageError):
            decode_step([7], dec.init_state(enc), enc, dec)

    def test_stacked_layers(self):
        dec = make_decoder(num_layers=2)
        enc = random_encoding(np.random.default_rng(0))
        state = dec.init_state(enc)
        assert len(state.hs) == 2
        logits, state = decode_step([1], state, enc, dec)
        assert logits.shape == (1, 7) and len(state.cs) == 2


class TestTeacherForced:
    def test_one_row_for_two_tokens(self):
        dec = make_decoder()
        logits, alphas = dec.teacher_forced_forward([1, 2], random_encoding(np.random.default_rng(0)))
        assert logits.shape == (1, 1, 7) and alphas.shape == (1, 1, 4)

    def test_too_short(self):
        with pytest.raises(UsageError):
            make_decoder().teacher_forced_forward([1], random_encoding(np.random.default_rng(0)))

    def test_prefix_property(self):
        dec = make_decoder()
        enc = random_encoding(np.random.default_rng(0))
        a, _ = dec.teacher_forced_forward([1, 4, 5, 6, 2], enc)
        b, _ = dec.teacher_forced_forward([1, 4, 5, 3, 3], enc)
        assert a.data[0, :3].tobytes() == b.data[0, :3].tobytes()

    def test_matches_step_composition(self):
        dec = make_decoder()
        enc = random_encoding(np.random.default_rng(0))
        tokens = [1, 4, 6, 5, 2]
        logits, alphas = dec.teacher_forced_forward(tokens, enc)
        state = dec.init_state(enc)
        for t in range(4):
            step, state = dec.decode_step([tokens[t]], state, enc)
            assert step.data.tobytes() == logits.data[:, t].tobytes()
            assert state.alpha.data.tobytes() == alphas.data[:, t].tobytes()

    def test_batch_rows_are_independent(self):
        dec = make_decoder()
        enc = random_encoding(np.random.default_rng(0), batch=2)
        tokens = np.array([[1, 4, 5, 2], [1, 6, 2, 0]])
        both, _ = dec.teacher_forced_forward(tokens, enc)
        second, _ = dec.teacher_forced_forward(tokens[1:], enc.select([1]))
        np.testing.assert_allclose(both.data[1], second.data[0], rtol=1e-6)

    def test_gradcheck(self, f64):
        dec = make_decoder(hidden_dim=5)
        rng = np.random.default_rng(5)
        feats = Tensor(rng.normal(size=(1, 4, 6)))
        probe = Tensor(rng.uniform(-1, 1, size=(1, 3, 7)))

        def fn(feats, *ps):
            logits, _ = dec.teacher_forced_forward([1, 4, 5, 2], EncoderOutput(feats, 2, 2))
            return T.sum(T.mul(logits, probe))

        report = T.gradcheck(fn, [feats] + dec.parameters(), rtol=1e-5, max_per_input=4, rng=rng)
        assert report.ok, report


def test_state_select_detaches():
    hs = (Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True),)
    state = DecoderState(hs, hs, Tensor(np.ones((3, 4))))
    picked = state.select([2, 0])
    np.testing.assert_array_equal(picked.h.data, [[4, 5], [0, 1]])
    assert not picked.h.requires_grad

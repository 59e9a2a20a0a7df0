import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adadurian.corpus import LinguisticToken, SynthSpec, TokenKind, synthetic_vocabs
from adadurian.model import (AdaDurIAN, ModelConfig, ModelError, StreamError, decode_sequence,
                             encode, expand_states, new_stream, postnet_offline, postnet_stream,
                             postnet_stream_flush, postnet_stream_push, predict_durations,
                             relative_positions, round_durations, skip_states, synthesize,
                             windowed_attention)

VOCABS = synthetic_vocabs(SynthSpec(n_speakers=2, emotions=("neutral", "anger")))


def small_cfg(**kw):
    base = ModelConfig.from_vocabs(VOCABS).tiny()
    return replace(base, **kw)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return AdaDurIAN(small_cfg(frames_per_step=4, postnet_delay=5, attention_window=3), seed=0)


def toks(spec):
    """'1 B 3' -> phoneme 1, boundary, phoneme 3, all tone 1 and language 0."""
    out = []
    for s in spec.split():
        out.append(LinguisticToken.boundary() if s == "B"
                   else LinguisticToken(TokenKind.PHONEME, int(s), 1, 0))
    return out


def expansion_oracle(enc, durations, spk, emo, langs, m):
    rows = []
    for j, d in enumerate(durations):
        for i in range(d):
            rows.append(torch.cat([enc[j], m.speaker_embedding.weight[spk],
                                   m.emotion_embedding.weight[emo],
                                   m.language_embedding.weight[langs[j]],
                                   torch.tensor([(i + 1) / d], dtype=enc.dtype)]))
    return torch.stack(rows)


@given(st.lists(st.integers(1, 10), min_size=1, max_size=20), st.integers(0, 1), st.integers(0, 1),
       st.integers(0, 2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_expansion_matches_oracle(model, durations, spk, emo, seed):
    g = torch.Generator().manual_seed(seed)
    enc = torch.randn(len(durations), model.cfg.encoder_width, generator=g)
    langs = torch.randint(0, 2, (len(durations),), generator=g).tolist()
    with torch.no_grad():
        got = expand_states(enc, durations, spk, emo, langs, model)
        assert torch.equal(got, expansion_oracle(enc, durations, spk, emo, langs, model))
    assert got.shape == (sum(durations), model.cfg.expanded_dim)


def test_relative_positions_small_example():
    pos = relative_positions(torch.tensor([2, 3]))
    np.testing.assert_allclose(pos.numpy(), [0.5, 1.0, 1 / 3, 2 / 3, 1.0])


def test_expansion_two_phonemes_shape(model):
    enc = torch.zeros(2, model.cfg.encoder_width)
    out = expand_states(enc, [2, 3], 0, 0, [0, 1], model)
    assert out.shape[0] == 5
    np.testing.assert_allclose(out[:, -1].detach().numpy(), [0.5, 1.0, 1 / 3, 2 / 3, 1.0], rtol=1e-6)


def test_expansion_errors(model):
    enc = torch.zeros(2, model.cfg.encoder_width)
    with pytest.raises(ModelError):
        expand_states(enc, [2, 0], 0, 0, [0, 0], model)
    with pytest.raises(ModelError):
        expand_states(enc, [2], 0, 0, [0], model)
    with pytest.raises(ModelError):
        expand_states(enc[:0], [], 0, 0, [], model)


def test_skip_states_drops_boundaries(model):
    tokens = toks("1 B 2 3 B")
    with torch.no_grad():
        states = encode(tokens, model)
    kept = skip_states(states, tokens)
    assert kept.shape[0] == 3
    assert torch.equal(kept, states[[0, 2, 3]])


def test_encode_rejects_empty_and_unknown(model):
    with pytest.raises(ModelError):
        encode([], model)
    with pytest.raises(ModelError):
        encode(toks("99"), model)


def test_round_durations_examples():
    assert round_durations([0.2, 1.5, 2.49, 3.0]) == [1, 2, 2, 3]
    with pytest.raises(ModelError):
        round_durations([-0.5])


def test_predicted_durations_nonnegative(model):
    with torch.no_grad():
        d = predict_durations(toks("1 B 2 3"), model)
    assert d.shape == (3,)
    assert torch.all(d >= 0)


def test_attention_weights_are_windowed_distribution(model):
    g = torch.Generator().manual_seed(1)
    e = model.cfg.expanded_dim
    expanded = torch.randn(12, e, generator=g)
    q = torch.randn(model.decoder.attention.query.in_features, generator=g)
    W = model.cfg.attention_window
    for center in (0, 5, 11):
        with torch.no_grad():
            _, w = windowed_attention(q, expanded, center, model)
        assert w.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert torch.all(w >= 0)
        outside = [j for j in range(12) if abs(j - center) > W]
        assert torch.all(w[outside] == 0)
    with pytest.raises(ModelError):
        windowed_attention(q, expanded, 12, model)


@pytest.mark.parametrize("T", [1, 3, 4, 5, 8, 13])
def test_decoder_step_count(model, T):
    expanded = torch.randn(T, model.cfg.expanded_dim)
    with torch.no_grad():
        res = decode_sequence(expanded, model)
    r = model.cfg.frames_per_step
    assert res.n_steps == math.ceil(T / r)
    assert res.coarse.shape == (T, model.cfg.n_mels)


def test_teacher_forcing_changes_later_blocks_only(model):
    g = torch.Generator().manual_seed(2)
    expanded = torch.randn(9, model.cfg.expanded_dim, generator=g)
    mel = torch.randn(9, model.cfg.n_mels, generator=g)
    with torch.no_grad():
        free = decode_sequence(expanded, model).coarse
        forced = decode_sequence(expanded, model, teacher_mel=mel).coarse
    r = model.cfg.frames_per_step
    assert torch.allclose(free[:r], forced[:r])
    assert not torch.allclose(free[r:], forced[r:])


@pytest.mark.parametrize("T", [1, 4, 6, 17])
def test_stream_equals_offline(model, T):
    coarse = torch.randn(T, model.cfg.n_mels, generator=torch.Generator().manual_seed(T))
    with torch.no_grad():
        off = postnet_offline(coarse, model)
        on = postnet_stream(coarse, model)
    assert on.shape == off.shape
    assert (on - off).abs().max().item() <= 1e-6


def test_batched_postnet_matches_per_frame_path(model):
    g = torch.Generator().manual_seed(4)
    coarse = torch.randn(2, 9, model.cfg.n_mels, generator=g) * 3 - 4
    lengths = torch.tensor([9, 5])
    with torch.no_grad():
        batched = model.postnet_offline(coarse, lengths)
        for b, n in enumerate(lengths.tolist()):
            single = postnet_offline(coarse[b, :n], model)
            assert (batched[b, :n] - single).abs().max().item() <= 1e-5


def test_stream_latency_is_exactly_delay(model):
    D = model.cfg.postnet_delay
    state = new_stream(model)
    emitted = []
    for t in range(12):
        state, out = postnet_stream_push(state, torch.zeros(model.cfg.n_mels), model)
        emitted.append(len(out))
    assert emitted == [0] * D + [1] * (12 - D)
    assert len(postnet_stream_flush(state, model)) == D
    with pytest.raises(StreamError):
        postnet_stream_push(state, torch.zeros(model.cfg.n_mels), model)


def test_zero_postnet_is_identity(model):
    m = AdaDurIAN(model.cfg, seed=0)
    with torch.no_grad():
        m.postnet.out.weight.zero_()
        m.postnet.out.bias.zero_()
        coarse = torch.randn(7, m.cfg.n_mels)
        assert torch.equal(postnet_offline(coarse, m), coarse)
        assert torch.equal(postnet_stream(coarse, m), coarse)


def test_encoder_ignores_conditions(model):
    tokens = toks("1 2 B 3")
    with torch.no_grad():
        a = skip_states(encode(tokens, model), tokens)
        m2 = AdaDurIAN(model.cfg, seed=0)
        m2.load_state_dict(model.state_dict())
        m2.speaker_embedding.weight.normal_()
        m2.emotion_embedding.weight.normal_()
        m2.language_embedding.weight.normal_()
        b = skip_states(encode(tokens, m2), tokens)
    assert torch.equal(a, b)


def test_synthesize_conserves_length(model):
    tokens = toks("1 B 2 3")
    mel, durs = synthesize(tokens, 1, 0, model, durations=[2, 3, 4])
    assert mel.shape == (9, model.cfg.n_mels)
    assert durs == [2, 3, 4]
    mel2, durs2 = synthesize(tokens, 1, 0, model)
    assert mel2.shape[0] == sum(durs2)
    assert all(d >= 1 for d in durs2)


def test_synthesize_is_deterministic(model):
    a, _ = synthesize(toks("1 2"), 0, 1, model)
    b, _ = synthesize(toks("1 2"), 0, 1, model)
    assert np.array_equal(a, b)


def test_synthesize_rejects_bad_conditions(model):
    with pytest.raises(ModelError):
        synthesize(toks("1"), 5, 0, model)
    with pytest.raises(ModelError):
        synthesize(toks("1"), 0, 9, model)
    with pytest.raises(ModelError):
        synthesize(toks("1 2"), 0, 0, model, durations=[1])


def test_checkpoint_round_trip_preserves_outputs(model):
    ckpt = model.to_checkpoint(step=3, valid_loss=1.5, seed=0, threads=1)
    again = AdaDurIAN.from_checkpoint(type(ckpt).from_bytes(ckpt.to_bytes()))
    a, _ = synthesize(toks("1 2"), 0, 0, model, durations=[2, 2])
    b, _ = synthesize(toks("1 2"), 0, 0, again, durations=[2, 2])
    assert np.array_equal(a, b)
    assert again.to_checkpoint(step=3, valid_loss=1.5, seed=0, threads=1).to_bytes() == ckpt.to_bytes()


def test_same_seed_same_parameters():
    cfg = small_cfg()
    a = AdaDurIAN(cfg, seed=4).to_checkpoint().to_bytes()
    assert a == AdaDurIAN(cfg, seed=4).to_checkpoint().to_bytes()
    assert a != AdaDurIAN(cfg, seed=5).to_checkpoint().to_bytes()


def test_config_validation_and_dict_round_trip():
    cfg = small_cfg()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ModelError):
        small_cfg(frames_per_step=0)
    full = ModelConfig.from_vocabs(VOCABS).full_scale()
    assert (full.frames_per_step, full.postnet_delay, full.duration_width) == (4, 5, 512)


@pytest.mark.parametrize("T", [1, 7, 16, 23])
def test_streaming_decode_matches_offline_and_latency_law(model, T):
    from adadurian.model import decode_streaming
    expanded = torch.randn(T, model.cfg.expanded_dim, generator=torch.Generator().manual_seed(T))
    refined, trace = decode_streaming(expanded, model)
    with torch.no_grad():
        offline = postnet_offline(decode_sequence(expanded, model).coarse, model)
    assert (refined - offline).abs().max().item() <= 1e-5
    D, r = model.cfg.postnet_delay, model.cfg.frames_per_step
    assert len(trace.decoded) == T
    if T >= D + r:
        assert trace.lookahead == D + r
        assert trace.first_frame == math.ceil((D + 1) / r) * r
    assert trace.lookahead <= D + r

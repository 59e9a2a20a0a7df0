"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 5, 6 and 10 share the expensive pipeline (2000-step average model,
then adaptation to a held-out speaker); it runs twice in total.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from adadurian.adaptation import FREEZE_LADDER, MelCache, TrainConfig, adapt, collate, train_average, verify_freeze
from adadurian.cli import main as cli_main
from adadurian.checkpoint import save_checkpoint
from adadurian.corpus import (LinguisticToken, SynthSpec, TokenKind, make_synthetic_corpus, split_train_valid,
                              synthetic_vocabs)
from adadurian.dsp import (MelSpectrogram, SignalConfig, Waveform, griffin_lim, griffin_lim_errors, mel_to_linear,
                           read_mel, read_wav, stft_magnitude)
from adadurian.model import (AdaDurIAN, ModelConfig, encode, expand_states, forward_batch, postnet_offline,
                             postnet_stream, skip_states, synthesize)
from adadurian.neural import GROUP_NAMES, LAYER_KINDS, LayerSpec, build_layer, grad_check
from adadurian.selftest import (LAYER_KINDS_FOR_CHECK, _EndToEnd, _layer_inputs, _tiny_model, end_to_end_batch,
                               jitter_parameters)

SIGNAL = SignalConfig()


def desk_model(n_speakers=2, emotions=("neutral",), seed=0) -> AdaDurIAN:
    vocabs = synthetic_vocabs(SynthSpec(n_speakers=n_speakers, emotions=emotions))
    return AdaDurIAN(ModelConfig.from_vocabs(vocabs), seed=seed)


def random_tokens(rng, n_phonemes, n_phones=12):
    tokens = []
    for _ in range(n_phonemes):
        phone = int(rng.integers(1, n_phones + 1))
        lang = 0 if phone <= (n_phones + 1) // 2 else 1
        tone = int(rng.integers(1, 5)) if lang == 0 else int(rng.integers(5, 7))
        tokens.append(LinguisticToken(TokenKind.PHONEME, phone, tone, lang))
        if rng.random() < 0.3:
            tokens.append(LinguisticToken.boundary())
    return tokens


# --- criterion 1 -------------------------------------------------------------------

def numpy_expansion_oracle(enc, durations, spk_row, emo_row, lang_rows):
    rows = []
    for j, d in enumerate(durations):
        for i in range(d):
            rows.append(np.concatenate([enc[j], spk_row, emo_row, lang_rows[j], [np.float32((i + 1) / d)]]))
    return np.asarray(rows, dtype=np.float32)


def test_c01_expansion_oracle(acceptance_record):
    model = desk_model()
    rng = np.random.default_rng(1)
    spk_tab = model.speaker_embedding.weight.detach().numpy()
    emo_tab = model.emotion_embedding.weight.detach().numpy()
    lang_tab = model.language_embedding.weight.detach().numpy()
    t0 = time.perf_counter()
    mismatches = 0
    with torch.no_grad():
        for _ in range(1000):
            n = int(rng.integers(1, 21))
            durations = rng.integers(1, 11, size=n).tolist()
            enc = rng.normal(size=(n, model.cfg.encoder_width)).astype(np.float32)
            langs = rng.integers(0, 2, size=n)
            spk = int(rng.integers(0, 2))
            got = expand_states(torch.from_numpy(enc), durations, spk, 0, langs.tolist(), model).numpy()
            want = numpy_expansion_oracle(enc, durations, spk_tab[spk], emo_tab[0], lang_tab[langs])
            mismatches += not (got.shape == want.shape and np.array_equal(got, want))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    acceptance_record(1, "expansion oracle", ok, f"1000 instances, {mismatches} mismatches, {elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 10


# --- criterion 2 -------------------------------------------------------------------

def test_c02_streaming_equality(acceptance_record):
    model = desk_model(seed=2)
    g = torch.Generator().manual_seed(2)
    worst = 0.0
    t0 = time.perf_counter()
    with torch.no_grad():
        for _ in range(100):
            coarse = torch.randn(200, 80, generator=g, dtype=torch.float32) * 3 - 4
            stream = postnet_stream(coarse, model)
            assert stream.dtype == torch.float32 and stream.shape == coarse.shape
            worst = max(worst, (stream - postnet_offline(coarse, model)).abs().max().item())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30
    acceptance_record(2, "streaming post-net equals offline", ok,
                      f"max abs diff {worst:.3g} over 100 x 200 frames, {elapsed:.1f}s")
    assert worst <= 1e-6
    assert elapsed < 30


# --- criterion 3 -------------------------------------------------------------------

def test_c03_gradient_checks(acceptance_record):
    g = torch.Generator().manual_seed(3)
    specs = LAYER_KINDS_FOR_CHECK + [LayerSpec("fully_connected", (6, 4), "sigmoid")]
    assert {s.kind for s in specs} == set(LAYER_KINDS)
    t0 = time.perf_counter()
    errors = {}
    for spec in specs:
        key = spec.kind + (f"/{spec.activation}" if spec.kind == "fully_connected" else "")
        errors[key] = grad_check(build_layer(spec, seed=3), _layer_inputs(spec, g), eps=1e-4, seed=3)
    model = _tiny_model(frames_per_step=2)
    assert (model.cfg.frames_per_step, model.cfg.encoder_width, model.cfg.decoder_width) == (2, 8, 8)
    # generic point: the zero-bias init puts ReLU pre-activations exactly on the kink
    jitter_parameters(model)
    batch = end_to_end_batch(model)
    errors["end_to_end_tiny"] = grad_check(_EndToEnd(model, batch), (batch.mel,), eps=1e-4, seed=3)
    elapsed = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    ok = errors[worst_name] <= 1e-3 and elapsed < 120
    acceptance_record(3, "gradient checks", ok,
                      f"{len(errors)} checks, worst {worst_name} {errors[worst_name]:.2e}, {elapsed:.1f}s")
    assert errors[worst_name] <= 1e-3, errors
    assert elapsed < 120


# --- criterion 4 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def new_speaker(tmp_path_factory):
    """Held-out synthetic speaker with 10 utterances, split 8 / 2."""
    root = tmp_path_factory.mktemp("held_out")
    m = make_synthetic_corpus(SynthSpec(n_speakers=1, n_utterances_per_speaker=10, seed=17, speaker_start=2), root)
    return split_train_valid(m, 0.2, seed=0)


def test_c04_freeze_ladder(acceptance_record, new_speaker):
    train, valid = new_speaker
    rungs = list(FREEZE_LADDER.items())
    nested = all(a < b for (_, a), (_, b) in zip(rungs, rungs[1:]))
    base = desk_model(seed=4).to_checkpoint()
    t0 = time.perf_counter()
    notes, ok = [], nested
    for name, frozen in rungs:
        cfg = TrainConfig.adaptation(freeze=tuple(frozen), max_steps=50, validation_interval=10,
                                     early_stop_evals=None)
        res = adapt(base, train, valid, cfg)
        rep = verify_freeze(res.initial, res.fit.last, frozen)
        assert res.fit.last.step == 50
        moved = [g for g in GROUP_NAMES if g not in frozen]
        frozen_exact = rep.passed and not any(rep.changed[g] for g in frozen)
        moved_ok = all(rep.changed[g] and rep.max_abs_delta[g] > 0 for g in moved)
        ok &= frozen_exact and moved_ok and res.report.passed
        notes.append(f"{name}: {len(frozen)} frozen {'exact' if frozen_exact else 'CHANGED'}, "
                     f"{len(moved)} trainable {'moved' if moved_ok else 'STUCK'}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    acceptance_record(4, "freeze ladder", ok, f"nested={nested}; " + "; ".join(notes) + f"; {elapsed:.0f}s")
    assert nested
    assert ok, notes


# --- criteria 5, 6, 10 --------------------------------------------------------------

def run_pipeline(root):
    """Average model on 2 speakers x 50 utterances (seed 7), then adaptation."""
    corpus = make_synthetic_corpus(SynthSpec(n_speakers=2, n_utterances_per_speaker=50, seed=7), root / "avg")
    train, valid = split_train_valid(corpus, 0.1, seed=0)
    t0 = time.perf_counter()
    fit = train_average(train, valid, TrainConfig.average(max_steps=2000, seed=0))
    avg_seconds = time.perf_counter() - t0
    held = make_synthetic_corpus(SynthSpec(n_speakers=1, n_utterances_per_speaker=10, seed=17, speaker_start=2),
                                 root / "held_out")
    a_train, a_valid = split_train_valid(held, 0.2, seed=0)
    t1 = time.perf_counter()
    adapted = adapt(fit.best, a_train, a_valid, TrainConfig.adaptation(seed=0))
    adapt_seconds = time.perf_counter() - t1
    return {"fit": fit, "train": train, "adapted": adapted, "avg_seconds": avg_seconds,
            "adapt_seconds": adapt_seconds}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipeline_a"))


def teacher_forced_l1(checkpoint, manifest, utts):
    model = AdaDurIAN.from_checkpoint(checkpoint)
    cache = MelCache()
    out = []
    with torch.no_grad():
        for u in utts:
            b = collate([u], manifest, model.cfg, cache)
            refined = forward_batch(b, model)["refined"][0]
            out.append((refined - b.mel[0]).abs().mean().item())
    return out


def test_c05_desk_scale_learning(acceptance_record, pipeline):
    fit, train = pipeline["fit"], pipeline["train"]
    step10 = fit.log[9]["train_loss"]
    final = fit.log[-1]["train_loss"]
    assert fit.log[-1]["step"] == 2000
    l1_first = teacher_forced_l1(fit.last, train, train.records[:1])[0]
    l1_all = teacher_forced_l1(fit.last, train, train.records)
    elapsed = pipeline["avg_seconds"]
    ok = final < 0.5 * step10 and l1_first < 0.1 and elapsed < 900
    acceptance_record(5, "desk-scale learning", ok,
                      f"loss step10 {step10:.3f} -> final {final:.3f}; teacher-forced L1 {l1_first:.4f} "
                      f"(training-set mean {np.mean(l1_all):.4f}, max {np.max(l1_all):.4f}); {elapsed:.0f}s")
    assert final < 0.5 * step10
    assert l1_first < 0.1
    assert elapsed < 900


def test_c06_adaptation_benefit(acceptance_record, pipeline):
    rep = pipeline["adapted"].report
    elapsed = pipeline["adapt_seconds"]
    ok = rep.best_valid_loss < rep.zero_shot_valid_loss and rep.passed and elapsed < 600
    acceptance_record(6, "adaptation benefit", ok,
                      f"zero-shot valid {rep.zero_shot_valid_loss:.4f} -> best {rep.best_valid_loss:.4f} "
                      f"at step {rep.selected_step}; {elapsed:.0f}s")
    assert rep.passed
    assert rep.best_valid_loss < rep.zero_shot_valid_loss
    assert elapsed < 600


# --- criterion 7 -------------------------------------------------------------------

def test_c07_encoder_speaker_independence(acceptance_record):
    model = desk_model(n_speakers=3, emotions=("neutral", "anger"), seed=7)
    combos = [(0, 0), (1, 0), (2, 0), (0, 1), (2, 1)]
    rng = np.random.default_rng(7)
    width = model.cfg.encoder_width
    t0 = time.perf_counter()
    identical = 0
    with torch.no_grad():
        for _ in range(50):
            tokens = random_tokens(rng, int(rng.integers(1, 15)))
            langs = [t.language_id for t in tokens if not t.is_boundary]
            durations = rng.integers(1, 5, size=len(langs)).tolist()
            starts = np.cumsum([0] + durations[:-1])
            per_combo = []
            for spk, emo in combos:
                states = skip_states(encode(tokens, model), tokens)
                expanded = expand_states(states, durations, spk, emo, langs, model)
                per_combo.append((states.numpy().tobytes(), expanded[starts, :width].numpy().tobytes()))
            identical += all(pc == per_combo[0] for pc in per_combo) and per_combo[0][0] == per_combo[0][1]
    elapsed = time.perf_counter() - t0
    ok = identical == 50 and elapsed < 5
    acceptance_record(7, "encoder speaker independence", ok,
                      f"{identical}/50 sequences bit-identical across 5 conditions, {elapsed:.2f}s")
    assert identical == 50
    assert elapsed < 5


# --- criterion 8 -------------------------------------------------------------------

def test_c08_length_conservation(acceptance_record, tmp_path, capsys):
    model = desk_model(seed=8)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(model.to_checkpoint(), ckpt)
    rng = np.random.default_rng(8)
    vocabs = synthetic_vocabs(SynthSpec(n_speakers=2))
    lines, expected = [], []
    for i in range(200):
        tokens = random_tokens(rng, int(rng.integers(1, 6)))
        text = " ".join("B" if t.is_boundary else
                        f"{vocabs.phones[t.phone_id]}/{vocabs.tones[t.tone_stress_id]}/{vocabs.languages[t.language_id]}"
                        for t in tokens)
        if i % 2 == 0:
            durs = rng.integers(1, 9, size=sum(not t.is_boundary for t in tokens)).tolist()
            lines.append(text + "\t" + " ".join(map(str, durs)))
            expected.append(sum(durs))
        else:
            lines.append(text)
            expected.append(None)
    (tmp_path / "req.txt").write_text("\n".join(lines) + "\n")
    t0 = time.perf_counter()
    code = cli_main(["synthesize", "--checkpoint", str(ckpt), "--input", str(tmp_path / "req.txt"),
                     "--out", str(tmp_path / "out"), "--json"], environ={})
    elapsed = time.perf_counter() - t0
    report = json.loads(capsys.readouterr().out)
    assert [u["line"] for u in report["utterances"]] == list(range(1, 201))
    bad = 0
    for want, entry in zip(expected, report["utterances"]):
        mel = read_mel(tmp_path / "out" / entry["mel"])
        wav = read_wav(tmp_path / "out" / entry["wav"])
        frames_ok = mel.shape[0] == sum(entry["durations"]) and (want is None or mel.shape[0] == want)
        bad += not (frames_ok and len(wav.samples) == mel.shape[0] * 240)
    ok = code == 0 and bad == 0 and elapsed < 60
    acceptance_record(8, "length conservation", ok, f"200 requests, {bad} violations, {elapsed:.1f}s")
    assert code == 0 and bad == 0
    assert elapsed < 60


def test_c08_predicted_lengths_match_durations():
    model = desk_model(seed=8)
    rng = np.random.default_rng(81)
    for _ in range(20):
        tokens = random_tokens(rng, int(rng.integers(1, 6)))
        mel, durs = synthesize(tokens, 0, 0, model)
        assert mel.shape[0] == sum(durs)


# --- criterion 9 -------------------------------------------------------------------

def test_c09_griffin_lim(acceptance_record):
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    worst_rise = -math.inf
    for _ in range(20):
        mel = rng.normal(size=(int(rng.integers(10, 40)), 80)) * 1.5 - 4
        errs = griffin_lim_errors(mel_to_linear(MelSpectrogram(mel, SIGNAL)), SIGNAL, n_iters=60,
                                  seed=int(rng.integers(0, 1000)))
        assert len(errs) == 61
        worst_rise = max(worst_rise, max(b - a for a, b in zip(errs, errs[1:])))
    t = np.arange(24000) / 24000
    tone = Waveform(0.5 * np.sin(2 * np.pi * 440 * t))
    mag = stft_magnitude(tone, SIGNAL)
    rec = griffin_lim(mag, SIGNAL, n_iters=60, seed=0, length=len(tone.samples))
    got = stft_magnitude(rec, SIGNAL)
    corr = float((got * mag).sum() / (np.linalg.norm(got) * np.linalg.norm(mag)))
    elapsed = time.perf_counter() - t0
    ok = worst_rise <= 1e-9 and corr >= 0.99 and elapsed < 60
    acceptance_record(9, "Griffin-Lim", ok, f"largest per-iteration rise {worst_rise:.2e}; "
                                             f"440 Hz magnitude correlation {corr:.4f}; {elapsed:.1f}s")
    assert worst_rise <= 1e-9
    assert corr >= 0.99
    assert elapsed < 60


# --- criterion 10 ------------------------------------------------------------------

def test_c10_determinism(acceptance_record, pipeline, tmp_path_factory):
    again = run_pipeline(tmp_path_factory.mktemp("pipeline_b"))
    avg_same = pipeline["fit"].best.to_bytes() == again["fit"].best.to_bytes()
    adapt_same = pipeline["adapted"].checkpoint.to_bytes() == again["adapted"].checkpoint.to_bytes()
    acceptance_record(10, "determinism", avg_same and adapt_same,
                      f"average best checkpoint identical={avg_same}, adapted best identical={adapt_same}")
    assert avg_same and adapt_same


# --- criterion 11 ------------------------------------------------------------------

def test_c11_streaming_latency_law(acceptance_record, tmp_path, capsys):
    model = desk_model(seed=11)
    save_checkpoint(model.to_checkpoint(), tmp_path / "m.ckpt")
    (tmp_path / "in.txt").write_text("p01/T1/zh p02/T2/zh B p09/S1/en\t6 5 7\n"
                                     "p03/T3/zh p04/T4/zh\t8 9\np05/T1/zh p10/S0/en p11/S1/en\n")
    code = cli_main(["bench-rtf", "--checkpoint", str(tmp_path / "m.ckpt"), "--input", str(tmp_path / "in.txt"),
                     "--json"], environ={})
    report = json.loads(capsys.readouterr().out)
    D, r = model.cfg.postnet_delay, model.cfg.frames_per_step
    latency_ok = report["first_frame_latency_frames"] == D + r == 9
    stages_ok = set(report["stages"]) >= {"encoder", "duration", "expansion", "decoder_postnet"}
    rtf_ok = report["rtf"] > 0 and math.isclose(report["rtf"], report["audio_seconds"] / report["compute_seconds"])
    ok = code == 0 and latency_ok and stages_ok and rtf_ok and report["threads"] == 2
    acceptance_record(11, "streaming latency law", ok,
                      f"latency {report['first_frame_latency_frames']} frames (D + r = {D} + {r}); "
                      f"RTF {report['rtf']:.1f} over {report['audio_seconds']:.2f}s audio; "
                      f"stages {', '.join(f'{k} {v * 1000:.0f}ms' for k, v in report['stages'].items())}")
    assert ok, report

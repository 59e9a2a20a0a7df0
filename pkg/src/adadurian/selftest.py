"""Embedded checks run by ``adadurian selftest``.

Each check returns a :class:`CheckResult`; none of them raise on a failed
property, so the caller can print the whole table.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch

from .adaptation import FREEZE_LADDER, TrainConfig, adapt, train_average, verify_freeze
from .checkpoint import Checkpoint
from .corpus import SynthSpec, make_synthetic_corpus, split_train_valid, synthetic_vocabs
from .model import TINY_SIZES, AdaDurIAN, ModelConfig, expand_states, postnet_offline, postnet_stream
from .neural import GROUP_NAMES, LayerSpec, build_layer, grad_check, group_of


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crash is a failed check, reported in the table
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def _tiny_model(seed: int = 0, **kw) -> AdaDurIAN:
    vocabs = synthetic_vocabs(SynthSpec(n_speakers=2))
    cfg = ModelConfig.from_vocabs(vocabs, **{**TINY_SIZES, **kw})
    return AdaDurIAN(cfg, seed=seed)


def expansion_oracle(enc, durations, speaker_id, emotion_id, language_ids, model) -> torch.Tensor:
    """Per-frame brute force: one row per frame, built by explicit loops."""
    rows = []
    for j, d in enumerate(durations):
        for i in range(d):
            rows.append(torch.cat([enc[j], model.speaker_embedding.weight[speaker_id],
                                   model.emotion_embedding.weight[emotion_id],
                                   model.language_embedding.weight[language_ids[j]],
                                   torch.tensor([(i + 1) / d], dtype=enc.dtype)]))
    return torch.stack(rows)


def check_expansion(n_cases: int = 1000, seed: int = 0):
    model = _tiny_model()
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _ in range(n_cases):
            n = int(rng.integers(1, 21))
            durations = rng.integers(1, 11, size=n).tolist()
            enc = torch.from_numpy(rng.normal(size=(n, model.cfg.encoder_width)).astype(np.float32))
            langs = rng.integers(0, 2, size=n).tolist()
            spk, emo = int(rng.integers(0, 2)), 0
            got = expand_states(enc, durations, spk, emo, langs, model)
            if not torch.equal(got, expansion_oracle(enc, durations, spk, emo, langs, model)):
                return False, f"mismatch for durations {durations}"
    return True, f"{n_cases} cases exact"


def check_streaming(n_cases: int = 100, n_frames: int = 200, seed: int = 0):
    model = AdaDurIAN(ModelConfig.from_vocabs(synthetic_vocabs(SynthSpec())), seed=seed)
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_cases):
            coarse = torch.randn(n_frames, model.cfg.n_mels, generator=g) * 3 - 4
            diff = (postnet_stream(coarse, model) - postnet_offline(coarse, model)).abs().max().item()
            worst = max(worst, diff)
    return worst <= 1e-6, f"max abs diff {worst:.2e} over {n_cases} mels"


LAYER_KINDS_FOR_CHECK = [
    LayerSpec("fully_connected", (6, 4), "tanh"),
    LayerSpec("fully_connected", (6, 4), "relu"),
    LayerSpec("recurrent", (6, 4)),
    LayerSpec("residual_recurrent", (6,)),
    LayerSpec("bidirectional_recurrent", (6, 4, 2)),
    LayerSpec("embedding", (7, 3)),
    LayerSpec("cbhg", (6, 3, 4, 2)),
    LayerSpec("attention", (5, 6, 4)),
]


def _layer_inputs(spec: LayerSpec, g: torch.Generator):
    x = torch.randn(2, 5, 6, generator=g, dtype=torch.float64)
    if spec.kind == "fully_connected":
        return (x[:, 0],)
    if spec.kind in ("bidirectional_recurrent", "cbhg"):
        return (x, torch.tensor([5, 3]))
    if spec.kind == "embedding":
        return (torch.tensor([[1, 2, 6]]),)
    if spec.kind == "attention":
        return (torch.randn(2, 5, generator=g, dtype=torch.float64), x)
    return (x,)


class _EndToEnd(torch.nn.Module):
    """Teacher-forced tiny model as a function of a fixed batch, for finite differences."""

    def __init__(self, model: AdaDurIAN, batch):
        super().__init__()
        self.model = model
        self.batch = batch

    def forward(self, mel):
        from .model import forward_batch
        b = self.batch
        out = forward_batch(type(b)(**{**b.__dict__, "mel": mel}), self.model)
        return out["refined"].sum() + out["coarse"].sum() + sum(d.sum() for d in out["log_durations"])


def end_to_end_batch(model: AdaDurIAN, dtype=torch.float64):
    from .model import Batch
    g = torch.Generator().manual_seed(3)
    durs = torch.tensor([2, 3])
    T = int(durs.sum())
    return Batch(phone=torch.tensor([[1, 2]]), tone=torch.tensor([[1, 2]]), lang=torch.tensor([[0, 0]]),
                 token_lengths=torch.tensor([2]), phoneme_index=[torch.tensor([0, 1])], durations=[durs],
                 speaker=torch.tensor([1]), emotion=torch.tensor([0]),
                 mel=torch.randn(1, T, model.cfg.n_mels, generator=g, dtype=dtype) - 4,
                 mel_lengths=torch.tensor([T]))


def jitter_parameters(model: torch.nn.Module, scale: float = 0.1, seed: int = 0) -> None:
    """Move every parameter off the zero-bias init. With zero biases and the
    all-zero first decoder input, ReLU pre-activations sit exactly on the kink,
    where central differences measure the average of two one-sided slopes."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def check_grads(eps: float = 1e-4, bound: float = 1e-3):
    g = torch.Generator().manual_seed(0)
    errors = {}
    for spec in LAYER_KINDS_FOR_CHECK:
        layer = build_layer(spec, seed=1)
        key = spec.kind + (f"/{spec.activation}" if spec.kind == "fully_connected" else "")
        errors[key] = grad_check(layer, _layer_inputs(spec, g), eps=eps)
    model = _tiny_model(frames_per_step=2)
    jitter_parameters(model)
    batch = end_to_end_batch(model)
    errors["end_to_end"] = grad_check(_EndToEnd(model, batch), (batch.mel,), eps=eps)
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    return worst <= bound, detail


def check_freeze_ladder(steps: int = 50, corrupt_frozen: bool = False, workdir: Optional[str] = None):
    """Adapt a briefly trained tiny model once per rung and byte-compare every tensor."""
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        base_corpus = make_synthetic_corpus(SynthSpec(n_speakers=2, n_utterances_per_speaker=6, seed=3),
                                            f"{tmp}/base")
        new = make_synthetic_corpus(SynthSpec(n_speakers=1, n_utterances_per_speaker=10, seed=11,
                                              speaker_start=2), f"{tmp}/new")
        train, valid = split_train_valid(base_corpus, 0.34, seed=0)
        base = train_average(train, valid, TrainConfig(batch_size=4, validation_interval=10, max_steps=10),
                             model_overrides=TINY_SIZES).best
        n_train, n_valid = split_train_valid(new, 0.2, seed=0)
        rungs = list(FREEZE_LADDER.items())
        notes = []
        ok = all(a < b for (_, a), (_, b) in zip(rungs, rungs[1:]))
        for name, frozen in rungs:
            cfg = TrainConfig.adaptation(freeze=tuple(frozen), max_steps=steps, validation_interval=10,
                                         early_stop_evals=None)
            res = adapt(base, n_train, n_valid, cfg)
            after = res.fit.last
            if corrupt_frozen and frozen:
                after = _corrupt(after, frozen)
            rep = verify_freeze(res.initial, after, frozen)
            moved = all(rep.changed[g] for g in GROUP_NAMES if g not in frozen)
            ok &= rep.passed and moved
            notes.append(f"{name}: frozen {'ok' if rep.passed else 'CHANGED'}, "
                         f"trainable {'moved' if moved else 'STUCK'}")
        return ok, "; ".join(notes)


def _corrupt(ckpt: Checkpoint, frozen) -> Checkpoint:
    """Debug hook: flip one value in the first tensor of a frozen group."""
    tensors = dict(ckpt.tensors)
    name = next(n for n in tensors if group_of(n) in frozen)
    t = tensors[name].copy()
    t.flat[0] = np.float32(t.flat[0]) + np.float32(1.0)
    tensors[name] = t
    return Checkpoint(ckpt.config, tensors, ckpt.step, ckpt.valid_loss, ckpt.seed, ckpt.threads, ckpt.meta)


def run_selftest(fast: bool = False, corrupt_frozen: bool = False) -> List[CheckResult]:
    torch.set_num_threads(1)
    results = [
        _timed("expansion_oracle", check_expansion),
        _timed("streaming_equality", check_streaming),
        _timed("gradient_checks", check_grads),
    ]
    if not fast:
        results.append(_timed("freeze_ladder", lambda: check_freeze_ladder(corrupt_frozen=corrupt_frozen)))
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.seconds:6.1f}s  {r.detail}"
             for r in results]
    return "\n".join(lines)

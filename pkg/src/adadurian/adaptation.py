"""Average-model training, few-shot adaptation under a freeze set, the
two-stage emotion transfer recipe and byte-level freeze verification."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.nn.utils.rnn import pad_sequence

from .checkpoint import Checkpoint, save_checkpoint
from .corpus import Manifest, Utterance, batch_iterator
from .model import AdaDurIAN, Batch, ModelConfig, forward_batch
from .neural import GROUP_NAMES, AdamState, apply_update, freeze_set, group_of

log = logging.getLogger(__name__)

FREEZE_LADDER = {
    "nothing": frozenset(),
    "+phone": frozenset({"phone_embedding"}),
    "+tone_lang": frozenset({"phone_embedding", "tone_stress_embedding", "language_embedding"}),
    "+encoder": frozenset({"phone_embedding", "tone_stress_embedding", "language_embedding",
                           "emotion_embedding", "encoder"}),
}
_rungs = list(FREEZE_LADDER.values())
assert all(a < b for a, b in zip(_rungs, _rungs[1:])), "freeze ladder must be strictly nested"


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class FreezeViolation(TrainingError):
    def __init__(self, report: "AdaptReport"):
        super().__init__(f"frozen tensors changed: {report.violations}")
        self.report = report


LR_SCHEDULES = ("constant", "cosine")


def learning_rate(cfg: "TrainConfig", step: int) -> float:
    """Step size for 1-based ``step``; cosine decays from ``lr`` towards zero at max_steps."""
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / cfg.max_steps))
    return cfg.lr


@dataclass
class TrainConfig:
    batch_size: int = 16
    validation_interval: int = 100
    max_steps: int = 2000
    seed: int = 0
    lr: float = 1e-3
    grad_clip: Optional[float] = 1.0
    freeze: Tuple[str, ...] = ()
    early_stop_evals: Optional[int] = None
    duration_weight: float = 0.1
    threads: int = 1
    new_speaker_init: str = "mean"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.batch_size < 1 or self.validation_interval < 1 or self.max_steps < 1:
            raise TrainingError("batch_size, validation_interval and max_steps must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise TrainingError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.new_speaker_init != "mean":
            raise TrainingError(f"unsupported new_speaker_init {self.new_speaker_init!r}")
        self.freeze = tuple(sorted(freeze_set(self.freeze)))

    @classmethod
    def average(cls, **kw) -> "TrainConfig":
        """Average-voice recipe: larger peak step with cosine decay to zero."""
        base = dict(lr=3e-3, lr_schedule="cosine")
        base.update(kw)
        return cls(**base)

    @classmethod
    def adaptation(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=2, validation_interval=10, max_steps=500, lr=1e-4,
                    early_stop_evals=20, freeze=tuple(FREEZE_LADDER["+encoder"]))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d


# --- batching ---------------------------------------------------------------

class MelCache:
    """Mels of a manifest as float tensors, loaded once."""

    def __init__(self):
        self._mels: Dict[Tuple[str, str], torch.Tensor] = {}

    def get(self, manifest: Manifest, utt: Utterance) -> torch.Tensor:
        key = (str(manifest.root), utt.utt_id)
        if key not in self._mels:
            self._mels[key] = torch.from_numpy(manifest.load_mel(utt).astype(np.float32))
        return self._mels[key]


def _name_index(names: Sequence[str], name: str, what: str) -> int:
    try:
        return list(names).index(name)
    except ValueError:
        raise TrainingError(f"{what} {name!r} is not known to the model") from None


def check_vocab_compat(manifest: Manifest, cfg: ModelConfig) -> None:
    v = manifest.vocabs
    if (tuple(v.phones), tuple(v.tones), tuple(v.languages)) != (cfg.phones, cfg.tones, cfg.languages):
        raise TrainingError("manifest phone/tone/language vocabularies differ from the model's")


def collate(utts: Sequence[Utterance], manifest: Manifest, cfg: ModelConfig,
            cache: MelCache, dtype=torch.float32) -> Batch:
    v = manifest.vocabs
    seq = lambda key: pad_sequence([torch.tensor([getattr(t, key) for t in u.tokens], dtype=torch.long)
                                    for u in utts], batch_first=True)
    phon_idx = [torch.tensor([i for i, t in enumerate(u.tokens) if not t.is_boundary], dtype=torch.long)
                for u in utts]
    durs = [torch.tensor(u.phoneme_durations, dtype=torch.long) for u in utts]
    mels = [cache.get(manifest, u).to(dtype) for u in utts]
    return Batch(
        phone=seq("phone_id"), tone=seq("tone_stress_id"), lang=seq("language_id"),
        token_lengths=torch.tensor([len(u.tokens) for u in utts], dtype=torch.long),
        phoneme_index=phon_idx, durations=durs,
        speaker=torch.tensor([_name_index(cfg.speakers, v.speakers[u.speaker_id], "speaker") for u in utts]),
        emotion=torch.tensor([_name_index(cfg.emotions, v.emotions[u.emotion_id], "emotion") for u in utts]),
        mel=pad_sequence(mels, batch_first=True),
        mel_lengths=torch.tensor([m.shape[0] for m in mels], dtype=torch.long),
    )


# --- loss -------------------------------------------------------------------

def _masked_l1(pred: torch.Tensor, target: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    mask = (torch.arange(target.shape[1])[None, :] < lengths[:, None]).unsqueeze(-1).to(pred.dtype)
    return ((pred - target).abs() * mask).sum() / (mask.sum() * target.shape[-1])


def compute_loss(batch: Batch, model: AdaDurIAN, duration_weight: float = 0.1):
    """L1(coarse) + L1(refined) + w * L2(log1p durations), teacher forced."""
    out = forward_batch(batch, model)
    coarse = _masked_l1(out["coarse"], batch.mel, batch.mel_lengths)
    refined = _masked_l1(out["refined"], batch.mel, batch.mel_lengths)
    pred = torch.cat(out["log_durations"])
    target = torch.log1p(torch.cat(batch.durations).to(pred.dtype))
    dur = ((pred - target) ** 2).mean()
    loss = coarse + refined + duration_weight * dur
    return loss, {"coarse_l1": coarse.item(), "refined_l1": refined.item(), "duration_l2": dur.item()}


@torch.no_grad()
def evaluate(model: AdaDurIAN, manifest: Manifest, cache: MelCache, duration_weight: float = 0.1) -> float:
    """Mean per-utterance teacher-forced loss."""
    if len(manifest) == 0:
        raise TrainingError("empty validation set")
    total = 0.0
    for utt in manifest.records:
        loss, _ = compute_loss(collate([utt], manifest, model.cfg, cache), model, duration_weight)
        total += float(loss)
    return total / len(manifest)


# --- training loop ------------------------------------------------------------

@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    log: List[dict]
    best_step: int
    best_valid_loss: float


def _fit(model: AdaDurIAN, train: Manifest, valid: Manifest, cfg: TrainConfig,
         cache: Optional[MelCache] = None, on_log=None) -> FitResult:
    if len(train) == 0:
        raise TrainingError("no training data")
    torch.set_num_threads(cfg.threads)
    cache = cache or MelCache()
    frozen = set(cfg.freeze)
    params = dict(model.named_parameters())
    for n, p in params.items():
        p.requires_grad_(group_of(n) not in frozen)
    opt = AdamState(lr=cfg.lr, grad_clip=cfg.grad_clip)
    epoch = 0
    batches = batch_iterator(train, cfg.batch_size, cfg.seed, epoch)
    history: List[dict] = []
    best = None
    best_step, best_loss = 0, math.inf
    stale_evals = 0
    meta = {"threads": cfg.threads, "seed": cfg.seed}
    for step in range(1, cfg.max_steps + 1):
        utts = next(batches, None)
        if utts is None:
            epoch += 1
            batches = batch_iterator(train, cfg.batch_size, cfg.seed, epoch)
            utts = next(batches)
        model.zero_grad(set_to_none=True)
        opt.lr = learning_rate(cfg, step)
        loss, parts = compute_loss(collate(utts, train, model.cfg, cache), model, cfg.duration_weight)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}: {parts}")
        loss.backward()
        apply_update(params, {n: p.grad for n, p in params.items()}, frozen, opt)
        entry = {"step": step, "train_loss": loss.item(), **parts}
        if step % cfg.validation_interval == 0:
            vl = evaluate(model, valid, cache, cfg.duration_weight)
            entry["valid_loss"] = vl
            if vl < best_loss:
                best_loss, best_step, stale_evals = vl, step, 0
                best = model.to_checkpoint(step=step, valid_loss=vl, seed=cfg.seed,
                                           threads=cfg.threads, meta=meta)
            else:
                stale_evals += 1
        history.append(entry)
        if on_log is not None:
            on_log(entry)
        if cfg.early_stop_evals is not None and stale_evals >= cfg.early_stop_evals:
            log.info("early stop at step %d", step)
            break
    for p in params.values():
        p.requires_grad_(True)
    last = model.to_checkpoint(step=history[-1]["step"], valid_loss=history[-1].get("valid_loss"),
                               seed=cfg.seed, threads=cfg.threads, meta=meta)
    if best is None:
        # no validation point reached; the last state is the only candidate
        best_loss = evaluate(model, valid, cache, cfg.duration_weight)
        best_step = history[-1]["step"]
        best = replace(last, valid_loss=best_loss)
        history[-1]["valid_loss"] = best_loss
    return FitResult(best, last, history, best_step, best_loss)


def mel_statistics(manifest: Manifest, cache: MelCache) -> Tuple[float, float]:
    allm = torch.cat([cache.get(manifest, u) for u in manifest.records]).double()
    return float(allm.mean()), float(allm.std())


def train_average(train: Manifest, valid: Manifest, cfg: TrainConfig,
                  model_overrides: Optional[dict] = None, on_log=None) -> FitResult:
    """Train the multi-speaker average model; returns the best-validation checkpoint."""
    v = train.vocabs
    speakers = [v.speakers[i] for i in train.speakers_present()]
    if len(speakers) < 2:
        warnings.warn("average model trained on a single speaker", RuntimeWarning)
    emotions = [v.emotions[i] for i in sorted({u.emotion_id for u in train.records})]
    cache = MelCache()
    mean, std = mel_statistics(train, cache)
    mcfg = ModelConfig.from_vocabs(v, speakers=speakers, emotions=emotions, mel_mean=mean, mel_std=std,
                                   **(model_overrides or {}))
    torch.set_num_threads(cfg.threads)
    model = AdaDurIAN(mcfg, seed=cfg.seed)
    return _fit(model, train, valid, cfg, cache, on_log)


# --- adaptation ----------------------------------------------------------------

def extend_conditions(base: Checkpoint, speakers: Sequence[str] = (), emotions: Sequence[str] = ()) -> Checkpoint:
    """Append embedding rows for unseen speakers/emotions, initialised to the row mean."""
    cfg = dict(base.config)
    tensors = dict(base.tensors)
    for key, table, names in (("speakers", "speaker_embedding.weight", speakers),
                              ("emotions", "emotion_embedding.weight", emotions)):
        new = [n for n in names if n not in cfg[key]]
        if not new:
            continue
        w = tensors[table]
        mean = w.astype(np.float64).mean(axis=0).astype(np.float32)
        tensors[table] = np.concatenate([w, np.repeat(mean[None], len(new), axis=0)])
        cfg[key] = list(cfg[key]) + new
    return Checkpoint(cfg, tensors, base.step, base.valid_loss, base.seed, base.threads, dict(base.meta))


@dataclass
class AdaptReport:
    frozen: List[str]
    changed: Dict[str, bool]
    max_abs_delta: Dict[str, float]
    violations: List[str]
    selected_step: Optional[int] = None
    best_valid_loss: Optional[float] = None
    zero_shot_valid_loss: Optional[float] = None
    train_curve: List[float] = field(default_factory=list)
    valid_curve: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, indent=1, sort_keys=True)


def verify_freeze(before: Checkpoint, after: Checkpoint, freeze: Iterable[str]) -> AdaptReport:
    """Byte-compare every tensor; frozen groups must be unchanged."""
    frozen = freeze_set(freeze)
    if before.config != after.config or set(before.tensors) != set(after.tensors):
        raise TrainingError("checkpoints have different model configurations")
    changed = {g: False for g in GROUP_NAMES}
    delta = {g: 0.0 for g in GROUP_NAMES}
    violations = []
    for name, a in before.tensors.items():
        b = after.tensors[name]
        g = group_of(name)
        same = a.shape == b.shape and np.ascontiguousarray(a).tobytes() == np.ascontiguousarray(b).tobytes()
        if not same:
            changed[g] = True
            delta[g] = max(delta[g], float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))))
            if g in frozen:
                violations.append(name)
    return AdaptReport(sorted(frozen), changed, delta, violations)


@dataclass
class AdaptResult:
    checkpoint: Checkpoint
    report: AdaptReport
    initial: Checkpoint
    fit: FitResult


def adapt(base: Checkpoint, train: Manifest, valid: Manifest, cfg: TrainConfig,
          on_log=None) -> AdaptResult:
    """Fine-tune ``base`` on new-speaker data with the frozen groups held fixed."""
    if len(train) == 0:
        raise TrainingError("empty adaptation data")
    v = train.vocabs
    speakers = [v.speakers[i] for i in train.speakers_present()]
    emotions = [v.emotions[i] for i in sorted({u.emotion_id for u in train.records})]
    initial = extend_conditions(base, speakers, emotions)
    torch.set_num_threads(cfg.threads)
    model = AdaDurIAN.from_checkpoint(initial)
    check_vocab_compat(train, model.cfg)
    cache = MelCache()
    zero_shot = evaluate(model, valid, cache, cfg.duration_weight)
    fit = _fit(model, train, valid, cfg, cache, on_log)
    report = verify_freeze(initial, fit.best, cfg.freeze)
    report.selected_step = fit.best_step
    report.best_valid_loss = fit.best_valid_loss
    report.zero_shot_valid_loss = zero_shot
    report.train_curve = [e["train_loss"] for e in fit.log]
    report.valid_curve = [(e["step"], e["valid_loss"]) for e in fit.log if "valid_loss" in e]
    if not report.passed:
        raise FreezeViolation(report)
    return AdaptResult(fit.best, report, initial, fit)


@dataclass
class EmotionTransferResult:
    checkpoint: Checkpoint
    emotional: AdaptResult
    target: AdaptResult


def transfer_emotion(base: Checkpoint, emotional_train: Manifest, emotional_valid: Manifest,
                     target_train: Manifest, target_valid: Manifest,
                     stage1: Optional[TrainConfig] = None,
                     stage2: Optional[TrainConfig] = None) -> EmotionTransferResult:
    """Stage 1: fine-tune on an emotional corpus with nothing frozen.
    Stage 2: adapt to the neutral target speaker with the full freeze set."""
    n_emotions = len({u.emotion_id for u in emotional_train.records})
    if n_emotions < 2:
        raise TrainingError("emotional corpus needs at least two emotions")
    if len({u.emotion_id for u in target_train.records}) != 1:
        raise TrainingError("target corpus must hold a single emotion")
    stage1 = stage1 or TrainConfig.adaptation(freeze=(), max_steps=300, lr=1e-3, batch_size=4)
    stage2 = stage2 or TrainConfig.adaptation()
    first = adapt(base, emotional_train, emotional_valid, stage1)
    second = adapt(first.checkpoint, target_train, target_valid, stage2)
    return EmotionTransferResult(second.checkpoint, first, second)


def emotion_contrast(model: AdaDurIAN, tokens, speaker_id: int, emotion_ids: Sequence[int],
                     durations: Optional[Sequence[int]] = None) -> Tuple[float, float]:
    """(mean per-frame L1 between renderings of distinct emotions, L1 between two
    identical repeated runs). Durations are shared so frames align."""
    from .model import predict_durations, round_durations, synthesize
    if len(emotion_ids) < 2:
        raise TrainingError("need at least two emotions to contrast")
    if durations is None:
        with torch.no_grad():
            durations = round_durations(predict_durations(tokens, model))
    mels = [synthesize(tokens, speaker_id, e, model, durations)[0] for e in emotion_ids]
    pairs = [np.abs(a - b).mean() for i, a in enumerate(mels) for b in mels[i + 1:]]
    again = synthesize(tokens, speaker_id, emotion_ids[0], model, durations)[0]
    return float(np.mean(pairs)), float(np.abs(again - mels[0]).mean())


# --- run directory ------------------------------------------------------------

def write_run_dir(run_dir, config: dict, fit: FitResult, report: Optional[AdaptReport] = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    with open(run_dir / "log.jsonl", "w") as f:
        for entry in fit.log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    save_checkpoint(fit.best, run_dir / "best.ckpt")
    save_checkpoint(fit.last, run_dir / "last.ckpt")
    if report is not None:
        (run_dir / "adapt_report.json").write_text(report.to_json() + "\n")
    return run_dir

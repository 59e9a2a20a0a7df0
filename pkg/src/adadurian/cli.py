"""Command-line entry points.

Settings resolve as defaults < JSON config file (``--config``) < flags, with
``ADADURIAN_SEED`` replacing the default seed. Every command writes its resolved
settings before doing any work. Exit codes: 0 ok, 1 I/O failure or failed
selftest, 2 configuration error, 3 divergence, 4 freeze verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from .adaptation import (FREEZE_LADDER, DivergenceError, FreezeViolation, TrainConfig, TrainingError,
                         adapt, emotion_contrast, train_average, transfer_emotion, write_run_dir)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (CorpusError, Manifest, SynthSpec, Vocabs, load_manifest, make_synthetic_corpus,
                     parse_token, split_train_valid)
from .dsp import SignalConfig, SignalError, Waveform, griffin_lim, mel_to_linear, write_mel, write_wav
from .dsp import MelSpectrogram
from .model import (TINY_SIZES, AdaDurIAN, ModelConfig, ModelError, decode_streaming, encode,
                    expand_states, predict_durations, round_durations, skip_states, synthesize)
from .neural import FreezeError

log = logging.getLogger("adadurian")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FREEZE = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- defaults per command ------------------------------------------------------

COMMON = {"seed": 0, "threads": 1}

DEFAULTS: Dict[str, dict] = {
    "make-corpus": {"speakers": 2, "utts": 50, "seed": 7, "out": None, "speaker_start": 0,
                    "emotions": "neutral", "phones": 12},
    "train-average": {**COMMON, "train": None, "valid": None, "valid_fraction": 0.1, "out": None,
                      "steps": 2000, "batch_size": 16, "lr": 3e-3, "lr_schedule": "cosine",
                      "valid_every": 100, "model_size": "desk", "model": {}},
    "adapt": {**COMMON, "base": None, "train": None, "valid": None, "valid_fraction": 0.2, "out": None,
              "freeze_rung": "+encoder", "freeze": None, "steps": 500, "batch_size": 2, "lr": 1e-4,
              "valid_every": 10, "early_stop": 20},
    "transfer-emotion": {**COMMON, "base": None, "emotional": None, "target": None, "out": None,
                         "valid_fraction": 0.2, "stage1_steps": 300, "stage1_lr": 1e-3,
                         "stage1_batch_size": 4, "steps": 500, "lr": 1e-4, "valid_every": 10},
    "synthesize": {"checkpoint": None, "input": None, "out": None, "speaker": "0", "emotion": "0",
                   "gl_iters": 60, "wav": True, "threads": 1, "seed": 0},
    "bench-rtf": {"checkpoint": None, "input": None, "out": None, "speaker": "0", "emotion": "0",
                  "threads": 2, "gl_iters": 60, "seed": 0},
    "selftest": {"fast": False, "corrupt_frozen": False, "out": None},
}

REQUIRED = {
    "make-corpus": ("out",),
    "train-average": ("train", "out"),
    "adapt": ("base", "train", "out"),
    "transfer-emotion": ("base", "emotional", "target", "out"),
    "synthesize": ("checkpoint", "input", "out"),
    "bench-rtf": ("checkpoint", "input"),
    "selftest": (),
}


def resolve(command: str, flags: dict, environ=os.environ) -> dict:
    """Merge defaults < config file < flags for one command."""
    cfg = dict(DEFAULTS[command])
    if "seed" in cfg and environ.get("ADADURIAN_SEED"):
        try:
            cfg["seed"] = int(environ["ADADURIAN_SEED"])
        except ValueError:
            raise CliError(EXIT_CONFIG, "ADADURIAN_SEED must be an integer") from None
    path = flags.get("config")
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise CliError(EXIT_CONFIG, f"config {path} must hold a JSON object")
        unknown = set(data) - set(cfg)
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(data)
    for k, v in flags.items():
        if k in cfg and v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise CliError(EXIT_CONFIG, f"missing required settings: {', '.join('--' + m.replace('_', '-') for m in missing)}")
    cfg["command"] = command
    return cfg


def write_config(cfg: dict, directory) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.json"
        path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {directory}: {exc}") from None
    return path


def _load_manifest(path) -> Manifest:
    try:
        return load_manifest(path)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read manifest {path}: {exc}") from None


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _split(train_path, valid_path, fraction, seed):
    train = _load_manifest(train_path)
    if valid_path:
        return train, _load_manifest(valid_path)
    return split_train_valid(train, fraction, seed)


def _model_overrides(cfg: dict) -> dict:
    sizes = {"desk": {}, "tiny": dict(TINY_SIZES),
             "full": dict(duration_width=512, attention_depth=512)}
    if cfg["model_size"] not in sizes:
        raise CliError(EXIT_CONFIG, f"model_size must be one of {sorted(sizes)}")
    return {**sizes[cfg["model_size"]], **cfg.get("model", {})}


def _freeze_groups(cfg: dict):
    if cfg.get("freeze"):
        groups = cfg["freeze"]
        return tuple(g for g in (groups.split(",") if isinstance(groups, str) else groups) if g)
    if cfg["freeze_rung"] not in FREEZE_LADDER:
        raise CliError(EXIT_CONFIG, f"freeze rung must be one of {list(FREEZE_LADDER)}")
    return tuple(sorted(FREEZE_LADDER[cfg["freeze_rung"]]))


# --- commands --------------------------------------------------------------------

def cmd_make_corpus(cfg: dict) -> dict:
    emotions = tuple(e for e in str(cfg["emotions"]).split(",") if e)
    spec = SynthSpec(n_speakers=cfg["speakers"], n_utterances_per_speaker=cfg["utts"], seed=cfg["seed"],
                     speaker_start=cfg["speaker_start"], emotions=emotions,
                     phone_inventory_size=cfg["phones"])
    out = Path(cfg["out"])
    write_config(cfg, out)
    manifest = make_synthetic_corpus(spec, out)
    return {"manifest": str(out / "manifest.tsv"), "records": len(manifest)}


def _train_config(cfg: dict, **kw) -> TrainConfig:
    return TrainConfig(batch_size=cfg["batch_size"], validation_interval=cfg["valid_every"],
                       max_steps=cfg["steps"], seed=cfg["seed"], lr=cfg["lr"], threads=cfg["threads"], **kw)


def cmd_train_average(cfg: dict) -> dict:
    out = Path(cfg["out"])
    write_config(cfg, out)
    train, valid = _split(cfg["train"], cfg["valid"], cfg["valid_fraction"], cfg["seed"])
    tcfg = _train_config(cfg, lr_schedule=cfg["lr_schedule"])
    fit = train_average(train, valid, tcfg, model_overrides=_model_overrides(cfg),
                        on_log=lambda e: log.info("%s", e) if "valid_loss" in e else None)
    write_run_dir(out, cfg, fit)
    return {"run_dir": str(out), "best_step": fit.best_step, "best_valid_loss": fit.best_valid_loss,
            "final_train_loss": fit.log[-1]["train_loss"]}


def cmd_adapt(cfg: dict) -> dict:
    out = Path(cfg["out"])
    base = _load_ckpt(cfg["base"])
    freeze = _freeze_groups(cfg)
    tcfg = TrainConfig.adaptation(batch_size=cfg["batch_size"], validation_interval=cfg["valid_every"],
                                  max_steps=cfg["steps"], seed=cfg["seed"], lr=cfg["lr"],
                                  threads=cfg["threads"], freeze=freeze, early_stop_evals=cfg["early_stop"])
    write_config(cfg, out)
    train, valid = _split(cfg["train"], cfg["valid"], cfg["valid_fraction"], cfg["seed"])
    try:
        res = adapt(base, train, valid, tcfg)
    except FreezeViolation as exc:
        (out / "adapt_report.json").write_text(exc.report.to_json() + "\n")
        raise
    write_run_dir(out, cfg, res.fit, res.report)
    save_checkpoint(res.checkpoint, out / "best.ckpt")
    return {"run_dir": str(out), "frozen": list(tcfg.freeze), "changed": res.report.changed,
            "zero_shot_valid_loss": res.report.zero_shot_valid_loss,
            "best_valid_loss": res.report.best_valid_loss, "selected_step": res.report.selected_step}


def cmd_transfer_emotion(cfg: dict) -> dict:
    out = Path(cfg["out"])
    base = _load_ckpt(cfg["base"])
    write_config(cfg, out)
    e_train, e_valid = split_train_valid(_load_manifest(cfg["emotional"]), cfg["valid_fraction"], cfg["seed"])
    t_train, t_valid = split_train_valid(_load_manifest(cfg["target"]), cfg["valid_fraction"], cfg["seed"])
    stage1 = TrainConfig.adaptation(freeze=(), max_steps=cfg["stage1_steps"], lr=cfg["stage1_lr"],
                                    batch_size=cfg["stage1_batch_size"], validation_interval=cfg["valid_every"],
                                    seed=cfg["seed"], threads=cfg["threads"])
    stage2 = TrainConfig.adaptation(max_steps=cfg["steps"], lr=cfg["lr"], validation_interval=cfg["valid_every"],
                                    seed=cfg["seed"], threads=cfg["threads"])
    res = transfer_emotion(base, e_train, e_valid, t_train, t_valid, stage1, stage2)
    write_run_dir(out / "stage1", cfg, res.emotional.fit, res.emotional.report)
    write_run_dir(out / "stage2", cfg, res.target.fit, res.target.report)
    save_checkpoint(res.checkpoint, out / "best.ckpt")
    model = AdaDurIAN.from_checkpoint(res.checkpoint)
    emotions = [model.cfg.emotions.index(e) for e in model.cfg.emotions]
    target_spk = model.cfg.speakers.index(t_train.vocabs.speakers[t_train.records[0].speaker_id])
    contrast, repeat = emotion_contrast(model, t_train.records[0].tokens, target_spk, emotions)
    return {"run_dir": str(out), "emotions": list(model.cfg.emotions), "emotion_contrast": contrast,
            "repeat_distance": repeat}


def _vocabs_of(model: AdaDurIAN) -> Vocabs:
    c = model.cfg
    return Vocabs(c.phones, c.tones, c.languages, c.speakers, c.emotions)


def _condition_id(value: str, names, what: str) -> int:
    if value in names:
        return list(names).index(value)
    try:
        idx = int(value)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"unknown {what} {value!r}; known: {list(names)}") from None
    if not 0 <= idx < len(names):
        raise CliError(EXIT_CONFIG, f"{what} id {idx} outside [0, {len(names)})")
    return idx


def read_token_file(path, vocabs: Vocabs):
    """One utterance per line in manifest token syntax, optionally followed by a
    tab and space-separated phoneme durations."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read input {path}: {exc}") from None
    items = []
    for no, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        text, _, durs = line.partition("\t")
        tokens = []
        for tok in text.split():
            try:
                tokens.append(parse_token(tok, vocabs))
            except CorpusError as exc:
                raise CliError(EXIT_CONFIG, f"{path}:{no}: token {tok!r}: {exc}") from None
        if not tokens:
            raise CliError(EXIT_CONFIG, f"{path}:{no}: no tokens")
        durations = None
        if durs.strip():
            try:
                durations = [int(d) for d in durs.split()]
            except ValueError:
                raise CliError(EXIT_CONFIG, f"{path}:{no}: durations must be integers") from None
        items.append((no, tokens, durations))
    if not items:
        raise CliError(EXIT_CONFIG, f"{path}: no utterances")
    return items


def cmd_synthesize(cfg: dict) -> dict:
    out = Path(cfg["out"])
    model = AdaDurIAN.from_checkpoint(_load_ckpt(cfg["checkpoint"]))
    write_config(cfg, out)
    vocabs = _vocabs_of(model)
    spk = _condition_id(str(cfg["speaker"]), model.cfg.speakers, "speaker")
    emo = _condition_id(str(cfg["emotion"]), model.cfg.emotions, "emotion")
    signal = SignalConfig(n_mels=model.cfg.n_mels)
    results = []
    for no, tokens, durations in read_token_file(cfg["input"], vocabs):
        try:
            mel, used = synthesize(tokens, spk, emo, model, durations)
        except ModelError as exc:
            raise CliError(EXIT_CONFIG, f"{cfg['input']}:{no}: {exc}") from None
        stem = f"utt{no:04d}"
        write_mel(out / f"{stem}.mel", mel)
        entry = {"line": no, "frames": int(mel.shape[0]), "durations": used, "mel": f"{stem}.mel"}
        if cfg["wav"]:
            lin = mel_to_linear(MelSpectrogram(mel.astype(np.float64), signal))
            wave = griffin_lim(lin, signal, n_iters=cfg["gl_iters"], seed=cfg["seed"],
                               length=mel.shape[0] * signal.hop_length)
            write_wav(out / f"{stem}.wav", wave)
            entry["wav"] = f"{stem}.wav"
            entry["samples"] = len(wave.samples)
        results.append(entry)
    return {"out": str(out), "utterances": results}


def bench(model: AdaDurIAN, items, speaker_id: int, emotion_id: int, gl_iters: int, seed: int) -> dict:
    """Time the streaming synthesis path stage by stage, Griffin-Lim separately."""
    stages = {"encoder": 0.0, "duration": 0.0, "expansion": 0.0, "decoder_postnet": 0.0}
    gl_seconds = 0.0
    frames = 0
    lookahead, first = [], []
    signal = SignalConfig(n_mels=model.cfg.n_mels)
    with torch.no_grad():
        for _, tokens, durations in items:
            t0 = time.perf_counter()
            enc = skip_states(encode(tokens, model), tokens)
            t1 = time.perf_counter()
            if durations is None:
                durations = round_durations(predict_durations(tokens, model))
            t2 = time.perf_counter()
            langs = [t.language_id for t in tokens if not t.is_boundary]
            expanded = expand_states(enc, durations, speaker_id, emotion_id, langs, model)
            t3 = time.perf_counter()
            refined, trace = decode_streaming(expanded, model)
            t4 = time.perf_counter()
            stages["encoder"] += t1 - t0
            stages["duration"] += t2 - t1
            stages["expansion"] += t3 - t2
            stages["decoder_postnet"] += t4 - t3
            frames += refined.shape[0]
            lookahead.append(trace.lookahead)
            first.append(trace.first_frame)
            t5 = time.perf_counter()
            lin = mel_to_linear(MelSpectrogram(refined.double().numpy(), signal))
            griffin_lim(lin, signal, n_iters=gl_iters, seed=seed, length=refined.shape[0] * signal.hop_length)
            gl_seconds += time.perf_counter() - t5
    compute = sum(stages.values())
    audio = frames * signal.hop_length / signal.sample_rate
    return {
        "audio_seconds": audio,
        "compute_seconds": compute,
        "rtf": audio / compute if compute > 0 else float("inf"),
        "stages": stages,
        "griffin_lim_seconds": gl_seconds,
        "rtf_with_griffin_lim": audio / (compute + gl_seconds) if compute + gl_seconds > 0 else float("inf"),
        # worst-case coarse frames decoded beyond an emitted frame, counting the frame itself
        "first_frame_latency_frames": max(lookahead),
        "first_emission_decoded_frames": min(first),
        "postnet_delay": model.cfg.postnet_delay,
        "frames_per_step": model.cfg.frames_per_step,
        "frames": frames,
        "utterances": len(items),
    }


def cmd_bench_rtf(cfg: dict) -> dict:
    model = AdaDurIAN.from_checkpoint(_load_ckpt(cfg["checkpoint"]))
    if cfg.get("out"):
        write_config(cfg, cfg["out"])
    items = read_token_file(cfg["input"], _vocabs_of(model))
    spk = _condition_id(str(cfg["speaker"]), model.cfg.speakers, "speaker")
    emo = _condition_id(str(cfg["emotion"]), model.cfg.emotions, "emotion")
    report = bench(model, items, spk, emo, cfg["gl_iters"], cfg["seed"])
    report["threads"] = cfg["threads"]
    report["config"] = cfg
    if cfg.get("out"):
        (Path(cfg["out"]) / "bench_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def cmd_selftest(cfg: dict) -> dict:
    from .selftest import format_table, run_selftest
    if cfg.get("out"):
        write_config(cfg, cfg["out"])
    results = run_selftest(fast=cfg["fast"], corrupt_frozen=cfg["corrupt_frozen"])
    print(format_table(results), file=sys.stderr)
    report = {"passed": all(r.passed for r in results),
              "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail, "seconds": r.seconds}
                         for r in results]}
    if not report["passed"]:
        raise _SelftestFailed(report)
    return report


class _SelftestFailed(Exception):
    def __init__(self, report):
        super().__init__("selftest failed")
        self.report = report


COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "train-average": cmd_train_average,
    "adapt": cmd_adapt,
    "transfer-emotion": cmd_transfer_emotion,
    "synthesize": cmd_synthesize,
    "bench-rtf": cmd_bench_rtf,
    "selftest": cmd_selftest,
}


# --- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adadurian", description="Few-shot adaptive duration-informed TTS toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, threads=True):
        sp.add_argument("--config", help="JSON file with settings (overridden by flags)")
        sp.add_argument("--json", action="store_true", help="print a JSON report on stdout")
        sp.add_argument("-v", "--verbose", action="store_true")
        if seed:
            sp.add_argument("--seed", type=int)
        if threads:
            sp.add_argument("--threads", type=int)
        return sp

    sp = common(sub.add_parser("make-corpus", help="write a synthetic multi-speaker corpus"), threads=False)
    sp.add_argument("--speakers", type=int)
    sp.add_argument("--utts", type=int, help="utterances per speaker")
    sp.add_argument("--speaker-start", type=int, help="index of the first speaker (names spkNN)")
    sp.add_argument("--emotions", help="comma-separated emotion names")
    sp.add_argument("--phones", type=int, help="phone inventory size")
    sp.add_argument("--out")

    sp = common(sub.add_parser("train-average", help="train the multi-speaker average model"))
    sp.add_argument("--train")
    sp.add_argument("--valid")
    sp.add_argument("--valid-fraction", type=float)
    sp.add_argument("--out")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lr-schedule", choices=["constant", "cosine"])
    sp.add_argument("--valid-every", type=int)
    sp.add_argument("--model-size", choices=["desk", "full", "tiny"])

    sp = common(sub.add_parser("adapt", help="adapt a base model to a new speaker"))
    sp.add_argument("--base")
    sp.add_argument("--train")
    sp.add_argument("--valid")
    sp.add_argument("--valid-fraction", type=float)
    sp.add_argument("--out")
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--freeze-rung", choices=list(FREEZE_LADDER))
    grp.add_argument("--freeze", help="comma-separated parameter groups to freeze")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--valid-every", type=int)
    sp.add_argument("--early-stop", type=int, help="stop after this many evaluations without improvement")

    sp = common(sub.add_parser("transfer-emotion", help="two-stage emotion transfer"))
    sp.add_argument("--base")
    sp.add_argument("--emotional")
    sp.add_argument("--target")
    sp.add_argument("--out")
    sp.add_argument("--valid-fraction", type=float)
    sp.add_argument("--stage1-steps", type=int)
    sp.add_argument("--stage1-lr", type=float)
    sp.add_argument("--stage1-batch-size", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--valid-every", type=int)

    for name, help_ in (("synthesize", "render token lines to mel and WAV"),
                        ("bench-rtf", "measure real-time factor and streaming latency")):
        sp = common(sub.add_parser(name, help=help_))
        sp.add_argument("--checkpoint")
        sp.add_argument("--input", help="token file: one utterance per line, optional TAB durations")
        sp.add_argument("--out")
        sp.add_argument("--speaker", help="speaker name or index")
        sp.add_argument("--emotion", help="emotion name or index")
        sp.add_argument("--gl-iters", type=int)
        if name == "synthesize":
            sp.add_argument("--no-wav", dest="wav", action="store_const", const=False)

    sp = common(sub.add_parser("selftest", help="run the embedded acceptance checks"), seed=False, threads=False)
    sp.add_argument("--fast", action="store_const", const=True, help="skip training-based checks")
    sp.add_argument("--corrupt-frozen", action="store_const", const=True,
                    help="debug hook: alter a frozen tensor so the freeze check must fail")
    sp.add_argument("--out")
    return p


def _emit(report: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(report, sort_keys=True, default=str))
    else:
        for k, v in report.items():
            if k != "config":
                print(f"{k}: {v}")


def main(argv: Optional[List[str]] = None, environ=os.environ) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "json", "verbose")}
    try:
        cfg = resolve(args.command, flags, environ)
        torch.set_num_threads(int(cfg.get("threads", 1)))
        report = COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _SelftestFailed as exc:
        if args.json:
            print(json.dumps(exc.report, sort_keys=True))
        print("error: selftest failed", file=sys.stderr)
        return EXIT_IO
    except FreezeViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FREEZE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TrainingError, CorpusError, ModelError, SignalError, FreezeError, CheckpointError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    _emit(report, args.json)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

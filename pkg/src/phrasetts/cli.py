"""Command-line entry point: ``phrasetts <command> [options]``.

Exit status: 0 success, 2 input/validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import crf as crfmod
from .bench import BENCH_LIMITS, benchmark, punctuation_crf
from .errors import InputError, NumericError
from .frontend import (
    Lexicon,
    PhonemeInventory,
    bundled_path,
    segment_phrases,
    tokenize,
)
from .model import DecoderLimits, ModelConfig, ModelWeights, init_model_weights
from .scheduler import (
    PhrasePool,
    synthesize_sentence_ar_baseline,
    synthesize_sentence_parallel,
    synthesize_sentence_sequential,
)
from .tensorio import N_MELS, read_mel, write_mel

log = logging.getLogger("phrasetts")

SEED_ENV = "PPSPEECH_SEED"


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"{SEED_ENV}={env!r} is not an integer") from None


def synthetic_reference_mel(seed: int, frames: int = 160) -> np.ndarray:
    """Deterministic stand-in reference mel used when no ``--ref-mel`` is given."""
    rng = np.random.default_rng([seed, 0x5EF])
    t = np.linspace(0, 1, frames)[:, None]
    bands = np.linspace(0, 1, N_MELS)[None, :]
    base = -4.0 + 3.0 * np.exp(-((bands - 0.25 - 0.1 * np.sin(6 * t)) ** 2) / 0.02)
    return (base + 0.3 * rng.standard_normal((frames, N_MELS))).astype(np.float32)


@dataclass
class RunConfig:
    lexicon: Path
    phones: Path
    crf: Path | None
    weights: Path | None
    ref_mel: Path | None
    out: Path | None
    workers: int = 1
    seed: int = 0
    limits: DecoderLimits = field(default_factory=DecoderLimits)

    def validate(self):
        for name in ("lexicon", "phones", "crf", "weights", "ref_mel"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise InputError(f"--{name.replace('_', '-')}: {p} does not exist")
        if self.workers < 1:
            raise InputError("--workers must be >= 1")
        if self.limits.max_frames is not None and self.limits.max_frames < 1:
            raise InputError("--max-frames must be >= 1")

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        limits = DecoderLimits(max_frames=getattr(args, "max_frames", None),
                               stop_threshold=getattr(args, "stop_threshold", 0.5))
        cfg = cls(Path(args.lexicon), Path(args.phones), _opt(getattr(args, "crf", None)),
                  _opt(getattr(args, "weights", None)), _opt(getattr(args, "ref_mel", None)),
                  _opt(getattr(args, "out", None)), getattr(args, "workers", 1),
                  resolve_seed(getattr(args, "seed", None)), limits)
        cfg.validate()
        return cfg

    def load_crf(self):
        return crfmod.load_crf(self.crf) if self.crf else crfmod.load_crf(bundled_path("boundary.ppcf"))

    def load_weights(self, small: bool = False) -> ModelWeights:
        if self.weights:
            return ModelWeights.load(self.weights)
        n = len(PhonemeInventory.load(self.phones))
        config = ModelConfig.small(n) if small else ModelConfig(n)
        return init_model_weights(config, self.seed)

    def load_reference(self) -> np.ndarray:
        if self.ref_mel:
            return read_mel(self.ref_mel)[0]
        return synthetic_reference_mel(self.seed)


def _opt(value):
    return None if value is None else Path(value)


def _read_lines(path: str | None) -> list[str]:
    if path is None or path == "-":
        text = sys.stdin.read()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise InputError(f"{path} does not exist") from None
    return [line.strip() for line in text.splitlines() if line.strip()]


# -- commands -------------------------------------------------------------------


def cmd_train_crf(args) -> int:
    corpus = crfmod.read_corpus(args.corpus)
    config = crfmod.TrainConfig(step=args.step, decay=args.decay, decay_every=args.decay_every,
                                l2=args.l2, epochs=args.epochs)
    model, history = crfmod.fit_crf(corpus, config)
    crfmod.save_crf(model, args.out)
    gold = [ex.gold_labels for ex in corpus]
    pred = [crfmod.beam_decode_dynamic(model, ex.sentence, args.beam) for ex in corpus]
    nll, _, _ = crfmod.nll_gradient(model, corpus)
    print(f"sentences: {len(corpus)}  features: {len(model.keys)}")
    print(f"final objective (mean NLL + L2): {history[-1]:.6f}  final NLL (corpus total): {nll:.6f}")
    print(f"training boundary F1: {crfmod.boundary_f1(gold, pred):.4f}  "
          f"token accuracy: {crfmod.token_accuracy(gold, pred):.4f}")
    return 0


def cmd_segment(args) -> int:
    lexicon = Lexicon.load(args.lexicon)
    model = crfmod.load_crf(args.crf) if args.crf else crfmod.load_crf(bundled_path("boundary.ppcf"))
    lines = _read_lines(args.text)
    if not lines:
        raise InputError("no input text")
    for k, line in enumerate(lines):
        sent = tokenize(line, lexicon)
        phrases = segment_phrases(sent, model, args.beam)
        if k:
            print()
        for p in phrases:
            words = " ".join(sent.words[p.start : p.end])
            last = p.index_in_sentence == p.total_in_sentence - 1
            print(words if last else f"{words} |L3|")
    return 0


def cmd_init_weights(args) -> int:
    seed = resolve_seed(args.seed)
    n = len(PhonemeInventory.load(args.phones))
    config = ModelConfig.small(n) if args.config == "small" else ModelConfig(n)
    weights = init_model_weights(config, seed)
    weights.save(args.out)
    ModelWeights.load(args.out)  # round-trip through manifest validation
    print(f"tensors: {len(weights.tensors)}  parameters: {weights.parameter_count}")
    return 0


def cmd_synth(args) -> int:
    cfg = RunConfig.from_args(args)
    if cfg.out is None:
        raise InputError("--out is required")
    lexicon = Lexicon.load(cfg.lexicon)
    inventory = PhonemeInventory.load(cfg.phones)
    model = cfg.load_crf()
    weights = cfg.load_weights()
    if weights.config.n_phonemes != len(inventory):
        raise InputError(f"weights expect {weights.config.n_phonemes} phonemes, inventory has {len(inventory)}")
    reference = cfg.load_reference()
    lines = _read_lines(args.text)
    if not lines:
        raise InputError("no input text")
    cfg.out.mkdir(parents=True, exist_ok=True)

    pool = None
    if args.mode == "parallel" and cfg.workers > 1:
        pool = PhrasePool(weights, cfg.workers, str(cfg.weights) if cfg.weights else None)
    try:
        with open(cfg.out / "manifest.jsonl", "w", encoding="utf-8") as manifest:
            for i, line in enumerate(lines):
                t0 = time.perf_counter()
                if args.mode == "parallel":
                    res = synthesize_sentence_parallel(line, model, lexicon, inventory, weights, reference,
                                                       cfg.workers, cfg.limits, pool=pool)
                elif args.mode == "sequential":
                    res = synthesize_sentence_sequential(line, model, lexicon, inventory, weights, reference,
                                                         cfg.limits)
                else:
                    res = synthesize_sentence_ar_baseline(line, model, lexicon, inventory, weights, reference,
                                                          cfg.limits)
                elapsed = (time.perf_counter() - t0) * 1e3
                name = f"sentence_{i:04d}.mel"
                write_mel(cfg.out / name, res.mel)
                record = {"sentence": i, "file": name, "mode": args.mode, "phrases": len(res.phrases),
                          "frames": res.frames, "phrase_frames": [o.frames for o in res.outputs],
                          "stop_reasons": res.stop_reasons, "elapsed_ms": round(elapsed, 3)}
                manifest.write(json.dumps(record, ensure_ascii=False) + "\n")
                print(f"[{i}] {len(res.phrases)} phrases, {res.frames} frames, {elapsed:.1f} ms -> {name}")
    finally:
        if pool is not None:
            pool.close()
    return 0


def _parse_groups(text: str) -> list[int]:
    try:
        groups = [int(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise InputError(f"--groups: {text!r} is not a comma-separated integer list") from None
    if not groups or min(groups) < 1:
        raise InputError("--groups needs at least one positive phrase count")
    return groups


def cmd_bench(args) -> int:
    from .plotting import plot_benchmark

    cfg = RunConfig.from_args(args)
    groups = _parse_groups(args.groups)
    lexicon = Lexicon.load(cfg.lexicon)
    inventory = PhonemeInventory.load(cfg.phones)
    model = cfg.load_crf() if cfg.crf else punctuation_crf()
    weights = cfg.load_weights(small=True)
    limits = DecoderLimits(max_frames=cfg.limits.max_frames, stop_threshold=BENCH_LIMITS.stop_threshold,
                           frames_per_phoneme=args.frames_per_phoneme)
    out = cfg.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    report = benchmark(groups, args.sentences, args.repeats, cfg.workers, weights, lexicon, inventory,
                       cfg.load_reference(), model, limits, cfg.seed)
    report.write_csv(out / "bench.csv")
    plot_benchmark(report.rows, out / "bench.png",
                   title=f"{cfg.workers} workers, {os.cpu_count()} CPU(s)")
    print(report.table())
    print(f"wrote {out / 'bench.csv'} and {out / 'bench.png'}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phrasetts", description="Phrase-parallel TTS inference (mel output).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def frontend_flags(sp, crf=True):
        sp.add_argument("--lexicon", default=str(bundled_path("lexicon.tsv")))
        sp.add_argument("--phones", default=str(bundled_path("phones.txt")))
        if crf:
            sp.add_argument("--crf", help="PPCF boundary model (default: bundled model)")

    def model_flags(sp):
        sp.add_argument("--weights", help="PPSW weight file (default: random weights from --seed)")
        sp.add_argument("--ref-mel", help="reference mel file for the acoustic embedding")
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int, help=f"falls back to ${SEED_ENV}, then 0")
        sp.add_argument("--max-frames", type=int)
        sp.add_argument("--stop-threshold", type=float, default=0.5)

    sp = sub.add_parser("train-crf", help="train the phrase boundary CRF")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--step", type=float, default=0.1)
    sp.add_argument("--decay", type=float, default=0.9)
    sp.add_argument("--decay-every", type=int, default=20)
    sp.add_argument("--l2", type=float, default=1e-3)
    sp.add_argument("--beam", type=int, default=8)
    sp.set_defaults(func=cmd_train_crf)

    sp = sub.add_parser("segment", help="split text into intonation phrases")
    frontend_flags(sp)
    sp.add_argument("--text", help="input file, one sentence per line (default: stdin)")
    sp.add_argument("--beam", type=int, default=8)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("init-weights", help="write seeded random model weights")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--phones", default=str(bundled_path("phones.txt")))
    sp.add_argument("--config", choices=("default", "small"), default="default")
    sp.set_defaults(func=cmd_init_weights)

    sp = sub.add_parser("synth", help="synthesize mel-spectrograms, one file per input line")
    frontend_flags(sp)
    model_flags(sp)
    sp.add_argument("--text", help="input file, one sentence per line (default: stdin)")
    sp.add_argument("--mode", choices=("parallel", "ar-baseline", "sequential"), default="parallel")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("bench", help="latency of phrase-parallel vs sentence-level decoding")
    frontend_flags(sp)
    model_flags(sp)
    sp.add_argument("--groups", default="5,10,15,20,25,30,35,40")
    sp.add_argument("--sentences", type=int, default=3, help="sentences per group")
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--frames-per-phoneme", type=int, default=BENCH_LIMITS.frames_per_phoneme)
    sp.set_defaults(func=cmd_bench, workers=8)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

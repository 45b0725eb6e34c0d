"""Synthetic sentences and the parallel-vs-baseline latency benchmark."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .crf import CrfModel, TrainingExample
from .frontend import L3, O, Lexicon, PhonemeInventory, tokenize
from .model import DecoderLimits, ModelWeights
from .scheduler import PhrasePool, synthesize_sentence_ar_baseline, synthesize_sentence_parallel

PHRASE_PHONEMES = tuple(range(12, 19))
# mean of this distribution over 12..18 is 15.4 phonemes per phrase
PHRASE_PHONEME_WEIGHTS = (0.05, 0.10, 0.15, 0.20, 0.22, 0.16, 0.12)
CSV_HEADER = ("phrase_count", "mode", "mean_ms", "std_ms", "speedup")
BASELINE, PARALLEL = "ar-baseline", "parallel"

# frame limit per phoneme and an unreachable stop threshold: random weights
# give no meaningful stop token, so decode length is fixed by phoneme count
BENCH_LIMITS = DecoderLimits(frames_per_phoneme=4, stop_threshold=1.0)


def punctuation_crf(weight: float = 10.0) -> CrfModel:
    """Hand-set boundary model: L3 exactly after punctuation."""
    return CrfModel.from_dict({"punct=1": [0.0, weight]})


def synthetic_phrase(rng: np.random.Generator, lexicon: Lexicon, target: int | None = None,
                     lo: int | None = None, hi: int | None = None, attempts: int = 10_000) -> list[str]:
    """Random lexicon words whose phonemes total ``target``.

    ``target`` defaults to a draw from PHRASE_PHONEMES; ``lo``/``hi`` relax the
    accepted total (both default to ``target``).
    """
    if target is None:
        target = int(rng.choice(PHRASE_PHONEMES, p=PHRASE_PHONEME_WEIGHTS))
    lo = target if lo is None else lo
    hi = target if hi is None else hi
    words = sorted(lexicon.entries)
    sizes = {w: len(lexicon[w].phonemes) for w in words}
    for _ in range(attempts):
        out, total = [], 0
        while True:
            fitting = [w for w in words if sizes[w] <= target - total]
            if not fitting:
                break
            w = fitting[int(rng.integers(len(fitting)))]
            out.append(w)
            total += sizes[w]
        if out and lo <= total <= hi:
            return out
    raise ValueError(f"no word sequence of {lo}..{hi} phonemes found in the lexicon")


def synthetic_sentence(rng: np.random.Generator, lexicon: Lexicon, n_phrases: int,
                       target: int | None = None) -> str:
    """A sentence of ``n_phrases`` comma-separated phrases ending in a full stop."""
    phrases = ["".join(synthetic_phrase(rng, lexicon, target)) for _ in range(n_phrases)]
    return "，".join(phrases) + "。"


def synthetic_corpus(rng: np.random.Generator, lexicon: Lexicon, sentences: int,
                     max_phrases: int = 6) -> list[TrainingExample]:
    """Labelled sentences in which every L3 coincides with punctuation."""
    out = []
    for _ in range(sentences):
        lo = int(rng.integers(3, 12))
        text = "，".join("".join(synthetic_phrase(rng, lexicon, lo=lo, hi=lo + 6, target=lo + int(rng.integers(0, 7))))
                        for _ in range(int(rng.integers(1, max_phrases + 1)))) + "。"
        sent = tokenize(text, lexicon)
        labels = tuple(L3 if t.followed_by_punct else O for t in sent.tokens)
        out.append(TrainingExample(sent, labels))
    return out


@dataclass(frozen=True)
class BenchmarkRow:
    phrase_count: int
    mode: str
    mean_ms: float
    std_ms: float
    speedup: float


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    # longest single-phrase decode task per parallel run, milliseconds
    max_task_ms: dict[int, list[float]]
    parallel_ms: dict[int, list[float]]

    def speedups(self) -> dict[int, float]:
        return {r.phrase_count: r.speedup for r in self.rows if r.mode == PARALLEL}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.phrase_count, r.mode, f"{r.mean_ms:.3f}", f"{r.std_ms:.3f}", f"{r.speedup:.4f}"])

    def table(self) -> str:
        lines = [f"{'phrases':>8} {'baseline ms':>12} {'parallel ms':>12} {'speedup':>8}"]
        base = {r.phrase_count: r for r in self.rows if r.mode == BASELINE}
        for r in self.rows:
            if r.mode == PARALLEL:
                b = base[r.phrase_count]
                lines.append(f"{r.phrase_count:>8} {b.mean_ms:>12.1f} {r.mean_ms:>12.1f} {r.speedup:>8.2f}")
        return "\n".join(lines)


def read_csv(path: str | Path) -> list[BenchmarkRow]:
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [BenchmarkRow(int(r["phrase_count"]), r["mode"], float(r["mean_ms"]), float(r["std_ms"]),
                             float(r["speedup"])) for r in reader]


def _stats(samples: Sequence[float]) -> tuple[float, float]:
    mean = statistics.fmean(samples)
    std = statistics.pstdev(samples) if len(samples) > 1 else 0.0
    return mean, std


def benchmark(groups: Sequence[int], sentences_per_group: int, repeats: int, worker_count: int,
              weights: ModelWeights, lexicon: Lexicon, inventory: PhonemeInventory,
              reference_mel: np.ndarray, crf: CrfModel | None = None,
              limits: DecoderLimits = BENCH_LIMITS, seed: int = 0,
              pool: PhrasePool | None = None) -> BenchmarkReport:
    """Time sentence-level baseline vs phrase-parallel synthesis per phrase-count group.

    Each timing covers the whole per-sentence pipeline from text to mel.
    """
    if not groups:
        raise ValueError("groups must be non-empty")
    crf = crf or punctuation_crf()
    rng = np.random.default_rng(seed)
    texts = {g: [synthetic_sentence(rng, lexicon, g) for _ in range(sentences_per_group)] for g in groups}
    own_pool = pool is None and worker_count > 1
    if own_pool:
        pool = PhrasePool(weights, worker_count)
    rows, max_task, par_all = [], {}, {}
    try:
        for g in groups:
            base_ms, par_ms, task_ms = [], [], []
            for text in texts[g]:
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    synthesize_sentence_ar_baseline(text, crf, lexicon, inventory, weights, reference_mel, limits)
                    t1 = time.perf_counter()
                    p = synthesize_sentence_parallel(text, crf, lexicon, inventory, weights, reference_mel,
                                                     worker_count, limits, pool=pool)
                    t2 = time.perf_counter()
                    if len(p.phrases) != g:
                        raise RuntimeError(f"expected {g} phrases, segmented {len(p.phrases)}")
                    base_ms.append((t1 - t0) * 1e3)
                    par_ms.append((t2 - t1) * 1e3)
                    task_ms.append(max(o.elapsed_s for o in p.outputs) * 1e3)
            bm, bs = _stats(base_ms)
            pm, ps = _stats(par_ms)
            rows.append(BenchmarkRow(g, BASELINE, bm, bs, 1.0))
            rows.append(BenchmarkRow(g, PARALLEL, pm, ps, bm / pm))
            max_task[g] = task_ms
            par_all[g] = par_ms
    finally:
        if own_pool:
            pool.close()
    return BenchmarkReport(rows, max_task, par_all)

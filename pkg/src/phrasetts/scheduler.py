"""Sliding windows, phrase-parallel synthesis and the sentence-level baseline.

Parallel synthesis runs in two pool phases: every phrase is encoded once
into an ``EncoderCache``, then one decode task per phrase builds its context
embedding from the cached neighbour encodings and decodes.  Results are
assembled in phrase order, and BLAS is pinned to one thread everywhere, so
the output is bit-identical for any worker count.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .frontend import (
    Lexicon,
    PhonemeInventory,
    PhonemeSequence,
    Phrase,
    Sentence,
    g2p,
    segment_phrases,
    sentence_phonemes,
    tokenize,
)
from .model import (
    DecoderLimits,
    ModelWeights,
    StopReason,
    acoustic_embed,
    condition_concat,
    context_embed,
    decode_mel,
    encode_phrase,
)
from .nn import single_threaded_blas

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SlidingWindowConfig:
    M: int = 1  # previous-context phrases
    N: int = 1  # next-context phrases
    K: int = 1  # current phrases per window
    shift: int = 1

    def __post_init__(self):
        if self.M < 0 or self.N < 0 or self.K < 1 or self.shift < 1:
            raise ValueError(f"invalid window config {self}")


INFERENCE_WINDOWS = SlidingWindowConfig(M=1, N=1, K=1, shift=1)


@dataclass(frozen=True)
class PhraseWindow:
    prev: tuple[int, ...]
    current: tuple[int, ...]
    next: tuple[int, ...]


def build_windows(phrase_count: int, config: SlidingWindowConfig) -> list[PhraseWindow]:
    """Slide a K-phrase block by ``shift`` until it reaches the last phrase.

    The final block is truncated when it overruns the sentence, and the
    context lists are truncated at both edges.
    """
    if phrase_count < 1:
        raise ValueError("phrase_count must be >= 1")
    windows = []
    start = 0
    while True:
        end = min(start + config.K, phrase_count)
        windows.append(PhraseWindow(
            prev=tuple(range(max(0, start - config.M), start)),
            current=tuple(range(start, end)),
            next=tuple(range(end, min(phrase_count, end + config.N))),
        ))
        if start + config.K >= phrase_count:
            return windows
        start += config.shift


class EncoderCache:
    """Per-sentence phrase encodings, computed at most once each."""

    def __init__(self):
        self._store: dict[int, np.ndarray] = {}
        self.encodes = 0

    def __contains__(self, index: int) -> bool:
        return index in self._store

    def __getitem__(self, index: int) -> np.ndarray:
        return self._store[index]

    def get(self, index: int | None):
        return None if index is None else self._store[index]

    def put(self, index: int, encoding: np.ndarray) -> None:
        if index in self._store:
            raise KeyError(f"phrase {index} already encoded")
        encoding.setflags(write=False)
        self._store[index] = encoding
        self.encodes += 1

    def fill(self, phonemes: Sequence[PhonemeSequence], encode: Callable[[Iterable], Iterable[np.ndarray]]):
        todo = [i for i in range(len(phonemes)) if i not in self]
        for i, enc in zip(todo, encode(phonemes[i] for i in todo)):
            self.put(i, enc)

    def __len__(self) -> int:
        return len(self._store)


@dataclass
class PhraseOutput:
    index: int
    mel: np.ndarray
    stopped_by: StopReason
    elapsed_s: float  # time spent inside the decode task

    @property
    def frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class SynthesisResult:
    mel: np.ndarray  # [F, 80]
    phrases: list[Phrase]
    outputs: list[PhraseOutput]
    sentence: Sentence
    encodes: int = 0
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.mel.shape[0]

    @property
    def stop_reasons(self) -> list[str]:
        return [o.stopped_by.value for o in self.outputs]


# -- worker side -------------------------------------------------------------------

_WORKER_WEIGHTS: ModelWeights | None = None


def _init_worker(weights: ModelWeights | str):
    global _WORKER_WEIGHTS
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1, user_api="blas")
    _WORKER_WEIGHTS = ModelWeights.load(weights) if isinstance(weights, str) else weights


def _encode_task(phonemes: PhonemeSequence) -> np.ndarray:
    return encode_phrase(phonemes, _WORKER_WEIGHTS)


def _phrase_task(args) -> PhraseOutput:
    return run_phrase(*args, weights=_WORKER_WEIGHTS)


def run_phrase(index: int, enc: np.ndarray, prev: np.ndarray | None, nxt: np.ndarray | None,
               acoustic: np.ndarray, limits: DecoderLimits, weights: ModelWeights) -> PhraseOutput:
    """Context embedding, condition assembly and decoding for one phrase."""
    t0 = time.perf_counter()
    ctx = context_embed(prev, nxt, weights)
    memory = condition_concat(enc, ctx, acoustic)
    res = decode_mel(memory, weights, limits)
    return PhraseOutput(index, res.mel, res.stopped_by, time.perf_counter() - t0)


class PhrasePool:
    """Fixed-size process pool holding a read-only copy of the model weights.

    Workers are forked where the platform allows (inheriting the weights
    without copying) and spawned otherwise, receiving the weights once at
    start-up or loading them from ``weights_path``.  Use as a context manager.
    """

    def __init__(self, weights: ModelWeights, workers: int, weights_path: str | None = None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.weights = weights
        self.workers = workers
        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        ctx = mp.get_context(method)
        self._executor = ProcessPoolExecutor(
            max_workers=workers, mp_context=ctx, initializer=_init_worker,
            initargs=(weights_path if weights_path else weights,))
        # start every worker now so start-up is not billed to the first sentence
        list(self._executor.map(_noop, range(workers)))

    def encode(self, phonemes: Iterable[PhonemeSequence]) -> list[np.ndarray]:
        return list(self._executor.map(_encode_task, phonemes))

    def run(self, tasks: list[tuple]) -> list[PhraseOutput]:
        return list(self._executor.map(_phrase_task, tasks))

    def close(self):
        self._executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _noop(x):
    return x


# -- pipelines ------------------------------------------------------------------


def _as_sentence(sentence: Sentence | str, lexicon: Lexicon) -> Sentence:
    return tokenize(sentence, lexicon) if isinstance(sentence, str) else sentence


def _assemble(outputs: list[PhraseOutput], limits: DecoderLimits) -> np.ndarray:
    outputs = sorted(outputs, key=lambda o: o.index)
    # a threshold >= 1 disables the stop token, so the frame limit is expected
    stop_active = limits.stop_threshold < 1.0
    for o in outputs:
        if stop_active and o.stopped_by is StopReason.FRAME_LIMIT:
            log.warning("phrase %d hit the frame limit (%d frames)", o.index, o.frames)
    return np.concatenate([o.mel for o in outputs], axis=0)


def _phrase_pipeline(sentence, crf, lexicon, inventory, weights, reference_mel, limits,
                     pool: PhrasePool | None, beam_width: int) -> SynthesisResult:
    t0 = time.perf_counter()
    sent = _as_sentence(sentence, lexicon)
    phrases = segment_phrases(sent, crf, beam_width)
    phonemes = [g2p(p, sent, lexicon, inventory) for p in phrases]
    t1 = time.perf_counter()

    cache = EncoderCache()
    if pool is None:
        cache.fill(phonemes, lambda seqs: (encode_phrase(s, weights) for s in seqs))
    else:
        cache.fill(phonemes, pool.encode)
    acoustic = acoustic_embed(reference_mel, weights)
    t2 = time.perf_counter()

    windows = build_windows(len(phrases), INFERENCE_WINDOWS)
    tasks = []
    for win in windows:
        (i,) = win.current
        prev = cache.get(win.prev[-1] if win.prev else None)
        nxt = cache.get(win.next[0] if win.next else None)
        tasks.append((i, cache[i], prev, nxt, acoustic, limits))
    if pool is None:
        outputs = [run_phrase(*t, weights=weights) for t in tasks]
    else:
        outputs = pool.run(tasks)
    mel = _assemble(outputs, limits)
    t3 = time.perf_counter()
    timings = {"frontend_s": t1 - t0, "encode_s": t2 - t1, "decode_s": t3 - t2, "total_s": t3 - t0}
    return SynthesisResult(mel, phrases, sorted(outputs, key=lambda o: o.index), sent, cache.encodes, timings)


def synthesize_sentence_parallel(sentence: Sentence | str, crf, lexicon: Lexicon, inventory: PhonemeInventory,
                                 weights: ModelWeights, reference_mel: np.ndarray, worker_count: int = 1,
                                 limits: DecoderLimits = DecoderLimits(), pool: PhrasePool | None = None,
                                 beam_width: int = 8) -> SynthesisResult:
    """Phrase-parallel synthesis.

    ``pool`` reuses a running ``PhrasePool``; without one, a temporary pool of
    ``worker_count`` processes is started when there is more than one phrase
    to decode.
    """
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    if pool is not None or worker_count == 1:
        with single_threaded_blas():
            return _phrase_pipeline(sentence, crf, lexicon, inventory, weights, reference_mel,
                                    limits, pool if worker_count > 1 else None, beam_width)
    sent = _as_sentence(sentence, lexicon)
    if len(segment_phrases(sent, crf, beam_width)) == 1:
        with single_threaded_blas():
            return _phrase_pipeline(sent, crf, lexicon, inventory, weights, reference_mel, limits, None, beam_width)
    with PhrasePool(weights, worker_count) as tmp, single_threaded_blas():
        return _phrase_pipeline(sent, crf, lexicon, inventory, weights, reference_mel, limits, tmp, beam_width)


def synthesize_sentence_sequential(sentence: Sentence | str, crf, lexicon: Lexicon, inventory: PhonemeInventory,
                                   weights: ModelWeights, reference_mel: np.ndarray,
                                   limits: DecoderLimits = DecoderLimits(), beam_width: int = 8) -> SynthesisResult:
    """The phrase pipeline run in order in the calling process (reference output)."""
    with single_threaded_blas():
        return _phrase_pipeline(sentence, crf, lexicon, inventory, weights, reference_mel, limits, None, beam_width)


def synthesize_sentence_ar_baseline(sentence: Sentence | str, crf, lexicon: Lexicon, inventory: PhonemeInventory,
                                    weights: ModelWeights, reference_mel: np.ndarray,
                                    limits: DecoderLimits = DecoderLimits()) -> SynthesisResult:
    """Sentence-level decoding: the whole sentence is one phrase with no neighbours.

    ``crf`` is accepted for signature parity and ignored.
    """
    with single_threaded_blas():
        t0 = time.perf_counter()
        sent = _as_sentence(sentence, lexicon)
        whole = Phrase((0, len(sent)), 0, 1)
        phonemes = sentence_phonemes(sent, lexicon, inventory)
        t1 = time.perf_counter()
        enc = encode_phrase(phonemes, weights)
        acoustic = acoustic_embed(reference_mel, weights)
        t2 = time.perf_counter()
        out = run_phrase(0, enc, None, None, acoustic, limits, weights)
        mel = _assemble([out], limits)
        t3 = time.perf_counter()
    timings = {"frontend_s": t1 - t0, "encode_s": t2 - t1, "decode_s": t3 - t2, "total_s": t3 - t0}
    return SynthesisResult(mel, [whole], [out], sent, 1, timings)

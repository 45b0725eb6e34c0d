"""Linear-chain CRF over {O, L3} for intonation phrase boundary prediction.

The feature template includes a dynamic feature, the number of words since
the previous predicted L3.  Exact inference is only possible with that
feature frozen, so:

* training uses the gold history (teacher forcing), which keeps the
  objective a plain linear-chain CRF solved by forward-backward;
* ``viterbi_decode`` drops the dynamic feature and is exact;
* ``beam_decode_dynamic`` searches over label histories and is the decoder
  used for segmentation.  Hypotheses whose futures score identically are
  recombined, so a beam of 2 is exact when the model puts no weight on the
  dynamic feature, and a beam of 2**n is exact for any n-token sentence.

This beam search stands in for the original expanded-CRF inference, which
is not described in enough detail to reproduce.

All probability arithmetic is done in log space.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import FormatError, InputError, NonFiniteLoss
from .frontend import (
    DISTANCE_CAP,
    L3,
    LABEL_NAMES,
    O,
    Sentence,
    Token,
    dynamic_feature,
    static_features,
    words_since_history,
)

__all__ = [
    "CrfModel", "TrainingExample", "TrainConfig", "BeamHypothesis",
    "sequence_score", "static_score", "forward_backward", "nll_gradient",
    "train_crf", "fit_crf", "viterbi_decode", "beam_decode_dynamic",
    "save_crf", "load_crf", "read_corpus", "write_corpus", "boundary_f1",
    "O", "L3",
]

DYNAMIC_PREFIX = "dist_prev_L3="
CRF_MAGIC = b"PPCF"
CRF_VERSION = 1


@dataclass
class CrfModel:
    keys: list[str]
    weights: np.ndarray  # (n_features, 2), column = label
    transition: np.ndarray  # (2, 2), [previous label, current label]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(len(self.keys), 2)
        self.transition = np.asarray(self.transition, dtype=np.float64).reshape(2, 2)
        self.index = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError("duplicate feature keys")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.transition).all()):
            raise ValueError("CRF parameters must be finite")

    @classmethod
    def zeros(cls, keys: Iterable[str]) -> "CrfModel":
        keys = list(keys)
        return cls(keys, np.zeros((len(keys), 2)), np.zeros((2, 2)))

    @classmethod
    def from_dict(cls, weights: dict[str, Sequence[float]], transition=None) -> "CrfModel":
        keys = list(weights)
        w = np.array([weights[k] for k in keys], dtype=np.float64).reshape(len(keys), 2)
        t = np.zeros((2, 2)) if transition is None else transition
        return cls(keys, w, t)

    def copy(self) -> "CrfModel":
        return CrfModel(list(self.keys), self.weights.copy(), self.transition.copy())

    def weight(self, key: str) -> np.ndarray:
        i = self.index.get(key)
        return np.zeros(2) if i is None else self.weights[i]

    def emission(self, features: Iterable[str]) -> np.ndarray:
        out = np.zeros(2)
        for key in features:
            i = self.index.get(key)
            if i is not None:
                out += self.weights[i]
        return out

    @property
    def uses_dynamic(self) -> bool:
        return any(k.startswith(DYNAMIC_PREFIX) and self.weights[i].any() for k, i in self.index.items())


@dataclass(frozen=True)
class TrainingExample:
    sentence: Sentence
    gold_labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.gold_labels) != len(self.sentence):
            raise InputError("label count does not match token count")
        if any(lab not in (O, L3) for lab in self.gold_labels):
            raise InputError("labels must be O or L3")


@dataclass(frozen=True)
class BeamHypothesis:
    labels: tuple[int, ...]
    score: float
    words_since_L3: int


@dataclass(frozen=True)
class TrainConfig:
    step: float = 0.1
    decay: float = 0.9
    decay_every: int = 20
    l2: float = 1e-3
    epochs: int = 200


def _position_features(sentence: Sentence, history: Sequence[int] | None) -> list[list[str]]:
    feats = [static_features(sentence, i) for i in range(len(sentence))]
    if history is not None:
        if len(history) != len(sentence):
            raise ValueError("history length does not match sentence")
        for f, h in zip(feats, history):
            f.append(dynamic_feature(h))
    return feats


def _path_score(emissions: np.ndarray, transition: np.ndarray, labels: Sequence[int]) -> float:
    # position by position, emission then transition into it
    total = 0.0
    for i, lab in enumerate(labels):
        if i > 0:
            total += transition[labels[i - 1], lab]
        total += emissions[i, lab]
    return float(total)


def sequence_score(model: CrfModel, sentence: Sentence, labels: Sequence[int]) -> float:
    """Log-potential of ``labels``, with the dynamic feature taken from ``labels`` itself."""
    if len(labels) != len(sentence):
        raise ValueError("label count does not match token count")
    feats = _position_features(sentence, words_since_history(labels))
    emissions = np.array([model.emission(f) for f in feats]).reshape(len(sentence), 2)
    return _path_score(emissions, model.transition, labels)


def static_score(model: CrfModel, sentence: Sentence, labels: Sequence[int],
                 history: Sequence[int] | None = None) -> float:
    """Log-potential with the dynamic feature disabled (``history=None``) or frozen."""
    if len(labels) != len(sentence):
        raise ValueError("label count does not match token count")
    feats = _position_features(sentence, history)
    emissions = np.array([model.emission(f) for f in feats]).reshape(len(sentence), 2)
    return _path_score(emissions, model.transition, labels)


# -- batched forward-backward -------------------------------------------------


@dataclass
class _Compiled:
    """Examples flattened into one sparse design matrix over model features."""

    design: sparse.csr_matrix  # (total positions, n_features)
    offsets: np.ndarray  # sentence start rows, length B + 1
    gold: np.ndarray | None  # (total positions,) or None

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)


def _compile(model: CrfModel, feats_per_sentence: list[list[list[str]]], gold=None) -> _Compiled:
    rows, cols = [], []
    r = 0
    offsets = [0]
    for feats in feats_per_sentence:
        for f in feats:
            for key in f:
                j = model.index.get(key)
                if j is not None:
                    rows.append(r)
                    cols.append(j)
            r += 1
        offsets.append(r)
    data = np.ones(len(rows))
    design = sparse.csr_matrix((data, (rows, cols)), shape=(r, len(model.keys)))
    return _Compiled(design, np.array(offsets), gold)


def _pad(flat: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    lengths = np.diff(offsets)
    out = np.zeros((len(lengths), int(lengths.max()), 2))
    for b, (s, n) in enumerate(zip(offsets[:-1], lengths)):
        out[b, :n] = flat[s : s + n]
    return out


def _lse2(x: np.ndarray, axis: int) -> np.ndarray:
    a, b = np.take(x, 0, axis=axis), np.take(x, 1, axis=axis)
    return np.logaddexp(a, b)


def _forward_backward_padded(E: np.ndarray, lengths: np.ndarray, T: np.ndarray):
    """Log alphas, log betas and log partitions for a padded batch ``E`` (B, L, 2)."""
    B, L, _ = E.shape
    alpha = np.zeros_like(E)
    beta = np.zeros_like(E)
    alpha[:, 0] = E[:, 0]
    for i in range(1, L):
        step = _lse2(alpha[:, i - 1, :, None] + T[None], axis=1) + E[:, i]
        valid = (i < lengths)[:, None]
        alpha[:, i] = np.where(valid, step, alpha[:, i - 1])
    for i in range(L - 2, -1, -1):
        step = _lse2(T[None] + (E[:, i + 1] + beta[:, i + 1])[:, None, :], axis=2)
        valid = (i < lengths - 1)[:, None]
        beta[:, i] = np.where(valid, step, 0.0)
    log_z = _lse2(alpha[np.arange(B), lengths - 1], axis=-1)
    return alpha, beta, log_z


def forward_backward(model: CrfModel, sentence: Sentence,
                     history: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Log partition and per-position label marginals (n, 2).

    The dynamic feature is omitted when ``history`` is None, otherwise frozen
    at the given words-since-L3 values.
    """
    comp = _compile(model, [_position_features(sentence, history)])
    E = np.asarray(comp.design @ model.weights)[None]
    alpha, beta, log_z = _forward_backward_padded(E, comp.lengths, model.transition)
    marginals = np.exp(alpha[0] + beta[0] - log_z[0])
    return float(log_z[0]), marginals


def _nll_and_grad(model: CrfModel, comp: _Compiled):
    lengths = comp.lengths
    flat_E = np.asarray(comp.design @ model.weights)
    E = _pad(flat_E, comp.offsets)
    T = model.transition
    alpha, beta, log_z = _forward_backward_padded(E, lengths, T)
    gold = comp.gold

    # accumulated example by example, so a duplicated example contributes
    # exactly twice (no reassociation across examples)
    nll = 0.0
    grad_w = np.zeros_like(model.weights)
    pair_expected = np.zeros((2, 2))
    pair_gold = np.zeros((2, 2))
    for b, (s, n) in enumerate(zip(comp.offsets[:-1], lengths)):
        g = gold[s : s + n]
        pos = np.arange(n)
        nll += float(log_z[b] - flat_E[s + pos, g].sum() - T[g[:-1], g[1:]].sum())
        resid = np.exp(alpha[b, :n] + beta[b, :n] - log_z[b])
        resid[pos, g] -= 1.0
        grad_w += np.asarray(comp.design[s : s + n].T @ resid)
        if n > 1:
            pairs = (alpha[b, : n - 1, :, None] + T[None]
                     + (E[b, 1:n] + beta[b, 1:n])[:, None, :] - log_z[b])
            pair_expected += np.exp(pairs).sum(axis=0)
            np.add.at(pair_gold, (g[:-1], g[1:]), 1.0)
    return nll, grad_w, pair_expected - pair_gold


def _compile_examples(model: CrfModel, batch: Sequence[TrainingExample]) -> _Compiled:
    feats = [_position_features(ex.sentence, words_since_history(ex.gold_labels)) for ex in batch]
    gold = np.concatenate([np.asarray(ex.gold_labels, dtype=np.intp) for ex in batch])
    return _compile(model, feats, gold)


def nll_gradient(model: CrfModel, batch: Sequence[TrainingExample]) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed negative log-likelihood and its gradient (weights, transition).

    The dynamic feature is fixed to the gold history of each example.
    """
    if not batch:
        raise ValueError("empty batch")
    return _nll_and_grad(model, _compile_examples(model, batch))


def corpus_feature_keys(corpus: Iterable[TrainingExample]) -> list[str]:
    """Feature keys in order of first appearance under teacher forcing."""
    seen: dict[str, None] = {}
    for ex in corpus:
        for f in _position_features(ex.sentence, words_since_history(ex.gold_labels)):
            for key in f:
                seen.setdefault(key, None)
    return list(seen)


def fit_crf(corpus: Sequence[TrainingExample], config: TrainConfig = TrainConfig(),
            on_epoch: Callable[[int, float], None] | None = None) -> tuple[CrfModel, list[float]]:
    """Full-batch gradient descent on mean NLL + l2/2 * ||theta||^2.

    Returns the model and the objective value before each update.
    """
    if not corpus:
        raise InputError("training corpus is empty")
    model = CrfModel.zeros(corpus_feature_keys(corpus))
    comp = _compile_examples(model, corpus)
    n = len(corpus)
    step = config.step
    history = []
    for epoch in range(config.epochs):
        if epoch and epoch % config.decay_every == 0:
            step *= config.decay
        # divergence is reported as NonFiniteLoss below, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            nll, gw, gt = _nll_and_grad(model, comp)
            reg = 0.5 * config.l2 * (np.sum(model.weights ** 2) + np.sum(model.transition ** 2))
        objective = nll / n + reg
        if not math.isfinite(objective):
            raise NonFiniteLoss(f"objective became {objective} at epoch {epoch}")
        history.append(objective)
        if on_epoch is not None:
            on_epoch(epoch, objective)
        model.weights -= step * (gw / n + config.l2 * model.weights)
        model.transition -= step * (gt / n + config.l2 * model.transition)
    if not (np.isfinite(model.weights).all() and np.isfinite(model.transition).all()):
        raise NonFiniteLoss("parameters became non-finite")
    return model, history


def train_crf(corpus: Sequence[TrainingExample], config: TrainConfig = TrainConfig()) -> CrfModel:
    return fit_crf(corpus, config)[0]


# -- decoding -------------------------------------------------------------------


def viterbi_decode(model: CrfModel, sentence: Sentence) -> list[int]:
    """Exact argmax with the dynamic feature disabled.

    Among equal-scoring labelings the lexicographically smallest wins
    (O before L3, earliest position first).
    """
    n = len(sentence)
    E = np.array([model.emission(f) for f in _position_features(sentence, None)]).reshape(n, 2)
    T = model.transition
    # best suffix score given the label at i
    V = np.empty((n, 2))
    V[n - 1] = E[n - 1]
    for i in range(n - 2, -1, -1):
        V[i] = E[i] + np.max(T + V[i + 1][None, :], axis=1)
    labels = [int(np.argmax(V[0]))]
    for i in range(1, n):
        labels.append(int(np.argmax(T[labels[-1]] + V[i])))
    return labels


def beam_decode_dynamic(model: CrfModel, sentence: Sentence, beam_width: int = 8) -> list[int]:
    """Beam search in which each hypothesis sees its own words-since-L3 feature."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    n = len(sentence)
    static = [model.emission(static_features(sentence, i)) for i in range(n)]
    dyn_cache: dict[int, np.ndarray] = {}

    def dyn(since: int) -> np.ndarray:
        b = min(since, DISTANCE_CAP)
        if b not in dyn_cache:
            dyn_cache[b] = model.weight(dynamic_feature(b))
        return dyn_cache[b]

    recombine_on_history = model.uses_dynamic
    T = model.transition
    beam = [BeamHypothesis((), 0.0, 0)]
    for i in range(n):
        best: dict[tuple, BeamHypothesis] = {}
        for hyp in beam:
            local = static[i] + dyn(hyp.words_since_L3)
            for lab in (O, L3):
                score = hyp.score
                if i > 0:
                    score += T[hyp.labels[-1], lab]
                score += local[lab]
                since = 0 if lab == L3 else hyp.words_since_L3 + 1
                cand = BeamHypothesis(hyp.labels + (lab,), float(score), since)
                key = (lab, min(since, DISTANCE_CAP)) if recombine_on_history else (lab,)
                cur = best.get(key)
                if cur is None or (cand.score, _neg(cand.labels)) > (cur.score, _neg(cur.labels)):
                    best[key] = cand
        beam = sorted(best.values(), key=lambda h: (-h.score, h.labels))[:beam_width]
    return list(beam[0].labels)


def _neg(labels: tuple[int, ...]) -> tuple[int, ...]:
    # for "greater is better" comparisons that prefer lexicographically smaller labels
    return tuple(-x for x in labels)


# -- evaluation -----------------------------------------------------------------


def boundary_f1(gold: Sequence[Sequence[int]], pred: Sequence[Sequence[int]]) -> float:
    """F1 of L3 decisions over sentence-internal positions.

    The final token always closes a phrase, so it is excluded.  Returns 1.0
    when neither side has any internal boundary.
    """
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        for a, b in zip(g[:-1], p[:-1]):
            tp += a == L3 and b == L3
            fp += a != L3 and b == L3
            fn += a == L3 and b != L3
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def token_accuracy(gold: Sequence[Sequence[int]], pred: Sequence[Sequence[int]]) -> float:
    total = sum(len(g) for g in gold)
    hits = sum(a == b for g, p in zip(gold, pred) for a, b in zip(g, p))
    return hits / total


# -- file formats ---------------------------------------------------------------


def save_crf(model: CrfModel, path: str | Path) -> None:
    """Write the little-endian PPCF container (reals stored as float32)."""
    parts = [CRF_MAGIC, struct.pack("<I", CRF_VERSION),
             np.asarray(model.transition, dtype="<f4").tobytes(),
             struct.pack("<I", len(model.keys))]
    w32 = np.asarray(model.weights, dtype="<f4")
    for key, row in zip(model.keys, w32):
        raw = key.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, row.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_crf(path: str | Path) -> CrfModel:
    data = Path(path).read_bytes()
    if data[:4] != CRF_MAGIC:
        raise FormatError(f"{path}: not a PPCF file")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != CRF_VERSION:
            raise FormatError(f"{path}: unsupported PPCF version {version}")
        transition = np.frombuffer(data, dtype="<f4", count=4, offset=8).astype(np.float64)
        (count,) = struct.unpack_from("<I", data, 24)
        off = 28
        keys, rows = [], []
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, off)
            off += 4
            keys.append(data[off : off + klen].decode("utf-8"))
            off += klen
            rows.append(np.frombuffer(data, dtype="<f4", count=2, offset=off))
            off += 8
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt PPCF file ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    weights = np.array(rows, dtype=np.float64).reshape(count, 2)
    try:
        return CrfModel(keys, weights, transition.reshape(2, 2))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_corpus(path: str | Path) -> list[TrainingExample]:
    """Read the token-per-line TSV corpus; blank lines separate sentences."""
    examples: list[TrainingExample] = []
    tokens: list[Token] = []
    labels: list[int] = []

    def flush(lineno):
        if not tokens:
            return
        if labels[-1] != L3:
            raise InputError(f"corpus line {lineno}: sentence must end with an L3 label")
        examples.append(TrainingExample(Sentence(tuple(tokens)), tuple(labels)))
        tokens.clear()
        labels.clear()

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise InputError(f"corpus line {lineno}: expected 5 tab-separated fields")
            text, pos, syl, punct, label = parts
            if punct not in ("0", "1") or label not in LABEL_NAMES:
                raise InputError(f"corpus line {lineno}: bad punct flag or label")
            try:
                syllables = int(syl)
            except ValueError:
                raise InputError(f"corpus line {lineno}: bad syllable count {syl!r}") from None
            if not text or syllables < 1:
                raise InputError(f"corpus line {lineno}: empty token or syllables < 1")
            tokens.append(Token(text, pos, syllables, punct == "1"))
            labels.append(LABEL_NAMES.index(label))
        flush(lineno)
    if not examples:
        raise InputError(f"{path}: corpus contains no sentences")
    return examples


def write_corpus(examples: Iterable[TrainingExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            for tok, lab in zip(ex.sentence.tokens, ex.gold_labels):
                fh.write(f"{tok.text}\t{tok.pos}\t{tok.syllables}\t{int(tok.followed_by_punct)}\t{LABEL_NAMES[lab]}\n")
            fh.write("\n")

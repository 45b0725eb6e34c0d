"""Text frontend: lexicon, tokenization, boundary features, phrases and G2P.

Tokenization is greedy longest-match against the lexicon.  POS tags and
syllable counts come from the lexicon file rather than a tagger.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError, UnknownPhoneme, UnsegmentableInput

# Boundary labels.  L3 marks the last token of an intonation phrase.
O, L3 = 0, 1
LABEL_NAMES = ("O", "L3")

PUNCTUATION = frozenset("，。！？；：、,.!?;:")
DISTANCE_CAP = 9
BOS, EOS = "BOS", "EOS"


@dataclass(frozen=True)
class LexEntry:
    phonemes: tuple[str, ...]
    pos: str
    syllables: int


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, LexEntry]

    def __post_init__(self):
        for word, entry in self.entries.items():
            if not word:
                raise InputError("empty word in lexicon")
            if not entry.phonemes:
                raise InputError(f"lexicon entry {word!r} has no phonemes")
            if entry.syllables < 1:
                raise InputError(f"lexicon entry {word!r} has syllable count < 1")

    @property
    def max_word_length(self) -> int:
        return max(len(w) for w in self.entries)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> LexEntry:
        return self.entries[word]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Lexicon":
        entries: dict[str, LexEntry] = {}
        for lineno, raw in enumerate(lines, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise InputError(f"lexicon line {lineno}: expected 4 tab-separated fields")
            word, pos, syl, phones = parts
            try:
                syllables = int(syl)
            except ValueError:
                raise InputError(f"lexicon line {lineno}: bad syllable count {syl!r}") from None
            if word in entries:
                raise InputError(f"lexicon line {lineno}: duplicate word {word!r}")
            entries[word] = LexEntry(tuple(phones.split()), pos, syllables)
        if not entries:
            raise InputError("lexicon is empty")
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)


@dataclass(frozen=True)
class PhonemeInventory:
    phonemes: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.phonemes)) != len(self.phonemes):
            raise InputError("duplicate phoneme in inventory")
        object.__setattr__(self, "id_of", {p: i for i, p in enumerate(self.phonemes)})

    def __len__(self) -> int:
        return len(self.phonemes)

    @classmethod
    def load(cls, path: str | Path) -> "PhonemeInventory":
        with open(path, encoding="utf-8") as fh:
            phones = tuple(line.strip() for line in fh if line.strip())
        if not phones:
            raise InputError(f"phoneme inventory {path} is empty")
        return cls(phones)


def bundled_path(name: str) -> Path:
    """Path of a data file shipped with the package (lexicon.tsv, phones.txt, corpus.tsv)."""
    return Path(str(resources.files("phrasetts") / "data" / name))


def default_lexicon() -> Lexicon:
    return Lexicon.load(bundled_path("lexicon.tsv"))


def default_inventory() -> PhonemeInventory:
    return PhonemeInventory.load(bundled_path("phones.txt"))


@dataclass(frozen=True)
class Token:
    text: str
    pos: str
    syllables: int
    followed_by_punct: bool = False


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def punct_positions(self) -> frozenset[int]:
        return frozenset(i for i, t in enumerate(self.tokens) if t.followed_by_punct)

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]


@dataclass(frozen=True)
class Phrase:
    token_span: tuple[int, int]
    index_in_sentence: int
    total_in_sentence: int

    @property
    def start(self) -> int:
        return self.token_span[0]

    @property
    def end(self) -> int:
        return self.token_span[1]


@dataclass(frozen=True)
class PhonemeSequence:
    phonemes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.phonemes)


def tokenize(raw: str, lexicon: Lexicon) -> Sentence:
    """Segment ``raw`` into lexicon words by greedy longest match.

    Whitespace separates runs and is never part of a word.  A punctuation
    character marks the preceding token as followed by punctuation; leading
    punctuation is dropped.
    """
    text = raw.strip()
    if not text:
        raise InputError("empty input text")
    maxlen = lexicon.max_word_length
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in PUNCTUATION:
            if tokens and not tokens[-1].followed_by_punct:
                last = tokens[-1]
                tokens[-1] = Token(last.text, last.pos, last.syllables, True)
            i += 1
            continue
        # a word may not run across whitespace or punctuation
        stop = i
        while stop < n and stop - i < maxlen and not text[stop].isspace() and text[stop] not in PUNCTUATION:
            stop += 1
        for j in range(stop, i, -1):
            word = text[i:j]
            if word in lexicon:
                entry = lexicon[word]
                tokens.append(Token(word, entry.pos, entry.syllables))
                i = j
                break
        else:
            raise UnsegmentableInput(f"no lexicon entry covers {ch!r} at offset {i}")
    if not tokens:
        raise InputError("input contains no words")
    return Sentence(tuple(tokens))


def _bucket(value: int) -> str:
    return f"{DISTANCE_CAP}+" if value >= DISTANCE_CAP else str(value)


def static_features(sentence: Sentence, position: int) -> list[str]:
    """All template features at ``position`` except the dynamic L3 distance."""
    toks = sentence.tokens
    tok = toks[position]
    syl = str(tok.syllables)
    punct = "1" if tok.followed_by_punct else "0"
    feats = [
        f"text={tok.text}",
        f"pos={tok.pos}",
        f"syl={syl}",
        f"punct={punct}",
        f"text+pos={tok.text}|{tok.pos}",
        f"text+syl={tok.text}|{syl}",
        f"text+punct={tok.text}|{punct}",
        f"pos+syl={tok.pos}|{syl}",
        f"pos+punct={tok.pos}|{punct}",
        f"syl+punct={syl}|{punct}",
    ]
    prev = toks[position - 1] if position > 0 else None
    nxt = toks[position + 1] if position + 1 < len(toks) else None
    feats += [
        f"text[-1,0]={prev.text if prev else BOS}|{tok.text}",
        f"text[0,+1]={tok.text}|{nxt.text if nxt else EOS}",
        f"pos[-1,0]={prev.pos if prev else BOS}|{tok.pos}",
        f"pos[0,+1]={tok.pos}|{nxt.pos if nxt else EOS}",
    ]

    # distances count the tokens strictly after one punctuation mark up to
    # the given token, so a token right after a comma is at distance 1
    p = position - 1
    while p >= 0 and not toks[p].followed_by_punct:
        p -= 1
    if p < 0:
        feats += [f"words_from_prev_punct={BOS}", f"syls_from_prev_punct={BOS}"]
    else:
        syls = sum(t.syllables for t in toks[p + 1 : position + 1])
        feats += [f"words_from_prev_punct={_bucket(position - p)}",
                  f"syls_from_prev_punct={_bucket(syls)}"]
    q = position
    while q < len(toks) and not toks[q].followed_by_punct:
        q += 1
    if q == len(toks):
        feats += [f"words_to_next_punct={EOS}", f"syls_to_next_punct={EOS}"]
    else:
        syls = sum(t.syllables for t in toks[position + 1 : q + 1])
        feats += [f"words_to_next_punct={_bucket(q - position)}",
                  f"syls_to_next_punct={_bucket(syls)}"]
    return feats


def dynamic_feature(words_since_prev_L3: int) -> str:
    return f"dist_prev_L3={_bucket(words_since_prev_L3)}"


def extract_features(sentence: Sentence, position: int, words_since_prev_L3: int | None) -> frozenset[str]:
    """Active boundary-feature keys for one token.

    ``words_since_prev_L3=None`` omits the dynamic feature (static mode).
    """
    if not 0 <= position < len(sentence):
        raise IndexError(position)
    feats = static_features(sentence, position)
    if words_since_prev_L3 is not None:
        feats.append(dynamic_feature(words_since_prev_L3))
    return frozenset(feats)


def words_since_history(labels: Sequence[int]) -> list[int]:
    """Words since the previous L3 at each position, implied by ``labels``.

    The sentence start counts as a boundary, so position 0 is always 0.
    """
    out, since = [], 0
    for lab in labels:
        out.append(since)
        since = 0 if lab == L3 else since + 1
    return out


def phrases_from_labels(labels: Sequence[int]) -> list[Phrase]:
    n = len(labels)
    if n == 0:
        raise InputError("cannot split an empty sentence")
    ends = [i + 1 for i, lab in enumerate(labels) if lab == L3 and i < n - 1] + [n]
    spans, start = [], 0
    for end in ends:
        spans.append((start, end))
        start = end
    return [Phrase(span, k, len(spans)) for k, span in enumerate(spans)]


def segment_phrases(sentence: Sentence, crf, beam_width: int = 8) -> list[Phrase]:
    from .crf import beam_decode_dynamic

    if len(sentence) == 0:
        raise InputError("cannot segment an empty sentence")
    return phrases_from_labels(beam_decode_dynamic(crf, sentence, beam_width))


def g2p(phrase: Phrase, sentence: Sentence, lexicon: Lexicon, inventory: PhonemeInventory) -> PhonemeSequence:
    start, end = phrase.token_span
    if not 0 <= start < end <= len(sentence):
        raise InputError(f"phrase span {phrase.token_span} outside sentence of {len(sentence)} tokens")
    ids = []
    for tok in sentence.tokens[start:end]:
        for ph in lexicon[tok.text].phonemes:
            try:
                ids.append(inventory.id_of[ph])
            except KeyError:
                raise UnknownPhoneme(f"phoneme {ph!r} of {tok.text!r} not in inventory") from None
    return PhonemeSequence(tuple(ids))


def sentence_phonemes(sentence: Sentence, lexicon: Lexicon, inventory: PhonemeInventory) -> PhonemeSequence:
    """Whole-sentence G2P, used by the sentence-level baseline."""
    return g2p(Phrase((0, len(sentence)), 0, 1), sentence, lexicon, inventory)

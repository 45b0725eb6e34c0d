"""Phrase-parallel text-to-speech inference.

Text is split into intonation phrases by a boundary CRF, each phrase is
decoded to a mel-spectrogram by a conditioned encoder-decoder, and phrases
run concurrently on a process pool.
"""
from .crf import CrfModel, beam_decode_dynamic, load_crf, save_crf, train_crf, viterbi_decode
from .frontend import Lexicon, PhonemeInventory, Sentence, g2p, segment_phrases, tokenize
from .model import DecoderLimits, ModelConfig, ModelWeights, init_model_weights
from .scheduler import (
    PhrasePool,
    SlidingWindowConfig,
    build_windows,
    synthesize_sentence_ar_baseline,
    synthesize_sentence_parallel,
    synthesize_sentence_sequential,
)

__version__ = "0.1.0"

__all__ = [
    "CrfModel", "DecoderLimits", "Lexicon", "ModelConfig", "ModelWeights", "PhonemeInventory", "PhrasePool",
    "Sentence", "SlidingWindowConfig", "beam_decode_dynamic", "build_windows", "g2p", "init_model_weights",
    "load_crf", "save_crf", "segment_phrases", "synthesize_sentence_ar_baseline", "synthesize_sentence_parallel",
    "synthesize_sentence_sequential", "tokenize", "train_crf", "viterbi_decode",
]

"""Regenerate the bundled toy training corpus and boundary model.

    python tools/build_bundled_data.py
"""
from pathlib import Path

import numpy as np

from phrasetts.bench import synthetic_corpus
from phrasetts.crf import beam_decode_dynamic, boundary_f1, save_crf, train_crf, write_corpus
from phrasetts.frontend import default_lexicon

DATA = Path(__file__).resolve().parents[1] / "src" / "phrasetts" / "data"

if __name__ == "__main__":
    lexicon = default_lexicon()
    corpus = synthetic_corpus(np.random.default_rng(20200806), lexicon, sentences=120)
    write_corpus(corpus, DATA / "corpus.tsv")
    model = train_crf(corpus)
    save_crf(model, DATA / "boundary.ppcf")
    pred = [beam_decode_dynamic(model, ex.sentence) for ex in corpus]
    print("F1", boundary_f1([ex.gold_labels for ex in corpus], pred), "features", len(model.keys))

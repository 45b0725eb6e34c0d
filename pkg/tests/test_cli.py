import csv
import io
import json

import numpy as np
import pytest

from phrasetts.bench import synthetic_corpus, synthetic_sentence
from phrasetts.cli import main, resolve_seed
from phrasetts.crf import load_crf, write_corpus
from phrasetts.errors import InputError
from phrasetts.frontend import bundled_path
from phrasetts.model import ModelWeights
from phrasetts.tensorio import read_mel


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory, lexicon):
    path = tmp_path_factory.mktemp("corpus") / "toy.tsv"
    write_corpus(synthetic_corpus(np.random.default_rng(3), lexicon, 12, max_phrases=3), path)
    return path


@pytest.fixture(scope="module")
def tiny_file(tmp_path_factory, tiny_weights):
    path = tmp_path_factory.mktemp("weights") / "tiny.ppsw"
    tiny_weights.save(path)
    return path


@pytest.fixture()
def text_file(tmp_path, lexicon):
    rng = np.random.default_rng(21)
    path = tmp_path / "in.txt"
    lines = [synthetic_sentence(rng, lexicon, k, target=5) for k in (3, 1, 4)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestTrainCrf:
    def test_separable_corpus_reaches_f1_one(self, corpus_file, tmp_path, capsys):
        code, out, _ = run(["train-crf", "--corpus", corpus_file, "--out", tmp_path / "m.ppcf", "--epochs", 40],
                           capsys)
        assert code == 0
        assert "final NLL" in out
        assert "training boundary F1: 1.0000" in out
        load_crf(tmp_path / "m.ppcf")

    def test_rerun_is_byte_identical(self, corpus_file, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(["train-crf", "--corpus", corpus_file, "--out", tmp_path / name, "--epochs", 10],
                       capsys)[0] == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_empty_corpus(self, tmp_path, capsys):
        (tmp_path / "empty.tsv").write_text("")
        code, _, err = run(["train-crf", "--corpus", tmp_path / "empty.tsv", "--out", tmp_path / "m"], capsys)
        assert code == 2 and "error" in err
        assert not (tmp_path / "m").exists()

    def test_missing_corpus(self, tmp_path, capsys):
        assert run(["train-crf", "--corpus", tmp_path / "nope.tsv", "--out", tmp_path / "m"], capsys)[0] == 2

    def test_diverging_loss_is_numeric_failure(self, corpus_file, tmp_path, capsys):
        code, _, err = run(["train-crf", "--corpus", corpus_file, "--out", tmp_path / "m", "--step", "1e300"],
                           capsys)
        assert code == 3 and "error" in err


class TestSegment:
    def test_single_word(self, tmp_path, capsys):
        (tmp_path / "t.txt").write_text("学校\n", encoding="utf-8")
        code, out, _ = run(["segment", "--text", tmp_path / "t.txt"], capsys)
        assert code == 0 and out == "学校\n"

    def test_split_after_punctuation(self, tmp_path, capsys):
        (tmp_path / "t.txt").write_text("我们喜欢音乐，他们喜欢唱歌。\n", encoding="utf-8")
        code, out, _ = run(["segment", "--text", tmp_path / "t.txt"], capsys)
        assert code == 0
        assert out.splitlines() == ["我们 喜欢 音乐 |L3|", "他们 喜欢 唱歌"]

    def test_stdin_and_blank_line_between_sentences(self, monkeypatch, capsys):
        monkeypatch.setattr("sys.stdin", io.StringIO("学校\n\n音乐\n"))
        code, out, _ = run(["segment"], capsys)
        assert code == 0 and out == "学校\n\n音乐\n"

    def test_invalid_character(self, tmp_path, capsys):
        (tmp_path / "t.txt").write_text("学校Q\n", encoding="utf-8")
        code, _, err = run(["segment", "--text", tmp_path / "t.txt"], capsys)
        assert code == 2 and "UnsegmentableInput" in err

    def test_empty_input(self, tmp_path, capsys):
        (tmp_path / "t.txt").write_text("\n\n")
        assert run(["segment", "--text", tmp_path / "t.txt"], capsys)[0] == 2


class TestInitWeights:
    def test_same_seed_identical_and_loadable(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, out, _ = run(["init-weights", "--seed", 5, "--config", "small", "--out", tmp_path / name], capsys)
            assert code == 0 and "tensors:" in out and "parameters:" in out
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert ModelWeights.load(tmp_path / "a").config.prenet_dim == 128

    def test_different_seeds_differ(self, tmp_path, capsys):
        run(["init-weights", "--seed", 1, "--config", "small", "--out", tmp_path / "a"], capsys)
        run(["init-weights", "--seed", 2, "--config", "small", "--out", tmp_path / "b"], capsys)
        assert (tmp_path / "a").read_bytes() != (tmp_path / "b").read_bytes()

    def test_seed_from_environment(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("PPSPEECH_SEED", "5")
        run(["init-weights", "--config", "small", "--out", tmp_path / "env"], capsys)
        run(["init-weights", "--seed", 5, "--config", "small", "--out", tmp_path / "flag"], capsys)
        assert (tmp_path / "env").read_bytes() == (tmp_path / "flag").read_bytes()

    def test_resolve_seed(self, monkeypatch):
        monkeypatch.delenv("PPSPEECH_SEED", raising=False)
        assert resolve_seed(None) == 0 and resolve_seed(4) == 4
        monkeypatch.setenv("PPSPEECH_SEED", "x")
        with pytest.raises(InputError):
            resolve_seed(None)


class TestSynth:
    def synth(self, capsys, text, weights, out, *extra):
        return run(["synth", "--text", text, "--weights", weights, "--out", out, "--max-frames", 3, *extra], capsys)

    def test_one_line_one_mel(self, tmp_path, tiny_file, capsys):
        (tmp_path / "t.txt").write_text("我们喜欢音乐\n", encoding="utf-8")
        code, out, _ = self.synth(capsys, tmp_path / "t.txt", tiny_file, tmp_path / "o")
        assert code == 0
        assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["manifest.jsonl", "sentence_0000.mel"]
        mel, _ = read_mel(tmp_path / "o" / "sentence_0000.mel")
        assert mel.ndim == 2 and mel.shape[1] == 80 and 1 <= mel.shape[0] <= 3
        (rec,) = [json.loads(x) for x in (tmp_path / "o" / "manifest.jsonl").read_text().splitlines()]
        assert rec["sentence"] == 0 and rec["phrases"] == 1 and rec["frames"] == mel.shape[0]
        assert set(rec) >= {"stop_reasons", "elapsed_ms", "file"}

    def test_mode_switches_to_baseline(self, text_file, tiny_file, tmp_path, capsys):
        assert self.synth(capsys, text_file, tiny_file, tmp_path / "b", "--mode", "ar-baseline")[0] == 0
        recs = [json.loads(x) for x in (tmp_path / "b" / "manifest.jsonl").read_text().splitlines()]
        assert [r["phrases"] for r in recs] == [1, 1, 1]
        assert all(r["mode"] == "ar-baseline" for r in recs)

    def test_worker_counts_are_byte_identical(self, text_file, tiny_file, tmp_path, capsys):
        for w in (1, 8):
            assert self.synth(capsys, text_file, tiny_file, tmp_path / f"w{w}", "--workers", w)[0] == 0
        assert self.synth(capsys, text_file, tiny_file, tmp_path / "seq", "--mode", "sequential")[0] == 0
        for i in range(3):
            name = f"sentence_{i:04d}.mel"
            ref = (tmp_path / "seq" / name).read_bytes()
            assert (tmp_path / "w1" / name).read_bytes() == ref
            assert (tmp_path / "w8" / name).read_bytes() == ref
        phrases = [json.loads(x)["phrases"] for x in (tmp_path / "w8" / "manifest.jsonl").read_text().splitlines()]
        assert phrases == [3, 1, 4]

    def test_reference_mel_file(self, tmp_path, tiny_file, capsys):
        from phrasetts.cli import synthetic_reference_mel
        from phrasetts.tensorio import write_mel

        write_mel(tmp_path / "ref.mel", synthetic_reference_mel(3, 40))
        (tmp_path / "t.txt").write_text("学校\n", encoding="utf-8")
        assert self.synth(capsys, tmp_path / "t.txt", tiny_file, tmp_path / "o", "--ref-mel", tmp_path / "ref.mel")[0] == 0

    @pytest.mark.parametrize("extra", [["--workers", "0"], ["--max-frames", "0"], ["--crf", "missing.ppcf"]])
    def test_invalid_config(self, text_file, tiny_file, tmp_path, capsys, extra):
        assert self.synth(capsys, text_file, tiny_file, tmp_path / "o", *extra)[0] == 2

    def test_inventory_mismatch(self, text_file, tiny_file, tmp_path, capsys):
        (tmp_path / "phones.txt").write_text("a\nb\n")
        assert self.synth(capsys, text_file, tiny_file, tmp_path / "o", "--phones", tmp_path / "phones.txt")[0] == 2

    def test_corrupt_weights(self, text_file, tmp_path, capsys):
        (tmp_path / "bad.ppsw").write_bytes(b"PPSW garbage")
        assert self.synth(capsys, text_file, tmp_path / "bad.ppsw", tmp_path / "o")[0] == 2


class TestBench:
    def test_rows_csv_and_plot(self, tmp_path, tiny_file, capsys):
        code, out, _ = run(["bench", "--groups", "1,2", "--weights", tiny_file, "--workers", 2, "--out", tmp_path,
                            "--frames-per-phoneme", 1, "--sentences", 1], capsys)
        assert code == 0 and "speedup" in out
        with open(tmp_path / "bench.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["phrase_count", "mode", "mean_ms", "std_ms", "speedup"]
        assert len(rows) == 1 + 2 * 2
        assert [(r[0], r[1]) for r in rows[1:]] == [("1", "ar-baseline"), ("1", "parallel"),
                                                   ("2", "ar-baseline"), ("2", "parallel")]
        assert (tmp_path / "bench.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_single_phrase_group_has_no_speedup(self, tmp_path, capsys):
        # one phrase takes the same work on both paths
        code, _, _ = run(["bench", "--groups", "1", "--workers", 8, "--out", tmp_path, "--sentences", 3,
                          "--repeats", 2], capsys)
        assert code == 0
        with open(tmp_path / "bench.csv", newline="") as fh:
            (par,) = [r for r in csv.DictReader(fh) if r["mode"] == "parallel"]
        assert 0.7 <= float(par["speedup"]) <= 1.3

    @pytest.mark.parametrize("groups", ["", "a,b", "0,3"])
    def test_bad_groups(self, groups, tmp_path, capsys):
        assert run(["bench", "--groups", groups, "--out", tmp_path], capsys)[0] == 2


def test_bundled_files_exist():
    for name in ("lexicon.tsv", "phones.txt", "boundary.ppcf", "corpus.tsv"):
        assert bundled_path(name).is_file()

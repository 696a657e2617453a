import numpy as np
import pytest

from mtspeech import data as D
from mtspeech import model as M
from mtspeech.autodiff import Tensor

SMALL_SPLITS = {"pretrain": D.SplitSpec("src", 6), "finetune": D.SplitSpec("tgt", 4),
                "unlab": D.SplitSpec("src", 3, labeled=False)}


@pytest.fixture
def spec():
    return D.SyntheticSpec(splits=SMALL_SPLITS)


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            D.SyntheticSpec(num_phonemes=1)
        with pytest.raises(ValueError, match="receptive field"):
            D.SyntheticSpec(segment_ms=(10.0, 90.0))
        with pytest.raises(ValueError, match="unknown language"):
            D.SyntheticSpec(splits={"x": D.SplitSpec("zz", 1)})
        with pytest.raises(ValueError, match="successors"):
            D.SyntheticSpec(successors=8)

    def test_json_round_trip(self, spec):
        import json
        assert D.SyntheticSpec.from_dict(json.loads(spec.to_json())) == spec


class TestGeneration:
    def test_deterministic(self, spec):
        a, b = D.generate_split(spec, "pretrain"), D.generate_split(spec, "pretrain")
        for u, v in zip(a, b):
            assert u.samples.tobytes() == v.samples.tobytes()
            assert list(u.labels) == list(v.labels)

    def test_corpus_bytes_identical(self, spec, tmp_path):
        D.generate_corpus(spec, tmp_path / "a")
        D.generate_corpus(spec, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_transcripts_match_segments(self, spec):
        bank, inv = D.template_bank(spec)
        table = D.phonotactics(spec, "src")
        for i in range(20):
            rng = np.random.default_rng(i)
            x, segs = D.synthesize_utterance(spec, bank, inv["src"], rng, table)
            lo, hi = spec.segments_per_utterance
            assert lo <= len(segs) <= hi
            assert segs[-1].end == x.size
            phones = [s.phoneme for s in segs]
            assert 0 not in phones
            assert all(b in table[a] for a, b in zip(phones, phones[1:]))

    def test_no_immediate_repeats(self):
        spec = D.SyntheticSpec(successors=0, splits=SMALL_SPLITS)
        for u in D.generate_split(spec, "pretrain"):
            assert all(a != b for a, b in zip(u.labels, u.labels[1:]))

    def test_frame_labels_align_with_encoder(self, spec):
        enc = spec.encoder()
        for u in D.generate_split(spec, "finetune"):
            assert len(u.frame_labels) == enc.num_frames(u.samples.size)
            desk = M.PRESETS["desk"]
            params = M.init_params(desk, 4, seed=0)
            assert M.feature_encode(u.samples, params, desk.encoder).shape[0] == len(u.frame_labels)
            assert set(u.frame_labels) <= set(u.labels)

    def test_unlabeled_split(self, spec):
        assert all(u.labels is None for u in D.generate_split(spec, "unlab"))

    def test_language_inventories(self):
        spec = D.SyntheticSpec(overlap=0.5, languages=("a", "b", "c"),
                               splits={"x": D.SplitSpec("a", 1)})
        bank, inv = D.template_bank(spec)
        assert len(bank) == 8 + 4 * 2
        assert len(set(inv["a"]) & set(inv["b"])) == 4
        assert not set(inv["b"]) & set(inv["c"]) - set(inv["a"])

    def test_nearest_template_classifier(self):
        spec = D.SyntheticSpec(noise_level=0.0, splits=SMALL_SPLITS)
        bank, inv = D.template_bank(spec)
        n_fft = 4096

        def spectrum(x):
            s = np.abs(np.fft.rfft(x, n_fft))
            return s / np.linalg.norm(s)

        refs = np.stack([spectrum(D.render_segment(bank[i], 1200, spec.sample_rate,
                                                   np.random.default_rng(99)))
                         for i in inv["src"]])
        correct = total = 0
        for i in range(30):
            x, segs = D.synthesize_utterance(spec, bank, inv["src"], np.random.default_rng(i))
            for s in segs:
                guess = int(np.argmax(refs @ spectrum(x[s.start:s.end]))) + 1
                correct += guess == s.phoneme
                total += 1
        assert correct == total


class TestFormats:
    def test_vocab(self, tmp_path):
        v = D.Vocabulary(["a", "b", "c", "d", "e"])
        D.save_vocab(tmp_path / "v.txt", v)
        w = D.load_vocab(tmp_path / "v.txt")
        assert w == v and w.id("a") == 1 and w.id("e") == 5 and w.num_classes == 6
        assert M.init_params(M.PRESETS["desk"], len(w))["head.w"].shape[1] == 6
        with pytest.raises(D.VocabError):
            D.Vocabulary(["a", "a"])
        (tmp_path / "e.txt").write_text("\n")
        with pytest.raises(D.VocabError):
            D.load_vocab(tmp_path / "e.txt")

    def test_manifest_round_trip(self, spec, tmp_path):
        paths = D.generate_corpus(spec, tmp_path)
        man = D.load_manifest(paths["pretrain"])
        D.save_manifest(tmp_path / "copy.tsv", man.records)
        assert D.load_manifest(tmp_path / "copy.tsv").records == man.records
        utts = D.load_utterances(man, with_frame_labels=True)
        mem = D.generate_split(spec, "pretrain")
        for u, v in zip(utts, mem):
            assert u.samples.tobytes() == v.samples.tobytes()
            assert list(u.labels) == list(v.labels)
            assert list(u.frame_labels) == list(v.frame_labels)
        unl = D.load_manifest(paths["unlab"])
        assert all(r.labels is None for r in unl.records)

    def test_manifest_validation(self, spec, tmp_path):
        paths = D.generate_corpus(spec, tmp_path)
        lines = paths["pretrain"].read_text().splitlines()
        cols = lines[0].split("\t")

        def check(row, match):
            (tmp_path / "bad.tsv").write_text(row + "\n")
            with pytest.raises(D.ManifestError, match=match):
                D.load_manifest(tmp_path / "bad.tsv")

        check("\t".join([cols[0], str(int(cols[1]) + 1), cols[2], cols[3]]), "declared")
        check("\t".join(["audio/nope.wav", cols[1], cols[2], cols[3]]), "does not exist")
        check("\t".join([cols[0], cols[1], "1 0 2", cols[3]]), "blank")
        check("\t".join(cols[:3]), "columns")
        with pytest.raises(D.ManifestError):
            D.load_manifest(tmp_path / "missing.tsv")

    def test_wav_round_trip(self, tmp_path):
        x = np.round(np.random.default_rng(0).uniform(-1, 1, 500) * 32767) / 32768
        D.write_wav(tmp_path / "a.wav", x, 16000)
        y, rate = D.read_wav(tmp_path / "a.wav")
        assert rate == 16000 and y.tobytes() == x.tobytes()

    def test_unwritable_output(self, spec, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(D.DataError):
            D.generate_corpus(spec, tmp_path / "file" / "sub")

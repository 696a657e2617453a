import json
import subprocess
import sys

import pytest

from mtspeech import cli
from mtspeech import training as T

SPEC = {"splits": {"pretrain": {"language": "src", "count": 12, "labeled": True},
                   "finetune": {"language": "tgt", "count": 6, "labeled": True},
                   "test": {"language": "tgt", "count": 4, "labeled": True}}}

INI = """
[model]
preset = desk
blocks = 1
dim = 16
heads = 2
ffn_dim = 32
conv_channels = 8 8 8 8 8 8 8
entries = 4

[loss]
mask_prob = 0.2

[train]
steps = 3
batch_size = 2
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "run.ini").write_text(INI)
    assert cli.main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    return root


def pretrain(corpus, out, *extra):
    d = corpus / "data"
    return cli.main(["pretrain", "--labeled", str(d / "pretrain.tsv"), "--vocab", str(d / "vocab_src.txt"),
                     "--config", str(corpus / "run.ini"), "--out", str(out), *extra])


class TestPipeline:
    def test_end_to_end(self, corpus, capsys):
        d = corpus / "data"
        assert pretrain(corpus, corpus / "pre") == 0
        assert (corpus / "pre" / "checkpoint.bin").is_file()
        run = json.loads((corpus / "pre" / "run.json").read_text())
        assert run["seed"] == 0 and set(run["inputs"]) == {"labeled", "vocab"}
        assert run["config"]["model"]["encoder"]["dim"] == 16
        header, records = T.read_metrics(corpus / "pre" / "metrics.jsonl")
        assert header["config"]["loss"]["mask_prob"] == 0.2
        assert [r["step"] for r in records] == [1, 2, 3]
        assert cli.main(["finetune", "--checkpoint", str(corpus / "pre" / "checkpoint.bin"),
                         "--labeled", str(d / "finetune.tsv"), "--vocab", str(d / "vocab_tgt.txt"),
                         "--config", str(corpus / "run.ini"), "--steps", "2",
                         "--out", str(corpus / "ft")]) == 0
        capsys.readouterr()
        assert cli.main(["eval", "--checkpoint", str(corpus / "ft" / "checkpoint.bin"),
                         "--manifest", str(d / "test.tsv"), "--out", str(corpus / "ev")]) == 0
        assert capsys.readouterr().out.startswith("PER ")
        assert "per" in json.loads((corpus / "ev" / "eval.json").read_text())
        assert cli.main(["analyze", "--checkpoint", str(corpus / "pre" / "checkpoint.bin"),
                         "--manifest", str(d / "test.tsv"), "--out", str(corpus / "an")]) == 0
        summary = json.loads((corpus / "an" / "summary.json").read_text())
        assert set(summary) == {"active_codewords", "alignment_entropy", "per"}
        assert (corpus / "an" / "cooccurrence.csv").read_text().startswith(
            "codeword_id,phoneme_id,count,conditional_prob")

    def test_rerun_is_byte_identical(self, corpus):
        for name in ("r1", "r2"):
            assert pretrain(corpus, corpus / name, "--seed", "5") == 0
        for f in ("metrics.jsonl", "checkpoint.bin", "run.json"):
            assert (corpus / "r1" / f).read_bytes() == (corpus / "r2" / f).read_bytes()

    def test_alpha_one_still_reports_contrastive(self, corpus):
        assert pretrain(corpus, corpus / "a1", "--alpha", "1", "--replace-prob", "0") == 0
        _, records = T.read_metrics(corpus / "a1" / "metrics.jsonl")
        for r in records:
            assert r["loss_contrastive"] is not None
            assert abs(r["loss_total"] - r["loss_ctc"]) < 1e-4 * abs(r["loss_ctc"])

    def test_flags_override_config(self, corpus):
        assert pretrain(corpus, corpus / "ov", "--steps", "1", "--mask-prob", "0.3") == 0
        header, records = T.read_metrics(corpus / "ov" / "metrics.jsonl")
        assert len(records) == 1 and header["config"]["loss"]["mask_prob"] == 0.3

    def test_output_root_env(self, corpus, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(corpus / "envroot"))
        assert pretrain(corpus, "rel", "--steps", "1") == 0
        assert (corpus / "envroot" / "rel" / "checkpoint.bin").is_file()


class TestErrors:
    def test_config_errors(self, corpus, tmp_path):
        (tmp_path / "bad.ini").write_text("[loss]\nalpha = 2\n")
        d = corpus / "data"
        args = ["pretrain", "--labeled", str(d / "pretrain.tsv"), "--out", str(tmp_path / "o")]
        assert cli.main(args + ["--config", str(tmp_path / "bad.ini")]) == cli.EXIT_CONFIG
        (tmp_path / "bad.ini").write_text("[loss]\nnope = 1\n")
        assert cli.main(args + ["--config", str(tmp_path / "bad.ini")]) == cli.EXIT_CONFIG
        (tmp_path / "bad.ini").write_text("[extra]\nx = 1\n")
        assert cli.main(args + ["--config", str(tmp_path / "bad.ini")]) == cli.EXIT_CONFIG
        assert cli.main(args + ["--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
        assert not (tmp_path / "o").exists()

    def test_data_errors(self, tmp_path):
        assert cli.main(["pretrain", "--labeled", str(tmp_path / "none.tsv"),
                         "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
        (tmp_path / "m.tsv").write_text("a.wav\t10\t1\tsrc\n")
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.bin"),
                         "--manifest", str(tmp_path / "m.tsv")]) == cli.EXIT_DATA

    def test_infeasible_target(self, corpus, tmp_path):
        d = corpus / "data"
        rows = (d / "pretrain.tsv").read_text().splitlines()
        path, n, _, lang = rows[0].split("\t")
        (d / "long.tsv").write_text("\t".join([path, n, " ".join(["1", "2"] * 40), lang]) + "\n")
        assert cli.main(["pretrain", "--labeled", str(d / "long.tsv"), "--config", str(corpus / "run.ini"),
                         "--steps", "1", "--out", str(tmp_path / "o")]) == cli.EXIT_INFEASIBLE

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "mtspeech", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for cmd in ("gen-data", "pretrain", "finetune", "eval", "analyze"):
            assert cmd in out.stdout

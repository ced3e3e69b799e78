import json
import subprocess
import sys

import pytest

from oietd.cli import main

FAST = ["--set", "epochs=2", "--set", "lr=0.003", "--set", "hidden_size=16"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--output-dir", str(d), "--n-train", "80", "--n-valid", "30", "--n-test", "30"]) == 0
    for role in ("source", "target"):
        assert main(["postprocess-triples", "--corpus", str(d / f"{role}.jsonl"), "--triples",
                     str(d / f"{role}.triples.jsonl"), "--output", str(d / f"{role}.tagged.jsonl")]) == 0
    return d


def test_stats_empty_corpus(tmp_path, capsys):
    (tmp_path / "e.jsonl").write_text("")
    code, out, _ = run(capsys, "stats", "--corpus", str(tmp_path / "e.jsonl"))
    assert code == 0
    assert [line.split()[1:] for line in out.splitlines()[1:]] == [["0", "0", "0"]] * 3


def test_evaluate_length_mismatch(synth_dir, tmp_path, capsys):
    (tmp_path / "p.jsonl").write_text('["O"]\n')
    code, _, err = run(capsys, "evaluate", "--gold", str(synth_dir / "target.tagged.jsonl"), "--pred",
                       str(tmp_path / "p.jsonl"))
    assert code == 3 and "length mismatch" in err
    assert json.loads(err)["error"] == "data"


def test_evaluate_perfect_prediction(synth_dir, tmp_path, capsys):
    from oietd.corpus import load_corpus
    from oietd.tagging import encode_iob2
    gold = load_corpus(synth_dir / "target.tagged.jsonl").split("test")
    (tmp_path / "p.jsonl").write_text("".join(json.dumps(encode_iob2(s.trigger_spans, len(s.tokens))) + "\n"
                                              for s in gold))
    code, out, _ = run(capsys, "evaluate", "--gold", str(synth_dir / "target.tagged.jsonl"), "--pred",
                       str(tmp_path / "p.jsonl"))
    assert code == 0 and json.loads(out)["f1"] == 1.0


def test_full_pipeline(synth_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OIETD_STORE", str(tmp_path / "store"))
    ck = tmp_path / "explicit.pt"
    code, out, _ = run(capsys, *FAST, "train-source", "--source", str(synth_dir / "source.tagged.jsonl"),
                       "--design", "explicit", "--output", str(ck), "--log", str(tmp_path / "src.log"))
    assert code == 0 and ck.exists()
    for shots in ("0", "5"):
        code, out, _ = run(capsys, *FAST, "transfer", "--design", "explicit", "--checkpoint", str(ck), "--target",
                           str(synth_dir / "target.tagged.jsonl"), "--shots", shots, "--record", str(tmp_path / "store"))
        assert code == 0, out
    code, out, _ = run(capsys, "report", "--output", str(tmp_path / "report.md"), "--seeds", "1", "--samples", "1")
    assert code == 0 and "zero_shot" in out and "sequential_transfer" in out
    assert (tmp_path / "report.md.meta.json").exists()
    code, _, _ = run(capsys, "plot", "--output", str(tmp_path / "fig.png"))
    assert code == 0 and (tmp_path / "fig.png").exists() and (tmp_path / "fig.csv").exists()


def test_every_artifact_has_config_hash(synth_dir):
    for name in ("source.jsonl", "source.triples.jsonl", "source.tagged.jsonl"):
        meta = json.loads((synth_dir / f"{name}.meta.json").read_text())
        assert len(meta["config_hash"]) == 16


def test_run_matrix_subcommand(synth_dir, tmp_path, capsys):
    code, out, _ = run(capsys, *FAST, "run-matrix", "--source", str(synth_dir / "source.tagged.jsonl"), "--target",
                       str(synth_dir / "target.tagged.jsonl"), "--store", str(tmp_path / "s"), "--designs", "vanilla",
                       "--regimes", "in_domain", "--shots", "5", "--seeds", "0", "--samples", "1")
    assert code == 0 and json.loads(out)["records"] == 1


def test_config_file_and_overrides(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"stats:\n  corpus: {synth_dir / 'source.tagged.jsonl'}\n  resplit: holdout\n")
    code, out, _ = run(capsys, "--config", str(cfg), "stats")
    assert code == 0
    rows = {line.split()[0]: line.split()[1:] for line in out.splitlines()[1:]}
    assert rows["train"][0] == "64" and rows["valid"][0] == "16" and rows["test"][0] == "30"
    code, out, _ = run(capsys, "--config", str(cfg), "--set", "resplit=none", "stats")
    assert {line.split()[0]: line.split()[1] for line in out.splitlines()[1:]}["train"] == "80"


@pytest.mark.parametrize("text", ["stats:\n  bogus: 1\n", "nonsense:\n  a: 1\n", "stats:\n  seed: abc\n"])
def test_config_schema_violation(tmp_path, capsys, text):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    code, _, err = run(capsys, "--config", str(cfg), "stats", "--corpus", "x")
    assert code == 2 and json.loads(err)["error"] == "config"


def test_error_codes(synth_dir, tmp_path, capsys):
    assert run(capsys, "nonexistent")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "stats", "--corpus", str(tmp_path / "missing.jsonl"))[0] == 3
    assert run(capsys, "stats")[0] == 2
    target = str(synth_dir / "target.tagged.jsonl")
    assert run(capsys, "transfer", "--target", target, "--checkpoint", str(tmp_path / "none.pt"))[0] == 5
    ck = tmp_path / "v.pt"
    assert run(capsys, *FAST, "train-source", "--source", str(synth_dir / "source.tagged.jsonl"), "--output", str(ck))[0] == 0
    assert run(capsys, "transfer", "--target", target, "--checkpoint", str(ck), "--design", "explicit")[0] == 4
    assert run(capsys, "train-source", "--source", target, "--design", "implicit", "--output", str(ck))[0] == 2


def test_deterministic_repeat(synth_dir, tmp_path):
    from oietd.model import Checkpoint
    from oietd.regimes import state_digest
    outputs = []
    for i in range(2):
        work = tmp_path / f"run{i}"
        work.mkdir()
        cmd = [sys.executable, "-m", "oietd", "--deterministic", *FAST, "train-source", "--source",
               str(synth_dir / "source.tagged.jsonl"), "--design", "implicit", "--rel-dim", "10",
               "--output", "m.pt", "--log", "log.jsonl"]
        proc = subprocess.run(cmd, capture_output=True, text=True, cwd=work)
        assert proc.returncode == 0, proc.stderr
        outputs.append((proc.stdout, (work / "log.jsonl").read_bytes(),
                        state_digest(Checkpoint.load(work / "m.pt").build())))
    assert outputs[0] == outputs[1]

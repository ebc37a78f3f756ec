import json

import numpy as np
import pytest

from rawfiles import write_ucr
from susl4ts.cli import main
from susl4ts.datasets import load_bundle
from susl4ts.model import load_checkpoint

COUNTS = ((12, 10, 8), (6, 5, 4))
FAST = ["--latent-dim", "2", "--layers", "1", "--filters", "4", "--kernel-size", "3",
        "--epochs", "2", "--batch-size", "16", "--lr", "0.003"]


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = write_ucr(root / "raw", name="Toy", counts=COUNTS, length=20)
    assert main(["ingest", "--format", "ucr-tsv", "--input", str(raw), "--name", "toy",
                 "--output-dir", str(root / "data")]) == 0
    return root / "data" / "toy"


def test_ingest_reports_class_counts(bundle, capsys, tmp_path):
    raw = write_ucr(tmp_path / "raw", name="Toy", counts=COUNTS, length=20)
    main(["ingest", "--format", "ucr-tsv", "--input", str(raw), "--output-dir", str(tmp_path)])
    lines = capsys.readouterr().out.splitlines()
    assert lines[1:] == ["class,train,test", "1,12,6", "2,10,5", "3,8,4"]
    b = load_bundle(bundle)
    assert (b.channels, b.length) == (1, 20)
    assert list(b.class_counts("train")) == [12, 10, 8]
    assert json.loads((tmp_path / "spec.json").read_text())["spec"]["format"] == "ucr-tsv"


def _train(bundle, out, *extra):
    return main(["train", "--data", str(bundle), "--output-dir", str(out), "--log-level", "error",
                 *FAST, *extra])


def test_train_eval_embed_sample_report(bundle, tmp_path):
    assert _train(bundle, tmp_path / "m", "--labeled-fraction", "0.5", "--hidden", "3",
                  "--augmented", "1") == 0
    ckpt = tmp_path / "m" / "model.ckpt"
    params, meta = load_checkpoint(ckpt)
    assert params.config.n_classes == 4 and meta["resolved"]["regime"]["hidden_classes"] == [2]
    assert len((tmp_path / "m" / "history.csv").read_text().splitlines()) == 3

    for d in ("e1", "e2"):
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(bundle),
                     "--output-dir", str(tmp_path / d)]) == 0
    for f in ("report.txt", "metrics.csv", "confusion.csv", "cluster_map.csv"):
        assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes()
    assert json.loads((tmp_path / "e1" / "spec.json").read_text())["regime"] == "SuSL"

    assert main(["embed", "--checkpoint", str(ckpt), "--data", str(bundle),
                 "--output-dir", str(tmp_path / "emb")]) == 0
    rows = (tmp_path / "emb" / "embeddings.csv").read_text().splitlines()
    assert rows[0] == "id,true,pred,z_0,z_1" and len(rows) == 31

    assert main(["sample", "--checkpoint", str(ckpt), "--cluster", "3", "--count", "2",
                 "--output-dir", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "samples.csv").read_text().splitlines()
    assert len(rows) == 3 and len(rows[0].split(",")) == 22

    assert main(["report", "--inputs", str(tmp_path / "e1"), str(tmp_path / "e2"),
                 "--output-dir", str(tmp_path / "r")]) == 0
    md = (tmp_path / "r" / "report.md").read_text()
    assert "| Toy |" in md and "SuSL" in md
    assert (tmp_path / "r" / "report.csv").read_text().splitlines()[1].startswith("Toy,SuSL,2,")


def _rewrite(src, dst, fn):
    for suffix in (".meta", ".csv"):
        text = src.with_suffix(suffix).read_text()
        if suffix == ".csv":
            text = "".join(fn(line) + "\n" for line in text.splitlines())
        dst.with_suffix(suffix).write_text(text)
    return dst


def test_train_never_parses_test_rows(bundle, tmp_path):
    def poison(line):
        split, lab, rest = line.split(",", 2)
        return line if split == "train" else f"test,{lab},not-a-number"

    poisoned = _rewrite(bundle, tmp_path / "poisoned", poison)
    assert _train(bundle, tmp_path / "a") == 0
    assert _train(poisoned, tmp_path / "b") == 0
    assert load_checkpoint(tmp_path / "a" / "model.ckpt")[0] == \
        load_checkpoint(tmp_path / "b" / "model.ckpt")[0]


def test_unsupervised_run_ignores_training_labels(bundle, tmp_path):
    rng = np.random.default_rng(0)

    def scramble(line):
        split, lab, rest = line.split(",", 2)
        return f"{split},{rng.integers(3)},{rest}"

    scrambled = _rewrite(bundle, tmp_path / "scrambled", scramble)
    ul = ["--labeled-fraction", "0", "--augmented", "3", "--validation-fraction", "0"]
    assert _train(bundle, tmp_path / "a", *ul) == 0
    assert _train(scrambled, tmp_path / "b", *ul) == 0
    assert load_checkpoint(tmp_path / "a" / "model.ckpt")[0] == \
        load_checkpoint(tmp_path / "b" / "model.ckpt")[0]
    assert (tmp_path / "a" / "history.csv").read_text() == \
        (tmp_path / "b" / "history.csv").read_text()


def test_config_file_matches_flags_and_flags_win(bundle, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("latent-dim = 2\nlayers = 1\nfilters = 4\nkernel_size = 3\nepochs = 2\n"
                   "batch-size = 16\nlr = 0.003  # inline comment\nhidden = 3\naugmented = 1\n"
                   "labeled-fraction = 0.5\n")
    assert _train(bundle, tmp_path / "flags", "--labeled-fraction", "0.5", "--hidden", "3",
                  "--augmented", "1") == 0
    assert main(["train", "--config", str(cfg), "--data", str(bundle), "--log-level", "error",
                 "--output-dir", str(tmp_path / "file")]) == 0
    for f in ("model.ckpt", "history.csv"):
        assert (tmp_path / "flags" / f).read_bytes() == (tmp_path / "file" / f).read_bytes()
    capsys.readouterr()
    assert main(["train", "--config", str(cfg), "--epochs", "7", "--print-config"]) == 0
    printed = dict(line.split(" = ", 1) for line in capsys.readouterr().out.splitlines())
    assert printed["epochs"] == "7" and printed["lr"] == "0.003" and printed["hidden"] == "3"


def test_print_config_lists_defaults(capsys):
    assert main(["eval", "--print-config"]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert "split = test" in printed and not any(line.startswith("command") for line in printed)


def test_output_dir_from_environment(bundle, tmp_path, monkeypatch):
    monkeypatch.setenv("SUSL_OUTPUT_DIR", str(tmp_path / "env"))
    monkeypatch.setenv("SUSL_THREADS", "1")
    assert main(["train", "--data", str(bundle), "--log-level", "error", *FAST]) == 0
    assert (tmp_path / "env" / "model.ckpt").exists()
    monkeypatch.setenv("SUSL_THREADS", "many")
    assert main(["train", "--data", str(bundle), "--log-level", "error", *FAST]) == 1


@pytest.mark.parametrize("argv", [
    ["train", "--epochs", "x"],
    ["train", "--bogus"],
    ["frobnicate"],
    ["train", "--variant", "rnn"],
])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_semantic_usage_errors_exit_1(bundle, tmp_path):
    assert _train(bundle, tmp_path, "--hidden", "nope") == 1
    assert _train(bundle, tmp_path, "--kernel-size", "4") == 1
    assert main(["train", "--output-dir", str(tmp_path)]) == 1  # --data missing
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert main(["train", "--config", str(cfg)]) == 1
    cfg.write_text("epochs = many\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_data_errors_exit_2(bundle, tmp_path):
    assert _train(tmp_path / "missing", tmp_path) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(bundle),
                 "--output-dir", str(tmp_path)]) == 2
    raw = tmp_path / "raw"
    raw.mkdir()
    (raw / "X_TRAIN.tsv").write_text("1\t0.5\t0.2\n2\t0.1\n")
    (raw / "X_TEST.tsv").write_text("1\t0.5\t0.2\n")
    assert main(["ingest", "--format", "ucr-tsv", "--input", str(raw),
                 "--output-dir", str(tmp_path / "o")]) == 2


def test_divergence_exits_3(bundle, tmp_path):
    code = _train(bundle, tmp_path, "--lr", "1e30", "--clip", "1")
    assert code == 3
    assert (tmp_path / "model.ckpt").exists() and (tmp_path / "history.csv").exists()


def test_search_writes_trials_without_touching_test(bundle, tmp_path):
    assert main(["search", "--data", str(bundle), "--trials", "1", "--epochs", "1",
                 "--batch-size", "32", "--output-dir", str(tmp_path), "--log-level", "error"]) == 0
    log = (tmp_path / "trials.jsonl").read_text().splitlines()
    assert len(log) == 1 and json.loads(log[0])["test_metrics"] is None
    params, meta = load_checkpoint(tmp_path / "model.ckpt")
    trial = json.loads(log[0])
    assert meta["trial"] == 0
    assert params.config.n_augmented_classes == trial["config"]["n_augmented"]

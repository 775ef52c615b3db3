"""CLI subcommand flows on a tiny corpus, plus exit-code contracts."""

import os

import numpy as np
import pytest

from camnet import cli, data


def run_cli(argv):
    """Invoke main() and return the SystemExit code (0 if none raised)."""
    try:
        cli.main(argv)
    except SystemExit as e:
        return int(e.code or 0)
    return 0


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("flow")
    d = str(root / "data")
    assert run_cli(["synth", "--out", d, "--n", "10", "--seed", "3",
                    "--size", "16"]) == 0
    assert run_cli(["split", "--data", d, "--seed", "3"]) == 0
    return root, d


def test_synth_layout(corpus):
    _, d = corpus
    dirs = sorted(x for x in os.listdir(d) if os.path.isdir(os.path.join(d, x)))
    assert dirs == ["0_disk", "1_rect", "2_cross"]
    assert len(os.listdir(os.path.join(d, "0_disk"))) == 10
    assert os.path.exists(os.path.join(d, "run.txt"))


def test_split_manifest(corpus):
    _, d = corpus
    m = data.SplitManifest.read_csv(os.path.join(d, "split.csv"))
    assert len(m.train) + len(m.val) + len(m.test) == 30


def test_train_eval_explain(corpus):
    root, d = corpus
    out = str(root / "run")
    code = run_cli(["train", "--data", d, "--out", out, "--seed", "5",
                    "--set", "train.epochs=2", "--set", "train.batch_size=6"])
    assert code == 0
    assert os.path.exists(os.path.join(out, "model.camf"))
    assert os.path.exists(os.path.join(out, "train_report.csv"))
    manifest = open(os.path.join(out, "run.txt")).read()
    assert "train.epochs=2" in manifest
    assert "train.seed=5" in manifest

    ev = str(root / "eval")
    assert run_cli(["eval", "--data", d, "--weights",
                    os.path.join(out, "model.camf"), "--out", ev]) == 0
    assert os.path.exists(os.path.join(ev, "confusion.csv"))
    assert os.path.exists(os.path.join(ev, "metrics.csv"))

    img = os.path.join(d, "0_disk", "00000.pgm")
    ex = str(root / "explain")
    assert run_cli(["explain", "--weights", os.path.join(out, "model.camf"),
                    "--image", img, "--out", ex]) == 0
    written = [f for f in os.listdir(ex) if f.endswith((".pgm", ".ppm"))]
    assert len(written) == 4  # 2 methods x (map + overlay)
    names = sorted(written)
    assert any(".gradcam." in n for n in names)
    assert any(".gradcam_pp." in n for n in names)


def test_explain_single_method(corpus):
    root, d = corpus
    out = str(root / "run")
    img = os.path.join(d, "1_rect", "00001.pgm")
    ex = str(root / "explain1")
    assert run_cli(["explain", "--weights", os.path.join(out, "model.camf"),
                    "--image", img, "--out", ex, "--method", "gradcam",
                    "--class-index", "1"]) == 0
    written = [f for f in os.listdir(ex) if f.endswith((".pgm", ".ppm"))]
    assert len(written) == 2


def test_usage_error_exit_code():
    assert run_cli(["definitely-not-a-command"]) == 1
    assert run_cli([]) == 1


def test_config_error_exit_code(corpus):
    _, d = corpus
    assert run_cli(["train", "--data", d, "--set", "train.bogus=1"]) == 1
    assert run_cli(["train", "--data", d, "--set", "nodotkey"]) == 1


def test_data_error_exit_code(tmp_path):
    assert run_cli(["split", "--data", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad.camf"
    bad.write_bytes(b"JUNKJUNK\n")
    assert run_cli(["eval", "--data", str(tmp_path), "--weights", str(bad)]) == 2


def test_config_file_and_override(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.epochs = 3  # comment\ntrain.optimizer = sgd\n")
    configs = cli.load_run_config(str(cfg), ["train.epochs=4"])
    assert configs["train"].epochs == 4  # --set wins over the file
    assert configs["train"].optimizer == "sgd"
    with pytest.raises(Exception):
        cli.load_run_config(str(cfg), ["augment.unknown=1"])


def test_gradcheck_command():
    assert run_cli(["gradcheck"]) == 0


def test_augment_command(corpus, tmp_path):
    _, d = corpus
    out = str(tmp_path / "aug")
    assert run_cli(["augment", "--data", d, "--out", out, "--seed", "1"]) == 0
    a = data.load_directory(d)
    b = data.load_directory(out)
    assert len(a) == len(b)
    assert not np.array_equal(a.images[0], b.images[0])

import hashlib
import json
import os

import numpy as np
import pytest

from demorph.cli import main
from demorph.storage import read_pgm, write_pgm


def tree_hash(root):
    h = hashlib.sha256()
    for dirpath, dirnames, files in sorted(os.walk(root)):
        dirnames.sort()
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def args(tmp, *extra, profile="smoke"):
    return ["--profile", profile, "--data-dir", str(tmp / "data"), "--checkpoint", str(tmp / "model.sdmf"),
            "--report-dir", str(tmp / "reports"), *extra]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    assert main(["gen-data", *args(tmp)]) == 0
    assert main(["train", *args(tmp)]) == 0
    assert main(["eval", *args(tmp)]) == 0
    return tmp


def test_gen_data_counts(pipeline, capsys):
    doc = json.loads((pipeline / "data" / "manifest.json").read_text())
    assert doc["counts"]["train_morph"] == 32 and doc["counts"]["test_morph"] == 8
    assert (pipeline / "data" / "run_config.txt").exists()


def test_gen_data_refuses_non_empty(pipeline):
    assert main(["gen-data", *args(pipeline)]) == 2


def test_gen_data_seed_determinism(tmp_path):
    hashes = []
    for _ in range(2):
        assert main(["gen-data", "--profile", "smoke", "--seed", "7", "--force", "--data-dir", str(tmp_path)]) == 0
        hashes.append(tree_hash(tmp_path))
    assert hashes[0] == hashes[1]
    assert main(["gen-data", "--profile", "smoke", "--seed", "8", "--force", "--data-dir", str(tmp_path)]) == 0
    assert tree_hash(tmp_path) != hashes[0]


def test_gen_data_infeasible(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("n_ids = 5\nn_morphs = 11\n")
    assert main(["gen-data", "--config", str(cfg), "--data-dir", str(tmp_path / "d")]) == 2


def test_train_loss_falls(pipeline):
    rows = (pipeline / "reports" / "train_loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,flip_rate"
    losses = [float(r.split(",")[1]) for r in rows[1:]]
    assert len(losses) == 10
    assert losses[-1] < losses[0]


def test_train_without_manifest(tmp_path):
    assert main(["train", *args(tmp_path)]) == 2


def test_eval_outputs(pipeline):
    summary = json.loads((pipeline / "reports" / "summary.json").read_text())
    for f in summary["files"]:
        assert (pipeline / "reports" / f).exists(), f
    mad = summary["mad"]
    assert mad["acer"] == (mad["apcer"] + mad["bpcer"]) / 2
    for key in ("subject1", "subject2"):
        assert 0.0 <= summary["restoration"][key] <= 1.0


def test_demorph_command(pipeline, tmp_path):
    img = read_pgm(pipeline / "data" / "morphs" / "morph_0000.pgm")
    src = tmp_path / "in.pgm"
    write_pgm(src, img)
    out = tmp_path / "out"
    assert main(["demorph", str(src), "--out", str(out), *args(pipeline)]) == 0
    for name in ("O1.pgm", "O2.pgm"):
        assert read_pgm(out / name).shape == img.shape
    meta = json.loads((out / "demorph.json").read_text())
    assert meta["tau_mad"] is not None and meta["is_attack"] == (meta["disagreement"] > meta["tau_mad"])


def test_demorph_bad_magic(pipeline, tmp_path):
    bad = tmp_path / "bad.sdmf"
    bad.write_bytes(b"NOPE" + (pipeline / "model.sdmf").read_bytes()[4:])
    src = tmp_path / "in.pgm"
    write_pgm(src, np.zeros((16, 16)))
    code = main(["demorph", str(src), *args(pipeline), "--checkpoint", str(bad)])
    assert code == 4


def test_demorph_bad_magic_message(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.sdmf"
    bad.write_bytes(b"NOPE")
    src = tmp_path / "in.pgm"
    write_pgm(src, np.zeros((16, 16)))
    main(["demorph", str(src), *args(pipeline), "--checkpoint", str(bad)])
    assert "bad magic" in capsys.readouterr().err


def test_demorph_missing_checkpoint(pipeline, tmp_path):
    src = tmp_path / "in.pgm"
    write_pgm(src, np.zeros((16, 16)))
    assert main(["demorph", str(src), *args(pipeline), "--checkpoint", str(tmp_path / "none")]) == 4


def test_plot_redraws(pipeline):
    before = (pipeline / "reports" / "mad_roc.svg").read_bytes()
    (pipeline / "reports" / "mad_roc.svg").unlink()
    assert main(["plot", *args(pipeline)]) == 0
    assert (pipeline / "reports" / "mad_roc.svg").read_bytes() == before


def test_plot_without_reports(tmp_path):
    assert main(["plot", "--report-dir", str(tmp_path / "none")]) == 2


def test_resume_equivalence(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--profile", "smoke", "--data-dir", str(data)]) == 0
    short = tmp_path / "short.txt"
    short.write_text("epochs = 5\n")

    def run(name, *configs):
        for c in configs:
            extra = ["--config", str(c)] if c else []
            assert main(["train", "--profile", "smoke", "--data-dir", str(data), "--checkpoint",
                         str(tmp_path / f"{name}.sdmf"), "--report-dir", str(tmp_path / name), *extra]) == 0
        return tmp_path / f"{name}.sdmf", (tmp_path / name / "train_loss.csv").read_text()

    a_ckpt, a_loss = run("straight", None)
    b_ckpt, b_loss = run("resumed", short, None)
    assert a_loss == b_loss
    assert a_ckpt.read_bytes() == b_ckpt.read_bytes()


def test_bad_seed_and_numeric_failure(tmp_path):
    assert main(["gen-data", "--seed", str(2**64), "--data-dir", str(tmp_path / "d")]) == 2
    data = tmp_path / "data"
    assert main(["gen-data", "--profile", "smoke", "--data-dir", str(data)]) == 0
    cfg = tmp_path / "c.txt"
    cfg.write_text("lr = 1e300\nepochs = 2\n")
    code = main(["train", "--profile", "smoke", "--config", str(cfg), "--data-dir", str(data),
                 "--checkpoint", str(tmp_path / "m.sdmf"), "--report-dir", str(tmp_path / "r")])
    assert code == 3

import csv
import json

import numpy as np
import pytest

from rfnet.cli import main
from rfnet.data import encode_pgm, make_texture

TINY = """\
train.lr = 0.001
train.iterations = {iterations}
loss.k = 16
detector.n_layers = 3
detector.channels = 4
descriptor.widths = 4,4,8,8,8,8,16
descriptor.patch_size = 8
data.dataset = {dataset}
data.width = 40
data.height = 40
data.split = all
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--output", str(root), "--count", "2", "--size", "40x40", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.cfg"
    cfg.write_text(TINY.format(iterations=3, dataset=dataset))
    assert main(["train", "--config", str(cfg), "--output", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def image_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("img") / "a.pgm"
    p.write_bytes(encode_pgm(make_texture(np.random.default_rng(3), (40, 40))))
    return p


# -- synth -----------------------------------------------------------------------------------
def test_synth_layout(dataset):
    seqs = sorted(p.name for p in dataset.iterdir())
    assert seqs == ["v_synth_000", "v_synth_001"]
    files = sorted(p.name for p in (dataset / "v_synth_000").iterdir())
    assert files == [f"{i}.pgm" for i in range(1, 7)] + [f"H_1_{k}" for k in range(2, 7)]


def test_synth_is_deterministic(dataset, tmp_path):
    assert main(["synth", "--output", str(tmp_path), "--count", "2", "--size", "40x40", "--seed", "1"]) == 0
    for name in ("1.pgm", "4.pgm", "H_1_3"):
        assert (tmp_path / "v_synth_001" / name).read_bytes() == (dataset / "v_synth_001" / name).read_bytes()


def test_synth_rejects_bad_count(tmp_path):
    assert main(["synth", "--output", str(tmp_path), "--count", "0"]) == 2


# -- train -----------------------------------------------------------------------------------
def test_train_writes_checkpoint_and_loss_log(trained):
    assert (trained / "checkpoint.rfnw").read_bytes()[:4] == b"RFNW"
    rows = read_csv(trained / "loss_log.csv")
    assert rows[0] == ["iteration", "score", "patch", "description", "detector", "skipped"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]


def test_resume_continues_numbering(trained, dataset, tmp_path):
    cfg = tmp_path / "more.cfg"
    cfg.write_text(TINY.format(iterations=5, dataset=dataset))
    (tmp_path / "loss_log.csv").write_bytes((trained / "loss_log.csv").read_bytes())
    code = main(["train", "--config", str(cfg), "--output", str(tmp_path), "--resume", str(trained / "checkpoint.rfnw")])
    assert code == 0
    assert [r[0] for r in read_csv(tmp_path / "loss_log.csv")[1:]] == ["1", "2", "3", "4", "5"]


def test_train_without_dataset_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.iterations = 1\n")
    assert main(["train", "--config", str(cfg), "--output", str(tmp_path)]) == 2
    assert "data.dataset" in capsys.readouterr().err


def test_train_missing_dataset_path(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY.format(iterations=1, dataset=tmp_path / "nope"))
    assert main(["train", "--config", str(cfg), "--output", str(tmp_path)]) == 2


def test_train_bad_config_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.speed = 3\n")
    assert main(["train", "--config", str(cfg), "--output", str(tmp_path)]) == 2


def test_missing_subcommand_is_usage_error():
    assert main([]) == 2


# -- detect / match ------------------------------------------------------------------------------
def test_detect_writes_k_keypoints(trained, image_file, tmp_path):
    out = tmp_path / "kps.csv"
    code = main(["detect", "--checkpoint", str(trained / "checkpoint.rfnw"), "--image", str(image_file),
                 "--k", "5", "--output", str(out)])
    assert code == 0
    rows = read_csv(out)
    assert rows[0] == ["x", "y", "score", "orientation", "scale"] and len(rows) == 6
    for r in rows[1:]:
        assert 3 - 1e-6 <= float(r[4]) <= 7 + 1e-6  # 3 layers: sizes 3, 5, 7


def test_match_identical_images_has_zero_distances(trained, image_file, tmp_path):
    out = tmp_path / "m.csv"
    h = tmp_path / "H"
    h.write_text("1 0 0\n0 1 0\n0 0 1\n")
    code = main(["match", "--checkpoint", str(trained / "checkpoint.rfnw"), "--image-a", str(image_file),
                 "--image-b", str(image_file), "--strategy", "nn", "--k", "8", "--output", str(out),
                 "--homography", str(h)])
    assert code == 0
    rows = read_csv(out)
    assert len(rows) == 9 and all(float(r[4]) < 1e-3 for r in rows[1:])
    overlay = read_csv(tmp_path / "m.overlay.csv")
    assert overlay[0][-1] == "correct" and all(r[-1] == "1" for r in overlay[1:])


def test_match_unknown_strategy(trained, image_file, tmp_path, capsys):
    code = main(["match", "--checkpoint", str(trained / "checkpoint.rfnw"), "--image-a", str(image_file),
                 "--image-b", str(image_file), "--strategy", "foo", "--output", str(tmp_path / "m.csv")])
    assert code == 2
    assert "nn, nnt, nnr" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(image_file, tmp_path):
    code = main(["detect", "--checkpoint", str(tmp_path / "none.rfnw"), "--image", str(image_file),
                 "--output", str(tmp_path / "k.csv")])
    assert code == 1


# -- eval ------------------------------------------------------------------------------------------
def test_eval_writes_reports(trained, dataset, tmp_path):
    out = tmp_path / "report"
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.rfnw"), "--dataset", str(dataset),
                 "--k", "8,16", "--output", str(out)])
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["metadata"]["k_list"] == [8, 16]
    rows = read_csv(out / "report.csv")
    assert len(rows) - 1 == 2 * 5 * 2 * 3  # sequences x pairs x K values x strategies


def test_eval_empty_dataset_fails(trained, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.rfnw"), "--dataset", str(empty),
                 "--output", str(tmp_path / "r")])
    assert code == 1


def test_eval_bad_k_list(trained, dataset, tmp_path):
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.rfnw"), "--dataset", str(dataset),
                 "--k", "8,x", "--output", str(tmp_path / "r")])
    assert code == 2

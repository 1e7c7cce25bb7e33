import csv
import subprocess
import sys

import numpy as np
import pytest

from lir.cli import main
from lir.imaging import add_awgn, load_image, rng_stream, save_image
from lir.models import read_weight_file
from lir.restoration import table_from_csv
from lir.toydata import texture_set
from lir.training import CURVE_FIELDS

TOY_MODEL = """
[model]
base_channels = 4
content_res_blocks = 1
generator_res_blocks = 1
noise_code_channels = 2
phi_width = 0.0625
"""


def write_images(d, images, bit_depth=8):
    d.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        save_image(im, d / f"img{i:02d}.png", bit_depth=bit_depth)
    return d


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    data = texture_set(10, seed=4, size=24)
    noisy = [add_awgn(im, 25, rng_stream(1, "cli", i)) for i, im in enumerate(data[:4])]
    write_images(root / "noisy", noisy)
    write_images(root / "clean", data[4:8])
    write_images(root / "eval", data[8:])
    cfg = root / "run.ini"
    cfg.write_text(TOY_MODEL + f"""
[train]
patch = 16
batch = 2
max_iters = 6
log_every = 2
checkpoint_every = 3
seed = 5

[data]
noisy_dir = {root / 'noisy'}
clean_dir = {root / 'clean'}

[eval]
clean_dir = {root / 'eval'}
sigmas = 25
""")
    return root


@pytest.fixture(scope="module")
def trained(toy):
    out = toy / "run"
    assert main(["--deterministic", "train", "--config", str(toy / "run.ini"), "--out", str(out)]) == 0
    return out


def test_train_artifacts(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.ini", "curves.csv", "final.lirw", "ckpt_0000000.lirw", "ckpt_0000003.lirw",
            "ckpt_0000006.lirw"} <= names
    rows = list(csv.DictReader(open(trained / "curves.csv")))
    assert [int(r["iteration"]) for r in rows] == [2, 4, 6]
    assert rows[0]["psnr_mean"] != ""
    _, echo = read_weight_file(trained / "final.lirw")
    assert echo["iteration"] == 6 and "run_config" in echo


def test_config_echo_reproduces_run(toy, trained, tmp_path):
    _, echo = read_weight_file(trained / "final.lirw")
    cfg = tmp_path / "echo.ini"
    cfg.write_text(echo["run_config"])
    out = tmp_path / "again"
    assert main(["--deterministic", "train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "final.lirw").read_bytes() == (trained / "final.lirw").read_bytes()
    assert (out / "curves.csv").read_bytes() == (trained / "curves.csv").read_bytes()


def test_train_variant_and_seed(toy, tmp_path):
    out = tmp_path / "nobcm"
    assert main(["train", "--config", str(toy / "run.ini"), "--out", str(out), "--variant", "no_bcm",
                 "--seed", "2"]) == 0
    _, echo = read_weight_file(out / "final.lirw")
    assert echo["train_config"]["weights"]["lambda_bc"] == 0.0
    assert echo["train_config"]["seed"] == 2


def test_train_resume(toy, trained, tmp_path):
    out = tmp_path / "resumed"
    assert main(["--deterministic", "train", "--config", str(toy / "run.ini"), "--out", str(out),
                 "--resume", str(trained / "ckpt_0000003.lirw")]) == 0
    a, _ = read_weight_file(out / "final.lirw")
    b, _ = read_weight_file(trained / "final.lirw")
    assert all(np.array_equal(a[k].numpy(), b[k].numpy()) for k in b)


def test_train_missing_config(tmp_path, capsys):
    missing = tmp_path / "absent.ini"
    assert main(["train", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert "absent.ini" in capsys.readouterr().err


def test_train_missing_data(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[data]\nnoisy_dir = {tmp_path / 'none'}\nclean_dir = {tmp_path / 'none'}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "data error" in capsys.readouterr().err


def test_train_divergence_exit(toy, tmp_path):
    cfg = tmp_path / "div.ini"
    cfg.write_text((toy / "run.ini").read_text().replace("seed = 5", "seed = 5\nlr0 = 1e30"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4


def test_train_dataset_split(tmp_path):
    write_images(tmp_path / "all", texture_set(6, seed=2, size=20))
    cfg = tmp_path / "c.ini"
    cfg.write_text(TOY_MODEL + f"[train]\npatch = 16\nbatch = 1\nmax_iters = 2\ncheckpoint_every = 0\n"
                   f"[data]\ndataset_dir = {tmp_path / 'all'}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


# --- restore ---


def test_restore_dir_and_single(trained, tmp_path):
    src = write_images(tmp_path / "in", [np.random.default_rng(i).random((13 + i, 9, 3)) for i in range(3)])
    out = tmp_path / "out"
    assert main(["restore", "--weights", str(trained / "final.lirw"), "--in", str(src), "--out", str(out)]) == 0
    for p in sorted(src.iterdir()):
        assert load_image(out / p.name).shape == load_image(p).shape
    single = tmp_path / "one.png"
    assert main(["restore", "--weights", str(trained / "final.lirw"), "--in", str(src / "img01.png"),
                 "--out", str(single)]) == 0
    assert load_image(single).shape == (14, 9, 3)


def test_restore_keeps_16_bit(trained, tmp_path):
    src = write_images(tmp_path / "in", [np.random.default_rng(0).random((12, 12, 3))], bit_depth=16)
    out = tmp_path / "out"
    assert main(["restore", "--weights", str(trained / "final.lirw"), "--in", str(src), "--out", str(out)]) == 0
    import cv2

    assert cv2.imread(str(out / "img00.png"), cv2.IMREAD_UNCHANGED).dtype == np.uint16


def test_restore_partial_failure(trained, tmp_path, capsys):
    src = write_images(tmp_path / "in", [np.random.default_rng(i).random((8, 8, 3)) for i in range(3)])
    (src / "img01.png").write_bytes(b"not a png")
    out = tmp_path / "out"
    assert main(["restore", "--weights", str(trained / "final.lirw"), "--in", str(src), "--out", str(out)]) == 5
    assert sorted(p.name for p in out.iterdir()) == ["img00.png", "img02.png"]
    assert "img01.png" in capsys.readouterr().err


def test_restore_bad_weights(tmp_path):
    bad = tmp_path / "w.lirw"
    bad.write_bytes(b"garbage")
    write_images(tmp_path / "in", [np.zeros((8, 8, 3))])
    assert main(["restore", "--weights", str(bad), "--in", str(tmp_path / "in"), "--out", str(tmp_path / "o")]) == 2


# --- evaluate ---


def test_evaluate_identity_baseline(toy, tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["evaluate", "--identity", "--clean", str(toy / "eval"), "--sigmas", "25,35,50",
                 "--seed", "3", "--out", str(out)]) == 0
    table = table_from_csv(out.read_text())
    assert [r.sigma for r in table.rows] == [25.0, 35.0, 50.0]
    clean = [load_image(p) for p in sorted((toy / "eval").iterdir())]
    from lir.imaging import psnr

    ps = [psnr(add_awgn(c, 25.0, rng_stream(3, "eval:awgn:25.0", lane=i)), c) for i, c in enumerate(clean)]
    assert table.rows[0].psnr_mean == pytest.approx(np.mean(ps), abs=0.005)
    assert "PSNR" in capsys.readouterr().out


def test_evaluate_csv_bytes_stable(toy, trained, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"t{k}.csv"
        assert main(["--deterministic", "evaluate", "--weights", str(trained / "final.lirw"),
                     "--clean", str(toy / "eval"), "--sigmas", "25", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_evaluate_needs_restorer(toy):
    assert main(["evaluate", "--clean", str(toy / "eval")]) == 2


# --- add-noise ---


def test_add_noise_range_manifest(toy, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"n{k}"
        assert main(["add-noise", "--in", str(toy / "clean"), "--out", str(out), "--sigma-range", "5,50",
                     "--seed", "7"]) == 0
        runs.append((out / "manifest.csv").read_bytes())
    rows = list(csv.DictReader(open(tmp_path / "n0" / "manifest.csv")))
    assert len(rows) == 4 and all(5 <= float(r["sigma"]) <= 50 for r in rows)
    assert runs[0] == runs[1]
    assert (tmp_path / "n0" / "img00.png").read_bytes() == (tmp_path / "n1" / "img00.png").read_bytes()


def test_add_noise_zero_sigma_is_identity(toy, tmp_path):
    out = tmp_path / "z"
    assert main(["add-noise", "--in", str(toy / "clean"), "--out", str(out), "--sigma", "0"]) == 0
    for p in sorted((toy / "clean").iterdir()):
        assert np.array_equal(load_image(out / p.name), load_image(p))


def test_add_noise_poisson(toy, tmp_path):
    out = tmp_path / "p"
    assert main(["add-noise", "--in", str(toy / "clean"), "--out", str(out), "--kind", "poisson"]) == 0
    assert len(list(out.glob("*.png"))) == 4


# --- export-curves ---


def test_export_curves(trained, tmp_path):
    out = tmp_path / "c.csv"
    assert main(["export-curves", "--run", str(trained), "--out", str(out)]) == 0
    with open(out) as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == CURVE_FIELDS
        assert len(list(reader)) == 3


def test_export_curves_missing(tmp_path):
    assert main(["export-curves", "--run", str(tmp_path), "--out", str(tmp_path / "c.csv")]) == 3
    (tmp_path / "curves.csv").write_text("")
    assert main(["export-curves", "--run", str(tmp_path), "--out", str(tmp_path / "c.csv")]) == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lir", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "add-noise" in res.stdout


def test_ablate_table(toy, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(toy / "run.ini"), "--out", str(out),
                 "--variants", "full,no_bcm"]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["full", "no_bcm"]
    assert (out / "no_bcm" / "final.lirw").exists()
    assert "variant" in capsys.readouterr().out
    assert main(["ablate", "--config", str(toy / "run.ini"), "--out", str(out), "--variants", "bogus"]) == 2

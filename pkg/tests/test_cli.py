import json
import os

import numpy as np
import pytest

from tokenbreak.cli import main
from tokenbreak.disrupt import grid_shuffle
from tokenbreak.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE
from tokenbreak.formats import read_features, read_labels, write_features, write_labels
from tokenbreak.imagecore import GridSpec, Image, load_image, save_image
from tokenbreak.rng import keyed_rng
from tokenbreak.vitmini import load_weights


def run(*argv) -> int:
    return main([str(a) for a in argv])


def multiset(img):
    return np.sort(img.pixels, axis=None)


@pytest.fixture
def conf(small_config_file):
    return small_config_file()


def test_init_writes_weights(tmp_path, conf):
    out = tmp_path / "w.vitw"
    assert run("init", "--config", conf, "--seed", 4, "--out", out) == EXIT_OK
    w = load_weights(str(out))
    assert w.config.embed_dim == 8
    assert w.config.num_patches == 4


def test_usage_errors_exit_one(tmp_path, conf):
    assert run("init") == EXIT_USAGE
    assert run("nosuchcommand") == EXIT_USAGE
    bad = tmp_path / "bad.conf"
    bad.write_text("colour = blue\n")
    assert run("init", "--config", bad, "--out", tmp_path / "w") == EXIT_USAGE


def test_disrupt_sp_preserves_pixels_and_is_reproducible(tmp_path, conf, write_images):
    src = tmp_path / "in"
    paths = write_images(src, 3)
    assert run("disrupt", "--config", conf, "--seed", 1, "--method", "sp", "--input", src, "--out", tmp_path / "o1") == EXIT_OK
    assert run("disrupt", "--config", conf, "--seed", 1, "--method", "sp", "--input", src, "--out", tmp_path / "o2") == EXIT_OK

    for p in paths:
        out = load_image(str(tmp_path / "o1" / os.path.basename(p)))
        assert np.array_equal(multiset(out), multiset(load_image(p)))

    m1 = (tmp_path / "o1" / "manifest.json").read_bytes()
    assert m1 == (tmp_path / "o2" / "manifest.json").read_bytes()
    manifest = json.loads(m1)
    assert manifest["method"] == "SP"
    assert [r["status"] for r in manifest["records"]] == ["ok"] * 3


def test_disrupt_balanced_records_clusters(tmp_path, conf, write_images):
    src = tmp_path / "in"
    write_images(src, 2, size=16)
    assert run("disrupt", "--config", conf, "--method", "balanced", "--threshold", 0.3, "--input", src, "--out", tmp_path / "o") == EXIT_OK
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["sim_threshold"] == 0.3
    for rec in manifest["records"]:
        assert rec["stage"] == "BALANCED"
        assert 1 <= rec["num_clusters"] <= 16


def test_disrupt_pipeline_and_grid(tmp_path, conf, write_images):
    src = tmp_path / "in"
    write_images(src, 2)
    assert run("disrupt", "--config", conf, "--method", "pipeline", "--epoch", 0, "--grid-choices", "1,2",
               "--input", src, "--out", tmp_path / "o") == EXIT_OK
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert {r["stage"] for r in manifest["records"]} == {"WARMUP"}

    assert run("disrupt", "--config", conf, "--method", "grid", "--input", src, "--out", tmp_path / "g") == EXIT_USAGE
    assert run("disrupt", "--config", conf, "--method", "grid", "--grid", "2", "--input", src, "--out", tmp_path / "g") == EXIT_OK
    assert run("disrupt", "--config", conf, "--method", "warmup", "--grid", "2", "--input", src, "--out", tmp_path / "w") == EXIT_USAGE
    assert run("disrupt", "--config", conf, "--method", "pipeline", "--epoch", 50, "--input", src, "--out", tmp_path / "late") == EXIT_DATA


def test_disrupt_reports_failures(tmp_path, conf, write_images):
    src = tmp_path / "in"
    write_images(src, 1)
    (src / "broken.png").write_bytes(b"nope")
    (src / "notes.txt").write_text("skip me")
    assert run("disrupt", "--config", conf, "--method", "sp", "--input", src, "--out", tmp_path / "o") == EXIT_DATA
    records = {r["path"]: r for r in json.loads((tmp_path / "o" / "manifest.json").read_text())["records"]}
    assert records["broken.png"]["status"] == "failed"
    assert records["notes.txt"]["status"] == "skipped"
    assert records["img000.png"]["status"] == "ok"


def test_features_file_and_rerun(tmp_path, conf, write_images):
    data = tmp_path / "data"
    write_images(data, 6, sub="a")
    write_images(data, 4, sub="b")
    weights = tmp_path / "w.vitw"
    assert run("init", "--config", conf, "--out", weights) == EXIT_OK

    out = tmp_path / "f.fmat"
    assert run("features", "--config", conf, "--weights", weights, "--input", data, "--out", out) == EXIT_OK
    raw = out.read_bytes()
    assert np.frombuffer(raw, dtype="<u4", count=2, offset=5).tolist() == [10, 8]
    assert read_labels(str(out) + ".labels.txt").tolist() == [0] * 6 + [1] * 4
    assert (tmp_path / "f.fmat.classes.txt").read_text() == "a\nb\n"

    assert run("features", "--config", conf, "--weights", weights, "--input", data, "--out", out, "--threads", 8) == EXIT_OK
    assert out.read_bytes() == raw


def test_features_ignore_shuffle_without_positions(tmp_path, conf, quantized_image):
    for i in range(4):
        img = quantized_image(8, 8)
        save_image(img, str(tmp_path / "orig" / f"{i}.png"))
        save_image(grid_shuffle(img, GridSpec(2, 2), keyed_rng(i)), str(tmp_path / "shuf" / f"{i}.png"))
    for name in ("orig", "shuf"):
        assert run("features", "--config", conf, "--no-pos", "--input", tmp_path / name, "--out", tmp_path / f"{name}.fmat") == EXIT_OK
    a = read_features(str(tmp_path / "orig.fmat"))
    b = read_features(str(tmp_path / "shuf.fmat"))
    assert np.max(np.abs(a - b)) < 1e-5


def test_cka_same_directory_and_rotation(tmp_path, conf, write_images, capsys):
    data = tmp_path / "data"
    write_images(data, 6)
    assert run("cka", "--config", conf, "--a", data, "--b", data, "--out", tmp_path / "r.json") == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["cka"] == pytest.approx(1.0, abs=1e-9)
    assert report["n"] == 6

    gen = np.random.default_rng(0)
    x = gen.normal(size=(20, 8))
    q, _ = np.linalg.qr(gen.normal(size=(8, 8)))
    write_features(str(tmp_path / "x.fmat"), x)
    write_features(str(tmp_path / "xq.fmat"), x @ q)
    capsys.readouterr()
    assert run("cka", "--a", tmp_path / "x.fmat", "--b", tmp_path / "xq.fmat") == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["cka"] == pytest.approx(1.0, abs=1e-6)


def test_cka_noise_directories_are_reproducible(tmp_path, conf, write_images):
    write_images(tmp_path / "a", 5, prefix="a")
    write_images(tmp_path / "b", 7, prefix="b")
    args = ("cka", "--config", conf, "--seed", 2, "--a", tmp_path / "a", "--b", tmp_path / "b")
    assert run(*args, "--out", tmp_path / "1.json") == EXIT_OK
    assert run(*args, "--out", tmp_path / "2.json") == EXIT_OK
    assert (tmp_path / "1.json").read_bytes() == (tmp_path / "2.json").read_bytes()
    assert json.loads((tmp_path / "1.json").read_text())["n"] == 5


def structured_images(root, count: int, size: int = 32):
    """Oriented sinusoidal stripes, one frequency and angle per image."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    for i in range(count):
        angle = np.pi * i / count
        wave = 2 * np.pi * (1 + i % 5) * (xx * np.cos(angle) + yy * np.sin(angle))
        px = np.stack([0.5 + 0.5 * np.sin(wave + shift) for shift in (0.0, 2.0, 4.0)], axis=-1)
        save_image(Image(px), str(root / f"s{i:03d}.png"))


def test_sweep_default_grids(tmp_path, small_config_file):
    conf = small_config_file(patch_size=16, num_patches=196, depth=1)
    structured_images(tmp_path / "imgs", 64)
    for name, threads in (("s1.csv", 1), ("s2.csv", 8)):
        assert run("sweep", "--config", conf, "--seed", 3, "--threads", threads,
                   "--input", tmp_path / "imgs", "--out", tmp_path / name) == EXIT_OK

    lines = (tmp_path / "s1.csv").read_text().splitlines()
    assert lines[0] == "grid,cka,feature_shift"
    rows = [line.split(",") for line in lines[1:]]
    assert [r[0] for r in rows] == ["1", "2", "4", "7", "8", "14"]
    assert float(rows[0][1]) == pytest.approx(1.0, abs=1e-9)
    assert float(rows[0][2]) == 0.0
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()


@pytest.fixture
def separable_features(tmp_path):
    gen = np.random.default_rng(12)
    centers = gen.normal(0.0, 10.0, size=(6, 8))
    labels = np.repeat(np.arange(6), 25)
    x = centers[labels] + gen.normal(0.0, 0.1, size=(labels.size, 8))
    write_features(str(tmp_path / "x.fmat"), x)
    write_labels(str(tmp_path / "x.labels"), labels)
    return tmp_path / "x.fmat", tmp_path / "x.labels"


def test_eval_on_feature_files(tmp_path, separable_features):
    feats, labels = separable_features
    out = tmp_path / "e.json"
    assert run("eval", "--features", feats, "--labels", labels, "--way", 5, "--shot", 5, "--query", 15,
               "--episodes", 50, "--out", out) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["accuracy"] >= 0.99
    assert report["episodes"] == 50

    assert run("eval", "--features", feats, "--labels", labels, "--shot", 1, "--episodes", 10, "--out", out) == EXIT_OK
    assert json.loads(out.read_text())["shot"] == 1


def test_eval_rejects_bad_shapes(separable_features):
    feats, labels = separable_features
    base = ("eval", "--features", feats, "--labels", labels, "--episodes", 5)
    assert run(*base, "--way", 0) == EXIT_USAGE
    assert run(*base, "--way", 7) == EXIT_DATA
    assert run("eval", "--features", feats) == EXIT_USAGE


def test_eval_on_image_directory(tmp_path, conf, write_images):
    for c in range(3):
        write_images(tmp_path / "ds", 3, sub=f"class{c}")
    out = tmp_path / "e.json"
    assert run("eval", "--config", conf, "--input", tmp_path / "ds", "--way", 2, "--shot", 1, "--query", 2,
               "--episodes", 4, "--out", out) == EXIT_OK
    report = json.loads(out.read_text())
    assert 0.0 <= report["accuracy"] <= 1.0


def test_attn_heatmaps(tmp_path, conf, quantized_image):
    save_image(quantized_image(10, 12), str(tmp_path / "in" / "one.ppm"))
    save_image(quantized_image(8, 8), str(tmp_path / "in" / "sub" / "two.png"))
    weights = tmp_path / "w.vitw"
    assert run("init", "--config", conf, "--out", weights) == EXIT_OK

    for out in ("h1", "h2"):
        assert run("attn", "--config", conf, "--weights", weights, "--block", 1, "--input", tmp_path / "in", "--out", tmp_path / out) == EXIT_OK
    one = load_image(str(tmp_path / "h1" / "one.png"))
    assert one.shape == (10, 12, 1)
    assert (tmp_path / "h1" / "sub" / "two.png").read_bytes() == (tmp_path / "h2" / "sub" / "two.png").read_bytes()

    assert run("attn", "--config", conf, "--weights", weights, "--block", 5, "--input", tmp_path / "in", "--out", tmp_path / "h3") == EXIT_USAGE


def tree_bytes(root) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("method", ["sp", "spa", "balanced", "pipeline", "image_amp"])
def test_disrupt_output_independent_of_threads(tmp_path, conf, write_images, method):
    src = tmp_path / "in"
    write_images(src, 6, size=16)
    for out, threads in (("t1", 1), ("t8", 8)):
        assert run("disrupt", "--config", conf, "--seed", 9, "--threads", threads, "--method", method,
                   "--grid-choices", "1,2", "--input", src, "--out", tmp_path / out) == EXIT_OK
    one = tree_bytes(tmp_path / "t1")
    assert "manifest.json" in one
    assert len(one) == 7
    assert one == tree_bytes(tmp_path / "t8")


def test_disrupt_cluster_granularity_in_manifest(tmp_path, conf, write_images):
    src = tmp_path / "in"
    write_images(src, 2, size=16)
    assert run("disrupt", "--config", conf, "--method", "balanced", "--input", src, "--out", tmp_path / "p") == EXIT_OK
    assert run("disrupt", "--config", conf, "--method", "balanced", "--granularity", "cluster",
               "--input", src, "--out", tmp_path / "c") == EXIT_OK
    assert json.loads((tmp_path / "p" / "manifest.json").read_text())["granularity"] == "patch"
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["granularity"] == "cluster"
    assert [r["status"] for r in manifest["records"]] == ["ok", "ok"]
    assert run("disrupt", "--config", conf, "--method", "balanced", "--granularity", "pixel",
               "--input", src, "--out", tmp_path / "x") == EXIT_USAGE


def test_cka_eval_attn_independent_of_threads(tmp_path, conf, write_images):
    write_images(tmp_path / "a", 5, prefix="a")
    write_images(tmp_path / "b", 7, prefix="b")
    for c in range(3):
        write_images(tmp_path / "ds", 3, sub=f"class{c}")
    weights = tmp_path / "w.vitw"
    assert run("init", "--config", conf, "--out", weights) == EXIT_OK

    for threads in (1, 8):
        common = ("--config", conf, "--seed", 2, "--threads", threads)
        assert run("cka", *common, "--a", tmp_path / "a", "--b", tmp_path / "b", "--out", tmp_path / f"c{threads}.json") == EXIT_OK
        assert run("eval", *common, "--input", tmp_path / "ds", "--way", 2, "--shot", 1, "--query", 2,
                   "--episodes", 6, "--out", tmp_path / f"e{threads}.json") == EXIT_OK
        assert run("attn", *common, "--weights", weights, "--block", 1, "--input", tmp_path / "a",
                   "--out", tmp_path / f"h{threads}") == EXIT_OK

    assert (tmp_path / "c1.json").read_bytes() == (tmp_path / "c8.json").read_bytes()
    assert (tmp_path / "e1.json").read_bytes() == (tmp_path / "e8.json").read_bytes()
    heat = tree_bytes(tmp_path / "h1")
    assert len(heat) == 5
    assert heat == tree_bytes(tmp_path / "h8")


def test_unwritable_outputs_exit_two(tmp_path, conf, write_images):
    src = tmp_path / "in"
    write_images(src, 2)
    blocker = tmp_path / "blocker"
    blocker.write_text("a regular file")
    weights = tmp_path / "w.vitw"
    assert run("init", "--config", conf, "--out", weights) == EXIT_OK

    assert run("disrupt", "--config", conf, "--method", "sp", "--input", src, "--out", blocker) == EXIT_DATA
    assert run("features", "--config", conf, "--weights", weights, "--input", src, "--out", blocker / "f.fmat") == EXIT_DATA
    assert run("attn", "--config", conf, "--weights", weights, "--block", 1, "--input", src, "--out", blocker) == EXIT_DATA
    assert run("cka", "--config", conf, "--a", src, "--b", src, "--out", blocker / "r.json") == EXIT_DATA
    assert run("init", "--config", conf, "--out", blocker / "w.vitw") == EXIT_DATA
    assert blocker.read_text() == "a regular file"

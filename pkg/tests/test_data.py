import hashlib
import os
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from mrnet.data import (DataError, DatasetManifest, Record, SyntheticSpec, TextureParams, default_textures,
                        generate_synthetic, iter_batches, load_image, load_split, read_manifest, resize, save_image,
                        split, write_manifest)


def items(per_class, classes=1):
    return [Record(f"c{c}/{i}.png", c, f"class_{c}") for c in range(classes) for i in range(per_class)]


def band_energy_features(x):
    """Log mean power in log-spaced radial frequency bands of the gray image."""
    g = x.mean(axis=1)
    g = g - g.mean(axis=(1, 2), keepdims=True)
    power = np.abs(np.fft.fft2(g)) ** 2
    f = np.fft.fftfreq(g.shape[-1])
    r = np.hypot(f[:, None], f[None, :])
    edges = np.geomspace(0.04, 0.5, 13)
    bands = [power[:, (r >= a) & (r < b)].mean(axis=1) for a, b in zip(edges[:-1], edges[1:])]
    return np.log(np.stack(bands, axis=1) + 1e-12)


def digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


class TestSplit:
    @pytest.mark.parametrize("n,ratios,expect", [(100, (0.7, 0.15, 0.15), (70, 15, 15)),
                                                 (10, (0.5, 0.3, 0.2), (5, 3, 2)),
                                                 (140, (5 / 7, 1 / 7, 1 / 7), (100, 20, 20))])
    def test_floor_allocation(self, n, ratios, expect):
        m = split(items(n), ratios, seed=0)
        c = m.counts()
        assert (c["train"], c["validation"], c["test"]) == expect

    def test_stratified_per_class(self):
        m = split(items(20, classes=3), seed=1)
        per = Counter((r.label, r.split) for r in m.records)
        for label in range(3):
            assert (per[label, "train"], per[label, "validation"], per[label, "test"]) == (14, 3, 3)

    def test_seeded(self):
        a = [r.split for r in split(items(30), seed=4).records]
        b = [r.split for r in split(items(30), seed=4).records]
        c = [r.split for r in split(items(30), seed=5).records]
        assert a == b and a != c

    def test_too_few_items(self):
        with pytest.raises(DataError, match="too few"):
            split(items(3))

    def test_bad_ratios(self):
        with pytest.raises(DataError):
            split(items(10), (0.5, 0.5, 0.5))


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = split(items(10, 2), seed=0, root=tmp_path)
        path = write_manifest(m, tmp_path / "m.csv")
        back = read_manifest(path)
        assert back.records == m.records
        assert back.class_names == ["class_0", "class_1"]
        assert path.read_text().splitlines()[0] == "path,label_index,label_name,split"

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            read_manifest(tmp_path / "nope.csv")

    def test_bad_split_name(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,label_index,label_name,split\na.png,0,x,holdout\n")
        with pytest.raises(DataError, match="holdout"):
            read_manifest(p)

    def test_sparse_labels_rejected(self):
        with pytest.raises(DataError, match="dense"):
            DatasetManifest([Record("a", 0, "x", "train"), Record("b", 2, "y", "train")])

    def test_duplicate_paths_rejected(self):
        with pytest.raises(DataError, match="unique"):
            DatasetManifest([Record("a", 0, "x", "train"), Record("a", 0, "x", "test")])


class TestImages:
    def test_round_trip_is_byte_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (3, 5, 7), dtype=np.uint8)
        back = load_image(save_image(img, tmp_path / "a.png"))
        assert np.array_equal(np.rint(back * 255).astype(np.uint8), img)

    def test_black_and_white(self, tmp_path):
        img = np.zeros((3, 2, 2), dtype=np.uint8)
        img[:, 0, 0] = 255
        back = load_image(save_image(img, tmp_path / "b.png"))
        assert back[:, 0, 0].tolist() == [1.0, 1.0, 1.0]
        assert back[:, 1:, :].sum() == 0.0

    def test_grayscale_rejected(self, tmp_path):
        Image.new("L", (4, 4)).save(tmp_path / "g.png")
        with pytest.raises(DataError, match="RGB"):
            load_image(tmp_path / "g.png")

    def test_unreadable(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not a png")
        with pytest.raises(DataError):
            load_image(tmp_path / "x.png")


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(1).random((3, 6, 6))
        np.testing.assert_allclose(resize(img, 6), img, atol=1e-9)

    def test_constant(self):
        np.testing.assert_allclose(resize(np.full((3, 5, 5), 0.3), 12), 0.3, atol=1e-12)
        np.testing.assert_allclose(resize(np.full((3, 5, 5), 0.3), 2), 0.3, atol=1e-12)

    def test_checkerboard_to_one_pixel(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])[None].repeat(3, axis=0)
        assert resize(board, 1).tolist() == [[[0.5]]] * 3

    def test_halving_averages_blocks(self):
        img = np.random.default_rng(2).random((3, 8, 8))
        blocks = img.reshape(3, 4, 2, 4, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(resize(img, 4), blocks, atol=1e-12)


class TestSynthetic:
    def test_counts_and_layout(self, tmp_path):
        m = generate_synthetic(SyntheticSpec(classes=3, per_class=10, resolution=16), tmp_path)
        assert len(m.records) == 30
        assert Counter(r.label for r in m.records) == {0: 10, 1: 10, 2: 10}
        assert len(list(tmp_path.glob("images/class_*/*.png"))) == 30
        assert read_manifest(tmp_path / "manifest.csv").records == m.records

    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticSpec(classes=2, per_class=7, resolution=16, seed=3)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        generate_synthetic(SyntheticSpec(classes=2, per_class=7, resolution=16, seed=4), tmp_path / "c")
        assert digest(tmp_path / "a") == digest(tmp_path / "b") != digest(tmp_path / "c")

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(classes=2, textures=(TextureParams(0.1, 0, 0.05),) * 2)
        with pytest.raises(ValueError):
            SyntheticSpec(classes=2, textures=default_textures(3))

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(DataError, match="not writable"):
            generate_synthetic(SyntheticSpec(per_class=4, resolution=16), blocker / "sub")

    def test_nearest_centroid_band_energy_oracle(self, tmp_path):
        m = generate_synthetic(SyntheticSpec(classes=3, per_class=100, resolution=64, seed=7), tmp_path)
        x_tr, y_tr = load_split(m, "train", 64, np.float64)
        x_te, y_te = load_split(m, "test", 64, np.float64)
        f_tr, f_te = band_energy_features(x_tr), band_energy_features(x_te)
        centroids = np.stack([f_tr[y_tr == k].mean(axis=0) for k in range(3)])
        pred = np.argmin(((f_te[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == y_te) >= 0.95


def test_iter_batches_covers_everything():
    chunks = list(iter_batches(10, 4, order=range(9, -1, -1)))
    assert [len(c) for c in chunks] == [4, 4, 2]
    assert sorted(np.concatenate(chunks).tolist()) == list(range(10))

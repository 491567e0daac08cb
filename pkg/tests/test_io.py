import numpy as np
import pytest

from hybridseg import metrics as ME
from hybridseg import pgm
from hybridseg.tensor import FormatError, ShapeError


def write_raw(path, magic, w, h, payload, maxval=255):
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n{maxval}\n".encode())
        fh.write(payload)


class TestReadImage:
    def test_exact_scaling(self, tmp_path):
        path = tmp_path / "a.pgm"
        write_raw(path, b"P5", 2, 2, bytes([0, 128, 255, 64]))
        rec = pgm.read_image(path)
        assert rec.pixels.shape == (1, 2, 2)
        assert np.allclose(
            rec.pixels.reshape(-1),
            [0.0, 128 / 255.0, 1.0, 64 / 255.0],
        )

    def test_round_trip_is_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(1, 5, 7), dtype=np.uint8)
        rec = pgm.ImageRecord(pixels=raw.astype(float) / 255.0)
        path = tmp_path / "b.pgm"
        pgm.write_image(rec, path)
        back = pgm.read_image(path)
        assert np.array_equal(back.pixels, rec.pixels)

    def test_rgb_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        raw = rng.integers(0, 256, size=(3, 4, 6), dtype=np.uint8)
        rec = pgm.ImageRecord(pixels=raw.astype(float) / 255.0)
        path = tmp_path / "c.ppm"
        pgm.write_image(rec, path)
        assert np.array_equal(pgm.read_image(path).pixels, rec.pixels)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "d.pgm"
        write_raw(path, b"P5", 4, 4, bytes(10))  # needs 16
        with pytest.raises(FormatError):
            pgm.read_image(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "e.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(FormatError):
            pgm.read_image(path)

    def test_unsupported_depth(self, tmp_path):
        path = tmp_path / "f.pgm"
        write_raw(path, b"P5", 1, 1, bytes([0, 0]), maxval=65535)
        with pytest.raises(FormatError):
            pgm.read_image(path)

    def test_comments_allowed(self, tmp_path):
        path = tmp_path / "g.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
        rec = pgm.read_image(path)
        assert np.allclose(rec.pixels.reshape(-1), [0.0, 1.0])


class TestMask:
    def test_binary_convention(self, tmp_path):
        path = tmp_path / "m.pgm"
        write_raw(path, b"P5", 2, 2, bytes([255, 255, 255, 255]))
        rec = pgm.read_mask(path, num_classes=1)
        assert np.array_equal(rec.labels, np.ones((2, 2), dtype=np.int64))

    def test_binary_rejects_other_bytes(self, tmp_path):
        path = tmp_path / "m2.pgm"
        write_raw(path, b"P5", 2, 1, bytes([0, 7]))
        with pytest.raises(FormatError):
            pgm.read_mask(path, num_classes=1)

    def test_multiclass_range(self, tmp_path):
        path = tmp_path / "m3.pgm"
        write_raw(path, b"P5", 2, 1, bytes([0, 7]))
        with pytest.raises(FormatError):
            pgm.read_mask(path, num_classes=4)
        rec = pgm.read_mask(path, num_classes=8)
        assert np.array_equal(rec.labels, [[0, 7]])

    def test_prediction_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        labels = (rng.random((6, 6)) < 0.5).astype(np.int64)
        path = tmp_path / "m4.pgm"
        pgm.write_mask(pgm.MaskRecord(labels=labels, num_classes=1), path)
        back = pgm.read_mask(path, num_classes=1)
        assert np.array_equal(back.labels, labels)

    def test_multiclass_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 4, size=(5, 5))
        path = tmp_path / "m5.pgm"
        pgm.write_mask(pgm.MaskRecord(labels=labels, num_classes=4), path)
        back = pgm.read_mask(path, num_classes=4)
        assert np.array_equal(back.labels, labels)


class TestOverlay:
    def test_equal_masks_only_green_or_untinted(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.random((1, 8, 8))
        g = rng.random((8, 8)) < 0.4
        rgb = pgm.overlay_report(img, g, g, tmp_path / "o.ppm")
        # true positives are green-tinted: green strictly dominant
        tp = g
        assert np.all(rgb[1][tp] > rgb[0][tp])
        assert np.all(rgb[1][tp] > rgb[2][tp])
        tn = ~g
        assert np.allclose(rgb[0][tn], rgb[1][tn])
        assert np.allclose(rgb[1][tn], rgb[2][tn])

    def test_inverted_foreground_red_and_blue(self, tmp_path):
        img = np.full((1, 4, 4), 0.5)
        g = np.zeros((4, 4), dtype=bool)
        g[:2] = True
        rgb = pgm.overlay_report(img, g, ~g, tmp_path / "o2.ppm")
        fp = ~g
        fn = g
        assert np.all(rgb[0][fp] > rgb[1][fp])  # red beats green
        assert np.all(rgb[2][fn] > rgb[1][fn])  # blue beats green

    def test_counts_match_confusion(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.random((1, 10, 10))
        g = rng.random((10, 10)) < 0.5
        s = rng.random((10, 10)) < 0.5
        rgb = pgm.overlay_report(img, g, s, tmp_path / "o3.ppm")
        c = ME.confusion(s, g)
        green = (rgb[1] > rgb[0]) & (rgb[1] > rgb[2])
        red = (rgb[0] > rgb[1]) & (rgb[0] > rgb[2])
        blue = (rgb[2] > rgb[0]) & (rgb[2] > rgb[1])
        untinted = ~(green | red | blue)
        assert green.sum() == c.tp
        assert red.sum() == c.fp
        assert blue.sum() == c.fn
        assert untinted.sum() == c.tn

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ShapeError):
            pgm.overlay_report(
                np.zeros((1, 4, 4)), np.zeros((4, 4)), np.zeros((5, 5)),
                tmp_path / "o4.ppm",
            )

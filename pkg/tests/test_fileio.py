import numpy as np
import pytest

from st2dgs import fileio


class TestPly:
    def test_vertex_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cols = {
            "x": rng.normal(size=10).astype(np.float32),
            "y": rng.normal(size=10).astype(np.float32),
            "z": rng.normal(size=10).astype(np.float32),
            "opacity_raw": rng.normal(size=10).astype(np.float32),
        }
        verts = fileio.structured_from_columns(cols)
        path = tmp_path / "pts.ply"
        fileio.write_ply(path, verts)
        back, faces = fileio.read_ply(path)
        assert faces is None
        assert back.dtype.names == tuple(cols)
        for name in cols:
            np.testing.assert_array_equal(back[name], cols[name])

    def test_mesh_round_trip(self, tmp_path):
        verts = fileio.structured_from_columns({
            "x": np.array([0, 1, 0, 1], np.float32),
            "y": np.array([0, 0, 1, 1], np.float32),
            "z": np.zeros(4, np.float32),
        })
        faces = np.array([[0, 1, 2], [2, 1, 3]], np.int32)
        path = tmp_path / "mesh.ply"
        fileio.write_ply(path, verts, faces)
        back_v, back_f = fileio.read_ply(path)
        np.testing.assert_array_equal(back_f, faces)
        np.testing.assert_array_equal(back_v["y"], verts["y"])

    def test_header_is_binary_little_endian(self, tmp_path):
        verts = fileio.structured_from_columns({"x": np.zeros(1, np.float32)})
        path = tmp_path / "one.ply"
        fileio.write_ply(path, verts)
        head = path.read_bytes()[:200].decode("ascii", "replace")
        assert head.startswith("ply\n")
        assert "format binary_little_endian 1.0" in head


class TestPfm:
    def test_grayscale_round_trip(self, tmp_path):
        img = np.random.default_rng(1).normal(size=(5, 7)).astype(np.float32)
        path = tmp_path / "depth.pfm"
        fileio.write_pfm(path, img)
        back = fileio.read_pfm(path)
        np.testing.assert_array_equal(back, img)

    def test_color_round_trip(self, tmp_path):
        img = np.random.default_rng(2).random(size=(4, 6, 3)).astype(np.float32)
        path = tmp_path / "rgb.pfm"
        fileio.write_pfm(path, img)
        back = fileio.read_pfm(path)
        assert back.shape == (4, 6, 3)
        np.testing.assert_array_equal(back, img)


class TestPng:
    def test_rgb_round_trip_is_quantized(self, tmp_path):
        img = np.random.default_rng(3).random(size=(5, 5, 3))
        path = tmp_path / "img.png"
        fileio.write_png(path, img)
        back = fileio.read_png(path)
        assert back.shape == (5, 5, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9

    def test_gray_round_trip(self, tmp_path):
        img = np.random.default_rng(4).random(size=(6, 4))
        path = tmp_path / "gray.png"
        fileio.write_png(path, img)
        back = fileio.read_png(path)
        assert back.shape == (6, 4)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9

    def test_values_clamped(self, tmp_path):
        img = np.array([[-0.5, 2.0]])
        path = tmp_path / "clamp.png"
        fileio.write_png(path, img)
        back = fileio.read_png(path)
        np.testing.assert_allclose(back, [[0.0, 1.0]])

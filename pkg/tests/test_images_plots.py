import xml.etree.ElementTree as ET

import numpy as np
import pytest

from advmesh.images import load_png, load_ppm, save_png, save_ppm, tile, to_uint8
from advmesh.plots import line_chart


def test_to_uint8_rounds_and_clips():
    np.testing.assert_array_equal(to_uint8(np.array([-0.2, 0.0, 0.5, 1.0, 3.0])), [0, 0, 128, 255, 255])


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (7, 9, 3))
    save_png(img, tmp_path / "a.png")
    assert np.abs(load_png(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-12


def test_png_single_channel(tmp_path):
    save_png(np.full((4, 5, 1), 0.5), tmp_path / "m.png")
    back = load_png(tmp_path / "m.png")
    assert back.shape == (4, 5, 3) and np.allclose(back, 128 / 255)


def test_ppm_roundtrip_and_bytes(tmp_path):
    img = np.random.default_rng(1).uniform(0, 1, (6, 4, 3))
    save_ppm(img, tmp_path / "a.ppm")
    save_ppm(img, tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    np.testing.assert_array_equal(load_ppm(tmp_path / "a.ppm"), to_uint8(img) / 255.0)


def test_ppm_rejects_garbage(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(ValueError):
        load_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P6\n2 2\n255\n\x00\x00")
    with pytest.raises(ValueError):
        load_ppm(tmp_path / "y.ppm")


def test_tile_layout():
    views = [np.full((2, 3, 3), k / 10) for k in range(5)]
    out = tile(views, cols=3, gap=1)
    assert out.shape == (5, 11, 3)
    assert out[0, 0, 0] == 0.0 and out[3, 4, 0] == pytest.approx(0.4)
    assert np.all(out[2] == 1.0) and np.all(out[3:, 8:] == 1.0)
    with pytest.raises(ValueError):
        tile([])


def test_line_chart_is_valid_svg(tmp_path):
    p = tmp_path / "c.svg"
    line_chart({"a<b": ([0, 1, 2], [0.1, 0.5, float("nan")]), "flat": ([0, 1], [1, 1])}, p, "t&t", "x", "y")
    root = ET.parse(p).getroot()
    ns = "{http://www.w3.org/2000/svg}"
    lines = root.findall(f"{ns}polyline")
    assert len(lines) == 2
    assert len(lines[0].get("points").split()) == 2  # NaN point dropped
    texts = [t.text for t in root.findall(f"{ns}text")]
    assert "a<b" in texts and "t&t" in texts


def test_line_chart_empty_series(tmp_path):
    line_chart({"none": ([], [])}, tmp_path / "e.svg")
    assert ET.parse(tmp_path / "e.svg").getroot().findall("{http://www.w3.org/2000/svg}polyline") == []

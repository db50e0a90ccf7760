import xml.etree.ElementTree as ET

import numpy as np

from mvplnmix.heatmap import diverging_color, emit_heatmaps, heatmap_svg, row_zscores
from mvplnmix.tensor_io import CountTensor

SVG = "{http://www.w3.org/2000/svg}"


def test_zscores():
    z = row_zscores([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])
    np.testing.assert_allclose(z[0], [-1.2247449, 0.0, 1.2247449], atol=1e-6)
    np.testing.assert_array_equal(z[1], 0.0)


def test_colors():
    assert diverging_color(0.0) == "#000000"
    assert diverging_color(10.0) == "#ff0000"
    assert diverging_color(-10.0) == "#00ff00"


def test_one_file_per_cluster(tmp_path):
    rng = np.random.default_rng(1)
    tensor = CountTensor(rng.poisson(10, size=(12, 2, 3)))
    labels = np.array([0] * 11 + [1])
    paths = emit_heatmaps(tensor, labels, tmp_path / "out")
    assert [p.name for p in paths] == ["cluster_1.svg", "cluster_2.svg"]
    root = ET.parse(paths[1]).getroot()
    cells = [r for r in root.iter(f"{SVG}rect") if r.get("fill", "").startswith("#")]
    # the single-unit cluster renders one row of six cells
    fills = {r.get("fill") for r in cells if r.get("fill") != "#ffffff"}
    assert len([r for r in cells if r.get("fill") != "#ffffff"]) == 6
    assert fills == {"#000000"} or len(fills) >= 1


def test_rows_sorted_and_headers():
    counts = np.array([[1, 2], [50, 60], [10, 10]])
    svg = heatmap_svg(counts, ["O1:V1", "O1:V2"], ["low", "high", "mid"], "cluster 1")
    assert svg.index(">high<") < svg.index(">mid<") < svg.index(">low<")
    assert "O1:V2" in svg and "cluster 1" in svg
    ET.fromstring(svg)

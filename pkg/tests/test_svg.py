"""Figure emission tests: structural validity, primitive counts, and
byte determinism of the hand-built SVG output."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from leo import svg

NS = "{http://www.w3.org/2000/svg}"


def sample_figure(samples=3):
    grid = np.linspace(-5, 5, 41)
    true_y = np.sin(grid)
    rng = np.random.default_rng(0)
    curves = [np.sin(grid) + 0.2 * rng.normal(size=grid.size)
              for _ in range(samples)]
    return svg.regression_figure(grid, true_y, grid[::10], true_y[::10],
                                 curves, title="episode 0")


def tags(document):
    root = ET.fromstring(document)
    assert root.tag == NS + "svg"
    return [child.tag.replace(NS, "") for child in root.iter()][1:]


def test_regression_figure_is_wellformed_and_uses_allowed_primitives():
    document = sample_figure()
    assert set(tags(document)) <= {"polyline", "circle", "text"}


def test_regression_figure_counts():
    document = sample_figure(samples=3)
    root = ET.fromstring(document)
    circles = root.findall(NS + "circle")
    assert len(circles) == 5  # one ring per train point
    dotted = [el for el in root.findall(NS + "polyline")
              if el.get("stroke-dasharray") == "1,3"]
    assert len(dotted) == 3
    drops = [el for el in root.findall(NS + "polyline")
             if el.get("stroke-dasharray") == "5,4"]
    assert len(drops) == 5
    solid = [el for el in root.findall(NS + "polyline")
             if el.get("stroke") == "#1a5fb4"]
    assert len(solid) == 1
    assert len(solid[0].get("points").split()) == 41


def test_regression_figure_zero_samples():
    document = sample_figure(samples=0)
    root = ET.fromstring(document)
    dotted = [el for el in root.findall(NS + "polyline")
              if el.get("stroke-dasharray") == "1,3"]
    assert dotted == []


def test_regression_figure_deterministic():
    assert sample_figure() == sample_figure()


def test_regression_figure_rejects_ragged_curves():
    with pytest.raises(ValueError):
        svg.regression_figure([0, 1, 2], [0, 1, 2], [], [],
                              [[0.0, 1.0]])
    with pytest.raises(ValueError):
        svg.regression_figure([0, 1], [0.0], [], [], [])


def test_box_plot_structure():
    rng = np.random.default_rng(1)
    groups = [("z", 10.0 ** rng.uniform(-2, 2, 200)),
              ("theta", 10.0 ** rng.uniform(-4, 0, 200))]
    document = svg.box_plot(groups, title="|eigenvalue|")
    root = ET.fromstring(document)
    assert set(tags(document)) <= {"polyline", "circle", "text"}
    medians = [el for el in root.findall(NS + "polyline")
               if el.get("stroke") == "#c01c28"]
    assert len(medians) == 2
    labels = [el.text for el in root.findall(NS + "text")]
    assert "z" in labels and "theta" in labels
    assert document == svg.box_plot(groups, title="|eigenvalue|")


def test_box_plot_handles_zeros_and_single_value():
    document = svg.box_plot([("a", [0.0, 1.0, 2.0]), ("b", [5.0])])
    ET.fromstring(document)


def test_box_plot_rejects_empty():
    with pytest.raises(ValueError):
        svg.box_plot([])
    with pytest.raises(ValueError):
        svg.box_plot([("a", [])])


def test_quantiles_interpolate():
    values = [1.0, 2.0, 3.0, 4.0]
    assert svg._quantile(values, 0.5) == 2.5
    assert svg._quantile(values, 0.0) == 1.0
    assert svg._quantile(values, 1.0) == 4.0
    assert svg._quantile([7.0], 0.3) == 7.0

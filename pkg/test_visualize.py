"""
Tests for the prediction SVG and the feature figure.
"""

import os
import tempfile
import xml.etree.ElementTree as ET

import numpy as np

from visualize import feature_figure, prediction_svg, write_feature_html

SVG = '{http://www.w3.org/2000/svg}'


def create_series():
    test = np.arange(31, 41)
    means = np.linspace(1.80, 1.70, 10)
    return {
        'sdgl': (test, means, means - 0.02, means + 0.02),
        'gpr_white': (test, means + 0.01, means - 0.05, means + 0.07),
    }


def test_prediction_svg_structure():
    cycles = np.arange(1, 41)
    truths = np.linspace(1.95, 1.70, 40)
    root = ET.fromstring(prediction_svg('B0005 <test>', cycles, truths, 30.5, create_series()))
    assert root.tag == SVG + 'svg'
    assert len(root.findall(SVG + 'polygon')) == 2
    # measured curve plus one line per method
    assert len(root.findall(SVG + 'polyline')) == 3
    labels = [node.text for node in root.iter(SVG + 'text')]
    assert 'B0005 <test>' in labels
    assert {'Measured', 'sdgl', 'gpr_white'} <= set(labels)
    print("✓ Prediction SVG is well formed")


def test_prediction_svg_flat_series():
    cycles = np.arange(1, 21)
    svg = prediction_svg('flat', cycles, np.full(20, 1.5), 15.5, {})
    assert 'nan' not in svg
    ET.fromstring(svg)


def test_feature_figure():
    features = np.column_stack([np.linspace(-1, 1, 40), np.linspace(0, 2, 40)])
    fig = feature_figure('SYN0000', np.arange(1, 41), features, n_train=30)
    assert [trace.name for trace in fig.data] == ['train', 'test']
    assert len(fig.data[0].x) == 30 and len(fig.data[1].x) == 10

    single = feature_figure('SYN0000', np.arange(1, 41), features[:, :1])
    assert len(single.data) == 1
    np.testing.assert_array_equal(single.data[0].z, np.zeros(40))

    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'features.html')
        write_feature_html(path, 'SYN0000', np.arange(1, 41), features, 30)
        with open(path) as f:
            assert 'Extracted features of SYN0000' in f.read()


if __name__ == "__main__":
    test_prediction_svg_structure()
    test_prediction_svg_flat_series()
    test_feature_figure()
    print("\n✓ All visualization tests passed")

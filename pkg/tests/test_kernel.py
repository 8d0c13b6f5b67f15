from __future__ import annotations

import json

import numpy as np
import pytest

from eq4d.errors import InvalidArgument, KernelAsymmetry
from eq4d.group import make_group, rotation_z
from eq4d.kernel import build_kernel, correlation, kernel_points, match_permutation, permutation_for_anchor
from eq4d.scaling import kernel_size_for


@pytest.mark.parametrize("n,k", [(1, 15), (2, 15), (3, 15), (4, 19), (6, 15)])
def test_kernel_sizes(n, k):
    layout = build_kernel(make_group(n), 1.0)
    assert layout.size == k == kernel_size_for(n)
    assert layout.permutations.shape == (n, k)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6])
def test_permutations_realize_rotations(n):
    g = make_group(n)
    layout = build_kernel(g, 0.7)
    for j in range(n):
        perm = permutation_for_anchor(layout, j)
        np.testing.assert_allclose(layout.points @ g.matrices[j].T, layout.points[perm], atol=1e-12)
        assert sorted(perm.tolist()) == list(range(layout.size))
    # Group homomorphism: sigma_i o sigma_j = sigma_{i+j}.
    for i in range(n):
        for j in range(n):
            assert (layout.permutations[i][layout.permutations[j]] == layout.permutations[(i + j) % n]).all()


def test_unsupported_order_and_radius():
    with pytest.raises(InvalidArgument):
        build_kernel(make_group(5), 1.0)
    with pytest.raises(InvalidArgument):
        build_kernel(make_group(4), 0.0)


def test_asymmetric_layout_detected():
    pts = kernel_points(6, 1.0)
    with pytest.raises(KernelAsymmetry):
        match_permutation(pts, rotation_z(np.pi / 2))


def test_correlation_values():
    assert correlation([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.3) == 1.0
    assert correlation([0.3, 0.0, 0.0], [0.0, 0.0, 0.0], 0.3) == 0.0
    assert correlation([0.15, 0.0, 0.0], [0.0, 0.0, 0.0], 0.3) == pytest.approx(0.5)
    d = np.zeros((4, 1, 3))
    p = np.zeros((1, 5, 3))
    assert correlation(d, p, 1.0).shape == (4, 5)


def test_support_radius_covers_all_nonzero_correlations(rng):
    layout = build_kernel(make_group(4), 1.0)
    d = rng.uniform(-2, 2, size=(5000, 3))
    w = correlation(d[:, None, :], layout.points[None], layout.sigma)
    outside = np.linalg.norm(d, axis=1) > layout.support_radius
    assert (w[outside] == 0).all()


def test_layout_json_round_trip():
    layout = build_kernel(make_group(3), 1.5)
    d = json.loads(layout.to_json())
    assert d["group_order"] == 3 and len(d["points"]) == 15
    np.testing.assert_array_equal(np.array(d["permutations"]), layout.permutations)

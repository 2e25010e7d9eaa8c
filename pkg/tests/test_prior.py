import logging
from itertools import product

import numpy as np
import pytest

from app.core.errors import InvalidInput
from app.services.prior import AnchorMode, PriorSpec, assemble_prior
from app.services.tsdf import TsdfVolume
from app.services.voxel_grid import GridConfig, Stencil, VoxelGrid

CFG = GridConfig(voxel_size=0.01, block_size=4)


def cube(size: int = 3) -> VoxelGrid:
    return VoxelGrid.from_coords(np.array(list(product(range(size), repeat=3))), CFG)


def observed_volume(size: int = 3, weights=None) -> TsdfVolume:
    values = np.linspace(-0.02, 0.02, size**3).reshape(size, size, size)
    weights = np.ones_like(values) if weights is None else weights
    return TsdfVolume.from_dense(values, weights, CFG, tau=0.03)


def test_precision_is_symmetric_with_laplacian_rows():
    grid = cube()
    system = assemble_prior(grid, observed_volume(), PriorSpec(lambda_smooth=2.0, lambda_anchor=0.0))
    q = system.q0.toarray()
    np.testing.assert_array_equal(q, q.T)
    np.testing.assert_allclose(q.sum(axis=1), 0.0, atol=1e-12)
    # corner node has three six-neighbors
    assert q[0, 0] == pytest.approx(6.0)
    assert not system.anchor_mask.any()
    np.testing.assert_array_equal(system.b0, 0.0)


def test_anchors_add_to_diagonal_and_rhs():
    grid = cube()
    volume = observed_volume()
    system = assemble_prior(grid, volume, PriorSpec(lambda_smooth=1.0, lambda_anchor=0.5))
    values, _ = volume.lookup(grid.coords)
    assert system.anchor_mask.all()
    np.testing.assert_allclose(system.q0.toarray().sum(axis=1), 0.5)
    np.testing.assert_allclose(system.b0, 0.5 * values)
    assert system.unanchored_components == 0


def test_unobserved_nodes_are_not_anchored():
    weights = np.ones((3, 3, 3))
    weights[0] = 0.0
    system = assemble_prior(cube(), observed_volume(weights=weights), PriorSpec())
    assert system.anchor_mask.sum() == 18
    assert np.all(system.b0[~system.anchor_mask] == 0.0)


def test_boundary_mode_skips_interior_nodes():
    grid = cube()
    system = assemble_prior(grid, observed_volume(), PriorSpec(anchor_mode=AnchorMode.boundary))
    center = int(grid.index_of([[1, 1, 1]])[0])
    assert not system.anchor_mask[center]
    assert system.anchor_mask.sum() == 26


def test_explicit_anchor_values_without_tsdf():
    grid = cube(2)
    v = np.arange(8) * 0.001
    system = assemble_prior(grid, None, PriorSpec(lambda_smooth=0.0, lambda_anchor=1.0, anchor_values=v))
    np.testing.assert_array_equal(system.q0.toarray(), np.eye(8))
    np.testing.assert_array_equal(system.b0, v)


def test_wider_stencils_add_edges():
    grid = cube()
    counts = [len(assemble_prior(grid, observed_volume(), PriorSpec(stencil=s)).edges) for s in Stencil]
    assert counts[0] < counts[1] < counts[2]


def test_unanchored_components_are_reported(caplog):
    coords = np.array([[0, 0, 0], [1, 0, 0], [5, 5, 5], [5, 5, 6]])
    grid = VoxelGrid.from_coords(coords, CFG)
    values = np.zeros(4)
    mask = np.array([True, False, False, False])
    with caplog.at_level(logging.WARNING):
        system = assemble_prior(grid, None, PriorSpec(anchor_values=values, anchor_set=mask))
    assert system.unanchored_components == 1
    count, _ = system.component_labels()
    assert count == 2
    assert "SingularPrior" in caplog.text


def test_negative_weights_rejected():
    with pytest.raises(InvalidInput):
        PriorSpec(lambda_smooth=-1.0)


def test_missing_anchor_source():
    with pytest.raises(InvalidInput):
        assemble_prior(cube(), None, PriorSpec())

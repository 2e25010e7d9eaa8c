from itertools import product

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import EmptyBand, OutsideBand
from app.services.tsdf import TsdfVolume
from app.services.voxel_grid import (
    GridConfig,
    Stencil,
    VoxelGrid,
    WeightScheme,
    activate_narrow_band,
    interpolate,
    neighbor_edges,
    trilinear_stencil,
    trilinear_stencils,
    voxel_to_world,
    world_to_voxel,
)


def cube_grid(size: int = 2, voxel_size: float = 0.01, block_size: int = 8, offset=(0, 0, 0)) -> VoxelGrid:
    coords = np.array(list(product(range(size), repeat=3))) + np.asarray(offset)
    return VoxelGrid.from_coords(coords, GridConfig(voxel_size=voxel_size, block_size=block_size))


def test_block_size_must_be_power_of_two():
    with pytest.raises(ValidationError):
        GridConfig(block_size=6)


def test_world_voxel_round_trip():
    cfg = GridConfig(origin=(0.1, -0.2, 0.3), voxel_size=0.004)
    p = np.array([[0.5, 0.25, -0.125], [0.1, -0.2, 0.3]])
    np.testing.assert_allclose(voxel_to_world(world_to_voxel(p, cfg), cfg), p, atol=1e-15)
    np.testing.assert_array_equal(world_to_voxel(p[1:], cfg), [[0.0, 0.0, 0.0]])


def test_coords_are_canonical_and_unique():
    coords = np.array([[1, 0, 0], [0, 0, 1], [0, 0, 0], [1, 0, 0], [-3, 2, 9]])
    grid = VoxelGrid.from_coords(coords, GridConfig())
    np.testing.assert_array_equal(grid.coords, [[-3, 2, 9], [0, 0, 0], [0, 0, 1], [1, 0, 0]])


def test_index_of_inverts_coords_across_blocks():
    grid = cube_grid(size=5, block_size=2, offset=(-2, -2, -2))
    np.testing.assert_array_equal(grid.index_of(grid.coords), np.arange(grid.n_active))
    np.testing.assert_array_equal(grid.index_of([[10, 0, 0], [-3, 0, 0]]), [-1, -1])


@pytest.mark.parametrize(
    "stencil, expected", [(Stencil.six, 12), (Stencil.eighteen, 24), (Stencil.twenty_six, 28)]
)
def test_edge_counts_on_unit_cube(stencil, expected):
    edges = neighbor_edges(cube_grid(), stencil)
    assert len(edges) == expected
    assert np.all(edges.i < edges.j)
    pairs = set(zip(edges.i.tolist(), edges.j.tolist()))
    assert len(pairs) == expected


def test_inverse_distance_weights():
    edges = neighbor_edges(cube_grid(), Stencil.twenty_six, WeightScheme.inverse_distance)
    steps = np.abs(cube_grid().coords[edges.i] - cube_grid().coords[edges.j]).sum(axis=1)
    np.testing.assert_allclose(edges.w, 1.0 / np.sqrt(steps))


def test_edges_only_between_active_nodes():
    grid = VoxelGrid.from_coords(np.array([[0, 0, 0], [0, 0, 2]]), GridConfig())
    assert len(neighbor_edges(grid)) == 0


def test_stencil_at_cell_center_is_uniform():
    grid = cube_grid()
    center = voxel_to_world([0.5, 0.5, 0.5], grid.config)
    row = trilinear_stencil(center, grid)
    assert len(row) == 8
    assert sorted(i for i, _ in row) == list(range(8))
    np.testing.assert_allclose([w for _, w in row], 0.125)


def test_stencil_on_a_node_is_that_node():
    grid = cube_grid(size=3)
    p = voxel_to_world([1.0, 0.0, 2.0], grid.config)
    assert trilinear_stencil(p, grid) == [(int(grid.index_of([[1, 0, 2]])[0]), 1.0)]


def test_partial_cell_renormalizes_weights():
    grid = cube_grid()
    keep = np.any(grid.coords != [1, 1, 1], axis=1)
    grid = grid.subset(keep)
    row = trilinear_stencil(voxel_to_world([0.5, 0.5, 0.5], grid.config), grid)
    assert len(row) == 7
    np.testing.assert_allclose([w for _, w in row], 1.0 / 7.0)


def test_too_few_corners_is_outside_band():
    grid = VoxelGrid.from_coords(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]), GridConfig())
    with pytest.raises(OutsideBand):
        trilinear_stencil(voxel_to_world([0.5, 0.5, 0.5], grid.config), grid)
    _, _, ok = trilinear_stencils(voxel_to_world([[0.5, 0.5, 0.5], [40.0, 0.0, 0.0]], grid.config), grid)
    assert not ok.any()


def test_interpolation_reproduces_affine_fields():
    grid = cube_grid(size=3)
    pos = grid.positions()
    values = 2.0 * pos[:, 0] - pos[:, 1] + 0.5 * pos[:, 2] + 0.1
    rng = np.random.default_rng(1)
    pts = voxel_to_world(rng.random((50, 3)) * 2.0, grid.config)
    expected = 2.0 * pts[:, 0] - pts[:, 1] + 0.5 * pts[:, 2] + 0.1
    np.testing.assert_allclose(interpolate(pts, grid, values), expected, atol=1e-12)


def test_interpolation_outside_band_is_nan():
    grid = cube_grid()
    out = interpolate(np.array([[1.0, 1.0, 1.0]]), grid, np.zeros(grid.n_active))
    assert np.isnan(out[0])


def layered_volume(block_size: int, weights=None) -> TsdfVolume:
    cfg = GridConfig(voxel_size=0.01, block_size=block_size)
    values = np.broadcast_to(((np.arange(4) - 1.5) * 0.01)[:, None, None], (4, 4, 4)).copy()
    weights = np.ones((4, 4, 4)) if weights is None else weights
    return TsdfVolume.from_dense(values, weights, cfg, tau=0.01)


def test_narrow_band_selects_by_value():
    assert activate_narrow_band(layered_volume(8), alpha=1.0).n_active == 32
    assert activate_narrow_band(layered_volume(8), alpha=2.0).n_active == 64


def test_narrow_band_ignores_unobserved_voxels():
    weights = np.ones((4, 4, 4))
    weights[1] = 0.0
    grid = activate_narrow_band(layered_volume(8, weights), alpha=1.0)
    assert grid.n_active == 16
    assert np.all(grid.coords[:, 0] == 2)


def test_narrow_band_independent_of_block_size():
    small = activate_narrow_band(layered_volume(2), alpha=1.0)
    large = activate_narrow_band(layered_volume(8), alpha=1.0)
    np.testing.assert_array_equal(small.coords, large.coords)


def test_narrow_band_rejects_alpha_out_of_range():
    with pytest.raises(ValueError):
        activate_narrow_band(layered_volume(8), alpha=0.5)


def test_empty_band():
    with pytest.raises(EmptyBand):
        activate_narrow_band(layered_volume(8, np.zeros((4, 4, 4))))

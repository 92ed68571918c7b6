import numpy as np
import pytest

from decsr import simplicial as S


def test_single_right_triangle_counts_and_area():
    K = S.build_complex([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    assert K.num == {0: 3, 1: 3, 2: 1}
    assert K.primal_volume[2][0] == pytest.approx(0.5)
    assert np.allclose(K.circumcenters[2][0], [0.5, 0.5])
    assert set(S.boundary_nodes(K)) == {0, 1, 2}


def test_edge_boundary_column_signs():
    K = S.build_complex([[0.0], [1.0]], [(0, 1)])
    col = K.boundary[1].toarray().ravel()
    assert col[0] == -1.0 and col[1] == 1.0


def test_two_triangle_square_dd_zero_exact():
    K = S.build_complex([(0, 0), (1, 0), (0, 1), (1, 1)],
                        [(0, 1, 2), (1, 3, 2)])
    dd = (K.boundary_int[1] @ K.boundary_int[2]).toarray()
    assert np.abs(dd).max() == 0


def test_dd_zero_on_random_meshes():
    for seed in (1, 2, 3):
        K = S.unit_square_mesh(80, seed=seed)
        dd = (K.boundary_int[1] @ K.boundary_int[2]).toarray()
        assert np.abs(dd).max() == 0


def test_interval_mesh_11_nodes(rod_mesh):
    K = rod_mesh
    assert K.num == {0: 11, 1: 10}
    assert np.allclose(K.primal_volume[1], 0.1)
    assert K.dual_volume[0][0] == pytest.approx(0.05)
    assert K.dual_volume[0][-1] == pytest.approx(0.05)
    assert np.allclose(K.dual_volume[0][1:-1], 0.1)
    assert set(S.boundary_nodes(K)) == {0, 10}


def test_interval_mesh_edge_cases():
    K2 = S.interval_mesh(2)
    assert K2.num == {0: 2, 1: 1}
    assert K2.primal_volume[1][0] == pytest.approx(1.0)
    K3 = S.interval_mesh(3)
    assert K3.boundary[1].shape == (3, 2)
    with pytest.raises(S.MeshError):
        S.interval_mesh(1)


def test_unit_square_corners_only():
    K = S.unit_square_mesh(4, seed=0)
    assert K.num_nodes == 4
    assert K.num[2] == 2
    assert K.primal_volume[2].sum() == pytest.approx(1.0)


def test_unit_square_230(square_mesh):
    K = square_mesh
    assert 207 <= K.num_nodes <= 253
    assert S.delaunay_violations(K) == 0
    # dual vertex cells partition the square (compare against the
    # independently computed triangle-area total)
    tris = K.simplices[2]
    p = K.node_coords
    areas = 0.5 * np.abs(
        (p[tris[:, 1], 0] - p[tris[:, 0], 0]) * (p[tris[:, 2], 1] - p[tris[:, 0], 1])
        - (p[tris[:, 1], 1] - p[tris[:, 0], 1]) * (p[tris[:, 2], 0] - p[tris[:, 0], 0]))
    assert abs(K.dual_volume[0].sum() - areas.sum()) < 1e-12
    assert abs(K.dual_volume[0].sum() - 1.0) < 1e-12


def test_unit_square_determinism():
    a = S.unit_square_mesh(230, seed=12)
    b = S.unit_square_mesh(230, seed=12)
    assert np.array_equal(a.node_coords, b.node_coords)
    assert np.array_equal(a.simplices[2], b.simplices[2])


def test_boundary_nodes_on_square_edges(square_mesh):
    K = square_mesh
    bn = S.boundary_nodes(K)
    c = K.node_coords[bn]
    on_edge = (np.isclose(c[:, 0], 0, atol=1e-12) | np.isclose(c[:, 0], 1, atol=1e-12)
               | np.isclose(c[:, 1], 0, atol=1e-12) | np.isclose(c[:, 1], 1, atol=1e-12))
    assert on_edge.all()


def test_volume_partition_all_degrees(square_mesh, rod_mesh):
    # sum of |simplex| x |dual| equals binomial(n, p) x total volume
    from math import comb
    for K in (square_mesh, rod_mesh):
        total = K.total_volume()
        for p in range(K.dim + 1):
            prod = (K.primal_volume[p] * K.dual_volume[p]).sum()
            assert prod == pytest.approx(comb(K.dim, p) * total, abs=1e-12)


def test_degenerate_simplex_rejected():
    with pytest.raises(S.MeshError, match="degenerate"):
        S.build_complex([(0, 0), (1, 0), (2, 0)], [(0, 1, 2)])
    with pytest.raises(S.MeshError, match="duplicate"):
        S.build_complex([(0, 0), (1, 0), (0, 1)], [(0, 1, 2), (2, 0, 1)])
    with pytest.raises(S.MeshError):
        S.build_complex([(0, 0), (1, 0)], [(0, 5)])


def test_non_delaunay_policy():
    # two skinny triangles over a shared edge: each opposite vertex lies
    # inside the other's circumcircle
    pts = [(0, 0), (1, 0), (0.5, 0.08), (0.5, -0.08)]
    tops = [(0, 1, 2), (0, 1, 3)]
    with pytest.raises(S.NonDelaunayError):
        S.build_complex(pts, tops)
    K = S.build_complex(pts, tops, allow_non_delaunay=True)
    assert K.dual_volume[1].min() < 0  # signed dual volumes kept


def test_orientation_positive():
    K = S.unit_square_mesh(30, seed=2)
    tris = K.simplices[2]
    p = K.node_coords
    det = ((p[tris[:, 1], 0] - p[tris[:, 0], 0]) * (p[tris[:, 2], 1] - p[tris[:, 0], 1])
           - (p[tris[:, 1], 1] - p[tris[:, 0], 1]) * (p[tris[:, 2], 0] - p[tris[:, 0], 0]))
    assert np.all(det * K.orientation > 0)


def test_mesh_file_roundtrip(tmp_path, square_mesh):
    path = tmp_path / "mesh.txt"
    S.write_mesh(square_mesh, path)
    K = S.read_mesh(path)
    assert np.array_equal(K.node_coords, square_mesh.node_coords)
    assert np.array_equal(K.simplices[2], square_mesh.simplices[2])
    # writing again is byte-identical
    path2 = tmp_path / "mesh2.txt"
    S.write_mesh(K, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_mesh_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("dim 3\nnodes 0\ncells 0\n")
    with pytest.raises(S.MeshError):
        S.read_mesh(bad)

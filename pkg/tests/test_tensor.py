import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsr import tensor
from spsr.errors import ContractError

from conftest import random_sps


def full_grid(h, w):
    return [(y, x) for y in range(h) for x in range(w)]


class TestFromDense:
    def test_fully_active(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 3, 3)))
        s = tensor.from_dense(d, full_grid(3, 3))
        assert s.n_active == 9 and s.n_passive == 0
        assert sorted(s.index_map.ravel().tolist()) == list(range(9))

    def test_fully_passive(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 3, 3)))
        s = tensor.from_dense(d, [])
        assert s.n_active == 0 and s.n_passive == 9

    def test_mixed_multiplicities(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 3, 3)))
        s = tensor.from_dense(d, [(0, 0), (0, 2), (1, 1), (2, 2)])
        counts = np.bincount(s.index_map.ravel(), minlength=9)
        assert s.n_active == 4 and s.n_passive == 5
        assert np.all(counts[:4] == 1) and np.all(counts[4:] >= 1)

    def test_out_of_range_cell_rejected(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 3, 3)))
        with pytest.raises(ContractError):
            tensor.from_dense(d, [(3, 0)])

    def test_active_rows_row_major(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((3, 4, 4)))
        s = tensor.from_dense(d, [(2, 1), (0, 3), (1, 0)])
        # canonical order: (0,3), (1,0), (2,1)
        np.testing.assert_array_equal(s.active[0], d.features[:, 0, 3])
        np.testing.assert_array_equal(s.active[1], d.features[:, 1, 0])
        np.testing.assert_array_equal(s.active[2], d.features[:, 2, 1])


class TestToDense:
    def test_roundtrip_exact(self, rng):
        for _ in range(20):
            d, s = random_sps(rng)
            np.testing.assert_array_equal(tensor.to_dense(s).features, d.features)

    def test_duplicated_passive_appears_everywhere(self):
        # one active row, one passive row shared by three cells
        s = tensor.SpsTensor(active=[[1.0]], passive=[[5.0]],
                             index_map=[[0, 1], [1, 1]])
        dense = tensor.to_dense(s).features
        assert dense[0, 0, 0] == 1.0
        assert dense[0, 0, 1] == dense[0, 1, 0] == dense[0, 1, 1] == 5.0

    def test_empty_active_set(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 4, 5)))
        s = tensor.from_dense(d, [])
        np.testing.assert_array_equal(tensor.to_dense(s).features, d.features)


class TestInvariants:
    def test_active_exactly_once_rejected(self):
        with pytest.raises(ContractError):
            tensor.SpsTensor(active=[[1.0], [2.0]], passive=np.zeros((0, 1)),
                             index_map=[[0, 0], [1, 1]])

    def test_unreferenced_passive_rejected(self):
        with pytest.raises(ContractError):
            tensor.SpsTensor(active=[[1.0]], passive=[[2.0], [3.0]],
                             index_map=[[0, 1], [1, 1]])

    def test_out_of_range_index_rejected(self):
        with pytest.raises(ContractError):
            tensor.SpsTensor(active=[[1.0]], passive=[[2.0]],
                             index_map=[[0, 5], [1, 1]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6),
           st.randoms(use_true_random=False))
    def test_roundtrip_property(self, h, w, f, py_rng):
        rng = np.random.default_rng(py_rng.getrandbits(32))
        dense = tensor.DenseTensor(rng.standard_normal((f, h, w)))
        n = int(rng.integers(0, h * w + 1))
        cells = [(y, x) for y in range(h) for x in range(w)]
        chosen = [cells[i] for i in rng.permutation(h * w)[:n]]
        s = tensor.from_dense(dense, chosen)
        assert s.n_active == n
        np.testing.assert_array_equal(tensor.to_dense(s).features, dense.features)


class TestGatherNeighborhood:
    OFFSETS_3X3 = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]

    def test_center_full_grid(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 3, 3)))
        s = tensor.from_dense(d, full_grid(3, 3))
        rows = tensor.gather_neighborhood(s, (1, 1), self.OFFSETS_3X3)
        assert rows.shape == (9, 2)
        for i, (dy, dx) in enumerate(self.OFFSETS_3X3):
            np.testing.assert_array_equal(rows[i], d.features[:, 1 + dy, 1 + dx])

    def test_corner_zero_padding(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 3, 3)))
        s = tensor.from_dense(d, full_grid(3, 3))
        rows = tensor.gather_neighborhood(s, (0, 0), self.OFFSETS_3X3)
        n_zero = sum(1 for r in rows if np.all(r == 0.0))
        assert n_zero == 5  # enumerated: 5 of 9 offsets leave the grid

    def test_dilation_2_matches_dense_oracle(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((3, 5, 5)))
        s = tensor.from_dense(d, full_grid(5, 5))
        offsets = [(dy, dx) for dy in (-2, 0, 2) for dx in (-2, 0, 2)]
        rows = tensor.gather_neighborhood(s, (2, 2), offsets)
        for i, (dy, dx) in enumerate(offsets):
            np.testing.assert_array_equal(rows[i], d.features[:, 2 + dy, 2 + dx])

    def test_passive_cell_rejected(self, rng):
        d = tensor.DenseTensor(rng.standard_normal((2, 3, 3)))
        s = tensor.from_dense(d, [(0, 0)])
        with pytest.raises(ContractError):
            tensor.gather_neighborhood(s, (1, 1), self.OFFSETS_3X3)

    def test_sparse_gather_equals_dense_gather(self, rng):
        # randomized equivalence against direct dense indexing with zero pad
        for _ in range(1000):
            d, s = random_sps(rng)
            if s.n_active == 0:
                continue
            coords = s.active_coords()
            y, x = coords[rng.integers(len(coords))]
            offsets = [(int(dy), int(dx)) for dy, dx in rng.integers(-3, 4, size=(5, 2))]
            rows = tensor.gather_neighborhood(s, (y, x), offsets)
            for i, (dy, dx) in enumerate(offsets):
                ny, nx = y + dy, x + dx
                if 0 <= ny < s.h and 0 <= nx < s.w:
                    np.testing.assert_array_equal(rows[i], d.features[:, ny, nx])
                else:
                    assert np.all(rows[i] == 0.0)


class TestSubdivide:
    def test_identity_children_copy_parent(self, rng):
        d, s = random_sps(rng, h=4, w=4, f=3)
        out = tensor.subdivide(s, [lambda r: r] * 4)
        up = np.repeat(np.repeat(tensor.to_dense(s).features, 2, axis=1), 2, axis=2)
        np.testing.assert_array_equal(tensor.to_dense(out).features, up)

    def test_hand_enumerated_1x2(self):
        s = tensor.SpsTensor(active=[[1.0]], passive=[[9.0]], index_map=[[0, 1]])
        out = tensor.subdivide(s, [lambda r, i=i: r + i for i in range(4)])
        assert out.n_active == 4 and out.n_passive == 1
        np.testing.assert_array_equal(out.index_map, [[0, 1, 4, 4], [2, 3, 4, 4]])
        np.testing.assert_array_equal(out.active.ravel(), [1.0, 2.0, 3.0, 4.0])
        assert np.count_nonzero(out.index_map == 4) == 4

    def test_distinct_child_transforms_in_order(self, rng):
        d, s = random_sps(rng, h=2, w=2, f=2, n_active=4)
        mats = [rng.standard_normal((2, 2)) for _ in range(4)]
        out = tensor.subdivide(s, [lambda r, m=m: r @ m.T for m in mats])
        dense_in = tensor.to_dense(s).features
        dense_out = tensor.to_dense(out).features
        for y in range(2):
            for x in range(2):
                parent = dense_in[:, y, x]
                for c, m in enumerate(mats):
                    i, j = divmod(c, 2)
                    np.testing.assert_allclose(dense_out[:, 2 * y + i, 2 * x + j], m @ parent)

    def test_passive_storage_constant(self, rng):
        for _ in range(10):
            _, s = random_sps(rng)
            out = tensor.subdivide(s, [lambda r: r] * 4)
            assert out.n_passive == s.n_passive
            assert out.n_active == 4 * s.n_active
            np.testing.assert_array_equal(out.passive, s.passive)

    def test_wrong_arity_rejected(self, rng):
        _, s = random_sps(rng, h=2, w=2, f=2)
        with pytest.raises(ContractError):
            tensor.subdivide(s, [lambda r: r] * 3)


class TestReselect:
    def test_new_split_invariants(self, rng):
        for _ in range(30):
            _, s = random_sps(rng)
            n = int(rng.integers(0, s.h * s.w + 1))
            cells = [(y, x) for y in range(s.h) for x in range(s.w)]
            chosen = [cells[i] for i in rng.permutation(s.h * s.w)[:n]]
            out = tensor.reselect(s, chosen)
            assert out.n_active == n
            np.testing.assert_array_equal(tensor.to_dense(out).features,
                                          tensor.to_dense(s).features)

    def test_duplicated_passive_splits(self):
        s = tensor.SpsTensor(active=[[1.0]], passive=[[5.0]],
                             index_map=[[0, 1], [1, 1]])
        out = tensor.reselect(s, [(0, 1)])
        # the shared passive row: one copy becomes active, two cells keep sharing
        assert out.n_active == 1 and out.n_passive == 2
        np.testing.assert_array_equal(tensor.to_dense(out).features,
                                      tensor.to_dense(s).features)

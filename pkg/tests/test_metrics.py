import numpy as np
import pytest
import torch
from scipy import ndimage

from reglab.core import DisplacementField, LabelMap, ShapeError, identity_grid
from reglab.metrics import (
    MetricsReport,
    aggregate,
    brain_mask,
    dice_score,
    evaluate_pair,
    hd90,
    jacobian_map,
    mean_displacement,
    ndv_pct,
    sdlogj,
)

from conftest import smooth_field


def labelmap(arr):
    return LabelMap(torch.as_tensor(np.asarray(arr), dtype=torch.long))


def affine_field(n, a, b, c):
    data = torch.zeros(n, n, n, 3)
    coords = torch.arange(n, dtype=torch.float32)
    data[..., 0] = a * coords.view(n, 1, 1)
    data[..., 1] = b * coords.view(1, n, 1)
    data[..., 2] = c * coords.view(1, 1, n)
    return DisplacementField(data, 0)


class TestDiceScore:
    def test_identical(self):
        arr = np.zeros((6, 6, 6), dtype=int)
        arr[1:3, 1:3, 1:3] = 1
        arr[3:5, 3:5, 3:5] = 2
        a = labelmap(arr)
        assert dice_score(a, labelmap(arr.copy())) == 1.0

    def test_disjoint(self):
        a = np.zeros((6, 6, 6), dtype=int)
        b = np.zeros((6, 6, 6), dtype=int)
        a[:3], b[3:] = 1, 1
        assert dice_score(labelmap(a), labelmap(b)) == 0.0

    def test_overlap_slab_oracle(self):
        a = np.zeros((8, 8, 8), dtype=int)
        b = np.zeros((8, 8, 8), dtype=int)
        a[0:4, 0:4, 0:4] = 1
        b[0:4, 0:4, 2:6] = 1  # overlap 4x4x2 = 32 voxels
        assert dice_score(labelmap(a), labelmap(b)) == pytest.approx(2 * 32 / 128)

    @pytest.mark.parametrize("seed", range(3))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = labelmap(rng.integers(0, 4, (6, 6, 6)))
        b = labelmap(rng.integers(0, 4, (6, 6, 6)))
        assert dice_score(a, b) == dice_score(b, a)

    def test_label_absent_from_both_skipped(self):
        a = np.zeros((4, 4, 4), dtype=int)
        b = np.zeros((4, 4, 4), dtype=int)
        a[:2], b[:2] = 3, 3  # only label 3; nothing else contributes
        assert dice_score(labelmap(a), labelmap(b)) == 1.0


class TestHD90:
    def test_identical_is_zero(self):
        arr = np.zeros((6, 6, 6), dtype=int)
        arr[2:4, 2:4, 2:4] = 1
        assert hd90(labelmap(arr), labelmap(arr.copy())) == 0.0

    def test_unit_cubes_offset_by_two(self):
        a = np.zeros((8, 8, 8), dtype=int)
        b = np.zeros((8, 8, 8), dtype=int)
        a[2, 2, 2] = 1
        b[4, 2, 2] = 1
        assert hd90(labelmap(a), labelmap(b)) == pytest.approx(2.0)

    def test_matches_exhaustive_pairwise_oracle(self):
        rng = np.random.default_rng(4)
        a = np.zeros((8, 8, 8), dtype=int)
        b = np.zeros((8, 8, 8), dtype=int)
        a[1:5, 1:5, 1:5] = 1
        b[2:7, 2:6, 1:4] = 1
        got = hd90(labelmap(a), labelmap(b))

        def boundary(m):
            return m & ~ndimage.binary_erosion(m)

        pa = np.argwhere(boundary(a == 1))
        pb = np.argwhere(boundary(b == 1))
        d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
        pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
        assert got == pytest.approx(np.percentile(pooled, 90), abs=1e-9)

    def test_percentile_convention(self):
        # linear-interpolation percentile rule used throughout
        assert np.percentile(np.arange(10.0), 90) == pytest.approx(8.1)

    def test_label_in_one_map_scores_diagonal_with_warning(self):
        a = np.zeros((8, 8, 8), dtype=int)
        b = np.zeros((8, 8, 8), dtype=int)
        a[2:4, 2:4, 2:4] = 1
        with pytest.warns(UserWarning):
            got = hd90(labelmap(a), labelmap(b))
        assert got == pytest.approx(np.sqrt(3 * 7**2))


class TestJacobian:
    def test_zero_field_all_ones(self):
        jac = jacobian_map(identity_grid((6, 6, 6)))
        assert np.all(jac == 1.0)

    def test_affine_closed_form(self):
        a, b, c = 0.125, -0.25, 0.0625
        jac = jacobian_map(affine_field(8, a, b, c))
        expected = (1 + a) * (1 + b) * (1 + c)
        np.testing.assert_allclose(jac[1:-1, 1:-1, 1:-1], expected, atol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_per_voxel_det_loop(self, seed):
        f = smooth_field(6, seed=seed, amplitude=1.0)
        jac = jacobian_map(f)
        phi = f.data.numpy().astype(np.float64)
        for x in range(1, 5):
            for y in range(1, 5):
                for z in range(1, 5):
                    J = np.eye(3)
                    for c in range(3):
                        J[c, 0] += (phi[x + 1, y, z, c] - phi[x - 1, y, z, c]) / 2
                        J[c, 1] += (phi[x, y + 1, z, c] - phi[x, y - 1, z, c]) / 2
                        J[c, 2] += (phi[x, y, z + 1, c] - phi[x, y, z - 1, c]) / 2
                    assert jac[x, y, z] == pytest.approx(np.linalg.det(J), abs=1e-6)

    def test_requires_level_zero(self):
        with pytest.raises(ShapeError):
            jacobian_map(identity_grid((4, 4, 4), level=1))


def full_mask(n):
    return np.ones((n, n, n), dtype=bool)


class TestSDlogJ:
    def test_identity_exactly_zero(self):
        jac = jacobian_map(identity_grid((6, 6, 6)))
        assert sdlogj(jac, full_mask(6)) == 0.0

    def test_uniform_affine_zero(self):
        jac = jacobian_map(affine_field(8, 0.125, -0.25, 0.0625))
        assert sdlogj(jac, full_mask(8)) == pytest.approx(0.0, abs=1e-9)

    def test_two_region_closed_form(self):
        jac = np.ones((4, 4, 4))
        jac[:2] = np.e
        jac[2:] = 1 / np.e
        assert sdlogj(jac, full_mask(4)) == pytest.approx(1.0, abs=1e-12)

    def test_empty_mask_rejected(self):
        jac = np.ones((4, 4, 4))
        with pytest.raises(ValueError):
            sdlogj(jac, np.zeros((4, 4, 4), dtype=bool))


class TestNDV:
    def test_identity_zero(self):
        f = identity_grid((6, 6, 6))
        assert ndv_pct(f, full_mask(6), "simplex") == 0.0
        assert ndv_pct(f, full_mask(6), "central") == 0.0

    def test_folding_field_everywhere(self):
        f = affine_field(6, -2.0, 0.0, 0.0)  # det = -1 at every voxel
        assert ndv_pct(f, full_mask(6), "simplex") == 100.0
        assert ndv_pct(f, full_mask(6), "central") == 100.0

    @pytest.mark.parametrize("seed", range(3))
    def test_small_smooth_field_has_no_folding(self, seed):
        f = smooth_field(8, seed=seed, amplitude=0.4)
        # max forward difference < 0.5 keeps the Jacobian diagonally dominant
        for axis in range(3):
            assert np.abs(np.diff(f.data.numpy(), axis=axis)).max() < 0.5
        assert ndv_pct(f, full_mask(8), "simplex") == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_simplex_at_least_central(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.uniform(-1.6, 1.6, (8, 8, 8, 3))
        f = DisplacementField(torch.from_numpy(data).float(), 0)
        mask = full_mask(8)
        assert ndv_pct(f, mask, "simplex") >= ndv_pct(f, mask, "central")


class TestReportPlumbing:
    def test_mean_displacement(self):
        data = torch.zeros(4, 4, 4, 3)
        data[..., 0], data[..., 1] = 1.0, 2.0
        f = DisplacementField(data, 0)
        assert mean_displacement(f, full_mask(4)) == pytest.approx(np.sqrt(5))

    def test_evaluate_pair_and_aggregate(self):
        arr = np.zeros((8, 8, 8), dtype=int)
        arr[2:6, 2:6, 2:6] = 1
        lt = labelmap(arr)
        pm = evaluate_pair(lt, labelmap(arr.copy()), identity_grid((8, 8, 8)))
        assert pm.dsc == 1.0 and pm.hd90 == 0.0
        assert pm.sdlogj == 0.0 and pm.ndv_pct == 0.0
        report = aggregate([pm, pm])
        assert report.n_pairs == 2
        assert report.dsc == (1.0, 0.0)

    def test_brain_mask_is_label_union(self):
        arr = np.zeros((4, 4, 4), dtype=int)
        arr[0] = 1
        arr[2] = 3
        mask = brain_mask(labelmap(arr))
        assert mask.sum() == 32

    def test_report_validation(self):
        with pytest.raises(ValueError):
            MetricsReport(dsc=(1.2, 0.0), hd90=(0, 0), sdlogj=(0, 0),
                          ndv_pct=(0, 0), ndv_pct_central=(0, 0),
                          mean_disp=(0, 0), n_pairs=1)

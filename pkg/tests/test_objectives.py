import numpy as np
import pytest
import torch

from reglab.core import DisplacementField, LabelMap, Volume, identity_grid
from reglab.objectives import (
    LossWeights,
    dice_loss,
    lncc_loss,
    mse_loss,
    one_hot_labels,
    similarity_loss,
    smoothness_loss,
    total_loss,
    warp_channels,
)

from conftest import blob_volume, smooth_field


def lncc_loop_oracle(a, b, window=9, eps=1e-8):
    """Windowed Pearson correlation oracle with border-clipped windows."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    h, w, d = a.shape
    r = window // 2
    ccs = np.zeros_like(a)
    for x in range(h):
        for y in range(w):
            for z in range(d):
                sl = (
                    slice(max(0, x - r), min(h, x + r + 1)),
                    slice(max(0, y - r), min(w, y + r + 1)),
                    slice(max(0, z - r), min(d, z + r + 1)),
                )
                wa, wb = a[sl].ravel(), b[sl].ravel()
                cross = (wa * wb).mean() - wa.mean() * wb.mean()
                va = max((wa * wa).mean() - wa.mean() ** 2, 0.0)
                vb = max((wb * wb).mean() - wb.mean() ** 2, 0.0)
                ccs[x, y, z] = cross / np.sqrt(va * vb + eps)
    return 1.0 - ccs.mean()


class TestSimilarity:
    def test_identical_images_score_zero(self):
        v = blob_volume(8, seed=1)
        assert lncc_loss(v, v).item() == pytest.approx(0.0, abs=1e-4)
        assert mse_loss(v, v).item() == 0.0

    def test_negative_image_scores_two(self):
        v = blob_volume(8, seed=2)
        neg = Volume(1.0 - v.data)
        assert lncc_loss(v, neg).item() == pytest.approx(2.0, abs=1e-3)

    @pytest.mark.parametrize("seed", [3, 4])
    def test_lncc_matches_window_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0, 1, (8, 8, 8))
        b = rng.uniform(0, 1, (8, 8, 8))
        got = lncc_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert got == pytest.approx(lncc_loop_oracle(a, b), abs=1e-5)

    def test_mse_matches_direct(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, (6, 6, 6))
        b = rng.uniform(0, 1, (6, 6, 6))
        got = mse_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert got == pytest.approx(((a - b) ** 2).mean(), abs=1e-12)

    def test_kind_dispatch(self):
        v = blob_volume(8, seed=6)
        assert similarity_loss(v, v, "mse").item() == 0.0
        with pytest.raises(Exception):
            similarity_loss(v, v, "ssim")


def cube_labels(n=8, lo=0, hi=4):
    data = torch.zeros(n, n, n, dtype=torch.long)
    data[lo:hi, lo:hi, lo:hi] = 1
    return LabelMap(data)


class TestDiceLoss:
    def test_perfect_match(self):
        lm = cube_labels()
        oh = one_hot_labels(lm)
        assert dice_loss(lm, oh).item() == pytest.approx(0.0, abs=1e-4)

    def test_disjoint_labels(self):
        a = cube_labels(8, 0, 4)
        b = cube_labels(8, 4, 8)
        assert dice_loss(a, one_hot_labels(b)).item() == pytest.approx(1.0, abs=1e-3)

    def test_half_overlapping_cubes(self):
        a = cube_labels(8, 0, 4)  # 64 voxels
        b = LabelMap(torch.zeros(8, 8, 8, dtype=torch.long))
        b.data[0:4, 0:4, 2:6] = 1  # overlap 4x4x2 = 32 voxels
        assert dice_loss(a, one_hot_labels(b)).item() == pytest.approx(0.5, abs=1e-3)

    def test_channel_mismatch_rejected(self):
        a = cube_labels()
        with pytest.raises(Exception):
            dice_loss(a, torch.zeros(2, 8, 8, 8))


class TestSmoothness:
    def test_constant_field_is_zero(self):
        f = DisplacementField(torch.full((6, 6, 6, 3), 1.75), 0)
        assert smoothness_loss(f).item() == 0.0

    def test_linear_ramp_closed_form(self):
        a = 0.25
        data = torch.zeros(8, 8, 8, 3)
        data[..., 0] = a * torch.arange(8.0).view(8, 1, 1)
        assert smoothness_loss(DisplacementField(data, 0)).item() == pytest.approx(a**2, abs=1e-7)

    def test_matches_nested_difference_oracle(self):
        rng = np.random.default_rng(7)
        data = rng.standard_normal((6, 6, 6, 3))
        got = smoothness_loss(torch.from_numpy(data)).item()
        expected = 0.0
        for axis in range(3):
            diff = np.diff(data, axis=axis)
            expected += (diff**2).reshape(-1, 3).mean(axis=0).sum()
        assert got == pytest.approx(expected, abs=1e-6)


def field_pyramid(n=16, amplitude=0.0, seed=0):
    """Per-level fields [4,3,2,1] with extents matching ceil(n / 2^level)."""
    fields = []
    for level in (4, 3, 2, 1):
        ext = -(-n // 2**level)
        if amplitude == 0:
            f = identity_grid((ext, ext, ext), level=level)
        else:
            rng = np.random.default_rng(seed + level)
            data = rng.uniform(-amplitude, amplitude, (ext, ext, ext, 3))
            f = DisplacementField(torch.from_numpy(data).float(), level=level)
        fields.append(f)
    return fields


def labeled_pair(n=16, seed=0):
    t = blob_volume(n, seed=seed)
    s = blob_volume(n, seed=seed + 1)
    lt = LabelMap((t.data > 0.5).long() + (t.data > 0.75).long())
    ls = LabelMap((s.data > 0.5).long() + (s.data > 0.75).long())
    return t, s, lt, ls


class TestTotalLoss:
    def test_empty_per_level_reduces_to_single_term(self):
        t, s, lt, ls = labeled_pair()
        w = LossWeights()
        f = field_pyramid()[-1]
        total, b = total_loss(t, s, lt, ls, f, [], w)
        recomputed = b.similarity + w.gamma * b.dice + w.lam * b.smoothness
        assert total.item() == recomputed.item()
        assert b.aux == []

    def test_level4_scale_is_exactly_one_sixteenth(self):
        t, s, lt, ls = labeled_pair()
        fields = field_pyramid(amplitude=0.5, seed=3)
        _, b = total_loss(t, s, lt, ls, fields[-1], fields, LossWeights())
        assert [a.level for a in b.aux] == [4, 3, 2]
        a4 = b.aux[0]
        assert a4.scale == 2.0**-4
        assert a4.scaled.item() == (2.0**-4 * a4.unscaled).item()

    def test_zero_weights_leave_similarity_only(self):
        t, s, lt, ls = labeled_pair()
        f = field_pyramid(amplitude=0.5, seed=1)[-1]
        w = LossWeights(gamma=0.0, lam=0.0)
        total, b = total_loss(t, s, lt, ls, f, [], w)
        assert total.item() == b.similarity.item()

    def test_breakdown_sums_to_total_exactly(self):
        t, s, lt, ls = labeled_pair()
        fields = field_pyramid(amplitude=0.4, seed=5)
        w = LossWeights()
        total, b = total_loss(t, s, lt, ls, fields[-1], fields, w)
        recomputed = b.similarity + w.gamma * b.dice + w.lam * b.smoothness
        for a in b.aux:
            recomputed = recomputed + a.scaled
        assert total.item() == recomputed.item()

    def test_perfect_alignment_near_zero(self):
        t, _, lt, _ = labeled_pair()
        f = field_pyramid()[-1]
        total, b = total_loss(t, t, lt, lt, f, [], LossWeights())
        assert b.smoothness.item() == 0.0
        assert b.dice.item() == pytest.approx(0.0, abs=1e-4)
        assert total.item() == pytest.approx(0.0, abs=1e-3)

    def test_all_terms_nonnegative(self):
        t, s, lt, ls = labeled_pair(seed=11)
        fields = field_pyramid(amplitude=1.0, seed=13)
        _, b = total_loss(t, s, lt, ls, fields[-1], fields, LossWeights())
        assert b.similarity.item() >= 0
        assert b.dice.item() >= 0
        assert b.smoothness.item() >= 0
        for a in b.aux:
            assert a.similarity.item() >= 0 and a.smoothness.item() >= 0


@pytest.mark.parametrize("kind", ["lncc", "mse"])
def test_total_loss_gradient_matches_finite_differences(kind):
    torch.manual_seed(0)
    t, s, lt, ls = labeled_pair(8, seed=2)
    t = Volume(t.data.double())
    s = Volume(s.data.double())
    ext = 4  # level-1 extents for an 8^3 volume
    data = (torch.rand(ext, ext, ext, 3, dtype=torch.float64) - 0.5).requires_grad_(True)
    w = LossWeights(similarity_kind=kind)

    def loss_of(tensor):
        f = DisplacementField(tensor, level=1)
        return total_loss(t, s, lt, ls, f, [], w)[0]

    loss_of(data).backward()
    flat_grad = data.grad.flatten()
    base = data.detach().clone().flatten()
    rng = torch.Generator().manual_seed(3)
    for _ in range(6):
        idx = int(torch.randint(0, base.numel(), (1,), generator=rng))
        h = 1e-5
        xp, xm = base.clone(), base.clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (
            loss_of(xp.view(ext, ext, ext, 3)).item()
            - loss_of(xm.view(ext, ext, ext, 3)).item()
        ) / (2 * h)
        ag = flat_grad[idx].item()
        assert abs(ag - fd) <= 1e-3 * max(abs(ag), abs(fd), 1e-6), (idx, ag, fd)

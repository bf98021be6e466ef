import numpy as np
import pytest

from volmae.errors import ConfigError, DimensionError
from volmae.patchgrid import (
    PatchSpec,
    detokenize,
    flip_augment,
    kept_count,
    random_crop,
    sample_mask,
    sincos_pos_embed_3d,
    tokenize,
)
from volmae.volio import Volume

RNG = np.random.default_rng(7)

SMALL = PatchSpec((12, 8, 4), (4, 4, 2), channels=2)  # grid (3, 2, 2), 12 tokens


def small_patch(spec=SMALL) -> Volume:
    x, y, z = spec.mri_patch_dims
    return Volume(RNG.standard_normal((spec.channels, z, y, x)), (1, 1, 1))


class TestPatchSpec:
    def test_derived_quantities(self):
        assert SMALL.grid_shape == (3, 2, 2)
        assert SMALL.token_count == 12
        assert SMALL.token_dim == 2 * 4 * 4 * 2

    def test_paper_default_geometry(self):
        spec = PatchSpec()
        assert spec.grid_shape == (30, 21, 4)
        assert spec.token_count == 2520
        assert spec.token_dim == 256

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            PatchSpec((10, 8, 4), (4, 4, 2))


class TestTokenize:
    def test_roundtrip_is_bit_exact(self):
        patch = small_patch()
        grid = tokenize(patch, SMALL)
        back = detokenize(grid.tokens, SMALL, spacing=patch.spacing)
        np.testing.assert_array_equal(back.data, patch.data)

    def test_token_order_x_fastest(self):
        # encode the grid coordinate into the voxel value: value = ix + 10*iy + 100*iz
        x, y, z = SMALL.mri_patch_dims
        px, py, pz = SMALL.vit_patch_dims
        data = np.zeros((2, z, y, x))
        for zz in range(z):
            for yy in range(y):
                for xx in range(x):
                    data[:, zz, yy, xx] = (xx // px) + 10 * (yy // py) + 100 * (zz // pz)
        grid = tokenize(Volume(data, (1, 1, 1)), SMALL)
        gx, gy, gz = SMALL.grid_shape
        t = 0
        for iz in range(gz):
            for iy in range(gy):
                for ix in range(gx):
                    expected = ix + 10 * iy + 100 * iz
                    assert np.all(grid.tokens[t] == expected), (t, ix, iy, iz)
                    t += 1

    def test_token_layout_channel_slowest(self):
        # within one token the flattened layout is (c, z, y, x), x fastest
        spec = PatchSpec((4, 4, 2), (4, 4, 2), channels=2)
        x, y, z = spec.mri_patch_dims
        data = np.arange(2 * z * y * x, dtype=np.float64).reshape(2, z, y, x)
        grid = tokenize(Volume(data, (1, 1, 1)), spec)
        np.testing.assert_array_equal(grid.tokens[0], data.reshape(-1))

    def test_shape_mismatch_rejected(self):
        bad = Volume(np.zeros((2, 4, 8, 10)), (1, 1, 1))
        with pytest.raises(DimensionError):
            tokenize(bad, SMALL)

    def test_embed_dim_attaches_pos_embed(self):
        grid = tokenize(small_patch(), SMALL, embed_dim=12)
        assert grid.pos_embed.shape == (12, 12)


class TestPosEmbed:
    def test_shape_and_determinism(self):
        a = sincos_pos_embed_3d((3, 2, 2), 24)
        b = sincos_pos_embed_3d((3, 2, 2), 24)
        assert a.shape == (12, 24)
        np.testing.assert_array_equal(a, b)

    def test_distinct_positions_distinct_rows(self):
        e = sincos_pos_embed_3d((4, 3, 2), 24)
        for i in range(e.shape[0]):
            for j in range(i + 1, e.shape[0]):
                assert not np.allclose(e[i], e[j])

    def test_axis_groups(self):
        # rows varying only in x differ only in the first third of dims
        gx, gy, gz = 4, 3, 2
        d = 18
        e = sincos_pos_embed_3d((gx, gy, gz), d)
        third = d // 3
        t0 = 0              # (ix=0, iy=0, iz=0)
        t1 = 1              # (ix=1, iy=0, iz=0)
        assert not np.allclose(e[t0, :third], e[t1, :third])
        np.testing.assert_array_equal(e[t0, third:], e[t1, third:])

    @pytest.mark.parametrize("d", [0, 5, 16, -6])
    def test_dim_must_be_positive_multiple_of_six(self, d):
        with pytest.raises(ConfigError):
            sincos_pos_embed_3d((2, 2, 2), d)

    def test_values_bounded(self):
        e = sincos_pos_embed_3d((8, 7, 4), 144)
        assert np.all(np.abs(e) <= 1.0)


class TestMasking:
    def test_kept_count_formula(self):
        assert kept_count(224, 0.9) == 22
        assert kept_count(10, 0.99) == 1
        assert kept_count(10, 0.0) == 10
        assert kept_count(7, 0.5) == 4  # round(3.5) == 4 (banker's: round half to even)

    def test_partition_and_sorted(self):
        plan = sample_mask(100, 0.73, seed=5)
        assert len(plan.kept_indices) == kept_count(100, 0.73)
        merged = np.concatenate([plan.kept_indices, plan.masked_indices])
        np.testing.assert_array_equal(np.sort(merged), np.arange(100))
        assert np.all(np.diff(plan.kept_indices) > 0)
        assert np.all(np.diff(plan.masked_indices) > 0)

    def test_same_seed_same_plan(self):
        a = sample_mask(64, 0.9, seed=3)
        b = sample_mask(64, 0.9, seed=3)
        np.testing.assert_array_equal(a.kept_indices, b.kept_indices)

    def test_different_seeds_differ(self):
        a = sample_mask(64, 0.9, seed=3)
        b = sample_mask(64, 0.9, seed=4)
        assert not np.array_equal(a.kept_indices, b.kept_indices)

    def test_zero_ratio_keeps_everything(self):
        plan = sample_mask(12, 0.0, seed=0)
        np.testing.assert_array_equal(plan.kept_indices, np.arange(12))
        assert plan.masked_indices.size == 0

    @pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
    def test_ratio_range_enforced(self, ratio):
        with pytest.raises(ConfigError):
            sample_mask(10, ratio, seed=0)

    def test_generator_seed_accepted(self):
        rng = np.random.default_rng(11)
        plan = sample_mask(50, 0.8, rng)
        assert len(plan.kept_indices) == kept_count(50, 0.8)


class TestAugmentation:
    def test_random_crop_inside_bounds(self):
        vol = Volume(RNG.standard_normal((2, 6, 10, 14)), (1, 1, 1))
        for seed in range(20):
            patch, origin = random_crop(vol, SMALL, seed)
            ox, oy, oz = origin
            assert 0 <= ox <= 14 - 12 and 0 <= oy <= 10 - 8 and 0 <= oz <= 6 - 4
            assert patch.dims == SMALL.mri_patch_dims
            np.testing.assert_array_equal(
                patch.data, vol.data[:, oz:oz + 4, oy:oy + 8, ox:ox + 12]
            )

    def test_random_crop_deterministic(self):
        vol = Volume(RNG.standard_normal((2, 6, 10, 14)), (1, 1, 1))
        _, o1 = random_crop(vol, SMALL, 9)
        _, o2 = random_crop(vol, SMALL, 9)
        assert o1 == o2

    def test_crop_too_small_rejected(self):
        vol = Volume(RNG.standard_normal((2, 3, 10, 14)), (1, 1, 1))
        with pytest.raises(DimensionError):
            random_crop(vol, SMALL, 0)

    def test_flips_are_involutions(self):
        patch = small_patch()
        for cor, sag in [(True, False), (False, True), (True, True)]:
            twice = flip_augment(flip_augment(patch, cor, sag), cor, sag)
            np.testing.assert_array_equal(twice.data, patch.data)

    def test_flip_axes(self):
        patch = small_patch()
        cor = flip_augment(patch, True, False)
        np.testing.assert_array_equal(cor.data, patch.data[:, :, ::-1, :])
        sag = flip_augment(patch, False, True)
        np.testing.assert_array_equal(sag.data, patch.data[:, :, :, ::-1])

    def test_no_flip_returns_same_data(self):
        patch = small_patch()
        out = flip_augment(patch, False, False)
        np.testing.assert_array_equal(out.data, patch.data)

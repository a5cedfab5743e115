"""Operator samplers, projected transforms, noise placement, and E[P] stats."""

import numpy as np
import pytest

from scoreshift import (
    MeasurementDataset,
    MeasurementOperator,
    OperatorSampler,
    ProjectionStats,
    SpanViolation,
    add_diffusion_noise,
    dense_orthogonal_basis,
    estimate_projection_stats,
    fwht,
    hadamard_basis,
    identity_basis,
    lift,
    sample_operator,
    to_projected,
)
from scoreshift.measurements import BasisMismatch, RightBasis
from scoreshift.rng import stream
from tests.conftest import mask_sampler


class TestWalshHadamard:
    def test_self_inverse_and_orthonormal(self):
        rng = stream(0, "fwht")
        x = rng.standard_normal(64)
        np.testing.assert_allclose(fwht(fwht(x)), x, atol=1e-12)
        assert np.linalg.norm(fwht(x)) == pytest.approx(np.linalg.norm(x), abs=1e-10)

    def test_first_basis_vector_maps_to_constant(self):
        e0 = np.zeros(16)
        e0[0] = 1.0
        np.testing.assert_allclose(fwht(e0), np.full(16, 0.25), atol=1e-14)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError, match="power of two"):
            fwht(np.zeros(12))

    def test_batch_rows_transform_independently(self):
        rng = stream(1, "fwht-batch")
        batch = rng.standard_normal((5, 32))
        together = fwht(batch)
        for i in range(5):
            np.testing.assert_allclose(together[i], fwht(batch[i]), atol=1e-13)


class TestRightBasis:
    def test_identity_round_trip(self):
        b = identity_basis(8)
        x = np.arange(8.0)
        np.testing.assert_array_equal(b.forward(b.inverse(x)), x)

    def test_dense_round_trip_within_tolerance(self):
        b = dense_orthogonal_basis(12, seed=4)
        x = stream(2, "basis").standard_normal(12)
        np.testing.assert_allclose(b.forward(b.inverse(x)), x, atol=1e-10)
        assert np.linalg.norm(b.inverse(x)) == pytest.approx(np.linalg.norm(x), abs=1e-10)

    def test_dense_is_deterministic_in_seed(self):
        a = dense_orthogonal_basis(6, seed=9)
        b = dense_orthogonal_basis(6, seed=9)
        np.testing.assert_array_equal(a.matrix, b.matrix)
        assert a.basis_id == b.basis_id == "dense:6:9"

    def test_non_orthogonal_matrix_rejected(self):
        with pytest.raises(ValueError, match="orthogonal"):
            RightBasis(kind="dense", dim=3, matrix=np.ones((3, 3)))

    def test_hadamard_requires_power_of_two(self):
        with pytest.raises(ValueError):
            hadamard_basis(10)


class TestSampleOperator:
    def test_deterministic_in_seed_and_index(self):
        sampler = mask_sampler(dim=20, keep_prob=0.5, base_seed=3)
        a = sample_operator(sampler, 7)
        b = sample_operator(sampler, 7)
        np.testing.assert_array_equal(a.singular_values, b.singular_values)
        assert a.operator_id == b.operator_id
        c = sample_operator(sampler, 8)
        assert not np.array_equal(a.singular_values, c.singular_values)

    def test_full_keep_gives_identity_projection(self):
        sampler = mask_sampler(dim=12, keep_prob=1.0)
        op = sample_operator(sampler, 0)
        np.testing.assert_array_equal(op.projection_diag, np.ones(12))

    def test_patch_masks_keep_whole_patches(self):
        sampler = OperatorSampler(
            kind="patch-inpainting",
            dim=64,
            basis=identity_basis(64),
            base_seed=11,
            keep_prob=0.5,
            patch_edge=4,
        )
        op = sample_operator(sampler, 3)
        img = op.projection_diag.reshape(8, 8)
        for r in range(0, 8, 4):
            for c in range(0, 8, 4):
                block = img[r : r + 4, c : c + 4]
                assert block.min() == block.max()

    def test_patch_keep_rate_concentrates(self):
        sampler = OperatorSampler(
            kind="patch-inpainting",
            dim=64,
            basis=identity_basis(64),
            base_seed=11,
            keep_prob=0.5,
            patch_edge=4,
        )
        stats = estimate_projection_stats(sampler, 10**4)
        assert np.max(np.abs(stats.ep_diag - 0.5)) < 0.02

    def test_patch_edge_must_divide_image_edge(self):
        with pytest.raises(ValueError, match="divide"):
            OperatorSampler(
                kind="patch-inpainting",
                dim=64,
                basis=identity_basis(64),
                keep_prob=0.5,
                patch_edge=3,
            )

    def test_band_subsample_exact_counts(self):
        sampler = OperatorSampler(
            kind="band-subsample",
            dim=320,
            basis=identity_basis(320),
            base_seed=2,
            low_count=30,
            rand_count=50,
        )
        for idx in range(5):
            op = sample_operator(sampler, idx)
            assert int(op.support.sum()) == 80
            assert op.support[:30].all()

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            sample_operator(mask_sampler(), -1)


class TestToProjected:
    def test_identity_operator_passthrough(self):
        sampler = mask_sampler(dim=6, keep_prob=1.0)
        op = sample_operator(sampler, 0)
        x = np.arange(6.0)
        np.testing.assert_array_equal(to_projected(op, x).ybar, x)

    def test_zero_signal_gives_zero(self):
        op = sample_operator(mask_sampler(dim=6, keep_prob=0.5), 1)
        np.testing.assert_array_equal(to_projected(op, np.zeros(6)).ybar, np.zeros(6))

    def test_hand_evaluated_mask(self):
        op = MeasurementOperator(
            basis=identity_basis(4),
            singular_values=np.array([1.0, 0.0, 1.0, 0.0]),
            operator_id="manual:0",
        )
        meas = to_projected(op, np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(meas.ybar, [1.0, 0.0, 3.0, 0.0])

    def test_measurement_noise_only_on_support(self):
        op = MeasurementOperator(
            basis=identity_basis(4),
            singular_values=np.array([2.0, 0.0, 0.5, 0.0]),
            operator_id="manual:0",
        )
        meas = to_projected(op, np.zeros(4), sigma_z=0.3, rng=stream(3, "z"))
        assert meas.ybar[1] == 0.0 and meas.ybar[3] == 0.0
        assert meas.ybar[0] != 0.0 and meas.ybar[2] != 0.0

    def test_noise_scale_follows_singular_values(self):
        # std on coordinate i is sigma_z / s_i
        op = MeasurementOperator(
            basis=identity_basis(2),
            singular_values=np.array([2.0, 0.5]),
            operator_id="manual:0",
        )
        gen = stream(4, "zscale")
        draws = np.array(
            [to_projected(op, np.zeros(2), sigma_z=1.0, rng=gen).ybar for _ in range(4000)]
        )
        np.testing.assert_allclose(draws.std(axis=0), [0.5, 2.0], rtol=0.1)

    def test_dimension_mismatch(self):
        op = sample_operator(mask_sampler(dim=6), 0)
        with pytest.raises(ValueError, match="shape"):
            to_projected(op, np.zeros(5))


class TestDiffusionNoise:
    def test_tiny_sigma_approaches_ybar(self):
        op = sample_operator(mask_sampler(dim=8, keep_prob=0.5), 2)
        meas = to_projected(op, np.arange(8.0))
        noised = add_diffusion_noise(op, meas, 1e-12, stream(5, "dn"))
        np.testing.assert_allclose(noised, meas.ybar, atol=1e-10)

    def test_full_projection_is_plain_noising(self):
        op = sample_operator(mask_sampler(dim=8, keep_prob=1.0), 0)
        meas = to_projected(op, np.zeros(8))
        noised = add_diffusion_noise(op, meas, 2.0, stream(6, "dn2"))
        assert np.all(noised != 0.0)

    def test_variance_on_support_zero_off_support(self):
        op = MeasurementOperator(
            basis=identity_basis(6),
            singular_values=np.array([1.0, 1.0, 0.0, 1.0, 0.0, 0.0]),
            operator_id="manual:0",
        )
        meas = to_projected(op, np.zeros(6))
        gen = stream(7, "dn3")
        draws = np.array([add_diffusion_noise(op, meas, 0.7, gen) for _ in range(10**4)])
        off = ~op.support
        assert np.all(draws[:, off] == 0.0)
        np.testing.assert_allclose(draws[:, op.support].std(axis=0), 0.7, rtol=0.05)

    def test_nonpositive_sigma_rejected(self):
        op = sample_operator(mask_sampler(dim=4), 0)
        meas = to_projected(op, np.zeros(4))
        with pytest.raises(ValueError):
            add_diffusion_noise(op, meas, 0.0, stream(8, "dn4"))


class TestLift:
    def test_identity_basis_unchanged(self):
        op = sample_operator(mask_sampler(dim=5), 0)
        v = np.arange(5.0)
        np.testing.assert_array_equal(lift(op, v), v)

    def test_dense_round_trip(self):
        basis = dense_orthogonal_basis(9, seed=21)
        op = MeasurementOperator(
            basis=basis, singular_values=np.ones(9), operator_id="manual:0"
        )
        v = stream(9, "lift").standard_normal(9)
        np.testing.assert_allclose(basis.inverse(lift(op, v)), v, atol=1e-10)

    def test_hadamard_first_column(self):
        op = MeasurementOperator(
            basis=hadamard_basis(16), singular_values=np.ones(16), operator_id="manual:0"
        )
        e0 = np.zeros(16)
        e0[0] = 1.0
        np.testing.assert_allclose(lift(op, e0), np.full(16, 0.25), atol=1e-14)


class TestProjectionIdempotence:
    def test_masking_twice_equals_once(self):
        op = sample_operator(mask_sampler(dim=16, keep_prob=0.4), 5)
        v = stream(10, "idem").standard_normal(16)
        once = op.projection_diag * v
        np.testing.assert_array_equal(op.projection_diag * once, once)


class TestProjectionStats:
    def test_full_keep_gives_identity_weights(self):
        stats = estimate_projection_stats(mask_sampler(dim=8, keep_prob=1.0), 128)
        np.testing.assert_array_equal(stats.ep_diag, np.ones(8))
        np.testing.assert_array_equal(stats.w_diag, np.ones(8))

    def test_bernoulli_quarter_keeps_give_weight_eight(self):
        stats = estimate_projection_stats(mask_sampler(dim=10, keep_prob=0.25), 10**4)
        np.testing.assert_allclose(stats.w_diag, 8.0, rtol=0.05)

    def test_band_low_block_is_deterministic(self):
        sampler = OperatorSampler(
            kind="band-subsample",
            dim=40,
            basis=identity_basis(40),
            base_seed=6,
            low_count=8,
            rand_count=8,
        )
        stats = estimate_projection_stats(sampler, 256)
        np.testing.assert_array_equal(stats.ep_diag[:8], np.ones(8))

    def test_weight_power_invariant(self):
        stats = estimate_projection_stats(mask_sampler(dim=12, keep_prob=0.7), 2048)
        np.testing.assert_allclose(stats.w_diag, stats.ep_diag**-1.5, rtol=0, atol=1e-12)
        assert stats.draws_used == 2048
        assert stats.sampler_id

    def test_span_violation_when_coordinate_never_observed(self):
        keep = np.array([0.0, 0.9, 0.9, 0.9])
        sampler = mask_sampler(dim=4, keep_prob=keep)
        with pytest.raises(SpanViolation, match="never observed"):
            estimate_projection_stats(sampler, 200)

    def test_invalid_ep_rejected(self):
        with pytest.raises(ValueError):
            ProjectionStats(
                ep_diag=np.array([0.0, 1.0]), w_diag=np.ones(2), draws_used=1
            )


class TestSharedBasisByConstruction:
    def test_operators_share_the_sampler_basis_object(self):
        sampler = mask_sampler(dim=8, keep_prob=0.5)
        ops = [sample_operator(sampler, i) for i in range(10)]
        assert all(op.basis is sampler.basis for op in ops)
        assert len({op.basis.basis_id for op in ops}) == 1

    def test_mixed_sampler_dataset_rejected(self):
        a = mask_sampler(dim=6, keep_prob=0.5, base_seed=1)
        b = mask_sampler(dim=6, keep_prob=0.5, base_seed=2)
        x = stream(11, "mix").standard_normal(6)
        meas_a = to_projected(sample_operator(a, 0), x)
        meas_b = to_projected(sample_operator(b, 0), x)
        with pytest.raises(BasisMismatch):
            MeasurementDataset(sampler=a, measurements=(meas_a, meas_b))


class TestSamplerSerialization:
    def test_round_trip_preserves_fingerprint(self):
        for sampler in (
            mask_sampler(dim=8, keep_prob=0.3, base_seed=9),
            mask_sampler(dim=8, keep_prob=0.3, basis=dense_orthogonal_basis(8, seed=2)),
            OperatorSampler(
                kind="band-subsample",
                dim=16,
                basis=hadamard_basis(16),
                base_seed=4,
                low_count=4,
                rand_count=4,
            ),
        ):
            clone = OperatorSampler.from_dict(sampler.to_dict())
            assert clone.fingerprint() == sampler.fingerprint()
            op_a = sample_operator(sampler, 3)
            op_b = sample_operator(clone, 3)
            np.testing.assert_array_equal(op_a.singular_values, op_b.singular_values)

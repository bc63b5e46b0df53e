"""
Tests for the bicubic upsampler and the spectral / spatial branches.
"""

import numpy as np
import pytest
from scipy import ndimage

from s2wmamba.branches import (
    SpatialBranchParams,
    SpectralBranchParams,
    bicubic_matrix,
    bicubic_upsample,
    spatial_branch,
    spectral_branch,
)
from s2wmamba.errors import ShapeError, UsageError
from s2wmamba.models import NetworkConfig
from s2wmamba.tensor import Parameter, Tensor, avg_pool2d, check_gradients, mean_abs_error, mul, no_grad, sum_all


def smooth_field(rng, shape, sigma=2.0):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), (0, sigma, sigma), mode="wrap")
    field -= field.min()
    return field / field.max()


class TestBicubic:
    """Tests for bicubic_upsample."""

    def test_constant_preserved(self):
        """Test that a constant image stays constant."""
        out = bicubic_upsample(Tensor(np.full((3, 5, 4), 0.4)), 4)
        assert out.shape == (3, 20, 16)
        assert np.allclose(out.data, 0.4, atol=1e-14)

    def test_single_pixel(self):
        """Test that a 1x1 input becomes a 4x4 constant."""
        out = bicubic_upsample(Tensor([[[0.3]]]), 4)
        assert out.shape == (1, 4, 4)
        assert np.allclose(out.data, 0.3)

    def test_rows_sum_to_one(self):
        """Test that every interpolation row has unit weight."""
        assert np.allclose(bicubic_matrix(7, 4).sum(axis=1), 1.0)

    def test_box_downsample_recovers(self, rng):
        """Test that upsample then box downsample stays within 0.15 of a smooth field."""
        x = smooth_field(rng, (2, 16, 16))
        with no_grad():
            back = avg_pool2d(bicubic_upsample(Tensor(x), 4), 4).data
        assert np.abs(back - x).max() < 0.15

    def test_ratio_checked(self):
        """Test that a non power of two ratio is rejected."""
        with pytest.raises(UsageError):
            bicubic_upsample(Tensor(np.zeros((1, 2, 2))), 3)

    def test_gradient(self, rng):
        """Test that the upsampler passes the finite difference check."""
        x = Parameter(rng.uniform(-1, 1, (2, 3, 4)), name="x")
        weights = Tensor(rng.uniform(-1, 1, (2, 6, 8)))
        assert check_gradients(lambda: sum_all(mul(bicubic_upsample(x, 2), weights)), [x]).passed


class TestSpectralBranch:
    """Tests for spectral_branch."""

    def test_stage_shapes_ratio_four(self, rng):
        """Test the stage wise shapes for r = 4."""
        cfg = NetworkConfig(ratio=4, bands=8, width=8, d_state=2)
        p = SpectralBranchParams(rng, cfg)
        trace = []
        with no_grad():
            out = spectral_branch(
                Tensor(rng.random((1, 16, 16))), Tensor(rng.random((8, 4, 4))), p, trace
            )
        assert out.shape == (8, 16, 16)
        assert trace == [
            ("Input PAN conv", (8, 16, 16)),
            ("Level-1 DWT2D", (32, 8, 8)),
            ("Level-2 DWT2D", (32, 4, 4)),
            ("FMamba (SpeBS-1)", (32, 4, 4)),
            ("IDWT2D (SpeBS-1)", (8, 8, 8)),
            ("FMamba (SpeBS-2)", (32, 8, 8)),
            ("IDWT2D (SpeBS-2)", (8, 16, 16)),
            ("Reduce to c", (8, 16, 16)),
        ]

    def test_ratio_two_single_stage(self, tiny_config, rng):
        """Test that r = 2 runs one stage to full resolution."""
        p = SpectralBranchParams(rng, tiny_config)
        assert len(p.stages) == 1
        with no_grad():
            out = spectral_branch(Tensor(rng.random((1, 8, 8))), Tensor(rng.random((4, 4, 4))), p)
        assert out.shape == (4, 8, 8)

    def test_parameter_names(self, tiny_config, rng):
        """Test that subband blocks are named per stage and subband."""
        names = [q.name for q in SpectralBranchParams(rng, tiny_config).parameters()]
        assert "spebs1.fm_ll.0.alpha" in names
        assert "spebs1.fm_hh.0.cross_y.ssm.A_log" in names
        assert len(names) == len(set(names))

    def test_ratio_mismatch(self, tiny_config, rng):
        """Test that PAN and LRMS sizes must agree on the ratio."""
        p = SpectralBranchParams(rng, tiny_config)
        with pytest.raises(ShapeError):
            spectral_branch(Tensor(rng.random((1, 8, 8))), Tensor(rng.random((4, 2, 2))), p)

    def test_l1_gradient(self, tiny_config, rng):
        """Test the l1 loss of Output1 on a 16x16 fixture against finite differences."""
        p = SpectralBranchParams(rng, tiny_config)
        pan = Tensor(rng.uniform(0, 1, (1, 16, 16)))
        lrms = Tensor(rng.uniform(0, 1, (4, 8, 8)))
        target = Tensor(rng.uniform(9.0, 10.0, (4, 16, 16)))
        checked = p.pan_in.parameters() + p.lrms_in.parameters() + p.out.parameters()
        checked += p.stages[0]["hh"][0].parameters()
        report = check_gradients(lambda: mean_abs_error(spectral_branch(pan, lrms, p), target), checked, max_entries=2)
        assert report.passed, report.failures()


class TestSpatialBranch:
    """Tests for spatial_branch."""

    @pytest.mark.parametrize("bands, channels", [(8, [1, 2, 4, 8]), (4, [1, 2, 4])])
    def test_channel_growth(self, rng, bands, channels):
        """Test that each stage doubles the channel count at constant size."""
        cfg = NetworkConfig(ratio=2, bands=bands, width=4, d_state=2)
        p = SpatialBranchParams(rng, cfg)
        trace = []
        with no_grad():
            out = spatial_branch(Tensor(rng.random((1, 4, 4))), Tensor(rng.random((bands, 4, 4))), p, trace)
        assert out.shape == (bands, 4, 4)
        grown = [shape[0] for label, shape in trace if label.startswith("IDWT1D")]
        assert grown == channels[1:]
        levels = [label for label, _ in trace if label.endswith("DWT1D") and label.startswith("Level")]
        assert levels == [f"Level-{j} DWT1D" for j in range(len(channels) - 1, 0, -1)]

    def test_size_mismatch(self, tiny_config, rng):
        """Test that PAN and L0 must share the spatial size."""
        p = SpatialBranchParams(rng, tiny_config)
        with pytest.raises(ShapeError):
            spatial_branch(Tensor(rng.random((1, 4, 4))), Tensor(rng.random((4, 2, 2))), p)

    def test_band_count_mismatch(self, tiny_config, rng):
        """Test that L0 must have the configured band count."""
        p = SpatialBranchParams(rng, tiny_config)
        with pytest.raises(ShapeError):
            spatial_branch(Tensor(rng.random((1, 4, 4))), Tensor(rng.random((8, 4, 4))), p)

    def test_gradient(self, tiny_config, rng):
        """Test the spatial branch against finite differences on an 8x8 fixture."""
        p = SpatialBranchParams(rng, tiny_config)
        pan = Tensor(rng.uniform(0, 1, (1, 8, 8)))
        l0 = Tensor(rng.uniform(0, 1, (4, 8, 8)))
        weights = Tensor(rng.uniform(-1, 1, (4, 8, 8)))
        first, last = p.stages
        checked = first.p_to_l.parameters() + first.l_in.parameters() + last.h_out.parameters()
        checked += last.fm_h[0].parameters()
        report = check_gradients(lambda: sum_all(mul(spatial_branch(pan, l0, p), weights)), checked, max_entries=2)
        assert report.passed, report.failures()

"""
Unit tests for evsign/modules/sparse_conv.py.
Tests rulebooks, sparse convolution against dense conv2d, the backbone and FLOPs accounting.
"""

import sys
from pathlib import Path

import pytest
import torch
import torch.nn.functional as F

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from evsign.config import load_config
from evsign.data_kits.event_io import VoxelGrid, encode_clip
from evsign.data_kits.synth_data import compose_clip
from evsign.modules.norm_layers import SiteNorm
from evsign.modules.sparse_conv import (
    SparseBackbone, SparseConv2d, SparseTensor, build_rulebook, dense_equivalent_taps, densify, flops_report,
    sparsify,
)


def sparse_input(generator, batch=2, channels=3, size=7, density=0.3, dtype=torch.float64):
    dense = torch.randn(batch, channels, size, size, generator=generator, dtype=dtype)
    keep = torch.rand(batch, 1, size, size, generator=generator) < density
    return dense * keep


@pytest.mark.unit
class TestRulebook:
    """Hand-checked rulebooks."""

    def test_single_site_submanifold(self):
        rb = build_rulebook(torch.tensor([[0, 1, 1]]), (3, 3), 3, 1, True)
        assert rb.n_pairs == 1
        centre = rb.offsets.index((0, 0))
        src, dst = rb.pairs[centre]
        assert src.tolist() == [0] and dst.tolist() == [0]

    def test_two_neighbours(self):
        rb = build_rulebook(torch.tensor([[0, 0, 0], [0, 0, 1]]), (3, 3), 3, 1, True)
        assert rb.n_pairs == 4
        right = rb.pairs[rb.offsets.index((0, 1))]
        left = rb.pairs[rb.offsets.index((0, -1))]
        assert (right[0].tolist(), right[1].tolist()) == ([1], [0])
        assert (left[0].tolist(), left[1].tolist()) == ([0], [1])

    def test_strided_receptive_field(self):
        rb = build_rulebook(torch.tensor([[0, 1, 1]]), (4, 4), 3, 2, False)
        assert rb.out_shape == (2, 2)
        assert sorted(map(tuple, rb.out_coords.tolist())) == [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]
        rb = build_rulebook(torch.tensor([[0, 0, 0]]), (4, 4), 3, 2, False)
        assert rb.out_coords.tolist() == [[0, 0, 0]]

    def test_segments_do_not_mix(self):
        rb = build_rulebook(torch.tensor([[0, 1, 1], [1, 1, 2]]), (3, 3), 3, 1, True)
        assert rb.n_pairs == 2

    def test_invalid_arguments(self):
        coords = torch.tensor([[0, 0, 0]])
        with pytest.raises(ValueError):
            build_rulebook(coords, (3, 3), 2, 1, True)
        with pytest.raises(ValueError):
            build_rulebook(coords, (3, 3), 3, 2, True)
        with pytest.raises(ValueError):
            build_rulebook(coords, (3, 3), 3, 0, False)

    def test_cached_per_structure(self, generator):
        x = sparsify(sparse_input(generator))
        assert x.rulebook(3, 1, True) is x.rulebook(3, 1, True)
        y = x.replace_features(x.features * 2)
        assert y.rulebook(3, 1, True) is x.rulebook(3, 1, True)


@pytest.mark.unit
class TestSparseTensor:
    """Tests for SparseTensor, sparsify and densify."""

    def test_densify_inverts_sparsify(self, generator):
        dense = sparse_input(generator)
        assert torch.equal(densify(sparsify(dense)), dense)
        assert torch.equal(densify(sparsify(dense[0])), dense[0])

    def test_threshold(self):
        dense = torch.tensor([[[0.1, 0.0], [0.0, 0.5]]])
        assert sparsify(dense).n_active == 2
        assert sparsify(dense, threshold=0.2).n_active == 1

    def test_coordinate_validation(self):
        with pytest.raises(ValueError, match="unique"):
            SparseTensor(torch.tensor([[0, 1, 1], [0, 1, 1]]), torch.zeros(2, 1), (3, 3))
        with pytest.raises(ValueError, match="outside"):
            SparseTensor(torch.tensor([[0, 3, 0]]), torch.zeros(1, 1), (3, 3))
        with pytest.raises(ValueError):
            SparseTensor(torch.tensor([[0, 0, 0]]), torch.zeros(2, 1), (3, 3))


@pytest.mark.unit
class TestSparseConv:
    """Sparse convolution against torch.nn.functional.conv2d."""

    def test_fully_active_submanifold_matches_conv2d(self, generator):
        dense = torch.randn(2, 3, 6, 5, generator=generator, dtype=torch.float64)
        conv = SparseConv2d(3, 4, 3, 1, submanifold=True, bias=True, dtype=torch.float64)
        torch.nn.init.normal_(conv.bias)
        out = densify(conv(sparsify(dense)))
        expected = F.conv2d(dense, conv.dense_weight(), conv.bias, padding=1)
        torch.testing.assert_close(out, expected)

    def test_submanifold_preserves_sites(self, generator):
        dense = sparse_input(generator)
        x = sparsify(dense)
        conv = SparseConv2d(3, 4, 3, 1, submanifold=True, dtype=torch.float64)
        y = conv(x)
        assert torch.equal(y.coords, x.coords)
        # inactive sites stay zero; active sites equal the dense conv of the masked input
        active = (dense != 0).any(dim=1, keepdim=True)
        expected = F.conv2d(dense, conv.dense_weight(), padding=1) * active
        torch.testing.assert_close(densify(y), expected)

    @pytest.mark.parametrize("size", [6, 7])
    def test_strided_matches_conv2d(self, generator, size):
        dense = sparse_input(generator, size=size)
        conv = SparseConv2d(3, 2, 3, 2, submanifold=False, dtype=torch.float64)
        y = conv(sparsify(dense))
        expected = F.conv2d(dense, conv.dense_weight(), stride=2, padding=1)
        assert y.spatial_shape == tuple(expected.shape[-2:])
        torch.testing.assert_close(densify(y), expected)

    def test_row_order_does_not_matter(self, generator):
        x = sparsify(sparse_input(generator))
        perm = torch.randperm(x.n_active, generator=generator)
        shuffled = SparseTensor(x.coords[perm], x.features[perm], x.spatial_shape, x.batch_size)
        conv = SparseConv2d(3, 4, 3, 1, dtype=torch.float64)
        torch.testing.assert_close(densify(conv(shuffled)), densify(conv(x)))

    def test_empty_input(self):
        x = sparsify(torch.zeros(2, 3, 5, 5))
        for conv in (SparseConv2d(3, 4, 3, 1), SparseConv2d(3, 4, 3, 2, submanifold=False)):
            y = conv(x)
            assert y.n_active == 0 and y.channels == 4

    def test_channel_mismatch(self, generator):
        x = sparsify(sparse_input(generator, dtype=torch.float32))
        with pytest.raises(ValueError, match="channel"):
            SparseConv2d(5, 4)(x)


@pytest.mark.unit
class TestSiteNorm:
    """Tests for SiteNorm."""

    def test_normalizes_active_rows(self, generator):
        norm = SiteNorm(3, dtype=torch.float64)
        out = norm(torch.randn(50, 3, generator=generator, dtype=torch.float64) * 4 + 2)
        torch.testing.assert_close(out.mean(0), torch.zeros(3, dtype=torch.float64), atol=1e-9, rtol=0)
        assert norm.num_batches_tracked == 1

    def test_single_site_uses_running_stats(self):
        norm = SiteNorm(2)
        x = torch.tensor([[3.0, -1.0]])
        torch.testing.assert_close(norm(x), x / (1 + norm.eps) ** 0.5)
        assert norm.num_batches_tracked == 0

    def test_empty(self):
        assert SiteNorm(2)(torch.zeros(0, 2)).shape == (0, 2)


@pytest.mark.unit
class TestBackbone:
    """Tests for SparseBackbone tokens and FLOPs."""

    def test_token_shape_and_silent_segments(self, generator):
        backbone = SparseBackbone(2, [4, 6], [1, 2])
        voxels = torch.randn(3, 2, 8, 8, generator=generator)
        voxels[1] = 0
        tokens = backbone.forward_dense(voxels)
        assert tokens.shape == (3, 6)
        assert torch.count_nonzero(tokens[1]) == 0

    def test_all_silent_clip(self):
        backbone = SparseBackbone(2, [4, 6], [1, 2])
        tokens = backbone.forward_dense(torch.zeros(4, 2, 8, 8))
        assert tokens.shape == (4, 6) and torch.count_nonzero(tokens) == 0
        report = backbone.flops(backbone.sparsify(torch.zeros(4, 2, 8, 8)))
        assert report.sparse_flops == 0 and report.dense_equivalent_flops > 0
        assert report.ratio == 0.0

    def test_dense_input_ratio_is_one(self):
        backbone = SparseBackbone(2, [4, 6, 8], [1, 2, 2])
        report = backbone.flops(backbone.sparsify(torch.ones(2, 2, 9, 9)))
        assert report.sparse_flops == report.dense_equivalent_flops
        assert report.ratio == 1.0

    def test_sparse_input_saves_flops(self, generator):
        backbone = SparseBackbone(2, [4, 6], [1, 2])
        voxels = sparse_input(generator, batch=2, channels=2, size=12, density=0.1, dtype=torch.float32)
        assert 0.0 < backbone.flops(backbone.sparsify(voxels)).ratio < 1.0

    def test_flops_report_on_voxel_grid(self, generator):
        backbone = SparseBackbone(2, [4, 6], [1, 2])
        voxels = sparse_input(generator, batch=3, channels=2, size=10, density=0.2, dtype=torch.float32)
        report = flops_report(VoxelGrid(voxels), backbone)
        assert report == backbone.flops(backbone.sparsify(voxels))
        assert report.to_dict()["ratio"] == report.ratio

    def test_synthetic_clips_are_sparse(self):
        # default sensor, segmentation and backbone, random weights
        cfg = load_config(None)
        torch.manual_seed(cfg.seed)
        b = cfg.backbone
        backbone = SparseBackbone(cfg.event.n_bins, list(b.channels), list(b.strides), b.kernel_size, b.threshold)
        for ids in ([1, 2, 3], [4, 5, 6, 7, 8], [9, 10], [11, 12, 1, 5]):
            stream, _ = compose_clip(ids, cfg.synth.gap_ms, cfg.synth, seed=cfg.seed)
            grid = encode_clip(stream, cfg.event.n_segments, cfg.event.n_bins)
            assert tuple(grid.data.shape) == (48, 5, 32, 32)
            report = flops_report(grid, backbone)
            assert 0.0 < report.ratio < 0.2, (ids, report.to_dict())

    def test_dense_equivalent_taps(self):
        # 3x3 image, 3x3 kernel, stride 1: corners 4 taps, edges 6, centre 9
        assert dense_equivalent_taps((3, 3), 3, 1) == 4 * 4 + 4 * 6 + 9
        assert dense_equivalent_taps((1, 1), 3, 1) == 1

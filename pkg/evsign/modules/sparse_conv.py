"""
Rulebook-based sparse 2-D convolution and the event backbone built from it.

A ``SparseTensor`` stores active sites as ``(batch, y, x)`` rows; the batch
index is the temporal segment, so one clip is a single sparse batch and every
rulebook serves all of its segments at once. Convolution gathers input rows per
kernel offset, multiplies by that offset's ``Cin x Cout`` matrix and scatters
into output rows with ``index_add`` (deterministic on CPU, differentiable).

Offset ``(dy, dx)`` with ``r = k // 2`` has index ``(dy + r) * k + (dx + r)``; an
output at ``o`` reads the input at ``o * stride + (dy, dx)``, which is exactly the
cross-correlation ``torch.nn.functional.conv2d`` computes with ``padding=r``.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from evsign.helpers import to_2tuple
from .norm_layers import get_norm_layer


@dataclass
class Rulebook:
    kernel_size: int
    stride: int
    submanifold: bool
    offsets: List[Tuple[int, int]]
    pairs: List[Tuple[torch.Tensor, torch.Tensor]]   # per offset: (input rows, output rows)
    out_coords: torch.Tensor                         # (m, 3) long
    out_shape: Tuple[int, int]

    @property
    def n_pairs(self) -> int:
        return sum(int(i.numel()) for i, _ in self.pairs)


class SparseTensor:
    def __init__(self, coords: torch.Tensor, features: torch.Tensor, spatial_shape, batch_size: int = 1,
                 unbatched: bool = False, _cache: Optional[Dict] = None, _check: bool = True):
        coords = torch.as_tensor(coords, dtype=torch.long).reshape(-1, 3)
        if features.dim() != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(f"features {tuple(features.shape)} do not match {coords.shape[0]} coords")
        self.coords = coords
        self.features = features
        self.spatial_shape = to_2tuple(spatial_shape)
        self.batch_size = int(batch_size)
        self.unbatched = unbatched
        if _check and coords.shape[0]:
            H, W = self.spatial_shape
            b, y, x = coords.unbind(1)
            if (b < 0).any() or (b >= batch_size).any() or (y < 0).any() or (y >= H).any() \
                    or (x < 0).any() or (x >= W).any():
                raise ValueError("coords outside the spatial shape")
            if torch.unique(self._keys()).numel() != coords.shape[0]:
                raise ValueError("coords must be unique")
        # rulebooks depend only on coords, so replace_features shares them
        self._cache = {} if _cache is None else _cache

    def _keys(self) -> torch.Tensor:
        H, W = self.spatial_shape
        return (self.coords[:, 0] * H + self.coords[:, 1]) * W + self.coords[:, 2]

    @property
    def n_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def index_map(self) -> torch.Tensor:
        """Dense ``(batch, H, W)`` lookup of row ids, -1 where inactive."""
        if "index" not in self._cache:
            H, W = self.spatial_shape
            lut = torch.full((self.batch_size, H, W), -1, dtype=torch.long)
            lut[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = torch.arange(self.n_active)
            self._cache["index"] = lut
        return self._cache["index"]

    def replace_features(self, features: torch.Tensor) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.spatial_shape, self.batch_size,
                            self.unbatched, _cache=self._cache, _check=False)

    def rulebook(self, kernel_size: int, stride: int, submanifold: bool) -> Rulebook:
        key = ("rulebook", kernel_size, stride, submanifold)
        if key not in self._cache:
            self._cache[key] = build_rulebook(self.coords, self.spatial_shape, kernel_size, stride,
                                              submanifold, self.batch_size, index_map=self.index_map())
        return self._cache[key]

    def dense(self) -> torch.Tensor:
        H, W = self.spatial_shape
        out = self.features.new_zeros(self.batch_size, H, W, self.channels)
        out = out.index_put((self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]), self.features)
        out = out.permute(0, 3, 1, 2)
        return out[0] if self.unbatched else out

    def __repr__(self):
        return (f"SparseTensor(n_active={self.n_active}, channels={self.channels}, "
                f"shape={self.spatial_shape}, batch={self.batch_size})")


def sparsify(dense: torch.Tensor, threshold: float = 0.0) -> SparseTensor:
    """Active sites are pixels where any channel exceeds ``threshold`` in magnitude.

    Accepts ``(C, H, W)`` (one segment) or ``(batch, C, H, W)``.
    """
    unbatched = dense.dim() == 3
    if unbatched:
        dense = dense.unsqueeze(0)
    if dense.dim() != 4:
        raise ValueError(f"expected (C, H, W) or (batch, C, H, W), got {tuple(dense.shape)}")
    active = (dense.abs() > threshold).any(dim=1)
    coords = active.nonzero()
    channels_last = dense.permute(0, 2, 3, 1)
    features = channels_last[coords[:, 0], coords[:, 1], coords[:, 2]]
    return SparseTensor(coords, features, dense.shape[2:], dense.shape[0], unbatched=unbatched, _check=False)


def densify(x: SparseTensor) -> torch.Tensor:
    return x.dense()


def _offsets(kernel_size: int) -> List[Tuple[int, int]]:
    r = kernel_size // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def output_shape(spatial_shape, kernel_size: int, stride: int) -> Tuple[int, int]:
    H, W = to_2tuple(spatial_shape)
    return (H - 1) // stride + 1, (W - 1) // stride + 1


def build_rulebook(coords: torch.Tensor, spatial_shape, kernel_size: int = 3, stride: int = 1,
                   submanifold: bool = True, batch_size: Optional[int] = None,
                   index_map: Optional[torch.Tensor] = None) -> Rulebook:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    if submanifold and stride != 1:
        raise ValueError("submanifold convolution requires stride 1")
    coords = torch.as_tensor(coords, dtype=torch.long).reshape(-1, 3)
    H, W = to_2tuple(spatial_shape)
    if batch_size is None:
        batch_size = int(coords[:, 0].max()) + 1 if coords.shape[0] else 1
    offsets = _offsets(kernel_size)
    empty = torch.zeros(0, dtype=torch.long)

    if submanifold:
        out_shape = (H, W)
        if coords.shape[0] == 0:
            return Rulebook(kernel_size, stride, True, offsets, [(empty, empty) for _ in offsets], coords, out_shape)
        if index_map is None:
            index_map = torch.full((batch_size, H, W), -1, dtype=torch.long)
            index_map[coords[:, 0], coords[:, 1], coords[:, 2]] = torch.arange(coords.shape[0])
        b, y, x = coords.unbind(1)
        rows = torch.arange(coords.shape[0])
        pairs = []
        for dy, dx in offsets:
            ny, nx = y + dy, x + dx
            valid = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
            src = torch.full_like(rows, -1)
            src[valid] = index_map[b[valid], ny[valid], nx[valid]]
            hit = src >= 0
            pairs.append((src[hit], rows[hit]))
        return Rulebook(kernel_size, stride, True, offsets, pairs, coords, out_shape)

    Ho, Wo = output_shape((H, W), kernel_size, stride)
    out_shape = (Ho, Wo)
    if coords.shape[0] == 0:
        return Rulebook(kernel_size, stride, False, offsets, [(empty, empty) for _ in offsets],
                        torch.zeros(0, 3, dtype=torch.long), out_shape)
    b, y, x = coords.unbind(1)
    candidates = []
    for dy, dx in offsets:
        ty, tx = y - dy, x - dx
        ok = (ty % stride == 0) & (tx % stride == 0)
        oy, ox = ty.div(stride, rounding_mode="floor"), tx.div(stride, rounding_mode="floor")
        ok &= (oy >= 0) & (oy < Ho) & (ox >= 0) & (ox < Wo)
        candidates.append((ok, oy, ox))
    keys = torch.cat([(b[ok] * Ho + oy[ok]) * Wo + ox[ok] for ok, oy, ox in candidates])
    keys = torch.unique(keys)
    out_coords = torch.stack([keys // (Ho * Wo), (keys // Wo) % Ho, keys % Wo], dim=1)
    lut = torch.full((batch_size, Ho, Wo), -1, dtype=torch.long)
    lut[out_coords[:, 0], out_coords[:, 1], out_coords[:, 2]] = torch.arange(out_coords.shape[0])
    rows = torch.arange(coords.shape[0])
    pairs = []
    for ok, oy, ox in candidates:
        pairs.append((rows[ok], lut[b[ok], oy[ok], ox[ok]]))
    return Rulebook(kernel_size, stride, False, offsets, pairs, out_coords, out_shape)


def sparse_conv(x: SparseTensor, weight: torch.Tensor, bias: Optional[torch.Tensor], rulebook: Rulebook) -> SparseTensor:
    """``out[j] = bias + sum over pairs (i, j) of x[i] @ weight[offset]``.

    Args:
        weight: (kernel_size**2, Cin, Cout)
        bias: (Cout,) or None
    """
    if weight.dim() != 3 or weight.shape[0] != len(rulebook.offsets):
        raise ValueError(f"weight {tuple(weight.shape)} does not fit a {rulebook.kernel_size}x{rulebook.kernel_size} kernel")
    if weight.shape[1] != x.channels:
        raise ValueError(f"channel mismatch: input has {x.channels} channels, weight expects {weight.shape[1]}")
    n_out = rulebook.out_coords.shape[0]
    out = x.features.new_zeros(n_out, weight.shape[2])
    for k, (src, dst) in enumerate(rulebook.pairs):
        if src.numel():
            out = out.index_add(0, dst, x.features[src] @ weight[k])
    if bias is not None:
        out = out + bias
    if rulebook.submanifold:
        return x.replace_features(out)
    # the downsampled structure is fixed per input, so its rulebooks are cached alongside
    child = x._cache.setdefault(("child", rulebook.kernel_size, rulebook.stride), {})
    return SparseTensor(rulebook.out_coords, out, rulebook.out_shape, x.batch_size, x.unbatched,
                        _cache=child, _check=False)


def dense_equivalent_taps(spatial_shape, kernel_size: int, stride: int) -> int:
    """Multiply-add taps of the dense convolution that land inside the image."""
    H, W = to_2tuple(spatial_shape)
    Ho, Wo = output_shape((H, W), kernel_size, stride)
    r = kernel_size // 2

    def axis(n, n_out):
        return sum(sum(1 for d in range(-r, r + 1) if 0 <= o * stride + d < n) for o in range(n_out))
    return axis(H, Ho) * axis(W, Wo)


class SparseConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, submanifold=True, bias=False,
                 device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.submanifold = submanifold
        self.weight = nn.Parameter(torch.empty(kernel_size * kernel_size, in_channels, out_channels, **factory_kwargs))
        self.bias = nn.Parameter(torch.zeros(out_channels, **factory_kwargs)) if bias else None
        nn.init.normal_(self.weight, std=(2.0 / (kernel_size * kernel_size * in_channels)) ** 0.5)

    def forward(self, x: SparseTensor) -> SparseTensor:
        rulebook = x.rulebook(self.kernel_size, self.stride, self.submanifold)
        return sparse_conv(x, self.weight, self.bias, rulebook)

    def dense_weight(self) -> torch.Tensor:
        """The same kernel in ``conv2d`` layout (Cout, Cin, k, k)."""
        k = self.kernel_size
        return self.weight.view(k, k, self.in_channels, self.out_channels).permute(3, 2, 0, 1)

    def flops(self, x: SparseTensor) -> Tuple[int, int, SparseTensor]:
        """(executed multiply-adds, dense-equivalent multiply-adds, output site structure)."""
        rulebook = x.rulebook(self.kernel_size, self.stride, self.submanifold)
        per_tap = self.in_channels * self.out_channels
        sparse = rulebook.n_pairs * per_tap
        dense = x.batch_size * dense_equivalent_taps(x.spatial_shape, self.kernel_size, self.stride) * per_tap
        if self.submanifold:
            out = x
        else:
            m = rulebook.out_coords.shape[0]
            out = SparseTensor(rulebook.out_coords, x.features.new_zeros(m, 0), rulebook.out_shape,
                               x.batch_size, _cache=x._cache.setdefault(("child", self.kernel_size, self.stride), {}),
                               _check=False)
        return sparse, dense, out


def sparse_relu(x: SparseTensor) -> SparseTensor:
    return x.replace_features(F.relu(x.features))


class SparseResidualStage(nn.Module):
    """conv0 (submanifold, or strided when downsampling) -> norm -> relu, then one residual submanifold conv."""

    def __init__(self, in_channels, out_channels, stride=1, kernel_size=3, device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        norm_layer = get_norm_layer("site")
        self.conv0 = SparseConv2d(in_channels, out_channels, kernel_size, stride, submanifold=(stride == 1),
                                  **factory_kwargs)
        self.norm0 = norm_layer(out_channels, **factory_kwargs)
        self.conv1 = SparseConv2d(out_channels, out_channels, kernel_size, 1, submanifold=True, **factory_kwargs)
        self.norm1 = norm_layer(out_channels, **factory_kwargs)

    def forward(self, x: SparseTensor) -> SparseTensor:
        x = self.conv0(x)
        x = sparse_relu(x.replace_features(self.norm0(x.features)))
        y = self.conv1(x)
        return x.replace_features(F.relu(x.features + self.norm1(y.features)))


@dataclass
class FlopsReport:
    sparse_flops: int
    dense_equivalent_flops: int

    @property
    def ratio(self) -> float:
        if self.dense_equivalent_flops == 0:
            return 0.0
        return self.sparse_flops / self.dense_equivalent_flops

    def to_dict(self) -> dict:
        return {"sparse_flops": self.sparse_flops, "dense_equivalent_flops": self.dense_equivalent_flops,
                "ratio": self.ratio}


class SparseBackbone(nn.Module):
    """Residual sparse CNN turning each segment of a clip into one C-dim visual token."""

    def __init__(self, in_channels: int, channels: Sequence[int] = (16, 32, 64, 64),
                 strides: Sequence[int] = (1, 2, 2, 2), kernel_size: int = 3, threshold: float = 0.0,
                 device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        assert len(channels) == len(strides), "channels and strides must have the same length"
        self.in_channels = in_channels
        self.out_channels = channels[-1]
        self.threshold = threshold
        self.n_stages = len(channels)
        prev = in_channels
        for k, (c, s) in enumerate(zip(channels, strides)):
            self.add_module(f"stage{k}", SparseResidualStage(prev, c, s, kernel_size, **factory_kwargs))
            prev = c

    def stages(self):
        return [getattr(self, f"stage{k}") for k in range(self.n_stages)]

    def sparsify(self, voxels: torch.Tensor) -> SparseTensor:
        return sparsify(voxels, self.threshold)

    def forward(self, x: SparseTensor) -> torch.Tensor:
        """
        Args:
            x (SparseTensor): one clip, batch index = segment.

        Returns:
            torch.Tensor: (batch, C) tokens; segments without active sites give zeros.
        """
        for stage in self.stages():
            x = stage(x)
        tokens = x.features.new_zeros(x.batch_size, x.channels)
        if x.n_active == 0:
            return tokens
        seg = x.coords[:, 0]
        tokens = tokens.index_add(0, seg, x.features)
        counts = torch.bincount(seg, minlength=x.batch_size).clamp(min=1).to(x.features.dtype)
        return tokens / counts.unsqueeze(1)

    def forward_dense(self, voxels: torch.Tensor) -> torch.Tensor:
        """``(B, H, W)`` segment -> ``(C,)`` token, or ``(P, B, H, W)`` clip -> ``(P, C)``."""
        unbatched = voxels.dim() == 3
        tokens = self(self.sparsify(voxels.unsqueeze(0) if unbatched else voxels))
        return tokens[0] if unbatched else tokens

    @torch.no_grad()
    def flops(self, x: SparseTensor) -> FlopsReport:
        sparse = dense = 0
        for stage in self.stages():
            for conv in (stage.conv0, stage.conv1):
                s, d, x = conv.flops(x)
                sparse += s
                dense += d
        logger.debug(f"backbone flops: sparse={sparse} dense={dense}")
        return FlopsReport(sparse, dense)


def flops_report(grid, backbone: SparseBackbone) -> FlopsReport:
    """Executed vs dense-equivalent multiply-adds of ``backbone`` on an encoded clip."""
    return backbone.flops(backbone.sparsify(grid.data))

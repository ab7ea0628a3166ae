"""
Central finite-difference suites for the autodiff stack.

Each suite builds a small float64 problem, compares autograd with central
differences and reports the largest per-coordinate relative error. Primitive ops are held to 1e-4,
composite blocks (sparse stack, temporal aggregation, CTC, decoder) to 1e-3.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import torch
from loguru import logger

from evsign import tensor_core as tc
from evsign.modules.heads import TranslationDecoder, cross_entropy, ctc_loss
from evsign.modules.sparse_conv import SparseBackbone, SparseTensor
from evsign.modules.temporal_layers import GlossAwareTemporalAggregation

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
FD_EPS = 1e-6
CATALOG_EPS = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error, "tolerance": self.tolerance,
                "passed": self.passed}


def check_catalog(seed: int = 0) -> List[GradCheckResult]:
    g = torch.Generator().manual_seed(seed)
    results = []
    for name, spec in tc.OP_CATALOG.items():
        f, leaves = tc.catalog_objective(spec, g, tc.CHECK_DTYPE)
        err = tc.finite_diff_check(f, leaves, eps=CATALOG_EPS)
        results.append(GradCheckResult(f"op/{name}", err, PRIMITIVE_TOL))
    return results


def _contracted(forward: Callable[[], torch.Tensor], g: torch.Generator):
    sample = forward().detach()
    weights = torch.randn(sample.shape, generator=g, dtype=sample.dtype)
    return lambda: (forward() * weights).sum()


def random_sparse_input(g: torch.Generator, batch: int = 2, channels: int = 2, size: int = 6,
                        density: float = 0.4, dtype=tc.CHECK_DTYPE) -> SparseTensor:
    active = torch.rand(batch, size, size, generator=g) < density
    active[:, 0, 0] = True
    coords = active.nonzero()
    feats = torch.randn(coords.shape[0], channels, generator=g, dtype=dtype)
    return SparseTensor(coords, feats, (size, size), batch_size=batch)


def check_sparse_stack(seed: int = 0, max_coords: int = 6) -> GradCheckResult:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    backbone = SparseBackbone(2, channels=[3, 4], strides=[1, 2], dtype=tc.CHECK_DTYPE)
    x = random_sparse_input(g)
    feats = x.features.clone().requires_grad_(True)
    forward = lambda: backbone(x.replace_features(feats))
    f = _contracted(forward, g)
    err = tc.finite_diff_check(f, [feats] + list(backbone.parameters()), eps=FD_EPS,
                               max_coords=max_coords, generator=g)
    return GradCheckResult("sparse_stack", err, COMPOSITE_TOL)


def check_gata(seed: int = 0, max_coords: int = 4, mask_mode: str = "soft") -> GradCheckResult:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    module = GlossAwareTemporalAggregation(8, 2, window=4, gamma=4, sigma=4.0, mlp_ratio=2,
                                           mask_mode=mask_mode, dtype=tc.CHECK_DTYPE)
    visual = torch.randn(1, 10, 8, generator=g, dtype=tc.CHECK_DTYPE, requires_grad=True)
    forward = lambda: module(visual).gloss_tokens.tokens
    f = _contracted(forward, g)
    err = tc.finite_diff_check(f, [visual] + list(module.parameters()), eps=FD_EPS,
                               max_coords=max_coords, generator=g)
    return GradCheckResult(f"gata/{mask_mode}", err, COMPOSITE_TOL)


def check_ctc(seed: int = 0) -> GradCheckResult:
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(7, 5, generator=g, dtype=tc.CHECK_DTYPE, requires_grad=True)
    f = lambda: ctc_loss(tc.log_softmax(logits, -1), [1, 3, 3]).loss
    return GradCheckResult("ctc", tc.finite_diff_check(f, [logits], eps=FD_EPS), COMPOSITE_TOL)


def check_decoder(seed: int = 0, max_coords: int = 4) -> GradCheckResult:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    decoder = TranslationDecoder(8, 10, n_blocks=1, num_heads=2, mlp_ratio=2, dtype=tc.CHECK_DTYPE)
    memory = torch.randn(1, 3, 8, generator=g, dtype=tc.CHECK_DTYPE, requires_grad=True)
    inputs = torch.tensor([[0, 5, 6, 7]])
    targets = torch.tensor([5, 6, 7, 1])
    f = lambda: cross_entropy(decoder(memory, inputs)[0], targets)
    err = tc.finite_diff_check(f, [memory] + list(decoder.parameters()), eps=FD_EPS,
                               max_coords=max_coords, generator=g)
    return GradCheckResult("decoder", err, COMPOSITE_TOL)


SUITES: Dict[str, Callable[[int], object]] = {
    "ops": check_catalog,
    "sparse": check_sparse_stack,
    "gata": check_gata,
    "ctc": check_ctc,
    "decoder": check_decoder,
}


def run_suites(names: Optional[List[str]] = None, seed: int = 0) -> List[GradCheckResult]:
    names = list(SUITES) if not names else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown gradcheck suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = []
    with tc.precision(tc.CHECK_DTYPE):
        for name in names:
            out = SUITES[name](seed)
            batch = out if isinstance(out, list) else [out]
            for r in batch:
                logger.debug(f"gradcheck {r.name}: {r.max_rel_error:.3e} (tol {r.tolerance:g})")
            results.extend(batch)
    return results

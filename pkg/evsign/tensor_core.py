"""
Differentiable tensor substrate.

Tensors are ``torch.Tensor`` and the graph is the one ``torch.autograd``
records; this module adds what the rest of the package relies on on top of it:

* a dtype policy (float32 for training, float64 for gradient checks),
* checked mode, which asserts finiteness after every catalog op and, through
  forward hooks, after every ``nn.Module`` output,
* the op catalog with explicit shape errors,
* a scalar-only ``backward`` that returns a name -> gradient map,
* the central-difference oracle ``finite_diff_check``.
"""
import contextlib
import contextvars
import functools
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from evsign.errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64

_CHECKED = contextvars.ContextVar("evsign_checked", default=False)


def is_checked() -> bool:
    return _CHECKED.get()


@contextlib.contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    token = _CHECKED.set(enabled)
    try:
        yield
    finally:
        _CHECKED.reset(token)


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily change torch's default floating dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def assert_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if is_checked() and x.is_floating_point() and not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite value produced by {what}")
    return x


def _finite_hook(module, inputs, output):
    if not is_checked():
        return
    outputs = output if isinstance(output, (tuple, list)) else (output,)
    for out in outputs:
        if isinstance(out, torch.Tensor):
            assert_finite(out, type(module).__name__)


def install_finite_checks(module: nn.Module) -> List[torch.utils.hooks.RemovableHandle]:
    """Hook every submodule so its tensor outputs are checked while checked mode is on."""
    return [m.register_forward_hook(_finite_hook) for m in module.modules()]


def tensor(data, dtype: Optional[torch.dtype] = None, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=dtype or DEFAULT_DTYPE, requires_grad=requires_grad)


def _op(fn):
    name = fn.__name__.rstrip("_")

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return assert_finite(fn(*args, **kwargs), name)
    return wrapper


def _broadcast(a: torch.Tensor, b: torch.Tensor, op: str):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")


def _axis(x: torch.Tensor, axis: int, op: str) -> int:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"{op}: axis {axis} out of range for shape {tuple(x.shape)}")
    return axis % max(x.dim(), 1)


# ============================ op catalog ============================

@_op
def add(a, b):
    _broadcast(a, b, "add")
    return a + b


@_op
def sub(a, b):
    _broadcast(a, b, "sub")
    return a - b


@_op
def mul(a, b):
    _broadcast(a, b, "mul")
    return a * b


@_op
def scalar_mul(a, s: float):
    return a * s


@_op
def matmul(a, b):
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError("matmul: operands must have at least one dimension")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul: inner dimensions differ ({tuple(a.shape)} @ {tuple(b.shape)})")
    return a @ b


@_op
def transpose(x, dim0: int = -2, dim1: int = -1):
    return x.transpose(_axis(x, dim0, "transpose"), _axis(x, dim1, "transpose"))


@_op
def reshape(x, shape: Sequence[int]):
    shape = tuple(shape)
    if -1 not in shape and math.prod(shape) != x.numel():
        raise ShapeError(f"reshape: cannot view {tuple(x.shape)} as {shape}")
    try:
        return x.reshape(shape)
    except RuntimeError as e:
        raise ShapeError(f"reshape: {e}")


@_op
def concat(tensors: Sequence[torch.Tensor], axis: int = 0):
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ref = tensors[0]
    axis = _axis(ref, axis, "concat")
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[d] != ref.shape[d] for d in range(ref.dim()) if d != axis):
            raise ShapeError(f"concat: {tuple(t.shape)} does not match {tuple(ref.shape)} off axis {axis}")
    return torch.cat(list(tensors), dim=axis)


@_op
def slice_(x, axis: int, start: int, stop: int):
    axis = _axis(x, axis, "slice")
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis of length {x.shape[axis]}")
    return x.narrow(axis, start, stop - start)


@_op
def relu(x):
    return F.relu(x)


@_op
def softmax(x, axis: int = -1):
    axis = _axis(x, axis, "softmax")
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    return torch.softmax(x, dim=axis)


@_op
def log_softmax(x, axis: int = -1):
    axis = _axis(x, axis, "log_softmax")
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    return torch.log_softmax(x, dim=axis)


@_op
def exp(x):
    return torch.exp(x)


@_op
def log(x):
    return torch.log(x)


@_op
def mean(x, axis: Optional[int] = None):
    if axis is None:
        if x.numel() == 0:
            raise ShapeError("mean of an empty tensor")
        return x.mean()
    return x.mean(dim=_axis(x, axis, "mean"))


@_op
def sum_(x, axis: Optional[int] = None):
    if axis is None:
        return x.sum()
    return x.sum(dim=_axis(x, axis, "sum"))


@_op
def max_pool_1d(x, kernel: int = 2, stride: int = 2):
    """Max-pool the sequence axis of ``(..., n, C)`` tokens, per channel."""
    if x.dim() < 2:
        raise ShapeError(f"max_pool_1d expects (..., n, C), got {tuple(x.shape)}")
    if x.shape[-2] < kernel:
        raise ShapeError(f"max_pool_1d: sequence length {x.shape[-2]} shorter than kernel {kernel}")
    lead = x.shape[:-2]
    flat = x.reshape(-1, x.shape[-2], x.shape[-1]).transpose(1, 2)
    out = F.max_pool1d(flat, kernel_size=kernel, stride=stride)
    return out.transpose(1, 2).reshape(*lead, out.shape[-1], x.shape[-1])


@_op
def avg_pool_1d(x, kernel: int = 2, stride: int = 2):
    if x.dim() < 2 or x.shape[-2] < kernel:
        raise ShapeError(f"avg_pool_1d: cannot pool shape {tuple(x.shape)} with kernel {kernel}")
    lead = x.shape[:-2]
    flat = x.reshape(-1, x.shape[-2], x.shape[-1]).transpose(1, 2)
    out = F.avg_pool1d(flat, kernel_size=kernel, stride=stride)
    return out.transpose(1, 2).reshape(*lead, out.shape[-1], x.shape[-1])


@_op
def embedding_lookup(table, ids):
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    return F.embedding(ids, table)


@_op
def layer_norm(x, axis: int = -1, weight=None, bias=None, eps: float = 1e-5):
    axis = _axis(x, axis, "layer_norm")
    moved = x.movedim(axis, -1)
    out = F.layer_norm(moved, (moved.shape[-1],), weight, bias, eps)
    return out.movedim(-1, axis)


@_op
def masked_fill(x, mask, value: float):
    mask = torch.as_tensor(mask, dtype=torch.bool)
    _broadcast(x, mask, "masked_fill")
    return x.masked_fill(mask, value)


# ============================ gradients ============================

ParamSpec = Union[Mapping[str, torch.Tensor], Iterable[Tuple[str, torch.Tensor]]]


def backward(loss: torch.Tensor, params: ParamSpec, retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a gradient for every named leaf; leaves the loss does not reach get
    zeros. Nothing is accumulated into ``.grad``.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    named = list(params.items()) if isinstance(params, Mapping) else list(params)
    named = [(n, p) for n, p in named if p.requires_grad]
    if not named:
        return {}
    grads = torch.autograd.grad(loss.reshape(()), [p for _, p in named],
                                allow_unused=True, retain_graph=retain_graph)
    out = {}
    for (name, p), g in zip(named, grads):
        out[name] = torch.zeros_like(p) if g is None else assert_finite(g, f"gradient of {name}")
    return out


def finite_diff_check(f: Callable[[], torch.Tensor],
                      params: Sequence[torch.Tensor],
                      eps: float = 1e-5,
                      max_coords: Optional[int] = None,
                      generator: Optional[torch.Generator] = None,
                      floor: float = 1e-4) -> float:
    """Compare autograd gradients of ``f`` with central differences.

    ``f`` closes over ``params`` (leaf tensors) and returns a scalar. Each checked
    coordinate is perturbed in place by +/- eps. With ``max_coords`` only a
    random subset of coordinates per tensor is checked.

    The error is the largest per-coordinate relative difference
    |analytic - numeric| / max(|analytic|, |numeric|, floor). ``floor`` bounds the
    denominator for coordinates whose gradient is ~0.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    params = list(params)
    loss = f()
    if loss.numel() != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued f")
    if not torch.isfinite(loss).all():
        raise NonFiniteError("f evaluated to a non-finite value")
    analytic = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.view(-1)
            a_flat = a.reshape(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=generator)[:max_coords].tolist()
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = f()
                flat[i] = orig - eps
                f_minus = f()
                flat[i] = orig
                if not (torch.isfinite(f_plus).all() and torch.isfinite(f_minus).all()):
                    raise NonFiniteError("f evaluated to a non-finite value under perturbation")
                numeric = (f_plus.item() - f_minus.item()) / (2 * eps)
                exact = a_flat[i].item()
                rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, rel)
    return worst


# ============================ catalog registry ============================

@dataclass(frozen=True)
class OpSpec:
    """A catalog op plus a generator of differentiable inputs for gradient checks."""
    name: str
    fn: Callable[..., torch.Tensor]
    make_inputs: Callable[[torch.Generator, torch.dtype], Tuple[List[torch.Tensor], Callable[..., torch.Tensor]]]


def _rand(g, dtype, *shape, positive=False):
    x = torch.rand(*shape, generator=g, dtype=dtype) if positive else torch.randn(*shape, generator=g, dtype=dtype)
    if positive:
        x = x + 0.5
    return x.requires_grad_(True)


def _shape(g, low=2, high=5, ndim=2):
    return [int(torch.randint(low, high + 1, (1,), generator=g)) for _ in range(ndim)]


def _binary(fn):
    def make(g, dtype):
        shape = _shape(g)
        return [_rand(g, dtype, *shape), _rand(g, dtype, *shape)], fn
    return make


def _unary(fn, positive=False):
    def make(g, dtype):
        return [_rand(g, dtype, *_shape(g), positive=positive)], fn
    return make


def _make_matmul(g, dtype):
    n, k, m = _shape(g, ndim=3)
    return [_rand(g, dtype, n, k), _rand(g, dtype, k, m)], matmul


def _make_concat(g, dtype):
    n, m, c = _shape(g, ndim=3)
    return [_rand(g, dtype, n, c), _rand(g, dtype, m, c)], lambda a, b: concat([a, b], axis=0)


def _make_slice(g, dtype):
    n, c = _shape(g, low=3)
    return [_rand(g, dtype, n, c)], lambda x: slice_(x, 0, 1, x.shape[0])


def _make_pool(g, dtype):
    n, c = _shape(g, low=2, high=4)
    # distinct values keep the max unique under perturbation
    x = (torch.randperm(2 * n * c, generator=g)[: 2 * n * c].to(dtype) / (2 * n * c)).reshape(2 * n, c)
    return [x.requires_grad_(True)], lambda x: max_pool_1d(x, 2, 2)


def _make_embedding(g, dtype):
    v, c = _shape(g, low=3, high=6)
    ids = torch.randint(0, v, (4,), generator=g)
    return [_rand(g, dtype, v, c)], lambda t: embedding_lookup(t, ids)


def _make_layer_norm(g, dtype):
    n, c = _shape(g, low=3)
    return ([_rand(g, dtype, n, c), _rand(g, dtype, c), _rand(g, dtype, c)],
            lambda x, w, b: layer_norm(x, -1, w, b))


def _make_masked_fill(g, dtype):
    shape = _shape(g)
    mask = torch.rand(*shape, generator=g) > 0.5
    return [_rand(g, dtype, *shape)], lambda x: masked_fill(x, mask, 0.0)


OP_CATALOG: Dict[str, OpSpec] = {spec.name: spec for spec in [
    OpSpec("add", add, _binary(add)),
    OpSpec("sub", sub, _binary(sub)),
    OpSpec("mul", mul, _binary(mul)),
    OpSpec("scalar_mul", scalar_mul, _unary(lambda x: scalar_mul(x, -1.7))),
    OpSpec("matmul", matmul, _make_matmul),
    OpSpec("transpose", transpose, _unary(transpose)),
    OpSpec("reshape", reshape, _unary(lambda x: reshape(x, (-1,)))),
    OpSpec("concat", concat, _make_concat),
    OpSpec("slice", slice_, _make_slice),
    OpSpec("relu", relu, _unary(lambda x: relu(x + 0.05))),
    OpSpec("softmax", softmax, _unary(lambda x: softmax(x, -1))),
    OpSpec("log_softmax", log_softmax, _unary(lambda x: log_softmax(x, -1))),
    OpSpec("exp", exp, _unary(exp)),
    OpSpec("log", log, _unary(log, positive=True)),
    OpSpec("mean", mean, _unary(lambda x: mean(x, 0))),
    OpSpec("sum", sum_, _unary(lambda x: sum_(x, -1))),
    OpSpec("max_pool_1d", max_pool_1d, _make_pool),
    OpSpec("avg_pool_1d", avg_pool_1d, _unary(lambda x: avg_pool_1d(x, 2, 1))),
    OpSpec("embedding_lookup", embedding_lookup, _make_embedding),
    OpSpec("layer_norm", layer_norm, _make_layer_norm),
    OpSpec("masked_fill", masked_fill, _make_masked_fill),
]}


def catalog_objective(spec: OpSpec, generator: torch.Generator, dtype: torch.dtype = CHECK_DTYPE):
    """Build ``(f, leaves)`` for one catalog op.

    The op output is contracted with a fixed random tensor so that ops whose
    plain sum is constant (softmax) still have informative gradients.
    """
    leaves, fn = spec.make_inputs(generator, dtype)
    sample = fn(*leaves).detach()
    weights = torch.randn(sample.shape, generator=generator, dtype=dtype)

    def f():
        return (fn(*leaves) * weights).sum()
    return f, leaves

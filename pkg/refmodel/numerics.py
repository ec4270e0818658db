"""
Checked tensor primitives on top of torch autograd.

Every op validates operand shapes before dispatching to torch and rejects
non-finite results, so a shape bug or a numeric blow-up surfaces at the op
that caused it instead of several layers later. Broadcasting is limited to
leading batch dimensions: a lower-rank operand must match the trailing
dimensions of the other operand exactly.
"""

import contextlib
import logging

import torch
import torch.nn.functional as F

from errors import NumericFault, PrecisionError, ShapeError

logger = logging.getLogger(__name__)


def _check_finite(op, out):
    if not torch.isfinite(out).all():
        raise NumericFault(op, f"shape {tuple(out.shape)}")
    return out


def _check_trailing(op, a, b):
    """Allow b to broadcast over a's leading dimensions only."""
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.dim() >= b.dim() else (b, a)
    if small.dim() == 0 or tuple(big.shape[big.dim() - small.dim():]) != tuple(small.shape):
        raise ShapeError(op, a.shape, b.shape, detail="broadcast only over leading batch dims")


def _axis(op, x, axis):
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(op, x.shape, detail=f"axis {axis} out of range")
    return axis


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    if b.dim() > 2 and tuple(a.shape[:-2]) != tuple(b.shape[:-2]):
        raise ShapeError('matmul', a.shape, b.shape, detail="batch dims differ")
    return _check_finite('matmul', torch.matmul(a, b))


def linear(x, weight, bias=None):
    """x @ weight.T (+ bias), weight stored as (out, in)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError('linear', x.shape, weight.shape)
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError('linear', weight.shape, bias.shape, detail="bias")
    return _check_finite('linear', F.linear(x, weight, bias))


def add(a, b):
    _check_trailing('add', a, b)
    return _check_finite('add', a + b)


def mul(a, b):
    if isinstance(b, (int, float)):
        return _check_finite('mul', a * b)
    _check_trailing('mul', a, b)
    return _check_finite('mul', a * b)


def transpose(x, dim0, dim1):
    _axis('transpose', x, dim0)
    _axis('transpose', x, dim1)
    return x.transpose(dim0, dim1)


def slice_(x, axis, start, stop):
    axis = _axis('slice', x, axis)
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError('slice', x.shape, detail=f"[{start}:{stop}] on axis {axis}")
    return x.narrow(axis, start, stop - start)


def concat(tensors, axis):
    if not tensors:
        raise ShapeError('concat', detail="no operands")
    first = tensors[0]
    axis = _axis('concat', first, axis)
    for t in tensors[1:]:
        if t.dim() != first.dim() or any(
            t.shape[d] != first.shape[d] for d in range(first.dim()) if d != axis % first.dim()
        ):
            raise ShapeError('concat', *(t.shape for t in tensors))
    return torch.cat(tensors, dim=axis)


def softmax(x, axis=-1, causal=False):
    """
    Softmax along an axis.

    With causal=True the last two axes are treated as (query, key) and every
    key position after the query position receives probability exactly 0.
    """
    _axis('softmax', x, axis)
    if causal:
        if x.dim() < 2 or x.shape[-1] != x.shape[-2]:
            raise ShapeError('softmax', x.shape, detail="causal mask needs square trailing dims")
        n = x.shape[-1]
        future = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
        x = x.masked_fill(future, float('-inf'))
    return _check_finite('softmax', torch.softmax(x, dim=axis))


def log_softmax(x, axis=-1):
    _axis('log_softmax', x, axis)
    return _check_finite('log_softmax', torch.log_softmax(x, dim=axis))


def silu(x):
    return _check_finite('silu', F.silu(x))


def rms_normalize(x, axis=-1, eps=1e-5):
    """x / sqrt(mean(x^2) + eps) along axis; zero vectors stay zero."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    axis = _axis('rms_normalize', x, axis)
    inv_rms = torch.rsqrt(x.pow(2).mean(dim=axis, keepdim=True) + eps)
    return _check_finite('rms_normalize', x * inv_rms)


def embedding_lookup(weight, ids):
    if weight.dim() != 2:
        raise ShapeError('embedding_lookup', weight.shape, ids.shape)
    if ids.dtype not in (torch.int32, torch.int64):
        raise ShapeError('embedding_lookup', weight.shape, ids.shape, detail=f"ids dtype {ids.dtype}")
    return _check_finite('embedding_lookup', F.embedding(ids, weight))


def cross_entropy(logits, targets):
    """Mean cross-entropy in nats; logits (..., V), targets (...)."""
    if tuple(logits.shape[:-1]) != tuple(targets.shape):
        raise ShapeError('cross_entropy', logits.shape, targets.shape)
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
    return _check_finite('cross_entropy', loss)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch torch's default floating dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def require_float64(tensors):
    for t in tensors:
        if t.dtype != torch.float64:
            raise PrecisionError(f"gradient checks need float64 tensors, got {t.dtype}")


def set_determinism(seed, threads=1):
    """Seed torch and pin the CPU thread count so reruns are bit-stable."""
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def grad_check(scalar_fn, params, eps=1e-5, atol=0.0):
    """
    Compare autograd gradients against central finite differences.

    Args:
        scalar_fn: Callable with no arguments returning a scalar tensor that
            depends on params
        params: Sequence of float64 leaf tensors with requires_grad=True
        eps: Finite-difference step, in (0, 1e-2]
        atol: Lower bound on the error denominator; 0 gives the plain
            relative error |a - n| / (|a| + |n| + 1e-12)

    Returns:
        float: Maximum per-coordinate error over all parameters
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    require_float64(params)

    for p in params:
        p.grad = None
    out = scalar_fn()
    if out.numel() != 1:
        raise ShapeError('grad_check', out.shape, detail="scalar_fn must return a scalar")
    _check_finite('grad_check', out)
    analytic = torch.autograd.grad(out, params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                f_plus = scalar_fn().item()
                flat[i] = original - eps
                f_minus = scalar_fn().item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2 * eps)
                if not (abs(f_plus) < float('inf') and abs(f_minus) < float('inf')):
                    raise NumericFault('grad_check', f"coordinate {i}")
                a = g_flat[i].item()
                err = abs(a - numeric) / max(abs(a) + abs(numeric) + 1e-12, atol)
                worst = max(worst, err)
    logger.debug(f"grad_check over {sum(p.numel() for p in params)} coordinates: max error {worst:.3e}")
    return worst

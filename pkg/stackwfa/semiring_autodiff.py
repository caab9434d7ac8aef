"""Log-semiring tensor arithmetic and the differentiation tape.

Weights live in log space: log-multiply is element-wise ``+``, log-add is
:func:`logsumexp`, and ``-inf`` is the semiring zero. Reverse-mode
differentiation is torch autograd; :class:`Tape` is the per-step record on top
of it that owns the parameter registry and names the operation responsible
for a non-finite value.
"""
import contextvars
import dataclasses
import logging
from functools import wraps

import torch

from .errors import NumericalError, UsageError

logger = logging.getLogger(__name__)

# A torch tensor of natural-log weights; -inf is weight zero, +inf and NaN are forbidden.
LogWeightTensor = torch.Tensor

NEG_INF = float('-inf')

_active_tape = contextvars.ContextVar('stackwfa_active_tape', default=None)


def _normalize_dims(values, dim):
    dims = (dim,) if isinstance(dim, int) else tuple(dim)
    if not dims:
        raise UsageError("logsumexp needs at least one axis")
    ndim = values.dim()
    normalized = []
    for d in dims:
        if not -ndim <= d < ndim:
            raise UsageError(f"Axis {d} is invalid for a tensor of shape {tuple(values.shape)}")
        normalized.append(d % ndim)
    if len(set(normalized)) != len(normalized):
        raise UsageError(f"Repeated axis in {dims}")
    return tuple(sorted(normalized))


class _LogSumExp(torch.autograd.Function):

    @staticmethod
    def forward(ctx, values, dims):
        # Clipping the shift to the smallest float keeps all -inf slices at -inf
        # instead of producing (-inf) - (-inf) = nan.
        shift = values.amax(dim=dims, keepdim=True).clamp(min=torch.finfo(values.dtype).min)
        result = (values - shift).exp().sum(dim=dims, keepdim=True).log() + shift
        ctx.save_for_backward(values, result)
        ctx.dims = dims
        out = result
        for d in reversed(dims):
            out = out.squeeze(d)
        return out

    @staticmethod
    def backward(ctx, grad):
        values, result = ctx.saved_tensors
        weights = (values - result).exp()
        # The output is constant on an all -inf slice, so its gradient is zero there.
        weights = torch.where(torch.isneginf(result), torch.zeros_like(weights), weights)
        return grad.reshape(result.shape) * weights, None


def logsumexp(values, dim):
    """``log(sum(exp(values)))`` over one axis or a tuple of axes."""
    return _LogSumExp.apply(values, _normalize_dims(values, dim))


def log_add(*terms):
    """Semiring sum of equally shaped log-weight tensors."""
    if len(terms) == 1:
        return terms[0]
    return logsumexp(torch.stack(terms), 0)


def log_einsum(equation, *operands):
    """Einsum in the log semiring: products become sums, sums become logsumexp.

    Supports explicit ``'ab,bc->ac'`` equations without repeated letters inside
    one operand. Operands are broadcast to one joint tensor before summing out, which
    suits the small tensors of the stack WFA.
    """
    try:
        inputs, output = equation.replace(' ', '').split('->')
    except ValueError:
        raise UsageError(f"Equation {equation!r} must have the form 'ab,bc->ac'")
    inputs = inputs.split(',')
    if len(inputs) != len(operands):
        raise UsageError(f"Equation {equation!r} expects {len(inputs)} operands, got {len(operands)}")
    letters = list(dict.fromkeys(''.join(inputs)))
    for c in output:
        if c not in letters:
            raise UsageError(f"Output index {c!r} of {equation!r} does not appear in any input")
    order = list(output) + [c for c in letters if c not in output]
    total = None
    for subscripts, operand in zip(inputs, operands):
        if len(set(subscripts)) != len(subscripts):
            raise UsageError(f"Repeated index inside operand {subscripts!r}")
        if operand.dim() != len(subscripts):
            raise UsageError(f"Operand {subscripts!r} has shape {tuple(operand.shape)}")
        perm = sorted(range(len(subscripts)), key=lambda k: order.index(subscripts[k]))
        shape = [operand.shape[subscripts.index(c)] if c in subscripts else 1 for c in order]
        view = operand.permute(perm).reshape(shape)
        total = view if total is None else total + view
    summed = tuple(range(len(output), len(order)))
    if summed:
        total = logsumexp(total, summed)
    return total


@dataclasses.dataclass
class TapeRecord:
    name: str
    value: torch.Tensor
    log_domain: bool = False

    def is_finite(self):
        value = self.value.detach()
        if self.log_domain:
            return not (torch.isnan(value).any() or torch.isposinf(value).any())
        return bool(torch.isfinite(value).all())


class Tape:
    """Append-only record of one forward pass plus the parameters it may touch.

    Activate with ``with tape:``; primitives then :func:`record` their outputs
    in execution order, which is a topological order of the computation.
    """

    def __init__(self):
        self.records = []
        self.parameters = {}
        self._token = None

    def register(self, name, tensor):
        if name in self.parameters:
            raise UsageError(f"Parameter {name} is already registered")
        self.parameters[name] = tensor
        return tensor

    def register_module(self, module, prefix=''):
        for name, parameter in module.named_parameters():
            self.register(prefix + name, parameter)
        return self

    def record(self, name, value, log_domain=False):
        self.records.append(TapeRecord(name, value, log_domain))
        return value

    def first_non_finite(self):
        for index, record in enumerate(self.records):
            if not record.is_finite():
                return index, record.name
        return None

    def __enter__(self):
        if self._token is not None:
            raise UsageError("Tape is already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False


def active_tape():
    return _active_tape.get()


def record(name, value, log_domain=False):
    """Record ``value`` on the active tape, if any, and return it unchanged."""
    tape = _active_tape.get()
    if tape is not None:
        tape.record(name, value, log_domain)
    return value


def checked(name):
    """Raise :class:`NumericalError` when the wrapped operation returns NaN or inf.

    Every tensor in a returned tuple is inspected, including tensor fields of
    returned dataclasses.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            result = func(*args, **kwargs)
            items = result if isinstance(result, tuple) else (result,)
            for item in items:
                tensors = [item] if isinstance(item, torch.Tensor) else []
                if dataclasses.is_dataclass(item):
                    tensors = [getattr(item, f.name) for f in dataclasses.fields(item)]
                for tensor in tensors:
                    if isinstance(tensor, torch.Tensor) and not bool(torch.isfinite(tensor.detach()).all()):
                        raise NumericalError(f"Non-finite activation in {name}")
            return result
        return wrapper
    return decorator


def backward(tape, loss):
    """Gradients of a scalar ``loss`` for every parameter registered on ``tape``."""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise UsageError("Loss must be a scalar tensor")
    if not bool(torch.isfinite(loss.detach())):
        culprit = tape.first_non_finite()
        where = f"operation #{culprit[0]} ({culprit[1]})" if culprit else "an unrecorded operation"
        raise NumericalError(f"Loss is {loss.item()}; first non-finite value came from {where}")
    names = list(tape.parameters)
    tensors = [tape.parameters[n] for n in names]
    if not tensors:
        return {}
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    result = {}
    for name, tensor, grad in zip(names, tensors, grads):
        if grad is None:
            grad = torch.zeros_like(tensor)
        elif not bool(torch.isfinite(grad).all()):
            raise NumericalError(f"Non-finite gradient for parameter {name}")
        result[name] = grad
    return result


def _evaluate(function, point):
    with torch.no_grad():
        value = function(point)
    value = float(value)
    if value != value or value in (float('inf'), float('-inf')):
        raise NumericalError(f"Function value {value} at a finite-difference point")
    return value


def check_gradients(function, point, step=1e-5, max_coordinates=None, seed=0):
    """Worst relative error between tape gradients and central differences.

    ``point`` is a tensor or a dict of named tensors; ``function`` receives the
    same structure and returns a scalar. Errors fall back to absolute when both
    derivatives are below 1e-8 in magnitude. ``max_coordinates`` checks a seeded
    random subset of coordinates of each tensor.
    """
    if step <= 0:
        raise UsageError("Finite-difference step must be positive")
    single = isinstance(point, torch.Tensor)
    named = {'x': point} if single else dict(point)
    leaves = {n: t.detach().clone().requires_grad_(True) for n, t in named.items()}

    def call(values):
        return function(values['x'] if single else values)

    tape = Tape()
    for name, leaf in leaves.items():
        tape.register(name, leaf)
    with tape:
        value = call(leaves)
    grads = backward(tape, value)

    generator = torch.Generator().manual_seed(seed)
    perturbed = {n: t.detach().clone() for n, t in leaves.items()}
    worst = 0.0
    for name, tensor in perturbed.items():
        flat = tensor.view(-1)
        coordinates = range(flat.numel())
        if max_coordinates is not None and flat.numel() > max_coordinates:
            coordinates = torch.randperm(flat.numel(), generator=generator)[:max_coordinates].tolist()
        analytic = grads[name].reshape(-1)
        for k in coordinates:
            original = flat[k].item()
            flat[k] = original + step
            upper = _evaluate(call, perturbed)
            flat[k] = original - step
            lower = _evaluate(call, perturbed)
            flat[k] = original
            numeric = (upper - lower) / (2 * step)
            exact = analytic[k].item()
            error = abs(exact - numeric)
            scale = max(abs(exact), abs(numeric))
            if scale >= 1e-8:
                error /= scale
            worst = max(worst, error)
    logger.debug(f"Gradient check worst error {worst:.3e}")
    return worst

"""Differentiable simulation of a weighted PDA through its stack WFA.

Every weight is a log weight. The DP tables are kept per time step:

* ``γ`` column ``t`` is a tensor ``[B, rows, Q, Γ, Q, Γ]`` whose rows are the
  start times ``i = first_row(t) .. t-1`` of the edges ``γ[i→t][q,x→r,y]``.
* ``α[t]`` and ``β[t]`` are ``[B, Q, Γ]``. ``β`` is the bottom-level weight:
  runs whose stack holds exactly one symbol at ``t`` (the initial ``⊥``,
  possibly replaced). ``α[t] = β[t] ⊕ ⊕_i α[i] ⊗ γ[i→t]``.

Operations are indexed ``push y`` = ``y``, ``replace y`` = ``|Γ| + y``,
``pop`` = ``2|Γ|``.
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .controller import StackModule
from .errors import UsageError
from .semiring_autodiff import NEG_INF, log_add, log_einsum, logsumexp, record

logger = logging.getLogger(__name__)

READING_MODES = ('symbols', 'joint')
BRUTE_FORCE_MAX_STEPS = 12
BRUTE_FORCE_MAX_CONFIGURATIONS = 2_000_000


@dataclass(frozen=True)
class PdaSignature:
    num_states: int
    num_symbols: int

    initial_state = 0
    bottom_symbol = 0

    def __post_init__(self):
        if self.num_states < 1 or self.num_symbols < 1:
            raise UsageError(f"PDA needs at least one state and one stack symbol, got {self}")

    @property
    def num_operations(self):
        return 2 * self.num_symbols + 1

    @property
    def transition_shape(self):
        return (self.num_states, self.num_symbols, self.num_states, self.num_operations)

    @property
    def num_transitions(self):
        return math.prod(self.transition_shape)


def split_operations(delta):
    """``(push, replace, pop)`` views of ``Δ`` ``[..., Q, Γ, Q, 2Γ+1]``."""
    symbols = (delta.shape[-1] - 1) // 2
    return delta[..., :symbols], delta[..., symbols:2 * symbols], delta[..., 2 * symbols]


def transition_weights(affine_output, signature, normalized):
    """``log Δ[t]`` from the action layer output ``[B, |Q||Γ||Q|(2|Γ|+1)]``.

    Normalized weights are a softmax over ``(r, υ)`` for every ``(q, x)``;
    unnormalized weights are ``exp`` of the affine output, i.e. the output is
    already the log weight.
    """
    batch_size = affine_output.shape[0]
    q, x, r, ops = signature.transition_shape
    if normalized:
        logits = affine_output.reshape(batch_size, q, x, r * ops)
        return torch.log_softmax(logits, dim=-1).reshape(batch_size, q, x, r, ops)
    return affine_output.reshape(batch_size, q, x, r, ops)


def first_row(t, span=None):
    """Earliest start time ``i`` of a ``γ[i→t]`` edge kept under the band."""
    return 0 if span is None else max(0, t - span)


def _pad_rows(tensor, rows):
    missing = rows - tensor.shape[1]
    if missing == 0:
        return tensor
    filler = tensor.new_full((tensor.shape[0], missing) + tuple(tensor.shape[2:]), NEG_INF)
    return torch.cat([tensor, filler], dim=1)


def _check_columns(columns, t, span):
    if t < 1:
        raise UsageError(f"Stack WFA time steps start at 1, got {t}")
    if t == 1:
        if len(columns):
            raise UsageError("γ column 1 requested but later columns already exist")
        return
    if not len(columns):
        raise UsageError(f"γ column {t} requested before column {t - 1}")
    expected = (t - 1) - first_row(t - 1, span)
    if columns[-1].shape[1] != expected:
        raise UsageError(f"γ column {t} requested out of order: last column has "
                         f"{columns[-1].shape[1]} rows, column {t - 1} has {expected}")


def gamma_step(columns, delta, t, span=None):
    """γ column ``t`` from the earlier columns and ``Δ[t]``.

    ``columns[-1]`` must be column ``t-1``; column ``k`` is read at index
    ``k - t``, so a list holding every column and a window holding the last
    ``span`` columns both work. Edges longer than ``span`` have weight zero.
    """
    _check_columns(columns, t, span)
    push, replace, pop = split_operations(delta)
    lo = first_row(t, span)
    rows = t - lo
    push_row = push.unsqueeze(1)
    if rows == 1:
        return record('stack_wfa.gamma', push_row, log_domain=True)
    previous = columns[-1]
    replaced = log_einsum('biqxsz,bszry->biqxry', previous[:, -(rows - 1):], replace)
    if rows > 2:
        # γ[i→k] ⊗ γ[k→t-1] ⊗ pop, for lo <= i < k <= t-2
        finishing = log_einsum('bkuysz,bszr->bkuyr', previous[:, -(rows - 2):], pop)
        starting = torch.stack(
            [_pad_rows(columns[k - t][:, -(k - lo):], rows - 2) for k in range(lo + 1, t - 1)], dim=1)
        popped = log_einsum('bkiqxuy,bkuyr->biqxry', starting, finishing)
        body = torch.cat([log_add(replaced[:, :-1], popped), replaced[:, -1:]], dim=1)
    else:
        body = replaced
    return record('stack_wfa.gamma', torch.cat([body, push_row], dim=1), log_domain=True)


def alpha_step(alphas, betas, columns, delta, t, span=None):
    """``(α[t], β[t])`` given ``α``/``β`` up to ``t-1`` and γ columns up to ``t``.

    ``alphas`` must hold at least ``α[first_row(t)] .. α[t-1]`` and ``betas``
    at least ``β[first_row(t-1)] .. β[t-1]``, oldest first.
    """
    if len(alphas) != len(betas) and span is None:
        raise UsageError("α and β tables are out of step")
    column = columns[-1]
    lo = first_row(t, span)
    if column.shape[1] != t - lo:
        raise UsageError(f"α[{t}] requested before γ column {t}")
    _, replace, pop = split_operations(delta)
    bottom = [log_einsum('bsz,bszry->bry', betas[-1], replace)]
    if t > 1:
        previous = columns[-2]
        count = previous.shape[1]
        starts = torch.stack(list(betas)[-(count + 1):-1], dim=1)
        bottom.append(log_einsum('bkuy,bkuysz,bszr->bry', starts, previous, pop))
    beta = log_add(*bottom)
    earlier = torch.stack(list(alphas)[-(t - lo):], dim=1)
    alpha = log_add(beta, log_einsum('biqx,biqxry->bry', earlier, column))
    return record('stack_wfa.alpha', alpha, log_domain=True), beta


def reading(alpha, mode='symbols'):
    """Renormalized stack reading from ``α[t]`` ``[B, Q, Γ]``.

    ``symbols`` marginalizes the PDA state out (size ``|Γ|``); ``joint`` keeps
    it (size ``|Q||Γ|``). An all-zero ``α[t]`` reads as uniform.
    """
    if mode == 'symbols':
        scores = logsumexp(alpha, 1)
    elif mode == 'joint':
        scores = alpha.reshape(alpha.shape[0], -1)
    else:
        raise UsageError(f"Unknown reading mode {mode!r}, expected one of {READING_MODES}")
    degenerate = torch.isneginf(scores).all(dim=-1, keepdim=True)
    scores = torch.where(degenerate, torch.zeros_like(scores), scores)
    return torch.softmax(scores, dim=-1)


def initial_alpha(signature, batch_size, like):
    alpha = like.new_full((batch_size, signature.num_states, signature.num_symbols), NEG_INF)
    alpha[:, signature.initial_state, signature.bottom_symbol] = 0.0
    return alpha


@dataclass
class StackWFAState:
    columns: list
    alphas: list
    betas: list
    t: int = 0


class NondeterministicStack(StackModule):
    """Stack WFA driven by an LSTM; ``span`` limits γ edges to ``t - i <= span``.

    ``normalized`` selects softmax transition weights (NS) over unnormalized
    ones (RNS); ``mode`` is the reading mode.
    """

    def __init__(self, hidden_size, signature, normalized=False, mode='joint', span=None):
        super(NondeterministicStack, self).__init__()
        if mode not in READING_MODES:
            raise UsageError(f"Unknown reading mode {mode!r}")
        if span is not None and span < 1:
            raise UsageError(f"Band span must be positive, got {span}")
        self.signature = signature
        self.normalized = normalized
        self.mode = mode
        self.span = span
        self.reading_size = signature.num_states * signature.num_symbols if mode == 'joint' else signature.num_symbols
        self.layer = nn.Linear(hidden_size, signature.num_transitions)

    def initial_state(self, batch_size, like):
        alpha = initial_alpha(self.signature, batch_size, like)
        return StackWFAState([], [alpha], [alpha], 0)

    def actions(self, hidden):
        return transition_weights(self.layer(hidden), self.signature, self.normalized)

    def transition(self, state, delta):
        t = state.t + 1
        column = gamma_step(state.columns, delta, t, self.span)
        columns = state.columns + [column]
        alpha, beta = alpha_step(state.alphas, state.betas, columns, delta, t, self.span)
        return StackWFAState(columns, state.alphas + [alpha], state.betas + [beta], t)

    def reading(self, state):
        return record('stack_wfa.reading', reading(state.alphas[-1], self.mode))

    def detach_state(self, state):
        return StackWFAState([c.detach() for c in state.columns], [a.detach() for a in state.alphas],
                             [b.detach() for b in state.betas], state.t)


def alpha_table(log_deltas, signature, span=None):
    """Forward weights ``α[0..n]`` ``[B, n+1, Q, Γ]`` for ``log Δ[1..n]`` ``[B, n, ...]``."""
    batch_size, steps = log_deltas.shape[:2]
    if tuple(log_deltas.shape[2:]) != signature.transition_shape:
        raise UsageError(f"Transition tensor shape {tuple(log_deltas.shape[2:])} does not match {signature}")
    alpha = initial_alpha(signature, batch_size, log_deltas)
    columns, alphas, betas = [], [alpha], [alpha]
    for t in range(1, steps + 1):
        delta = log_deltas[:, t - 1]
        columns.append(gamma_step(columns, delta, t, span))
        alpha, beta = alpha_step(alphas, betas, columns, delta, t, span)
        alphas.append(alpha)
        betas.append(beta)
    return torch.stack(alphas, dim=1)


# Brute-force oracles over explicit stacks. Configurations (state, stack) reached
# by different runs are merged by summing their weights, which leaves every
# total unchanged.

@dataclass
class BruteForceMarginals:
    log_alpha: np.ndarray
    symbol_readings: np.ndarray
    joint_readings: np.ndarray


@dataclass
class TransitionPosterior:
    log_total: float
    probabilities: Optional[np.ndarray]

    @property
    def empty(self):
        return self.probabilities is None


def _validate_instance(log_deltas):
    log_deltas = np.asarray(log_deltas, dtype=np.float64)
    if log_deltas.ndim != 5:
        raise UsageError("Expected log Δ of shape [n, Q, Γ, Q, 2Γ+1]")
    steps, num_states, num_symbols = log_deltas.shape[:3]
    if log_deltas.shape[3] != num_states or log_deltas.shape[4] != 2 * num_symbols + 1:
        raise UsageError(f"Inconsistent transition tensor shape {log_deltas.shape}")
    if steps > BRUTE_FORCE_MAX_STEPS:
        raise UsageError(f"Brute-force enumeration is limited to {BRUTE_FORCE_MAX_STEPS} steps, got {steps}")
    configurations = num_states * sum(num_symbols ** h for h in range(1, steps + 2))
    if configurations > BRUTE_FORCE_MAX_CONFIGURATIONS:
        raise UsageError(f"Instance too large for enumeration ({configurations} configurations)")
    return log_deltas


def _successors(stack, num_states, num_symbols):
    """``(r, operation, new stack)`` for every transition out of ``stack``."""
    for r in range(num_states):
        for y in range(num_symbols):
            yield r, y, stack + (y,)
            yield r, num_symbols + y, stack[:-1] + (y,)
        if len(stack) > 1:
            yield r, 2 * num_symbols, stack[:-1]


def _configuration_layers(deltas, steps):
    num_states, num_symbols = deltas.shape[1], deltas.shape[2]
    layers = [{(0, (0,)): 1.0}]
    for t in range(steps):
        following = defaultdict(float)
        for (q, stack), weight in layers[-1].items():
            for r, op, successor in _successors(stack, num_states, num_symbols):
                w = weight * deltas[t, q, stack[-1], r, op]
                if w > 0.0:
                    following[(r, successor)] += w
        layers.append(dict(following))
    return layers


def _normalize(weights):
    total = weights.sum()
    if total == 0.0:
        return np.full_like(weights, 1.0 / weights.size)
    return weights / total


def brute_force_marginals(log_deltas):
    """Total run weight per ``(t, r, y)`` and per-step readings by enumeration.

    Runs start in ``q₀`` with stack ``[⊥]``; popping the last symbol kills the run.
    """
    log_deltas = _validate_instance(log_deltas)
    steps, num_states, num_symbols = log_deltas.shape[:3]
    layers = _configuration_layers(np.exp(log_deltas), steps)
    totals = np.zeros((steps + 1, num_states, num_symbols))
    for t, layer in enumerate(layers):
        for (r, stack), weight in layer.items():
            totals[t, r, stack[-1]] += weight
    with np.errstate(divide='ignore'):
        log_alpha = np.log(totals)
    symbols = np.stack([_normalize(totals[t].sum(axis=0)) for t in range(steps + 1)])
    joint = np.stack([_normalize(totals[t].reshape(-1)) for t in range(steps + 1)])
    return BruteForceMarginals(log_alpha, symbols, joint)


def posterior_transition_probs(log_deltas, t, condition):
    """Posterior of using each transition at each step ``1..t`` given ``(r, y)`` at ``t``.

    ``probabilities[i-1][q, x, r', υ]`` is the weight of runs that take
    ``q,x → r',υ`` at step ``i`` and end in ``condition`` at ``t``, divided by
    the weight of all runs ending there. A zero-weight condition gives an
    empty posterior.
    """
    log_deltas = _validate_instance(log_deltas)
    steps, num_states, num_symbols = log_deltas.shape[:3]
    if not 1 <= t <= steps:
        raise UsageError(f"Conditioning step {t} outside 1..{steps}")
    state, symbol = condition
    deltas = np.exp(log_deltas)
    layers = _configuration_layers(deltas, t)
    after = {c: 1.0 if c[0] == state and c[1][-1] == symbol else 0.0 for c in layers[t]}
    total = sum(layers[t][c] * b for c, b in after.items())
    if total == 0.0:
        return TransitionPosterior(NEG_INF, None)
    posterior = np.zeros((t,) + log_deltas.shape[1:])
    for i in range(t, 0, -1):
        before = {}
        for (q, stack), forward in layers[i - 1].items():
            x = stack[-1]
            completion = 0.0
            for r, op, successor in _successors(stack, num_states, num_symbols):
                w = deltas[i - 1, q, x, r, op] * after.get((r, successor), 0.0)
                posterior[i - 1, q, x, r, op] += forward * w
                completion += w
            before[(q, stack)] = completion
        after = before
    return TransitionPosterior(math.log(total), posterior / total)


def _log_error(computed, expected):
    if not np.array_equal(np.isneginf(computed), np.isneginf(expected)):
        return math.inf
    finite = np.isfinite(expected)
    if not finite.any():
        return 0.0
    return float(np.abs(computed[finite] - expected[finite]).max())


def enumeration_errors(log_deltas):
    """``(α error, reading error)`` of the DP against enumeration on one instance.

    α is compared in log space; readings of both modes by absolute difference.
    """
    log_deltas = np.asarray(log_deltas, dtype=np.float64)
    expected = brute_force_marginals(log_deltas)
    signature = PdaSignature(log_deltas.shape[1], log_deltas.shape[2])
    with torch.no_grad():
        alpha = alpha_table(torch.from_numpy(log_deltas).unsqueeze(0), signature)[0]
        symbols = reading(alpha, 'symbols').numpy()
        joint = reading(alpha, 'joint').numpy()
    reading_error = max(np.abs(symbols - expected.symbol_readings).max(),
                        np.abs(joint - expected.joint_readings).max())
    return _log_error(alpha.numpy(), expected.log_alpha), float(reading_error)


def posterior_error(log_deltas, t, condition):
    """Largest difference between ``∂ log α[t][r,y] / ∂ log Δ`` and the enumerated posterior."""
    log_deltas = np.asarray(log_deltas, dtype=np.float64)
    signature = PdaSignature(log_deltas.shape[1], log_deltas.shape[2])
    posterior = posterior_transition_probs(log_deltas, t, condition)
    leaf = torch.tensor(log_deltas, requires_grad=True)
    target = alpha_table(leaf.unsqueeze(0), signature)[0, t, condition[0], condition[1]]
    if posterior.empty:
        return 0.0 if bool(torch.isneginf(target)) else math.inf
    gradient = torch.autograd.grad(target, leaf)[0].numpy()
    later = np.abs(gradient[t:]).max() if t < len(gradient) else 0.0
    return float(max(np.abs(gradient[:t] - posterior.probabilities).max(), later))

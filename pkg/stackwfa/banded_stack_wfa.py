"""Memory-limited stack WFA: γ edges restricted to ``t - i <= D``.

Only a window of the DP tables is kept, so every step costs the same for a
fixed ``D`` and the window can be carried from one truncated-BPTT chunk to
the next like an RNN hidden state.
"""
import logging
from collections import deque
from dataclasses import dataclass

import torch

from .errors import UsageError
from .semiring_autodiff import record
from .stack_wfa import (READING_MODES, NondeterministicStack, PdaSignature, alpha_step, gamma_step,
                        initial_alpha, reading)

logger = logging.getLogger(__name__)

DEFAULT_SPAN = 35


@dataclass(frozen=True)
class BandConfig:
    span: int
    signature: PdaSignature
    normalized: bool = False
    mode: str = 'joint'

    def __post_init__(self):
        if self.span < 1:
            raise UsageError(f"Band span D must be at least 1, got {self.span}")
        if self.mode not in READING_MODES:
            raise UsageError(f"Unknown reading mode {self.mode!r}")


@dataclass
class WindowState:
    """Last ``D`` γ columns, last ``D`` α entries and last ``D+1`` β entries."""
    signature: PdaSignature
    span: int
    columns: deque
    alphas: deque
    betas: deque
    t: int = 0

    @classmethod
    def start(cls, config, batch_size, like):
        alpha = initial_alpha(config.signature, batch_size, like)
        return cls(config.signature, config.span, deque(maxlen=config.span),
                   deque([alpha], maxlen=config.span), deque([alpha], maxlen=config.span + 1), 0)

    @property
    def batch_size(self):
        return self.alphas[-1].shape[0]

    def tensors(self):
        return list(self.columns) + list(self.alphas) + list(self.betas)

    def num_elements(self):
        return sum(t.numel() for t in self.tensors())

    def replace(self, convert):
        return WindowState(self.signature, self.span,
                           deque((convert(c) for c in self.columns), maxlen=self.span),
                           deque((convert(a) for a in self.alphas), maxlen=self.span),
                           deque((convert(b) for b in self.betas), maxlen=self.span + 1), self.t)


def _check_window(window, config, delta):
    if window.signature != config.signature or window.span != config.span:
        raise UsageError(f"Window built for {window.signature} with D={window.span} "
                         f"used with {config.signature} and D={config.span}")
    if tuple(delta.shape[1:]) != config.signature.transition_shape:
        raise UsageError(f"Transition tensor shape {tuple(delta.shape[1:])} does not match {config.signature}")
    if len(window.columns) != min(window.t, window.span):
        raise UsageError(f"Window at step {window.t} holds {len(window.columns)} γ columns")


def banded_step(window, delta, config):
    """Advance ``window`` by ``Δ[t]``; returns the new window and the reading at ``t``.

    The old window is left untouched. The oldest column, α and β entries are
    evicted once the new ones have been computed.
    """
    _check_window(window, config, delta)
    t = window.t + 1
    column = gamma_step(window.columns, delta, t, config.span)
    columns = list(window.columns) + [column]
    alpha, beta = alpha_step(window.alphas, window.betas, columns, delta, t, config.span)
    stack_reading = record('banded_stack_wfa.reading', reading(alpha, config.mode))
    following = WindowState(config.signature, config.span,
                            deque(columns, maxlen=config.span),
                            deque(list(window.alphas) + [alpha], maxlen=config.span),
                            deque(list(window.betas) + [beta], maxlen=config.span + 1), t)
    return following, stack_reading


def detach_window(window):
    return window.replace(torch.Tensor.detach)


class BandedNondeterministicStack(NondeterministicStack):
    """:class:`NondeterministicStack` over a :class:`WindowState`."""

    def __init__(self, hidden_size, signature, normalized=False, mode='joint', span=DEFAULT_SPAN):
        super(BandedNondeterministicStack, self).__init__(hidden_size, signature, normalized, mode, span)
        self.config = BandConfig(span, signature, normalized, mode)

    def initial_state(self, batch_size, like):
        return WindowState.start(self.config, batch_size, like)

    def transition(self, state, delta):
        return banded_step(state, delta, self.config)[0]

    def reading(self, state):
        return record('banded_stack_wfa.reading', reading(state.alphas[-1], self.mode))

    def detach_state(self, state):
        return detach_window(state)

    def slice_state(self, state, batch_size):
        return state.replace(lambda tensor: tensor[:batch_size])

    def state_arrays(self, state):
        arrays = {'step': torch.tensor([state.t], dtype=torch.int64)}
        for name, tensors in (('column', state.columns), ('alpha', state.alphas), ('beta', state.betas)):
            for index, tensor in enumerate(tensors):
                arrays[f'{name}.{index}'] = tensor.detach()
        return arrays

    def load_state_arrays(self, arrays, batch_size, like):
        if 'step' not in arrays:
            return self.initial_state(batch_size, like)

        def collect(name):
            keys = sorted((k for k in arrays if k.startswith(name + '.')), key=lambda k: int(k.split('.')[1]))
            return [arrays[k].to(like.dtype) for k in keys]

        state = WindowState(self.signature, self.span,
                            deque(collect('column'), maxlen=self.span),
                            deque(collect('alpha'), maxlen=self.span),
                            deque(collect('beta'), maxlen=self.span + 1),
                            int(arrays['step'][0]))
        if len(state.columns) != min(state.t, self.span) or not state.alphas:
            raise UsageError(f"Stored window for step {state.t} is incomplete")
        return state

"""LSTM controller and the controller-stack interface.

At controller step t the LSTM reads ``[x_t; r_{t-1}]``, emits actions ``a_t`` and
logits ``y_t`` from ``h_t``, the stack consumes ``a_t`` in the same step and
its new reading ``r_t`` is fed to step t+1.

Step 0 reads a learned start-of-sequence vector instead of a token, so
``y_0`` predicts the first symbol; the stack therefore advances once more than
there are tokens, and the action bundle of controller step k is the stack's
``Δ[k+1]``.
"""
import logging
from dataclasses import dataclass
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import UsageError
from .semiring_autodiff import checked, record

logger = logging.getLogger(__name__)


@dataclass
class ControllerState:
    h: torch.Tensor
    c: torch.Tensor

    def detach(self):
        return ControllerState(self.h.detach(), self.c.detach())

    def slice(self, batch_size):
        return ControllerState(self.h[:batch_size], self.c[:batch_size])


@dataclass
class StepOutput:
    logits: torch.Tensor
    actions: Any
    reading: torch.Tensor


class StackModule(nn.Module):
    """A differentiable stack: ``Actions``, ``Stack``, ``Reading`` and ``s_0``.

    Subclasses set ``reading_size`` and keep their per-sequence data in a
    state object that they create, advance and read; the module itself only
    holds the action layers.
    """
    reading_size = 0

    def initial_state(self, batch_size, like):
        raise NotImplementedError

    def actions(self, hidden):
        raise NotImplementedError

    def transition(self, state, actions):
        raise NotImplementedError

    def reading(self, state):
        raise NotImplementedError

    def detach_state(self, state):
        return state

    def slice_state(self, state, batch_size):
        return state

    def state_arrays(self, state):
        """Named tensors that let :meth:`load_state_arrays` rebuild ``state``."""
        return {}

    def load_state_arrays(self, arrays, batch_size, like):
        return self.initial_state(batch_size, like)


class NullStack(StackModule):
    """No stack at all; the controller is a plain LSTM."""
    reading_size = 0

    def initial_state(self, batch_size, like):
        return None

    def actions(self, hidden):
        return None

    def transition(self, state, actions):
        return None

    def reading(self, state):
        return None


class StackRNN(nn.Module):

    def __init__(self, vocab_size, hidden_size, stack, eos=True):
        super(StackRNN, self).__init__()
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.stack = stack
        self.eos = eos
        self.output_size = vocab_size + 1 if eos else vocab_size
        self.lstm = nn.LSTMCell(vocab_size + stack.reading_size, hidden_size)
        self.output = nn.Linear(hidden_size, self.output_size)
        self.start_input = nn.Parameter(torch.zeros(vocab_size))

    @property
    def eos_index(self):
        return self.vocab_size if self.eos else None

    def initial_state(self, batch_size):
        zeros = self.output.weight.new_zeros(batch_size, self.hidden_size)
        return ControllerState(zeros, zeros.clone())

    def initial_stack(self, batch_size):
        stack_state = self.stack.initial_state(batch_size, self.output.weight)
        return stack_state, self._reading(stack_state, batch_size)

    def _reading(self, stack_state, batch_size):
        reading = self.stack.reading(stack_state)
        if reading is None:
            reading = self.output.weight.new_zeros(batch_size, 0)
        return reading

    def encode(self, tokens):
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size):
            raise UsageError(f"Token id outside vocabulary of size {self.vocab_size}")
        return F.one_hot(tokens, self.vocab_size).to(self.output.weight.dtype)

    @checked('controller.step')
    def step(self, state, inputs, reading, stack_state, advance_stack=True):
        """One controller step; returns ``(ControllerState, StepOutput, stack state)``."""
        if inputs.shape[-1] != self.vocab_size or reading.shape[-1] != self.stack.reading_size:
            raise UsageError(
                f"Step expects input size {self.vocab_size} and reading size {self.stack.reading_size}, "
                f"got {inputs.shape[-1]} and {reading.shape[-1]}")
        h, c = self.lstm(torch.cat([inputs, reading], dim=-1), (state.h, state.c))
        record('controller.hidden', h)
        logits = record('controller.logits', self.output(h))
        actions = None
        if advance_stack:
            actions = self.stack.actions(h)
            stack_state = self.stack.transition(stack_state, actions)
            reading = self._reading(stack_state, h.shape[0])
        return ControllerState(h, c), StepOutput(logits, actions, reading), stack_state

    def run(self, tokens, return_actions=False):
        """Logits ``y_0 .. y_n`` for a batch of equal-length sequences ``[B, n]``."""
        batch_size, length = tokens.shape
        inputs = self.encode(tokens)
        state = self.initial_state(batch_size)
        stack_state, reading = self.initial_stack(batch_size)
        start = self.start_input.unsqueeze(0).expand(batch_size, -1)
        logits, actions = [], []
        for t in range(length + 1):
            x = start if t == 0 else inputs[:, t - 1]
            state, output, stack_state = self.step(state, x, reading, stack_state, advance_stack=t < length)
            reading = output.reading
            logits.append(output.logits)
            if return_actions and t < length:
                actions.append(output.actions)
        logits = torch.stack(logits, dim=1)
        if return_actions:
            return logits, actions
        return logits

    def log_likelihood(self, tokens):
        """``log p(w · EOS)`` per sequence of a ``[B, n]`` batch."""
        if not self.eos:
            raise UsageError("log_likelihood needs a model with an EOS output")
        logits = self.run(tokens)
        targets = torch.cat([tokens, tokens.new_full((tokens.shape[0], 1), self.eos_index)], dim=1)
        log_probs = F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return log_probs.sum(dim=1)

    def forward(self, tokens):
        return self.log_likelihood(tokens)

    def run_chunk(self, tokens, forwarded=None):
        """Incremental execution over a ``[B, T]`` chunk of a long stream.

        Returns logits ``[B, T, V]`` (step t predicts token t+1) and the
        :class:`ForwardedState` to carry into the next chunk.
        """
        batch_size, length = tokens.shape
        if forwarded is None:
            state = self.initial_state(batch_size)
            stack_state, reading = self.initial_stack(batch_size)
        else:
            state, stack_state, reading = forwarded.controller, forwarded.stack, forwarded.reading
        inputs = self.encode(tokens)
        logits = []
        for t in range(length):
            state, output, stack_state = self.step(state, inputs[:, t], reading, stack_state)
            reading = output.reading
            logits.append(output.logits)
        return torch.stack(logits, dim=1), ForwardedState(state, stack_state, reading)

    def count_parameters(self):
        return sum(p.numel() for p in self.parameters())


@dataclass
class ForwardedState:
    """Controller and stack state carried across truncated-BPTT boundaries."""
    controller: ControllerState
    stack: Any
    reading: torch.Tensor

    def detach(self, stack):
        return ForwardedState(self.controller.detach(), stack.detach_state(self.stack), self.reading.detach())

    def slice(self, stack, batch_size):
        return ForwardedState(self.controller.slice(batch_size), stack.slice_state(self.stack, batch_size),
                              self.reading[:batch_size])


def run_sequence(model, tokens):
    """Per-step logits and total log-likelihood of ``w · EOS`` for one sequence."""
    batch = torch.as_tensor(tokens, dtype=torch.long).reshape(1, -1)
    logits = model.run(batch)
    targets = torch.cat([batch[0], batch.new_tensor([model.eos_index])])
    log_probs = F.log_softmax(logits[0], dim=-1)
    total = log_probs.gather(-1, targets.unsqueeze(-1)).sum()
    return logits[0], total

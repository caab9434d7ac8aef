"""Differentiable stacks used as baselines: stratification and superposition."""
import logging
from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .controller import StackModule
from .errors import UsageError
from .semiring_autodiff import record

logger = logging.getLogger(__name__)


def _replace_tensors(state, convert):
    return type(state)(**{f.name: convert(getattr(state, f.name)) for f in fields(state)})


@dataclass
class StratificationActions:
    pop: torch.Tensor
    push: torch.Tensor
    value: torch.Tensor


@dataclass
class StratificationState:
    """Pushed vectors ``V`` ``[B, t, m]`` and their thicknesses ``s`` ``[B, t]``."""
    values: torch.Tensor
    strengths: torch.Tensor


def _suffix_sums(strengths):
    """``Σ_{j>i} s[j]`` for every ``i``."""
    return strengths.flip(-1).cumsum(-1).flip(-1) - strengths


def stratification_coefficients(strengths):
    return torch.minimum(strengths, F.relu(1.0 - _suffix_sums(strengths)))


def strat_step(state, actions):
    """Pop ``u``, then push ``v`` with thickness ``d``."""
    remaining = F.relu(state.strengths - F.relu(actions.pop.unsqueeze(-1) - _suffix_sums(state.strengths)))
    strengths = torch.cat([remaining, actions.push.unsqueeze(-1)], dim=-1)
    values = torch.cat([state.values, actions.value.unsqueeze(1)], dim=1)
    return StratificationState(values, strengths)


def strat_reading(state):
    coefficients = stratification_coefficients(state.strengths)
    return torch.einsum('bi,bim->bm', coefficients, state.values)


class StratificationStack(StackModule):
    """Continuous stack whose elements have a thickness between 0 and 1."""

    def __init__(self, hidden_size, stack_size):
        super(StratificationStack, self).__init__()
        self.stack_size = stack_size
        self.reading_size = stack_size
        self.pop_layer = nn.Linear(hidden_size, 1)
        self.push_layer = nn.Linear(hidden_size, 1)
        self.value_layer = nn.Linear(hidden_size, stack_size)

    def initial_state(self, batch_size, like):
        return StratificationState(like.new_zeros(batch_size, 0, self.stack_size), like.new_zeros(batch_size, 0))

    def actions(self, hidden):
        return StratificationActions(torch.sigmoid(self.pop_layer(hidden)).squeeze(-1),
                                     torch.sigmoid(self.push_layer(hidden)).squeeze(-1),
                                     torch.tanh(self.value_layer(hidden)))

    def transition(self, state, actions):
        return strat_step(state, actions)

    def reading(self, state):
        return record('baseline_stacks.stratification', strat_reading(state))

    def detach_state(self, state):
        return _replace_tensors(state, torch.Tensor.detach)

    def slice_state(self, state, batch_size):
        return _replace_tensors(state, lambda tensor: tensor[:batch_size])

    def state_arrays(self, state):
        return {'values': state.values.detach(), 'strengths': state.strengths.detach()}

    def load_state_arrays(self, arrays, batch_size, like):
        if 'values' not in arrays:
            return self.initial_state(batch_size, like)
        return StratificationState(arrays['values'].to(like.dtype), arrays['strengths'].to(like.dtype))


@dataclass
class SuperpositionActions:
    """``probabilities`` are (push, no-op, pop) ``[B, 3]``."""
    probabilities: torch.Tensor
    value: torch.Tensor


@dataclass
class SuperpositionState:
    """Cells ``[B, rows, m]``; row 0 stages the next pushed vector."""
    cells: torch.Tensor


def superpos_step(state, actions, max_depth=None):
    previous = state.cells
    batch_size, rows, size = previous.shape
    # the cell below the bottom reads as 0
    padded = torch.cat([previous, previous.new_zeros(batch_size, 1, size)], dim=1)
    push, noop, pop = (actions.probabilities[:, k, None, None] for k in range(3))
    interior = push * padded[:, :rows - 1] + noop * padded[:, 1:rows] + pop * padded[:, 2:rows + 1]
    cells = torch.cat([actions.value.unsqueeze(1), interior, previous.new_zeros(batch_size, 1, size)], dim=1)
    if max_depth is not None:
        cells = cells[:, :max_depth + 1]
    return SuperpositionState(cells)


def superpos_reading(state):
    cells = state.cells
    if cells.shape[1] < 2:
        return cells.new_zeros(cells.shape[0], cells.shape[2])
    return cells[:, 1]


class SuperpositionStack(StackModule):
    """Stack whose cells are interpolations of push, no-op and pop outcomes.

    With ``push_hidden`` the pushed vector is the controller hidden state.
    ``max_depth`` drops cells deeper than the given depth.
    """

    def __init__(self, hidden_size, stack_size, push_hidden=False, max_depth=None):
        super(SuperpositionStack, self).__init__()
        if push_hidden and stack_size != hidden_size:
            raise UsageError("Pushing the hidden state needs stack size equal to the hidden size")
        if max_depth is not None and max_depth < 1:
            raise UsageError(f"Maximum stack depth must be positive, got {max_depth}")
        self.stack_size = stack_size
        self.reading_size = stack_size
        self.push_hidden = push_hidden
        self.max_depth = max_depth
        self.action_layer = nn.Linear(hidden_size, 3)
        self.value_layer: Optional[nn.Linear] = None if push_hidden else nn.Linear(hidden_size, stack_size)

    def initial_state(self, batch_size, like):
        return SuperpositionState(like.new_zeros(batch_size, 1, self.stack_size))

    def actions(self, hidden):
        value = hidden if self.push_hidden else torch.sigmoid(self.value_layer(hidden))
        return SuperpositionActions(torch.softmax(self.action_layer(hidden), dim=-1), value)

    def transition(self, state, actions):
        return superpos_step(state, actions, self.max_depth)

    def reading(self, state):
        return record('baseline_stacks.superposition', superpos_reading(state))

    def detach_state(self, state):
        return SuperpositionState(state.cells.detach())

    def slice_state(self, state, batch_size):
        return SuperpositionState(state.cells[:batch_size])

    def state_arrays(self, state):
        return {'cells': state.cells.detach()}

    def load_state_arrays(self, arrays, batch_size, like):
        if 'cells' not in arrays:
            return self.initial_state(batch_size, like)
        return SuperpositionState(arrays['cells'].to(like.dtype))

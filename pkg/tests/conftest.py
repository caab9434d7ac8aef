import numpy as np
import pytest
import torch

from stackwfa.tasks import build_task_grammar

DOUBLE = torch.float64


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def marked():
    return build_task_grammar('marked-reversal', (5, 9))


def random_log_deltas(rng, steps, num_states, num_symbols, batch_size=None):
    shape = (steps, num_states, num_symbols, num_states, 2 * num_symbols + 1)
    if batch_size is not None:
        shape = (batch_size,) + shape
    return rng.normal(size=shape)


def zero_parameters(model):
    with torch.no_grad():
        for parameter in model.parameters():
            parameter.zero_()
    return model

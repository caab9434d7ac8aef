import math
import time

import pytest
import torch

from stackwfa.banded_stack_wfa import (BandConfig, BandedNondeterministicStack, WindowState, banded_step,
                                       detach_window)
from stackwfa.errors import UsageError
from stackwfa.models import build_model
from stackwfa.stack_wfa import PdaSignature, alpha_table, reading
from tests.conftest import random_log_deltas


def _run_window(log_deltas, config, window=None):
    window = window or WindowState.start(config, log_deltas.shape[0], log_deltas)
    readings = []
    for t in range(log_deltas.shape[1]):
        window, stack_reading = banded_step(window, log_deltas[:, t], config)
        readings.append(stack_reading)
    return window, torch.stack(readings, dim=1)


@pytest.mark.parametrize('mode', ['symbols', 'joint'])
def test_wide_band_matches_full_stack_wfa(rng, mode):
    signature = PdaSignature(2, 2)
    log_deltas = torch.from_numpy(random_log_deltas(rng, 8, 2, 2, batch_size=2))
    _, readings = _run_window(log_deltas, BandConfig(8, signature, mode=mode))
    alpha = alpha_table(log_deltas, signature)
    expected = torch.stack([reading(alpha[:, t], mode) for t in range(1, 9)], dim=1)
    torch.testing.assert_close(readings, expected, rtol=0, atol=1e-12)


def test_span_one_matches_banded_alpha_table(rng):
    signature = PdaSignature(1, 2)
    log_deltas = torch.from_numpy(random_log_deltas(rng, 6, 1, 2, batch_size=1))
    _, readings = _run_window(log_deltas, BandConfig(1, signature, mode='joint'))
    alpha = alpha_table(log_deltas, signature, span=1)
    expected = torch.stack([reading(alpha[:, t], 'joint') for t in range(1, 7)], dim=1)
    torch.testing.assert_close(readings, expected, rtol=0, atol=1e-12)


def test_window_size_stays_constant(rng):
    config = BandConfig(3, PdaSignature(2, 2))
    log_deltas = torch.from_numpy(random_log_deltas(rng, 10, 2, 2, batch_size=1))
    window = WindowState.start(config, 1, log_deltas)
    sizes = []
    for t in range(10):
        window, _ = banded_step(window, log_deltas[:, t], config)
        sizes.append(window.num_elements())
    assert len(window.columns) == 3
    assert len(window.alphas) == 3
    assert len(window.betas) == 4
    assert len(set(sizes[4:])) == 1


def test_step_leaves_old_window_untouched(rng):
    config = BandConfig(2, PdaSignature(1, 1))
    log_deltas = torch.from_numpy(random_log_deltas(rng, 1, 1, 1, batch_size=1))
    window = WindowState.start(config, 1, log_deltas)
    banded_step(window, log_deltas[:, 0], config)
    assert window.t == 0
    assert len(window.columns) == 0


def test_window_rejects_other_configuration(rng):
    log_deltas = torch.from_numpy(random_log_deltas(rng, 1, 2, 2, batch_size=1))
    window = WindowState.start(BandConfig(3, PdaSignature(2, 2)), 1, log_deltas)
    with pytest.raises(UsageError):
        banded_step(window, log_deltas[:, 0], BandConfig(4, PdaSignature(2, 2)))
    with pytest.raises(UsageError):
        banded_step(window, log_deltas[:, 0], BandConfig(3, PdaSignature(2, 3)))
    with pytest.raises(UsageError):
        BandConfig(0, PdaSignature(2, 2))


def test_detach_keeps_values(rng):
    config = BandConfig(3, PdaSignature(2, 2))
    log_deltas = torch.from_numpy(random_log_deltas(rng, 5, 2, 2, batch_size=1)).requires_grad_(True)
    window, _ = _run_window(log_deltas, config)
    detached = detach_window(window)
    assert detached.t == window.t
    for original, copy in zip(window.tensors(), detached.tensors()):
        assert torch.equal(original, copy)
        assert not copy.requires_grad


def test_two_chunks_match_one_pass(rng):
    config = BandConfig(3, PdaSignature(2, 2))
    log_deltas = torch.from_numpy(random_log_deltas(rng, 10, 2, 2, batch_size=2))
    _, whole = _run_window(log_deltas, config)
    window, first = _run_window(log_deltas[:, :5], config)
    _, second = _run_window(log_deltas[:, 5:], config, detach_window(window))
    assert torch.equal(torch.cat([first, second], dim=1), whole)


def test_no_gradient_crosses_a_detached_boundary(rng):
    config = BandConfig(2, PdaSignature(1, 2))
    log_deltas = torch.from_numpy(random_log_deltas(rng, 6, 1, 2, batch_size=1)).requires_grad_(True)
    window, _ = _run_window(log_deltas[:, :3], config)
    _, later = _run_window(log_deltas[:, 3:], config, detach_window(window))
    (grad,) = torch.autograd.grad(later.sum(), log_deltas)
    assert torch.equal(grad[:, :3], torch.zeros_like(grad[:, :3]))


def test_state_arrays_restore_the_window(rng):
    stack = BandedNondeterministicStack(4, PdaSignature(2, 2), span=3).double()
    like = torch.zeros(1, dtype=torch.float64)
    state = stack.initial_state(2, like)
    hidden = torch.randn(5, 2, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(7))
    for t in range(5):
        state = stack.transition(state, stack.actions(hidden[t]))
    restored = stack.load_state_arrays(stack.state_arrays(state), 2, like)
    assert restored.t == state.t
    for original, copy in zip(state.tensors(), restored.tensors()):
        assert torch.equal(original, copy)
    assert stack.load_state_arrays({}, 2, like).t == 0


def test_banded_model_runs_in_chunks():
    model = build_model('rns', 4, hidden_size=6, num_states=1, num_symbols=2, span=3, eos=False)
    tokens = torch.randint(0, 4, (2, 12), generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        whole, _ = model.run_chunk(tokens)
        first, forwarded = model.run_chunk(tokens[:, :6])
        second, _ = model.run_chunk(tokens[:, 6:], forwarded.detach(model.stack))
    torch.testing.assert_close(torch.cat([first, second], dim=1), whole, rtol=0, atol=0)


@pytest.mark.slow
def test_banded_time_is_linear(rng):
    config = BandConfig(8, PdaSignature(2, 3))
    short = torch.from_numpy(random_log_deltas(rng, 64, 2, 3, batch_size=1))
    long = torch.from_numpy(random_log_deltas(rng, 128, 2, 3, batch_size=1))

    def seconds(log_deltas):
        best = math.inf
        for _ in range(3):
            began = time.perf_counter()
            _run_window(log_deltas, config)
            best = min(best, time.perf_counter() - began)
        return best

    with torch.no_grad():
        _run_window(short, config)
        ratio = seconds(long) / seconds(short)
    assert 1.5 <= ratio <= 3.0

import math

import numpy as np
import pandas as pd
import pytest
import torch
from torch.func import functional_call

from stackwfa.checkpoint import Checkpoint
from stackwfa.errors import NumericalError, UsageError
from stackwfa.models import FAMILIES, TASK_SIGNATURES, build_model, initialize
from stackwfa.semiring_autodiff import check_gradients
from stackwfa.tasks import Dataset, TokenStream, Vocabulary, build_task_grammar, load_corpus, sample
from stackwfa.training import (RANDOM_CLIP, RANDOM_LEARNING_RATE, CflObjective, CorpusObjective, MetricsLog,
                               ModelScorer, TrainConfig, TrueDistribution, evaluate, perplexity, read_metrics, search,
                               search_space, _step, train_cfl, train_corpus)
from tests.conftest import zero_parameters


@pytest.fixture
def cfl_data(marked):
    return sample(marked, 8, seed=0), sample(marked, 4, seed=1)


def test_zero_epochs_returns_initialization(marked, cfl_data):
    config = TrainConfig(family='lstm', hidden_size=4, max_epochs=0, init_scale=0.1, seed=3)
    result = train_cfl(config, *cfl_data, marked)
    expected = initialize(config.model(3), 0.1, seed=3).state_dict()
    for name, value in expected.items():
        assert torch.equal(result.checkpoint.parameters[name], value)
    assert result.checkpoint.metadata['best_epoch'] == 0


def test_short_cfl_run_keeps_best_epoch(marked, cfl_data):
    config = TrainConfig(family='rns', hidden_size=4, num_states=2, num_symbols=2, max_epochs=2, batch_size=4,
                         learning_rate=0.01)
    result = train_cfl(config, *cfl_data, marked)
    gaps = result.history[result.history.metric == 'gap']
    assert gaps.epoch.tolist() == [0, 1, 2]
    assert (result.history[result.history.metric == 'loss'].epoch.tolist()) == [1, 2]
    metadata = result.checkpoint.metadata
    assert metadata['best_gap'] == gaps.value.min()
    assert metadata['best_epoch'] == int(gaps.epoch[gaps.value.idxmin()])
    assert metadata['task'] == 'marked-reversal'


def test_true_distribution_has_zero_gap(marked):
    dataset = sample(marked, 30, seed=2)
    report = evaluate(TrueDistribution(marked), dataset, marked, binning='by-length')
    assert report.gap == 0.0
    assert (report.by_length.gap == 0.0).all()
    assert report.by_length.strings.sum() == 30


def test_uniform_model_cross_entropy(marked):
    model = zero_parameters(build_model('lstm', 3, hidden_size=4))
    report = evaluate(ModelScorer(model, Vocabulary.for_grammar(marked)), sample(marked, 10, seed=0))
    assert report.cross_entropy == pytest.approx(math.log(4))
    assert report.gap is None


def test_gap_is_invariant_to_duplication(marked):
    model = initialize(build_model('gref', 3, hidden_size=4, stack_size=3), 0.3, seed=1)
    scorer = ModelScorer(model, Vocabulary.for_grammar(marked))
    dataset = sample(marked, 6, seed=4)
    doubled = Dataset(dataset.strings * 2)
    assert evaluate(scorer, doubled, marked).gap == pytest.approx(evaluate(scorer, dataset, marked).gap)


def test_evaluation_rejects_bad_input(marked):
    scorer = ModelScorer(build_model('lstm', 3, hidden_size=4), Vocabulary.for_grammar(marked))
    with pytest.raises(UsageError):
        evaluate(scorer, Dataset([tuple('0x0')]))
    with pytest.raises(UsageError):
        evaluate(scorer, Dataset([]))
    with pytest.raises(UsageError):
        evaluate(scorer, Dataset([tuple('#')]), binning='by-bucket')


@pytest.mark.slow
@pytest.mark.parametrize('family', FAMILIES)
def test_gradients_match_finite_differences(family):
    span = 2 if family.startswith('ns') else None
    model = initialize(build_model(family, 2, hidden_size=3, num_states=2, num_symbols=2, stack_size=2,
                                   span=span), 0.5, seed=5)
    tokens = torch.tensor([[0, 1, 1], [1, 0, 1]])
    parameters = {name: value.detach() for name, value in model.named_parameters()}
    error = check_gradients(lambda p: functional_call(model, p, (tokens,)).sum(), parameters, max_coordinates=5)
    assert error <= 1e-4


def test_gradient_check_of_linear_and_constant_functions():
    point = torch.zeros(3, dtype=torch.float64)
    weights = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64)
    assert check_gradients(lambda x: (weights * x).sum(), point) <= 1e-10
    assert check_gradients(lambda x: x.sum() * 0.0 + 4.0, point) == 0.0


def test_divergence_names_the_step():
    model = initialize(build_model('lstm', 3, hidden_size=4), 0.1, seed=0)
    before = {name: value.clone() for name, value in model.state_dict().items()}
    optimizer = torch.optim.SGD(model.parameters(), lr=0.1)
    tokens = torch.tensor([[0, 1, 2]])
    with pytest.raises(NumericalError, match='epoch 3, step 2'):
        _step(model, optimizer, lambda: model.log_likelihood(tokens).sum() * math.nan, None, 'epoch 3, step 2')
    for name, value in model.state_dict().items():
        assert torch.equal(value, before[name])


def test_metrics_log_round_trip(tmp_path):
    path = str(tmp_path / 'metrics.log')
    log = MetricsLog(path)
    log.write(0, 'valid', 'gap', 0.125)
    log.write(1, 'train', 'loss', 1 / 3)
    pd.testing.assert_frame_equal(read_metrics(path), log.frame())


def _fake_objective(config):
    return (config.learning_rate - 0.005) ** 2 + config.seed * 1e-3, f'checkpoint-{config.seed}'


def _diverging_objective(config):
    raise NumericalError('loss is nan')


def test_single_point_search():
    result = search(TrainConfig(), _fake_objective, space={'learning_rate': [0.01]}, restarts=1)
    assert result.best_config.learning_rate == 0.01
    assert result.best_checkpoint == 'checkpoint-0'
    assert len(result.trials) == 1


def test_search_is_deterministic_and_picks_the_lowest_metric():
    first = search(TrainConfig(), _fake_objective, restarts=2, seed=7)
    second = search(TrainConfig(), _fake_objective, restarts=2, seed=7)
    pd.testing.assert_frame_equal(first.trials, second.trials)
    best = first.trials.loc[first.trials.metric.idxmin()]
    assert first.best_config.learning_rate == best.learning_rate
    assert first.best_config.seed == best.seed
    assert len(first.trials) == 8


def test_search_fails_when_every_trial_diverges():
    with pytest.raises(NumericalError):
        search(TrainConfig(), _diverging_objective, restarts=2)


def test_random_space_stays_in_range():
    trials = search_space('random', seed=3)
    assert len(trials) == 10
    assert len({t['seed'] for t in trials}) == 10
    for trial in trials:
        assert RANDOM_LEARNING_RATE[0] <= trial['learning_rate'] <= RANDOM_LEARNING_RATE[1]
        assert RANDOM_CLIP[0] <= trial['clip'] <= RANDOM_CLIP[1]
    assert search_space('random', seed=3) == trials
    with pytest.raises(UsageError):
        search_space('bayesian')


def test_vector_stack_grid_sweeps_stack_sizes():
    trials = search_space('grid', restarts=1, family='gref')
    assert len(trials) == 12
    assert sorted({t['stack_size'] for t in trials}) == [2, 20, 40]
    assert all('stack_size' not in t for t in search_space('grid', restarts=1, family='rns'))


def test_corpus_config_defaults():
    config = TrainConfig.for_corpus(family='rns')
    assert (config.batch_size, config.chunk_length, config.span) == (32, 35, 35)
    assert TrainConfig.for_corpus(family='jm').max_depth == 10
    assert TrainConfig.for_corpus(family='lstm').span is None
    assert (config.decay, config.patience) == (1.5, 2)
    assert (TrainConfig().decay, TrainConfig().patience) == (None, None)
    with pytest.raises(UsageError):
        TrainConfig.from_sections({'training': {'momentum': 0.9}})
    assert TrainConfig.from_sections({'stack': {'num_states': 3}}, hidden_size=None).num_states == 3


def _stream(length, vocab_size, seed):
    vocabulary = Vocabulary([str(i) for i in range(vocab_size)])
    return TokenStream(np.random.default_rng(seed).integers(0, vocab_size, length), vocabulary)


def test_uniform_model_perplexity_is_vocabulary_size():
    model = zero_parameters(build_model('rns', 6, hidden_size=4, num_states=1, num_symbols=2, span=3, eos=False))
    assert perplexity(model, _stream(50, 6, 0), batch_size=3, chunk_length=4) == pytest.approx(6.0)


@pytest.mark.parametrize('family', ['lstm', 'rns', 'jm'])
def test_interrupted_corpus_run_resumes_exactly(tmp_path, family):
    config = TrainConfig.for_corpus(family=family, hidden_size=4, stack_size=3, batch_size=2, chunk_length=3,
                                    span=2 if family == 'rns' else None, max_epochs=2)
    train, valid = _stream(40, 5, 1), _stream(20, 5, 2)
    whole = train_corpus(config, train, valid)
    path = str(tmp_path / 'partial.ckpt')
    partial = train_corpus(config, train, valid, interrupt_after=4, checkpoint_path=path)
    assert partial.interrupted
    resumed = train_corpus(config, train, valid, resume=Checkpoint.load(path))
    for name, value in whole.checkpoint.parameters.items():
        assert torch.equal(resumed.checkpoint.parameters[name], value)
    pd.testing.assert_frame_equal(resumed.history, whole.history)
    assert resumed.checkpoint.metadata['progress'] == whole.checkpoint.metadata['progress']


def test_cfl_plateau_rule_decays_and_stops(marked, cfl_data):
    config = TrainConfig(family='lstm', hidden_size=4, max_epochs=6, batch_size=4, learning_rate=0.05, decay=2.0,
                         patience=2)
    history = train_cfl(config, *cfl_data, marked).history
    gaps = history[history.metric == 'gap'].value.tolist()
    rates = history[history.metric == 'learning_rate'].value.tolist()
    best, stagnant, expected_rates, last = gaps[0], 0, [0.05], 0
    for epoch, gap in enumerate(gaps[1:], start=1):
        last = epoch
        if gap < best:
            best, stagnant = gap, 0
            expected_rates.append(expected_rates[-1])
        else:
            stagnant += 1
            expected_rates.append(expected_rates[-1] / 2.0)
        if stagnant >= 2:
            break
    assert len(gaps) == last + 1
    assert last == 6 or stagnant == 2
    assert rates == pytest.approx(expected_rates[:len(rates)])


def test_cfl_run_without_patience_lasts_max_epochs(marked, cfl_data):
    config = TrainConfig(family='lstm', hidden_size=4, max_epochs=3, batch_size=4)
    history = train_cfl(config, *cfl_data, marked).history
    assert history[history.metric == 'learning_rate'].value.tolist() == [0.005] * 3
    with pytest.raises(UsageError):
        TrainConfig(patience=0)
    with pytest.raises(UsageError):
        TrainConfig(decay=1.0)


def test_random_search_on_a_corpus():
    config = TrainConfig.for_corpus(family='lstm', hidden_size=4, batch_size=2, chunk_length=3, max_epochs=1)
    train, valid = _stream(30, 4, 5), _stream(12, 4, 6)
    result = search(config, CorpusObjective(train, valid), 'random', seed=4, draws=2)
    assert len(result.trials) == 2
    assert (result.trials.status == 'ok').any()
    assert result.trials.learning_rate.between(*RANDOM_LEARNING_RATE).all()
    best = result.trials.loc[result.trials.metric.idxmin()]
    assert result.best_config.learning_rate == best.learning_rate
    assert result.best_checkpoint.metadata['mode'] == 'corpus'


def test_random_search_needs_a_space_for_cfl_tasks(marked, cfl_data):
    with pytest.raises(UsageError):
        search(TrainConfig(family='lstm'), CflObjective(*cfl_data, marked), 'random')


def _best_gap(task, family, epochs=100):
    grammar = build_task_grammar(task, (20, 40))
    train, valid = sample(grammar, 2000, seed=0), sample(grammar, 200, seed=1)
    states, symbols = TASK_SIGNATURES[task]
    config = TrainConfig(family=family, num_states=states, num_symbols=symbols, hidden_size=20, max_epochs=epochs)
    return search(config, CflObjective(train, valid, grammar), restarts=5).trials.metric.min()


@pytest.mark.slow
def test_rns_gets_within_a_twentieth_of_a_nat_on_marked_reversal():
    assert _best_gap('marked-reversal', 'ns+s+u') < 0.05


@pytest.mark.slow
def test_rns_beats_lstm_on_unmarked_reversal():
    assert _best_gap('unmarked-reversal', 'ns+s+u') < _best_gap('unmarked-reversal', 'lstm')


@pytest.mark.slow
def test_banded_rns_perplexity_improves_every_epoch(tmp_path):
    grammar = build_task_grammar('dyck2', (10, 30))
    for name, seed, count in (('train', 0, 1500), ('valid', 1, 200)):
        sample(grammar, count, seed).save(str(tmp_path / f'{name}.txt'))
    train = load_corpus(str(tmp_path / 'train.txt'))
    valid = load_corpus(str(tmp_path / 'valid.txt'), train.vocabulary)
    config = TrainConfig.for_corpus(family='rns', num_states=1, num_symbols=2, span=35, hidden_size=20,
                                    batch_size=8, learning_rate=1.0, clip=None, max_epochs=3, patience=3)
    initial = initialize(config.model(len(train.vocabulary), eos=False), config.init_scale, config.seed)
    start = perplexity(initial, valid, config.batch_size, config.chunk_length)
    history = train_corpus(config, train, valid).history
    perplexities = [start] + history[history.metric == 'perplexity'].value.tolist()
    assert len(perplexities) == 4
    assert all(later < earlier for earlier, later in zip(perplexities, perplexities[1:]))

import json
import os

import numpy as np
import pytest

from stackwfa.cli import action_labels, correct_action_weights, dispatch, main, oracle_check, write_heatmap
from stackwfa.errors import UsageError
from stackwfa.models import build_model
from stackwfa.tasks import Vocabulary, build_task_grammar, sample
from tests.conftest import zero_parameters


def _gen(data_dir, output, seed=1):
    return main(['--data-dir', data_dir, '--seed', str(seed), 'gen', '--task', 'marked-reversal',
                 '--train-size', '12', '--valid-size', '4', '--test-per-length', '1', '--lengths', '5,9',
                 '--test-lengths', '5,11', '--output', output])


@pytest.fixture
def generated(tmp_path):
    output = str(tmp_path / 'marked')
    assert _gen(str(tmp_path), output) == 0
    return tmp_path, output


def test_gen_is_reproducible(generated):
    tmp_path, first = generated
    second = str(tmp_path / 'again')
    assert _gen(str(tmp_path), second) == 0
    for name in ('train.txt', 'valid.txt', 'test.txt', 'train.txt.meta'):
        with open(os.path.join(first, name)) as a, open(os.path.join(second, name)) as b:
            assert a.read() == b.read()
    with open(os.path.join(first, 'test.txt')) as f:
        assert [len(line.split()) for line in f] == [5, 7, 9, 11]
    with open(tmp_path / 'manifests' / 'manifest-gen.json') as f:
        manifest = json.load(f)
    assert manifest['seeds'] == {'seed': 1, 'train': 1, 'valid': 2, 'test': 3}


def test_train_eval_and_heatmap(generated):
    tmp_path, data = generated
    checkpoint = str(tmp_path / 'ns.ckpt')
    metrics = str(tmp_path / 'metrics.log')
    assert main(['--data-dir', str(tmp_path), 'train', '--task', 'marked-reversal', '--family', 'ns',
                 '--hidden-size', '4', '--epochs', '1', '--train', os.path.join(data, 'train.txt'),
                 '--valid', os.path.join(data, 'valid.txt'), '--output', checkpoint, '--metrics', metrics]) == 0
    assert os.path.exists(checkpoint) and os.path.exists(metrics)
    report = str(tmp_path / 'by_length.csv')
    assert main(['--data-dir', str(tmp_path), 'eval', '--checkpoint', checkpoint, '--data',
                 os.path.join(data, 'test.txt'), '--by-length', '--output', report]) == 0
    assert os.path.exists(report)
    prefix = str(tmp_path / 'heatmap' / 'marked')
    assert main(['--data-dir', str(tmp_path), 'heatmap', '--checkpoint', checkpoint, '--length', '7',
                 '--count', '3', '--output', prefix]) == 0
    assert os.path.exists(prefix + '.csv') and os.path.exists(prefix + '.png')


def test_config_file_sections(generated):
    tmp_path, data = generated
    config = tmp_path / 'run.ini'
    config.write_text('[stack]\nfamily = lstm\n\n[controller]\nhidden_size = 3\n\n[training]\nmax_epochs = 0\n')
    assert main(['--config', str(config), '--data-dir', str(tmp_path), 'train', '--task', 'marked-reversal',
                 '--train', os.path.join(data, 'train.txt'), '--valid', os.path.join(data, 'valid.txt'),
                 '--output', str(tmp_path / 'lstm.ckpt')]) == 0
    with open(tmp_path / 'manifests' / 'manifest-train.json') as f:
        manifest = json.load(f)
    assert (manifest['config']['family'], manifest['config']['hidden_size'], manifest['config']['max_epochs']) == \
        ('lstm', 3, 0)


def test_exit_codes(tmp_path):
    missing = str(tmp_path / 'nowhere' / 'train.txt')
    assert main(['--data-dir', str(tmp_path), 'train', '--task', 'marked-reversal', '--train', missing,
                 '--valid', missing]) == 2
    assert main(['--data-dir', str(tmp_path), 'gen', '--task', 'marked-reversal', '--bogus']) == 1
    assert main(['--data-dir', str(tmp_path), 'gen', '--task', 'palindromes']) == 1
    config = tmp_path / 'bad.ini'
    config.write_text('[model]\nhidden_size = 3\n')
    assert main(['--config', str(config), '--data-dir', str(tmp_path), 'oracle-check', '--trials', '1']) == 1


def test_dispatch_returns_exit_status(tmp_path):
    missing = str(tmp_path / 'absent.txt')
    assert dispatch(['--data-dir', str(tmp_path), 'gen', '--bogus']) == 1
    assert dispatch(['--data-dir', str(tmp_path), 'search', '--task', 'marked-reversal', '--train', missing,
                     '--valid', missing]) == 2
    assert dispatch(['--data-dir', str(tmp_path), 'oracle-check', '--max-n', '2', '--trials', '1']) == 0


def test_random_search_needs_corpus_flag(generated):
    tmp_path, data = generated
    assert main(['--data-dir', str(tmp_path), 'search', '--task', 'marked-reversal', '--strategy', 'random',
                 '--train', os.path.join(data, 'train.txt'), '--valid', os.path.join(data, 'valid.txt')]) == 1


def test_corpus_random_search(tmp_path):
    words = np.random.default_rng(0).choice(['a', 'b', 'c'], size=(12, 4))
    (tmp_path / 'train.txt').write_text('\n'.join(' '.join(line) for line in words[:8]) + '\n')
    (tmp_path / 'valid.txt').write_text('\n'.join(' '.join(line) for line in words[8:]) + '\n')
    output = str(tmp_path / 'search')
    assert main(['--data-dir', str(tmp_path), 'search', '--corpus', '--train', str(tmp_path / 'train.txt'),
                 '--valid', str(tmp_path / 'valid.txt'), '--strategy', 'random', '--draws', '2', '--family', 'lstm',
                 '--hidden-size', '3', '--epochs', '1', '--batch-size', '2', '--chunk-length', '3',
                 '--output', output]) == 0
    with open(os.path.join(output, 'trials.csv')) as f:
        assert len(f.read().splitlines()) == 3
    assert os.path.exists(os.path.join(output, 'best.ckpt'))


def test_oracle_check_passes(tmp_path):
    assert main(['--data-dir', str(tmp_path), 'oracle-check', '--max-n', '3', '--trials', '2']) == 0
    alpha_error, reading_error, posterior = oracle_check(4, 3, seed=2, posterior_n=3)
    assert alpha_error <= 1e-9 and reading_error <= 1e-9 and posterior <= 1e-6


def test_action_labels():
    assert action_labels('marked-reversal', tuple('01#10')) == ['push', 'push', 'replace', 'pop']
    assert action_labels('unmarked-reversal', tuple('0110')) == ['push', 'push', 'pop']
    assert action_labels('padded-reversal', tuple('0110')) == ['push', 'push', 'pop']
    with pytest.raises(UsageError):
        action_labels('dyck2', tuple('()'))


@pytest.mark.parametrize('family', ['ns', 'rns'])
def test_uniform_actions_give_one_third(family):
    model = zero_parameters(build_model(family, 3, hidden_size=4, num_states=2, num_symbols=2))
    strings = sample(build_task_grammar('marked-reversal', (7, 7)), 4, seed=0).strings
    matrix = correct_action_weights(model, Vocabulary(['#', '0', '1']), strings, 'marked-reversal')
    assert matrix.shape == (4, 6)
    np.testing.assert_allclose(matrix, 1 / 3)


def test_action_weights_need_a_stack_wfa():
    strings = [tuple('01#10')]
    with pytest.raises(UsageError):
        correct_action_weights(build_model('lstm', 3, hidden_size=4), Vocabulary(['#', '0', '1']), strings,
                               'marked-reversal')
    model = build_model('ns', 3, hidden_size=4)
    with pytest.raises(UsageError):
        correct_action_weights(model, Vocabulary(['#', '0', '1']), [tuple('01#10'), tuple('#')], 'marked-reversal')


def test_heatmap_files(tmp_path):
    prefix = str(tmp_path / 'out' / 'map')
    paths = write_heatmap(np.array([[0.0, 0.5], [1.0, 0.25]]), prefix)
    assert all(os.path.exists(path) for path in paths)
    with open(prefix + '.csv') as f:
        assert f.readline().strip() == 'string,position_1,position_2'

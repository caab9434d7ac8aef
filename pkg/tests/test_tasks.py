import itertools
import math

import numpy as np
import pytest

from stackwfa.errors import DataError, UsageError
from stackwfa.tasks import (EOS, UNK, CorpusFeed, Dataset, TaskGrammar, Vocabulary, build_task_grammar,
                            grammar_from_provenance, inside_logprob, length_mass, load_corpus, sample,
                            sample_per_length, string_log_prob, true_cross_entropy)

C = 59 / 61


def test_marked_reversal_membership(marked):
    assert inside_logprob(marked, '01#10') == pytest.approx(math.log((C / 2) ** 2 * (1 - C)))
    assert inside_logprob(marked, '01#01') == -math.inf
    assert inside_logprob(marked, '01x10') == -math.inf
    assert inside_logprob(marked, '') == -math.inf


def test_dyck_rejects_crossed_brackets():
    grammar = build_task_grammar('dyck2', (2, 8))
    assert inside_logprob(grammar, '([)]') == -math.inf
    assert inside_logprob(grammar, '([])') > -math.inf
    assert inside_logprob(grammar, '()[]') > -math.inf


def test_padded_reversal_sums_over_middle_decompositions():
    c, e = 0.95, 0.9
    grammar = build_task_grammar('padded-reversal', (2, 10))
    expected = (c / 2) * ((1 - c) / 2) * e ** 3 * (1 - e) + (c / 2) ** 2 * ((1 - c) / 2) * e * (1 - e)
    assert inside_logprob(grammar, '011110') == pytest.approx(math.log(expected))
    assert inside_logprob(grammar, '0 1 1 1 1 0') == pytest.approx(math.log(expected))


def test_marked_length_mass(marked):
    for k in range(5):
        assert length_mass(marked, 2 * k + 1) == pytest.approx(math.log(C ** k * (1 - C)))
        assert length_mass(marked, 2 * k + 2) == -math.inf
    assert length_mass(marked, 0) == -math.inf
    with pytest.raises(UsageError):
        length_mass(marked, -1)


@pytest.mark.parametrize('task,max_length', [('marked-reversal', 6), ('dyck2', 4), ('padded-reversal', 5)])
def test_length_mass_matches_enumeration(task, max_length):
    grammar = build_task_grammar(task, (1, max_length))
    for length in range(1, max_length + 1):
        insides = [inside_logprob(grammar, s) for s in itertools.product(grammar.terminals, repeat=length)]
        expected = np.logaddexp.reduce(insides)
        if expected == -np.inf:
            assert length_mass(grammar, length) == -math.inf
        else:
            assert length_mass(grammar, length) == pytest.approx(expected, abs=1e-12)


def test_partial_length_masses_stay_below_one(marked):
    masses = np.exp([length_mass(marked, n) for n in range(1, 40)])
    assert 0.0 < masses.sum() <= 1.0


def test_string_probability_includes_length_choice():
    grammar = build_task_grammar('marked-reversal', (5, 9))
    assert grammar.achievable_lengths == [5, 7, 9]
    assert string_log_prob(grammar, '01#10') == pytest.approx(math.log(1 / 3 * 1 / 4))
    assert string_log_prob(grammar, '#') == -math.inf


def test_samples_of_fixed_length_have_marked_form():
    grammar = build_task_grammar('marked-reversal', (5, 5))
    for tokens in sample(grammar, 50, seed=3):
        assert len(tokens) == 5
        assert tokens[2] == '#'
        assert tokens[:2] == tokens[:2:-1]


def test_sampling_is_deterministic(marked):
    assert sample(marked, 20, seed=1).strings == sample(marked, 20, seed=1).strings
    assert sample(marked, 20, seed=1).strings != sample(marked, 20, seed=2).strings


def test_sampled_strings_are_uniform_over_lengths_and_strings():
    grammar = build_task_grammar('marked-reversal', (5, 9))
    dataset = sample(grammar, 3000, seed=5)
    lengths = np.array([len(s) for s in dataset])
    for n in (5, 7, 9):
        count = (lengths == n).sum()
        assert abs(count - 1000) < 4 * math.sqrt(3000 * (1 / 3) * (2 / 3))
    short = [s for s in dataset if len(s) == 5]
    for string in ('00#00', '01#10', '10#01', '11#11'):
        count = short.count(tuple(string))
        p = 1 / 4
        assert abs(count - p * len(short)) < 4 * math.sqrt(len(short) * p * (1 - p))


def test_per_length_sampling_covers_every_length():
    grammar = build_task_grammar('unmarked-reversal', (4, 8))
    dataset = sample_per_length(grammar, 3, seed=0)
    assert [len(s) for s in dataset] == [4, 4, 4, 6, 6, 6, 8, 8, 8]
    assert dataset.provenance['per_length'] == 3


def test_hardest_cfl_samples_are_members():
    grammar = build_task_grammar('hardest-cfl', (8, 20))
    for tokens in sample(grammar, 10, seed=4):
        assert inside_logprob(grammar, tokens) > -math.inf
        assert tokens[-1] == ';'
        assert '$' in tokens


def test_unknown_task_and_bad_parameters():
    with pytest.raises(UsageError):
        build_task_grammar('palindromes')
    with pytest.raises(UsageError):
        build_task_grammar('marked-reversal', continuation=1.5)
    with pytest.raises(UsageError):
        build_task_grammar('marked-reversal', nest=0.5)
    with pytest.raises(UsageError):
        build_task_grammar('marked-reversal', (10, 5))


def test_unary_cycle_is_rejected():
    grammar = TaskGrammar('cycle', 'A', {'A': [(('B',), 0.5), (('a',), 0.5)], 'B': [(('A',), 1.0)]})
    with pytest.raises(UsageError):
        grammar.compiled


def test_unnormalized_productions_are_rejected():
    with pytest.raises(UsageError):
        TaskGrammar('bad', 'A', {'A': [(('a',), 0.5)]})


def test_unreachable_length_range():
    grammar = build_task_grammar('marked-reversal', (4, 4))
    assert grammar.achievable_lengths == []
    with pytest.raises(UsageError):
        sample(grammar, 5, seed=0)


def test_true_cross_entropy(marked):
    assert true_cross_entropy(Dataset([tuple('01#10')]), marked) == pytest.approx(
        -string_log_prob(marked, '01#10') / 6)
    with pytest.raises(DataError):
        true_cross_entropy(Dataset([tuple('01#01')]), marked)


def test_dataset_round_trip(tmp_path, marked):
    dataset = sample(marked, 5, seed=9)
    path = str(tmp_path / 'train.txt')
    dataset.save(path)
    loaded = Dataset.load(path)
    assert loaded.strings == dataset.strings
    assert loaded.provenance['task'] == 'marked-reversal'
    assert grammar_from_provenance(loaded.provenance).lengths == (5, 9)
    with pytest.raises(DataError):
        Dataset.load(str(tmp_path / 'missing.txt'))


def test_provenance_carries_grammar_parameters(tmp_path):
    grammar = build_task_grammar('marked-reversal', (3, 7), continuation=0.5)
    path = str(tmp_path / 'data.txt')
    sample(grammar, 3, seed=0).save(path)
    rebuilt = grammar_from_provenance(Dataset.load(path).provenance)
    assert length_mass(rebuilt, 3) == pytest.approx(math.log(0.5 * 0.5))


def test_corpus_appends_eos_and_maps_unknown_words(tmp_path):
    train, valid = tmp_path / 'train.txt', tmp_path / 'valid.txt'
    train.write_text('a b\nc\n', encoding='utf-8')
    valid.write_text('a z\n', encoding='utf-8')
    stream = load_corpus(str(train))
    assert stream.vocabulary.tokens == [UNK, EOS, 'a', 'b', 'c']
    assert stream.ids.tolist() == [2, 3, 1, 4, 1]
    held_out = load_corpus(str(valid), stream.vocabulary)
    assert held_out.vocabulary.decode(held_out.ids.tolist()) == ['a', UNK, EOS]


def test_vocabulary_round_trip(tmp_path):
    vocabulary = Vocabulary([UNK, EOS, 'x', 'y'], unk=UNK)
    path = str(tmp_path / 'vocab.txt')
    vocabulary.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.tokens == vocabulary.tokens
    assert loaded.encode(['y', 'w']) == [3, 0]
    with pytest.raises(DataError):
        Vocabulary(['x']).encode(['w'])
    with pytest.raises(UsageError):
        Vocabulary(['x', 'x'])


def test_corpus_feed_covers_every_target_once():
    ids = np.arange(103)
    feed = CorpusFeed(ids, batch_size=4, chunk_length=5)
    chunks = list(feed.chunks())
    assert len(chunks) == len(feed) == 6
    assert sum(chunk.targets.size for chunk in chunks) == feed.num_targets() == 103 - 4
    assert [chunk.batch_size for chunk in chunks] == [4, 4, 4, 4, 4, 3]
    offsets = np.concatenate([[0], np.cumsum(feed.row_lengths)])
    for b in range(4):
        targets = np.concatenate([chunk.targets[b] for chunk in chunks if b < chunk.batch_size])
        assert targets.tolist() == ids[offsets[b] + 1:offsets[b + 1]].tolist()
        inputs = np.concatenate([chunk.inputs[b] for chunk in chunks if b < chunk.batch_size])
        assert inputs.tolist() == ids[offsets[b]:offsets[b + 1] - 1].tolist()


def test_corpus_feed_resumes_from_a_position():
    feed = CorpusFeed(np.arange(103), batch_size=4, chunk_length=5)
    assert [chunk.index for chunk in feed.chunks(3)] == [3, 4, 5]
    assert [chunk.index for chunk in feed.chunks()] == [0, 1, 2, 3, 4, 5]


def test_corpus_feed_rejects_short_streams():
    with pytest.raises(DataError):
        CorpusFeed(np.arange(5), batch_size=4)
    with pytest.raises(UsageError):
        CorpusFeed(np.arange(50), batch_size=0)

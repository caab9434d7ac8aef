"""Command line: ``stackwfa <command> [options]``.

Exit status is 0 on success, 1 on usage errors, 2 on data errors and 3 on
numerical errors.
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import matplotlib.image
import numpy as np
import pandas as pd
import torch

from .checkpoint import Checkpoint
from .config import Config, data_dir, load_config
from .errors import NumericalError, StackWFAError, UsageError
from .models import FAMILIES, TASK_SIGNATURES
from .stack_wfa import NondeterministicStack, enumeration_errors, posterior_error, split_operations
from .tasks import (DEFAULT_LENGTHS, TASKS, TEST_LENGTHS, Dataset, build_task_grammar, grammar_from_provenance,
                    load_corpus, sample, sample_per_length)
from .training import (RANDOM_DRAWS, CflObjective, CorpusObjective, ModelScorer, TrainConfig, benchmark, evaluate,
                       model_from_checkpoint, perplexity, search, train_cfl, train_corpus)

logger = logging.getLogger(__name__)

ORACLE_TOLERANCE = 1e-9
POSTERIOR_TOLERANCE = 1e-6
ACTION_TYPES = ('push', 'replace', 'pop')


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f'manifest-{self.command}.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True, default=str)
        return path


class ArgumentParser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pair(text):
    try:
        low, high = (int(part) for part in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}")
    return low, high


def _add_model_flags(parser):
    group = parser.add_argument_group('model')
    group.add_argument('--family', choices=FAMILIES + ('rns',))
    group.add_argument('--states', dest='num_states', type=int)
    group.add_argument('--symbols', dest='num_symbols', type=int)
    group.add_argument('--stack-size', type=int)
    group.add_argument('--hidden-size', type=int)
    group.add_argument('--span', type=int, help='band D for incremental corpus mode')
    group.add_argument('--max-depth', type=int)
    group = parser.add_argument_group('optimization')
    group.add_argument('--learning-rate', type=float)
    group.add_argument('--clip', type=float)
    group.add_argument('--epochs', dest='max_epochs', type=int)
    group.add_argument('--batch-size', type=int)
    group.add_argument('--chunk-length', type=int)


def build_parser():
    parser = ArgumentParser(prog='stackwfa', description='Renormalizing nondeterministic stack RNN experiments')
    parser.add_argument('--config', help='INI file with [controller] [stack] [tasks] [training] [cli] sections')
    parser.add_argument('--data-dir', help=f'artifact root (default ${{STACKWFA_DATA_DIR}} or {Config.DATA_DIR})')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    commands.required = True

    gen = commands.add_parser('gen', help='sample train/valid/test datasets of a task')
    gen.add_argument('--task', choices=TASKS, required=True)
    gen.add_argument('--train-size', type=int, default=10000)
    gen.add_argument('--valid-size', type=int, default=1000)
    gen.add_argument('--test-per-length', type=int, default=100)
    gen.add_argument('--lengths', type=_pair, help='LOW,HIGH for train and valid')
    gen.add_argument('--test-lengths', type=_pair, default=TEST_LENGTHS)
    gen.add_argument('--output', help='directory (default DATA_DIR/TASK)')

    train = commands.add_parser('train', help='train one model')
    train.add_argument('--task', choices=TASKS, help='CFL task (omit with --corpus)')
    train.add_argument('--corpus', action='store_true', help='train/valid are text corpora, one sentence per line')
    train.add_argument('--train', dest='train_path', required=True)
    train.add_argument('--valid', dest='valid_path', required=True)
    train.add_argument('--output', help='checkpoint path')
    train.add_argument('--metrics', help='metrics log path')
    train.add_argument('--resume', help='corpus checkpoint to continue from')
    train.add_argument('--interrupt-after', type=int, help='stop after this many chunks (corpus mode)')
    _add_model_flags(train)

    evaluate_ = commands.add_parser('eval', help='cross-entropy of a checkpoint on a dataset')
    evaluate_.add_argument('--checkpoint', required=True)
    evaluate_.add_argument('--data', required=True)
    evaluate_.add_argument('--task', choices=TASKS)
    evaluate_.add_argument('--corpus', action='store_true')
    evaluate_.add_argument('--by-length', action='store_true')
    evaluate_.add_argument('--output', help='CSV for the by-length report')

    search_ = commands.add_parser('search', help='grid search on a CFL task or random search on a corpus')
    search_.add_argument('--task', choices=TASKS, help='CFL task (omit with --corpus)')
    search_.add_argument('--corpus', action='store_true', help='train/valid are text corpora; trials run train_corpus')
    search_.add_argument('--train', dest='train_path', required=True)
    search_.add_argument('--valid', dest='valid_path', required=True)
    search_.add_argument('--strategy', choices=('grid', 'random'), default='grid')
    search_.add_argument('--restarts', type=int, default=5)
    search_.add_argument('--draws', type=int, default=RANDOM_DRAWS, help='random-mode trials')
    search_.add_argument('--workers', type=int, default=1)
    search_.add_argument('--output', help='directory for trials.csv and best.ckpt')
    _add_model_flags(search_)

    oracle = commands.add_parser('oracle-check', help='stack WFA against brute-force enumeration')
    oracle.add_argument('--max-n', type=int, default=6)
    oracle.add_argument('--trials', type=int, default=100)
    oracle.add_argument('--posterior-n', type=int, default=5)

    bench = commands.add_parser('bench', help='seconds per training epoch for each family')
    bench.add_argument('--task', choices=TASKS, default='marked-reversal')
    bench.add_argument('--families', nargs='+', default=list(FAMILIES))
    bench.add_argument('--size', type=int, default=100)
    bench.add_argument('--lengths', type=_pair, default=(20, 40))
    bench.add_argument('--epochs', type=int, default=1)
    bench.add_argument('--output', help='CSV path')

    heatmap = commands.add_parser('heatmap', help='export weight of the correct stack action type')
    heatmap.add_argument('--checkpoint', required=True)
    heatmap.add_argument('--task', choices=TASKS)
    heatmap.add_argument('--length', type=int, default=41)
    heatmap.add_argument('--count', type=int, default=20)
    heatmap.add_argument('--output', required=True, help='path prefix for .csv and .png')
    return parser


def _task_settings(sections, args):
    settings = dict(sections.get('tasks', {}))
    configured = settings.pop('lengths', None)
    lengths = getattr(args, 'lengths', None) or configured
    settings.pop('task', None)
    return (tuple(lengths) if lengths else None), settings


def _train_config(sections, args, task=None, corpus=False):
    flags = {name: getattr(args, name, None) for name in
             ('family', 'num_states', 'num_symbols', 'stack_size', 'hidden_size', 'span', 'max_depth',
              'learning_rate', 'clip', 'max_epochs', 'batch_size', 'chunk_length', 'seed')}
    if corpus:
        family = flags['family'] or sections.get('stack', {}).get('family') or TrainConfig.family
        base = TrainConfig.for_corpus(family=family)
    else:
        base = TrainConfig()
        if task is not None:
            states, symbols = TASK_SIGNATURES[task]
            base = TrainConfig(num_states=states, num_symbols=symbols)
    return TrainConfig.from_sections(sections, base, **flags)


def _load_task_data(path, task):
    dataset = Dataset.load(path)
    grammar = grammar_from_provenance(dataset.provenance, task)
    return dataset, grammar


def cmd_gen(args, sections, manifest):
    lengths, params = _task_settings(sections, args)
    grammar = build_task_grammar(args.task, lengths or DEFAULT_LENGTHS, **params)
    directory = args.output or os.path.join(args.data_dir, args.task)
    splits = {
        'train': sample(grammar, args.train_size, args.seed),
        'valid': sample(grammar, args.valid_size, args.seed + 1),
        'test': sample_per_length(grammar.with_lengths(args.test_lengths), args.test_per_length, args.seed + 2),
    }
    for name, dataset in splits.items():
        path = os.path.join(directory, f'{name}.txt')
        dataset.save(path)
        manifest.artifacts += [path, path + '.meta']
    manifest.seeds.update(train=args.seed, valid=args.seed + 1, test=args.seed + 2)
    manifest.config.update(task=args.task, lengths=list(grammar.lengths), params=params)
    return 0


def cmd_train(args, sections, manifest):
    output = args.output or os.path.join(args.data_dir, 'model.ckpt')
    if args.corpus:
        config = _train_config(sections, args, corpus=True)
        train = load_corpus(args.train_path)
        valid = load_corpus(args.valid_path, train.vocabulary)
        resume = Checkpoint.load(args.resume) if args.resume else None
        result = train_corpus(config, train, valid, args.metrics, resume, args.interrupt_after, output)
        if not result.interrupted:
            logger.info(f"Best validation perplexity {result.checkpoint.metadata['progress']['best_perplexity']:.3f}")
    else:
        if args.task is None and not sections.get('tasks', {}).get('task'):
            raise UsageError("train needs --task unless --corpus is given")
        train, grammar = _load_task_data(args.train_path, args.task or sections['tasks']['task'])
        valid, valid_grammar = _load_task_data(args.valid_path, grammar.name)
        config = _train_config(sections, args, task=grammar.name)
        result = train_cfl(config, train, valid, valid_grammar, args.metrics)
        result.checkpoint.save(output)
        logger.info(f"Best validation gap {result.checkpoint.metadata['best_gap']:.6f} "
                    f"at epoch {result.checkpoint.metadata['best_epoch']}")
    manifest.config.update(result.checkpoint.config)
    manifest.seeds['model'] = result.checkpoint.config['seed']
    manifest.artifacts.append(output)
    if args.metrics:
        manifest.artifacts.append(args.metrics)
    return 0


def cmd_eval(args, sections, manifest):
    checkpoint = Checkpoint.load(args.checkpoint)
    model, vocabulary, config = model_from_checkpoint(checkpoint)
    if args.corpus:
        stream = load_corpus(args.data, vocabulary)
        value = perplexity(model, stream, config.batch_size, config.chunk_length)
        print(f"perplexity {value:.6f}")
        manifest.config['perplexity'] = value
        return 0
    dataset, grammar = _load_task_data(args.data, args.task)
    report = evaluate(ModelScorer(model, vocabulary), dataset, grammar, 'by-length' if args.by_length else 'none')
    print(f"cross_entropy {report.cross_entropy:.6f}")
    print(f"true_entropy {report.true_entropy:.6f}")
    print(f"gap {report.gap:.6f}")
    if report.by_length is not None:
        if args.output:
            report.by_length.to_csv(args.output, index=False)
            manifest.artifacts.append(args.output)
        else:
            print(report.by_length.to_string(index=False))
    manifest.config.update(cross_entropy=report.cross_entropy, gap=report.gap)
    return 0


def cmd_search(args, sections, manifest):
    if args.corpus:
        train = load_corpus(args.train_path)
        valid = load_corpus(args.valid_path, train.vocabulary)
        base, objective = _train_config(sections, args, corpus=True), CorpusObjective(train, valid)
    else:
        if args.task is None:
            raise UsageError("search needs --task unless --corpus is given")
        if args.strategy == 'random':
            raise UsageError("Random search draws corpus-mode learning rates and clips; add --corpus")
        train, grammar = _load_task_data(args.train_path, args.task)
        valid, valid_grammar = _load_task_data(args.valid_path, args.task)
        base, objective = _train_config(sections, args, task=args.task), CflObjective(train, valid, valid_grammar)
    result = search(base, objective, args.strategy, restarts=args.restarts, seed=args.seed, workers=args.workers,
                    draws=args.draws)
    directory = args.output or os.path.join(args.data_dir, 'search')
    os.makedirs(directory, exist_ok=True)
    trials_path = os.path.join(directory, 'trials.csv')
    result.trials.to_csv(trials_path, index=False)
    best_path = result.best_checkpoint.save(os.path.join(directory, 'best.ckpt'))
    print(result.trials.to_string(index=False))
    manifest.config.update(best=asdict(result.best_config))
    manifest.artifacts += [trials_path, best_path]
    return 0


def oracle_check(max_n, trials, seed, posterior_n=5):
    """``(α error, reading error, posterior error)`` maxima over random instances."""
    rng = np.random.default_rng(seed)
    worst = [0.0, 0.0, 0.0]
    for num_states in (1, 2):
        for num_symbols in (1, 2, 3):
            shape = (num_states, num_symbols, num_states, 2 * num_symbols + 1)
            for _ in range(trials):
                steps = int(rng.integers(1, max_n + 1))
                log_deltas = rng.normal(size=(steps,) + shape)
                alpha_error, reading_error = enumeration_errors(log_deltas)
                worst[0] = max(worst[0], alpha_error)
                worst[1] = max(worst[1], reading_error)
                if steps <= posterior_n:
                    t = int(rng.integers(1, steps + 1))
                    condition = (int(rng.integers(num_states)), int(rng.integers(num_symbols)))
                    worst[2] = max(worst[2], posterior_error(log_deltas, t, condition))
    return tuple(worst)


def cmd_oracle_check(args, sections, manifest):
    alpha_error, reading_error, posterior = oracle_check(args.max_n, args.trials, args.seed, args.posterior_n)
    print(f"max log-space alpha error {alpha_error:.3e}")
    print(f"max reading error {reading_error:.3e}")
    print(f"max posterior error {posterior:.3e}")
    manifest.config.update(alpha_error=alpha_error, reading_error=reading_error, posterior_error=posterior)
    if max(alpha_error, reading_error) > ORACLE_TOLERANCE or posterior > POSTERIOR_TOLERANCE:
        raise NumericalError("Stack WFA disagrees with enumeration")
    return 0


def cmd_bench(args, sections, manifest):
    lengths, params = _task_settings(sections, args)
    grammar = build_task_grammar(args.task, lengths, **params)
    train = sample(grammar, args.size, args.seed)
    valid = sample(grammar, max(args.size // 10, 1), args.seed + 1)
    states, symbols = TASK_SIGNATURES[args.task]
    table = benchmark(args.families, train, valid, grammar, args.epochs, num_states=states, num_symbols=symbols,
                      seed=args.seed)
    print(table[['model', 'seconds_per_epoch']].to_string(index=False))
    if args.output:
        table.to_csv(args.output, index=False)
        manifest.artifacts.append(args.output)
    return 0


def action_labels(task, tokens):
    """Correct action type after reading each token ``1 .. n-1``."""
    n = len(tokens)
    if task == 'marked-reversal':
        middle = tokens.index('#') + 1
        return ['push' if p < middle else 'replace' if p == middle else 'pop' for p in range(1, n)]
    if task in ('unmarked-reversal', 'padded-reversal'):
        return ['push' if p <= n // 2 else 'pop' for p in range(1, n)]
    raise UsageError(f"No stack action labels for task {task}")


def correct_action_weights(model, vocabulary, strings, task):
    """``[strings, n-1]`` weight of the correct action type over the weight of all types.

    Each type's weight is its mean transition weight; the three means are then
    normalized to sum to one.
    """
    if not isinstance(model.stack, NondeterministicStack):
        raise UsageError("Action weights exist only for stack WFA models")
    lengths = {len(s) for s in strings}
    if len(lengths) != 1:
        raise UsageError("Heatmap strings must all have the same length")
    batch = torch.tensor([vocabulary.encode(s) for s in strings], dtype=torch.long)
    with torch.no_grad():
        _, actions = model.run(batch, return_actions=True)
    matrix = np.empty((len(strings), batch.shape[1] - 1))
    for p in range(1, batch.shape[1]):
        weights = torch.stack([w.exp().flatten(1).mean(dim=1) for w in split_operations(actions[p])], dim=1)
        weights = (weights / weights.sum(dim=1, keepdim=True)).numpy()
        for row, tokens in enumerate(strings):
            label = action_labels(task, tokens)[p - 1]
            matrix[row, p - 1] = weights[row, ACTION_TYPES.index(label)]
    return matrix


def write_heatmap(matrix, prefix, row_name='string'):
    """CSV plus a grayscale PNG (black = all weight on the correct type)."""
    directory = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(directory, exist_ok=True)
    frame = pd.DataFrame(matrix, columns=[f'position_{p}' for p in range(1, matrix.shape[1] + 1)])
    frame.index.name = row_name
    frame.to_csv(prefix + '.csv')
    matplotlib.image.imsave(prefix + '.png', matrix, cmap='gray_r', vmin=0.0, vmax=1.0)
    return [prefix + '.csv', prefix + '.png']


def export_heatmap(checkpoint, task, length, count, seed, prefix):
    model, vocabulary, _ = model_from_checkpoint(checkpoint)
    grammar = build_task_grammar(task, (length, length))
    strings = sample(grammar, count, seed).strings
    return write_heatmap(correct_action_weights(model, vocabulary, strings, task), prefix)


def cmd_heatmap(args, sections, manifest):
    checkpoint = Checkpoint.load(args.checkpoint)
    task = args.task or checkpoint.metadata.get('task')
    if task is None:
        raise UsageError("heatmap needs --task for this checkpoint")
    manifest.artifacts += export_heatmap(checkpoint, task, args.length, args.count, args.seed, args.output)
    return 0


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'search': cmd_search,
    'oracle-check': cmd_oracle_check,
    'bench': cmd_bench,
    'heatmap': cmd_heatmap,
}


def dispatch(argv):
    """Run one subcommand; ``StackWFAError`` subclasses become their exit codes."""
    try:
        args = build_parser().parse_args(argv)
        sections = load_config(args.config) if args.config else {}
        cli_defaults = sections.get('cli', {})
        args.data_dir = data_dir(args.data_dir or cli_defaults.get('data_dir'))
        if args.seed is None:
            args.seed = int(cli_defaults.get('seed', 0))
        logging.getLogger().setLevel(logging.DEBUG if args.verbose else Config.LOG_LEVEL)
        manifest = RunManifest(args.command, {}, {'seed': args.seed})
        began = time.perf_counter()
        status = COMMANDS[args.command](args, sections, manifest)
        manifest.timings['seconds'] = time.perf_counter() - began
        path = manifest.write(os.path.join(args.data_dir, 'manifests'))
    except StackWFAError as e:
        logger.error(str(e))
        return e.exit_code
    logger.debug(f"Run manifest written to {path}")
    return status


def main(argv=None):
    logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == '__main__':
    sys.exit(main())

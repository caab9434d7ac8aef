"""Training loops, evaluation and hyperparameter search.

Two regimes share one controller:

* CFL mode trains on whole strings (plus EOS) with Adam, batching strings of
  equal length, and tracks the validation gap between model and true
  cross-entropy.
* Corpus mode runs one long token stream in truncated-BPTT chunks with plain
  SGD, forwarding the detached controller and stack state across chunks.
"""
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_optimizer_arrays, optimizer_arrays
from .controller import ControllerState, ForwardedState
from .errors import NumericalError, UsageError
from .models import build_model, canonical_family, initialize, is_nondeterministic
from .semiring_autodiff import Tape, backward
from .tasks import CorpusFeed, Vocabulary, string_log_prob

logger = logging.getLogger(__name__)

CFL_LEARNING_RATES = (0.01, 0.005, 0.001, 0.0005)
RANDOM_LEARNING_RATE = (1.0, 100.0)
RANDOM_CLIP = (1e-5, 1e-3)
RANDOM_DRAWS = 10
VECTOR_STACK_SIZES = (2, 20, 40)


@dataclass(frozen=True)
class TrainConfig:
    family: str = 'ns+s+u'
    num_states: int = 2
    num_symbols: int = 3
    stack_size: int = 20
    hidden_size: int = 20
    learning_rate: float = 0.005
    clip: Optional[float] = None
    max_epochs: int = 200
    batch_size: int = 10
    chunk_length: int = 35
    span: Optional[int] = None
    max_depth: Optional[int] = None
    init_scale: float = 0.1
    decay: Optional[float] = None
    patience: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'family', canonical_family(self.family))
        if self.learning_rate <= 0 or self.max_epochs < 0 or self.batch_size < 1 or self.chunk_length < 1:
            raise UsageError(f"Invalid training configuration {self}")
        if self.clip is not None and self.clip <= 0:
            raise UsageError(f"Clip threshold must be positive, got {self.clip}")
        if (self.decay is not None and self.decay <= 1) or (self.patience is not None and self.patience < 1):
            raise UsageError(f"Decay must exceed 1 and patience be positive, got {self.decay} and {self.patience}")

    @classmethod
    def for_corpus(cls, **overrides):
        """Corpus defaults: 32 rows, chunks of 35, D=35 for stack WFA families, JM depth 10.

        The learning rate is divided by 1.5 after every epoch without improvement,
        and training stops after 2 such epochs in a row.
        """
        defaults = dict(batch_size=32, chunk_length=35, init_scale=0.05, learning_rate=10.0, clip=1e-4,
                        max_epochs=100, num_states=1, num_symbols=2, decay=1.5, patience=2)
        defaults.update(overrides)
        family = canonical_family(defaults.get('family', cls.family))
        if is_nondeterministic(family):
            defaults.setdefault('span', 35)
        if family == 'jm':
            defaults.setdefault('max_depth', 10)
        return cls(**defaults)

    @classmethod
    def from_sections(cls, sections, base=None, **overrides):
        """Apply config file sections, then non-``None`` ``overrides``, to ``base``."""
        known = {f.name for f in fields(cls)}
        values = {}
        for section in ('controller', 'stack', 'training'):
            for key, value in sections.get(section, {}).items():
                if key not in known:
                    raise UsageError(f"Unknown setting {key!r} in [{section}]")
                values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return replace(base or cls(), **values)

    def to_dict(self):
        return asdict(self)

    def model(self, vocab_size, eos=True):
        return build_model(self.family, vocab_size, self.hidden_size, self.num_states, self.num_symbols,
                           self.stack_size, self.span, self.max_depth, eos)


class MetricsLog:
    """Append-only ``key=value`` lines: epoch, split, metric, value."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []

    def write(self, epoch, split, metric, value):
        row = {'epoch': epoch, 'split': split, 'metric': metric, 'value': float(value)}
        self.rows.append(row)
        logger.info(f"epoch {epoch} {split} {metric} {value:.6f}")
        if self.path:
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(' '.join(f'{k}={v!r}' if k == 'value' else f'{k}={v}' for k, v in row.items()) + '\n')

    def frame(self):
        return pd.DataFrame(self.rows, columns=['epoch', 'split', 'metric', 'value'])


def read_metrics(path):
    rows = []
    with open(path, encoding='utf-8') as f:
        for line in f:
            row = dict(item.split('=', 1) for item in line.split())
            rows.append({'epoch': int(row['epoch']), 'split': row['split'], 'metric': row['metric'],
                         'value': float(row['value'])})
    return pd.DataFrame(rows, columns=['epoch', 'split', 'metric', 'value'])


def _parameter_arrays(model):
    return {name: value.detach().clone() for name, value in model.state_dict().items()}


def _step(model, optimizer, loss_fn, clip, where):
    """One optimizer step on a fresh tape; non-finite values are reported with ``where``."""
    tape = Tape().register_module(model)
    try:
        with tape:
            loss = loss_fn()
            grads = backward(tape, loss)
    except NumericalError as e:
        raise NumericalError(f"Training diverged at {where}: {e}")
    optimizer.zero_grad()
    for name, parameter in model.named_parameters():
        parameter.grad = grads[name]
    if clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()
    return float(loss.detach())


# CFL mode

def _buckets(strings, vocabulary):
    """``{length: LongTensor [count, length]}`` in first-seen order."""
    grouped = {}
    for tokens in strings:
        grouped.setdefault(len(tokens), []).append(vocabulary.encode(tokens))
    return {n: torch.tensor(rows, dtype=torch.long).reshape(len(rows), n) for n, rows in grouped.items()}


def _batches(buckets, batch_size):
    for length, rows in buckets.items():
        for begin in range(0, rows.shape[0], batch_size):
            yield rows[begin:begin + batch_size]


class ModelScorer:
    """``log p(w · EOS)`` of strings under a trained model."""

    def __init__(self, model, vocabulary, batch_size=10):
        self.model = model
        self.vocabulary = vocabulary
        self.batch_size = batch_size

    def log_probs(self, strings):
        for tokens in strings:
            unknown = [t for t in tokens if t not in self.vocabulary.index]
            if unknown:
                raise UsageError(f"Tokens {sorted(set(unknown))} are not in the model vocabulary")
        result = np.empty(len(strings))
        order = {}
        for position, tokens in enumerate(strings):
            order.setdefault(len(tokens), []).append(position)
        with torch.no_grad():
            for length, positions in order.items():
                for begin in range(0, len(positions), self.batch_size):
                    chunk = positions[begin:begin + self.batch_size]
                    batch = torch.tensor([self.vocabulary.encode(strings[p]) for p in chunk],
                                         dtype=torch.long).reshape(len(chunk), length)
                    result[chunk] = self.model.log_likelihood(batch).numpy()
        return result


class TrueDistribution:
    """The sampling distribution of a task, scored like a model."""

    def __init__(self, grammar):
        self.grammar = grammar

    def log_probs(self, strings):
        return np.array([string_log_prob(self.grammar, tokens) for tokens in strings])


def _per_symbol(log_probs, lengths):
    return -math.fsum(log_probs) / float(sum(n + 1 for n in lengths))


@dataclass
class EvaluationReport:
    cross_entropy: float
    true_entropy: Optional[float] = None
    by_length: Optional[pd.DataFrame] = None

    @property
    def gap(self):
        return None if self.true_entropy is None else self.cross_entropy - self.true_entropy


def evaluate(scorer, dataset, grammar=None, binning='none'):
    """Per-symbol cross-entropy of ``scorer`` on ``dataset`` and its gap to the truth.

    ``binning='by-length'`` adds one row per string length.
    """
    if binning not in ('none', 'by-length'):
        raise UsageError(f"Unknown binning {binning!r}")
    strings = list(dataset)
    if not strings:
        raise UsageError("Cannot evaluate on an empty dataset")
    model_logp = scorer.log_probs(strings)
    lengths = [len(s) for s in strings]
    true_logp = TrueDistribution(grammar).log_probs(strings) if grammar is not None else None
    report = EvaluationReport(_per_symbol(model_logp, lengths))
    if true_logp is not None:
        report.true_entropy = _per_symbol(true_logp, lengths)
    if binning == 'by-length':
        rows = []
        for n in sorted(set(lengths)):
            chosen = [i for i, m in enumerate(lengths) if m == n]
            row = {'length': n, 'strings': len(chosen),
                   'cross_entropy': _per_symbol(model_logp[chosen], [n] * len(chosen))}
            if true_logp is not None:
                row['true_entropy'] = _per_symbol(true_logp[chosen], [n] * len(chosen))
                row['gap'] = row['cross_entropy'] - row['true_entropy']
            rows.append(row)
        report.by_length = pd.DataFrame(rows)
    return report


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: pd.DataFrame
    model: object
    interrupted: bool = False


def _metadata(vocabulary, eos, **extra):
    return dict(vocabulary=vocabulary.tokens, unk=vocabulary.unk, eos=eos, **extra)


def train_cfl(config, train, valid, grammar, metrics_path=None, on_epoch=None):
    """Adam on mean per-symbol cross-entropy; keeps the parameters with the best validation gap.

    ``grammar`` must carry the validation set's length range. ``on_epoch``
    is called as ``on_epoch(epoch, model)`` after every epoch, epoch 0 being
    the initialization. An epoch whose gap does not beat the best so far
    divides the learning rate by ``config.decay`` when set, and
    ``config.patience`` such epochs in a row end training early.
    """
    vocabulary = Vocabulary.for_grammar(grammar)
    model = initialize(config.model(len(vocabulary)), config.init_scale, config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    log = MetricsLog(metrics_path)
    buckets = _buckets(train, vocabulary)
    batches = list(_batches(buckets, config.batch_size))
    rng = np.random.default_rng(config.seed)
    scorer = ModelScorer(model, vocabulary, config.batch_size)
    true_entropy = evaluate(TrueDistribution(grammar), valid).cross_entropy

    def validate(epoch):
        gap = evaluate(scorer, valid).cross_entropy - true_entropy
        log.write(epoch, 'valid', 'gap', gap)
        return gap

    best_gap, best_epoch, best = validate(0), 0, _parameter_arrays(model)
    learning_rate, stagnant = config.learning_rate, 0
    if on_epoch:
        on_epoch(0, model)
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        total = 0.0
        for number, index in enumerate(rng.permutation(len(batches))):
            batch = batches[index]

            def loss_fn():
                return -model.log_likelihood(batch).sum() / (batch.shape[0] * (batch.shape[1] + 1))

            total += _step(model, optimizer, loss_fn, config.clip, f"epoch {epoch}, step {number + 1}")
        log.write(epoch, 'train', 'loss', total / max(len(batches), 1))
        log.write(epoch, 'train', 'learning_rate', learning_rate)
        gap = validate(epoch)
        if gap < best_gap:
            best_gap, best_epoch, best = gap, epoch, _parameter_arrays(model)
            stagnant = 0
        else:
            stagnant += 1
            if config.decay is not None:
                learning_rate /= config.decay
                for group in optimizer.param_groups:
                    group['lr'] = learning_rate
                logger.info(f"No improvement; learning rate now {learning_rate:.6g}")
        if on_epoch:
            on_epoch(epoch, model)
        if config.patience is not None and stagnant >= config.patience:
            logger.info(f"Stopping after epoch {epoch}: {stagnant} epochs without improvement")
            break
    model.load_state_dict(best)
    arrays, groups = optimizer_arrays(optimizer)
    checkpoint = Checkpoint(config.to_dict(), best, arrays, metadata=_metadata(
        vocabulary, True, mode='cfl', task=grammar.name, best_epoch=best_epoch, best_gap=best_gap,
        true_entropy=true_entropy, parameters=model.count_parameters(), optimizer_groups=groups))
    return TrainResult(checkpoint, log.frame(), model)


def model_from_checkpoint(checkpoint):
    """``(model, vocabulary, config)`` restored from a checkpoint."""
    config = TrainConfig(**checkpoint.config)
    metadata = checkpoint.metadata
    vocabulary = Vocabulary(metadata['vocabulary'], metadata.get('unk'))
    model = config.model(len(vocabulary), eos=metadata.get('eos', True))
    try:
        model.load_state_dict(checkpoint.parameters)
    except RuntimeError as e:
        raise UsageError(f"Checkpoint does not match its configuration: {e}")
    return model, vocabulary, config


# Corpus mode

def _forwarded_arrays(model, forwarded):
    arrays = {'controller.h': forwarded.controller.h.detach(), 'controller.c': forwarded.controller.c.detach(),
              'reading': forwarded.reading.detach()}
    for name, value in model.stack.state_arrays(forwarded.stack).items():
        arrays['stack.' + name] = value
    return arrays


def _load_forwarded(model, arrays):
    if not arrays:
        return None
    h = arrays['controller.h']
    stack_arrays = {k[len('stack.'):]: v for k, v in arrays.items() if k.startswith('stack.')}
    stack_state = model.stack.load_state_arrays(stack_arrays, h.shape[0], model.output.weight)
    return ForwardedState(ControllerState(h, arrays['controller.c']), stack_state, arrays['reading'])


def perplexity(model, stream, batch_size=32, chunk_length=35):
    """``exp`` of the per-token cross-entropy over a whole stream."""
    feed = CorpusFeed(stream, batch_size, chunk_length)
    total, count, forwarded = 0.0, 0, None
    with torch.no_grad():
        for chunk in feed.chunks():
            if forwarded is not None and chunk.batch_size < forwarded.reading.shape[0]:
                forwarded = forwarded.slice(model.stack, chunk.batch_size)
            logits, forwarded = model.run_chunk(torch.from_numpy(chunk.inputs), forwarded)
            targets = torch.from_numpy(chunk.targets)
            total += float(F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                                           reduction='sum'))
            count += targets.numel()
    try:
        return math.exp(total / count)
    except OverflowError:
        return math.inf


def train_corpus(config, train, valid, metrics_path=None, resume=None, interrupt_after=None, checkpoint_path=None):
    """SGD over truncated-BPTT chunks with learning-rate decay and early stopping.

    The learning rate is divided, and the clip threshold multiplied, by
    ``batch_size * chunk_length`` since the loss is summed over the chunk.
    ``interrupt_after`` stops after that many chunks of this call and returns
    a resumable checkpoint; ``resume`` continues from one.
    """
    if is_nondeterministic(config.family) and config.span is None:
        raise UsageError("Corpus mode runs the stack WFA banded; set a span D")
    vocabulary = train.vocabulary
    scale = config.batch_size * config.chunk_length
    model = initialize(config.model(len(vocabulary), eos=False), config.init_scale, config.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate / scale)
    clip = None if config.clip is None else config.clip * scale
    log = MetricsLog(metrics_path)
    state = {'epoch': 1, 'position': 0, 'learning_rate': config.learning_rate,
             'best_perplexity': math.inf, 'best_epoch': 0, 'stagnant': 0}
    best = _parameter_arrays(model)
    forwarded = None
    if resume is not None:
        model.load_state_dict(resume.parameters)
        state.update(resume.metadata['progress'])
        load_optimizer_arrays(optimizer, resume.optimizer, resume.metadata['optimizer_groups'])
        forwarded = _load_forwarded(model, resume.forwarded)
        best = dict(resume.best) or best
        log.rows = list(resume.metadata.get('history', []))
    feed = CorpusFeed(train, config.batch_size, config.chunk_length)
    done = 0

    def snapshot():
        arrays, groups = optimizer_arrays(optimizer)
        metadata = _metadata(vocabulary, False, mode='corpus', progress=dict(state), optimizer_groups=groups,
                             history=log.rows, parameters=model.count_parameters())
        forwarded_arrays = _forwarded_arrays(model, forwarded) if forwarded is not None else {}
        return Checkpoint(config.to_dict(), _parameter_arrays(model), arrays, forwarded_arrays, best, metadata)

    while state['epoch'] <= config.max_epochs and (config.patience is None or state['stagnant'] < config.patience):
        epoch = state['epoch']
        for group in optimizer.param_groups:
            group['lr'] = state['learning_rate'] / scale
        for chunk in feed.chunks(state['position']):
            if forwarded is not None and chunk.batch_size < forwarded.reading.shape[0]:
                forwarded = forwarded.slice(model.stack, chunk.batch_size)
            inputs, targets = torch.from_numpy(chunk.inputs), torch.from_numpy(chunk.targets)
            outputs = {}

            def loss_fn():
                logits, outputs['forwarded'] = model.run_chunk(inputs, forwarded)
                return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction='sum')

            _step(model, optimizer, loss_fn, clip, f"epoch {epoch}, chunk {chunk.index}")
            forwarded = outputs['forwarded'].detach(model.stack)
            state['position'] = chunk.index + 1
            done += 1
            if interrupt_after is not None and done >= interrupt_after:
                checkpoint = snapshot()
                if checkpoint_path:
                    checkpoint.save(checkpoint_path)
                return TrainResult(checkpoint, log.frame(), model, interrupted=True)
        valid_perplexity = perplexity(model, valid, config.batch_size, config.chunk_length)
        log.write(epoch, 'valid', 'perplexity', valid_perplexity)
        if valid_perplexity < state['best_perplexity']:
            state.update(best_perplexity=valid_perplexity, best_epoch=epoch, stagnant=0)
            best = _parameter_arrays(model)
        else:
            if config.decay is not None:
                state['learning_rate'] /= config.decay
            state['stagnant'] += 1
            logger.info(f"No improvement; learning rate now {state['learning_rate']:.6g}")
        state.update(epoch=epoch + 1, position=0)
        forwarded = None
    model.load_state_dict(best)
    forwarded = None
    checkpoint = snapshot()
    if checkpoint_path:
        checkpoint.save(checkpoint_path)
    return TrainResult(checkpoint, log.frame(), model)


# Search

@dataclass
class CflObjective:
    """Trains one CFL trial; picklable so trials can run in worker processes."""
    train: object
    valid: object
    grammar: object

    def __call__(self, config):
        result = train_cfl(config, self.train, self.valid, self.grammar)
        return result.checkpoint.metadata['best_gap'], result.checkpoint


@dataclass
class CorpusObjective:
    """Trains one corpus trial; the metric is the best validation perplexity."""
    train: object
    valid: object

    def __call__(self, config):
        result = train_corpus(config, self.train, self.valid)
        return result.checkpoint.metadata['progress']['best_perplexity'], result.checkpoint


@dataclass
class SearchResult:
    best_config: TrainConfig
    best_checkpoint: Checkpoint
    trials: pd.DataFrame = field(default_factory=pd.DataFrame)


def search_space(strategy, space=None, restarts=5, seed=0, draws=RANDOM_DRAWS, family=None):
    """Trial overrides: the grid times restarts, or log-uniform random draws.

    The default grid also sweeps the stack vector size of the ``gref`` and
    ``jm`` families.
    """
    if strategy == 'grid':
        if space is None:
            space = {'learning_rate': list(CFL_LEARNING_RATES)}
            if family in ('gref', 'jm'):
                space['stack_size'] = list(VECTOR_STACK_SIZES)
        if not space or any(not values for values in space.values()):
            raise UsageError("Search space must be non-empty")
        names = list(space)
        points = [dict(zip(names, values)) for values in itertools.product(*(space[n] for n in names))]
        return [dict(point, seed=seed + restart) for point in points for restart in range(restarts)]
    if strategy == 'random':
        space = space or {'learning_rate': RANDOM_LEARNING_RATE, 'clip': RANDOM_CLIP}
        rng = np.random.default_rng(seed)
        trials = []
        for draw in range(draws):
            point = {name: float(math.exp(rng.uniform(math.log(low), math.log(high))))
                     for name, (low, high) in space.items()}
            trials.append(dict(point, seed=seed + draw))
        return trials
    raise UsageError(f"Unknown search strategy {strategy!r}")


def _run_trial(objective, config):
    try:
        return objective(config)
    except NumericalError as e:
        return None, str(e)


def search(base, objective, strategy='grid', space=None, restarts=5, seed=0, workers=1, draws=RANDOM_DRAWS):
    """Run every trial of the search space and keep the lowest validation metric.

    The default random space holds corpus-mode learning rates and clip
    thresholds, which ``train_corpus`` scales by the chunk size; it is refused
    for CFL trials.
    """
    if strategy == 'random' and space is None and isinstance(objective, CflObjective):
        raise UsageError("Random search without a space is for corpus training; pass a space for CFL tasks")
    overrides = search_space(strategy, space, restarts, seed, draws, family=base.family)
    configs = [replace(base, **override) for override in overrides]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_trial, itertools.repeat(objective), configs))
    else:
        outcomes = [_run_trial(objective, config) for config in configs]
    rows, best = [], None
    for number, (override, (metric, payload)) in enumerate(zip(overrides, outcomes)):
        diverged = metric is None or not math.isfinite(metric)
        rows.append(dict(trial=number, **override, metric=math.nan if diverged else metric,
                         status=payload if diverged else 'ok'))
        logger.info(f"Trial {number} {override}: {'diverged' if diverged else f'{metric:.6f}'}")
        if not diverged and (best is None or metric < best[0]):
            best = (metric, configs[number], payload)
    trials = pd.DataFrame(rows)
    if best is None:
        raise NumericalError("Every trial diverged:\n" + trials.to_string(index=False))
    return SearchResult(best[1], best[2], trials)


def benchmark(families, train, valid, grammar, epochs=1, **settings):
    """Seconds per training epoch of each family on the same data."""
    rows = []
    for family in families:
        config = TrainConfig(family=family, max_epochs=epochs, **settings)
        begin = time.perf_counter()
        result = train_cfl(config, train, valid, grammar)
        seconds = (time.perf_counter() - begin) / max(epochs, 1)
        rows.append({'model': family, 'seconds_per_epoch': seconds, 'parameters': result.model.count_parameters()})
        logger.info(f"{family}: {seconds:.3f} s/epoch")
    return pd.DataFrame(rows, columns=['model', 'seconds_per_epoch', 'parameters'])

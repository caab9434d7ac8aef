"""Context-free language tasks and token corpora.

Each task is a PCFG. Strings are sampled by first drawing a length uniformly
from the achievable lengths in the task's range and then drawing a string of
exactly that length, so the probability of every sampled string is known and
the true cross-entropy of a dataset can be computed exactly.

Grammars are epsilon-free. Internally they are binarized: terminals inside
longer right-hand sides get preterminals, long right-hand sides get chains of
fresh nonterminals, and unary rules between nonterminals must be acyclic.
"""
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DataError, UsageError

logger = logging.getLogger(__name__)

TASKS = ('marked-reversal', 'unmarked-reversal', 'padded-reversal', 'dyck2', 'hardest-cfl')
DEFAULT_LENGTHS = (40, 80)
TEST_LENGTHS = (40, 100)

UNK = '<unk>'
EOS = '<eos>'


def _lse(values, axis):
    return np.logaddexp.reduce(values, axis=axis)


def _as_tokens(string):
    if isinstance(string, str):
        return tuple(string.split()) if ' ' in string else tuple(string)
    return tuple(string)


class _CompiledGrammar:
    """Binarized rule tables indexed by nonterminal number."""

    def __init__(self, start, productions):
        lexical, unary, binary = [], [], []
        names = list(productions)

        def nonterminal(symbol):
            if symbol in productions:
                return names.index(symbol)
            name = f"'{symbol}'"
            if name not in names:
                names.append(name)
                lexical.append((names.index(name), symbol, 0.0))
            return names.index(name)

        for lhs, options in productions.items():
            for number, (rhs, probability) in enumerate(options):
                if probability == 0.0:
                    continue
                logp = math.log(probability)
                a = names.index(lhs)
                if len(rhs) == 1:
                    if rhs[0] in productions:
                        unary.append((a, names.index(rhs[0]), logp))
                    else:
                        lexical.append((a, rhs[0], logp))
                    continue
                symbols = list(rhs)
                head = a
                for position in range(len(symbols) - 2):
                    chain = f'{lhs}#{number}.{position}'
                    names.append(chain)
                    binary.append((head, nonterminal(symbols[position]), names.index(chain),
                                   logp if position == 0 else 0.0))
                    head = names.index(chain)
                binary.append((head, nonterminal(symbols[-2]), nonterminal(symbols[-1]),
                               logp if len(symbols) == 2 else 0.0))
        self.names = names
        self.start = names.index(start)
        self.size = len(names)
        self.terminals = sorted({symbol for _, symbol, _ in lexical})
        self.lexical = lexical
        self.binary = binary
        self.binary_lhs = np.array([r[0] for r in binary], dtype=np.int64)
        self.binary_left = np.array([r[1] for r in binary], dtype=np.int64)
        self.binary_right = np.array([r[2] for r in binary], dtype=np.int64)
        self.binary_logp = np.array([r[3] for r in binary], dtype=np.float64)
        self.binary_groups = {a: np.flatnonzero(self.binary_lhs == a) for a in set(self.binary_lhs.tolist())}
        self.unary = {}
        for a, b, logp in unary:
            self.unary.setdefault(a, []).append((b, logp))
        self.unary_order = self._unary_order()

    def _unary_order(self):
        order, marks = [], {}

        def visit(a):
            if marks.get(a) == 'done':
                return
            if marks.get(a) == 'open':
                raise UsageError(f"Unary rules of nonterminal {self.names[a]} form a cycle")
            marks[a] = 'open'
            for b, _ in self.unary.get(a, ()):
                visit(b)
            marks[a] = 'done'
            order.append(a)

        for a in self.unary:
            visit(a)
        return [a for a in order if a in self.unary]

    def close_unary(self, cell):
        """Apply unary rules in place to ``cell`` ``[..., N]``, children first."""
        for a in self.unary_order:
            for b, logp in self.unary[a]:
                cell[..., a] = np.logaddexp(cell[..., a], logp + cell[..., b])
        return cell

    def combine(self, left, right):
        """Binary-rule contributions per lhs from ``left``/``right`` ``[K, S, N]``."""
        scores = self.binary_logp + left[..., self.binary_left] + right[..., self.binary_right]
        scores = _lse(scores, axis=0)
        cell = np.full(scores.shape[:-1] + (self.size,), -np.inf)
        for a, rules in self.binary_groups.items():
            cell[..., a] = _lse(scores[..., rules], axis=-1)
        return cell


@dataclass(frozen=True)
class TaskGrammar:
    """A PCFG plus the uniform length distribution strings are drawn with.

    ``productions`` maps every nonterminal to ``(rhs, probability)`` pairs;
    any symbol that is not a key is a terminal.
    """
    name: str
    start: str
    productions: dict
    lengths: tuple = DEFAULT_LENGTHS
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.start not in self.productions:
            raise UsageError(f"Start symbol {self.start} has no productions")
        for lhs, options in self.productions.items():
            total = math.fsum(p for _, p in options)
            if abs(total - 1.0) > 1e-12:
                raise UsageError(f"Productions of {lhs} sum to {total}, not 1")
            for rhs, p in options:
                if not rhs or p < 0.0:
                    raise UsageError(f"Invalid production {lhs} -> {rhs} ({p})")
        low, high = self.lengths
        if not 1 <= low <= high:
            raise UsageError(f"Invalid length range {self.lengths}")

    def __hash__(self):
        return hash((self.name, self.start, self.lengths))

    @cached_property
    def compiled(self):
        return _CompiledGrammar(self.start, self.productions)

    @property
    def terminals(self):
        return self.compiled.terminals

    def with_lengths(self, lengths):
        return TaskGrammar(self.name, self.start, self.productions, tuple(lengths), dict(self.params))

    def mass_table(self, max_length):
        """``M[w, A]``: log mass of nonterminal ``A`` on strings of length ``w``."""
        cached = self.__dict__.get('_mass_table')
        if cached is not None and cached.shape[0] > max_length:
            return cached
        compiled = self.compiled
        table = np.full((max_length + 1, compiled.size), -np.inf)
        for a, symbol, logp in compiled.lexical:
            table[1, a] = np.logaddexp(table[1, a], logp)
        compiled.close_unary(table[1])
        for width in range(2, max_length + 1):
            splits = np.arange(1, width)
            table[width] = compiled.combine(table[splits], table[width - splits])
            compiled.close_unary(table[width])
        object.__setattr__(self, '_mass_table', table)
        return table

    @cached_property
    def achievable_lengths(self):
        low, high = self.lengths
        table = self.mass_table(high)
        return [n for n in range(low, high + 1) if np.isfinite(table[n, self.compiled.start])]


MARKED_REVERSAL_CONTINUE = 59 / 61
UNMARKED_REVERSAL_CONTINUE = 29 / 30


def _reversal_pairs(symbol, continuation):
    return [(('0', symbol, '0'), continuation / 2), (('1', symbol, '1'), continuation / 2)]


def _marked_reversal(continuation=MARKED_REVERSAL_CONTINUE):
    return {'S': _reversal_pairs('S', continuation) + [(('#',), 1.0 - continuation)]}


def _unmarked_reversal(continuation=UNMARKED_REVERSAL_CONTINUE):
    end = (1.0 - continuation) / 2
    return {'S': _reversal_pairs('S', continuation) + [(('0', '0'), end), (('1', '1'), end)]}


def _padded_reversal(continuation=0.95, padding=0.9):
    end = (1.0 - continuation) / 2
    return {
        'S': _reversal_pairs('S', continuation) + [(('P0',), end), (('P1',), end)],
        'P0': [(('0', 'P0'), padding), (('0',), 1.0 - padding)],
        'P1': [(('1', 'P1'), padding), (('1',), 1.0 - padding)],
    }


def _dyck_body(sequence, nest, open_round='(', close_round=')', open_square='[', close_square=']'):
    return {
        'D': [(('B',), 1.0 - sequence), (('B', 'D'), sequence)],
        'B': [((open_round, 'D', close_round), nest / 2), ((open_square, 'D', close_square), nest / 2),
              ((open_round, close_round), (1.0 - nest) / 2), ((open_square, close_square), (1.0 - nest) / 2)],
    }


def _dyck2(sequence=0.5, nest=0.5):
    return _dyck_body(sequence, nest)


def _hardest_cfl(sequence=0.5, nest=0.5, empty=0.1, segment_break=0.1, decoy=0.5):
    """Segments ``x , y , z ;`` where ``x`` and ``z`` are decoys over
    ``( ) [ ] $ ,`` and the concatenated ``y`` parts form ``$`` followed by a
    Dyck word. A new segment may start before any bracket of the Dyck word.
    """
    decoys = ('(', ')', '[', ']', '$', ',')
    keep = (1.0 - decoy) / len(decoys)
    grammar = _dyck_body(sequence, nest, 'Lr', 'Rr', 'Ls', 'Rs')
    grammar.update({
        'S': [(('X', '$', 'D', 'Z'), 1.0 - empty), (('X', '$', 'Z'), empty)],
        'X': [((',',), 1.0 - decoy), (('C', ','), decoy)],
        'Z': [((',', ';'), 1.0 - decoy), ((',', 'C', ';'), decoy)],
        'C': [((symbol,), keep) for symbol in decoys] + [((symbol, 'C'), decoy / len(decoys)) for symbol in decoys],
        'K': [(('Z', 'X'), 1.0)],
    })
    for name, symbol in (('Lr', '('), ('Rr', ')'), ('Ls', '['), ('Rs', ']')):
        grammar[name] = [((symbol,), 1.0 - segment_break), (('K', symbol), segment_break)]
    return grammar


_BUILDERS = {
    'marked-reversal': _marked_reversal,
    'unmarked-reversal': _unmarked_reversal,
    'padded-reversal': _padded_reversal,
    'dyck2': _dyck2,
    'hardest-cfl': _hardest_cfl,
}


def build_task_grammar(task, lengths=DEFAULT_LENGTHS, **params):
    """Grammar of one of :data:`TASKS`; ``params`` override branch probabilities."""
    try:
        builder = _BUILDERS[task]
    except KeyError:
        raise UsageError(f"Unknown task {task!r}, expected one of {TASKS}")
    for name, value in params.items():
        if not 0.0 <= value < 1.0:
            raise UsageError(f"Task parameter {name}={value} outside [0, 1)")
    try:
        productions = builder(**params)
    except TypeError as e:
        raise UsageError(f"Bad parameters for {task}: {e}")
    start = 'D' if task == 'dyck2' else 'S'
    return TaskGrammar(task, start, productions, tuple(lengths), dict(params))


def length_mass(grammar, length):
    """Log of the total probability of strings of exactly ``length`` symbols."""
    if length < 0:
        raise UsageError(f"Length must be non-negative, got {length}")
    if length == 0:
        return -math.inf
    return float(grammar.mass_table(length)[length, grammar.compiled.start])


def inside_logprob(grammar, string):
    """Log probability of ``string`` summed over all of its derivations."""
    tokens = _as_tokens(string)
    compiled = grammar.compiled
    n = len(tokens)
    if n == 0 or any(t not in compiled.terminals for t in tokens):
        return -math.inf
    tokens = np.array(tokens, dtype=object)
    chart = [None, np.full((n, compiled.size), -np.inf)]
    for a, symbol, logp in compiled.lexical:
        hits = tokens == symbol
        chart[1][hits, a] = np.logaddexp(chart[1][hits, a], logp)
    compiled.close_unary(chart[1])
    for width in range(2, n + 1):
        starts = n - width + 1
        left = np.stack([chart[k][:starts] for k in range(1, width)])
        right = np.stack([chart[width - k][k:k + starts] for k in range(1, width)])
        chart.append(compiled.close_unary(compiled.combine(left, right)))
    return float(chart[n][0, compiled.start])


def string_log_prob(grammar, string):
    """``log p(w · EOS)`` under the length-conditioned sampling distribution."""
    tokens = _as_tokens(string)
    lengths = grammar.achievable_lengths
    if len(tokens) not in lengths:
        return -math.inf
    inside = inside_logprob(grammar, tokens)
    if inside == -math.inf:
        return -math.inf
    return -math.log(len(lengths)) + inside - length_mass(grammar, len(tokens))


@dataclass
class Dataset:
    strings: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.strings)

    def __iter__(self):
        return iter(self.strings)

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for tokens in self.strings:
                f.write(' '.join(tokens) + '\n')
        with open(path + '.meta', 'w', encoding='utf-8', newline='\n') as f:
            for key in sorted(self.provenance):
                f.write(f'{key}={self.provenance[key]}\n')
        logger.info(f"Saved {len(self)} strings to {path}")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding='utf-8') as f:
                strings = [tuple(line.split()) for line in f if line.strip()]
            provenance = {}
            if os.path.exists(path + '.meta'):
                with open(path + '.meta', encoding='utf-8') as f:
                    for line in f:
                        key, _, value = line.rstrip('\n').partition('=')
                        provenance[key] = value
        except (OSError, UnicodeDecodeError) as e:
            raise DataError(f"Cannot read dataset {path}: {e}")
        return cls(strings, provenance)


class _Sampler:
    """Ancestral sampling conditioned on the length of every subtree."""

    def __init__(self, grammar, max_length, rng):
        self.compiled = grammar.compiled
        self.table = grammar.mass_table(max_length)
        self.rng = rng
        self.lexical = {}
        for a, symbol, logp in self.compiled.lexical:
            self.lexical.setdefault(a, []).append((symbol, logp))
        self.binary = {}
        for a, b, c, logp in self.compiled.binary:
            self.binary.setdefault(a, []).append((b, c, logp))

    def _choose(self, options):
        weights = np.array([w for w, _ in options])
        weights = np.exp(weights - weights.max())
        return options[self.rng.choice(len(options), p=weights / weights.sum())][1]

    def _expand(self, a, width):
        options = []
        if width == 1:
            options += [(logp, symbol) for symbol, logp in self.lexical.get(a, ())]
        options += [(logp + self.table[width, b], ((b, width),)) for b, logp in self.compiled.unary.get(a, ())]
        for b, c, logp in self.binary.get(a, ()):
            for k in range(1, width):
                options.append((logp + self.table[k, b] + self.table[width - k, c], ((b, k), (c, width - k))))
        options = [o for o in options if o[0] > -np.inf]
        if not options:
            raise UsageError(f"Nonterminal {self.compiled.names[a]} derives no string of length {width}")
        return self._choose(options)

    def string(self, length):
        tokens, pending = [], [(self.compiled.start, length)]
        while pending:
            choice = self._expand(*pending.pop())
            if isinstance(choice, str):
                tokens.append(choice)
            else:
                pending.extend(reversed(choice))
        return tuple(tokens)


def _provenance(grammar, seed, size, **extra):
    provenance = {'task': grammar.name, 'seed': seed, 'min_length': grammar.lengths[0],
                  'max_length': grammar.lengths[1], 'size': size}
    provenance.update({f'param.{k}': repr(v) for k, v in sorted(grammar.params.items())})
    provenance.update(extra)
    return provenance


def sample(grammar, count, seed):
    """``count`` strings with lengths uniform over the achievable lengths."""
    if count < 1:
        raise UsageError(f"Sample count must be positive, got {count}")
    lengths = grammar.achievable_lengths
    if not lengths:
        raise UsageError(f"{grammar.name} has no strings with length in {grammar.lengths}")
    rng = np.random.default_rng(seed)
    sampler = _Sampler(grammar, grammar.lengths[1], rng)
    strings = [sampler.string(int(rng.choice(lengths))) for _ in range(count)]
    return Dataset(strings, _provenance(grammar, seed, count))


def sample_per_length(grammar, per_length, seed):
    """``per_length`` strings of every achievable length, shortest first."""
    lengths = grammar.achievable_lengths
    if not lengths:
        raise UsageError(f"{grammar.name} has no strings with length in {grammar.lengths}")
    sampler = _Sampler(grammar, grammar.lengths[1], np.random.default_rng(seed))
    strings = [sampler.string(n) for n in lengths for _ in range(per_length)]
    return Dataset(strings, _provenance(grammar, seed, len(strings), per_length=per_length))


def true_cross_entropy(dataset, grammar):
    """Per-symbol cross-entropy of the sampling distribution on ``dataset``, EOS included."""
    total, symbols = 0.0, 0
    for tokens in dataset:
        logp = string_log_prob(grammar, tokens)
        if logp == -math.inf:
            raise DataError(f"String {' '.join(tokens)!r} has probability 0 under {grammar.name}")
        total -= logp
        symbols += len(tokens) + 1
    if not symbols:
        raise DataError("Empty dataset")
    return total / symbols


class Vocabulary:
    """Token table; ``unk`` (if set) absorbs tokens outside the table."""

    def __init__(self, tokens, unk=None):
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise UsageError("Vocabulary tokens must be unique")
        if unk is not None and unk not in self.index:
            raise UsageError(f"Unknown-token marker {unk!r} missing from vocabulary")
        self.unk = unk

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def for_grammar(cls, grammar):
        return cls(grammar.terminals)

    def encode(self, tokens):
        ids = []
        for token in tokens:
            if token in self.index:
                ids.append(self.index[token])
            elif self.unk is not None:
                ids.append(self.index[self.unk])
            else:
                raise DataError(f"Token {token!r} is not in the vocabulary")
        return ids

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(self.tokens) + '\n')

    @classmethod
    def load(cls, path, unk=UNK):
        try:
            with open(path, encoding='utf-8') as f:
                tokens = [line.rstrip('\n') for line in f if line.rstrip('\n')]
        except OSError as e:
            raise DataError(f"Cannot read vocabulary {path}: {e}")
        return cls(tokens, unk if unk in tokens else None)


@dataclass
class TokenStream:
    ids: np.ndarray
    vocabulary: Vocabulary

    def __len__(self):
        return len(self.ids)


def load_corpus(path, vocabulary=None):
    """One long stream of token ids with ``<eos>`` after every line.

    Without ``vocabulary`` the table is built from this file (the training
    split) and includes ``<unk>`` and ``<eos>``.
    """
    try:
        with open(path, encoding='utf-8') as f:
            lines = [line.split() for line in f]
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot read corpus {path}: {e}")
    tokens = [token for line in lines for token in line + [EOS]]
    if vocabulary is None:
        words = sorted({token for line in lines for token in line} - {UNK, EOS})
        if not words:
            raise DataError(f"Corpus {path} yields an empty vocabulary")
        vocabulary = Vocabulary([UNK, EOS] + words, unk=UNK)
    ids = np.array(vocabulary.encode(tokens), dtype=np.int64)
    logger.info(f"Loaded {len(ids)} tokens from {path} (vocabulary {len(vocabulary)})")
    return TokenStream(ids, vocabulary)


@dataclass
class CorpusChunk:
    inputs: np.ndarray
    targets: np.ndarray
    index: int

    @property
    def batch_size(self):
        return self.inputs.shape[0]


class CorpusFeed:
    """Truncated-BPTT chunks of a token stream split into parallel rows.

    The stream is cut into ``batch_size`` contiguous rows whose lengths
    differ by at most one. Every row predicts its own next tokens in chunks of
    ``chunk_length``; the extra token of the longer rows comes last as a
    chunk over only those rows.
    """
    _ST_MAIN, _ST_EXTRA = range(2)

    def __init__(self, stream, batch_size=32, chunk_length=35):
        ids = np.asarray(stream.ids if isinstance(stream, TokenStream) else stream, dtype=np.int64)
        if batch_size < 1 or chunk_length < 1:
            raise UsageError("Batch size and chunk length must be positive")
        base, extra = divmod(len(ids), batch_size)
        if base < 2:
            raise DataError(f"Stream of {len(ids)} tokens is too short for {batch_size} rows")
        self.batch_size = batch_size
        self.chunk_length = chunk_length
        self.row_lengths = [base + 1 if b < extra else base for b in range(batch_size)]
        offsets = np.concatenate([[0], np.cumsum(self.row_lengths)])
        self.grid = np.stack([ids[offsets[b]:offsets[b] + base] for b in range(batch_size)])
        self.tail = np.array([ids[offsets[b] + base - 1:offsets[b] + base + 1] for b in range(extra)],
                             dtype=np.int64).reshape(extra, 2)
        self._chunks = deque()

    def __len__(self):
        main = -(-(self.grid.shape[1] - 1) // self.chunk_length)
        return main + (1 if len(self.tail) else 0)

    def num_targets(self):
        return (self.grid.shape[1] - 1) * self.batch_size + len(self.tail)

    def _fill(self, position):
        self._chunks.clear()
        steps = self.grid.shape[1] - 1
        for index, begin in enumerate(range(0, steps, self.chunk_length)):
            if index < position:
                continue
            end = min(begin + self.chunk_length, steps)
            self._chunks.append((self._ST_MAIN, index, begin, end))
        main = -(-steps // self.chunk_length)
        if len(self.tail) and position <= main:
            self._chunks.append((self._ST_EXTRA, main, 0, 1))

    def chunks(self, position=0):
        """Chunks from index ``position`` onward (for resuming an epoch)."""
        self._fill(position)
        while self._chunks:
            state, index, begin, end = self._chunks.popleft()
            if state == self._ST_MAIN:
                yield CorpusChunk(self.grid[:, begin:end], self.grid[:, begin + 1:end + 1], index)
            else:
                yield CorpusChunk(self.tail[:, :1], self.tail[:, 1:], index)


def grammar_from_provenance(provenance, task=None, lengths=None):
    """Grammar a dataset was sampled from, rebuilt from its ``.meta`` record."""
    task = task or provenance.get('task')
    if not task:
        raise DataError("Dataset has no task in its provenance; pass the task explicitly")
    if lengths is None:
        try:
            lengths = (int(provenance['min_length']), int(provenance['max_length']))
        except KeyError:
            raise DataError("Dataset provenance lacks its length range")
    params = {key[len('param.'):]: float(value) for key, value in provenance.items() if key.startswith('param.')}
    return build_task_grammar(task, lengths, **params)

"""Model families and their construction."""
import logging

import torch

from .banded_stack_wfa import BandedNondeterministicStack
from .baseline_stacks import StratificationStack, SuperpositionStack
from .config import Config
from .controller import NullStack, StackRNN
from .errors import UsageError
from .stack_wfa import NondeterministicStack, PdaSignature

logger = logging.getLogger(__name__)

# family -> (normalized, reading mode)
NONDETERMINISTIC = {
    'ns': (True, 'symbols'),
    'ns+s': (True, 'joint'),
    'ns+u': (False, 'symbols'),
    'ns+s+u': (False, 'joint'),
}
ALIASES = {'rns': 'ns+s+u'}
FAMILIES = ('lstm', 'gref', 'jm', 'jm-hidden') + tuple(NONDETERMINISTIC)

# |Q|, |Γ| per task
TASK_SIGNATURES = {
    'marked-reversal': (2, 3),
    'unmarked-reversal': (2, 3),
    'dyck2': (2, 3),
    'padded-reversal': (3, 3),
    'hardest-cfl': (3, 3),
}


def canonical_family(family):
    family = ALIASES.get(family, family)
    if family not in FAMILIES:
        raise UsageError(f"Unknown model family {family!r}, expected one of {FAMILIES + tuple(ALIASES)}")
    return family


def is_nondeterministic(family):
    return canonical_family(family) in NONDETERMINISTIC


def build_stack(family, hidden_size, num_states=2, num_symbols=3, stack_size=20, span=None, max_depth=None):
    family = canonical_family(family)
    if family == 'lstm':
        return NullStack()
    if family == 'gref':
        return StratificationStack(hidden_size, stack_size)
    if family == 'jm':
        return SuperpositionStack(hidden_size, stack_size, max_depth=max_depth)
    if family == 'jm-hidden':
        return SuperpositionStack(hidden_size, hidden_size, push_hidden=True, max_depth=max_depth)
    normalized, mode = NONDETERMINISTIC[family]
    signature = PdaSignature(num_states, num_symbols)
    if span is not None:
        return BandedNondeterministicStack(hidden_size, signature, normalized, mode, span)
    return NondeterministicStack(hidden_size, signature, normalized, mode)


def build_model(family, vocab_size, hidden_size=20, num_states=2, num_symbols=3, stack_size=20,
                span=None, max_depth=None, eos=True):
    """A :class:`StackRNN` of ``family`` in :attr:`Config.DTYPE`.

    ``span`` selects the banded stack WFA (incremental corpus mode);
    ``eos=False`` drops the extra EOS output for corpora that carry their own
    end-of-sentence token.
    """
    if vocab_size < 1 or hidden_size < 1:
        raise UsageError("Vocabulary and hidden sizes must be positive")
    stack = build_stack(family, hidden_size, num_states, num_symbols, stack_size, span, max_depth)
    model = StackRNN(vocab_size, hidden_size, stack, eos=eos).to(Config.DTYPE)
    logger.debug(f"Built {family} model with {model.count_parameters()} parameters")
    return model


def initialize(model, scale, seed):
    """Draw every parameter uniformly from ``[-scale, scale]``."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for parameter in model.parameters():
            parameter.uniform_(-scale, scale, generator=generator)
    return model

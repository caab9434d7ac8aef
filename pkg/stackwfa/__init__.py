from .errors import StackWFAError, UsageError, DataError, NumericalError
from .stack_wfa import PdaSignature, NondeterministicStack, gamma_step, alpha_step, reading
from .banded_stack_wfa import BandConfig, WindowState, BandedNondeterministicStack, banded_step, detach_window
from .baseline_stacks import StratificationStack, SuperpositionStack
from .controller import StackRNN
from .models import build_model
from .tasks import build_task_grammar, sample, inside_logprob, length_mass, true_cross_entropy, load_corpus
from .training import TrainConfig, train_cfl, train_corpus, search, evaluate

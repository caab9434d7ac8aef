import logging

from stackwfa.cli import oracle_check
from stackwfa.config import Config
from stackwfa.models import FAMILIES
from stackwfa.tasks import build_task_grammar, sample
from stackwfa.training import benchmark

logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)


if __name__ == '__main__':
    alpha_error, reading_error, posterior = oracle_check(max_n=6, trials=100, seed=0)  # DP against enumeration
    print(f"alpha {alpha_error:.2e}, reading {reading_error:.2e}, posterior {posterior:.2e}")

    grammar = build_task_grammar('hardest-cfl', (20, 40))
    train = sample(grammar, 100, seed=1)
    valid = sample(grammar, 10, seed=2)
    table = benchmark(FAMILIES, train, valid, grammar, epochs=1, num_states=3, num_symbols=3)  # seconds per epoch
    print(table.to_string(index=False))

import logging
import os

from stackwfa.config import Config
from stackwfa.models import TASK_SIGNATURES
from stackwfa.tasks import build_task_grammar, sample
from stackwfa.training import CflObjective, TrainConfig, search

logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)


if __name__ == '__main__':
    task = 'dyck2'  # balanced ( ) [ ]
    grammar = build_task_grammar(task, (40, 80))
    train = sample(grammar, 10000, seed=1)
    valid = sample(grammar, 1000, seed=2)

    states, symbols = TASK_SIGNATURES[task]
    for family in ('lstm', 'gref', 'jm', 'ns', 'rns'):  # every model gets the same grid
        base = TrainConfig(family=family, num_states=states, num_symbols=symbols)
        result = search(base, CflObjective(train, valid, grammar), 'grid', restarts=5, workers=4)  # 4 rates x 5 restarts
        directory = os.path.join(Config.DATA_DIR, 'search', family)
        os.makedirs(directory, exist_ok=True)
        result.trials.to_csv(os.path.join(directory, 'trials.csv'), index=False)
        result.best_checkpoint.save(os.path.join(directory, 'best.ckpt'))
        print(f"{family}: best learning rate {result.best_config.learning_rate}, "
              f"gap {result.trials.metric.min():.4f}")

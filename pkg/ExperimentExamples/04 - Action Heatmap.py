import logging
import os

import numpy as np

from stackwfa.cli import correct_action_weights, write_heatmap
from stackwfa.config import Config
from stackwfa.tasks import Vocabulary, build_task_grammar, sample
from stackwfa.training import TrainConfig, train_cfl

logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)


if __name__ == '__main__':
    task = 'marked-reversal'
    grammar = build_task_grammar(task, (40, 80))
    train = sample(grammar, 10000, seed=1)
    valid = sample(grammar, 1000, seed=2)
    fixed_string = sample(build_task_grammar(task, (41, 41)), 1, seed=3).strings  # one fixed string of length 41
    vocabulary = Vocabulary.for_grammar(grammar)

    rows = []  # one heatmap row per epoch

    def on_epoch(epoch, model):
        """Weight of the correct action type at every position of the fixed string"""
        rows.append(correct_action_weights(model, vocabulary, fixed_string, task)[0])

    config = TrainConfig(family='rns', num_states=2, num_symbols=3, max_epochs=100)
    train_cfl(config, train, valid, grammar, on_epoch=on_epoch)

    matrix = np.array(rows)
    paths = write_heatmap(matrix, os.path.join(Config.DATA_DIR, 'heatmap', 'marked-rns'), row_name='epoch')
    print(f"Mean correct-action weight: epoch 0 {matrix[0].mean():.3f}, last epoch {matrix[-1].mean():.3f}")
    print(f"Saved {paths}")

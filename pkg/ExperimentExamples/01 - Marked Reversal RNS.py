import logging
import os

from stackwfa.config import Config
from stackwfa.tasks import TEST_LENGTHS, Vocabulary, build_task_grammar, sample, sample_per_length
from stackwfa.training import ModelScorer, TrainConfig, evaluate, train_cfl

logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)


if __name__ == '__main__':
    task = 'marked-reversal'  # w # reverse(w)
    grammar = build_task_grammar(task, (40, 80))  # training and validation lengths
    test_grammar = grammar.with_lengths(TEST_LENGTHS)  # longer strings for the test set
    train = sample(grammar, 10000, seed=1)  # 10k training strings
    valid = sample(grammar, 1000, seed=2)  # 1k validation strings
    test = sample_per_length(test_grammar, 100, seed=3)  # 100 strings of every test length

    config = TrainConfig(family='rns', num_states=2, num_symbols=3, hidden_size=20,
                         learning_rate=0.005, max_epochs=200, batch_size=10)  # RNS with |Q|=2, |Γ|=3
    os.makedirs(Config.DATA_DIR, exist_ok=True)
    result = train_cfl(config, train, valid, grammar,
                       metrics_path=os.path.join(Config.DATA_DIR, 'marked-rns.log'))  # keeps the best epoch
    result.checkpoint.save(os.path.join(Config.DATA_DIR, 'marked-rns.ckpt'))

    metadata = result.checkpoint.metadata
    print(f"Best validation gap {metadata['best_gap']:.4f} nats at epoch {metadata['best_epoch']}")

    scorer = ModelScorer(result.model, Vocabulary.for_grammar(grammar))
    report = evaluate(scorer, test, test_grammar, binning='by-length')
    print(f"Test cross-entropy {report.cross_entropy:.4f}, gap {report.gap:.4f}")
    print(report.by_length.to_string(index=False))  # gap per string length

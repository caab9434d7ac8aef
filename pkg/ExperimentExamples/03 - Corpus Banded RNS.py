import logging
import os

from stackwfa.checkpoint import Checkpoint
from stackwfa.config import Config
from stackwfa.tasks import load_corpus
from stackwfa.training import TrainConfig, perplexity, train_corpus

logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)


if __name__ == '__main__':
    corpus = os.path.join(Config.DATA_DIR, 'corpus')  # one sentence per line, e.g. a preprocessed treebank
    train = load_corpus(os.path.join(corpus, 'train.txt'))  # builds the vocabulary with <unk> and <eos>
    valid = load_corpus(os.path.join(corpus, 'valid.txt'), train.vocabulary)
    test = load_corpus(os.path.join(corpus, 'test.txt'), train.vocabulary)

    config = TrainConfig.for_corpus(family='rns', hidden_size=256, num_states=1, num_symbols=2,
                                    span=35)  # window of 35 time steps, carried across chunks
    checkpoint_path = os.path.join(corpus, 'rns.ckpt')
    resume = Checkpoint.load(checkpoint_path) if os.path.exists(checkpoint_path) else None  # continue an interrupted run
    if resume is not None and resume.metadata.get('progress', {}).get('epoch', 1) > config.max_epochs:
        resume = None  # finished run, start over
    result = train_corpus(config, train, valid, metrics_path=os.path.join(corpus, 'rns.log'), resume=resume,
                          checkpoint_path=checkpoint_path)

    print(f"Validation perplexity {result.checkpoint.metadata['progress']['best_perplexity']:.2f}")
    print(f"Test perplexity {perplexity(result.model, test, config.batch_size, config.chunk_length):.2f}")

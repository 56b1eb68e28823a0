"""Knowledge-base embeddings with a description-to-embedding concept learner."""
from .dataset import (Dataset, ParseError, Triple, Vocabulary, WordVectorTable, load_dataset,
                      parse_descriptions, parse_triples, parse_word_vectors, validate_unseen_split)
from .evaluate import EvalReport, link_prediction_eval, rank_side, unseen_entity_eval
from .transe import EmbeddingStore
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_baseline, train_joint

__version__ = "0.1.0"

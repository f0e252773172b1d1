"""Stacked visual-semantic attention captioner in numpy with a tape autodiff."""

from .config import StackConfig
from .data import Dataset, DatasetRecord, load_dataset, save_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import decode_beam, decode_greedy, decode_sample, forward_teacher_forced
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError, StackVSError
from .metrics import bleu, cider, evaluate, rouge_l
from .model import ModelParams, init_model
from .trainer import TrainConfig, train
from .vocab import Vocabulary, build_vocab

__version__ = "0.1.0"

"""Extract-and-refine comparative explanation generation for recommendations."""

from .config import ExperimentConfig, load_config
from .corpus import Corpus, IdfTable, LabeledSentence, ReviewRecord, Vocab
from .metrics import bleu, clipped_recall, idf_bleu
from .model import CompExp, Instance
from .params import ParamStore
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

"""Sequence-learning lab: identity-rule tasks and relation-based pattern
extensions for small neural networks."""

__version__ = "0.1.0"

from . import autodiff, corpus, harness, models, patterns, rbp  # noqa: F401
from .autodiff import AdamHyper, Parameter, Tensor  # noqa: F401
from .models import ModelConfig, TrainedModel, build_model, evaluate, train  # noqa: F401
from .patterns import LabeledDataset, TaskSpec, Vocabulary, build_task  # noqa: F401

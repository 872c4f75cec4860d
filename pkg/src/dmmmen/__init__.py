"""Black-box explanations from a Dirichlet-process mixture of elastic-net regressions."""

__version__ = "0.1.0"

from .data import DatasetMatrix, load_matrix, logit_targets, per_class_split  # noqa: E402
from .explain import InsightMap, Explanation, explain_instance, global_insights  # noqa: E402
from .model import Hyperparameters, MixtureState  # noqa: E402
from .relabel import relabel  # noqa: E402
from .sampler import PosteriorChain, run_chain, run_chains  # noqa: E402

__all__ = ["DatasetMatrix", "Explanation", "Hyperparameters", "InsightMap", "MixtureState",
           "PosteriorChain", "explain_instance", "global_insights", "load_matrix",
           "logit_targets", "per_class_split", "relabel", "run_chain", "run_chains"]

"""Cross-domain recommendation matching.

Heterogeneous preference graphs per domain, two-layer attention
aggregation over sampled neighborhoods, a multi-task objective mixing
neighbor-similarity and contrastive alignment losses, and a six-channel
exact top-K retrieval stage with offline HIT@N evaluation.
"""

__version__ = "0.1.0"

from .graph import (  # noqa: F401
    Domain,
    GraphError,
    NodeKind,
    NodeRef,
    PreferenceNetwork,
    aligned_nodes,
    compute_edge_weights,
    load_network,
)
from .losses import LossConfig, LossResult  # noqa: F401
from .training import DivergenceError, Model, TrainerConfig, train  # noqa: F401
from .retrieval import (  # noqa: F401
    BehaviorEvent,
    BehaviorSequence,
    MatchResult,
    RetrievalIndex,
    build_index,
    match,
)
from .evaluation import EvalReport, LeakageError, run_eval  # noqa: F401
from .synthdata import SynthConfig, generate  # noqa: F401

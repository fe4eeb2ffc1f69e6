"""Evidence navigation over an implicit multimodal hypergraph of clinical embeddings."""

from .errors import (
    ContractViolation,
    CorruptionError,
    DegenerateVectorError,
    DuplicateInsertError,
    EmptyIndexError,
    FormatError,
    HyperWalkerError,
    NoKnowledgeBaseError,
    NotFoundError,
    ValidationError,
)
from .fusion import FusionParameters, film_backward, film_forward, fuse
from .hnsw import HnswIndex, HnswParams
from .ibrochure import EdgeKind, Hyperedge, HypergraphStore
from .manifold import ClinicalNode, Modality, cosine_distance, cosine_similarity, l2_normalize, prune_study_nodes
from .navigator import (
    Case,
    EpisodeTrace,
    NavigationConfig,
    TTTConfig,
    Triplet,
    check_leakage,
    linger_orthogonalize,
    run_episode,
    ttt_step,
)
from .walker import (
    PolicyParameters,
    RewardWeights,
    policy_gradient_update,
    reward_accuracy,
    reward_budget,
    reward_diversity,
    score_candidate,
    selection_distribution,
    total_reward,
)

__version__ = "0.1.0"

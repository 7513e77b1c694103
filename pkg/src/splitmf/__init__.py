"""Federated matrix factorization with additive secret sharing.

User factors stay on their data sources; the server aggregates item
gradients that are either sent in the clear (plain mode) or protected by
additive secret sharing over the mod 2^64 ring (shared mode).  Both modes
produce bitwise identical models; the attack module demonstrates what the
plain mode leaks.
"""

from .errors import (
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    EmptyTraceError,
    EncodingOverflowError,
    IllConditionedError,
    ParseError,
    ProtocolError,
    ShapeError,
    SplitMFError,
    TransportError,
)
from .mf import (
    RatingMatrix,
    TrainConfig,
    apply_update,
    grad_item,
    grad_user,
    init_factors,
    loss,
    predict,
    train_centralized,
)
from .sharing import (
    FixedPointBlock,
    ShareRng,
    ShareSet,
    combine_shares,
    decode,
    encode,
    split_shares,
)
from .protocol import ProtocolConfig, Server, Source, TrainingResult, run_training
from .attack import AttackKnowledge, attack_trace, recover_rating, recover_residual
from .data import (
    SourcePartition,
    SplitSpec,
    load_movielens,
    partition_users,
    rmse,
    split_train_test,
    synth_ratings,
)

__version__ = "0.1.0"

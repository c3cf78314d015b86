"""Preference optimization over multiple reference policies.

Library layout:

* ``prefmath``  -- per-example scalar math (aggregation, clipping, weights)
* ``losses``    -- the pair losses and batch aggregation
* ``toypolicy`` -- a small differentiable autoregressive policy
* ``oracle``    -- exact brute-force verification suites
* ``dataio``    -- preference files, synthetic data, reference caches
* ``trainer``   -- training loop, metrics, experiment driver
* ``cli``       -- the ``prefopt`` command-line entry point
"""

from .errors import (
    DivergenceError,
    EncodingError,
    IntegrityError,
    InvalidConfigError,
    InvalidWeightsError,
    NumericInputError,
    ParseError,
    PrefOptError,
    TapeConsumedError,
    UsageError,
)
from .losses import LossConfig, PairLoss, batch_loss, dpo_pair_loss, mrpo_pair_loss, multi_dpo_pair_loss
from .prefmath import (
    ClipConfig,
    PairRefLogProbs,
    ReferenceWeights,
    adaptive_epsilon,
    clip_reference_logprob,
    implicit_reward,
    log_virtual_reference,
    reference_weights_arwc,
    uniform_weights,
)
from .toypolicy import GradTape, ToyPolicy, Vocab, backward, clone_policy, default_vocab, load_policy, make_reference_family, save_policy

__version__ = "0.1.0"

__all__ = [
    "ClipConfig",
    "DivergenceError",
    "EncodingError",
    "GradTape",
    "IntegrityError",
    "InvalidConfigError",
    "InvalidWeightsError",
    "LossConfig",
    "NumericInputError",
    "PairLoss",
    "PairRefLogProbs",
    "ParseError",
    "PrefOptError",
    "ReferenceWeights",
    "TapeConsumedError",
    "ToyPolicy",
    "UsageError",
    "Vocab",
    "adaptive_epsilon",
    "backward",
    "batch_loss",
    "clip_reference_logprob",
    "clone_policy",
    "default_vocab",
    "dpo_pair_loss",
    "implicit_reward",
    "load_policy",
    "log_virtual_reference",
    "make_reference_family",
    "mrpo_pair_loss",
    "multi_dpo_pair_loss",
    "reference_weights_arwc",
    "save_policy",
    "uniform_weights",
    "__version__",
]

"""Per-example scalar math shared by every preference loss.

All quantities are natural-log probabilities: finite floats <= 0.  A value
of exactly 0 (probability one) is legal; -inf (probability zero) is rejected
at the boundary because the aggregation and weighting formulas are undefined
there.  Every function is pure and safe to call from any thread.

Conventions baked in here:

* Reference index 0 is always the initializing reference; clipping pulls the
  other references toward it and is never applied to index 0 itself.
* Adaptive-epsilon allocation and adaptive weights consume *raw* (unclipped)
  reference log-probabilities; clipping happens afterwards.
* All aggregation runs in log space with max-shifted log-sum-exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InvalidConfigError, InvalidWeightsError, NumericInputError

#: Tolerance on "weights sum to one".
WEIGHT_SUM_TOL = 1e-12

CLIP_MODES = ("fixed", "adaptive", "none")


def check_logprob(value: float, what: str = "log-probability") -> float:
    """Validate and return a natural-log probability (finite, <= 0)."""
    v = float(value)
    if not math.isfinite(v):
        raise NumericInputError(f"{what} must be finite, got {value!r}")
    if v > 0.0:
        raise NumericInputError(f"{what} must be <= 0, got {value!r}")
    return v


@dataclass(frozen=True)
class ReferenceWeights:
    """Normalized weighting coefficients over K >= 1 reference policies."""

    alphas: tuple[float, ...]

    def __post_init__(self) -> None:
        alphas = tuple(float(a) for a in self.alphas)
        if len(alphas) < 1:
            raise InvalidWeightsError("need at least one reference weight")
        for a in alphas:
            if not math.isfinite(a) or a < 0.0:
                raise InvalidWeightsError(
                    f"weights must be finite and >= 0, got {alphas!r}")
        total = math.fsum(alphas)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidWeightsError(
                f"weights must sum to 1 within {WEIGHT_SUM_TOL}, got {total!r}")
        object.__setattr__(self, "alphas", alphas)

    def __len__(self) -> int:
        return len(self.alphas)

    def __iter__(self):
        return iter(self.alphas)

    def __getitem__(self, k: int) -> float:
        return self.alphas[k]


@dataclass(frozen=True)
class ClipConfig:
    """Trust-region clipping configuration.

    ``mode="none"`` makes clipping the identity transform; ``mode="fixed"``
    uses ``eps_max`` directly for both outputs; ``mode="adaptive"`` splits
    ``eps_max`` between the two outputs by relative log-probability mass.
    """

    eps_max: float = 0.1
    mode: str = "adaptive"

    def __post_init__(self) -> None:
        if self.mode not in CLIP_MODES:
            raise InvalidConfigError(
                f"clip mode must be one of {CLIP_MODES}, got {self.mode!r}")
        e = float(self.eps_max)
        if not math.isfinite(e) or e < 0.0:
            raise InvalidConfigError(f"eps_max must be >= 0, got {self.eps_max!r}")
        object.__setattr__(self, "eps_max", e)


@dataclass(frozen=True)
class PairRefLogProbs:
    """Per-reference log-probabilities of one preference pair.

    ``chosen[k]`` / ``rejected[k]`` are log-probabilities of the preferred /
    dispreferred output under reference ``k``; index 0 is the initializing
    reference.
    """

    chosen: tuple[float, ...]
    rejected: tuple[float, ...]

    def __post_init__(self) -> None:
        chosen = tuple(check_logprob(v, "reference log-probability (chosen)")
                       for v in self.chosen)
        rejected = tuple(check_logprob(v, "reference log-probability (rejected)")
                         for v in self.rejected)
        if len(chosen) != len(rejected):
            raise InvalidConfigError(
                f"chosen has {len(chosen)} references, rejected has {len(rejected)}")
        if len(chosen) < 1:
            raise InvalidConfigError("need at least one reference")
        object.__setattr__(self, "chosen", chosen)
        object.__setattr__(self, "rejected", rejected)

    @property
    def k(self) -> int:
        return len(self.chosen)


def log_virtual_reference(log_refs: Sequence[float],
                          weights: ReferenceWeights) -> float:
    """Log of the weighted harmonic mean of reference probabilities.

    Computes ``-logsumexp_k(log alpha_k - log_refs[k])``, which equals
    ``log (sum_k alpha_k / p_k)^-1`` for probabilities ``p_k``.  Entries with
    ``alpha_k == 0`` are omitted (they contribute nothing to the harmonic
    sum).  The result always lies between the smallest and largest active
    ``log_refs`` entry.
    """
    if len(log_refs) != len(weights):
        raise InvalidConfigError(
            f"{len(log_refs)} log-probs but {len(weights)} weights")
    terms = []
    lo = math.inf
    hi = -math.inf
    for a, lr in zip(weights, log_refs):
        if a == 0.0:
            continue
        lr = float(lr)
        terms.append(math.log(a) - lr)
        lo = min(lo, lr)
        hi = max(hi, lr)
    if not terms:
        raise InvalidWeightsError("all weights are zero; nothing to aggregate")
    m = max(terms)
    out = -(m + math.log(math.fsum(math.exp(t - m) for t in terms)))
    # Harmonic mean lies in [lo, hi] exactly; clamp out float round-off.
    return min(max(out, lo), hi)


def clip_reference_logprob(log_ref_k: float, log_ref_1: float,
                           eps: float) -> float:
    """Clamp a reference log-probability into the multiplicative trust band
    ``[(1+eps)*log_ref_1, (1-eps)*log_ref_1]`` around the initializing
    reference (log-probs are negative, so ``(1+eps)*log_ref_1`` is the lower
    edge).  Never applied to the initializing reference itself.
    """
    if eps < 0.0 or not math.isfinite(eps):
        raise InvalidConfigError(f"eps must be >= 0, got {eps!r}")
    lo = (1.0 + eps) * log_ref_1
    hi = (1.0 - eps) * log_ref_1
    return min(max(log_ref_k, lo), hi)


def adaptive_epsilon(sum_logref_chosen: float, sum_logref_rejected: float,
                     eps_max: float) -> tuple[float, float]:
    """Split ``eps_max`` between the two outputs of a pair.

    Each output receives ``eps_max * |s_y| / (|s_chosen| + |s_rejected|)``
    where ``s_y`` sums the raw log-probabilities of *all* references for
    output ``y``.  Lower likelihood (larger ``|s_y|``) earns the wider
    trust region.  A zero denominator falls back to the symmetric split so
    the two parts always sum to ``eps_max``.
    """
    if eps_max < 0.0 or not math.isfinite(eps_max):
        raise InvalidConfigError(f"eps_max must be >= 0, got {eps_max!r}")
    ac = abs(float(sum_logref_chosen))
    ar = abs(float(sum_logref_rejected))
    denom = ac + ar
    if denom == 0.0:
        return (eps_max / 2.0, eps_max / 2.0)
    return (eps_max * ac / denom, eps_max * ar / denom)


def reference_weights_arwc(pair_refs: PairRefLogProbs) -> ReferenceWeights:
    """Adaptive weights from each reference's discriminative confidence.

    ``alpha_k`` is proportional to ``|log p_k(chosen) - log p_k(rejected)|``
    computed on raw (unclipped) log-probabilities; a reference that separates
    the two outputs more decisively earns more weight.  If every gap is zero
    the weights fall back to uniform.
    """
    gaps = [abs(c - r) for c, r in zip(pair_refs.chosen, pair_refs.rejected)]
    total = math.fsum(gaps)
    if total == 0.0:
        return uniform_weights(pair_refs.k)
    return ReferenceWeights(tuple(g / total for g in gaps))


def uniform_weights(k: int) -> ReferenceWeights:
    """Equal weights 1/k over k references."""
    if k < 1:
        raise ValueError(f"need k >= 1 references, got {k}")
    return ReferenceWeights((1.0 / k,) * k)


def implicit_reward(log_policy: float, log_ref: float, beta: float) -> float:
    """The reward a policy/reference pair induces without a reward model:
    ``beta * (log_policy - log_ref)``."""
    return beta * (log_policy - log_ref)


def sum_raw_logrefs(values: Iterable[float]) -> float:
    """Exact sum of raw reference log-probabilities (adaptive-eps input)."""
    return math.fsum(values)

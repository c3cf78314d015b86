"""Pairwise preference losses and their batch aggregation.

Three loss kinds share one pipeline:

* ``dpo``        -- single reference (index 0), the classic sigmoid loss.
* ``mrpo``       -- the K references are aggregated into one virtual
                    reference (weighted harmonic mean of probabilities) and
                    the sigmoid loss is applied against it.
* ``multi_dpo``  -- one sigmoid loss per reference, combined with the
                    weighting coefficients.

For ``mrpo`` and ``multi_dpo`` the reference-side preprocessing is
identical: (1) weights from the raw log-probabilities, (2) epsilon per clip
mode from the raw log-probabilities, (3) clipping of references k > 0
toward reference 0.  Reference terms carry no gradient; each loss exposes
its analytic derivatives with respect to the two policy log-probabilities so
callers can push gradients through a policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InvalidConfigError, NumericInputError
from .prefmath import (
    ClipConfig,
    PairRefLogProbs,
    ReferenceWeights,
    adaptive_epsilon,
    clip_reference_logprob,
    implicit_reward,
    log_virtual_reference,
    reference_weights_arwc,
    sum_raw_logrefs,
    uniform_weights,
)

LOSS_KINDS = ("dpo", "multi_dpo", "mrpo")
WEIGHT_MODES = ("uniform", "arwc", "fixed")

LN2 = math.log(2.0)


def softplus(x: float) -> float:
    """log(1 + e^x) with the stable large-|x| branch."""
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class LossConfig:
    """All hyperparameters entering the pair losses."""

    beta: float = 0.1
    kind: str = "mrpo"
    clip: ClipConfig = field(default_factory=ClipConfig)
    weight_mode: str = "arwc"
    fixed_weights: ReferenceWeights | None = None

    def __post_init__(self) -> None:
        b = float(self.beta)
        if not math.isfinite(b) or b <= 0.0:
            raise InvalidConfigError(f"beta must be > 0, got {self.beta!r}")
        object.__setattr__(self, "beta", b)
        if self.kind not in LOSS_KINDS:
            raise InvalidConfigError(
                f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise InvalidConfigError(
                f"weight mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if (self.weight_mode == "fixed") != (self.fixed_weights is not None):
            raise InvalidConfigError(
                "fixed_weights must be given exactly when weight_mode='fixed'")


@dataclass(frozen=True)
class PairLoss:
    """Loss and diagnostics for one preference pair.

    ``margin`` is always ``reward_chosen - reward_rejected`` and
    ``grad_scale`` is ``sigmoid(-margin)``.  For ``dpo`` and ``mrpo`` the
    loss equals ``-log sigmoid(margin)`` and ``grad_scale`` is exactly the
    gradient coefficient; for ``multi_dpo`` the true per-pair coefficient is
    the weighted sum of per-reference sigmoids, carried by
    ``d_loss_d_chosen`` / ``d_loss_d_rejected``.
    """

    loss: float
    reward_chosen: float
    reward_rejected: float
    margin: float
    grad_scale: float
    weights_used: ReferenceWeights
    eps_used: tuple[float, float]
    virtual_ref: tuple[float, float]
    d_loss_d_chosen: float
    d_loss_d_rejected: float


@dataclass(frozen=True)
class PairContext:
    """Reference-side intermediates for one pair under one config.

    Everything here depends only on the frozen reference log-probabilities
    and the config, so it can be computed once per (example, config) and
    reused across a whole training run.
    """

    weights: ReferenceWeights
    eps: tuple[float, float]
    clipped_chosen: tuple[float, ...]
    clipped_rejected: tuple[float, ...]
    virtual_chosen: float
    virtual_rejected: float


def _check_policy_logprob(value: float, side: str) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise NumericInputError(f"policy log-probability ({side}) must be finite, "
                                f"got {value!r}")
    return v


def prepare_pair_context(pair_refs: PairRefLogProbs,
                         config: LossConfig) -> PairContext:
    """Run the reference-side pipeline: weights, epsilon, clipping,
    aggregation.  For kind ``dpo`` only reference 0 matters and the context
    degenerates to it."""
    if config.kind == "dpo":
        c0, r0 = pair_refs.chosen[0], pair_refs.rejected[0]
        return PairContext(
            weights=ReferenceWeights((1.0,)),
            eps=(0.0, 0.0),
            clipped_chosen=(c0,),
            clipped_rejected=(r0,),
            virtual_chosen=c0,
            virtual_rejected=r0,
        )

    k = pair_refs.k
    if config.weight_mode == "arwc":
        weights = reference_weights_arwc(pair_refs)
    elif config.weight_mode == "uniform":
        weights = uniform_weights(k)
    else:
        weights = config.fixed_weights
        if len(weights) != k:
            raise InvalidConfigError(
                f"fixed weights have length {len(weights)} but there are "
                f"{k} references")

    mode = config.clip.mode
    if mode == "none":
        eps = (0.0, 0.0)
        clipped_c = pair_refs.chosen
        clipped_r = pair_refs.rejected
    else:
        if mode == "fixed":
            eps = (config.clip.eps_max, config.clip.eps_max)
        else:
            eps = adaptive_epsilon(sum_raw_logrefs(pair_refs.chosen),
                                   sum_raw_logrefs(pair_refs.rejected),
                                   config.clip.eps_max)
        c0, r0 = pair_refs.chosen[0], pair_refs.rejected[0]
        clipped_c = (c0,) + tuple(
            clip_reference_logprob(v, c0, eps[0]) for v in pair_refs.chosen[1:])
        clipped_r = (r0,) + tuple(
            clip_reference_logprob(v, r0, eps[1]) for v in pair_refs.rejected[1:])

    return PairContext(
        weights=weights,
        eps=eps,
        clipped_chosen=clipped_c,
        clipped_rejected=clipped_r,
        virtual_chosen=log_virtual_reference(clipped_c, weights),
        virtual_rejected=log_virtual_reference(clipped_r, weights),
    )


def _sigmoid_pair_loss(lp_chosen: float, lp_rejected: float,
                       ref_chosen: float, ref_rejected: float,
                       beta: float, ctx: PairContext) -> PairLoss:
    """The shared sigmoid-loss shape against one (possibly virtual)
    reference pair."""
    reward_c = implicit_reward(lp_chosen, ref_chosen, beta)
    reward_r = implicit_reward(lp_rejected, ref_rejected, beta)
    margin = reward_c - reward_r
    loss = softplus(-margin)
    scale = sigmoid(-margin)
    return PairLoss(
        loss=loss,
        reward_chosen=reward_c,
        reward_rejected=reward_r,
        margin=margin,
        grad_scale=scale,
        weights_used=ctx.weights,
        eps_used=ctx.eps,
        virtual_ref=(ref_chosen, ref_rejected),
        d_loss_d_chosen=-beta * scale,
        d_loss_d_rejected=beta * scale,
    )


def dpo_pair_loss(log_policy_chosen: float, log_policy_rejected: float,
                  log_ref_chosen: float, log_ref_rejected: float,
                  beta: float) -> PairLoss:
    """Single-reference sigmoid preference loss
    ``-log sigmoid(beta log pi/ref(chosen) - beta log pi/ref(rejected))``."""
    if not math.isfinite(beta) or beta <= 0.0:
        raise InvalidConfigError(f"beta must be > 0, got {beta!r}")
    lp_c = _check_policy_logprob(log_policy_chosen, "chosen")
    lp_r = _check_policy_logprob(log_policy_rejected, "rejected")
    refs = PairRefLogProbs((log_ref_chosen,), (log_ref_rejected,))
    ctx = PairContext(
        weights=ReferenceWeights((1.0,)),
        eps=(0.0, 0.0),
        clipped_chosen=refs.chosen,
        clipped_rejected=refs.rejected,
        virtual_chosen=refs.chosen[0],
        virtual_rejected=refs.rejected[0],
    )
    return _sigmoid_pair_loss(lp_c, lp_r, refs.chosen[0], refs.rejected[0],
                              float(beta), ctx)


def pair_loss_from_context(log_policy_chosen: float, log_policy_rejected: float,
                           ctx: PairContext, config: LossConfig) -> PairLoss:
    """Evaluate the configured loss given a precomputed reference context."""
    lp_c = _check_policy_logprob(log_policy_chosen, "chosen")
    lp_r = _check_policy_logprob(log_policy_rejected, "rejected")
    beta = config.beta

    if config.kind != "multi_dpo":
        return _sigmoid_pair_loss(lp_c, lp_r, ctx.virtual_chosen,
                                  ctx.virtual_rejected, beta, ctx)

    # multi_dpo: one sigmoid term per reference on the clipped values.
    loss = 0.0
    coeff = 0.0
    eff_ref_c = 0.0
    eff_ref_r = 0.0
    for a, ck, rk in zip(ctx.weights, ctx.clipped_chosen, ctx.clipped_rejected):
        h_k = implicit_reward(lp_c, ck, beta) - implicit_reward(lp_r, rk, beta)
        loss += a * softplus(-h_k)
        coeff += a * sigmoid(-h_k)
        eff_ref_c += a * ck
        eff_ref_r += a * rk
    reward_c = implicit_reward(lp_c, eff_ref_c, beta)
    reward_r = implicit_reward(lp_r, eff_ref_r, beta)
    margin = reward_c - reward_r
    return PairLoss(
        loss=loss,
        reward_chosen=reward_c,
        reward_rejected=reward_r,
        margin=margin,
        grad_scale=sigmoid(-margin),
        weights_used=ctx.weights,
        eps_used=ctx.eps,
        virtual_ref=(eff_ref_c, eff_ref_r),
        d_loss_d_chosen=-beta * coeff,
        d_loss_d_rejected=beta * coeff,
    )


def mrpo_pair_loss(log_policy: tuple[float, float],
                   pair_refs: PairRefLogProbs,
                   config: LossConfig) -> PairLoss:
    """Virtual-reference preference loss over K references."""
    if config.kind != "mrpo":
        raise InvalidConfigError(f"config.kind must be 'mrpo', got {config.kind!r}")
    ctx = prepare_pair_context(pair_refs, config)
    return pair_loss_from_context(log_policy[0], log_policy[1], ctx, config)


def multi_dpo_pair_loss(log_policy: tuple[float, float],
                        pair_refs: PairRefLogProbs,
                        config: LossConfig) -> PairLoss:
    """Weighted combination of per-reference sigmoid losses, with the same
    clipping pipeline as the virtual-reference loss."""
    if config.kind != "multi_dpo":
        raise InvalidConfigError(
            f"config.kind must be 'multi_dpo', got {config.kind!r}")
    ctx = prepare_pair_context(pair_refs, config)
    return pair_loss_from_context(log_policy[0], log_policy[1], ctx, config)


def pair_loss(log_policy: tuple[float, float], pair_refs: PairRefLogProbs,
              config: LossConfig) -> PairLoss:
    """Dispatch on ``config.kind``; ``dpo`` uses reference 0 only."""
    if config.kind == "dpo":
        return dpo_pair_loss(log_policy[0], log_policy[1],
                             pair_refs.chosen[0], pair_refs.rejected[0],
                             config.beta)
    ctx = prepare_pair_context(pair_refs, config)
    return pair_loss_from_context(log_policy[0], log_policy[1], ctx, config)


def batch_loss(examples: Sequence[tuple[tuple[float, float], PairRefLogProbs]],
               config: LossConfig) -> tuple[float, list[PairLoss]]:
    """Mean loss over a batch, preserving per-example diagnostics in input
    order."""
    if len(examples) == 0:
        raise ValueError("batch must be non-empty")
    per_example = [pair_loss(lp, refs, config) for lp, refs in examples]
    mean = math.fsum(p.loss for p in per_example) / len(per_example)
    return mean, per_example

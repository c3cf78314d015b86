"""Gradient-descent training over preference data, evaluation metrics, and
multi-seed method comparisons.

Gradients flow only through the policy; every reference term is a frozen
constant from the log-probability cache, so the per-example reference
context (weights, epsilon, clipped values, virtual reference) is computed
once per run and reused across epochs.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataio import (
    PreferenceExample,
    RefLogProbCache,
    SyntheticSpec,
    generate_synthetic,
    score_references,
)
from .errors import DivergenceError, InvalidConfigError
from .losses import LossConfig, PairContext, PairLoss, pair_loss_from_context, prepare_pair_context
from .optim import SGD, Adam
from .toypolicy import SeqEncoding, ToyPolicy, clone_policy, make_reference_family

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class AdamParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are the toy-scale settings."""

    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam: AdamParams = field(default_factory=AdamParams)
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 200
    divergence_threshold: float = 10.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise InvalidConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be >= 0")
        if self.eval_every < 1:
            raise InvalidConfigError("eval-every must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfigError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not math.isfinite(self.divergence_threshold) or self.divergence_threshold <= 0:
            raise InvalidConfigError("divergence threshold must be > 0")


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation point of a run.  ``wall_time`` is measured and kept
    in memory only; the serialized run log holds the deterministic fields
    so identical runs produce identical log files."""

    step: int
    train_loss: float
    test_accuracy: float
    test_reward_margin: float
    wall_time: float

    def to_log_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "train_loss": self.train_loss,
            "test_accuracy": self.test_accuracy,
            "test_reward_margin": self.test_reward_margin,
        }, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class EvalResult:
    """Preference accuracy (ties count as incorrect), mean reward margin,
    and the tie rate recorded separately."""

    accuracy: float
    reward_margin: float
    tie_rate: float


@dataclass(frozen=True)
class RunExample:
    chosen_enc: SeqEncoding
    rejected_enc: SeqEncoding
    ctx: PairContext


def prepare_run(policy: ToyPolicy, cache: RefLogProbCache,
                data: Sequence[PreferenceExample],
                loss_config: LossConfig) -> list[RunExample]:
    cache.require_covers(data)
    vocab = policy.vocab
    out = []
    for ex in data:
        p = vocab.encode(ex.prompt)
        out.append(RunExample(
            chosen_enc=policy.prepare_ids(p, vocab.encode(ex.chosen) + [vocab.eos_id]),
            rejected_enc=policy.prepare_ids(p, vocab.encode(ex.rejected) + [vocab.eos_id]),
            ctx=prepare_pair_context(cache.pair_refs(ex.id), loss_config),
        ))
    return out


def mean_loss(policy: ToyPolicy, prepared: Sequence[RunExample],
              config: LossConfig, *, chunk: int = 256) -> float:
    """Mean loss over a prepared dataset, without gradient work."""
    total = 0.0
    for start in range(0, len(prepared), chunk):
        part = prepared[start:start + chunk]
        encs: list[SeqEncoding] = []
        for item in part:
            encs.append(item.chosen_enc)
            encs.append(item.rejected_enc)
        logps = policy.logprobs(encs)
        total += math.fsum(
            pair_loss_from_context(logps[2 * i], logps[2 * i + 1], item.ctx, config).loss
            for i, item in enumerate(part))
    return total / len(prepared)


def batch_loss_and_grad(policy: ToyPolicy, batch: Sequence[RunExample],
                        config: LossConfig
                        ) -> tuple[float, np.ndarray, list[PairLoss]]:
    """Mean loss over a batch, its gradient w.r.t. the policy parameters,
    and per-example diagnostics.  This is the objective both the training
    loop and the gradient checks drive."""
    if not batch:
        raise ValueError("batch must be non-empty")
    encs: list[SeqEncoding] = []
    for item in batch:
        encs.append(item.chosen_enc)
        encs.append(item.rejected_enc)
    logps = policy.logprobs(encs)
    per_example = [
        pair_loss_from_context(logps[2 * i], logps[2 * i + 1], item.ctx, config)
        for i, item in enumerate(batch)
    ]
    n = len(batch)
    mean = math.fsum(p.loss for p in per_example) / n
    seeds = np.empty(2 * n)
    for i, p in enumerate(per_example):
        seeds[2 * i] = p.d_loss_d_chosen / n
        seeds[2 * i + 1] = p.d_loss_d_rejected / n
    _, grad = policy.logprobs_with_grad(encs, seeds)
    return mean, grad, per_example


def _evaluate_prepared(policy: ToyPolicy, prepared: Sequence[RunExample],
                       loss_config: LossConfig, *, chunk: int = 1024) -> EvalResult:
    """Rewards use the loss-appropriate reference: the virtual reference for
    the aggregated loss, raw reference 0 otherwise."""
    encs: list[SeqEncoding] = []
    for item in prepared:
        encs.append(item.chosen_enc)
        encs.append(item.rejected_enc)
    logps = np.empty(len(encs))
    for start in range(0, len(encs), chunk):
        logps[start:start + chunk] = policy.logprobs(encs[start:start + chunk])
    beta = loss_config.beta
    wins = ties = 0
    margins = []
    for i, item in enumerate(prepared):
        if loss_config.kind == "mrpo":
            ref_c, ref_r = item.ctx.virtual_chosen, item.ctx.virtual_rejected
        else:
            ref_c, ref_r = item.ctx.clipped_chosen[0], item.ctx.clipped_rejected[0]
        r_w = beta * (logps[2 * i] - ref_c)
        r_l = beta * (logps[2 * i + 1] - ref_r)
        if r_w > r_l:
            wins += 1
        elif r_w == r_l:
            ties += 1
        margins.append(r_w - r_l)
    n = len(prepared)
    return EvalResult(accuracy=wins / n,
                      reward_margin=math.fsum(margins) / n,
                      tie_rate=ties / n)


def evaluate(policy: ToyPolicy, refs: RefLogProbCache,
             data: Sequence[PreferenceExample],
             loss_config: LossConfig) -> EvalResult:
    if not data:
        raise ValueError("evaluation data must be non-empty")
    prepared = prepare_run(policy, refs, data, loss_config)
    return _evaluate_prepared(policy, prepared, loss_config)


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    a = config.adam
    return Adam(config.learning_rate, a.beta1, a.beta2, a.eps)


def train(policy: ToyPolicy, refs: RefLogProbCache,
          data: Sequence[PreferenceExample], config: TrainConfig, *,
          eval_data: Sequence[PreferenceExample] | None = None,
          eval_refs: RefLogProbCache | None = None
          ) -> tuple[ToyPolicy, list[MetricsRecord]]:
    """Train ``policy`` in place; returns it with the metrics history.

    Deterministic under ``config.seed`` (per-epoch shuffling included).
    Raises ``DivergenceError`` as soon as a batch loss crosses the
    divergence threshold, carrying the partial history.
    """
    if not data:
        raise ValueError("training data must be non-empty")
    if policy.fingerprint() != refs.reference_ids[0]:
        warnings.warn("policy is not a clone of reference 0; training is "
                      "still defined but initialization-dependent guarantees "
                      "do not apply", stacklevel=2)
    prepared = prepare_run(policy, refs, data, config.loss)
    if eval_data is not None:
        eval_cache = eval_refs if eval_refs is not None else refs
        eval_prepared = prepare_run(policy, eval_cache, eval_data, config.loss)
    else:
        eval_prepared = prepared

    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    opt = _make_optimizer(config)
    history: list[MetricsRecord] = []

    def record(step: int, train_loss: float) -> None:
        ev = _evaluate_prepared(policy, eval_prepared, config.loss)
        history.append(MetricsRecord(step=step, train_loss=train_loss,
                                     test_accuracy=ev.accuracy,
                                     test_reward_margin=ev.reward_margin,
                                     wall_time=time.perf_counter() - t0))

    record(0, mean_loss(policy, prepared, config.loss))

    step = 0
    window_sum = 0.0
    window_n = 0
    for _ in range(config.epochs):
        perm = rng.permutation(len(prepared))
        for start in range(0, len(perm), config.batch_size):
            batch = [prepared[j] for j in perm[start:start + config.batch_size]]
            loss, grad, _ = batch_loss_and_grad(policy, batch, config.loss)
            if loss > config.divergence_threshold:
                raise DivergenceError(
                    f"training diverged: batch loss {loss:.6g} exceeded "
                    f"threshold {config.divergence_threshold:g} at step {step + 1}",
                    step=step + 1, loss=loss, history=history)
            opt.step(policy.params, grad)
            step += 1
            window_sum += loss
            window_n += 1
            if step % config.eval_every == 0:
                record(step, window_sum / window_n)
                window_sum = 0.0
                window_n = 0
    if history[-1].step != step:
        record(step, window_sum / window_n if window_n else history[-1].train_loss)
    return policy, history


def write_history(path, history: Sequence[MetricsRecord]) -> None:
    """One JSON object per record, appended in order."""
    with open(path, "a", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_log_json())
            fh.write("\n")


# -- experiments --------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    name: str
    loss: LossConfig


@dataclass(frozen=True)
class ExperimentSpec:
    """A method comparison on synthetic planted-reward data.

    Per seed, one world is built (dataset, reference family, caches) and
    shared by every method, so cross-method comparisons are paired.  The
    base policy is a clone of reference 0 (quality ``base_quality``);
    additional references use ``ref_qualities``.
    """

    methods: tuple[MethodSpec, ...]
    seeds: tuple[int, ...]
    pairs: int = 1000
    noise_rate: float = 0.1
    base_quality: float = 0.2
    ref_qualities: tuple[float, ...] = (0.9,)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_count: int | None = None
    test_count: int | None = None

    def __post_init__(self) -> None:
        if not self.methods:
            raise InvalidConfigError("need at least one method")
        if not self.seeds:
            raise InvalidConfigError("need at least one seed")


@dataclass(frozen=True)
class ExperimentCell:
    method: str
    seed: int
    baseline_accuracy: float
    final_accuracy: float
    final_margin: float
    final_train_loss: float


@dataclass(frozen=True)
class ExperimentReport:
    cells: tuple[ExperimentCell, ...]

    def methods(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.method not in seen:
                seen.append(c.method)
        return seen

    def accuracies(self, method: str) -> list[float]:
        return [c.final_accuracy for c in self.cells if c.method == method]

    def margins(self, method: str) -> list[float]:
        return [c.final_margin for c in self.cells if c.method == method]

    def baseline_accuracies(self, method: str) -> list[float]:
        return [c.baseline_accuracy for c in self.cells if c.method == method]

    def mean_accuracy(self, method: str) -> float:
        vals = self.accuracies(method)
        return math.fsum(vals) / len(vals)

    def mean_margin(self, method: str) -> float:
        vals = self.margins(method)
        return math.fsum(vals) / len(vals)

    def cohens_d(self, method_a: str, method_b: str) -> float:
        """Effect size between two methods' final accuracies."""
        a = np.asarray(self.accuracies(method_a))
        b = np.asarray(self.accuracies(method_b))
        diff = float(a.mean() - b.mean())
        if diff == 0.0:
            return 0.0
        pooled = math.sqrt((float(a.var(ddof=1)) + float(b.var(ddof=1))) / 2.0) \
            if len(a) > 1 and len(b) > 1 else 0.0
        if pooled == 0.0:
            return math.copysign(math.inf, diff)
        return diff / pooled

    def to_csv(self) -> str:
        lines = ["method,seed,baseline_accuracy,final_accuracy,final_margin,final_train_loss"]
        for c in self.cells:
            lines.append(f"{c.method},{c.seed},{c.baseline_accuracy:.6f},"
                         f"{c.final_accuracy:.6f},{c.final_margin:.6f},"
                         f"{c.final_train_loss:.6f}")
        for m in self.methods():
            acc = np.asarray(self.accuracies(m))
            mar = np.asarray(self.margins(m))
            lines.append(f"{m},mean±std,,"
                         f"{acc.mean():.6f}±{acc.std(ddof=0):.6f},"
                         f"{mar.mean():.6f}±{mar.std(ddof=0):.6f},")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        rows = [("method", "seed", "base acc", "final acc", "margin", "train loss")]
        for c in self.cells:
            rows.append((c.method, str(c.seed), f"{c.baseline_accuracy:.4f}",
                         f"{c.final_accuracy:.4f}", f"{c.final_margin:.4f}",
                         f"{c.final_train_loss:.4f}"))
        for m in self.methods():
            acc = np.asarray(self.accuracies(m))
            mar = np.asarray(self.margins(m))
            rows.append((m, "agg", "",
                         f"{acc.mean():.4f}±{acc.std(ddof=0):.4f}",
                         f"{mar.mean():.4f}±{mar.std(ddof=0):.4f}", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
                         for r in rows) + "\n"


def _child_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentWorld:
    """Shared per-seed fixtures: data, references, caches, initial policy."""

    train_data: list[PreferenceExample]
    test_data: list[PreferenceExample]
    references: list[ToyPolicy]
    train_cache: RefLogProbCache
    test_cache: RefLogProbCache


def build_world(spec: ExperimentSpec, seed: int) -> ExperimentWorld:
    synth = SyntheticSpec(seed=_child_seed(seed, 1), pairs=spec.pairs,
                          noise_rate=spec.noise_rate)
    train_data, test_data = generate_synthetic(synth)
    if spec.train_count is not None:
        train_data = train_data[:spec.train_count]
    if spec.test_count is not None:
        test_data = test_data[:spec.test_count]
    reward = synth.planted_reward()
    references = [make_reference_family(_child_seed(seed, 2), spec.base_quality, reward)]
    for j, q in enumerate(spec.ref_qualities):
        references.append(make_reference_family(_child_seed(seed, 3 + j), q, reward))
    return ExperimentWorld(
        train_data=train_data, test_data=test_data, references=references,
        train_cache=score_references(train_data, references),
        test_cache=score_references(test_data, references),
    )


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Run every method on every seed's world; aggregate accuracies and
    margins."""
    cells = []
    for seed in spec.seeds:
        world = build_world(spec, seed)
        for method in spec.methods:
            policy = clone_policy(world.references[0])
            cfg = replace(spec.train, loss=method.loss,
                          seed=_child_seed(seed, 101))
            policy, history = train(policy, world.train_cache, world.train_data,
                                    cfg, eval_data=world.test_data,
                                    eval_refs=world.test_cache)
            cells.append(ExperimentCell(
                method=method.name, seed=seed,
                baseline_accuracy=history[0].test_accuracy,
                final_accuracy=history[-1].test_accuracy,
                final_margin=history[-1].test_reward_margin,
                final_train_loss=history[-1].train_loss))
    return ExperimentReport(cells=tuple(cells))

"""Exact brute-force verification on small finite instances.

The closed-form route (``solve_closed_form``) reuses the production
log-space aggregation and max-shifted exponentials; the objective
enumerations (``surrogate_objective``, ``original_objective``,
``kl_divergence``) deliberately work directly in probability space so the
two routes stay independent of each other.  The verification suites compare
them on randomly sampled instances and report failure counts plus the worst
observed deviation.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataio import PlantedReward, PreferenceExample, score_references
from .losses import LossConfig, sigmoid
from .prefmath import ClipConfig, PairRefLogProbs, ReferenceWeights, log_virtual_reference
from .toypolicy import ToyPolicy, Vocab, clone_policy
from .trainer import RunExample, batch_loss_and_grad, mean_loss, prepare_run

MAX_OUTCOMES = 64


@dataclass(frozen=True)
class FiniteInstance:
    """A fully enumerable world: K strictly positive reference distributions
    over a small outcome space, weights, a reward vector, and beta."""

    refs: tuple[tuple[float, ...], ...]
    weights: ReferenceWeights
    reward: tuple[float, ...]
    beta: float

    def __post_init__(self) -> None:
        n = len(self.reward)
        if not 2 <= n <= MAX_OUTCOMES:
            raise ValueError(f"outcome count must be in [2, {MAX_OUTCOMES}], got {n}")
        if self.beta <= 0.0 or not math.isfinite(self.beta):
            raise ValueError(f"beta must be > 0, got {self.beta!r}")
        refs = tuple(tuple(float(p) for p in row) for row in self.refs)
        if len(refs) != len(self.weights):
            raise ValueError("one reference row per weight required")
        for row in refs:
            if len(row) != n:
                raise ValueError("all reference rows must cover every outcome")
            if any(p <= 0.0 for p in row):
                raise ValueError("reference entries must be strictly positive")
            if abs(math.fsum(row) - 1.0) > 1e-12:
                raise ValueError("reference rows must sum to 1 within 1e-12")
        object.__setattr__(self, "refs", refs)
        object.__setattr__(self, "reward", tuple(float(r) for r in self.reward))

    @property
    def outcome_count(self) -> int:
        return len(self.reward)

    @property
    def k(self) -> int:
        return len(self.refs)


@dataclass(frozen=True)
class OracleSolution:
    """Closed-form optimum on one finite instance."""

    pi_star: tuple[float, ...]
    z: float
    surrogate_value: float
    original_value: float


def _check_distribution(pi: Sequence[float], n: int) -> tuple[float, ...]:
    pi = tuple(float(p) for p in pi)
    if len(pi) != n:
        raise ValueError(f"distribution over {len(pi)} outcomes, expected {n}")
    if any(p <= 0.0 for p in pi):
        raise ValueError("distribution entries must be strictly positive")
    if abs(math.fsum(pi) - 1.0) > 1e-9:
        raise ValueError("distribution must sum to 1")
    return pi


def solve_closed_form(inst: FiniteInstance) -> OracleSolution:
    """Exact optimum of the aggregated objective:
    ``pi*(y) = virtual_ref(y) * exp(r(y)/beta) / Z``."""
    log_virtual = [
        log_virtual_reference([math.log(inst.refs[k][y]) for k in range(inst.k)],
                              inst.weights)
        for y in range(inst.outcome_count)
    ]
    t = [lv + r / inst.beta for lv, r in zip(log_virtual, inst.reward)]
    m = max(t)
    total = math.fsum(math.exp(v - m) for v in t)
    log_z = m + math.log(total)
    pi_star = tuple(math.exp(v - log_z) for v in t)
    sol_surrogate = surrogate_objective(pi_star, inst)
    sol_original = original_objective(pi_star, inst)
    return OracleSolution(pi_star=pi_star, z=math.exp(log_z),
                          surrogate_value=sol_surrogate,
                          original_value=sol_original)


def surrogate_objective(pi: Sequence[float], inst: FiniteInstance) -> float:
    """Enumerated upper-bound objective:
    ``sum_y pi(y) * [log(sum_k alpha_k pi(y)/ref_k(y)) - r(y)/beta]``."""
    pi = _check_distribution(pi, inst.outcome_count)
    total = 0.0
    for y, p in enumerate(pi):
        inner = math.fsum(a * p / inst.refs[k][y]
                          for k, a in enumerate(inst.weights))
        total += p * (math.log(inner) - inst.reward[y] / inst.beta)
    return total


def original_objective(pi: Sequence[float], inst: FiniteInstance) -> float:
    """Enumerated weighted-divergence objective:
    ``sum_y pi(y) * [sum_k alpha_k log(pi(y)/ref_k(y)) - r(y)/beta]``."""
    pi = _check_distribution(pi, inst.outcome_count)
    total = 0.0
    for y, p in enumerate(pi):
        inner = math.fsum(a * math.log(p / inst.refs[k][y])
                          for k, a in enumerate(inst.weights) if a > 0.0)
        total += p * (inner - inst.reward[y] / inst.beta)
    return total


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """``sum p log(p/q)`` with the 0*log0 = 0 convention; q must be
    strictly positive wherever p is."""
    if len(p) != len(q):
        raise ValueError("distributions must have the same length")
    total = 0.0
    for pi, qi in zip(p, q):
        if pi == 0.0:
            continue
        if qi <= 0.0:
            raise ValueError("q must be > 0 wherever p > 0")
        total += pi * math.log(pi / qi)
    return total


@dataclass(frozen=True)
class VerificationReport:
    """Outcome of one verification suite."""

    suite: str
    trials: int
    checks: int
    failures: int
    max_deviation: float
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def format_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.suite:<10s} trials={self.trials:<7d} checks={self.checks:<8d} "
                f"failures={self.failures:<6d} max_dev={self.max_deviation:.3e}  {status}")


def _random_instance(rng: np.random.Generator, *, max_outcomes: int = 16,
                     max_refs: int = 4, min_refs: int = 1) -> FiniteInstance:
    n = int(rng.integers(2, max_outcomes + 1))
    k = int(rng.integers(min_refs, max_refs + 1))
    refs = []
    for _ in range(k):
        row = rng.dirichlet(np.ones(n))
        while row.min() < 1e-12:
            row = rng.dirichlet(np.ones(n))
        refs.append(tuple(row))
    alphas = rng.dirichlet(np.ones(k))
    return FiniteInstance(refs=tuple(refs),
                          weights=ReferenceWeights(tuple(alphas)),
                          reward=tuple(rng.normal(0.0, 1.0, size=n)),
                          beta=float(rng.choice([0.1, 1.0])))


def _random_distribution(rng: np.random.Generator, n: int) -> tuple[float, ...]:
    row = rng.dirichlet(np.ones(n))
    while row.min() < 1e-12:
        row = rng.dirichlet(np.ones(n))
    return tuple(row)


def verify_prop1(seed: int, trials: int, *, policies_per_instance: int = 10,
                 identity_tol: float = 1e-8, slack: float = 1e-12
                 ) -> VerificationReport:
    """Check, per random instance: (a) surrogate(pi) - surrogate(pi*) equals
    KL(pi || pi*); (b) pi* minimizes the surrogate among tested policies;
    (c) the original objective never exceeds the surrogate; and for K=1
    instances (d) the bound is tight at pi* and pi* also minimizes the
    original objective."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng([int(seed), 0x9201])
    checks = failures = 0
    max_dev = 0.0

    def check(dev: float, tol: float) -> None:
        nonlocal checks, failures, max_dev
        checks += 1
        max_dev = max(max_dev, dev)
        if dev > tol:
            failures += 1

    for _ in range(trials):
        inst = _random_instance(rng)
        sol = solve_closed_form(inst)
        check(abs(math.fsum(sol.pi_star) - 1.0), 1e-12)
        for _ in range(policies_per_instance):
            pi = _random_distribution(rng, inst.outcome_count)
            surr = surrogate_objective(pi, inst)
            orig = original_objective(pi, inst)
            # decomposition identity against the independent KL enumeration
            check(abs((surr - sol.surrogate_value) - kl_divergence(pi, sol.pi_star)),
                  identity_tol)
            # pi* attains the minimum surrogate among tested policies
            check(sol.surrogate_value - surr, slack)
            # lower-bound direction
            check(orig - surr, slack)
            if inst.k == 1:
                # single reference: the bound is tight, so pi* also
                # minimizes the original objective
                check(abs(surr - orig), 1e-10)
    return VerificationReport(suite="prop1", trials=trials, checks=checks,
                              failures=failures, max_deviation=max_dev)


def verify_jensen(seed: int, trials: int, *, slack: float = 1e-12
                  ) -> VerificationReport:
    """Pointwise bound direction: for random (y, instance) draws the
    original integrand never exceeds the surrogate integrand."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng([int(seed), 0x9202])
    failures = 0
    max_dev = 0.0
    for _ in range(trials):
        inst = _random_instance(rng)
        pi = _random_distribution(rng, inst.outcome_count)
        y = int(rng.integers(inst.outcome_count))
        p = pi[y]
        surr = p * (math.log(math.fsum(a * p / inst.refs[k][y]
                                       for k, a in enumerate(inst.weights)))
                    - inst.reward[y] / inst.beta)
        orig = p * (math.fsum(a * math.log(p / inst.refs[k][y])
                              for k, a in enumerate(inst.weights) if a > 0.0)
                    - inst.reward[y] / inst.beta)
        dev = orig - surr
        max_dev = max(max_dev, dev)
        if dev > slack:
            failures += 1
    return VerificationReport(suite="jensen", trials=trials, checks=trials,
                              failures=failures, max_deviation=max_dev)


@dataclass(frozen=True)
class Prop2Instance:
    """One shared-sign draw for the aggregate-vs-weighted-sum comparison."""

    log_policy: tuple[float, float]
    pair_refs: PairRefLogProbs
    weights: ReferenceWeights
    beta: float
    d: tuple[float, ...]


def _draw_prop2_instance(rng: np.random.Generator, target_sign: int,
                         k_choices=(2, 3, 4)) -> Prop2Instance:
    """Rejection-sample until every d_k matches the target sign (the stated
    hypothesis, nothing stronger)."""
    while True:
        k = int(rng.choice(k_choices))
        lp_w, lp_l = (-rng.uniform(0.1, 20.0, size=2)).tolist()
        ref_c = tuple((-rng.uniform(0.1, 20.0, size=k)).tolist())
        ref_r = tuple((-rng.uniform(0.1, 20.0, size=k)).tolist())
        alphas = rng.dirichlet(np.ones(k))
        if alphas.min() < 1e-3:  # all weights strictly positive
            continue
        beta = float(rng.choice([0.1, 1.0]))
        d = tuple(beta * ((lp_l - rr) - (lp_w - rc))
                  for rc, rr in zip(ref_c, ref_r))
        if target_sign > 0 and all(v >= 0.0 for v in d):
            break
        if target_sign < 0 and all(v <= 0.0 for v in d):
            break
    return Prop2Instance(log_policy=(lp_w, lp_l),
                         pair_refs=PairRefLogProbs(ref_c, ref_r),
                         weights=ReferenceWeights(tuple(alphas)),
                         beta=beta, d=d)


def prop2_sides(inst: Prop2Instance) -> tuple[float, float]:
    """(aggregate side, weighted-sum side) of the comparison: the sigmoid of
    the virtual-reference margin (rejected minus chosen) versus the weighted
    sum of per-reference sigmoids."""
    v_c = log_virtual_reference(inst.pair_refs.chosen, inst.weights)
    v_r = log_virtual_reference(inst.pair_refs.rejected, inst.weights)
    lp_w, lp_l = inst.log_policy
    lhs = sigmoid(inst.beta * ((lp_l - v_r) - (lp_w - v_c)))
    rhs = math.fsum(a * sigmoid(dk) for a, dk in zip(inst.weights, inst.d))
    return lhs, rhs


def verify_prop2(seed: int, trials: int, *, slack: float = 1e-12,
                 strict_margin: float = 1e-9) -> VerificationReport:
    """Check the claimed inequality on ``trials`` instances per sign:
    aggregate >= weighted sum when every d_k >= 0, and <= when every
    d_k <= 0.  Reports strictness statistics per sign.

    Note: with instances constrained only by the shared-sign hypothesis this
    inequality does NOT universally hold; the report faithfully counts the
    violations it finds.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng([int(seed), 0x9203])
    failures = 0
    max_dev = 0.0
    notes = {"strict_pos": 0, "strict_neg": 0,
             "violations_pos": 0, "violations_neg": 0}
    for sign, strict_key, viol_key in ((1, "strict_pos", "violations_pos"),
                                       (-1, "strict_neg", "violations_neg")):
        for _ in range(trials):
            inst = _draw_prop2_instance(rng, sign)
            lhs, rhs = prop2_sides(inst)
            dev = (rhs - lhs) if sign > 0 else (lhs - rhs)
            max_dev = max(max_dev, dev)
            if dev > slack:
                failures += 1
                notes[viol_key] += 1
            elif -dev > strict_margin:
                notes[strict_key] += 1
    return VerificationReport(suite="prop2", trials=2 * trials,
                              checks=2 * trials, failures=failures,
                              max_deviation=max_dev, notes=notes)


def finite_difference_check(policy: ToyPolicy, loss_config: LossConfig,
                            dataset_slice: Sequence[_RunExample],
                            coords: int = 64, h: float = 1e-5,
                            seed: int = 0) -> float:
    """Max relative error between the analytic gradient of the mean batch
    loss and central finite differences on randomly chosen coordinates."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step size h must be in [1e-7, 1e-3], got {h!r}")
    if not dataset_slice:
        raise ValueError("dataset slice must be non-empty")
    _, grad, _ = batch_loss_and_grad(policy, dataset_slice, loss_config)
    rng = np.random.default_rng([int(seed), 0x9204])
    idx = rng.choice(policy.param_count, size=min(coords, policy.param_count),
                     replace=False)
    worst = 0.0
    params = policy.params
    for i in idx:
        orig = params[i]
        params[i] = orig + h
        f_plus = mean_loss(policy, dataset_slice, loss_config)
        params[i] = orig - h
        f_minus = mean_loss(policy, dataset_slice, loss_config)
        params[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(grad[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst


def gradcheck_fixture(seed: int, *, n_refs: int = 3, n_pairs: int = 8
                      ) -> tuple[ToyPolicy, dict[str, list[RunExample]]]:
    """A small deterministic fixture for end-to-end gradient checks: a
    compact-vocabulary policy, K reference policies, and a prepared slice
    per loss kind (adaptive epsilon and adaptive weights active)."""
    vocab = Vocab(tokens=tuple(string.ascii_lowercase))
    reward = PlantedReward(vocab, seed=seed, letters=string.ascii_lowercase)
    refs = [ToyPolicy(vocab, seed=seed + 17 * (k + 1)) for k in range(n_refs)]
    rng = np.random.default_rng([int(seed), 0x9205])
    data = []
    for i in range(n_pairs):
        prompt = reward.sample_prompt(rng)
        o1 = reward.sample_output(rng, prompt)
        o2 = reward.sample_output(rng, prompt)
        while o2 == o1:
            o2 = reward.sample_output(rng, prompt)
        data.append(PreferenceExample(id=f"grad-{i}", prompt=prompt,
                                      chosen=o1, rejected=o2))
    cache = score_references(data, refs)
    policy = clone_policy(refs[0])
    policy.params += 0.05 * rng.standard_normal(policy.param_count)
    slices = {}
    for kind in ("dpo", "multi_dpo", "mrpo"):
        config = LossConfig(beta=0.1, kind=kind,
                            clip=ClipConfig(eps_max=0.1, mode="adaptive"),
                            weight_mode="arwc")
        slices[kind] = prepare_run(policy, cache, data, config)
    return policy, slices


def verify_gradcheck(seed: int, trials: int = 1, *, coords: int = 64,
                     h: float = 1e-5, tol: float = 1e-4) -> VerificationReport:
    """Finite-difference check of the full gradient path for each loss kind
    (K = 3, adaptive epsilon and weights).  ``trials`` repeats the probe
    with fresh coordinate draws."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    policy, slices = gradcheck_fixture(seed)
    checks = failures = 0
    max_dev = 0.0
    for t in range(trials):
        for kind, dataset_slice in slices.items():
            config = LossConfig(beta=0.1, kind=kind,
                                clip=ClipConfig(eps_max=0.1, mode="adaptive"),
                                weight_mode="arwc")
            err = finite_difference_check(policy, config, dataset_slice,
                                          coords=coords, h=h,
                                          seed=seed + 1000 * t)
            checks += 1
            max_dev = max(max_dev, err)
            if err >= tol:
                failures += 1
    return VerificationReport(suite="gradcheck", trials=trials, checks=checks,
                              failures=failures, max_deviation=max_dev)


SUITES: dict[str, Callable[[int, int], VerificationReport]] = {
    "prop1": verify_prop1,
    "prop2": verify_prop2,
    "jensen": verify_jensen,
    "gradcheck": verify_gradcheck,
}

"""A small autoregressive categorical policy with exact sequence
log-probabilities and reverse-mode gradients.

Architecture: token embeddings, a fixed context window of the last
``context_width`` tokens (bos-padded), one tanh hidden layer, and an affine
map to vocabulary logits.  Everything is float64 so finite-difference
gradient checks are meaningful.  A policy is immutable while scoring and may
be shared across threads for reads; parameter updates need exclusive access.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EncodingError, IntegrityError, TapeConsumedError
from .optim import Adam

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Ordered token set plus distinguished bos/eos symbols.

    Regular tokens are single characters; bos/eos are multi-character
    markers so they can never collide with text.
    """

    tokens: tuple[str, ...]
    bos: str = "<s>"
    eos: str = "</s>"

    def __post_init__(self) -> None:
        tokens = tuple(self.tokens)
        if len(set(tokens)) != len(tokens):
            raise EncodingError("duplicate tokens in vocabulary")
        if self.bos == self.eos:
            raise EncodingError("bos and eos must differ")
        if self.bos in tokens or self.eos in tokens:
            raise EncodingError("bos/eos must not appear among regular tokens")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens) + 2

    @property
    def bos_id(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return len(self.tokens) + 1

    def encode(self, text: str) -> list[int]:
        index = self._index
        try:
            return [index[ch] for ch in text]
        except KeyError as exc:
            raise EncodingError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> str:
        parts = []
        for i in ids:
            if 0 <= i < len(self.tokens):
                parts.append(self.tokens[i])
            elif i == self.bos_id:
                parts.append(self.bos)
            elif i == self.eos_id:
                parts.append(self.eos)
            else:
                raise EncodingError(f"token id {i} out of range")
        return "".join(parts)

    def fingerprint(self) -> str:
        payload = json.dumps({"tokens": list(self.tokens), "bos": self.bos,
                              "eos": self.eos}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def default_vocab() -> Vocab:
    """Printable characters plus bos/eos."""
    return Vocab(tokens=tuple(string.printable))


@dataclass(frozen=True)
class SeqEncoding:
    """Context windows and targets for the scored positions of one
    (prompt, output) pair."""

    ctx: np.ndarray      # (P, context_width) int64
    targets: np.ndarray  # (P,) int64


class _SeqRecord:
    """Forward-pass state of one sequence, sufficient to replay its
    parameter gradient.  W1/W2 are snapshotted because the policy may be
    updated between forward and backward."""

    __slots__ = ("ctx", "x", "h", "probs", "targets", "w1", "w2")

    def __init__(self, ctx, x, h, probs, targets, w1, w2):
        self.ctx = ctx
        self.x = x
        self.h = h
        self.probs = probs
        self.targets = targets
        self.w1 = w1
        self.w2 = w2


class GradTape:
    """Recorded operations producing d(scalar)/d(params).

    A tape is a linear combination of per-sequence log-probability
    gradients.  Tapes are single-use: ``backward`` consumes the tape.
    Linear combinations build composite tapes for losses.
    """

    def __init__(self, policy: "ToyPolicy",
                 terms: tuple[tuple[float, _SeqRecord], ...] = ()):
        self._policy = policy
        self._terms = tuple(terms)
        self._consumed = False

    @classmethod
    def zero(cls, policy: "ToyPolicy") -> "GradTape":
        """Tape of a constant: backward yields the zero vector."""
        return cls(policy)

    @classmethod
    def linear_combination(cls, pairs: Sequence[tuple[float, "GradTape"]],
                           policy: "ToyPolicy" | None = None) -> "GradTape":
        """Tape of ``sum_i coeff_i * scalar_i``.  Source tapes are not
        consumed; the result replays their records."""
        terms: list[tuple[float, _SeqRecord]] = []
        for coeff, tape in pairs:
            if policy is None:
                policy = tape._policy
            terms.extend((coeff * c, rec) for c, rec in tape._terms)
        if policy is None:
            raise ValueError("empty combination needs an explicit policy")
        return cls(policy, tuple(terms))

    def scaled(self, coeff: float) -> "GradTape":
        return GradTape(self._policy,
                        tuple((coeff * c, rec) for c, rec in self._terms))

    def backward(self) -> np.ndarray:
        """Accumulate the parameter gradient.  Single use."""
        if self._consumed:
            raise TapeConsumedError("gradient tape already consumed")
        self._consumed = True
        grad = np.zeros(self._policy.param_count, dtype=np.float64)
        views = self._policy._grad_views(grad)
        for coeff, rec in self._terms:
            self._policy._accumulate_seq_grad(views, coeff, rec)
        return grad


def backward(tape: GradTape) -> np.ndarray:
    """Functional form of ``GradTape.backward``."""
    return tape.backward()


class ToyPolicy:
    """Fixed-window autoregressive categorical policy over a vocabulary."""

    def __init__(self, vocab: Vocab, embed_dim: int = 16, hidden_dim: int = 32,
                 context_width: int = 4, seed: int = 0,
                 params: np.ndarray | None = None):
        if embed_dim < 1 or hidden_dim < 1 or context_width < 1:
            raise ValueError("dims and context width must be positive")
        self.vocab = vocab
        self.embed_dim = int(embed_dim)
        self.hidden_dim = int(hidden_dim)
        self.context_width = int(context_width)
        self.seed = int(seed)
        n = self.param_count
        if params is None:
            rng = np.random.default_rng(self.seed)
            v, e, h, cw = vocab.size, self.embed_dim, self.hidden_dim, self.context_width
            emb = 0.1 * rng.standard_normal((v, e))
            w1 = rng.standard_normal((cw * e, h)) / math.sqrt(cw * e)
            b1 = np.zeros(h)
            w2 = rng.standard_normal((h, v)) / math.sqrt(h)
            b2 = np.zeros(v)
            params = np.concatenate([emb.ravel(), w1.ravel(), b1, w2.ravel(), b2])
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params.copy()
        self._bind_views()

    @staticmethod
    def param_count_for(vocab_size: int, embed_dim: int, hidden_dim: int,
                        context_width: int) -> int:
        v, e, h, cw = vocab_size, embed_dim, hidden_dim, context_width
        return v * e + (cw * e) * h + h + h * v + v

    @property
    def param_count(self) -> int:
        return self.param_count_for(self.vocab.size, self.embed_dim,
                                    self.hidden_dim, self.context_width)

    def _bind_views(self) -> None:
        v, e, h, cw = (self.vocab.size, self.embed_dim, self.hidden_dim,
                       self.context_width)
        o = 0
        self.emb = self.params[o:o + v * e].reshape(v, e); o += v * e
        self.w1 = self.params[o:o + cw * e * h].reshape(cw * e, h); o += cw * e * h
        self.b1 = self.params[o:o + h]; o += h
        self.w2 = self.params[o:o + h * v].reshape(h, v); o += h * v
        self.b2 = self.params[o:o + v]; o += v

    def _grad_views(self, grad: np.ndarray):
        v, e, h, cw = (self.vocab.size, self.embed_dim, self.hidden_dim,
                       self.context_width)
        o = 0
        d_emb = grad[o:o + v * e].reshape(v, e); o += v * e
        d_w1 = grad[o:o + cw * e * h].reshape(cw * e, h); o += cw * e * h
        d_b1 = grad[o:o + h]; o += h
        d_w2 = grad[o:o + h * v].reshape(h, v); o += h * v
        d_b2 = grad[o:o + v]; o += v
        return d_emb, d_w1, d_b1, d_w2, d_b2

    # -- encoding -----------------------------------------------------------

    def _check_ids(self, ids: Sequence[int], what: str) -> list[int]:
        v = self.vocab.size
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < v:
                raise EncodingError(f"{what} token id {i} out of range [0, {v})")
            out.append(i)
        return out

    def _as_prompt_ids(self, prompt) -> list[int]:
        if isinstance(prompt, str):
            return self.vocab.encode(prompt)
        return self._check_ids(prompt, "prompt")

    def _as_output_ids(self, output) -> list[int]:
        """Text outputs get the eos terminator appended; id sequences must
        already end with it."""
        if isinstance(output, str):
            ids = self.vocab.encode(output) + [self.vocab.eos_id]
        else:
            ids = self._check_ids(output, "output")
        if not ids:
            raise EncodingError("output must be non-empty")
        if ids[-1] != self.vocab.eos_id:
            raise EncodingError("output must be eos-terminated")
        if self.vocab.eos_id in ids[:-1]:
            raise EncodingError("eos may only appear at the final position")
        return ids

    def prepare_ids(self, prompt_ids: Sequence[int],
                    output_ids: Sequence[int]) -> SeqEncoding:
        """Context windows / targets for the output positions; prompt
        positions are conditioned on, not scored."""
        cw = self.context_width
        seq = [self.vocab.bos_id] * cw + list(prompt_ids) + list(output_ids)
        start = cw + len(prompt_ids)
        p = len(output_ids)
        ctx = np.empty((p, cw), dtype=np.int64)
        for j in range(p):
            ctx[j] = seq[start + j - cw:start + j]
        targets = np.asarray(output_ids, dtype=np.int64)
        return SeqEncoding(ctx=ctx, targets=targets)

    # -- forward ------------------------------------------------------------

    def _forward_rows(self, ctx: np.ndarray):
        """Forward over stacked positions: returns (x, h, logprobs)."""
        p, cw = ctx.shape
        x = self.emb[ctx.ravel()].reshape(p, cw * self.embed_dim)
        h = np.tanh(x @ self.w1 + self.b1)
        logits = h @ self.w2 + self.b2
        m = logits.max(axis=1, keepdims=True)
        logz = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        return x, h, logits - logz

    def _logprob_ids(self, prompt_ids: Sequence[int],
                     output_ids: Sequence[int]) -> float:
        """Core scorer without the eos precondition (used by normalization
        checks and scoring internals)."""
        enc = self.prepare_ids(prompt_ids, output_ids)
        _, _, logprobs = self._forward_rows(enc.ctx)
        return float(logprobs[np.arange(len(enc.targets)), enc.targets].sum())

    def sequence_logprob(self, prompt, output) -> tuple[float, GradTape]:
        """Log-probability of ``output`` after ``prompt`` plus a gradient
        tape.  ``prompt``/``output`` are strings or token-id sequences;
        id-form outputs must end with eos (text outputs get it appended)."""
        prompt_ids = self._as_prompt_ids(prompt)
        output_ids = self._as_output_ids(output)
        enc = self.prepare_ids(prompt_ids, output_ids)
        x, h, logprobs = self._forward_rows(enc.ctx)
        value = float(logprobs[np.arange(len(enc.targets)), enc.targets].sum())
        rec = _SeqRecord(ctx=enc.ctx, x=x, h=h, probs=np.exp(logprobs),
                         targets=enc.targets, w1=self.w1.copy(),
                         w2=self.w2.copy())
        return value, GradTape(self, ((1.0, rec),))

    def logprobs(self, encodings: Sequence[SeqEncoding]) -> np.ndarray:
        """Batched sequence log-probabilities (no gradient state kept)."""
        if not encodings:
            return np.zeros(0)
        ctx = np.concatenate([e.ctx for e in encodings], axis=0)
        targets = np.concatenate([e.targets for e in encodings])
        _, _, logprobs = self._forward_rows(ctx)
        per_row = logprobs[np.arange(len(targets)), targets]
        lengths = [len(e.targets) for e in encodings]
        bounds = np.cumsum([0] + lengths)
        return np.add.reduceat(per_row, bounds[:-1]) if len(per_row) else np.zeros(0)

    def logprobs_with_grad(self, encodings: Sequence[SeqEncoding],
                           seeds: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        """Batched log-probabilities plus the gradient of
        ``sum_i seeds[i] * logprob_i`` in one fused backward pass."""
        if len(encodings) != len(seeds):
            raise ValueError("one seed per encoding required")
        if not encodings:
            return np.zeros(0), np.zeros(self.param_count)
        ctx = np.concatenate([e.ctx for e in encodings], axis=0)
        targets = np.concatenate([e.targets for e in encodings])
        x, h, logprobs = self._forward_rows(ctx)
        rows = np.arange(len(targets))
        per_row = logprobs[rows, targets]
        lengths = [len(e.targets) for e in encodings]
        bounds = np.cumsum([0] + lengths)
        values = np.add.reduceat(per_row, bounds[:-1])

        row_seed = np.repeat(np.asarray(seeds, dtype=np.float64), lengths)
        dlogits = np.exp(logprobs)
        dlogits *= -row_seed[:, None]
        dlogits[rows, targets] += row_seed

        grad = np.zeros(self.param_count, dtype=np.float64)
        d_emb, d_w1, d_b1, d_w2, d_b2 = self._grad_views(grad)
        d_w2 += h.T @ dlogits
        d_b2 += dlogits.sum(axis=0)
        dh = dlogits @ self.w2.T
        da = dh * (1.0 - h * h)
        d_w1 += x.T @ da
        d_b1 += da.sum(axis=0)
        dx = (da @ self.w1.T).reshape(-1, self.embed_dim)
        np.add.at(d_emb, ctx.ravel(), dx)
        return values, grad

    def _accumulate_seq_grad(self, views, coeff: float, rec: _SeqRecord) -> None:
        d_emb, d_w1, d_b1, d_w2, d_b2 = views
        rows = np.arange(len(rec.targets))
        dlogits = rec.probs * (-coeff)
        dlogits[rows, rec.targets] += coeff
        d_w2 += rec.h.T @ dlogits
        d_b2 += dlogits.sum(axis=0)
        dh = dlogits @ rec.w2.T
        da = dh * (1.0 - rec.h * rec.h)
        d_w1 += rec.x.T @ da
        d_b1 += da.sum(axis=0)
        dx = (da @ rec.w1.T).reshape(-1, self.embed_dim)
        np.add.at(d_emb, rec.ctx.ravel(), dx)

    # -- lifecycle ----------------------------------------------------------

    def clone(self) -> "ToyPolicy":
        return ToyPolicy(self.vocab, self.embed_dim, self.hidden_dim,
                         self.context_width, self.seed, params=self.params)

    def fingerprint(self) -> str:
        head = json.dumps({
            "vocab": self.vocab.fingerprint(),
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "context_width": self.context_width,
        }, sort_keys=True).encode("utf-8")
        return hashlib.sha256(head + self.params.tobytes()).hexdigest()


def clone_policy(policy: ToyPolicy) -> ToyPolicy:
    """Deep copy; updates to either side never affect the other."""
    return policy.clone()


def save_policy(policy: ToyPolicy, path) -> None:
    """Self-describing checkpoint: JSON header plus base64 little-endian
    float64 parameters.  Round-trips byte-identically."""
    raw = policy.params.astype("<f8").tobytes()
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "policy-checkpoint",
        "vocab": {"tokens": list(policy.vocab.tokens),
                  "bos": policy.vocab.bos, "eos": policy.vocab.eos},
        "vocab_hash": policy.vocab.fingerprint(),
        "dims": {"embed_dim": policy.embed_dim, "hidden_dim": policy.hidden_dim,
                 "context_width": policy.context_width},
        "seed": policy.seed,
        "param_sha256": hashlib.sha256(raw).hexdigest(),
        "params_b64": base64.b64encode(raw).decode("ascii"),
    }
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8")


def load_policy(path) -> ToyPolicy:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IntegrityError(
            f"unsupported checkpoint format version {doc.get('format_version')!r}")
    vocab = Vocab(tokens=tuple(doc["vocab"]["tokens"]), bos=doc["vocab"]["bos"],
                  eos=doc["vocab"]["eos"])
    if vocab.fingerprint() != doc["vocab_hash"]:
        raise IntegrityError("checkpoint vocab hash mismatch")
    raw = base64.b64decode(doc["params_b64"])
    if hashlib.sha256(raw).hexdigest() != doc["param_sha256"]:
        raise IntegrityError("checkpoint parameter hash mismatch")
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    dims = doc["dims"]
    return ToyPolicy(vocab, embed_dim=dims["embed_dim"],
                     hidden_dim=dims["hidden_dim"],
                     context_width=dims["context_width"],
                     seed=int(doc["seed"]), params=params)


def make_reference_family(seed: int, quality: float, planted_reward,
                          *, steps_at_full: int = 1500, batch_size: int = 16,
                          learning_rate: float = 0.003) -> ToyPolicy:
    """Synthesize a reference policy of controllable quality.

    Starts from a random initialization for ``seed`` and runs
    ``round(quality * steps_at_full)`` supervised steps toward the
    reward-preferred output of sampled candidate pairs; ``quality=0``
    returns the untouched random initialization.

    ``planted_reward`` is duck-typed: it must provide ``vocab``,
    ``sample_prompt(rng)``, ``sample_output(rng, prompt)`` and
    ``score(prompt, output)``.
    """
    if not 0.0 <= quality <= 1.0:
        raise ValueError(f"quality must be in [0, 1], got {quality!r}")
    policy = ToyPolicy(planted_reward.vocab, seed=seed)
    steps = int(round(quality * steps_at_full))
    if steps == 0:
        return policy
    rng = np.random.default_rng([int(seed), 0x5EED])
    opt = Adam(learning_rate)
    for _ in range(steps):
        encs = []
        for _ in range(batch_size):
            prompt = planted_reward.sample_prompt(rng)
            o1 = planted_reward.sample_output(rng, prompt)
            o2 = planted_reward.sample_output(rng, prompt)
            while o2 == o1:
                o2 = planted_reward.sample_output(rng, prompt)
            winner = o1 if (planted_reward.score(prompt, o1)
                            >= planted_reward.score(prompt, o2)) else o2
            encs.append(policy.prepare_ids(
                policy.vocab.encode(prompt),
                policy.vocab.encode(winner) + [policy.vocab.eos_id]))
        # maximize mean log-likelihood of the preferred outputs
        _, grad = policy.logprobs_with_grad(encs, [-1.0 / batch_size] * batch_size)
        opt.step(policy.params, grad)
    return policy

"""Preference-data ingestion, synthetic generation, and reference
log-probability caching.

File formats
------------

Preference file: JSON Lines, UTF-8, one object per line with exactly the
keys ``id``, ``prompt``, ``chosen``, ``rejected``.

Reference cache: a single file whose first line is a JSON header
(``format_version``, ``dataset_hash``, ``reference_ids``, ``example_ids``,
layout metadata) followed by the raw little-endian float64 body of shape
``(n_examples, n_references, 2)``; the last axis is (chosen, rejected).
Outputs are scored with the eos terminator appended, which the header
records.  Writes are atomic (write-temp-then-rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EncodingError, IntegrityError, ParseError
from .prefmath import PairRefLogProbs
from .toypolicy import ToyPolicy, Vocab, default_vocab

CACHE_FORMAT_VERSION = 1

_EXAMPLE_KEYS = ("id", "prompt", "chosen", "rejected")


@dataclass(frozen=True)
class PreferenceExample:
    """One (prompt, chosen, rejected) triple with a provenance id."""

    id: str
    prompt: str
    chosen: str
    rejected: str

    def __post_init__(self) -> None:
        for key in _EXAMPLE_KEYS:
            v = getattr(self, key)
            if not isinstance(v, str) or not v:
                raise ValueError(f"field {key!r} must be a non-empty string")
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected must differ")


def canonical_example_line(ex: PreferenceExample) -> str:
    return json.dumps({"id": ex.id, "prompt": ex.prompt, "chosen": ex.chosen,
                       "rejected": ex.rejected},
                      sort_keys=True, ensure_ascii=False,
                      separators=(",", ":"))


def dataset_hash(examples: Sequence[PreferenceExample]) -> str:
    """Stable hash of the canonical serialization, in order."""
    h = hashlib.sha256()
    for ex in examples:
        h.update(canonical_example_line(ex).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def load_preference_file(path) -> list[PreferenceExample]:
    """Order-preserving JSONL parse; malformed lines raise ``ParseError``
    with the line number, duplicate ids raise ``IntegrityError``."""
    examples: list[PreferenceExample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}: line {lineno}: expected a JSON object")
            missing = [k for k in _EXAMPLE_KEYS if k not in obj]
            if missing:
                raise ParseError(
                    f"{path}: line {lineno}: missing key(s) {', '.join(missing)}")
            try:
                ex = PreferenceExample(id=obj["id"], prompt=obj["prompt"],
                                       chosen=obj["chosen"], rejected=obj["rejected"])
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if ex.id in seen:
                raise IntegrityError(f"{path}: line {lineno}: duplicate id {ex.id!r}")
            seen.add(ex.id)
            examples.append(ex)
    return examples


def write_preference_file(path, examples: Sequence[PreferenceExample]) -> None:
    """Canonical JSONL writer; write-then-load round-trips field for field."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(canonical_example_line(ex))
            fh.write("\n")
    os.replace(tmp, path)


# -- synthetic data ----------------------------------------------------------


class PlantedReward:
    """A fixed scoring map from (prompt, output) to a real number.

    Scores are a sum of per-character weights plus a bigram bonus whose
    chain starts at the last prompt character, so both the output content
    and (mildly) the prompt matter.  Also owns the prompt/output samplers
    used for synthetic data and reference-policy synthesis.

    Outputs are sampled at a fixed length: sequence log-probabilities fall
    roughly linearly with length, so variable lengths would bury the
    content signal of a log-probability gap under length noise (and length
    normalization is out of scope here).
    """

    def __init__(self, vocab: Vocab, seed: int,
                 letters: str = string.ascii_lowercase[:16],
                 prompt_len: tuple[int, int] = (2, 5),
                 output_len: tuple[int, int] = (6, 6),
                 bigram_scale: float = 1.0):
        self.vocab = vocab
        self.seed = int(seed)
        self.letters = letters
        self.prompt_len = prompt_len
        self.output_len = output_len
        self._letter_ids = np.asarray(vocab.encode(letters), dtype=np.int64)
        rng = np.random.default_rng([self.seed, 0x7E4A])
        self._unigram = rng.normal(0.0, 1.0, size=vocab.size)
        self._bigram = rng.normal(0.0, bigram_scale, size=(vocab.size, vocab.size))

    def score(self, prompt: str, output: str) -> float:
        prev = self.vocab.encode(prompt)[-1]
        total = 0.0
        for tok in self.vocab.encode(output):
            total += self._unigram[tok] + self._bigram[prev, tok]
            prev = tok
        return float(total)

    def _sample_text(self, rng: np.random.Generator, lo: int, hi: int) -> str:
        n = int(rng.integers(lo, hi + 1))
        ids = self._letter_ids[rng.integers(0, len(self._letter_ids), size=n)]
        return self.vocab.decode(ids)

    def sample_prompt(self, rng: np.random.Generator) -> str:
        return self._sample_text(rng, *self.prompt_len)

    def sample_output(self, rng: np.random.Generator, prompt: str | None = None) -> str:
        return self._sample_text(rng, *self.output_len)


@dataclass(frozen=True)
class SyntheticSpec:
    """Everything that determines a synthetic preference dataset."""

    seed: int
    pairs: int
    noise_rate: float = 0.0
    vocab: Vocab = field(default_factory=default_vocab)
    reward: PlantedReward | None = None
    train_fraction: float = 0.9

    def __post_init__(self) -> None:
        if self.pairs < 1:
            raise ValueError(f"pairs must be >= 1, got {self.pairs}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError(
                f"noise rate must be in [0, 0.5) to keep labels informative, "
                f"got {self.noise_rate!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must be in (0, 1)")

    def planted_reward(self) -> PlantedReward:
        return self.reward or PlantedReward(self.vocab, seed=self.seed)


def generate_synthetic(spec: SyntheticSpec
                       ) -> tuple[list[PreferenceExample], list[PreferenceExample]]:
    """Sample prompts and candidate pairs, label by planted reward (flipped
    with the noise rate), and split train/test deterministically."""
    reward = spec.planted_reward()
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    examples = []
    for i in range(spec.pairs):
        prompt = reward.sample_prompt(rng)
        while True:
            o1 = reward.sample_output(rng, prompt)
            o2 = reward.sample_output(rng, prompt)
            if o1 == o2:
                continue
            s1, s2 = reward.score(prompt, o1), reward.score(prompt, o2)
            if s1 != s2:  # the generator forbids ties
                break
        chosen, rejected = (o1, o2) if s1 > s2 else (o2, o1)
        if spec.noise_rate > 0.0 and rng.random() < spec.noise_rate:
            chosen, rejected = rejected, chosen
        examples.append(PreferenceExample(
            id=f"synth-{spec.seed}-{i:06d}", prompt=prompt,
            chosen=chosen, rejected=rejected))
    perm = rng.permutation(spec.pairs)
    n_train = int(spec.train_fraction * spec.pairs)
    train = [examples[j] for j in perm[:n_train]]
    test = [examples[j] for j in perm[n_train:]]
    return train, test


# -- reference log-probability cache -----------------------------------------


class RefLogProbCache:
    """Frozen per-example log-probabilities for K reference policies.

    ``values`` has shape (n_examples, n_references, 2); the last axis is
    (chosen, rejected).  Index 0 along the reference axis is the
    initializing reference.
    """

    def __init__(self, dataset_hash: str, reference_ids: Sequence[str],
                 example_ids: Sequence[str], values: np.ndarray):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 2:
            raise IntegrityError(f"cache body must be (n, k, 2), got {values.shape}")
        if values.shape[0] != len(example_ids):
            raise IntegrityError("cache rows do not cover the example ids")
        if values.shape[1] != len(reference_ids):
            raise IntegrityError("cache columns do not match the reference ids")
        if len(reference_ids) < 1:
            raise IntegrityError("cache needs at least one reference")
        if not np.all(np.isfinite(values)) or np.any(values > 0.0):
            raise IntegrityError("cached log-probabilities must be finite and <= 0")
        values.setflags(write=False)
        self.dataset_hash = str(dataset_hash)
        self.reference_ids = tuple(str(r) for r in reference_ids)
        self.example_ids = tuple(str(e) for e in example_ids)
        self.values = values
        self._row = {e: i for i, e in enumerate(self.example_ids)}
        if len(self._row) != len(self.example_ids):
            raise IntegrityError("duplicate example ids in cache")

    @property
    def n_references(self) -> int:
        return len(self.reference_ids)

    def row_index(self, example_id: str) -> int:
        try:
            return self._row[example_id]
        except KeyError:
            raise IntegrityError(f"example {example_id!r} not in cache") from None

    def pair_refs(self, example_id: str) -> PairRefLogProbs:
        row = self.values[self.row_index(example_id)]
        return PairRefLogProbs(chosen=tuple(row[:, 0]), rejected=tuple(row[:, 1]))

    def require_covers(self, examples: Sequence[PreferenceExample]) -> None:
        h = dataset_hash(examples)
        if h != self.dataset_hash:
            raise IntegrityError(
                f"cache was built for dataset {self.dataset_hash[:12]}..., "
                f"got {h[:12]}...")

    def save(self, path) -> None:
        header = {
            "format_version": CACHE_FORMAT_VERSION,
            "kind": "ref-logprob-cache",
            "dataset_hash": self.dataset_hash,
            "reference_ids": list(self.reference_ids),
            "example_ids": list(self.example_ids),
            "n_examples": len(self.example_ids),
            "n_references": self.n_references,
            "dtype": "<f8",
            "layout": "(n_examples, n_references, 2) row-major; last axis (chosen, rejected)",
            "eos_appended": True,
        }
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True,
                                separators=(",", ":")).encode("utf-8"))
            fh.write(b"\n")
            fh.write(self.values.astype("<f8").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "RefLogProbCache":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            body = fh.read()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"{path}: unreadable cache header: {exc}") from None
        version = header.get("format_version")
        if version != CACHE_FORMAT_VERSION:
            raise IntegrityError(
                f"{path}: unsupported cache format version {version!r} "
                f"(this build reads version {CACHE_FORMAT_VERSION})")
        n = int(header["n_examples"])
        k = int(header["n_references"])
        expected = n * k * 2 * 8
        if len(body) != expected:
            raise IntegrityError(
                f"{path}: cache body has {len(body)} bytes, expected {expected}")
        values = np.frombuffer(body, dtype="<f8").reshape(n, k, 2)
        return cls(dataset_hash=header["dataset_hash"],
                   reference_ids=header["reference_ids"],
                   example_ids=header["example_ids"], values=values)


def score_references(dataset: Sequence[PreferenceExample],
                     references, *, chunk: int = 512) -> RefLogProbCache:
    """Score every (example, output, reference) triple.

    ``references`` is a sequence of ``ToyPolicy`` (index 0 = initializing
    reference) or a path to an existing cache file, in which case the cache
    is loaded and verified against ``dataset``.
    """
    if isinstance(references, (str, Path)):
        cache = RefLogProbCache.load(references)
        cache.require_covers(dataset)
        return cache
    references = list(references)
    if not references:
        raise ValueError("need at least one reference policy")
    vocab_hash = references[0].vocab.fingerprint()
    for ref in references[1:]:
        if ref.vocab.fingerprint() != vocab_hash:
            raise EncodingError("reference policies use different vocabularies")

    n = len(dataset)
    values = np.empty((n, len(references), 2), dtype=np.float64)
    for k, ref in enumerate(references):
        encs = []
        for ex in dataset:
            p = ref.vocab.encode(ex.prompt)
            encs.append(ref.prepare_ids(p, ref.vocab.encode(ex.chosen) + [ref.vocab.eos_id]))
            encs.append(ref.prepare_ids(p, ref.vocab.encode(ex.rejected) + [ref.vocab.eos_id]))
        out = np.empty(2 * n)
        for start in range(0, 2 * n, chunk):
            out[start:start + chunk] = ref.logprobs(encs[start:start + chunk])
        values[:, k, 0] = out[0::2]
        values[:, k, 1] = out[1::2]
    return RefLogProbCache(dataset_hash=dataset_hash(dataset),
                           reference_ids=[r.fingerprint() for r in references],
                           example_ids=[ex.id for ex in dataset],
                           values=values)

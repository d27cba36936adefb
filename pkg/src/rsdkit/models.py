"""Next-token distributions, distribution arithmetic, and toy language models.

The engine treats a language model as a black box mapping a token-id context
to a dense, normalized next-token distribution at temperature 1. Temperature
and sampling are applied explicitly by callers, never inside a backend.

Two deterministic in-process backends are provided for desk-scale work:

* :class:`TableModel` — explicit rows keyed on context suffixes.
* :class:`NgramModel` — maximum-likelihood n-gram with add-constant
  smoothing, trained on a token corpus.

Both are pure functions of (model spec, context) and safe to query from
concurrent workers.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

NORMALIZATION_ATOL = 1e-9


class EmptySupportError(ValueError):
    """An operation left a distribution with no probability mass."""


class ContextOverflowError(RuntimeError):
    """A generation context exceeded its token budget."""


class UniformSource(Protocol):
    """Anything that yields uniform [0, 1) doubles (np.random.Generator, StepStream)."""

    def random(self) -> float: ...


class Distribution:
    """Dense normalized probability vector over a vocabulary.

    Entries are float64, non-negative, and sum to 1 within
    ``NORMALIZATION_ATOL``. Instances are treated as immutable; the sampling
    CDF is memoized on first use.
    """

    __slots__ = ("probs", "_cdf")

    def __init__(self, probs: Sequence[float] | np.ndarray, *, validate: bool = True) -> None:
        arr = np.asarray(probs, dtype=np.float64)
        if validate:
            if arr.ndim != 1 or arr.shape[0] < 2:
                raise ValueError(f"distribution needs a 1-d vector of length >= 2, got shape {arr.shape}")
            if np.any(arr < 0.0):
                raise ValueError("distribution entries must be non-negative")
            total = float(arr.sum())
            if abs(total - 1.0) > NORMALIZATION_ATOL:
                raise ValueError(f"distribution sums to {total!r}, expected 1 within {NORMALIZATION_ATOL}")
        self.probs = arr
        self._cdf: np.ndarray | None = None

    @property
    def vocab_size(self) -> int:
        return int(self.probs.shape[0])

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])

    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            self._cdf = np.cumsum(self.probs)
        return self._cdf

    def __repr__(self) -> str:
        return f"Distribution({self.probs!r})"


def apply_temperature(dist: Distribution, temperature: float) -> Distribution:
    """Rescale a distribution to ``p_i^(1/T) / Z``.

    Equivalent to dividing logits by T for softmax-derived distributions.
    T = 1 returns the input object unchanged (exact identity). Computed in
    log space so extreme temperatures do not underflow the whole vector.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if temperature == 1.0:
        return dist
    p = dist.probs
    out = np.zeros_like(p)
    positive = p > 0.0
    if not np.any(positive):
        raise EmptySupportError("cannot temper a distribution with no mass")
    logs = np.log(p[positive]) / temperature
    logs -= logs.max()
    w = np.exp(logs)
    out[positive] = w / w.sum()
    return Distribution(out, validate=False)


def sample(dist: Distribution, rng: UniformSource) -> int:
    """Draw one token; consumes exactly one uniform from ``rng``.

    Pure function of (distribution, uniform draw): inverse-CDF over the
    memoized cumulative sums.
    """
    cdf = dist.cdf()
    total = float(cdf[-1])
    if total <= 0.0:
        raise EmptySupportError("cannot sample from an all-zero distribution")
    idx = int(np.searchsorted(cdf, rng.random() * total, side="right"))
    return idx


def greedy(dist: Distribution) -> int:
    """Lowest-index token among those attaining the maximum probability."""
    return int(np.argmax(dist.probs))


@dataclass
class GenerationContext:
    """Ordered token-id sequence with a hard length budget. Single-owner."""

    tokens: list[int]
    max_length: int

    def __post_init__(self) -> None:
        if self.max_length <= 0:
            raise ValueError(f"max_length must be positive, got {self.max_length}")
        if len(self.tokens) > self.max_length:
            raise ContextOverflowError(
                f"context of length {len(self.tokens)} exceeds budget {self.max_length}"
            )

    def append(self, token: int) -> None:
        if len(self.tokens) >= self.max_length:
            raise ContextOverflowError(f"context budget {self.max_length} exhausted")
        self.tokens.append(token)

    def extend(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            self.append(t)

    def __len__(self) -> int:
        return len(self.tokens)


class LanguageModel(ABC):
    """Context -> next-token distribution at temperature 1.

    ``thread_safe`` declares whether concurrent workers may query the handle
    directly; the pipeline wraps non-safe handles in a serializing proxy.
    """

    backend: str = "abstract"
    thread_safe: bool = True
    vocab_size: int
    eos_token: int

    @abstractmethod
    def next_distribution(self, context: Sequence[int]) -> Distribution:
        """Raw (temperature-1) distribution after the given context."""

    def _check_context(self, context: Sequence[int]) -> None:
        for t in context:
            if not 0 <= t < self.vocab_size:
                raise ValueError(f"context token {t} outside vocabulary of size {self.vocab_size}")


class SerializedModel(LanguageModel):
    """Funnels all queries of a non-thread-safe handle through one lock."""

    backend = "serialized"
    thread_safe = True

    def __init__(self, inner: LanguageModel) -> None:
        import threading

        self._inner = inner
        self._lock = threading.Lock()
        self.vocab_size = inner.vocab_size
        self.eos_token = inner.eos_token

    def next_distribution(self, context: Sequence[int]) -> Distribution:
        with self._lock:
            return self._inner.next_distribution(context)


class TableModel(LanguageModel):
    """Explicit lookup model: context-suffix rows with a default row.

    The longest declared suffix matching the context tail wins; contexts
    matching no row get the default. All rows must share one vocab size.
    """

    backend = "table"

    def __init__(
        self,
        rows: Mapping[tuple[int, ...], Sequence[float] | np.ndarray | Distribution],
        default: Sequence[float] | np.ndarray | Distribution,
        *,
        eos_token: int | None = None,
    ) -> None:
        self._default = default if isinstance(default, Distribution) else Distribution(default)
        self.vocab_size = self._default.vocab_size
        self._rows: dict[tuple[int, ...], Distribution] = {}
        for key, row in rows.items():
            key = tuple(int(t) for t in key)
            d = row if isinstance(row, Distribution) else Distribution(row)
            if d.vocab_size != self.vocab_size:
                raise ValueError(
                    f"row {key} has vocab size {d.vocab_size}, expected {self.vocab_size}"
                )
            self._rows[key] = d
        # longest-first so the most specific suffix wins
        self._key_lengths = sorted({len(k) for k in self._rows}, reverse=True)
        self.eos_token = self.vocab_size - 1 if eos_token is None else int(eos_token)
        if not 0 <= self.eos_token < self.vocab_size:
            raise ValueError(f"eos token {self.eos_token} outside vocabulary")

    def next_distribution(self, context: Sequence[int]) -> Distribution:
        self._check_context(context)
        n = len(context)
        for length in self._key_lengths:
            if length > n:
                continue
            row = self._rows.get(tuple(context[n - length :]))
            if row is not None:
                return row
        return self._default


class NgramModel(LanguageModel):
    """Maximum-likelihood n-gram with add-constant smoothing.

    Order n conditions on the previous n-1 tokens. With smoothing 0, a
    context whose counts are all zero backs off to the next shorter order
    (order 0, the corpus unigram, always has mass).
    """

    backend = "ngram"

    def __init__(
        self,
        corpus: Sequence[int],
        order: int,
        smoothing: float = 0.0,
        *,
        vocab_size: int | None = None,
        eos_token: int | None = None,
    ) -> None:
        corpus = [int(t) for t in corpus]
        if not corpus:
            raise ValueError("corpus must be non-empty")
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if order > len(corpus):
            raise ValueError(f"order {order} exceeds corpus length {len(corpus)}")
        if smoothing < 0.0:
            raise ValueError(f"smoothing must be >= 0, got {smoothing}")
        inferred = max(corpus) + 1
        self.vocab_size = max(2, inferred) if vocab_size is None else int(vocab_size)
        if self.vocab_size < max(2, inferred):
            raise ValueError(f"vocab_size {vocab_size} too small for corpus with max id {inferred - 1}")
        self.order = order
        self.smoothing = float(smoothing)
        # counts[k][ctx][next] for context lengths k = 0 .. order-1
        self._counts: list[dict[tuple[int, ...], dict[int, int]]] = [{} for _ in range(order)]
        for k in range(order):
            table = self._counts[k]
            for i in range(k, len(corpus)):
                ctx = tuple(corpus[i - k : i])
                nxt = corpus[i]
                table.setdefault(ctx, {})
                table[ctx][nxt] = table[ctx].get(nxt, 0) + 1
        self.eos_token = self.vocab_size - 1 if eos_token is None else int(eos_token)
        if not 0 <= self.eos_token < self.vocab_size:
            raise ValueError(f"eos token {self.eos_token} outside vocabulary")

    def next_distribution(self, context: Sequence[int]) -> Distribution:
        self._check_context(context)
        k = min(self.order - 1, len(context))
        while True:
            ctx = tuple(context[len(context) - k :]) if k else ()
            hits = self._counts[k].get(ctx, {})
            total = sum(hits.values())
            if total > 0 or self.smoothing > 0.0:
                probs = np.full(self.vocab_size, self.smoothing, dtype=np.float64)
                for token, count in hits.items():
                    probs[token] += count
                denom = total + self.smoothing * self.vocab_size
                return Distribution(probs / denom, validate=False)
            k -= 1  # zero-mass context under zero smoothing: back off

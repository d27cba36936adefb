"""HTTP client exposing a log-probability server as a LanguageModel.

Protocol (JSON over HTTP/1.1):

* ``GET /v1/capabilities?model=NAME`` returns
  ``{"model": NAME, "vocab_size": V, "eos_token": E, "max_context": C}``.
* ``POST /v1/distribution`` with body
  ``{"model": NAME, "context": [int, ...], "want": "full"}`` returns
  ``{"logprobs": [float; V]}`` — a dense vector, possibly unnormalized
  logits, which the client softmaxes into a distribution. Servers that hold
  exact probabilities (the bundled stub does) may add ``"probs": [float; V]``
  and the client will take those verbatim, preserving bit-exactness that a
  log/exp round trip cannot.
* ``want`` may instead be ``{"top_k": K, "score": [ids]}``; the response
  then carries ``top_tokens``/``top_logprobs`` plus entries for the
  explicitly scored ids, and the client renormalizes over that sparse
  support. This trades exact fallback sampling for bandwidth on large
  vocabularies.

``RSDKIT_REMOTE_URL`` and ``RSDKIT_REMOTE_TIMEOUT`` override the endpoint's
base URL and timeout. Requests are idempotent and never mutate server
state; responses are cached per context with a bounded LRU.
"""

from __future__ import annotations

import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import requests

from .models import Distribution, LanguageModel


class BackendError(RuntimeError):
    """The remote backend misbehaved (bad payload, HTTP error)."""


class BackendUnavailableError(BackendError):
    """The backend stayed unreachable through the whole retry budget."""


class CapabilityMismatchError(BackendError):
    """Server-reported capabilities contradict the configured endpoint."""


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_s: float = 0.2


@dataclass(frozen=True)
class ServerCapabilities:
    model_name: str
    vocab_size: int
    eos_token: int
    max_context: int


@dataclass(frozen=True)
class BackendEndpoint:
    """Where and how to reach one served model."""

    base_url: str
    model_name: str
    timeout_s: float = 30.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    vocab_size: int | None = None
    eos_token: int | None = None
    max_inflight: int = 8

    def resolved(self) -> "BackendEndpoint":
        """Apply environment overrides for base URL and timeout."""
        out = self
        url = os.environ.get("RSDKIT_REMOTE_URL")
        if url:
            out = replace(out, base_url=url)
        timeout = os.environ.get("RSDKIT_REMOTE_TIMEOUT")
        if timeout:
            out = replace(out, timeout_s=float(timeout))
        return out


def _request(endpoint: BackendEndpoint, session, method: str, path: str, **kwargs):
    url = endpoint.base_url.rstrip("/") + path
    last: Exception | None = None
    for attempt in range(endpoint.retry.max_retries + 1):
        try:
            resp = session.request(method, url, timeout=endpoint.timeout_s, **kwargs)
        except requests.RequestException as exc:
            last = exc
            if attempt < endpoint.retry.max_retries:
                time.sleep(endpoint.retry.backoff_s * (2**attempt))
            continue
        if resp.status_code >= 400:
            raise BackendError(f"{method} {path} -> HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()
    raise BackendUnavailableError(
        f"{url} unreachable after {endpoint.retry.max_retries + 1} tries: {last}"
    )


def handshake(endpoint: BackendEndpoint, session=None) -> ServerCapabilities:
    """Fetch server capabilities and check them against the configuration."""
    endpoint = endpoint.resolved()
    session = session or requests.Session()
    payload = _request(
        endpoint, session, "GET", "/v1/capabilities", params={"model": endpoint.model_name}
    )
    try:
        caps = ServerCapabilities(
            model_name=str(payload["model"]),
            vocab_size=int(payload["vocab_size"]),
            eos_token=int(payload["eos_token"]),
            max_context=int(payload["max_context"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError(f"malformed capabilities payload: {payload!r}") from exc
    if endpoint.vocab_size is not None and caps.vocab_size != endpoint.vocab_size:
        raise CapabilityMismatchError(
            f"configured vocab_size {endpoint.vocab_size}, server reports {caps.vocab_size}"
        )
    if endpoint.eos_token is not None and caps.eos_token != endpoint.eos_token:
        raise CapabilityMismatchError(
            f"configured eos_token {endpoint.eos_token}, server reports {caps.eos_token}"
        )
    return caps


def distribution_from_payload(payload: dict, vocab_size: int) -> Distribution:
    """Dense payload -> normalized distribution.

    Prefers exact ``probs`` when the server supplies them; otherwise
    softmaxes ``logprobs`` (which are then allowed to be arbitrary logits,
    already-normalized log-probabilities included). 32-bit servers are fine:
    values widen to float64 on ingestion.
    """
    if "probs" in payload and payload["probs"] is not None:
        probs = np.asarray(payload["probs"], dtype=np.float64)
        if probs.shape != (vocab_size,):
            raise BackendError(f"probs length {probs.shape} != vocab size {vocab_size}")
        try:
            return Distribution(probs)
        except ValueError as exc:
            raise BackendError(f"non-normalizable probs payload: {exc}") from exc
    if "logprobs" not in payload:
        raise BackendError(f"payload carries neither probs nor logprobs: {list(payload)}")
    lp = np.asarray(payload["logprobs"], dtype=np.float64)
    if lp.shape != (vocab_size,):
        raise BackendError(f"logprobs length {lp.shape} != vocab size {vocab_size}")
    finite = np.isfinite(lp)
    if not finite.any():
        raise BackendError("logprobs vector has no finite entries")
    w = np.zeros(vocab_size, dtype=np.float64)
    shifted = lp[finite] - lp[finite].max()
    w[finite] = np.exp(shifted)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise BackendError("logprobs vector is not normalizable")
    return Distribution(w / total)


class RemoteModel(LanguageModel):
    """LanguageModel backed by the wire protocol above.

    Thread-safe up to ``endpoint.max_inflight`` concurrent requests; the
    response cache is shared (sound, since responses are pure functions of
    the context) and bounded.
    """

    backend = "remote"
    thread_safe = True

    def __init__(self, endpoint: BackendEndpoint, session=None, cache_size: int = 256) -> None:
        self.endpoint = endpoint.resolved()
        self._session = session or requests.Session()
        caps = handshake(self.endpoint, self._session)
        self.capabilities = caps
        self.vocab_size = caps.vocab_size
        self.eos_token = caps.eos_token
        self._cache: OrderedDict[tuple[int, ...], Distribution] = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()
        self._inflight = threading.Semaphore(self.endpoint.max_inflight)

    def next_distribution(self, context: Sequence[int]) -> Distribution:
        key = tuple(context)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        if len(key) > self.capabilities.max_context:
            raise BackendError(
                f"context length {len(key)} exceeds server max {self.capabilities.max_context}"
            )
        body = {"model": self.endpoint.model_name, "context": list(key), "want": "full"}
        with self._inflight:
            payload = _request(self.endpoint, self._session, "POST", "/v1/distribution", json=body)
        dist = distribution_from_payload(payload, self.vocab_size)
        with self._lock:
            self._cache[key] = dist
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return dist

    def sparse_distribution(
        self, context: Sequence[int], top_k: int, score_tokens: Sequence[int] = ()
    ) -> Distribution:
        """Top-k + explicitly-scored ids, renormalized over that support.

        An approximation: mass outside the returned support is dropped, so
        fallback sampling over this distribution is no longer exact.
        """
        body = {
            "model": self.endpoint.model_name,
            "context": list(int(t) for t in context),
            "want": {"top_k": int(top_k), "score": [int(t) for t in score_tokens]},
        }
        with self._inflight:
            payload = _request(self.endpoint, self._session, "POST", "/v1/distribution", json=body)
        try:
            pairs = list(zip(payload["top_tokens"], payload["top_logprobs"])) + list(
                zip(payload["scored_tokens"], payload["scored_logprobs"])
            )
        except (KeyError, TypeError) as exc:
            raise BackendError(f"malformed sparse payload: {list(payload)}") from exc
        w = np.zeros(self.vocab_size, dtype=np.float64)
        for token, lp in pairs:
            token = int(token)
            if not 0 <= token < self.vocab_size:
                raise BackendError(f"sparse payload token {token} out of range")
            if np.isfinite(lp):
                w[token] = np.exp(lp)
        total = w.sum()
        if total <= 0.0:
            raise BackendError("sparse payload carries no mass")
        return Distribution(w / total)

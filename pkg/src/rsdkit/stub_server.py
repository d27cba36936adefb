"""In-process stub server speaking the distribution protocol.

Wraps any in-process LanguageModel (tables, n-grams) behind the same wire
surface a real inference server would expose, so decoders can be exercised
end to end over HTTP without GPUs. Responses carry both ``logprobs`` and
exact ``probs`` (see :mod:`rsdkit.remote` for why both exist).

Usable as a context manager in tests (background thread) or run in the
foreground via the ``stub-serve`` CLI subcommand.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping
from urllib.parse import parse_qs, urlparse

import numpy as np

from .models import Distribution, LanguageModel


class StubServer:
    def __init__(
        self,
        models: Mapping[str, LanguageModel],
        host: str = "127.0.0.1",
        port: int = 0,
        max_context: int = 8192,
        quiet: bool = True,
    ) -> None:
        self.models = dict(models)
        self.max_context = max_context
        handler = _make_handler(self.models, max_context, quiet)
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def _make_handler(models: Mapping[str, LanguageModel], max_context: int, quiet: bool):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # noqa: N802
            if not quiet:
                super().log_message(fmt, *args)

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _fail(self, status: int, message: str) -> None:
            self._send(status, {"error": message})

        def do_GET(self) -> None:  # noqa: N802
            url = urlparse(self.path)
            if url.path != "/v1/capabilities":
                self._fail(404, f"unknown path {url.path}")
                return
            names = parse_qs(url.query).get("model", [])
            if len(names) != 1:
                self._fail(400, "exactly one model parameter required")
                return
            model = models.get(names[0])
            if model is None:
                self._fail(404, f"unknown model {names[0]!r}")
                return
            self._send(
                200,
                {
                    "model": names[0],
                    "vocab_size": model.vocab_size,
                    "eos_token": model.eos_token,
                    "max_context": max_context,
                },
            )

        def do_POST(self) -> None:  # noqa: N802
            url = urlparse(self.path)
            if url.path != "/v1/distribution":
                self._fail(404, f"unknown path {url.path}")
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length))
                name = body["model"]
                context = [int(t) for t in body["context"]]
                want = body.get("want", "full")
            except (KeyError, TypeError, ValueError) as exc:
                self._fail(400, f"malformed request: {exc}")
                return
            model = models.get(name)
            if model is None:
                self._fail(404, f"unknown model {name!r}")
                return
            if len(context) > max_context:
                self._fail(400, f"context length {len(context)} exceeds max {max_context}")
                return
            try:
                dist = model.next_distribution(context)
            except ValueError as exc:
                self._fail(400, str(exc))
                return
            if want == "full":
                self._send(200, _full_payload(name, dist))
            elif isinstance(want, dict) and "top_k" in want:
                try:
                    k = int(want["top_k"])
                    score = [int(t) for t in want.get("score", [])]
                except (TypeError, ValueError) as exc:
                    self._fail(400, f"malformed want: {exc}")
                    return
                self._send(200, _sparse_payload(name, dist, k, score))
            else:
                self._fail(400, f"unsupported want {want!r}")

    return Handler


# zero-probability entries clamp to a huge negative logprob instead of
# -Infinity so the emitted JSON stays strict-parser friendly
ZERO_MASS_LOGPROB = -1e300


def _logprobs(probs: np.ndarray) -> list[float]:
    with np.errstate(divide="ignore"):
        lp = np.log(probs)
    return [float(x) if np.isfinite(x) else ZERO_MASS_LOGPROB for x in lp]


def _full_payload(name: str, dist: Distribution) -> dict:
    return {
        "model": name,
        "logprobs": _logprobs(dist.probs),
        "probs": [float(p) for p in dist.probs],
    }


def _sparse_payload(name: str, dist: Distribution, top_k: int, score: list[int]) -> dict:
    order = np.argsort(-dist.probs, kind="stable")[: max(top_k, 0)]
    lp = _logprobs(dist.probs)
    return {
        "model": name,
        "top_tokens": [int(t) for t in order],
        "top_logprobs": [lp[t] for t in order],
        "scored_tokens": [int(t) for t in score if 0 <= t < dist.vocab_size],
        "scored_logprobs": [lp[t] for t in score if 0 <= t < dist.vocab_size],
    }

"""Deterministic seed derivation and per-step uniform streams.

Every random decision in the engine flows through one of two primitives:

* :class:`StepStream` — a counter-based uniform stream keyed on
  ``(seed, step)``. Each decode step owns its own stream, so whether a step
  consumes one draw (proposal accepted) or two (fallback resample) never
  shifts the randomness of later steps.
* :func:`derive_seed` — a stable 64-bit seed derived from a base seed plus
  string/int parts (problem id, attempt index), identical across processes.

splitmix64 is used as the mixing function: it is counter-based (no generator
object to construct per step, which profiling showed dominates toy-scale
decoding), statistically solid for this purpose, and trivially portable.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 mixing round over a 64-bit state."""
    z = (x + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class StepStream:
    """Uniform [0, 1) stream for a single decode step.

    Draw ``k`` at step ``i`` under seed ``s`` is a pure function of
    ``(s, i, k)``; two streams built from the same key replay identically.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int, step: int) -> None:
        self._state = splitmix64(splitmix64(seed & _MASK64) ^ splitmix64(step & _MASK64))

    def random(self) -> float:
        self._state = (self._state + _GAMMA) & _MASK64
        return (splitmix64(self._state) >> 11) * 2.0 ** -53


def derive_seed(base_seed: int, *parts: str | int) -> int:
    """Stable 64-bit seed from a base seed and labelling parts.

    Uses sha256 rather than ``hash()`` so the value survives interpreter
    restarts and process boundaries (worker pools).
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode("ascii"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")

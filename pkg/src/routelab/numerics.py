"""Random streams, stable softmax, Gumbel sampling and a finite-difference oracle."""

from __future__ import annotations

import hashlib
from typing import Callable, Hashable

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, OracleFailureError

WORKING_DTYPE = np.float32
CHECK_DTYPE = np.float64

# Uniform draws are clamped into [2^-53, 1 - 2^-53] so the double log stays finite.
_U_LO = 2.0 ** -53
_U_HI = 1.0 - 2.0 ** -53


def _key_to_int(key: Hashable) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.sha256(repr(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngState:
    """A seeded Philox stream; child streams are keyed by (seed, stream path).

    Streams derived from distinct key paths are statistically independent, and
    the whole state is a pure function of ``(seed, stream)`` plus the number of
    draws taken so far.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if seed < 0:
            raise InvalidConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(stream)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys: Hashable) -> RngState:
        """Independent stream for ``keys``; does not advance this stream."""
        return RngState(self.seed, self.stream + tuple(_key_to_int(k) for k in keys))

    def clone(self) -> RngState:
        twin = RngState(self.seed, self.stream)
        twin.gen.bit_generator.state = self.gen.bit_generator.state
        return twin

    @property
    def position(self) -> int:
        """Philox block counter; advances as draws are taken."""
        state = self.gen.bit_generator.state
        return int(state["state"]["counter"][0]) * 4 + int(state["buffer_pos"])

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [2^-53, 1 - 2^-53]."""
        return np.clip(self.gen.random(n), _U_LO, _U_HI)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream}, position={self.position})"


def _check_finite(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("logits contain non-finite entries")


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``; keeps the input's float dtype."""
    x = np.asarray(logits)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(CHECK_DTYPE)
    _check_finite(x)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(CHECK_DTYPE)
    _check_finite(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def logsumexp(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits)
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores in ascending index order; ties go to the lower index."""
    s = np.asarray(scores)
    if not 0 <= k <= s.shape[-1]:
        raise InvalidConfigError(f"k={k} outside [0, {s.shape[-1]}]")
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])


def gumbel_noise(rng: RngState, n: int, scale: float = 1.0) -> np.ndarray:
    if not scale > 0:
        raise InvalidConfigError(f"Gumbel scale must be > 0, got {scale}")
    if n == 0:
        return np.empty(0, dtype=CHECK_DTYPE)
    u = rng.uniform(n)
    return -scale * np.log(-np.log(u))


def gumbel_top_k(scores, k: int, rng: RngState, scale: float = 1.0) -> np.ndarray:
    """Sample a size-``k`` index set by perturbing ``scores`` with Gumbel noise.

    Returns positions into ``scores`` (ascending). Equivalent to sampling
    ``k`` items without replacement from ``softmax(scores / scale)``.
    """
    s = np.asarray(scores, dtype=CHECK_DTYPE)
    if k > s.shape[0]:
        raise InvalidConfigError(f"k={k} exceeds pool size {s.shape[0]}")
    return top_k(s + gumbel_noise(rng, s.shape[0], scale), k)


def finite_difference_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, evaluated in float64."""
    if not eps > 0:
        raise InvalidConfigError(f"eps must be > 0, got {eps}")
    x0 = np.array(x, dtype=CHECK_DTYPE, copy=True)
    flat = x0.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x0))
        flat[i] = orig - eps
        lo = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleFailureError(f"non-finite objective at coordinate {i}", coordinate=i)
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x0.shape)


def relative_error(analytic, numeric, floor: float = 1e-7) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=CHECK_DTYPE)
    b = np.asarray(numeric, dtype=CHECK_DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)

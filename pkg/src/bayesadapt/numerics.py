"""Seeded random streams, Gaussian sampling, diagonal-Gaussian KL and a
finite-difference gradient oracle."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

SIGMA_FLOOR = 1e-6

_MASK64 = (1 << 64) - 1


class InvalidSpecError(ValueError):
    pass


class OracleFailure(RuntimeError):
    pass


class ClampedInputWarning(UserWarning):
    """A standard deviation at or below ``SIGMA_FLOOR`` was clamped."""


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(global_seed: int, *keys) -> int:
    """Mix a global seed with any number of keys into a 64-bit seed.

    The mix is ``splitmix64(state ^ splitmix64(key))`` folded left over the
    keys; string keys are first reduced with an 8-byte blake2b digest.
    """
    state = splitmix64(int(global_seed) & _MASK64)
    for key in keys:
        state = splitmix64(state ^ splitmix64(_key_to_int(key)))
    return state


class RandomStream:
    """Single-owner stream of standard normal and uniform draws.

    ``position`` counts the scalar variates handed out so far.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.position = 0
        self._rng = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def for_speaker(cls, global_seed: int, speaker_id) -> "RandomStream":
        return cls(derive_seed(global_seed, speaker_id))

    def spawn(self, *keys) -> "RandomStream":
        return RandomStream(derive_seed(self.seed, *keys))

    def normal(self, shape) -> np.ndarray:
        out = self._rng.standard_normal(shape)
        self.position += out.size
        return out

    def uniform(self, shape=None, low=0.0, high=1.0):
        out = self._rng.uniform(low, high, shape)
        self.position += int(np.size(out))
        return out

    def integers(self, low, high=None, size=None):
        out = self._rng.integers(low, high, size)
        self.position += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.position += n
        return self._rng.permutation(n)


@dataclass
class GaussianSpec:
    """Diagonal Gaussian. ``sigma`` is a standard deviation vector or a single
    tied scalar broadcast over every dimension."""

    mu: np.ndarray
    sigma: Union[np.ndarray, float]

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if np.ndim(self.sigma) == 0:
            self.sigma = float(self.sigma)
        else:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.mu.shape:
                raise InvalidSpecError(
                    f"sigma shape {self.sigma.shape} does not match mu shape {self.mu.shape}"
                )
        if np.any(~np.isfinite(self.mu)) or np.any(~np.isfinite(self.sigma)):
            raise InvalidSpecError("non-finite Gaussian parameters")
        if np.any(np.asarray(self.sigma) < 0):
            raise InvalidSpecError("negative standard deviation")

    @property
    def tied(self) -> bool:
        return np.ndim(self.sigma) == 0

    @property
    def dim(self) -> int:
        return self.mu.size

    def sigma_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.sigma, dtype=float), self.mu.shape).copy()


def gaussian_draw(stream: RandomStream, spec: GaussianSpec):
    """Reparameterised draw ``r = mu + sigma * eps``.

    Returns ``(r, eps)``. Dimensions whose sigma is at or below the floor are
    treated as point masses: eps is still drawn (so stream positions do not
    depend on sigma) but contributes nothing to ``r``.
    """
    if np.any(np.asarray(spec.sigma) < 0):
        raise InvalidSpecError("negative standard deviation")
    eps = stream.normal(spec.mu.shape)
    sigma = np.asarray(spec.sigma, dtype=float)
    live = sigma > SIGMA_FLOOR
    if np.all(live):
        r = spec.mu + sigma * eps
    else:
        r = spec.mu + np.where(live, sigma, 0.0) * eps
    return r, eps


def kl_diag_gaussian(q: GaussianSpec, p0: GaussianSpec) -> float:
    """KL(q || p0) for diagonal Gaussians, summed over dimensions."""
    if q.mu.shape != p0.mu.shape:
        raise InvalidSpecError(f"dimension mismatch {q.mu.shape} vs {p0.mu.shape}")
    sq = q.sigma_vector()
    s0 = p0.sigma_vector()
    if np.any(sq <= SIGMA_FLOOR) or np.any(s0 <= SIGMA_FLOOR):
        warnings.warn("sigma clamped to positivity floor in KL", ClampedInputWarning, stacklevel=2)
        sq = np.maximum(sq, SIGMA_FLOOR)
        s0 = np.maximum(s0, SIGMA_FLOOR)
    var_ratio = (sq / s0) ** 2
    terms = ((q.mu - p0.mu) / s0) ** 2 + var_ratio - np.log(var_ratio) - 1.0
    return float(0.5 * np.sum(terms))


def kl_diag_gaussian_grad(q: GaussianSpec, p0: GaussianSpec):
    """Gradients of :func:`kl_diag_gaussian` w.r.t. ``q.mu`` and ``q.sigma``.

    For a tied ``q.sigma`` the sigma gradient is the sum over dimensions.
    """
    sq = np.maximum(q.sigma_vector(), SIGMA_FLOOR)
    s0 = np.maximum(p0.sigma_vector(), SIGMA_FLOOR)
    g_mu = (q.mu - p0.mu) / s0**2
    g_sigma = sq / s0**2 - 1.0 / sq
    if q.tied:
        return g_mu, float(np.sum(g_sigma))
    return g_mu, g_sigma


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for d in range(x.size):
        step = np.zeros(x.size)
        step[d] = h
        step = step.reshape(x.shape)
        fp = f(x + step)
        fm = f(x - step)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite function value at dimension {d}")
        flat[d] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a, b, atol: float = 1e-8) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, atol)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

"""
Gaussian sampling and PSD linear algebra
Shared by the chain simulator, the limit recursion and the rate engine
"""

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, List, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .errors import NotPsdError, ShapeMismatchError

# relative to the spectral norm of the matrix at hand
CLAMP_REL = 1e-10
IMAGE_RESIDUAL_REL = 1e-8

Label = Union[str, int]


def _label_key(label: Label) -> int:
    """Stable 32-bit key for a split label"""
    text = label if isinstance(label, str) else f"#{int(label)}"
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """Splittable random stream addressed by (seed, path, counter)

    Every generator is rebuilt from a SeedSequence keyed by the full path, so
    a stream never carries hidden state and workers may draw in any order.
    """

    seed: int
    path: Tuple[Label, ...] = ()
    counter: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def split(self, label: Label) -> "RngStream":
        """Child stream, independent of every sibling label"""
        return replace(self, path=self.path + (label,), counter=0)

    def advance(self, steps: int = 1) -> "RngStream":
        """Same path, next counter value"""
        return replace(self, counter=self.counter + steps)

    def seed_sequence(self) -> np.random.SeedSequence:
        keys = tuple(_label_key(label) for label in self.path) + (self.counter,)
        return np.random.SeedSequence(entropy=self.seed, spawn_key=keys)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream"""
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def describe(self) -> str:
        """Seed path as written to manifests"""
        parts = [str(self.seed)] + [str(label) for label in self.path]
        text = "/".join(parts)
        return f"{text}@{self.counter}" if self.counter else text


def clamp_tolerance(eigenvalues: np.ndarray) -> float:
    """Absolute clamp threshold for a spectrum"""
    if eigenvalues.size == 0:
        return 0.0
    return CLAMP_REL * float(np.max(np.abs(eigenvalues)))


class PsdMatrix:
    """Symmetric PSD covariance over flattened (site, input) pairs

    Row k stands for site i and input mu with k = mu + i * n_inputs (0-based).
    Entries are symmetrized on construction; eigenvalues in [-clamp, 0) are
    accepted and read as 0 by every consumer.
    """

    def __init__(self, entries, n_inputs: int = 1, validate: bool = True):
        a = np.array(entries, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeMismatchError(f"expected a square matrix, got shape {a.shape}")
        if n_inputs < 1 or a.shape[0] % n_inputs:
            raise ShapeMismatchError(f"dimension {a.shape[0]} is not a multiple of P={n_inputs}")
        if not np.all(np.isfinite(a)):
            raise NotPsdError("matrix has non-finite entries")
        a = 0.5 * (a + a.T)
        if validate and a.size:
            w = np.linalg.eigvalsh(a)
            if w[0] < -clamp_tolerance(w):
                raise NotPsdError(f"not PSD: smallest eigenvalue {w[0]:.3e}")
        self.entries = a
        self.n_inputs = n_inputs

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def n_sites(self) -> int:
        return self.dim // self.n_inputs

    def index(self, site: int, mu: int) -> int:
        """Flat index of (site, input), both 0-based"""
        if not (0 <= site < self.n_sites and 0 <= mu < self.n_inputs):
            raise ShapeMismatchError(f"(site={site}, mu={mu}) outside {self.n_sites}x{self.n_inputs}")
        return mu + site * self.n_inputs

    def site_input(self, k: int) -> Tuple[int, int]:
        """Inverse of index"""
        site, mu = divmod(k, self.n_inputs)
        return site, mu

    def from_one_based(self, site: int, mu: int) -> int:
        """Flat index from 1-based (i, mu)"""
        return self.index(site - 1, mu - 1)

    def spectral_norm(self) -> float:
        if not self.entries.size:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvalsh(self.entries))))

    def __repr__(self):
        return f"PsdMatrix(dim={self.dim}, n_inputs={self.n_inputs})"


def as_array(Q) -> np.ndarray:
    """Entries of a PsdMatrix, or the array itself"""
    return Q.entries if isinstance(Q, PsdMatrix) else np.asarray(Q, dtype=float)


def sqrt_array(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of one matrix or a stack (..., D, D)"""
    w, v = np.linalg.eigh(a)
    tol = CLAMP_REL * np.max(np.abs(w), axis=-1, keepdims=True) if w.size else 0.0
    bad = w < -tol
    if np.any(bad):
        raise NotPsdError(f"not PSD: smallest eigenvalue {float(w[bad].min()):.3e}")
    root = np.sqrt(np.clip(w, 0.0, None))
    s = (v * root[..., None, :]) @ np.swapaxes(v, -1, -2)
    return 0.5 * (s + np.swapaxes(s, -1, -2))


def psd_sqrt(Q) -> PsdMatrix:
    """S symmetric PSD with S @ S = Q, via eigendecomposition"""
    n_inputs = Q.n_inputs if isinstance(Q, PsdMatrix) else 1
    Q = Q if isinstance(Q, PsdMatrix) else PsdMatrix(Q)
    return PsdMatrix(sqrt_array(Q.entries), n_inputs=n_inputs, validate=False)


def sample_conditional_layer(K, channels: int, stream: RngStream) -> np.ndarray:
    """C x D draws whose rows are sqrt(K) z_c with z_c iid standard normal"""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    root = psd_sqrt(K).entries
    z = stream.generator().standard_normal((channels, root.shape[0]))
    return z @ root


def generalized_q_norm(Q, Z) -> float:
    """Z^T Q^+ Z when Z lies in Im(Q), +inf otherwise"""
    q = as_array(Q)
    z = np.asarray(Z, dtype=float).ravel()
    if q.ndim != 2 or z.size != q.shape[0]:
        raise ShapeMismatchError(f"vector of length {z.size} against matrix {q.shape}")
    w, v = np.linalg.eigh(q)
    keep = w > clamp_tolerance(w)
    coef = v.T @ z
    residual = float(np.linalg.norm(coef[~keep]))
    if residual > IMAGE_RESIDUAL_REL * float(np.linalg.norm(z)):
        return math.inf
    return float(np.sum(coef[keep] ** 2 / w[keep]))


def block_plan(total: int, block: int) -> List[Tuple[int, int]]:
    """(block index, block size) pairs covering total items"""
    return [(b, min(block, total - start)) for b, start in enumerate(range(0, total, block))]


def map_blocks(fn: Callable[[int, int], Any], total: int, block: int, workers: int = 1) -> List[Any]:
    """fn(index, size) per block, results in block order whatever the worker count"""
    plan = block_plan(total, block)
    if workers <= 1 or len(plan) <= 1:
        return [fn(b, size) for b, size in plan]
    return Parallel(n_jobs=workers, prefer="threads")(delayed(fn)(b, size) for b, size in plan)

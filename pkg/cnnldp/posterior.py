"""
Bayesian layer
Gaussian likelihood, the posterior potential Psi(K|y) and importance-sampling
summaries of the posterior over the covariance chain
"""

import logging
import math
from typing import Callable, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy.special import logsumexp

from .arch import ArchSpec
from .artifacts import read_tensor_csv
from .errors import ShapeMismatchError
from .gauss import PsdMatrix, RngStream, as_array
from .kernel import simulate_chain_replicas
from .ldp import EventSpec

logger = logging.getLogger(__name__)

KernelSamples = Union[np.ndarray, Sequence[PsdMatrix]]


class Observations:
    """Targets y as C x N x P plus the noise precision beta"""

    def __init__(self, values, beta: float):
        values = np.array(values, dtype=float)
        if values.ndim != 3:
            raise ShapeMismatchError(f"observations must be C x N x P, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("observations contain non-finite entries")
        if not beta > 0 or not math.isfinite(beta):
            raise ValueError(f"beta must be positive, got {beta}")
        self.values = values
        self.beta = float(beta)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def total_dim(self) -> int:
        return self.values.size

    def check(self, spec: ArchSpec):
        """Observations must be C_out x N_(L+1) x P for the network"""
        expected = (spec.output_channels, spec.spatial_dims[-1], spec.n_inputs)
        if self.values.shape[0] != expected[0]:
            raise ShapeMismatchError(f"observations have {self.values.shape[0]} channels, "
                                     f"the network has {expected[0]} output channels")
        if self.values.shape != expected:
            raise ShapeMismatchError(f"observations shape {self.values.shape} differs from "
                                     f"(C_out, N_(L+1), P) = {expected}")

    def blocks(self) -> np.ndarray:
        """Channel-major (C, N*P) rows, column i * P + mu"""
        return self.values.reshape(self.channels, -1)

    @classmethod
    def from_csv(cls, path, beta: float, shape=None) -> "Observations":
        """Rows c,i,mu,value with 1-based indices, the InputBatch layout"""
        return cls(read_tensor_csv(path, shape), beta)


class PosteriorSummary(BaseModel):
    estimate: float
    ess: float
    samples: int


def log_likelihood(obs: Observations, s) -> float:
    """(D/2) log(beta / 2 pi) - (beta/2) sum ||s - y||^2"""
    s = np.asarray(s, dtype=float)
    if s.shape != obs.values.shape:
        raise ShapeMismatchError(f"output shape {s.shape} differs from observations {obs.values.shape}")
    residual = s - obs.values
    return 0.5 * obs.total_dim * math.log(obs.beta / (2 * math.pi)) - 0.5 * obs.beta * float(np.sum(residual ** 2))


def _stack(samples: KernelSamples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples if samples.ndim == 3 else samples[None]
    return np.stack([as_array(k) for k in samples])


def psi_many(samples: KernelSamples, obs: Observations) -> np.ndarray:
    """Psi for a stack of kernels, one Cholesky factor of I + beta K each"""
    k = _stack(samples)
    blocks = obs.blocks()
    if k.shape[1] != blocks.shape[1]:
        raise ShapeMismatchError(f"kernel dimension {k.shape[1]} against observation blocks of {blocks.shape[1]}")
    a = np.eye(k.shape[1]) + obs.beta * k
    factor = np.linalg.cholesky(a)
    rhs = np.broadcast_to(blocks.T, (k.shape[0],) + blocks.T.shape)
    solved = np.linalg.solve(factor, rhs)
    quad = obs.beta * np.sum(solved ** 2, axis=(1, 2))
    logdet = 2.0 * np.sum(np.log(np.diagonal(factor, axis1=1, axis2=2)), axis=1)
    values = quad + obs.channels * logdet
    # both terms are nonnegative for PSD K; clip rounding
    return np.maximum(values, 0.0)


def psi(K, obs: Observations) -> float:
    """beta sum_c y_c^T (I + beta K)^-1 y_c + C logdet(I + beta K)"""
    return float(psi_many(as_array(K)[None], obs)[0])


def posterior_weights(samples: KernelSamples, obs: Observations) -> np.ndarray:
    """w_k proportional to exp(-Psi(K_k|y) / 2), summing to one"""
    k = _stack(samples)
    if k.shape[0] == 0:
        raise ValueError("posterior weights need at least one kernel sample")
    log_w = -0.5 * psi_many(k, obs)
    return np.exp(log_w - logsumexp(log_w))


def posterior_expectation(statistic: Callable[[np.ndarray], float], samples: KernelSamples,
                          weights: np.ndarray) -> PosteriorSummary:
    """sum_k w_k statistic(K_k) with ESS = 1 / sum w_k^2"""
    k = _stack(samples)
    values = np.array([float(statistic(m)) for m in k])
    weights = np.asarray(weights, dtype=float)
    if weights.shape != values.shape:
        raise ShapeMismatchError("weights and samples differ in length")
    if np.all(values == values[0]):
        estimate = float(values[0])
    else:
        estimate = float(np.sum(weights * values))
    return PosteriorSummary(estimate=estimate, ess=1.0 / float(np.sum(weights ** 2)), samples=values.size)


def laziness_profile(spec: ArchSpec, K1: PsdMatrix, obs: Observations, event: EventSpec,
                     n_list: Sequence[int], replicas: int, stream: RngStream,
                     workers: int = 1) -> pd.DataFrame:
    """Prior vs posterior probability of an event on K^(L+1,n), normalized log-ratio per n"""
    rows = []
    for n in n_list:
        path = stream.split(f"n-{n}")
        ensemble = simulate_chain_replicas(spec, K1, n, replicas, path, workers)
        stack = ensemble.level(event.level)
        inside = event.contains(event.values(stack))
        psi_values = psi_many(ensemble.final(), obs)
        log_w = -0.5 * psi_values
        weights = np.exp(log_w - logsumexp(log_w))
        prior = float(inside.mean())
        post = float(weights[inside].sum())
        if prior > 0 and post > 0:
            ratio = abs(math.log(post) - math.log(prior)) / n
            psi_max = float(psi_values[inside].max())
        else:
            ratio, psi_max = math.nan, math.nan
        rows.append({
            "n": n,
            "replicas": replicas,
            "prior_prob": prior,
            "posterior_prob": post,
            "log_ratio_per_n": ratio,
            "psi_max": psi_max,
            "bound": 5.0 / n * psi_max,
            "ess": 1.0 / float(np.sum(weights ** 2)),
            "seed_path": path.describe(),
        })
    return pd.DataFrame(rows)

"""
Statistical checks behind the clt-check and rate commands
LLN scaling, Kolmogorov-Smirnov on standardized outputs, the energy-distance
two-sample test between the two output samplers and MGF midpoint convexity
"""

import logging
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.stats import kstest

from .arch import ArchSpec
from .gauss import PsdMatrix, RngStream
from .kernel import InputBatch, chain_output_sample, forward_network_sample, simulate_chain_replicas
from .ldp import log_mgf, safe_tilt_radius

logger = logging.getLogger(__name__)


def lln_scaling(spec: ArchSpec, K1: PsdMatrix, limit_final: PsdMatrix, n_list: Sequence[int],
                replicas: int, stream: RngStream, workers: int = 1) -> pd.DataFrame:
    """Median ||K^(L+1,n) - K_limit||_F per n and the shrink factor between consecutive n

    Every n reads the same replica streams, so replica r at 4n extends the
    channels of replica r at n.
    """
    path = stream.split("replicas")
    rows = []
    for n in n_list:
        final = simulate_chain_replicas(spec, K1, n, replicas, path, workers).final()
        errors = np.sqrt(np.sum((final - limit_final.entries) ** 2, axis=(1, 2)))
        rows.append({"n": n, "replicas": replicas, "median_error": float(np.median(errors)),
                     "seed_path": path.describe()})
    table = pd.DataFrame(rows)
    table["shrink_factor"] = table["median_error"].shift(1) / table["median_error"]
    return table


def output_ks(spec: ArchSpec, K1: PsdMatrix, limit_final: PsdMatrix, n: int, replicas: int,
              stream: RngStream, level: float = 0.01, workers: int = 1) -> pd.DataFrame:
    """KS test of each standardized output coordinate against N(0, 1), one output channel"""
    ensemble = simulate_chain_replicas(spec, K1, n, replicas, stream.split("chains"), workers)
    finals = ensemble.final()
    output_stream = stream.split("outputs")
    outputs = np.stack([
        chain_output_sample(spec, PsdMatrix(k, n_inputs=spec.n_inputs, validate=False), 1,
                            output_stream.split(r)).reshape(-1)
        for r, k in enumerate(finals)
    ])
    scale = np.sqrt(np.diag(limit_final.entries))
    rows = []
    # Bonferroni across coordinates
    threshold = level / outputs.shape[1]
    for k in range(outputs.shape[1]):
        if scale[k] == 0:
            continue
        result = kstest(outputs[:, k] / scale[k], "norm")
        rows.append({"coordinate": k, "n": n, "replicas": replicas,
                     "ks_statistic": float(result.statistic), "p_value": float(result.pvalue),
                     "passed": bool(result.pvalue >= threshold)})
    return pd.DataFrame(rows)


def energy_distance_test(x: np.ndarray, y: np.ndarray, permutations: int,
                         stream: RngStream) -> dict:
    """Two-sample energy statistic with a permutation p-value"""
    x = x.reshape(x.shape[0], -1)
    y = y.reshape(y.shape[0], -1)
    pooled = np.vstack([x, y])
    dist = cdist(pooled, pooled)
    nx = x.shape[0]

    def statistic(labels):
        a, b = labels[:nx], labels[nx:]
        return (2 * dist[np.ix_(a, b)].mean() - dist[np.ix_(a, a)].mean() - dist[np.ix_(b, b)].mean())

    order = np.arange(pooled.shape[0])
    observed = statistic(order)
    gen = stream.generator()
    exceed = sum(statistic(gen.permutation(order)) >= observed for _ in range(permutations))
    return {"statistic": float(observed), "p_value": (exceed + 1) / (permutations + 1),
            "permutations": permutations, "samples": [int(nx), int(y.shape[0])]}


def sampler_equivalence(spec: ArchSpec, batch: InputBatch, K1: PsdMatrix, n: int, replicas: int,
                        stream: RngStream, permutations: int = 199, out_channels: int = 1,
                        workers: int = 1) -> dict:
    """Weight-space forward outputs against chain-representation outputs"""
    forward_stream = stream.split("forward")
    forward = np.stack([
        forward_network_sample(spec, batch, n, out_channels, forward_stream.split(r))
        for r in range(replicas)
    ])
    finals = simulate_chain_replicas(spec, K1, n, replicas, stream.split("chains"), workers).final()
    output_stream = stream.split("outputs")
    chain = np.stack([
        chain_output_sample(spec, PsdMatrix(k, n_inputs=spec.n_inputs, validate=False), out_channels,
                            output_stream.split(r))
        for r, k in enumerate(finals)
    ])
    result = energy_distance_test(forward, chain, permutations, stream.split("permutations"))
    result.update({"n": n, "replicas": replicas})
    return result


def mgf_convexity(spec: ArchSpec, layer: int, Q1, pairs: int, samples: int,
                  stream: RngStream, probe_samples: int = 20_000) -> pd.DataFrame:
    """log M at midpoints against the chord, random tilt pairs inside the safe ball"""
    radius = safe_tilt_radius(spec, layer, Q1, probe_samples, stream.split("probe"))
    dim = spec.dim(layer + 1)
    gen = stream.split("tilts").generator()
    rows = []
    for p in range(pairs):
        tilts = []
        for _ in range(2):
            a = gen.standard_normal((dim, dim))
            a = 0.5 * (a + a.T)
            tilts.append(a * (gen.uniform(0.0, 0.9) * min(radius, 1e3) / np.linalg.norm(a)))
        # one stream for all three estimates
        mgf_stream = stream.split("mgf").split(p)
        left = log_mgf(spec, layer, tilts[0], Q1, samples, mgf_stream)
        right = log_mgf(spec, layer, tilts[1], Q1, samples, mgf_stream)
        mid = log_mgf(spec, layer, 0.5 * (tilts[0] + tilts[1]), Q1, samples, mgf_stream)
        slack = 0.5 * (left.log_value + right.log_value) - mid.log_value
        combined = float(np.sqrt(left.stderr ** 2 + right.stderr ** 2 + mid.stderr ** 2))
        rows.append({"pair": p, "midpoint": mid.log_value, "chord": 0.5 * (left.log_value + right.log_value),
                     "slack": slack, "combined_se": combined,
                     "passed": bool(slack >= -3 * combined)})
    return pd.DataFrame(rows)

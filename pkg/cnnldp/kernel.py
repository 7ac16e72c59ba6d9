"""
Covariance machinery: input kernel, the Gram map G, the empirical
covariance chain, the deterministic limit recursion and a literal
weight-space network sampler used as an independent oracle
"""

import logging
from typing import List, Optional

import numpy as np

from .arch import ArchSpec, channel_profile, extractor_operator
from .errors import ShapeMismatchError
from .gauss import PsdMatrix, RngStream, map_blocks, psd_sqrt, sample_conditional_layer, sqrt_array

logger = logging.getLogger(__name__)

CHANNEL_BLOCK = 4096
SAMPLE_BLOCK = 4096
WEIGHT_BLOCK = 256
# floats held per replica block in the ensemble simulator
REPLICA_BLOCK_FLOATS = 1 << 22


class InputBatch:
    """Inputs x_1..x_P stacked as a C0 x N0 x P tensor"""

    def __init__(self, values):
        values = np.array(values, dtype=float)
        if values.ndim != 3 or values.shape[2] < 1:
            raise ShapeMismatchError(f"inputs must be C0 x N0 x P, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("inputs contain non-finite entries")
        self.values = values

    @property
    def n_inputs(self) -> int:
        return self.values.shape[2]

    def check(self, spec: ArchSpec):
        expected = (spec.input_channels, spec.spatial_dims[0], spec.n_inputs)
        if self.values.shape != expected:
            raise ShapeMismatchError(f"inputs have shape {self.values.shape}, architecture expects {expected}")


class KernelChain:
    """K^(1), ..., K^(L+1) with a provenance tag"""

    def __init__(self, kernels: List[PsdMatrix], provenance: str,
                 stderrs: Optional[List[np.ndarray]] = None):
        self.kernels = list(kernels)
        self.provenance = provenance
        self.stderrs = stderrs

    @property
    def final(self) -> PsdMatrix:
        return self.kernels[-1]

    @property
    def dims(self) -> List[int]:
        return [k.dim for k in self.kernels]

    def __len__(self):
        return len(self.kernels)


class GramBatch:
    """G(z_s) for a batch of samples, kept as dense matrices"""

    def __init__(self, grams: np.ndarray):
        self.grams = grams

    @property
    def size(self) -> int:
        return self.grams.shape[0]

    def per_sample(self) -> np.ndarray:
        return self.grams

    def total(self) -> np.ndarray:
        return self.grams.sum(axis=0)

    def exponents(self, tilt: np.ndarray) -> np.ndarray:
        """tr(Q0^T G(z_s)) per sample"""
        return np.einsum("skl,kl->s", self.grams, tilt)

    def weighted_sum(self, weights: np.ndarray) -> np.ndarray:
        return np.einsum("s,skl->kl", weights, self.grams)

    def frobenius_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.per_sample() ** 2, axis=(1, 2)))


class FeatureGramBatch(GramBatch):
    """G(z_s) = scale * sum_m f_sm f_sm^T, stored through the features f"""

    def __init__(self, features: np.ndarray, scale: float):
        self.features = features
        self.scale = scale

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def per_sample(self) -> np.ndarray:
        return self.scale * np.einsum("smk,sml->skl", self.features, self.features)

    def total(self) -> np.ndarray:
        flat = self.features.reshape(-1, self.features.shape[2])
        return self.scale * (flat.T @ flat)

    def exponents(self, tilt: np.ndarray) -> np.ndarray:
        return self.scale * np.sum((self.features @ tilt) * self.features, axis=(1, 2))

    def weighted_sum(self, weights: np.ndarray) -> np.ndarray:
        weighted = self.features * weights[:, None, None]
        flat = self.features.reshape(-1, self.features.shape[2])
        return self.scale * (weighted.reshape(flat.shape).T @ flat)


class CovarianceMap:
    """Map from a D_l vector to a PSD D_{l+1} matrix driving one chain step

    Subclasses implement batch(); any such map can drive transitions, the
    limit recursion and the rate engine.
    """

    in_dim: int
    out_dim: int
    n_inputs: int = 1

    def batch(self, y: np.ndarray) -> GramBatch:
        raise NotImplementedError

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        grams = self.batch(np.atleast_2d(z)).per_sample()
        return grams[0] if single else grams


class CallableCovarianceMap(CovarianceMap):
    """Wraps a plain function z -> G(z) applied sample by sample"""

    def __init__(self, fn, in_dim: int, out_dim: int, n_inputs: int = 1):
        self.fn = fn
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.n_inputs = n_inputs

    def batch(self, y: np.ndarray) -> GramBatch:
        return GramBatch(np.stack([np.asarray(self.fn(row), dtype=float) for row in y]))


class PatchGramMap(CovarianceMap):
    """[G(z)]_{(i,mu),(j,nu)} = 1/(lambda M) sum_m sigma(R_m^(i) z_mu) sigma(R_m^(j) z_nu)"""

    def __init__(self, spec: ArchSpec, layer: int):
        self.op = extractor_operator(spec, layer)
        self.activation = spec.activation
        self.n_inputs = spec.n_inputs
        self.in_dim = spec.spatial_dims[layer] * spec.n_inputs
        self.out_dim = spec.spatial_dims[layer + 1] * spec.n_inputs
        self.scale = 1.0 / (spec.layers[layer].precision * self.op.shape[1])

    def features(self, y: np.ndarray) -> np.ndarray:
        """sigma(R z) as (S, M, D_{l+1}) with column i * P + mu"""
        if y.shape[-1] != self.in_dim:
            raise ShapeMismatchError(f"z has dimension {y.shape[-1]}, expected {self.in_dim}")
        s = y.shape[0]
        z = y.reshape(s, -1, self.n_inputs)
        patches = np.einsum("imn,snp->smip", self.op, z)
        return self.activation(patches).reshape(s, self.op.shape[1], self.out_dim)

    def batch(self, y: np.ndarray) -> FeatureGramBatch:
        return FeatureGramBatch(self.features(y), self.scale)


def input_kernel(spec: ArchSpec, batch: InputBatch) -> PsdMatrix:
    """K^(1) = 1/(lambda_0 C_0 M) sum_c sum_m R_m(x_mu,c) R_m(x_nu,c)"""
    batch.check(spec)
    x = batch.values
    op = extractor_operator(spec, 0)
    m0 = op.shape[1]
    patches = np.einsum("imn,cnp->cmip", op, x).reshape(x.shape[0] * m0, -1)
    if spec.first_layer_mask == "layer1" and spec.hidden_layers >= 1:
        m_norm = spec.mask_size(1)
    else:
        m_norm = m0
    k = patches.T @ patches / (spec.layers[0].precision * spec.input_channels * m_norm)
    return PsdMatrix(k, n_inputs=spec.n_inputs)


def g_map(spec: ArchSpec, layer: int, z) -> PsdMatrix:
    """G^(l)(z) for one flattened vector z"""
    grams = PatchGramMap(spec, layer)(np.asarray(z, dtype=float).ravel())
    return PsdMatrix(grams, n_inputs=spec.n_inputs, validate=False)


def _gram_for(spec: ArchSpec, layer: int, gram: Optional[CovarianceMap]) -> CovarianceMap:
    return gram if gram is not None else PatchGramMap(spec, layer)


def transition_sample(spec: ArchSpec, layer: int, Q, channels: int, stream: RngStream,
                      workers: int = 1, gram: Optional[CovarianceMap] = None) -> PsdMatrix:
    """(1/C) sum_c G(sqrt(Q) z_c)"""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    gram = _gram_for(spec, layer, gram)
    root = psd_sqrt(Q).entries

    def block_total(b, size):
        z = stream.split(b).generator().standard_normal((size, root.shape[0]))
        return gram.batch(z @ root).total()

    parts = map_blocks(block_total, channels, CHANNEL_BLOCK, workers)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return PsdMatrix(total / channels, n_inputs=gram.n_inputs, validate=False)


def simulate_chain(spec: ArchSpec, K1: PsdMatrix, n: int, stream: RngStream,
                   workers: int = 1) -> KernelChain:
    """Empirical chain K^(1), K^(2,n), ..., K^(L+1,n)"""
    if n < 1:
        raise ValueError(f"scale index n must be >= 1, got {n}")
    kernels = [K1]
    for layer, channels in enumerate(channel_profile(spec, n), 1):
        kernels.append(transition_sample(spec, layer, kernels[-1], channels,
                                         stream.split(f"layer-{layer}"), workers))
    return KernelChain(kernels, provenance=f"empirical(n={n})")


class LimitEstimate:
    """Monte Carlo limit kernel with entrywise standard errors"""

    def __init__(self, kernel: PsdMatrix, stderr: np.ndarray, samples: int):
        self.kernel = kernel
        self.stderr = stderr
        self.samples = samples


def limit_kernel_mc(spec: ArchSpec, layer: int, K, samples: int, stream: RngStream,
                    antithetic: bool = False, workers: int = 1,
                    gram: Optional[CovarianceMap] = None) -> LimitEstimate:
    """E[G(Z)], Z ~ N(0, K), by Monte Carlo over S draws

    With antithetic=True each draw z is paired with -z and the pair average
    counts as one sample.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    gram = _gram_for(spec, layer, gram)
    root = psd_sqrt(K).entries

    def block_moments(b, size):
        z = stream.split(b).generator().standard_normal((size, root.shape[0]))
        y = z @ root
        g = gram.batch(y).per_sample()
        if antithetic:
            g = 0.5 * (g + gram.batch(-y).per_sample())
        mean = g.mean(axis=0)
        return size, mean, ((g - mean) ** 2).sum(axis=0)

    # pairwise merge of block means and second moments
    count, mean, m2 = 0, None, None
    for size, block_mean, block_m2 in map_blocks(block_moments, samples, SAMPLE_BLOCK, workers):
        if mean is None:
            count, mean, m2 = size, block_mean, block_m2
            continue
        delta = block_mean - mean
        merged = count + size
        mean = mean + delta * (size / merged)
        m2 = m2 + block_m2 + delta ** 2 * (count * size / merged)
        count = merged

    if count > 1:
        stderr = np.sqrt(m2 / (count - 1) / count)
    else:
        stderr = np.full_like(mean, np.inf)
    stderr = 0.5 * (stderr + stderr.T)
    kernel = PsdMatrix(mean, n_inputs=gram.n_inputs, validate=False)
    return LimitEstimate(kernel, stderr, samples)


def limit_chain(spec: ArchSpec, K1: PsdMatrix, samples: int, stream: RngStream,
                antithetic: bool = False, workers: int = 1) -> KernelChain:
    """Deterministic recursion K^(l+1) = E[G^(l)(Z)] estimated layer by layer"""
    kernels = [K1]
    stderrs = [np.zeros_like(K1.entries)]
    for layer in range(1, spec.hidden_layers + 1):
        est = limit_kernel_mc(spec, layer, kernels[-1], samples, stream.split(f"layer-{layer}"),
                              antithetic=antithetic, workers=workers)
        logger.debug("limit layer %d: max stderr %.3e", layer, float(est.stderr.max()))
        kernels.append(est.kernel)
        stderrs.append(est.stderr)
    return KernelChain(kernels, provenance=f"limit(mc_samples={samples})", stderrs=stderrs)


class ChainEnsemble:
    """Independent empirical chains; levels[l] holds K^(l+1,n) for every replica"""

    def __init__(self, initial: PsdMatrix, levels: List[np.ndarray], n: int):
        self.initial = initial
        self.levels = levels
        self.n = n

    @property
    def replicas(self) -> int:
        return self.levels[0].shape[0] if self.levels else 0

    def level(self, index: int) -> np.ndarray:
        """(R, D, D) stack for chain index l (1-based, l = 1 is the input kernel)"""
        if index == 1:
            return np.broadcast_to(self.initial.entries, (max(self.replicas, 1),) + self.initial.entries.shape)
        return self.levels[index - 2]

    def final(self) -> np.ndarray:
        return self.level(len(self.levels) + 1)


def simulate_chain_replicas(spec: ArchSpec, K1: PsdMatrix, n: int, replicas: int,
                            stream: RngStream, workers: int = 1) -> ChainEnsemble:
    """R independent chains, replica r drawing from stream.split(r)

    Layer l of replica r reads its channels from stream.split(r).split("layer-l"),
    so runs at different n on one stream share their leading channels.
    """
    channels = channel_profile(spec, n)
    grams = [PatchGramMap(spec, layer) for layer in range(1, spec.hidden_layers + 1)]
    if not grams:
        return ChainEnsemble(K1, [], n)
    root1 = psd_sqrt(K1).entries
    widest = max(c * g.op.shape[1] * g.out_dim for c, g in zip(channels, grams))
    block = max(1, REPLICA_BLOCK_FLOATS // widest)

    def block_levels(b, size):
        replica_streams = [stream.split(b * block + r) for r in range(size)]
        roots = np.broadcast_to(root1, (size,) + root1.shape)
        out = []
        for layer, (channel_count, gram) in enumerate(zip(channels, grams), 1):
            z = np.stack([s.split(f"layer-{layer}").generator().standard_normal((channel_count, gram.in_dim))
                          for s in replica_streams])
            y = np.matmul(z, roots)
            feats = gram.features(y.reshape(-1, gram.in_dim))
            feats = feats.reshape(size, -1, gram.out_dim)
            k = gram.scale * np.einsum("rak,ral->rkl", feats, feats) / channel_count
            k = 0.5 * (k + np.swapaxes(k, 1, 2))
            out.append(k)
            roots = sqrt_array(k)
        return out

    parts = map_blocks(block_levels, replicas, block, workers)
    levels = [np.concatenate([p[idx] for p in parts]) for idx in range(len(grams))]
    return ChainEnsemble(K1, levels, n)


def chain_output_sample(spec: ArchSpec, final: PsdMatrix, out_channels: int,
                        stream: RngStream) -> np.ndarray:
    """C x N_{L+1} x P output drawn from N(0, I_C (x) K^(L+1,n))"""
    draws = sample_conditional_layer(final, out_channels, stream)
    return draws.reshape(out_channels, spec.spatial_dims[-1], spec.n_inputs)


def forward_network_sample(spec: ArchSpec, batch: InputBatch, n: int, out_channels: int,
                           stream: RngStream) -> np.ndarray:
    """Literal network pass with fresh weights W^(l) ~ N(0, 1/lambda_l)"""
    batch.check(spec)
    if out_channels > spec.output_channels:
        raise ShapeMismatchError(f"requested {out_channels} output channels, network has {spec.output_channels}")
    widths = [spec.input_channels] + channel_profile(spec, n) + [out_channels]
    h = batch.values
    for layer in range(spec.hidden_layers + 1):
        op = extractor_operator(spec, layer)
        m = op.shape[1]
        patches = np.einsum("imn,cnp->cmip", op, h)
        if layer > 0:
            patches = spec.activation(patches)
        c_in, c_out = widths[layer], widths[layer + 1]
        std = 1.0 / np.sqrt(spec.layers[layer].precision)
        weights_stream = stream.split(f"weights-{layer}")
        out = np.empty((c_out, op.shape[0], spec.n_inputs))
        for b, start in enumerate(range(0, c_out, WEIGHT_BLOCK)):
            stop = min(c_out, start + WEIGHT_BLOCK)
            w = std * weights_stream.split(b).generator().standard_normal((m, c_in, stop - start))
            out[start:stop] = np.einsum("mcd,cmip->dip", w, patches)
        h = out / np.sqrt(m * c_in)
    return h

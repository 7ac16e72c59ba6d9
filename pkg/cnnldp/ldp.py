"""
Large-deviation engine
MGF estimation, the Legendre-Fenchel rate I_l via concave maximization over
symmetric tilts, chain / marginal / output rates and an empirical-rate harness
"""

import logging
import math
from typing import Callable, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp
from scipy.stats import binomtest, chi2

from .arch import ArchSpec, channel_profile
from .errors import ShapeMismatchError
from .gauss import PsdMatrix, RngStream, as_array, generalized_q_norm, map_blocks, psd_sqrt
from .kernel import SAMPLE_BLOCK, CovarianceMap, PatchGramMap, limit_kernel_mc, simulate_chain_replicas

logger = logging.getLogger(__name__)

TAIL_SHARE = 0.001
DIVERGENCE_LIMIT = 0.5
# exp(a) with tail index at or below one has no mean
HILL_LIMIT = 1.0
ESS_REFRESH = 0.10
SAFETY = 1.5
# proposal scales tried when the tilted sample degenerates
SCALE_LADDER = (0.5, 0.7, 1.0, 1.4, 2.0, 3.0)

LayerRate = Callable[[int, np.ndarray, np.ndarray], float]


class MgfEstimate(BaseModel):
    log_value: float
    infinite: bool
    stderr: float
    samples: int
    tail_fraction: float
    tail_index: float


class RateOptions(BaseModel):
    samples: int = 100_000
    tol: float = 1e-4
    max_iter: int = 200
    probe_samples: int = 20_000
    pilot_samples: int = 10_000
    max_refreshes: int = 6
    expansion: float = 1.3
    min_expansion: float = 1.005
    max_expansions: int = 16
    max_radius: float = 1e3
    workers: int = 1


class RateResult(BaseModel):
    value: float
    tilt: List[List[float]]
    iterations: int
    grad_norm: float
    domain_limited: bool
    converged: bool
    radius: float
    refreshes: int
    samples: int
    seed_path: str = ""

    def tilt_matrix(self) -> np.ndarray:
        return np.array(self.tilt, dtype=float)


class ChainRateResult(BaseModel):
    total: float
    terms: List[RateResult]
    slopes: List[float]
    domain_limited: bool


class MarginalOptions(BaseModel):
    initial_step: float = 0.25
    min_step: float = 1e-4
    max_evals: int = 2000
    limit_samples: int = 100_000


class MarginalRateResult(BaseModel):
    value: float
    lower: float
    upper: float
    intermediates: List[List[List[float]]]
    converged: bool
    evaluations: int


class OutputRateResult(BaseModel):
    value: float
    norm_part: float
    rate_part: float
    infinite: bool


class InfimumResult(BaseModel):
    value: float
    argmin: float
    evaluations: int


class EventSpec(BaseModel):
    """{K^(level,n) : statistic >= / <= threshold}"""

    level: int = 2
    statistic: Literal["entry", "frobenius"] = "entry"
    row: int = 0
    col: int = 0
    direction: Literal["ge", "le"] = "ge"
    threshold: float

    def values(self, stack: np.ndarray) -> np.ndarray:
        if self.statistic == "entry":
            return stack[:, self.row, self.col]
        return np.sqrt(np.sum(stack ** 2, axis=(1, 2)))

    def contains(self, values: np.ndarray) -> np.ndarray:
        return values >= self.threshold if self.direction == "ge" else values <= self.threshold


def scalar_chi_square_rate(q: float) -> float:
    """1/2 (q - 1 - ln q), the Cramer transform of a chi-square(1) mean"""
    if q <= 0:
        return math.inf
    return 0.5 * (q - 1.0 - math.log(q))


def chi_square_tail_rate(n: int, level: float, alpha: float = 1.0, q1: float = 1.0,
                         direction: str = "ge") -> float:
    """-(1/n) log P(q1 chi2_C / C >= level) with C = max(1, round(alpha n))"""
    c = max(1, int(math.floor(alpha * n + 0.5)))
    x = level * c / q1
    log_p = chi2.logsf(x, c) if direction == "ge" else chi2.logcdf(x, c)
    return -float(log_p) / n


def _symmetric(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _gram_for(spec: ArchSpec, layer: int, gram: Optional[CovarianceMap]) -> CovarianceMap:
    return gram if gram is not None else PatchGramMap(spec, layer)


def _hill_index(a: np.ndarray) -> float:
    """Hill estimate of the tail index of exp(a) from its top order statistics"""
    k = max(10, int(math.sqrt(a.size)))
    if a.size <= k:
        return math.inf
    # top[0] is the (k+1)-th largest value, the rest are the k largest
    top = np.partition(a, a.size - k - 1)[a.size - k - 1:]
    excess = float(np.mean(top[1:] - top[0]))
    return math.inf if excess <= 0 else 1.0 / excess


def _mgf_from_log_terms(a: np.ndarray) -> MgfEstimate:
    size = a.size
    if not np.all(np.isfinite(a)):
        return MgfEstimate(log_value=math.inf, infinite=True, stderr=math.inf, samples=size,
                           tail_fraction=1.0, tail_index=0.0)
    peak = float(a.max())
    w = np.exp(a - peak)
    mean_w = float(w.mean())
    log_value = peak + math.log(mean_w)
    stderr = float(w.std(ddof=1) / math.sqrt(size) / mean_w) if size > 1 else math.inf
    k = max(1, math.ceil(TAIL_SHARE * size))
    tail_fraction = float(np.partition(w, size - k)[size - k:].sum() / w.sum())
    tail_index = _hill_index(a)
    infinite = tail_fraction >= DIVERGENCE_LIMIT or tail_index <= HILL_LIMIT or not math.isfinite(log_value)
    return MgfEstimate(log_value=math.inf if infinite else log_value, infinite=infinite,
                       stderr=stderr, samples=size, tail_fraction=tail_fraction, tail_index=tail_index)


def log_mgf(spec: ArchSpec, layer: int, Q0, Q1, samples: int, stream: RngStream,
            workers: int = 1, gram: Optional[CovarianceMap] = None) -> MgfEstimate:
    """log E exp(tr(Q0^T G(sqrt(Q1) z))) by log-sum-exp over S draws"""
    gram = _gram_for(spec, layer, gram)
    tilt = _symmetric(as_array(Q0))
    if tilt.shape != (gram.out_dim, gram.out_dim):
        raise ShapeMismatchError(f"tilt has shape {tilt.shape}, expected D={gram.out_dim}")
    if not np.any(tilt):
        return MgfEstimate(log_value=0.0, infinite=False, stderr=0.0, samples=samples,
                           tail_fraction=TAIL_SHARE, tail_index=math.inf)
    root = psd_sqrt(Q1).entries

    def block_exponents(b, size):
        z = stream.split(b).generator().standard_normal((size, root.shape[0]))
        return gram.batch(z @ root).exponents(tilt)

    return _mgf_from_log_terms(np.concatenate(map_blocks(block_exponents, samples, SAMPLE_BLOCK, workers)))


def safe_tilt_radius(spec: ArchSpec, layer: int, Q1, probe_samples: int, stream: RngStream,
                     gram: Optional[CovarianceMap] = None) -> float:
    """1/(2 A ||Q1||_2) with A a 1.5x inflated estimate of sup ||G(z)||_F / (1 + ||z||^2)"""
    gram = _gram_for(spec, layer, gram)
    gen = stream.generator()
    u = gen.standard_normal((probe_samples, gram.in_dim))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    z = u * np.geomspace(0.1, 100.0, probe_samples)[:, None]
    ratios = np.concatenate([
        gram.batch(z[start:start + SAMPLE_BLOCK]).frobenius_norms()
        for start in range(0, probe_samples, SAMPLE_BLOCK)
    ]) / (1.0 + np.sum(z * z, axis=1))
    a_hat = SAFETY * float(ratios.max())
    q_norm = (Q1 if isinstance(Q1, PsdMatrix) else PsdMatrix(as_array(Q1))).spectral_norm()
    if a_hat == 0.0 or q_norm == 0.0:
        return math.inf
    return 1.0 / (2.0 * a_hat * q_norm)


class SampleBank:
    """Fixed draws G(y_s) with log proposal weights, reused across tilts"""

    def __init__(self, batches, log_base: np.ndarray, scale: float):
        self.batches = batches
        self.log_base = log_base
        self.scale = scale

    @classmethod
    def draw(cls, gram: CovarianceMap, root: np.ndarray, scale: float, size: int,
             stream: RngStream, workers: int = 1) -> "SampleBank":
        d = root.shape[0]

        def block(b, n):
            z = stream.split(b).generator().standard_normal((n, d))
            if scale == 1.0:
                lb = np.zeros(n)
            else:
                # N(0, I) target against N(0, scale^2 I) proposal
                lb = d * math.log(scale) + 0.5 * (1.0 - scale ** 2) * np.sum(z * z, axis=1)
            return gram.batch(scale * (z @ root)), lb

        parts = map_blocks(block, size, SAMPLE_BLOCK, workers)
        return cls([p[0] for p in parts], np.concatenate([p[1] for p in parts]), scale)

    @property
    def size(self) -> int:
        return self.log_base.size

    def log_terms(self, tilt: np.ndarray) -> np.ndarray:
        return np.concatenate([b.exponents(tilt) for b in self.batches]) + self.log_base

    def ess(self, tilt: np.ndarray) -> float:
        a = self.log_terms(tilt)
        if not np.all(np.isfinite(a)):
            return 0.0
        return float(math.exp(2 * logsumexp(a) - logsumexp(2 * a)))

    def evaluate(self, tilt: np.ndarray, target: np.ndarray):
        """objective, gradient and ESS at a tilt"""
        a = self.log_terms(tilt)
        if not np.all(np.isfinite(a)):
            return -math.inf, None, 0.0
        lse = float(logsumexp(a))
        w = np.exp(a - lse)
        tilted = np.zeros_like(target)
        start = 0
        for batch in self.batches:
            tilted = tilted + batch.weighted_sum(w[start:start + batch.size])
            start += batch.size
        value = float(np.sum(tilt * target)) - (lse - math.log(self.size))
        return value, target - _symmetric(tilted), 1.0 / float(np.sum(w * w))


def _project(tilt: np.ndarray, radius: float):
    norm = float(np.linalg.norm(tilt))
    if norm > radius:
        return tilt * (radius / norm), True
    return tilt, norm >= radius * (1 - 1e-9)


def _refresh(gram, root, tilt, opts: RateOptions, stream: RngStream, index: int) -> SampleBank:
    best_scale, best_ess = 1.0, -1.0
    for j, scale in enumerate(SCALE_LADDER):
        pilot = SampleBank.draw(gram, root, scale, opts.pilot_samples,
                                stream.split(f"pilot-{index}-{j}"), opts.workers)
        ess = pilot.ess(tilt) / pilot.size
        if ess > best_ess:
            best_scale, best_ess = scale, ess
    logger.debug("refresh %d: proposal scale %.2f, pilot ESS %.3f", index, best_scale, best_ess)
    return SampleBank.draw(gram, root, best_scale, opts.samples, stream.split(f"base-{index}"), opts.workers)


def rate_layer(spec: ArchSpec, layer: int, Q2, Q1, opts: Optional[RateOptions] = None,
               stream: Optional[RngStream] = None, gram: Optional[CovarianceMap] = None) -> RateResult:
    """I_l(Q2|Q1) = sup over symmetric Q0 of tr(Q0 Q2) - log M_l(Q0|Q1)"""
    opts = opts or RateOptions()
    stream = stream or RngStream(0, ("rate-layer", layer))
    gram = _gram_for(spec, layer, gram)
    target = _symmetric(as_array(Q2))
    if target.shape != (gram.out_dim, gram.out_dim):
        raise ShapeMismatchError(f"Q2 has shape {target.shape}, expected D={gram.out_dim}")
    root = psd_sqrt(Q1).entries
    if root.shape[0] != gram.in_dim:
        raise ShapeMismatchError(f"Q1 has dimension {root.shape[0]}, expected D={gram.in_dim}")

    radius = 0.9 * safe_tilt_radius(spec, layer, Q1, opts.probe_samples, stream.split("probe"), gram)
    radius = min(radius, opts.max_radius)
    bank = SampleBank.draw(gram, root, 1.0, opts.samples, stream.split("base-0"), opts.workers)
    tilt = np.zeros_like(target)
    value, grad, ess = bank.evaluate(tilt, target)

    step, refreshes, expansions, checks = 1.0, 0, 0, 0
    growth = opts.expansion
    converged, iterations = False, 0
    for iterations in range(1, opts.max_iter + 1):
        if float(np.linalg.norm(grad)) < opts.tol:
            converged = True
            break
        if ess < ESS_REFRESH * bank.size and refreshes < opts.max_refreshes:
            refreshes += 1
            bank = _refresh(gram, root, tilt, opts, stream, refreshes)
            value, grad, ess = bank.evaluate(tilt, target)
            step = 1.0

        eta, accepted = step, False
        for _ in range(50):
            cand, on_boundary = _project(tilt + eta * grad, radius)
            cand_value, cand_grad, cand_ess = bank.evaluate(cand, target)
            if math.isfinite(cand_value) and cand_value >= value + 1e-4 * float(np.sum(grad * (cand - tilt))):
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        moved = float(np.linalg.norm(cand - tilt)) > 1e-12 * (1.0 + float(np.linalg.norm(tilt)))

        checked = False
        if (on_boundary and expansions < opts.max_expansions and radius < opts.max_radius
                and growth >= opts.min_expansion):
            grown = min(radius * growth, opts.max_radius)
            outer = log_mgf(spec, layer, cand * (grown / float(np.linalg.norm(cand))), Q1, opts.samples,
                            stream.split(f"expand-{checks}"), opts.workers, gram)
            checks += 1
            checked = True
            if outer.infinite:
                # halve the growth and retry from the same boundary point
                growth = 1.0 + 0.5 * (growth - 1.0)
                logger.debug("layer %d: tilt radius %.4g diverges, growth now %.4f", layer, grown, growth)
            else:
                radius = grown
                expansions += 1
        if not moved:
            if checked:
                continue
            break

        s, y = cand - tilt, cand_grad - grad
        tilt, value, grad, ess = cand, cand_value, cand_grad, cand_ess
        curvature = -float(np.sum(s * y))
        step = float(np.sum(s * s)) / curvature if curvature > 0 else 2.0 * eta
        step = min(max(step, 1e-8), 1e8)

    norm = float(np.linalg.norm(tilt))
    domain_limited = (not converged and norm >= radius * (1 - 1e-6)
                      and float(np.sum(grad * tilt)) > 0)
    if domain_limited:
        logger.info("layer %d rate is domain-limited at radius %.4g", layer, radius)
    result = RateResult(
        value=max(0.0, value), tilt=tilt.tolist(), iterations=iterations,
        grad_norm=float(np.linalg.norm(grad)), domain_limited=domain_limited,
        converged=converged, radius=radius, refreshes=refreshes, samples=opts.samples,
        seed_path=stream.describe(),
    )
    return result


def rate_chain(spec: ArchSpec, values: Sequence, K1, slopes: Optional[Sequence[float]] = None,
               opts: Optional[RateOptions] = None, stream: Optional[RngStream] = None) -> ChainRateResult:
    """alpha_1 I_1(Q_2|K1) + sum_l alpha_l I_l(Q_{l+1}|Q_l)"""
    slopes = list(slopes if slopes is not None else spec.slopes)
    stream = stream or RngStream(0, ("rate-chain",))
    if len(values) != spec.hidden_layers or len(slopes) != spec.hidden_layers:
        raise ShapeMismatchError(f"expected {spec.hidden_layers} chain values and slopes")
    terms, total, previous = [], 0.0, K1
    for layer, (q, alpha) in enumerate(zip(values, slopes), 1):
        term = rate_layer(spec, layer, q, previous, opts, stream.split(f"layer-{layer}"))
        terms.append(term)
        total = math.inf if math.isinf(term.value) else total + alpha * term.value
        previous = q
    return ChainRateResult(total=total, terms=terms, slopes=slopes,
                           domain_limited=any(t.domain_limited for t in terms))


def _tril_params(q: np.ndarray) -> np.ndarray:
    jitter = 1e-9 * max(1.0, float(np.trace(q)))
    factor = np.linalg.cholesky(q + jitter * np.eye(q.shape[0]))
    return factor[np.tril_indices(q.shape[0])]


def _from_tril(theta: np.ndarray, dim: int) -> np.ndarray:
    factor = np.zeros((dim, dim))
    factor[np.tril_indices(dim)] = theta
    return factor @ factor.T


def rate_marginal(spec: ArchSpec, Q, K1, opts: Optional[RateOptions] = None,
                  grid: Optional[MarginalOptions] = None, stream: Optional[RngStream] = None,
                  layer_rate: Optional[LayerRate] = None, start=None) -> MarginalRateResult:
    """I_{L+1}(Q) = inf over intermediates of the chain rate, for L <= 2"""
    grid = grid or MarginalOptions()
    stream = stream or RngStream(0, ("rate-marginal",))
    L = spec.hidden_layers
    target = _symmetric(as_array(Q))
    k1 = as_array(K1)
    if L > 2:
        raise ValueError("marginal rates are computed for L <= 2 only")

    if layer_rate is None:
        def layer_rate(layer, q_next, q_prev):
            return rate_layer(spec, layer, q_next, q_prev, opts, stream.split(f"layer-{layer}")).value

    if L == 0:
        value = 0.0 if np.allclose(target, k1, atol=1e-12) else math.inf
        return MarginalRateResult(value=value, lower=value, upper=value, intermediates=[],
                                  converged=True, evaluations=0)
    if L == 1:
        value = spec.slopes[0] * layer_rate(1, target, k1)
        return MarginalRateResult(value=value, lower=value, upper=value, intermediates=[],
                                  converged=True, evaluations=1)

    alpha1, alpha2 = spec.slopes
    dim = spec.dim(2)
    if start is None:
        start = limit_kernel_mc(spec, 1, k1, grid.limit_samples, stream.split("start")).kernel.entries
    theta = _tril_params(as_array(start))
    evaluations = 0

    def objective(params):
        nonlocal evaluations
        evaluations += 1
        q2 = _from_tril(params, dim)
        first = layer_rate(1, q2, k1)
        if math.isinf(first):
            return math.inf
        return alpha1 * first + alpha2 * layer_rate(2, target, q2)

    best = objective(theta)
    step = grid.initial_step * max(1.0, float(np.max(np.abs(theta))))
    levels = [best]
    while step >= grid.min_step and evaluations < grid.max_evals:
        improved = True
        while improved and evaluations < grid.max_evals:
            improved = False
            for k in range(theta.size):
                for sign in (1.0, -1.0):
                    trial = theta.copy()
                    trial[k] += sign * step
                    v = objective(trial)
                    if v < best:
                        best, theta, improved = v, trial, True
                        break
        levels.append(best)
        step *= 0.5

    converged = step < grid.min_step
    if not converged:
        logger.warning("marginal rate not converged after %d evaluations, best %.6g", evaluations, best)
    spread = abs(levels[-2] - levels[-1]) if len(levels) > 1 else 0.0
    return MarginalRateResult(value=best, lower=max(0.0, best - spread), upper=best,
                              intermediates=[_from_tril(theta, dim).tolist()],
                              converged=converged, evaluations=evaluations)


def output_rate(spec: ArchSpec, Q, Z, K1, opts: Optional[RateOptions] = None,
                grid: Optional[MarginalOptions] = None, stream: Optional[RngStream] = None,
                layer_rate: Optional[LayerRate] = None) -> OutputRateResult:
    """J(Q, Z) = 1/2 sum_c ||Z_c||_Q^2 + I_{L+1}(Q)"""
    q = as_array(Q)
    z = np.asarray(Z, dtype=float).ravel()
    dim = q.shape[0]
    if z.size != spec.output_channels * dim:
        raise ShapeMismatchError(f"Z has length {z.size}, expected C*D = {spec.output_channels * dim}")
    norm_part = 0.5 * sum(generalized_q_norm(q, block) for block in z.reshape(spec.output_channels, dim))
    if math.isinf(norm_part):
        return OutputRateResult(value=math.inf, norm_part=math.inf, rate_part=math.nan, infinite=True)
    rate_part = rate_marginal(spec, q, K1, opts, grid, stream, layer_rate).value
    value = norm_part + rate_part
    return OutputRateResult(value=value, norm_part=norm_part, rate_part=rate_part,
                            infinite=math.isinf(value))


def output_rate_infimum(spec: ArchSpec, Z, K1, opts: Optional[RateOptions] = None,
                        grid: Optional[MarginalOptions] = None, stream: Optional[RngStream] = None,
                        layer_rate: Optional[LayerRate] = None,
                        q_range=(1e-3, 1e3), points: int = 61) -> InfimumResult:
    """inf over scalar q > 0 of J(q, Z), for networks with D_{L+1} = 1"""
    if spec.dim(spec.hidden_layers + 1) != 1:
        raise ShapeMismatchError("output rate infimum is computed for scalar outputs only")
    evaluations = 0

    def j(log_q):
        nonlocal evaluations
        evaluations += 1
        return output_rate(spec, [[math.exp(log_q)]], Z, K1, opts, grid, stream, layer_rate).value

    grid_points = np.linspace(math.log(q_range[0]), math.log(q_range[1]), points)
    values = [j(x) for x in grid_points]
    best = int(np.argmin(values))
    lo = grid_points[max(best - 1, 0)]
    hi = grid_points[min(best + 1, points - 1)]

    # refine between the grid neighbours of the best point
    refined = minimize_scalar(j, bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
    if math.isfinite(refined.fun) and refined.fun <= values[best]:
        value, x = float(refined.fun), float(refined.x)
    else:
        value, x = float(values[best]), float(grid_points[best])
    return InfimumResult(value=value, argmin=math.exp(x), evaluations=evaluations)


def empirical_rate(spec: ArchSpec, K1, event: EventSpec, n_list: Sequence[int], replicas: int,
                   stream: RngStream, workers: int = 1, confidence: float = 0.99) -> pd.DataFrame:
    """-(1/n) log P(K^(level,n) in event) by direct simulation, with Wilson intervals"""
    k1 = K1 if isinstance(K1, PsdMatrix) else PsdMatrix(K1, n_inputs=spec.n_inputs)
    if not 2 <= event.level <= spec.hidden_layers + 1:
        raise ShapeMismatchError(f"event level {event.level} outside 2..{spec.hidden_layers + 1}")
    rows = []
    for n in n_list:
        path = stream.split(f"n-{n}")
        ensemble = simulate_chain_replicas(spec, k1, n, replicas, path, workers)
        hits = int(np.sum(event.contains(event.values(ensemble.level(event.level)))))
        ci = binomtest(hits, replicas).proportion_ci(confidence_level=confidence, method="wilson")
        p_hat = hits / replicas
        rows.append({
            "n": n,
            "channels": channel_profile(spec, n)[event.level - 2],
            "replicas": replicas,
            "hits": hits,
            "p_hat": p_hat,
            "rate": -math.log(p_hat) / n if hits else math.inf,
            "rate_ci_low": -math.log(ci.high) / n if ci.high > 0 else math.inf,
            "rate_ci_high": -math.log(ci.low) / n if ci.low > 0 else math.inf,
            "undersampled": hits < 10,
            "seed_path": path.describe(),
        })
        if hits < 10:
            logger.warning("n=%d: only %d hits in %d replicas", n, hits, replicas)
    return pd.DataFrame(rows)

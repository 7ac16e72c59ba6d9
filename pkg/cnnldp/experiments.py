"""
Experiment harness
ExperimentConfig, the built-in presets and run(), which fronts one module
operation or acceptance check per command and writes result files,
manifest.json and summary.txt into the artifact directory
"""

import logging
import math
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from . import __version__
from .arch import ActivationKind, Activation, ArchSpec, ExtractorKind, LayerSpec, channel_profile, validate_arch
from .artifacts import (Manifest, chain_from_dict, chain_table, chain_to_dict, dump_yaml, load_yaml, read_json,
                        read_tensor_csv, write_json, write_summary, write_table)
from .checks import lln_scaling, mgf_convexity, output_ks, sampler_equivalence
from .errors import ConfigError, LabError, PresetNotFoundError, ShapeMismatchError
from .gauss import PsdMatrix, RngStream
from .kernel import InputBatch, KernelChain, input_kernel, limit_chain, simulate_chain, simulate_chain_replicas
from .ldp import (EventSpec, RateOptions, chi_square_tail_rate, empirical_rate, rate_chain, rate_layer,
                  scalar_chi_square_rate)
from .posterior import Observations, laziness_profile, posterior_expectation, posterior_weights, psi
from .settings import LabSettings, get_settings

logger = logging.getLogger(__name__)

Tensor = List[List[List[float]]]


class LimitParams(BaseModel):
    samples: int = 100_000
    antithetic: bool = False
    # limit_chain.json from an earlier limit run, reused instead of recomputing
    chain_file: Optional[Path] = None


class CltParams(BaseModel):
    lln_n_list: List[int] = Field(default_factory=lambda: [64, 256, 1024])
    lln_replicas: int = 500
    factor_range: Tuple[float, float] = (1.5, 2.7)
    n: int = 4096
    replicas: int = 2000
    level: float = 0.01
    # both samplers are exact at every n, so the comparison may run narrower
    equivalence_n: int = 256
    equivalence_replicas: int = 2000
    permutations: int = 199


class RateParams(BaseModel):
    layer: int = 1
    q_list: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.5, 2.0, 4.0])
    options: RateOptions = Field(default_factory=RateOptions)
    tolerance: float = 0.02
    convexity_pairs: int = 100
    convexity_samples: int = 20_000
    chain_tolerance: float = 2e-3


class LdpParams(BaseModel):
    event: EventSpec = Field(default_factory=lambda: EventSpec(threshold=1.5))
    # threshold as a multiple of the limit value of the event statistic
    relative: bool = False
    n_list: List[int] = Field(default_factory=lambda: [20, 50, 100])
    replicas: int = 100_000
    confidence: float = 0.99


class PosteriorParams(BaseModel):
    beta: float = 1.0
    observations: Optional[Tensor] = None
    observations_file: Optional[Path] = None
    n_list: List[int] = Field(default_factory=lambda: [64, 256, 1024])
    replicas: int = 2000
    event: Optional[EventSpec] = None


class ExperimentConfig(BaseModel):
    """One architecture plus the parameters of every command"""

    name: str
    arch: ArchSpec
    seed: int = 0
    output_dir: Path = Path("runs")
    workers: int = 1
    inputs: Optional[Tensor] = None
    inputs_file: Optional[Path] = None
    n_list: List[int] = Field(default_factory=lambda: [64, 256, 1024])
    growth_probe: bool = True
    limit: LimitParams = Field(default_factory=LimitParams)
    clt: CltParams = Field(default_factory=CltParams)
    rate: RateParams = Field(default_factory=RateParams)
    ldp: LdpParams = Field(default_factory=LdpParams)
    posterior: PosteriorParams = Field(default_factory=PosteriorParams)

    @model_validator(mode="after")
    def _check_references(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.inputs is not None and self.inputs_file is not None:
            raise ValueError("give inputs or inputs_file, not both")
        for path in (self.inputs_file, self.posterior.observations_file, self.limit.chain_file):
            if path is not None and not Path(path).exists():
                raise ValueError(f"referenced file {path} does not exist")
        return self


class RunOutcome(BaseModel):
    status: int
    directory: Optional[Path] = None


def load_config(path: Path) -> ExperimentConfig:
    """Parse a YAML experiment file; relative file references resolve against its directory"""
    path = Path(path)
    data = load_yaml(path)
    base = path.parent
    if data.get("inputs_file"):
        data["inputs_file"] = str(base / data["inputs_file"])
    observations = (data.get("posterior") or {}).get("observations_file")
    if observations:
        data["posterior"]["observations_file"] = str(base / observations)
    chain_file = (data.get("limit") or {}).get("chain_file")
    if chain_file:
        data["limit"]["chain_file"] = str(base / chain_file)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e


def pattern_inputs(spec: ArchSpec) -> np.ndarray:
    """Deterministic C0 x N0 x P inputs used when a config names none"""
    c, i, mu = np.indices((spec.input_channels, spec.spatial_dims[0], spec.n_inputs))
    return np.cos(2 * np.pi * i * (mu + 1) / spec.spatial_dims[0] + 0.7 * c + 0.3 * mu)


def pattern_observations(spec: ArchSpec, scale: float = 0.1) -> Tensor:
    """Small deterministic C_out x N_(L+1) x P targets for presets without data"""
    c, i, mu = np.indices((spec.output_channels, spec.spatial_dims[-1], spec.n_inputs))
    return (scale * np.sin(2 * np.pi * (i + 1) / spec.spatial_dims[-1] + 0.5 * mu + c)).tolist()


def _fcnn_scalar_identity() -> ExperimentConfig:
    arch = ArchSpec(
        name="fcnn-scalar-identity", hidden_layers=1, spatial_dims=[1, 1, 1], slopes=[1.0],
        layers=[LayerSpec(extractor=ExtractorKind.FULLY_CONNECTED) for _ in range(2)],
        activation=Activation(kind=ActivationKind.IDENTITY),
    )
    return ExperimentConfig(
        name=arch.name, arch=arch, inputs=[[[1.0]]],
        ldp=LdpParams(event=EventSpec(level=2, threshold=1.5), n_list=[20, 50, 100], replicas=100_000),
        posterior=PosteriorParams(beta=1.0, observations=[[[2.0]]]),
    )


def _circular1d_relu() -> ExperimentConfig:
    arch = ArchSpec(
        name="circular1d-relu", hidden_layers=2, spatial_dims=[6, 6, 6, 6], input_channels=2,
        n_inputs=2, slopes=[1.0, 1.0],
        layers=[LayerSpec(extractor=ExtractorKind.CIRCULAR_1D, halfwidth=1) for _ in range(3)],
        activation=Activation(kind=ActivationKind.RELU),
    )
    return ExperimentConfig(
        name=arch.name, arch=arch, rate=RateParams(q_list=[0.8, 1.25]),
        ldp=LdpParams(event=EventSpec(level=2, threshold=1.5), relative=True,
                      n_list=[8, 16, 32], replicas=20_000),
        posterior=PosteriorParams(observations=pattern_observations(arch)),
    )


def _pool2_tanh() -> ExperimentConfig:
    arch = ArchSpec(
        name="pool2-tanh", hidden_layers=2, spatial_dims=[8, 8, 4, 4], n_inputs=2, slopes=[1.0, 1.0],
        layers=[
            LayerSpec(extractor=ExtractorKind.CIRCULAR_1D, halfwidth=1),
            LayerSpec(extractor=ExtractorKind.CIRCULAR_1D_POOL2),
            LayerSpec(extractor=ExtractorKind.CIRCULAR_1D, halfwidth=1),
        ],
        activation=Activation(kind=ActivationKind.TANH),
    )
    return ExperimentConfig(
        name=arch.name, arch=arch, rate=RateParams(q_list=[0.8, 1.25]),
        ldp=LdpParams(event=EventSpec(level=2, threshold=1.5), relative=True,
                      n_list=[8, 16, 32], replicas=20_000),
        posterior=PosteriorParams(observations=pattern_observations(arch)),
    )


def _zeropad2d_relu() -> ExperimentConfig:
    arch = ArchSpec(
        name="zeropad2d-relu", hidden_layers=1, spatial_dims=[9, 9, 9], slopes=[1.0],
        layers=[LayerSpec(extractor=ExtractorKind.ZERO_PAD_2D, grid_side=2) for _ in range(2)],
        activation=Activation(kind=ActivationKind.RELU),
    )
    return ExperimentConfig(
        name=arch.name, arch=arch, rate=RateParams(q_list=[0.8, 1.25]),
        ldp=LdpParams(event=EventSpec(level=2, threshold=1.5), relative=True,
                      n_list=[8, 16, 32], replicas=20_000),
        posterior=PosteriorParams(observations=pattern_observations(arch)),
    )


PRESETS: Dict[str, Callable[[], ExperimentConfig]] = {
    "fcnn-scalar-identity": _fcnn_scalar_identity,
    "circular1d-relu": _circular1d_relu,
    "pool2-tanh": _pool2_tanh,
    "zeropad2d-relu": _zeropad2d_relu,
}


def preset(name: str) -> ExperimentConfig:
    """Complete config exercising one example architecture end to end"""
    try:
        builder = PRESETS[name]
    except KeyError:
        raise PresetNotFoundError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None
    return builder()


def scalar_identity(spec: ArchSpec) -> bool:
    """Every chain element is a scaled chi-square mean"""
    return (spec.activation.kind == ActivationKind.IDENTITY and spec.n_inputs == 1
            and all(d == 1 for d in spec.spatial_dims))


class RunContext:
    """State shared by the command handlers of one run"""

    def __init__(self, config: ExperimentConfig, command: str, directory: Path, workers: int):
        self.config = config
        self.spec = config.arch
        self.command = command
        self.directory = directory
        self.workers = workers
        self.root = RngStream(config.seed)
        self.manifest = Manifest(command=command, seed=config.seed, version=__version__,
                                 config=config.model_dump(mode="json"), workers=workers)
        self.lines: List[str] = []
        self.batch: Optional[InputBatch] = None
        self.K1: Optional[PsdMatrix] = None
        self._limit: Optional[KernelChain] = None

    def say(self, line: str = ""):
        print(line)
        self.lines.append(line)

    def table(self, name: str, table: pd.DataFrame, samples: int, stream: RngStream):
        write_table(self.directory / name, table)
        self.manifest.record(name, name, samples, stream.describe())

    def json(self, name: str, payload, samples: int, stream: RngStream, label: Optional[str] = None):
        write_json(self.directory / name, payload)
        self.manifest.record(label or name, name, samples, stream.describe())

    def prepare_inputs(self):
        """Input batch and K^(1); shape faults are configuration errors"""
        cfg = self.config
        if cfg.inputs_file is not None:
            values = read_tensor_csv(cfg.inputs_file)
        elif cfg.inputs is not None:
            values = np.array(cfg.inputs, dtype=float)
        else:
            values = pattern_inputs(self.spec)
        try:
            self.batch = InputBatch(values)
            self.K1 = input_kernel(self.spec, self.batch)
        except (ShapeMismatchError, ValueError) as e:
            raise ConfigError(f"inputs do not fit the architecture: {e}") from e

    def limit_chain(self) -> KernelChain:
        if self._limit is None and self.config.limit.chain_file is not None:
            self._limit = load_limit_chain(self.config.limit.chain_file, self.spec, self.K1)
        if self._limit is None:
            stream = self.root.split("limit")
            self._limit = limit_chain(self.spec, self.K1, self.config.limit.samples, stream,
                                      antithetic=self.config.limit.antithetic, workers=self.workers)
        return self._limit


def _validate(ctx: RunContext) -> bool:
    stream = ctx.root.split("growth")
    report = validate_arch(ctx.spec, stream if ctx.config.growth_probe else None)
    ctx.json("validate.json", {"passed": report.passed, "violations": report.violations,
                               "summary": report.summary(), "growth": report.growth}, 64, stream)
    ctx.say(f"Architecture {ctx.spec.name}: {report.summary()}")
    for g in report.growth:
        ctx.say(f"  layer {g.layer}: growth order {g.order:.3f}")
    return report.passed


def _chain_sim(ctx: RunContext) -> bool:
    payload, tables = {}, []
    stream = ctx.root.split("chain")
    for n in ctx.config.n_list:
        path = stream.split(f"n-{n}")
        chain = simulate_chain(ctx.spec, ctx.K1, n, path, ctx.workers)
        channels = channel_profile(ctx.spec, n)
        payload[str(n)] = dict(chain_to_dict(chain), channels=channels, seed_path=path.describe())
        tables.append(chain_table(chain, n=n))
        ctx.manifest.record(f"chain(n={n})", "chain.json", sum(channels), path.describe())
        ctx.say(f"  n={n}: channels {channels}, final trace {np.trace(chain.final.entries):.6g}")
    write_json(ctx.directory / "chain.json", payload)
    ctx.table("chain.csv", pd.concat(tables, ignore_index=True), sum(ctx.config.n_list), stream)
    return True


def _limit(ctx: RunContext) -> bool:
    chain = ctx.limit_chain()
    stream = ctx.root.split("limit")
    ctx.json("limit_chain.json", chain_to_dict(chain), ctx.config.limit.samples, stream)
    ctx.table("limit_chain.csv", chain_table(chain), ctx.config.limit.samples, stream)
    for level, (k, err) in enumerate(zip(chain.kernels, chain.stderrs), 1):
        ctx.say(f"  K^({level}): dim {k.dim}, trace {np.trace(k.entries):.6g}, max stderr {err.max():.2e}")
    return True


def _clt_check(ctx: RunContext) -> bool:
    cfg = ctx.config.clt
    final = ctx.limit_chain().final
    lln_stream = ctx.root.split("lln")
    lln = lln_scaling(ctx.spec, ctx.K1, final, cfg.lln_n_list, cfg.lln_replicas, lln_stream, ctx.workers)
    lo, hi = cfg.factor_range
    lln["in_range"] = lln["shrink_factor"].isna() | lln["shrink_factor"].between(lo, hi)
    ctx.table("lln.csv", lln, cfg.lln_replicas, lln_stream)

    ks_stream = ctx.root.split("ks")
    ks = output_ks(ctx.spec, ctx.K1, final, cfg.n, cfg.replicas, ks_stream, cfg.level, ctx.workers)
    ctx.table("clt.csv", ks, cfg.replicas, ks_stream)

    eq_stream = ctx.root.split("equivalence")
    equivalence = sampler_equivalence(ctx.spec, ctx.batch, ctx.K1, cfg.equivalence_n, cfg.equivalence_replicas,
                                      eq_stream, cfg.permutations, workers=ctx.workers)
    equivalence["passed"] = equivalence["p_value"] >= cfg.level
    ctx.json("equivalence.json", equivalence, cfg.equivalence_replicas, eq_stream)

    lln_ok = bool(lln["in_range"].all())
    ks_ok = bool(ks["passed"].all())
    ctx.say(f"  LLN shrink factors: {lln['shrink_factor'].dropna().round(3).tolist()} {'✅' if lln_ok else '❌'}")
    ctx.say(f"  KS at n={cfg.n}: min p {ks['p_value'].min():.4f} {'✅' if ks_ok else '❌'}")
    ctx.say(f"  energy distance: p {equivalence['p_value']:.4f} {'✅' if equivalence['passed'] else '❌'}")
    return lln_ok and ks_ok and equivalence["passed"]


def _rate(ctx: RunContext) -> bool:
    cfg = ctx.config.rate
    spec = ctx.spec
    if not 1 <= cfg.layer <= spec.hidden_layers:
        raise ConfigError(f"rate layer {cfg.layer} outside 1..{spec.hidden_layers}")
    limit = ctx.limit_chain()
    q1, base = limit.kernels[cfg.layer - 1], limit.kernels[cfg.layer]
    opts = cfg.options.model_copy(update={"workers": ctx.workers})
    stream = ctx.root.split("rate")
    rows, results = [], []
    for j, q in enumerate(cfg.q_list):
        target = q * base.entries
        result = rate_layer(spec, cfg.layer, target, q1, opts, stream.split(j))
        oracle = math.nan
        if scalar_identity(spec):
            ratio = target[0, 0] * spec.layers[cfg.layer].precision / q1.entries[0, 0]
            oracle = scalar_chi_square_rate(ratio)
        error = abs(result.value - oracle) if math.isfinite(oracle) else math.nan
        passed = result.value >= 0 and (math.isnan(error) or error <= cfg.tolerance * max(1.0, oracle))
        rows.append({"q": q, "value": result.value, "oracle": oracle, "abs_error": error,
                     "domain_limited": result.domain_limited, "converged": result.converged,
                     "iterations": result.iterations, "grad_norm": result.grad_norm,
                     "radius": result.radius, "refreshes": result.refreshes,
                     "samples": result.samples, "passed": passed, "seed_path": result.seed_path})
        results.append(result)
        flag = " (lower bound, domain-limited)" if result.domain_limited else ""
        ctx.say(f"  q={q}: I={result.value:.5f} oracle={oracle:.5f}{flag} {'✅' if passed else '❌'}")
    table = pd.DataFrame(rows)
    ctx.table("rates.csv", table, opts.samples, stream)

    conv_stream = ctx.root.split("convexity")
    convexity = mgf_convexity(spec, cfg.layer, q1, cfg.convexity_pairs, cfg.convexity_samples,
                              conv_stream, opts.probe_samples)
    convex_ok = bool(convexity["passed"].all()) if len(convexity) else True
    ctx.json("rates.json", {"layer": cfg.layer, "rates": results,
                            "convexity": convexity.to_dict(orient="records")},
             cfg.convexity_samples, conv_stream, label="convexity")
    ctx.say(f"  MGF midpoint convexity: {int(convexity['passed'].sum()) if len(convexity) else 0}"
            f"/{len(convexity)} pairs {'✅' if convex_ok else '❌'}")
    return bool(table["passed"].all()) and convex_ok


def _rate_chain(ctx: RunContext) -> bool:
    cfg = ctx.config.rate
    limit = ctx.limit_chain()
    stream = ctx.root.split("rate-chain")
    opts = cfg.options.model_copy(update={"workers": ctx.workers})
    result = rate_chain(ctx.spec, limit.kernels[1:], ctx.K1, opts=opts, stream=stream)
    bound = ctx.spec.hidden_layers * cfg.chain_tolerance
    passed = all(t.value >= 0 for t in result.terms) and result.total <= bound
    ctx.json("rate_chain.json", dict(result.model_dump(), bound=bound, passed=passed), opts.samples, stream)
    ctx.say(f"  chain rate at the limit chain: {result.total:.3e} (bound {bound:.1e}) {'✅' if passed else '❌'}")
    return passed


def _ldp_verify(ctx: RunContext) -> bool:
    cfg = ctx.config.ldp
    spec = ctx.spec
    event = cfg.event
    if cfg.relative:
        reference = ctx.limit_chain().kernels[event.level - 1].entries
        event = event.model_copy(update={"threshold": event.threshold * float(event.values(reference[None])[0])})
    stream = ctx.root.split("ldp")
    table = empirical_rate(spec, ctx.K1, event, cfg.n_list, cfg.replicas, stream, ctx.workers, cfg.confidence)
    passed = True
    if scalar_identity(spec) and event.level == 2 and event.statistic == "entry":
        q1 = ctx.K1.entries[0, 0] / spec.layers[1].precision
        alpha = spec.slopes[0]
        table["exact_rate"] = [chi_square_tail_rate(n, event.threshold, alpha, q1, event.direction)
                               for n in table["n"]]
        ratio = event.threshold / q1
        toward_mean = ratio > 1 if event.direction == "ge" else ratio < 1
        table["rate_function"] = alpha * scalar_chi_square_rate(ratio) if toward_mean else 0.0
        table["covered"] = (table["rate_ci_low"] <= table["exact_rate"]) & (table["exact_rate"] <= table["rate_ci_high"])
        gaps = (table["rate"] - table["rate_function"]).abs().to_numpy()
        shrinking = bool(np.all(np.diff(gaps) < 0))
        passed = bool(table["covered"].all()) and shrinking
        ctx.say(f"  exact-law coverage: {int(table['covered'].sum())}/{len(table)}, "
                f"gap to I shrinking: {shrinking} {'✅' if passed else '❌'}")
    for row in table.itertuples():
        ctx.say(f"  n={row.n}: hits {row.hits}/{row.replicas}, rate {row.rate:.5f} "
                f"[{row.rate_ci_low:.5f}, {row.rate_ci_high:.5f}]")
    ctx.table("empirical_rate.csv", table, cfg.replicas, stream)
    return passed


def _posterior(ctx: RunContext) -> bool:
    cfg = ctx.config.posterior
    spec = ctx.spec
    if cfg.observations_file is not None:
        obs = Observations.from_csv(cfg.observations_file, cfg.beta)
    elif cfg.observations is not None:
        obs = Observations(cfg.observations, cfg.beta)
    else:
        raise ConfigError("posterior needs observations or observations_file")
    try:
        obs.check(spec)
    except ShapeMismatchError as e:
        raise ConfigError(f"observations do not fit the architecture: {e}") from e
    final = ctx.limit_chain().final
    event = cfg.event or EventSpec(level=spec.hidden_layers + 1, statistic="frobenius",
                                   threshold=float(np.linalg.norm(final.entries)))
    stream = ctx.root.split("laziness")
    table = laziness_profile(spec, ctx.K1, obs, event, cfg.n_list, cfg.replicas, stream, ctx.workers)
    ratios = table["log_ratio_per_n"].to_numpy()
    finite = ratios[np.isfinite(ratios)]
    decreasing = finite.size >= 2 and bool(np.all(np.diff(finite) < 0))
    table["within_bound"] = table["log_ratio_per_n"] <= table["bound"]
    ctx.table("laziness.csv", table, cfg.replicas, stream)

    n = max(cfg.n_list)
    path = stream.split(f"n-{n}")
    finals = simulate_chain_replicas(spec, ctx.K1, n, cfg.replicas, path, ctx.workers).final()
    weights = posterior_weights(finals, obs)
    trace = posterior_expectation(np.trace, finals, weights)
    payload = {
        "beta": obs.beta,
        "channels": obs.channels,
        "psi_at_limit": psi(final, obs),
        "event": event,
        "n": n,
        "prior_trace": float(np.mean(np.trace(finals, axis1=1, axis2=2))),
        "posterior_trace": trace,
        "laziness_decreasing": decreasing,
    }
    ctx.json("posterior.json", payload, cfg.replicas, path)
    passed = decreasing and bool(table["within_bound"].dropna().all())
    ctx.say(f"  Psi at the limit kernel: {payload['psi_at_limit']:.6f}")
    ctx.say(f"  posterior trace {trace.estimate:.5f} (ESS {trace.ess:.0f}) vs prior {payload['prior_trace']:.5f}")
    ctx.say(f"  laziness ratio per n: {np.round(finite, 6).tolist()} {'✅' if passed else '❌'}")
    return passed


COMMANDS: Dict[str, Callable[[RunContext], bool]] = {
    "validate": _validate,
    "chain-sim": _chain_sim,
    "limit": _limit,
    "clt-check": _clt_check,
    "rate": _rate,
    "rate-chain": _rate_chain,
    "ldp-verify": _ldp_verify,
    "posterior": _posterior,
}


def load_limit_chain(path: Path, spec: ArchSpec, K1: PsdMatrix) -> KernelChain:
    """limit_chain.json of an earlier run; it must belong to this architecture and these inputs"""
    try:
        chain = chain_from_dict(read_json(path))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path} is not a saved chain: {e}") from e
    expected = [spec.dim(level) for level in range(1, spec.hidden_layers + 2)]
    if chain.dims != expected:
        raise ConfigError(f"{path} has chain dimensions {chain.dims}, the architecture needs {expected}")
    if not np.allclose(chain.kernels[0].entries, K1.entries, rtol=1e-12, atol=0.0):
        raise ConfigError(f"{path} was computed for other inputs")
    if chain.stderrs is None:
        chain.stderrs = [np.zeros_like(k.entries) for k in chain.kernels]
    logger.info("reusing limit chain %s (%s)", path, chain.provenance)
    return chain


def _absolute_paths(config: ExperimentConfig) -> ExperimentConfig:
    """Copy whose file references survive being reloaded from another directory"""

    def absolute(p):
        return None if p is None else Path(p).resolve()

    return config.model_copy(update={
        "inputs_file": absolute(config.inputs_file),
        "limit": config.limit.model_copy(update={"chain_file": absolute(config.limit.chain_file)}),
        "posterior": config.posterior.model_copy(
            update={"observations_file": absolute(config.posterior.observations_file)}),
    })


def resolve_output_dir(config: ExperimentConfig, command: str, out: Optional[Path] = None,
                       settings: Optional[LabSettings] = None) -> Path:
    """--out wins, then CNNLDP_OUTPUT_ROOT, then the config's output_dir"""
    if out is not None:
        return Path(out)
    settings = settings or get_settings()
    base = settings.output_root if settings.output_root is not None else config.output_dir
    return Path(base) / config.name / command


def resolve_workers(config: ExperimentConfig, workers: Optional[int] = None,
                    settings: Optional[LabSettings] = None) -> int:
    if workers is not None:
        return max(1, workers)
    settings = settings or get_settings()
    if "workers" in settings.model_fields_set:
        return max(1, settings.workers)
    return max(1, config.workers)


def _dispatch(ctx: RunContext) -> int:
    if ctx.command == "validate":
        return 0 if _validate(ctx) else 1
    report = validate_arch(ctx.spec)
    if not report.passed:
        write_json(ctx.directory / "validate.json", report)
        ctx.say(f"❌ Invalid architecture {ctx.spec.name}:\n{report.summary()}")
        return 1
    ctx.prepare_inputs()
    return 0 if COMMANDS[ctx.command](ctx) else 1


def run(command: str, config: ExperimentConfig, out: Optional[Path] = None,
        workers: Optional[int] = None) -> RunOutcome:
    """Run one command; 0 success, 1 constraint violation, 2 configuration or I/O failure"""
    if command not in COMMANDS:
        logger.error("unknown command %r; choose one of: %s", command, ", ".join(COMMANDS))
        return RunOutcome(status=2)
    settings = get_settings()
    directory = resolve_output_dir(config, command, out, settings)
    ctx = RunContext(config, command, directory, resolve_workers(config, workers, settings))
    try:
        directory.mkdir(parents=True, exist_ok=True)
        dump_yaml(directory / "config.yaml", _absolute_paths(config))
    except OSError as e:
        logger.error("cannot write to artifact directory %s: %s", directory, e)
        return RunOutcome(status=2, directory=directory)

    ctx.say("=" * 70)
    ctx.say(f"🔄 {command} · {config.name} · seed {config.seed}")
    ctx.say("=" * 70)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        status = _dispatch(ctx)
    except (ConfigError, OSError) as e:
        logger.error("%s failed: %s", command, e)
        ctx.say(f"❌ {e}")
        status = 2
    except LabError as e:
        logger.error("%s failed: %s", command, e)
        ctx.say(f"❌ {e}")
        status = 1
    elapsed = time.perf_counter() - t0

    ctx.say("")
    ctx.say(f"{'✅' if status == 0 else '❌'} {command} finished with status {status}")
    ctx.manifest.status = status
    ctx.manifest.started_at = started.isoformat()
    ctx.manifest.finished_at = datetime.now(timezone.utc).isoformat()
    ctx.manifest.wall_time_s = elapsed
    write_json(directory / "manifest.json", ctx.manifest)
    write_summary(directory / "summary.txt", ctx.lines)
    return RunOutcome(status=status, directory=directory)

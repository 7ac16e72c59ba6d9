"""
Network architectures and patch extractors
Covers circular 1D convolution, 2-pooling followed by convolution,
zero-padded 3x3 2D convolution and the fully connected case
"""

import logging
import math
from enum import Enum
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import InvalidSiteError, ShapeMismatchError
from .gauss import RngStream

logger = logging.getLogger(__name__)

Offset = Union[int, Tuple[int, int]]

# document order of the 3x3 receptive field
ZERO_PAD_2D_OFFSETS: List[Tuple[int, int]] = [
    (0, 0), (1, 0), (-1, 0), (0, 1), (1, 1), (1, -1), (-1, 1), (-1, -1), (0, -1),
]

DEFAULT_PROBE_RADII = tuple(np.geomspace(1e2, 1e5, 7).tolist())


class ExtractorKind(str, Enum):
    CIRCULAR_1D = "circular1d"
    CIRCULAR_1D_POOL2 = "circular1d_pool2"
    ZERO_PAD_2D = "zeropad2d_3x3"
    FULLY_CONNECTED = "fully_connected"


class ActivationKind(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    TABLE = "table"


class ActivationTable(BaseModel):
    """Piecewise-linear activation on a strictly increasing grid"""

    xs: List[float]
    ys: List[float]
    extension: Literal["constant", "linear", "power"] = "linear"
    exponent: float = 1.0

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        y = np.interp(x, xs, ys)
        below = x < xs[0]
        above = x > xs[-1]
        if self.extension == "linear":
            left = (ys[1] - ys[0]) / (xs[1] - xs[0])
            right = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            y = np.where(below, ys[0] + left * (x - xs[0]), y)
            y = np.where(above, ys[-1] + right * (x - xs[-1]), y)
        elif self.extension == "power":
            lo = abs(xs[0]) or 1.0
            hi = abs(xs[-1]) or 1.0
            y = np.where(below, ys[0] * (np.abs(x) / lo) ** self.exponent, y)
            y = np.where(above, ys[-1] * (np.abs(x) / hi) ** self.exponent, y)
        return y

    def problems(self) -> List[str]:
        found = []
        if len(self.xs) < 2 or len(self.xs) != len(self.ys):
            found.append("activation table needs >= 2 points and equal xs/ys lengths")
            return found
        if np.any(np.diff(self.xs) <= 0):
            found.append("activation table xs must be strictly increasing")
        if not np.all(np.isfinite(self.xs + self.ys)):
            found.append("activation table has non-finite entries")
        if self.extension == "power" and (self.xs[0] == 0 or self.xs[-1] == 0):
            found.append("power extension needs nonzero end abscissae")
        return found


class Activation(BaseModel):
    kind: ActivationKind = ActivationKind.IDENTITY
    table: Optional[ActivationTable] = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == ActivationKind.IDENTITY:
            return x
        if self.kind == ActivationKind.RELU:
            return np.maximum(x, 0.0)
        if self.kind == ActivationKind.TANH:
            return np.tanh(x)
        return self.table.evaluate(x)

    def vanishes_at_zero(self) -> bool:
        return float(self(np.zeros(1))[0]) == 0.0


class MaskSet(BaseModel):
    """Receptive-field offsets in fixed order"""

    elements: List[Offset]
    size: int


class LayerSpec(BaseModel):
    """Extractor and weight precision for the step l -> l+1"""

    extractor: ExtractorKind
    precision: float = 1.0
    halfwidth: Optional[int] = None
    grid_side: Optional[int] = None
    mask: Optional[MaskSet] = None


class ArchSpec(BaseModel):
    """Declarative CNN: L hidden layers, spatial dims N_0..N_{L+1}, masks and precisions"""

    name: str = "custom"
    hidden_layers: int
    spatial_dims: List[int]
    input_channels: int = 1
    output_channels: int = 1
    n_inputs: int = 1
    slopes: List[float] = Field(default_factory=list)
    layers: List[LayerSpec]
    activation: Activation = Field(default_factory=Activation)
    first_layer_mask: Literal["layer0", "layer1"] = "layer0"
    growth_order_limit: float = 2.0
    growth_tolerance: float = 0.1

    def mask(self, layer: int) -> MaskSet:
        return default_mask(self.layers[layer])

    def mask_size(self, layer: int) -> int:
        return len(self.mask(layer).elements)

    def dim(self, level: int) -> int:
        """D_l = N_l * P for the chain element K^(l)"""
        return self.spatial_dims[level] * self.n_inputs


class GrowthReport(BaseModel):
    layer: int
    order: float
    flagged: bool
    radii: List[float]
    peaks: List[float]


class ArchReport(BaseModel):
    passed: bool
    violations: List[str] = Field(default_factory=list)
    # one per layer when the growth probe ran
    growth: List[GrowthReport] = Field(default_factory=list)

    def summary(self) -> str:
        if self.passed:
            return "pass"
        return "\n".join(f"- {v}" for v in self.violations)


def default_mask(layer: LayerSpec) -> MaskSet:
    """Explicit mask if given, else the extractor's standard one"""
    if layer.mask is not None:
        return layer.mask
    if layer.extractor == ExtractorKind.CIRCULAR_1D:
        if layer.halfwidth is None:
            raise ShapeMismatchError("circular1d layer needs a halfwidth or an explicit mask")
        offsets = list(range(-layer.halfwidth, layer.halfwidth + 1))
        return MaskSet(elements=offsets, size=len(offsets))
    if layer.extractor == ExtractorKind.CIRCULAR_1D_POOL2:
        return MaskSet(elements=[-1, 0, 1], size=3)
    if layer.extractor == ExtractorKind.ZERO_PAD_2D:
        return MaskSet(elements=list(ZERO_PAD_2D_OFFSETS), size=9)
    return MaskSet(elements=[0], size=1)


def channel_profile(spec: ArchSpec, n: int) -> List[int]:
    """[C_1(n), ..., C_L(n)] with C_l(n) = max(1, round(alpha_l * n)), halves rounded up"""
    return [max(1, int(math.floor(alpha * n + 0.5))) for alpha in spec.slopes]


def extractor_operator(spec: ArchSpec, layer: int) -> np.ndarray:
    """Linear patch operator of layer l as a dense (N_{l+1}, M_l, N_l) tensor"""
    n_in = spec.spatial_dims[layer]
    n_out = spec.spatial_dims[layer + 1]
    layer_spec = spec.layers[layer]
    offsets = default_mask(layer_spec).elements
    op = np.zeros((n_out, len(offsets), n_in))

    if layer_spec.extractor == ExtractorKind.CIRCULAR_1D:
        for i in range(n_out):
            for m, o in enumerate(offsets):
                op[i, m, (i + o) % n_in] = 1.0

    elif layer_spec.extractor == ExtractorKind.CIRCULAR_1D_POOL2:
        if n_in != 2 * n_out:
            raise ShapeMismatchError(f"pooling needs N_l = 2N_(l+1), got {n_in} and {n_out}")
        for i in range(n_out):
            for m, o in enumerate(offsets):
                j = (i + o) % n_out
                op[i, m, 2 * j] = 0.5
                op[i, m, 2 * j + 1] = 0.5

    elif layer_spec.extractor == ExtractorKind.ZERO_PAD_2D:
        side = _grid_side(layer_spec)
        if n_in != side * side or n_out != n_in:
            raise ShapeMismatchError(f"2D grid of side {side} does not match N={n_in}, N'={n_out}")
        for a in range(side):
            for b in range(side):
                for m, (da, db) in enumerate(offsets):
                    if 0 <= a + da < side and 0 <= b + db < side:
                        op[a * side + b, m, (a + da) * side + (b + db)] = 1.0

    else:
        if n_in != 1 or n_out != 1:
            raise ShapeMismatchError("fully connected layers have N_l = N_(l+1) = 1")
        op[0, 0, 0] = 1.0

    return op


def _grid_side(layer_spec: LayerSpec) -> int:
    if layer_spec.grid_side is None:
        raise ShapeMismatchError("zeropad2d layer needs grid_side")
    return layer_spec.grid_side + 1


def site_index(spec: ArchSpec, layer: int, site) -> int:
    """0-based flat site from a user-facing index: 1..N for 1D, (i1, i2) in 0..N~ for 2D"""
    n_out = spec.spatial_dims[layer + 1]
    layer_spec = spec.layers[layer]
    if layer_spec.extractor == ExtractorKind.ZERO_PAD_2D:
        side = _grid_side(layer_spec)
        try:
            a, b = site
        except (TypeError, ValueError):
            raise InvalidSiteError(f"2D site must be a pair, got {site!r}")
        if not (0 <= a < side and 0 <= b < side):
            raise InvalidSiteError(f"site {site!r} outside the {side}x{side} grid")
        return a * side + b
    if isinstance(site, (tuple, list)) or not 1 <= int(site) <= n_out:
        raise InvalidSiteError(f"site {site!r} outside 1..{n_out}")
    return int(site) - 1


def extract_patch(spec: ArchSpec, layer: int, site, z) -> np.ndarray:
    """R^(i,l)(z) in mask order"""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != spec.spatial_dims[layer]:
        raise ShapeMismatchError(f"z has length {z.size}, layer {layer} has N={spec.spatial_dims[layer]}")
    op = extractor_operator(spec, layer)
    return op[site_index(spec, layer, site)] @ z


def _layer_violations(spec: ArchSpec, layer: int) -> List[str]:
    found = []
    layer_spec = spec.layers[layer]
    n_in = spec.spatial_dims[layer]
    n_out = spec.spatial_dims[layer + 1]
    tag = f"layer {layer} ({layer_spec.extractor.value})"

    if not layer_spec.precision > 0 or not math.isfinite(layer_spec.precision):
        found.append(f"{tag}: precision lambda must be positive")

    try:
        mask = default_mask(layer_spec)
    except ShapeMismatchError as e:
        return found + [f"{tag}: {e}"]
    if len(mask.elements) != mask.size:
        found.append(f"{tag}: mask cardinality {len(mask.elements)} differs from declared M={mask.size}")
    keys = [tuple(o) if isinstance(o, tuple) else o for o in mask.elements]
    if len(set(keys)) != len(keys):
        found.append(f"{tag}: mask offsets are not distinct")
    two_d = layer_spec.extractor == ExtractorKind.ZERO_PAD_2D
    if any(isinstance(o, tuple) != two_d for o in mask.elements):
        found.append(f"{tag}: mask offsets must be {'pairs' if two_d else 'integers'}")

    if layer_spec.extractor == ExtractorKind.CIRCULAR_1D:
        if n_out != n_in:
            found.append(f"{tag}: stride 1 needs N_(l+1) = N_l, got {n_out} and {n_in}")
        if layer_spec.halfwidth is not None and not 2 * layer_spec.halfwidth + 1 < n_in:
            found.append(f"{tag}: 2*halfwidth+1 < N fails ({2 * layer_spec.halfwidth + 1} vs {n_in})")
    elif layer_spec.extractor == ExtractorKind.CIRCULAR_1D_POOL2:
        if n_in != 2 * n_out:
            found.append(f"{tag}: pooling parity N_l = 2N_(l+1) fails ({n_in} vs {n_out})")
    elif layer_spec.extractor == ExtractorKind.ZERO_PAD_2D:
        if layer_spec.grid_side is None or layer_spec.grid_side < 0:
            found.append(f"{tag}: grid_side missing")
        else:
            side = layer_spec.grid_side + 1
            if n_in != side * side or n_out != n_in:
                found.append(f"{tag}: grid side {side} needs N_l = N_(l+1) = {side * side}, got {n_in} and {n_out}")
    else:
        if n_in != 1 or n_out != 1:
            found.append(f"{tag}: fully connected needs N_l = N_(l+1) = 1")
        if keys != [0]:
            found.append(f"{tag}: fully connected needs the single mask offset 0 (M = 1)")
    return found


def validate_arch(spec: ArchSpec, probe_stream: Optional[RngStream] = None) -> ArchReport:
    """Structural checks; violations come back as data"""
    found = []
    L = spec.hidden_layers
    if L < 0:
        found.append("hidden layer count L must be >= 0")
    if len(spec.spatial_dims) != L + 2:
        found.append(f"spatial_dims needs L+2 = {L + 2} entries, got {len(spec.spatial_dims)}")
    if any(n < 1 for n in spec.spatial_dims):
        found.append("spatial dimensions must be positive")
    for field in ("input_channels", "output_channels", "n_inputs"):
        if getattr(spec, field) < 1:
            found.append(f"{field} must be positive")
    if len(spec.slopes) != L:
        found.append(f"slopes needs L = {L} entries, got {len(spec.slopes)}")
    for idx, alpha in enumerate(spec.slopes, 1):
        if not (alpha > 0 and math.isfinite(alpha)):
            found.append(f"channel slope alpha_{idx} = {alpha} outside (0, inf)")
    if len(spec.layers) != L + 1:
        found.append(f"layers needs L+1 = {L + 1} blocks, got {len(spec.layers)}")

    if spec.activation.kind == ActivationKind.TABLE:
        if spec.activation.table is None:
            found.append("table activation without a table")
        else:
            found.extend(spec.activation.table.problems())

    if not found:
        for layer in range(L + 1):
            found.extend(_layer_violations(spec, layer))

    growth = []
    if probe_stream is not None and not found:
        for layer in range(L + 1):
            report = growth_probe(spec, layer, stream=probe_stream.split(f"growth-{layer}"))
            growth.append(report)
            if report.flagged:
                found.append(f"layer {layer}: growth probe order {report.order:.2f} reaches the quadratic limit")

    if found:
        logger.info("architecture %s has %d violations", spec.name, len(found))
    return ArchReport(passed=not found, violations=found, growth=growth)


def growth_probe(spec: ArchSpec, layer: int, samples: int = 64,
                 radii: Sequence[float] = DEFAULT_PROBE_RADII,
                 stream: Optional[RngStream] = None) -> GrowthReport:
    """Fitted log-log growth order of max |sigma(R z)| along random directions"""
    stream = stream or RngStream(0, ("growth", layer))
    op = extractor_operator(spec, layer)
    u = stream.generator().standard_normal((samples, spec.spatial_dims[layer]))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)

    radii = np.asarray(radii, dtype=float)
    peaks = np.array([
        np.max(np.abs(spec.activation(np.einsum("imn,sn->sim", op, r * u))))
        for r in radii
    ])
    usable = peaks > 0
    if usable.sum() < 2:
        order = 0.0
    else:
        order = float(np.polyfit(np.log(radii[usable]), np.log(peaks[usable]), 1)[0])
    flagged = order >= spec.growth_order_limit - spec.growth_tolerance
    return GrowthReport(layer=layer, order=order, flagged=flagged,
                        radii=radii.tolist(), peaks=peaks.tolist())

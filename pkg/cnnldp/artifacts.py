"""
Artifact persistence
CSV tables through pandas, nested results as JSON with hex-float matrices,
YAML experiment files and the per-run manifest
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, Field

from .errors import ConfigError, ShapeMismatchError
from .gauss import PsdMatrix
from .kernel import KernelChain

logger = logging.getLogger(__name__)

TENSOR_COLUMNS = ["c", "i", "mu", "value"]


def hex_encode(a) -> List:
    """Nested lists of float.hex strings, exact for every finite and infinite value"""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return float(a).hex()
    return [hex_encode(row) for row in a]


def hex_decode(data) -> np.ndarray:
    if isinstance(data, str):
        return np.array(float.fromhex(data))
    return np.array([hex_decode(row) for row in data], dtype=float)


def _jsonable(value):
    """Plain JSON types; non-finite floats become "inf", "-inf" or "nan" strings"""
    if isinstance(value, BaseModel):
        return _jsonable(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, payload: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def write_table(path: Path, table: pd.DataFrame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, lineterminator="\n")


def chain_to_dict(chain: KernelChain) -> Dict[str, Any]:
    payload = {
        "provenance": chain.provenance,
        "n_inputs": chain.kernels[0].n_inputs if chain.kernels else 1,
        "kernels": [hex_encode(k.entries) for k in chain.kernels],
    }
    if chain.stderrs is not None:
        payload["stderrs"] = [hex_encode(s) for s in chain.stderrs]
    return payload


def chain_from_dict(payload: Dict[str, Any]) -> KernelChain:
    n_inputs = int(payload.get("n_inputs", 1))
    kernels = [PsdMatrix(hex_decode(k), n_inputs=n_inputs, validate=False) for k in payload["kernels"]]
    stderrs = payload.get("stderrs")
    if stderrs is not None:
        stderrs = [hex_decode(s) for s in stderrs]
    return KernelChain(kernels, payload["provenance"], stderrs)


def chain_table(chain: KernelChain, **extra) -> pd.DataFrame:
    """Long table level,row,col,site_i,mu,site_j,nu,value[,stderr] with 1-based levels and sites"""
    rows = []
    for level, k in enumerate(chain.kernels, 1):
        err = chain.stderrs[level - 1] if chain.stderrs is not None else None
        for r in range(k.dim):
            si, mu = k.site_input(r)
            for c in range(k.dim):
                sj, nu = k.site_input(c)
                row = dict(extra)
                row.update({"level": level, "row": r, "col": c, "site_i": si + 1, "mu": mu + 1,
                            "site_j": sj + 1, "nu": nu + 1, "value": float(k.entries[r, c])})
                if err is not None:
                    row["stderr"] = float(err[r, c])
                rows.append(row)
    return pd.DataFrame(rows)


def read_tensor_csv(path: Path, shape: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
    """C x N x P tensor from rows c,i,mu,value (all indices 1-based)"""
    try:
        table = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    missing = [c for c in TENSOR_COLUMNS if c not in table.columns]
    if missing:
        raise ConfigError(f"{path}: missing columns {missing}")
    idx = table[["c", "i", "mu"]].to_numpy(dtype=int) - 1
    if np.any(idx < 0):
        raise ConfigError(f"{path}: indices are 1-based")
    if shape is None:
        shape = tuple(int(v) for v in idx.max(axis=0) + 1)
    elif np.any(idx >= np.asarray(shape)):
        raise ShapeMismatchError(f"{path}: indices exceed shape {shape}")
    out = np.zeros(shape)
    seen = np.zeros(shape, dtype=bool)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = table["value"].to_numpy(dtype=float)
    seen[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if not seen.all():
        raise ConfigError(f"{path}: {int((~seen).sum())} tensor entries missing")
    return out


def tensor_table(values: np.ndarray) -> pd.DataFrame:
    c, i, mu = np.indices(values.shape)
    return pd.DataFrame({"c": c.ravel() + 1, "i": i.ravel() + 1, "mu": mu.ravel() + 1,
                         "value": values.ravel()})


def write_tensor_csv(path: Path, values: np.ndarray):
    write_table(path, tensor_table(np.asarray(values, dtype=float)))


def load_yaml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot open config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return data


def dump_yaml(path: Path, model: BaseModel):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(model.model_dump(mode="json", exclude_none=True), f, sort_keys=False)


class QuantityRecord(BaseModel):
    """Where an emitted number came from"""

    name: str
    file: str
    samples: int
    seed_path: str


class Manifest(BaseModel):
    command: str
    status: int = 0
    seed: int
    version: str
    config: Dict[str, Any]
    workers: int
    started_at: str = ""
    finished_at: str = ""
    wall_time_s: float = 0.0
    quantities: List[QuantityRecord] = Field(default_factory=list)

    def record(self, name: str, file: str, samples: int, seed_path: str):
        self.quantities.append(QuantityRecord(name=name, file=file, samples=samples, seed_path=seed_path))


def write_summary(path: Path, lines: Iterable[str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")

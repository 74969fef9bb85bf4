"""
Checkpoint archives
One zip file per checkpoint: `meta.json`, `index.json` and one `.npy` member
per array (little-endian, dtype and shape in the npy header). Member order and
timestamps are fixed so identical contents give identical bytes apart from
`meta.created_at`.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
from pydantic import ValidationError

from ..models.reports import CheckpointMeta
from ..models.run_config import NetworkConfig
from ..utils.errors import CheckpointCorruptError, CheckpointShapeError, CheckpointVersionError
from ..utils.logger import get_logger
from .sr_network import ParameterSet, network_template

logger = get_logger()

FORMAT_VERSION = 1
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class OptimizerSnapshot:
    """Adam moments and step counter, detached from any live optimizer."""
    step: int
    first_moment: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    second_moment: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)


@dataclass
class Checkpoint:
    params: ParameterSet
    meta: CheckpointMeta
    optimizer: Optional[OptimizerSnapshot] = None
    alphas: Optional["OrderedDict[str, torch.Tensor]"] = None

    @property
    def network_cfg(self) -> NetworkConfig:
        return NetworkConfig.model_validate(self.meta.cfg)


def _to_le_array(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(
    params: ParameterSet,
    opt: Optional[OptimizerSnapshot],
    meta: CheckpointMeta,
    path: Union[str, Path],
    alphas: Optional[Dict[str, torch.Tensor]] = None,
) -> Path:
    """Write atomically: the archive appears under `path` only once complete."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    groups: "OrderedDict[str, Dict[str, torch.Tensor]]" = OrderedDict()
    groups["params"] = params.entries
    if opt is not None:
        groups["opt_m"] = opt.first_moment
        groups["opt_v"] = opt.second_moment
    if alphas is not None:
        groups["alpha"] = {name: alphas[name] for name in params.names}

    index = []
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "meta.json", meta.model_dump_json(indent=2).encode("utf-8"))
        for group, arrays in groups.items():
            for name, tensor in arrays.items():
                arr = _to_le_array(tensor)
                index.append({"group": group, "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
                _write_member(zf, f"{group}/{name}.npy", _npy_bytes(arr))
        opt_step = opt.step if opt is not None else None
        _write_member(zf, "index.json", json.dumps({"arrays": index, "opt_step": opt_step}, indent=2).encode("utf-8"))
    os.replace(tmp, path)

    logger.info("checkpoint_saved", path=str(path), step=meta.step, kind=meta.kind, arrays=len(index))
    return path


def _read_archive(path: Path):
    try:
        with zipfile.ZipFile(path, "r") as zf:
            bad = zf.testzip()
            if bad is not None:
                raise CheckpointCorruptError(f"{path}: CRC mismatch in member '{bad}'")
            meta_raw = json.loads(zf.read("meta.json"))
            index = json.loads(zf.read("index.json"))
            arrays = OrderedDict()
            for entry in index["arrays"]:
                member = f"{entry['group']}/{entry['name']}.npy"
                arr = np.load(io.BytesIO(zf.read(member)), allow_pickle=False)
                if list(arr.shape) != entry["shape"] or arr.dtype.str != entry["dtype"]:
                    raise CheckpointCorruptError(f"{path}: member '{member}' disagrees with the index")
                arrays[(entry["group"], entry["name"])] = arr
    except CheckpointCorruptError:
        raise
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable checkpoint ({exc})") from exc
    return meta_raw, index, arrays


def load_checkpoint(path: Union[str, Path], expected_cfg: Optional[NetworkConfig] = None) -> Checkpoint:
    """Load everything or raise; no partially restored state is ever returned."""
    path = Path(path)
    meta_raw, index, arrays = _read_archive(path)

    version = meta_raw.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        meta = CheckpointMeta.model_validate(meta_raw)
        stored_cfg = NetworkConfig.model_validate(meta.cfg)
    except ValidationError as exc:
        raise CheckpointCorruptError(f"{path}: invalid metadata ({exc.error_count()} errors)") from exc

    cfg = expected_cfg or stored_cfg
    expected_shapes = {name: tuple(p.shape) for name, p in network_template(cfg).named_parameters()}

    def group(name: str) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k[1], torch.from_numpy(v.copy())) for k, v in arrays.items() if k[0] == name)

    entries = group("params")
    if set(entries) != set(expected_shapes):
        raise CheckpointShapeError(f"{path}: parameter names do not match the network config")
    for name, shape in expected_shapes.items():
        if tuple(entries[name].shape) != shape:
            raise CheckpointShapeError(f"{path}: '{name}' has shape {tuple(entries[name].shape)}, config implies {shape}")
    ordered = OrderedDict((name, entries[name]) for name in expected_shapes)
    params = ParameterSet(ordered, cfg=cfg)

    opt = None
    if index.get("opt_step") is not None:
        opt = OptimizerSnapshot(step=int(index["opt_step"]), first_moment=group("opt_m"), second_moment=group("opt_v"))
    alphas = group("alpha") or None

    logger.info("checkpoint_loaded", path=str(path), step=meta.step, kind=meta.kind)
    return Checkpoint(params=params, meta=meta, optimizer=opt, alphas=alphas)


def make_meta(
    cfg: NetworkConfig,
    encoder_id: str,
    seed: int,
    step: int,
    loss_weights: Dict[str, float],
    kind: str = "train",
    extra: Optional[Dict] = None,
) -> CheckpointMeta:
    return CheckpointMeta(
        format_version=FORMAT_VERSION,
        cfg=cfg.model_dump(mode="json"),
        encoder_id=encoder_id,
        seed=seed,
        step=step,
        loss_weights=loss_weights,
        kind=kind,
        extra=extra or {},
    )

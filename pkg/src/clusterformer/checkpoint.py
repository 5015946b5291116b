"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes  b"CLFMCKPT"
    version  uint32
    hlen     uint64   length of the JSON header
    header   hlen bytes, UTF-8 JSON
    data     float64 little-endian values of every tensor, back to back
    rng      raw torch RNG state bytes
    crc      uint32   CRC-32 of everything above

The header holds the model config, a tensor table of
``{"name", "shape", "dtype", "offset", "count"}`` entries (offset and count
in float64 elements), per-layer centroid epochs and bank counters, the Adam
step and hyperparameters, and the RNG blob length. Every stored dtype
(float32, float64, small integers) converts to float64 exactly, so a round
trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ClusterFormerModel, ModelConfig, build_model
from .nn import Adam

MAGIC = b"CLFMCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


@dataclass
class LoadedCheckpoint:
    model: ClusterFormerModel
    optimizer: Adam | None
    extra: dict = field(default_factory=dict)


def _collect(model: ClusterFormerModel, optimizer: Adam | None) -> tuple[dict[str, np.ndarray], dict]:
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {"layers": {}}
    for name, t in model.state_dict().items():
        tensors[f"model/{name}"] = t.detach().cpu().numpy()
    for i, layer in enumerate(model.layers):
        if hasattr(layer, "centroids"):
            tensors[f"centroids/{i}"] = layer.centroids.vectors
            tensors[f"bank/{i}"] = layer.bank.rows()
            meta["layers"][str(i)] = {"epoch": layer.centroids.epoch, "total_pushed": layer.bank.total_pushed}
    if optimizer is not None:
        st = optimizer.state
        meta["adam"] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}
        for name, m in st.first_moment.items():
            tensors[f"adam_m/{name}"] = m.detach().cpu().numpy()
            tensors[f"adam_v/{name}"] = st.second_moment[name].detach().cpu().numpy()
    return tensors, meta


def save_checkpoint(
    path: str | Path,
    model: ClusterFormerModel,
    optimizer: Adam | None = None,
    extra: dict | None = None,
) -> None:
    tensors, meta = _collect(model, optimizer)
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        table.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset, "count": flat.size})
        chunks.append(flat.tobytes())
        offset += flat.size
    rng = torch.get_rng_state().numpy().tobytes()
    header = {
        "config": model.cfg.to_dict(),
        "iteration": model.iteration,
        "tensors": table,
        "rng_bytes": len(rng),
        "extra": extra or {},
        **meta,
    }
    hbytes = json.dumps(header).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks) + rng
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def _read(path: str | Path) -> tuple[dict, bytes, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 4:
        raise CheckpointCorrupt(f"{path}: truncated ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointCorrupt(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorrupt(f"{path}: checksum mismatch (truncated or damaged)")
    start = _PREFIX.size
    header = json.loads(body[start : start + hlen])
    rest = body[start + hlen :]
    nrng = header["rng_bytes"]
    return header, rest[: len(rest) - nrng], rest[len(rest) - nrng :]


def load_checkpoint(path: str | Path, model: ClusterFormerModel | None = None) -> LoadedCheckpoint:
    """Restore a model (built from the stored config unless one is given), its optimizer and RNG state."""
    header, data, rng = _read(path)
    values = np.frombuffer(data, dtype="<f8")
    arrays = {}
    for ent in header["tensors"]:
        a = values[ent["offset"] : ent["offset"] + ent["count"]]
        if a.size != ent["count"]:
            raise CheckpointCorrupt(f"{path}: tensor {ent['name']!r} runs past the data section")
        arrays[ent["name"]] = a.reshape(ent["shape"]).astype(ent["dtype"])
    if model is None:
        model = build_model(ModelConfig(**header["config"]))

    sd = model.state_dict()
    loaded = {}
    for name, ref in sd.items():
        key = f"model/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        if tuple(arrays[key].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for tensor {key!r}: checkpoint {tuple(arrays[key].shape)}, model {tuple(ref.shape)}"
            )
        loaded[name] = torch.from_numpy(arrays[key].copy()).to(ref.dtype)
    model.load_state_dict(loaded)

    for i, layer in enumerate(model.layers):
        if not hasattr(layer, "centroids"):
            continue
        info = header["layers"].get(str(i))
        if info is None:
            raise CheckpointError(f"checkpoint has no centroids for layer {i}")
        vec = arrays[f"centroids/{i}"]
        if vec.shape[1:] != layer.centroids.vectors.shape[1:]:
            raise CheckpointError(f"shape mismatch for tensor 'centroids/{i}': {vec.shape}")
        layer.centroids = type(layer.centroids)(vec.copy(), info["epoch"])
        bank = arrays[f"bank/{i}"]
        if bank.size and bank.shape[1] != layer.bank.d:
            raise CheckpointError(f"shape mismatch for tensor 'bank/{i}': {bank.shape}")
        layer.bank.load_state_dict({"rows": bank, "total_pushed": info["total_pushed"]})
    model.iteration = header["iteration"]

    optimizer = None
    if "adam" in header:
        a = header["adam"]
        optimizer = Adam(model.named_parameters(), lr=a["lr"], betas=(a["beta1"], a["beta2"]), eps=a["eps"])
        optimizer.state.step = a["step"]
        for name, p in optimizer.params.items():
            if f"adam_m/{name}" in arrays:
                optimizer.state.first_moment[name] = torch.from_numpy(arrays[f"adam_m/{name}"].copy()).to(p.dtype)
                optimizer.state.second_moment[name] = torch.from_numpy(arrays[f"adam_v/{name}"].copy()).to(p.dtype)
    torch.set_rng_state(torch.from_numpy(np.frombuffer(rng, dtype=np.uint8).copy()))
    return LoadedCheckpoint(model, optimizer, header.get("extra", {}))

"""Binary checkpoints and content hashing.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every tensor of the network's state dict as raw little-endian bytes in
header order. Floating tensors are stored as float64, which round-trips
float32 and float64 parameters bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from causalpe.cpeflow import CpeConfig
from causalpe.errors import ArtifactError
from causalpe.estimator import Estimator, Standardizer, build_net
from causalpe.graph import DependencyMask
from causalpe.tasks import make_task

MAGIC = b"CPECKPT1"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


def config_hash(obj) -> str:
    return sha256_hex(canonical_json(obj))


def _storage_dtype(t: torch.Tensor) -> np.dtype:
    if t.dtype.is_floating_point:
        return np.dtype("<f8")
    if t.dtype == torch.bool:
        return np.dtype("|b1")
    return np.dtype("<i8")


def checkpoint_bytes(est: Estimator, seed: int = 0, run_config_hash: str = "", condition_all: bool = False) -> bytes:
    net = est.net
    entries, chunks, offset = [], [], 0
    for name, t in net.state_dict().items():
        dt = _storage_dtype(t)
        raw = np.ascontiguousarray(t.detach().cpu().numpy().astype(dt)).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "torch_dtype": str(t.dtype).removeprefix("torch."),
                        "storage": dt.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "variant": est.variant,
        "task": est.task.name,
        "seed": int(seed),
        "condition_all": bool(condition_all),
        "d_x": int(net.d_x),
        "net_config": net.config.to_dict(),
        "mask": net.mask.to_dict(),
        "standardizer": est.standardizer.to_dict(),
        "config_hash": run_config_hash,
        "payload_sha256": sha256_hex(payload),
        "tensors": entries,
    }
    head = canonical_json(header).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def save_checkpoint(path, est: Estimator, **kwargs) -> str:
    data = checkpoint_bytes(est, **kwargs)
    with open(path, "wb") as fh:
        fh.write(data)
    return sha256_hex(data)


def read_header(data: bytes) -> tuple[dict, bytes]:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ArtifactError("not a CPE checkpoint (bad magic bytes)")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupted checkpoint header: {exc}") from exc
    payload = data[start + n:]
    if sha256_hex(payload) != header.get("payload_sha256"):
        raise ArtifactError("checkpoint payload does not match its recorded hash (truncated or corrupted)")
    return header, payload


def estimator_from_bytes(data: bytes) -> tuple[Estimator, dict]:
    header, payload = read_header(data)
    try:
        task = make_task(header["task"])
        config = CpeConfig(**header["net_config"])
        net = build_net(task, header["variant"], config, header["seed"], header["condition_all"])
        if net.mask != DependencyMask.from_dict(header["mask"]):
            raise ArtifactError("checkpoint mask does not match the task's posterior program")
        state = {}
        for e in header["tensors"]:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["storage"])).reshape(e["shape"])
            state[e["name"]] = torch.as_tensor(arr.copy(), dtype=getattr(torch, e["torch_dtype"]))
        net.load_state_dict(state)
        std = Standardizer.from_dict(header["standardizer"])
    except ArtifactError:
        raise
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise ArtifactError(f"invalid checkpoint: {exc}") from exc
    return Estimator(task, net, std), header


def load_checkpoint(path) -> tuple[Estimator, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc
    return estimator_from_bytes(data)

"""Binary checkpoint files.

Layout: ``b"TFCK"``, format version (u32 LE), header length (u32 LE), a
UTF-8 JSON header, then every array as contiguous little-endian float64
in header order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from twinforge.learner.policy import NORM_KEYS, PARAM_KEYS, PolicyParams
from twinforge.learner.ppo import AdamState

MAGIC = b"TFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class PolicyCheckpoint:
    params: PolicyParams
    opt: AdamState
    global_step: int
    mean_eval_reward: float
    is_best: bool = False
    success_rate: float = 0.0
    meta: dict = field(default_factory=dict)


def _arrays(ckpt: PolicyCheckpoint) -> list[tuple[str, np.ndarray]]:
    out = [(k, ckpt.params[k]) for k in PARAM_KEYS + NORM_KEYS]
    out += [(f"adam_m/{k}", ckpt.opt.m[k]) for k in PARAM_KEYS]
    out += [(f"adam_v/{k}", ckpt.opt.v[k]) for k in PARAM_KEYS]
    return out


def encode_checkpoint(ckpt: PolicyCheckpoint) -> bytes:
    arrays = _arrays(ckpt)
    header = {
        "global_step": int(ckpt.global_step),
        "mean_eval_reward": float(ckpt.mean_eval_reward),
        "success_rate": float(ckpt.success_rate),
        "is_best": bool(ckpt.is_best),
        "a_max": float(ckpt.params.a_max),
        "adam_t": int(ckpt.opt.t),
        "meta": ckpt.meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + body


def _parse_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    return header, 12 + hlen


def decode_checkpoint(data: bytes) -> PolicyCheckpoint:
    header, offset = _parse_header(data)
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(data):
            raise CheckpointError("truncated checkpoint body")
        arrays[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    params = PolicyParams({k: arrays[k] for k in PARAM_KEYS + NORM_KEYS}, header["a_max"])
    opt = AdamState(
        {k: arrays[f"adam_m/{k}"] for k in PARAM_KEYS},
        {k: arrays[f"adam_v/{k}"] for k in PARAM_KEYS},
        header["adam_t"],
    )
    return PolicyCheckpoint(
        params=params,
        opt=opt,
        global_step=header["global_step"],
        mean_eval_reward=header["mean_eval_reward"],
        is_best=header["is_best"],
        success_rate=header.get("success_rate", 0.0),
        meta=header.get("meta", {}),
    )


def save_checkpoint(ckpt: PolicyCheckpoint, path: str | Path) -> Path:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".tfck", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode_checkpoint(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> PolicyCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())


def read_header(path: str | Path) -> dict:
    return _parse_header(Path(path).read_bytes())[0]


def list_checkpoints(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob("ckpt_*.tfck"))


def find_best_checkpoint(directory: str | Path) -> Path:
    best = [p for p in list_checkpoints(directory) if read_header(p)["is_best"]]
    if len(best) != 1:
        raise CheckpointError(f"expected exactly one best checkpoint in {directory}, found {len(best)}")
    return best[0]

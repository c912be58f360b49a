"""DSCN-T1 tensor files: one JSON header line, then little-endian f32 payload."""
import json
import math
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetIOError, IntegrityError

MAGIC_DTYPE = "f32"


def encode_tensor(t) -> bytes:
    arr = np.asarray(_as_numpy(t), dtype="<f4", order="C")   # ascontiguousarray would promote 0-d
    header = json.dumps({"dtype": MAGIC_DTYPE, "shape": list(arr.shape)}, separators=(",", ":"))
    return header.encode("ascii") + b"\n" + arr.tobytes()


def decode_tensor(blob: bytes, source="<bytes>") -> torch.Tensor:
    nl = blob.find(b"\n")
    if nl < 0:
        raise IntegrityError(f"{source}: missing DSCN-T1 header line")
    try:
        header = json.loads(blob[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source}: bad header ({exc})") from None
    if header.get("dtype") != MAGIC_DTYPE or not isinstance(header.get("shape"), list):
        raise IntegrityError(f"{source}: unsupported header {header!r}")
    shape = [int(d) for d in header["shape"]]
    payload = blob[nl + 1:]
    expected = math.prod(shape) * 4
    if len(payload) != expected:
        raise IntegrityError(f"{source}: payload is {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return torch.from_numpy(arr)


def save_tensor(path, t) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))


def load_tensor(path) -> torch.Tensor:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(path, exc.strerror or str(exc)) from None
    return decode_tensor(blob, source=str(path))


def _as_numpy(t):
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)
